use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use super::{
    assemble_prompt, effective_reward, stack_forward, ContextSpec, CriticError, PromptColumns, PromptMatrix,
    Readout, RowRef, StackOp, StackPlan,
};
use crate::features::{FeatureParams, FeatureSpec};
use crate::mdp::TransitionDataset;
use crate::nn::{Gradients, Matrix, MlpVars, Parameterized, Tape, Var};
use crate::retrieval::RetrievedContext;

pub const C_INIT_SCALE: f64 = 0.1;
pub const C_INIT_NOISE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct CriticSpec {
    pub features: FeatureSpec,
    pub layers: usize,
    pub n_context: usize,
    pub gamma: f64,
    pub beta_rtg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticParams {
    pub features: FeatureParams,
    pub cs: Vec<Matrix>,
    pub gamma: f64,
    pub beta_rtg: f64,
    pub n_context: usize,
    pub readout: Readout,
}

/// Tape handles for one registered copy of the critic.
#[derive(Clone, Debug)]
pub struct CriticVars {
    pub features: MlpVars,
    pub cs: Vec<Var>,
}

impl CriticSpec {
    pub fn validate(&self) -> Result<(), CriticError> {
        if self.layers == 0 {
            return Err(CriticError::Invalid("layers must be at least 1".into()));
        }
        if self.n_context == 0 {
            return Err(CriticError::Invalid("context length must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(CriticError::Invalid(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.beta_rtg) {
            return Err(CriticError::Invalid(format!("beta_rtg {} outside [0, 1]", self.beta_rtg)));
        }
        Ok(())
    }
}

impl CriticParams {
    /// Features from the MLP initializer; C_ℓ = 0.1·I + N(0, 0.01²).
    pub fn init<R: Rng + ?Sized>(spec: &CriticSpec, rng: &mut R) -> Result<Self, CriticError> {
        spec.validate()?;
        let features = FeatureParams::init(&spec.features, rng);
        let d = spec.features.d;
        let noise = Normal::new(0.0, C_INIT_NOISE).expect("positive std");
        let cs = (0..spec.layers)
            .map(|_| {
                let mut c = Matrix::identity(d).scale(C_INIT_SCALE);
                for x in c.as_mut_slice() {
                    *x += noise.sample(rng);
                }
                c
            })
            .collect();
        Ok(Self {
            features,
            cs,
            gamma: spec.gamma,
            beta_rtg: spec.beta_rtg,
            n_context: spec.n_context,
            readout: Readout::Negated,
        })
    }

    pub fn d(&self) -> usize {
        self.features.d
    }

    pub fn layers(&self) -> usize {
        self.cs.len()
    }

    pub fn xi_scale(&self) -> f64 {
        self.gamma * self.beta_rtg
    }

    pub fn c_refs(&self) -> Vec<&Matrix> {
        self.cs.iter().collect()
    }

    pub fn register(&self, tape: &mut Tape) -> CriticVars {
        let features = self.features.mlp.register(tape);
        let cs = self.cs.iter().map(|c| tape.param(c.clone())).collect();
        CriticVars { features, cs }
    }

    /// Adds the stack as a single node fed by `blocks` and the registered C's.
    pub fn stack_tape(
        &self,
        tape: &mut Tape,
        vars: &CriticVars,
        blocks: &[Var],
        plan: StackPlan,
    ) -> Result<Var, CriticError> {
        let (op, value) = {
            let bm: Vec<&Matrix> = blocks.iter().map(|&b| tape.value(b)).collect();
            let cm: Vec<&Matrix> = vars.cs.iter().map(|&c| tape.value(c)).collect();
            StackOp::forward(&bm, &cm, plan)?
        };
        let inputs = blocks.iter().chain(&vars.cs).copied().collect();
        Ok(tape.custom(Box::new(op), inputs, value)?)
    }
}

impl CriticVars {
    /// Gradients in the order of [`Parameterized::tensors`].
    pub fn grads(&self, g: &Gradients, params: &CriticParams) -> Vec<Matrix> {
        let mut out = self.features.grads(g, &params.features.mlp);
        out.extend(self.cs.iter().zip(&params.cs).map(|(&v, c)| g.get_or_zeros(v, c)));
        out
    }
}

impl Parameterized for CriticParams {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut t = self.features.tensors();
        t.extend(self.cs.iter());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut t = self.features.tensors_mut();
        t.extend(self.cs.iter_mut());
        t
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut n = self.features.tensor_names();
        n.extend((0..self.cs.len()).map(|l| format!("c.{l}")));
        n
    }
}

/// Deduplicated network inputs (state ‖ encoded action), one per row.
#[derive(Clone, Debug)]
pub struct InputRows {
    width: usize,
    data: Vec<f64>,
    lookup: HashMap<Vec<u64>, usize>,
    scratch: Vec<f64>,
}

impl InputRows {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            data: Vec::new(),
            lookup: HashMap::new(),
            scratch: Vec::with_capacity(width),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.width.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row index of (s, a), appending it if unseen.
    pub fn push(&mut self, features: &FeatureParams, s: &[f64], a: &[f64]) -> Result<usize, CriticError> {
        self.scratch.clear();
        features.encode_into(s, a, &mut self.scratch)?;
        let key: Vec<u64> = self.scratch.iter().map(|x| x.to_bits()).collect();
        if let Some(&r) = self.lookup.get(&key) {
            return Ok(r);
        }
        let r = self.len();
        self.data.extend_from_slice(&self.scratch);
        self.lookup.insert(key, r);
        Ok(r)
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.len(), self.width, self.data.clone()).expect("consistent width")
    }
}

/// Context columns for `transitions`, with feature rows in block `block` of
/// `rows`. Terminal transitions get φ' = 0.
pub fn context_plan(
    features: &FeatureParams,
    dataset: &TransitionDataset,
    transitions: &[usize],
    gamma: f64,
    beta_rtg: f64,
    rows: &mut InputRows,
    block: usize,
) -> Result<ContextSpec, CriticError> {
    let mut spec = ContextSpec {
        phi: Vec::with_capacity(transitions.len()),
        phi_next: Vec::with_capacity(transitions.len()),
        r_eff: Vec::with_capacity(transitions.len()),
    };
    for &ti in transitions {
        let t = dataset
            .transitions
            .get(ti)
            .ok_or_else(|| CriticError::Invalid(format!("context refers to missing transition {ti}")))?;
        spec.phi.push(RowRef::new(block, rows.push(features, &t.s, &t.a)?));
        let next = if t.terminal {
            None
        } else {
            let a_next = t.a_next.as_ref().ok_or_else(|| {
                CriticError::Invalid(format!("transition {ti} has no next action and is not terminal"))
            })?;
            Some(RowRef::new(block, rows.push(features, &t.s_next, a_next)?))
        };
        spec.phi_next.push(next);
        spec.r_eff.push(effective_reward(t.r, t.rtg, t.rtg_next, gamma, beta_rtg));
    }
    Ok(spec)
}

/// Q̂(s, a | Ω) for one query.
pub fn critic_forward(
    params: &CriticParams,
    dataset: &TransitionDataset,
    context: &RetrievedContext,
    s: &[f64],
    a: &[f64],
) -> Result<f64, CriticError> {
    Ok(critic_forward_batch(params, dataset, &[context], &[(s.to_vec(), a.to_vec())])?[0])
}

/// Elementwise [`critic_forward`] over aligned contexts and queries.
pub fn critic_forward_batch(
    params: &CriticParams,
    dataset: &TransitionDataset,
    contexts: &[&RetrievedContext],
    queries: &[(Vec<f64>, Vec<f64>)],
) -> Result<Vec<f64>, CriticError> {
    if contexts.len() != queries.len() {
        return Err(CriticError::Shape(format!(
            "{} contexts for {} queries",
            contexts.len(),
            queries.len()
        )));
    }
    let mut rows = InputRows::new(params.features.input_dim());
    let mut plan = StackPlan {
        contexts: Vec::with_capacity(contexts.len()),
        queries: Vec::with_capacity(queries.len()),
        xi_scale: params.xi_scale(),
        readout: params.readout,
    };
    for (i, (ctx, (s, a))) in contexts.iter().zip(queries).enumerate() {
        if ctx.len() != params.n_context {
            return Err(CriticError::Shape(format!(
                "context of size {} but the critic expects {}",
                ctx.len(),
                params.n_context
            )));
        }
        plan.contexts.push(context_plan(
            &params.features,
            dataset,
            &ctx.transitions,
            params.gamma,
            params.beta_rtg,
            &mut rows,
            0,
        )?);
        let q = rows.push(&params.features, s, a)?;
        plan.queries.push((i, RowRef::new(0, q)));
    }
    let phi = params.features.featurize_encoded(&rows.to_matrix())?;
    Ok(stack_forward(&[&phi], &params.c_refs(), &plan)?.q)
}

/// Z₀ for a retrieved context and a query, featurized in evaluation mode.
pub fn build_prompt(
    params: &CriticParams,
    dataset: &TransitionDataset,
    context: &RetrievedContext,
    s: &[f64],
    a: &[f64],
) -> Result<PromptMatrix, CriticError> {
    let d = params.d();
    let mut phi = Vec::with_capacity(context.len());
    let mut phi_next = Vec::with_capacity(context.len());
    let mut rewards = Vec::with_capacity(context.len());
    let mut rtg = Vec::with_capacity(context.len());
    let mut rtg_next = Vec::with_capacity(context.len());
    for &ti in &context.transitions {
        let t = dataset
            .transitions
            .get(ti)
            .ok_or_else(|| CriticError::Invalid(format!("context refers to missing transition {ti}")))?;
        phi.push(params.features.featurize(&t.s, &t.a)?);
        phi_next.push(match (&t.a_next, t.terminal) {
            (_, true) => vec![0.0; d],
            (Some(a_next), false) => params.features.featurize(&t.s_next, a_next)?,
            (None, false) => {
                return Err(CriticError::Invalid(format!(
                    "transition {ti} has no next action and is not terminal"
                )))
            }
        });
        rewards.push(t.r);
        rtg.push(t.rtg);
        rtg_next.push(t.rtg_next);
    }
    let query = params.features.featurize(s, a)?;
    assemble_prompt(
        &PromptColumns {
            phi: &phi,
            phi_next: &phi_next,
            rewards: &rewards,
            rtg: Some((&rtg, &rtg_next)),
        },
        &query,
        params.gamma,
        params.beta_rtg,
    )
}

/// The structured stack applied to explicit feature-space columns.
pub fn forward_columns(
    cs: &[Matrix],
    cols: &PromptColumns<'_>,
    query_phi: &[f64],
    gamma: f64,
    beta_rtg: f64,
    readout: Readout,
) -> Result<f64, CriticError> {
    let n = cols.phi.len();
    if n == 0 {
        return Err(CriticError::EmptyContext);
    }
    if cols.phi_next.len() != n || cols.rewards.len() != n {
        return Err(CriticError::Shape("context columns have different lengths".into()));
    }
    let r_eff: Vec<f64> = match cols.rtg {
        Some((rtg, rtg_next)) if rtg.len() == n && rtg_next.len() == n => (0..n)
            .map(|j| effective_reward(cols.rewards[j], rtg[j], rtg_next[j], gamma, beta_rtg))
            .collect(),
        Some(_) => return Err(CriticError::Shape("RTG columns have the wrong length".into())),
        None if beta_rtg < 1.0 => return Err(CriticError::MissingRtg),
        None => cols.rewards.to_vec(),
    };
    let mut all: Vec<Vec<f64>> = Vec::with_capacity(2 * n + 1);
    all.extend(cols.phi.iter().cloned());
    all.extend(cols.phi_next.iter().cloned());
    all.push(query_phi.to_vec());
    let block = Matrix::from_rows(&all)?;
    let plan = StackPlan {
        contexts: vec![ContextSpec {
            phi: (0..n).map(|j| RowRef::new(0, j)).collect(),
            phi_next: (0..n).map(|j| Some(RowRef::new(0, n + j))).collect(),
            r_eff,
        }],
        queries: vec![(0, RowRef::new(0, 2 * n))],
        xi_scale: gamma * beta_rtg,
        readout,
    };
    let refs: Vec<&Matrix> = cs.iter().collect();
    Ok(stack_forward(&[&block], &refs, &plan)?.q[0])
}

/// Per-layer histograms of C_ℓ entries as CSV.
pub fn c_histogram_csv(params: &CriticParams, bins: usize) -> String {
    let bins = bins.max(1);
    let meta = json!({
        "kind": "c_histogram",
        "layers": params.layers(),
        "d": params.d(),
        "bins": bins,
    });
    let mut out = format!("# {meta}\nlayer,bin_lo,bin_hi,count\n");
    for (l, c) in params.cs.iter().enumerate() {
        let vals = c.as_slice();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let mut counts = vec![0usize; bins];
        for &v in vals {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        for (b, n) in counts.iter().enumerate() {
            let a = lo + b as f64 * width;
            out.push_str(&format!("{l},{a},{},{n}\n", a + width));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::dense_forward;
    use crate::mdp::ActionSpace;
    use crate::nn::gradcheck::check_gradients;
    use crate::oracle::{td_iterates, OracleTransition};
    use crate::rng::stream;
    use rand::RngCore;

    fn rand_vec(rng: &mut impl RngCore, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rand_c(rng: &mut impl RngCore, d: usize, scale: f64) -> Matrix {
        Matrix::from_vec(d, d, (0..d * d).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    #[test]
    fn single_step_example() {
        let phi = vec![vec![1.0, 0.0]];
        let next = vec![vec![0.0, 0.0]];
        let cs = vec![Matrix::identity(2)];
        let cols = PromptColumns {
            phi: &phi,
            phi_next: &next,
            rewards: &[1.0],
            rtg: None,
        };
        let q = forward_columns(&cs, &cols, &[0.5, 0.0], 0.9, 1.0, Readout::Negated).unwrap();
        assert!((q - 0.5).abs() < 1e-15);
        let zero = vec![Matrix::zeros(2, 2); 3];
        assert_eq!(forward_columns(&zero, &cols, &[0.5, 0.0], 0.9, 1.0, Readout::Negated).unwrap(), 0.0);
    }

    #[test]
    fn structured_dense_and_oracle_agree() {
        let mut rng = stream(11, "critic-test");
        for &(d, n, l, gamma, beta) in &[(2, 1, 1, 0.9, 1.0), (4, 5, 3, 0.99, 0.5), (3, 7, 6, 0.0, 0.0)] {
            let phi: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut rng, d)).collect();
            let next: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut rng, d)).collect();
            let r = rand_vec(&mut rng, n);
            let rtg = rand_vec(&mut rng, n);
            let rtg_next = rand_vec(&mut rng, n);
            let q = rand_vec(&mut rng, d);
            let cs: Vec<Matrix> = (0..l).map(|_| rand_c(&mut rng, d, 0.5)).collect();
            let cols = PromptColumns {
                phi: &phi,
                phi_next: &next,
                rewards: &r,
                rtg: Some((&rtg, &rtg_next)),
            };
            let fast = forward_columns(&cs, &cols, &q, gamma, beta, Readout::Negated).unwrap();
            let prompt = assemble_prompt(&cols, &q, gamma, beta).unwrap();
            let dense = dense_forward(&prompt, &cs).unwrap();
            let ctx: Vec<OracleTransition> = (0..n)
                .map(|j| OracleTransition {
                    phi: phi[j].clone(),
                    phi_next: next[j].clone(),
                    r: r[j],
                    rtg: rtg[j],
                    rtg_next: rtg_next[j],
                })
                .collect();
            let c_rows: Vec<Vec<Vec<f64>>> = cs
                .iter()
                .map(|c| (0..d).map(|i| c.row(i).to_vec()).collect())
                .collect();
            let oracle = td_iterates(&ctx, &q, &c_rows, gamma, beta).unwrap().q_hat;
            let tol = 1e-10 * oracle.abs().max(1e-3);
            assert!((fast - oracle).abs() <= tol, "{fast} vs {oracle}");
            assert!((dense - oracle).abs() <= tol, "{dense} vs {oracle}");
            let raw = forward_columns(&cs, &cols, &q, gamma, beta, Readout::Raw).unwrap();
            assert_eq!(raw, -fast);
        }
    }

    /// Wraps C matrices and a feature block so the stack can be gradient-checked.
    #[derive(Clone)]
    struct StackProbe {
        feats: Matrix,
        cs: Vec<Matrix>,
    }

    impl Parameterized for StackProbe {
        fn tensors(&self) -> Vec<&Matrix> {
            let mut t = vec![&self.feats];
            t.extend(self.cs.iter());
            t
        }
        fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
            let mut t = vec![&mut self.feats];
            t.extend(self.cs.iter_mut());
            t
        }
        fn tensor_names(&self) -> Vec<String> {
            let mut n = vec!["feats".to_string()];
            n.extend((0..self.cs.len()).map(|l| format!("c.{l}")));
            n
        }
    }

    #[test]
    fn stack_gradients_match_finite_differences() {
        let mut rng = stream(3, "stack-grad");
        let (d, rows, layers) = (3, 9, 3);
        let probe = StackProbe {
            feats: Matrix::from_vec(rows, d, (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
            cs: (0..layers).map(|_| rand_c(&mut rng, d, 0.8)).collect(),
        };
        let plan = StackPlan {
            contexts: vec![
                ContextSpec {
                    phi: vec![RowRef::new(0, 0), RowRef::new(0, 1), RowRef::new(0, 2)],
                    phi_next: vec![Some(RowRef::new(0, 1)), Some(RowRef::new(0, 3)), None],
                    r_eff: vec![0.5, -1.0, 2.0],
                },
                ContextSpec {
                    phi: vec![RowRef::new(0, 4), RowRef::new(0, 5)],
                    phi_next: vec![Some(RowRef::new(0, 6)), Some(RowRef::new(0, 4))],
                    r_eff: vec![1.0, 0.3],
                },
                ContextSpec {
                    phi: vec![RowRef::new(0, 7)],
                    phi_next: vec![None],
                    r_eff: vec![1.0],
                },
            ],
            queries: vec![
                (0, RowRef::new(0, 8)),
                (0, RowRef::new(0, 2)),
                (1, RowRef::new(0, 8)),
                (2, RowRef::new(0, 0)),
            ],
            xi_scale: 0.9 * 0.7,
            readout: Readout::Negated,
        };
        let weights = [1.0, -0.5, 2.0, 0.0];
        let loss_of = |p: &StackProbe| {
            let cs: Vec<&Matrix> = p.cs.iter().collect();
            let out = stack_forward(&[&p.feats], &cs, &plan).unwrap();
            out.q.iter().zip(weights).map(|(q, w)| w * q * q).sum::<f64>()
        };
        let mut tape = Tape::new();
        let f = tape.param(probe.feats.clone());
        let cvars: Vec<Var> = probe.cs.iter().map(|c| tape.param(c.clone())).collect();
        let (op, value) = {
            let cs: Vec<&Matrix> = cvars.iter().map(|&c| tape.value(c)).collect();
            StackOp::forward(&[tape.value(f)], &cs, plan.clone()).unwrap()
        };
        let mut inputs = vec![f];
        inputs.extend(&cvars);
        let q = tape.custom(Box::new(op), inputs, value).unwrap();
        let sq = tape.square(q).unwrap();
        let loss = tape.weighted_mean(sq, weights.to_vec()).unwrap();
        let g = tape.backward(loss).unwrap();
        // weighted_mean divides by the entry count.
        let wsum = weights.len() as f64;
        let analytic: Vec<Matrix> = std::iter::once(f)
            .chain(cvars.iter().copied())
            .zip(probe.tensors())
            .map(|(v, t)| g.get_or_zeros(v, t).scale(wsum))
            .collect();
        let report = check_gradients(&probe, &analytic, 1, loss_of);
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn init_shapes_and_histogram() {
        let spec = CriticSpec {
            features: FeatureSpec {
                state_dim: 2,
                action_space: ActionSpace::Discrete(3),
                hidden: vec![8],
                d: 4,
                layer_norm: true,
                dropout: 0.1,
            },
            layers: 3,
            n_context: 5,
            gamma: 0.9,
            beta_rtg: 1.0,
        };
        let p = CriticParams::init(&spec, &mut stream(1, "init")).unwrap();
        assert_eq!(p.cs.len(), 3);
        for c in &p.cs {
            assert!((c.get(0, 0) - 0.1).abs() < 0.06);
            assert!(c.get(0, 1).abs() < 0.06);
        }
        let csv = c_histogram_csv(&p, 4);
        assert_eq!(csv.lines().count(), 2 + 3 * 4);
        let total: usize = csv
            .lines()
            .skip(2)
            .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
            .sum();
        assert_eq!(total, 3 * 16);
    }
}
