//! Policy networks: categorical (discrete actions), Gaussian with a learned
//! log-std vector, and deterministic tanh actors.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::TrainError;
use crate::mdp::ActionSpace;
use crate::nn::tape::softmax_rows;
use crate::nn::{Activation, Gradients, Matrix, MlpParams, MlpSpec, MlpVars, Parameterized, Tape, Var};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub enum PolicyParams {
    Categorical {
        net: MlpParams,
        n_actions: usize,
    },
    Gaussian {
        mean: MlpParams,
        /// 1 × action_dim.
        log_std: Matrix,
        low: f64,
        high: f64,
    },
    Deterministic {
        net: MlpParams,
        low: f64,
        high: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    Stochastic,
    Deterministic,
}

#[derive(Clone, Debug)]
pub struct PolicyVars {
    pub net: MlpVars,
    pub log_std: Option<Var>,
}

impl PolicyParams {
    /// Two hidden ReLU layers; the head depends on the action space and on
    /// whether a stochastic or deterministic actor is wanted.
    pub fn init<R: Rng + ?Sized>(
        state_dim: usize,
        space: ActionSpace,
        hidden: usize,
        dropout: f64,
        kind: PolicyKind,
        rng: &mut R,
    ) -> Result<Self, TrainError> {
        let spec = |output, out_act| MlpSpec {
            input: state_dim,
            hidden: vec![hidden, hidden],
            output,
            hidden_activation: Activation::Relu,
            output_activation: out_act,
            layer_norm: false,
            dropout,
        };
        Ok(match (space, kind) {
            (ActionSpace::Discrete(n), PolicyKind::Stochastic) => PolicyParams::Categorical {
                net: MlpParams::init(&spec(n, Activation::Identity), rng),
                n_actions: n,
            },
            (ActionSpace::Box { dim, low, high }, PolicyKind::Stochastic) => PolicyParams::Gaussian {
                mean: MlpParams::init(&spec(dim, Activation::Tanh), rng),
                log_std: Matrix::zeros(1, dim),
                low,
                high,
            },
            (ActionSpace::Box { dim, low, high }, PolicyKind::Deterministic) => PolicyParams::Deterministic {
                net: MlpParams::init(&spec(dim, Activation::Tanh), rng),
                low,
                high,
            },
            (ActionSpace::Discrete(_), PolicyKind::Deterministic) => {
                return Err(TrainError::Config(vec![
                    "a deterministic actor needs a continuous action space".into(),
                ]))
            }
        })
    }

    fn net(&self) -> &MlpParams {
        match self {
            PolicyParams::Categorical { net, .. } | PolicyParams::Deterministic { net, .. } => net,
            PolicyParams::Gaussian { mean, .. } => mean,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            PolicyParams::Categorical { .. } => 1,
            _ => self.net().output_dim(),
        }
    }

    fn bounds(&self) -> (f64, f64) {
        match *self {
            PolicyParams::Gaussian { low, high, .. } | PolicyParams::Deterministic { low, high, .. } => {
                (low, high)
            }
            PolicyParams::Categorical { n_actions, .. } => (0.0, n_actions as f64 - 1.0),
        }
    }

    /// Raw network output (logits, or tanh means in [−1, 1]) in eval mode.
    pub fn head(&self, states: &Matrix) -> Result<Matrix, TrainError> {
        Ok(self.net().forward(states)?)
    }

    /// Evaluation action per row: argmax for categorical, the mean for
    /// Gaussian and the actor output for deterministic policies.
    pub fn greedy(&self, states: &Matrix) -> Result<Vec<Vec<f64>>, TrainError> {
        let h = self.head(states)?;
        Ok((0..h.rows())
            .map(|r| match self {
                PolicyParams::Categorical { .. } => vec![argmax(h.row(r)) as f64],
                _ => self.squash(h.row(r)),
            })
            .collect())
    }

    pub fn greedy_one(&self, s: &[f64]) -> Result<Vec<f64>, TrainError> {
        Ok(self.greedy(&Matrix::row_vector(s))?.remove(0))
    }

    fn squash(&self, t: &[f64]) -> Vec<f64> {
        let (low, high) = self.bounds();
        let (c, h) = ((low + high) / 2.0, (high - low) / 2.0);
        t.iter().map(|x| c + h * x).collect()
    }

    /// Action probabilities of a categorical policy.
    pub fn probabilities(&self, states: &Matrix) -> Result<Matrix, TrainError> {
        match self {
            PolicyParams::Categorical { .. } => Ok(softmax_rows(&self.head(states)?)),
            _ => Err(TrainError::Config(vec!["probabilities need a categorical policy".into()])),
        }
    }

    /// `n` actions per state row. Gaussian samples are clipped to the action
    /// bounds; deterministic actors repeat their output.
    pub fn sample<R: Rng + ?Sized>(&self, states: &Matrix, n: usize, rng: &mut R) -> Result<Vec<Vec<Vec<f64>>>, TrainError> {
        let h = self.head(states)?;
        let mut out = Vec::with_capacity(h.rows());
        match self {
            PolicyParams::Categorical { .. } => {
                let p = softmax_rows(&h);
                for r in 0..p.rows() {
                    out.push(
                        (0..n)
                            .map(|_| vec![sample_categorical(p.row(r), rng) as f64])
                            .collect(),
                    );
                }
            }
            PolicyParams::Gaussian { log_std, low, high, .. } => {
                for r in 0..h.rows() {
                    let mean = self.squash(h.row(r));
                    out.push(
                        (0..n)
                            .map(|_| {
                                mean.iter()
                                    .zip(log_std.as_slice())
                                    .map(|(m, ls)| {
                                        let z: f64 = Distribution::<f64>::sample(&StandardNormal, rng);
                                        (m + ls.clamp(LOG_STD_MIN, LOG_STD_MAX).exp() * z).clamp(*low, *high)
                                    })
                                    .collect()
                            })
                            .collect(),
                    );
                }
            }
            PolicyParams::Deterministic { .. } => {
                for r in 0..h.rows() {
                    out.push(vec![self.squash(h.row(r)); n]);
                }
            }
        }
        Ok(out)
    }

    pub fn register(&self, tape: &mut Tape) -> PolicyVars {
        let net = self.net().register(tape);
        let log_std = match self {
            PolicyParams::Gaussian { log_std, .. } => Some(tape.param(log_std.clone())),
            _ => None,
        };
        PolicyVars { net, log_std }
    }

    /// Per-row log π(a|s) on the tape (B × 1).
    pub fn log_prob_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &PolicyVars,
        states: &Matrix,
        actions: &[Vec<f64>],
        dropout: Option<&mut R>,
    ) -> Result<Var, TrainError> {
        let x = tape.constant(states.clone());
        let h = self.net().forward_tape(tape, &vars.net, x, dropout)?;
        match self {
            PolicyParams::Categorical { .. } => {
                let a: Vec<usize> = actions.iter().map(|a| a[0] as usize).collect();
                Ok(tape.categorical_log_prob(h, a)?)
            }
            PolicyParams::Gaussian { .. } => {
                let mean = self.squash_tape(tape, h)?;
                let ls = vars.log_std.expect("gaussian policy registers log_std");
                let ls = tape.clamp(ls, LOG_STD_MIN, LOG_STD_MAX)?;
                Ok(tape.gaussian_log_prob(mean, ls, Matrix::from_rows(actions)?)?)
            }
            PolicyParams::Deterministic { .. } => Err(TrainError::Config(vec![
                "log-likelihood is undefined for a deterministic actor".into(),
            ])),
        }
    }

    /// Actor output π(s) on the tape (B × action_dim).
    pub fn action_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &PolicyVars,
        states: &Matrix,
        dropout: Option<&mut R>,
    ) -> Result<Var, TrainError> {
        let x = tape.constant(states.clone());
        let h = self.net().forward_tape(tape, &vars.net, x, dropout)?;
        match self {
            PolicyParams::Categorical { .. } => Err(TrainError::Config(vec![
                "a categorical policy has no differentiable action".into(),
            ])),
            _ => self.squash_tape(tape, h),
        }
    }

    fn squash_tape(&self, tape: &mut Tape, h: Var) -> Result<Var, TrainError> {
        let (low, high) = self.bounds();
        let (c, half) = ((low + high) / 2.0, (high - low) / 2.0);
        let mut y = h;
        if half != 1.0 {
            y = tape.scale(y, half)?;
        }
        if c != 0.0 {
            let cols = tape.value(y).cols();
            let center = tape.constant(Matrix::filled(1, cols, c));
            y = tape.add_row(y, center)?;
        }
        Ok(y)
    }
}

impl PolicyVars {
    pub fn grads(&self, g: &Gradients, params: &PolicyParams) -> Vec<Matrix> {
        let mut out = self.net.grads(g, params.net());
        if let (Some(v), PolicyParams::Gaussian { log_std, .. }) = (self.log_std, params) {
            out.push(g.get_or_zeros(v, log_std));
        }
        out
    }
}

impl Parameterized for PolicyParams {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut t = self.net().tensors();
        if let PolicyParams::Gaussian { log_std, .. } = self {
            t.push(log_std);
        }
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            PolicyParams::Categorical { net, .. } | PolicyParams::Deterministic { net, .. } => net.tensors_mut(),
            PolicyParams::Gaussian { mean, log_std, .. } => {
                let mut t = mean.tensors_mut();
                t.push(log_std);
                t
            }
        }
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut n: Vec<String> = self.net().tensor_names();
        if let PolicyParams::Gaussian { .. } = self {
            n.push("log_std".into());
        }
        n
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use crate::rng::stream;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_outputs_stay_in_bounds() {
        let mut rng = stream(2, "policy");
        let space = ActionSpace::Box { dim: 2, low: -0.5, high: 2.0 };
        let p = PolicyParams::init(3, space, 16, 0.0, PolicyKind::Deterministic, &mut rng).unwrap();
        for _ in 0..200 {
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(-10.0..10.0)).collect();
            let a = p.greedy_one(&s).unwrap();
            assert!(a.iter().all(|x| (-0.5..=2.0).contains(x)));
        }
    }

    #[test]
    fn categorical_samples_follow_probabilities() {
        let mut rng = stream(4, "policy");
        let p = PolicyParams::init(2, ActionSpace::Discrete(3), 8, 0.0, PolicyKind::Stochastic, &mut rng).unwrap();
        let s = Matrix::row_vector(&[0.3, -0.2]);
        let probs = p.probabilities(&s).unwrap();
        let draws = p.sample(&s, 20_000, &mut rng).unwrap();
        for a in 0..3 {
            let f = draws[0].iter().filter(|x| x[0] as usize == a).count() as f64 / 20_000.0;
            assert!((f - probs.get(0, a)).abs() < 0.02);
        }
    }

    #[test]
    fn log_prob_gradients_match_finite_differences() {
        let mut rng = stream(6, "policy");
        let states = Matrix::from_vec(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let space = ActionSpace::Box { dim: 2, low: -1.0, high: 1.0 };
        let mut p = PolicyParams::init(2, space, 6, 0.0, PolicyKind::Stochastic, &mut rng).unwrap();
        if let PolicyParams::Gaussian { log_std, .. } = &mut p {
            log_std.as_mut_slice().copy_from_slice(&[-0.3, 0.2]);
        }
        let actions = vec![vec![0.1, -0.4], vec![0.5, 0.5], vec![-0.9, 0.0]];
        let loss_of = |q: &PolicyParams| {
            let mut t = Tape::new();
            let v = q.register(&mut t);
            let lp = q.log_prob_tape::<ChaCha8Rng>(&mut t, &v, &states, &actions, None).unwrap();
            let l = t.mean_all(lp).unwrap();
            (t.value(l).item(), t.backward(l).unwrap(), v)
        };
        let (_, g, v) = loss_of(&p);
        let analytic = v.grads(&g, &p);
        let report = check_gradients(&p, &analytic, 1, |q| loss_of(q).0);
        assert!(report.passes(1e-4), "{report:?}");
    }
}
