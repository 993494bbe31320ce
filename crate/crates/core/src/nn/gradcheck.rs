//! Central finite-difference gradient checks.

use super::{Matrix, Parameterized};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error, so that entries whose true
/// gradient is numerically zero are compared absolutely.
pub const GRAD_REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (tensor name, flat index, analytic, numeric) of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }

    pub fn merge(mut self, other: GradCheckReport) -> GradCheckReport {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_REL_FLOOR)
}

/// Compares `analytic` (ordered like `params.tensors()`) against central
/// differences of `loss`. `stride` > 1 checks every stride-th entry.
pub fn check_gradients<P, F>(
    params: &P,
    analytic: &[Matrix],
    stride: usize,
    mut loss: F,
) -> GradCheckReport
where
    P: Parameterized + Clone,
    F: FnMut(&P) -> f64,
{
    let names = params.tensor_names();
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let stride = stride.max(1);
    for (ti, name) in names.iter().enumerate() {
        let n = params.tensors()[ti].len();
        let mut j = 0;
        while j < n {
            let orig = params.tensors()[ti].as_slice()[j];
            work.tensors_mut()[ti].as_mut_slice()[j] = orig + FD_STEP;
            let up = loss(&work);
            work.tensors_mut()[ti].as_mut_slice()[j] = orig - FD_STEP;
            let down = loss(&work);
            work.tensors_mut()[ti].as_mut_slice()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[ti].as_slice()[j];
            let rel = relative_error(a, numeric);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), j, a, numeric));
            }
            j += stride;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, MlpParams, MlpSpec, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_tape_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = MlpSpec {
                input: 4,
                hidden: vec![6, 5],
                output: 3,
                hidden_activation: Activation::Relu,
                output_activation: Activation::Tanh,
                layer_norm: true,
                dropout: 0.0,
            };
            let p = MlpParams::init(&spec, &mut rng);
            let x = Matrix::from_vec(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let target = Matrix::from_vec(3, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let build = |p: &MlpParams, tape: &mut Tape| {
                let vars = p.register(tape);
                let xi = tape.constant(x.clone());
                let out = p.forward_tape::<ChaCha8Rng>(tape, &vars, xi, None).unwrap();
                let t = tape.constant(target.clone());
                let d = tape.sub(out, t).unwrap();
                let sq = tape.square(d).unwrap();
                let loss = tape.mean_all(sq).unwrap();
                (vars, loss)
            };
            let mut tape = Tape::new();
            let (vars, loss) = build(&p, &mut tape);
            let g = tape.backward(loss).unwrap();
            let analytic = vars.grads(&g, &p);
            let report = check_gradients(&p, &analytic, 1, |q| {
                let mut t = Tape::new();
                let (_, l) = build(q, &mut t);
                t.value(l).item()
            });
            assert!(report.passes(GRAD_REL_TOL), "seed {seed}: {report:?}");
        }
    }
}
