//! Multilayer perceptron: dense layers with optional layer normalisation and
//! inverted dropout on hidden layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var, LAYER_NORM_EPS};
use super::{Gradients, Matrix, NnError, Parameterized};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: Matrix,
    pub offset: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// in x out
    pub weight: Matrix,
    /// 1 x out
    pub bias: Matrix,
    pub activation: Activation,
    /// Applied after the activation.
    pub norm: Option<LayerNormParams>,
    /// Inverted dropout after activation/normalisation, train mode only.
    pub dropout: f64,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Architecture description used to build an [`MlpParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub layer_norm: bool,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<DenseLayer>,
}

/// Tape handles for one registration of an [`MlpParams`].
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub vars: Vec<Var>,
}

impl MlpParams {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases, unit LN gain.
    pub fn init<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Self {
        let mut dims = vec![spec.input];
        dims.extend(&spec.hidden);
        dims.push(spec.output);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut weight = Matrix::zeros(fan_in, fan_out);
                weight
                    .as_mut_slice()
                    .iter_mut()
                    .for_each(|w| *w = rng.random_range(-bound..bound));
                let mut bias = Matrix::zeros(1, fan_out);
                bias.as_mut_slice()
                    .iter_mut()
                    .for_each(|b| *b = rng.random_range(-bound..bound));
                let hidden = i + 1 < n;
                DenseLayer {
                    weight,
                    bias,
                    activation: if hidden {
                        spec.hidden_activation
                    } else {
                        spec.output_activation
                    },
                    norm: (hidden && spec.layer_norm).then(|| LayerNormParams {
                        gain: Matrix::filled(1, fan_out, 1.0),
                        offset: Matrix::zeros(1, fan_out),
                    }),
                    dropout: if hidden { spec.dropout } else { 0.0 },
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::out_dim)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        for w in self.layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(NnError::Shape(format!(
                    "layer widths do not compose: {} -> {}",
                    w[0].out_dim(),
                    w[1].in_dim()
                )));
            }
        }
        for l in &self.layers {
            if l.bias.shape() != (1, l.out_dim()) {
                return Err(NnError::Shape("bias shape".into()));
            }
        }
        Ok(())
    }

    /// Evaluation-mode forward pass on a batch (rows are samples).
    pub fn forward(&self, input: &Matrix) -> Result<Matrix, NnError> {
        if input.cols() != self.input_dim() {
            return Err(NnError::Shape(format!(
                "mlp expects {} inputs, got {}",
                self.input_dim(),
                input.cols()
            )));
        }
        let mut x = input.clone();
        for layer in &self.layers {
            let mut h = x.matmul(&layer.weight)?.add_row_broadcast(&layer.bias)?;
            h = h.map(|z| layer.activation.apply(z));
            if let Some(ln) = &layer.norm {
                h = layer_norm_plain(&h, ln);
            }
            x = h;
        }
        if !x.all_finite() {
            return Err(NnError::NonFinite("mlp forward".into()));
        }
        Ok(x)
    }

    /// Single-sample convenience wrapper.
    pub fn forward_vec(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        Ok(self.forward(&Matrix::row_vector(input))?.into_vec())
    }

    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        let vars = self
            .tensors()
            .into_iter()
            .map(|t| tape.param(t.clone()))
            .collect();
        MlpVars { vars }
    }

    /// Forward pass on the tape. Dropout is active iff `dropout_rng` is given.
    pub fn forward_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &MlpVars,
        input: Var,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<Var, NnError> {
        if tape.value(input).cols() != self.input_dim() {
            return Err(NnError::Shape(format!(
                "mlp expects {} inputs, got {}",
                self.input_dim(),
                tape.value(input).cols()
            )));
        }
        let mut x = input;
        let mut k = 0;
        for layer in &self.layers {
            let (w, b) = (vars.vars[k], vars.vars[k + 1]);
            k += 2;
            let mut h = tape.matmul(x, w)?;
            h = tape.add_row(h, b)?;
            h = match layer.activation {
                Activation::Identity => h,
                Activation::Relu => tape.relu(h)?,
                Activation::Tanh => tape.tanh(h)?,
            };
            if layer.norm.is_some() {
                let (g, o) = (vars.vars[k], vars.vars[k + 1]);
                k += 2;
                h = tape.layer_norm(h, g, o)?;
            }
            if layer.dropout > 0.0 {
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    let (rows, cols) = tape.value(h).shape();
                    let mask = dropout_mask(rows, cols, layer.dropout, rng);
                    h = tape.dropout(h, mask)?;
                }
            }
            x = h;
        }
        Ok(x)
    }
}

impl MlpVars {
    /// Gradients in the order of [`Parameterized::tensors`].
    pub fn grads(&self, g: &Gradients, params: &MlpParams) -> Vec<Matrix> {
        self.vars
            .iter()
            .zip(params.tensors())
            .map(|(&v, t)| g.get_or_zeros(v, t))
            .collect()
    }
}

impl Parameterized for MlpParams {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
            if let Some(n) = &l.norm {
                out.push(&n.gain);
                out.push(&n.offset);
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some(n) = &mut l.norm {
                out.push(&mut n.gain);
                out.push(&mut n.offset);
            }
        }
        out
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push(format!("layer{i}.weight"));
            out.push(format!("layer{i}.bias"));
            if l.norm.is_some() {
                out.push(format!("layer{i}.ln_gain"));
                out.push(format!("layer{i}.ln_offset"));
            }
        }
        out
    }
}

fn layer_norm_plain(h: &Matrix, ln: &LayerNormParams) -> Matrix {
    let mut out = h.clone();
    let cols = h.cols();
    for r in 0..h.rows() {
        let row = h.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (row[c] - mean) * inv * ln.gain.as_slice()[c] + ln.offset.as_slice()[c];
        }
    }
    out
}

/// Bernoulli keep-mask scaled by 1/(1-p).
pub fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Matrix {
    let keep = 1.0 - p;
    let mut m = Matrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        if rng.random::<f64>() < keep {
            *v = 1.0 / keep;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(ln: bool) -> MlpSpec {
        MlpSpec {
            input: 5,
            hidden: vec![7, 6],
            output: 3,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Tanh,
            layer_norm: ln,
            dropout: 0.0,
        }
    }

    /// Scalar-loop evaluator kept deliberately separate from the batched kernels.
    fn naive_forward(p: &MlpParams, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for l in &p.layers {
            let mut next = vec![0.0; l.out_dim()];
            for (j, n) in next.iter_mut().enumerate() {
                let mut s = l.bias.get(0, j);
                for (i, xi) in cur.iter().enumerate() {
                    s += xi * l.weight.get(i, j);
                }
                *n = match l.activation {
                    Activation::Identity => s,
                    Activation::Relu => {
                        if s > 0.0 {
                            s
                        } else {
                            0.0
                        }
                    }
                    Activation::Tanh => s.tanh(),
                };
            }
            if let Some(ln) = &l.norm {
                let m: f64 = next.iter().sum::<f64>() / next.len() as f64;
                let v: f64 = next.iter().map(|a| (a - m).powi(2)).sum::<f64>() / next.len() as f64;
                for (j, n) in next.iter_mut().enumerate() {
                    *n = (*n - m) / (v + 1e-5).sqrt() * ln.gain.get(0, j) + ln.offset.get(0, j);
                }
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn zero_params_with_tanh_output_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = MlpParams::init(&spec(false), &mut rng);
        for t in p.tensors_mut() {
            t.scale_in_place(0.0);
        }
        let out = p.forward_vec(&[1.0, -2.0, 3.0, 0.5, 0.1]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_relu_layer() {
        let p = MlpParams {
            layers: vec![DenseLayer {
                weight: Matrix::identity(2),
                bias: Matrix::zeros(1, 2),
                activation: Activation::Relu,
                norm: None,
                dropout: 0.0,
            }],
        };
        assert_eq!(p.forward_vec(&[-1.0, 2.0]).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn batched_forward_matches_naive_evaluator() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = MlpParams::init(&spec(seed % 2 == 0), &mut rng);
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a = p.forward_vec(&x).unwrap();
            let b = naive_forward(&p, &x);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() <= 1e-12, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn tape_forward_matches_plain_forward_in_eval_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MlpParams::init(&spec(true), &mut rng);
        let x = Matrix::from_rows(&[vec![0.1, 0.2, -0.3, 1.0, 0.0], vec![1.0; 5]]).unwrap();
        let mut tape = Tape::new();
        let vars = p.register(&mut tape);
        let xi = tape.constant(x.clone());
        let out = p
            .forward_tape::<ChaCha8Rng>(&mut tape, &vars, xi, None)
            .unwrap();
        assert_eq!(tape.value(out), &p.forward(&x).unwrap());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MlpParams::init(&spec(false), &mut rng);
        assert!(p.forward_vec(&[1.0, 2.0]).is_err());
        let mut bad = p.clone();
        bad.layers.swap(0, 1);
        assert!(bad.validate().is_err());
        assert!(p.validate().is_ok());
    }

    #[test]
    fn dropout_mask_is_inverted_scaled() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = dropout_mask(200, 50, 0.1, &mut rng);
        let kept = m.as_slice().iter().filter(|&&v| v > 0.0).count() as f64 / m.len() as f64;
        assert!((kept - 0.9).abs() < 0.02);
        assert!(m.as_slice().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-15));
    }
}
