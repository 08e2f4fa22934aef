//! Feedforward binary classifier with an explicit penultimate layer and
//! hand-written reverse-mode gradients.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NirError, Result};
use crate::matrix::Matrix;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const PROB_FLOOR: f64 = 1e-300;
const PROB_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

/// Layer widths of the network. Every hidden layer is rectified; the last
/// hidden layer is the penultimate representation and feeds a single-logit
/// linear head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden_dims,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(NirError::Config("input_dim must be at least 1".into()));
        }
        match self.hidden_dims.last() {
            None => Err(NirError::Config(
                "at least one hidden layer is required".into(),
            )),
            Some(&d) if d < 2 => Err(NirError::Config(
                "penultimate width must be at least 2".into(),
            )),
            _ if self.hidden_dims.contains(&0) => {
                Err(NirError::Config("hidden widths must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Width `d` of the penultimate layer.
    pub fn penultimate_dim(&self) -> usize {
        *self.hidden_dims.last().expect("validated architecture")
    }

    /// `(fan_out, fan_in)` of every affine map, head included.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &w in &self.hidden_dims {
            shapes.push((w, fan_in));
            fan_in = w;
        }
        shapes.push((1, fan_in));
        shapes
    }
}

/// Weight matrix (out × in) and bias of one affine map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(fan_out: usize, fan_in: usize) -> Self {
        Self {
            weights: Matrix::zeros(fan_out, fan_in),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.as_slice().len() + self.bias.len()
    }

    fn is_finite(&self) -> bool {
        self.weights.is_finite() && self.bias.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub architecture: Architecture,
    /// Hidden layers in order, then the head.
    pub layers: Vec<Dense>,
}

/// Parameter gradients; same layout as [`ModelParams::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weights.rows(), l.weights.cols()))
                .collect(),
        }
    }

    /// All entries, layer by layer, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }
}

fn flatten_layers(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(l.weights.as_slice());
        out.extend_from_slice(&l.bias);
    }
    out
}

impl ModelParams {
    /// Scaled-uniform initialization: weights `U(−1/√fan_in, 1/√fan_in)`,
    /// biases zero.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(fan_out, fan_in)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut layer = Dense::zeros(fan_out, fan_in);
                for w in layer.weights.as_mut_slice() {
                    *w = rng.gen_range(-bound..bound);
                }
                layer
            })
            .collect();
        Ok(Self {
            architecture: arch.clone(),
            layers,
        })
    }

    /// Every parameter set to zero.
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            architecture: arch.clone(),
            layers: arch
                .layer_shapes()
                .into_iter()
                .map(|(o, i)| Dense::zeros(o, i))
                .collect(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// All entries, layer by layer, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    /// Mutable reference to the `index`-th entry in [`flatten`](Self::flatten) order.
    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for layer in &mut self.layers {
            let nw = layer.weights.as_slice().len();
            if index < nw {
                return &mut layer.weights.as_mut_slice()[index];
            }
            index -= nw;
            if index < layer.bias.len() {
                return &mut layer.bias[index];
            }
            index -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    fn check_shapes(&self) -> Result<()> {
        self.architecture.validate()?;
        let shapes = self.architecture.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(NirError::Contract(format!(
                "{} layers stored, architecture needs {}",
                self.layers.len(),
                shapes.len()
            )));
        }
        for (i, ((o, n), l)) in shapes.iter().zip(&self.layers).enumerate() {
            if l.weights.shape() != (*o, *n) || l.bias.len() != *o {
                return Err(NirError::Contract(format!(
                    "layer {i} has shape {:?}/{}, expected {o}x{n}",
                    l.weights.shape(),
                    l.bias.len()
                )));
            }
        }
        if !self.is_finite() {
            return Err(NirError::Contract("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn to_checkpoint_string(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Out<'a> {
            format_version: u32,
            #[serde(flatten)]
            params: &'a ModelParams,
        }
        serde_json::to_string_pretty(&Out {
            format_version: CHECKPOINT_FORMAT_VERSION,
            params: self,
        })
        .map_err(|e| NirError::Serialization(e.to_string()))
    }

    pub fn from_checkpoint_str(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct In {
            format_version: u32,
            #[serde(flatten)]
            params: ModelParams,
        }
        let parsed: In =
            serde_json::from_str(s).map_err(|e| NirError::Serialization(e.to_string()))?;
        if parsed.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(NirError::Serialization(format!(
                "unsupported checkpoint format_version {}",
                parsed.format_version
            )));
        }
        parsed.params.check_shapes()?;
        Ok(parsed.params)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_string()?).map_err(|e| NirError::io(path, e))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| NirError::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }
}

/// Logistic function, evaluated on the branch that cannot overflow and kept
/// strictly inside (0, 1).
pub fn sigmoid(s: f64) -> f64 {
    let p = if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    };
    p.clamp(PROB_FLOOR, PROB_CEIL)
}

/// Cached forward pass over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `activations[0]` is the input batch, `activations[l]` the rectified
    /// output of hidden layer `l`; the last entry is the penultimate `Z`.
    pub activations: Vec<Matrix>,
    /// Pre-rectifier values of each hidden layer.
    pub pre_activations: Vec<Matrix>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ForwardTrace {
    /// Penultimate activations `Z` (B × d).
    pub fn penultimate(&self) -> &Matrix {
        self.activations
            .last()
            .expect("trace has at least one hidden layer")
    }

    pub fn batch_size(&self) -> usize {
        self.logits.len()
    }
}

fn affine(x: &Matrix, layer: &Dense) -> Matrix {
    let mut out = x.matmul_transposed(&layer.weights);
    for r in 0..out.rows() {
        for (v, b) in out.row_mut(r).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    out
}

pub fn forward(params: &ModelParams, x: &Matrix) -> Result<ForwardTrace> {
    let arch = &params.architecture;
    if x.cols() != arch.input_dim {
        return Err(NirError::Contract(format!(
            "input has {} columns, model expects {}",
            x.cols(),
            arch.input_dim
        )));
    }
    if x.rows() == 0 {
        return Err(NirError::Contract("empty batch".into()));
    }
    if !x.is_finite() {
        return Err(NirError::Validation {
            row: (0..x.rows())
                .find(|&r| !x.row(r).iter().all(|v| v.is_finite()))
                .map_or(0, |r| r + 1),
            message: "non-finite input".into(),
        });
    }

    let (hidden, head) = params.layers.split_at(params.layers.len() - 1);
    let mut activations = Vec::with_capacity(hidden.len() + 1);
    let mut pre_activations = Vec::with_capacity(hidden.len());
    activations.push(x.clone());
    for layer in hidden {
        let pre = affine(activations.last().unwrap(), layer);
        activations.push(pre.map(|v| v.max(0.0)));
        pre_activations.push(pre);
    }
    let logits = affine(activations.last().unwrap(), &head[0])
        .as_slice()
        .to_vec();
    let probs = logits.iter().map(|&s| sigmoid(s)).collect();
    Ok(ForwardTrace {
        activations,
        pre_activations,
        logits,
        probs,
    })
}

/// Reverse pass from two injection points: `dl_dz` on the penultimate
/// activations and `dl_dlogits` on the logits. Returns the gradient of
/// `⟨dl_dz, Z⟩ + ⟨dl_dlogits, s⟩` w.r.t. every parameter.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    dl_dz: &Matrix,
    dl_dlogits: &[f64],
) -> Result<Gradients> {
    let b = trace.batch_size();
    let z = trace.penultimate();
    if dl_dz.shape() != z.shape() {
        return Err(NirError::Contract(format!(
            "dL/dZ has shape {:?}, penultimate activations are {:?}",
            dl_dz.shape(),
            z.shape()
        )));
    }
    if dl_dlogits.len() != b {
        return Err(NirError::Contract(format!(
            "dL/dlogits has length {}, batch is {b}",
            dl_dlogits.len()
        )));
    }
    let n_hidden = params.layers.len() - 1;
    let mut grads = Gradients::zeros_like(params);

    // Head: s = Z w + c.
    let delta = Matrix::from_vec(b, 1, dl_dlogits.to_vec())?;
    let head = &params.layers[n_hidden];
    grads.layers[n_hidden].weights = delta.transpose_matmul(z);
    grads.layers[n_hidden].bias = vec![dl_dlogits.iter().sum()];
    let mut upstream = delta.matmul(&head.weights);
    for (u, g) in upstream.as_mut_slice().iter_mut().zip(dl_dz.as_slice()) {
        *u += g;
    }

    for l in (0..n_hidden).rev() {
        let pre = &trace.pre_activations[l];
        let mut delta = upstream;
        for (d, &p) in delta.as_mut_slice().iter_mut().zip(pre.as_slice()) {
            if p <= 0.0 {
                *d = 0.0;
            }
        }
        let input = &trace.activations[l];
        grads.layers[l].weights = delta.transpose_matmul(input);
        let mut bias = vec![0.0; delta.cols()];
        for r in 0..delta.rows() {
            for (acc, v) in bias.iter_mut().zip(delta.row(r)) {
                *acc += v;
            }
        }
        grads.layers[l].bias = bias;
        upstream = if l > 0 {
            delta.matmul(&params.layers[l].weights)
        } else {
            Matrix::zeros(0, 0)
        };
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(m: usize, hidden: &[usize]) -> Architecture {
        Architecture::new(m, hidden.to_vec()).unwrap()
    }

    #[test]
    fn init_shapes_and_determinism() {
        let a = arch(4, &[8, 6]);
        let p = ModelParams::init(&a, 3).unwrap();
        let shapes: Vec<_> = p
            .layers
            .iter()
            .map(|l| (l.weights.shape(), l.bias.len()))
            .collect();
        assert_eq!(shapes, vec![((8, 4), 8), ((6, 8), 6), ((1, 6), 1)]);
        assert!(p.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert_eq!(p, ModelParams::init(&a, 3).unwrap());
        assert_ne!(p, ModelParams::init(&a, 4).unwrap());
    }

    #[test]
    fn init_moment_matches_scaled_uniform() {
        // Var of U(−a, a) is a²/3.
        let m = 10_000;
        let a = arch(m, &[1, 2]);
        let p = ModelParams::init(&a, 0).unwrap();
        let w = p.layers[0].weights.as_slice();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let expected = (1.0 / (m as f64).sqrt()) / 3f64.sqrt();
        assert!((var.sqrt() - expected).abs() / expected < 0.1);
    }

    #[test]
    fn architecture_validation() {
        assert!(Architecture::new(4, vec![]).is_err());
        assert!(Architecture::new(4, vec![8, 1]).is_err());
        assert!(Architecture::new(4, vec![0, 4]).is_err());
        assert!(Architecture::new(0, vec![4]).is_err());
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        // σ(2) = 1/(1+e⁻²); e⁻² = 0.1353352832366127 (series-checked).
        assert!((sigmoid(2.0) - 0.8807970779778823).abs() < 1e-15);
        for s in [-1000.0, -700.0, 700.0, 1000.0] {
            let p = sigmoid(s);
            assert!(p > 0.0 && p < 1.0);
            assert!((1e-300..=1.0 - 1e-16).contains(&p));
        }
        assert!((sigmoid(-3.0) + sigmoid(3.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_params_give_half() {
        let a = arch(3, &[4, 2]);
        let p = ModelParams::zeros(&a).unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]]);
        let t = forward(&p, &x).unwrap();
        assert!(t.penultimate().as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(t.logits, vec![0.0, 0.0]);
        assert_eq!(t.probs, vec![0.5, 0.5]);
    }

    #[test]
    fn hand_evaluated_tiny_net() {
        // m = 1, hidden = [2] (d must be ≥ 2), head 1×2.
        let a = arch(1, &[2]);
        let mut p = ModelParams::zeros(&a).unwrap();
        p.layers[0].weights = Matrix::from_rows(&[[1.0], [-2.0]]);
        p.layers[0].bias = vec![0.5, 0.25];
        p.layers[1].weights = Matrix::from_rows(&[[3.0, 7.0]]);
        p.layers[1].bias = vec![-1.0];
        let t = forward(&p, &Matrix::from_rows(&[[2.0]])).unwrap();
        // pre = [2.5, −3.75], z = [2.5, 0], s = 3·2.5 − 1 = 6.5
        assert_eq!(t.pre_activations[0].row(0), &[2.5, -3.75]);
        assert_eq!(t.penultimate().row(0), &[2.5, 0.0]);
        assert_eq!(t.logits, vec![6.5]);
        assert_eq!(t.probs[0], 1.0 / (1.0 + (-6.5f64).exp()));
    }

    #[test]
    fn forward_rejects_bad_input() {
        let a = arch(2, &[3]);
        let p = ModelParams::init(&a, 0).unwrap();
        assert!(forward(&p, &Matrix::from_rows(&[[1.0, 2.0, 3.0]])).is_err());
        let err = forward(&p, &Matrix::from_rows(&[[1.0, 2.0], [f64::NAN, 0.0]])).unwrap_err();
        assert!(matches!(err, NirError::Validation { row: 2, .. }));
    }

    #[test]
    fn zero_injection_gives_zero_gradient() {
        let a = arch(3, &[5, 4]);
        let p = ModelParams::init(&a, 1).unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.1, -0.7]]);
        let t = forward(&p, &x).unwrap();
        let g = backward(&p, &t, &Matrix::zeros(2, 4), &[0.0, 0.0]).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(backward(&p, &t, &Matrix::zeros(2, 3), &[0.0, 0.0]).is_err());
        assert!(backward(&p, &t, &Matrix::zeros(2, 4), &[0.0]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = ModelParams::init(&arch(5, &[7, 3]), 9).unwrap();
        let text = p.to_checkpoint_string().unwrap();
        let q = ModelParams::from_checkpoint_str(&text).unwrap();
        let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(p.flatten()), bits(q.flatten()));
        assert_eq!(p.architecture, q.architecture);

        let wrong = text.replace("\"format_version\": 1", "\"format_version\": 99");
        assert!(ModelParams::from_checkpoint_str(&wrong).is_err());
    }
}
