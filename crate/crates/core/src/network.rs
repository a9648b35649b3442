//! Sparse σ3 networks, the masked parameter space and the C² cutoff.
//!
//! Parameters live in one flat vector. Layers are stored in order, each as an
//! `out × in` row-major weight matrix followed by its `out` biases:
//!
//! ```text
//! layer 0      : d → W   (dW + W)
//! layer 1..L-1 : W → W   (W² + W each)
//! layer L      : W → 1   (W + 1)
//! ```
//!
//! Hidden layers apply σ3, the output layer is affine. The mask `γ` indexes the
//! same layout.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jet::{sigma3, sigma3_derivs, Jet2};

/// Total parameter count for input dimension `d`, depth `L` and width `W`.
pub fn param_count(input_dim: usize, depth: usize, width: usize) -> usize {
    let (d, l, w) = (input_dim, depth, width);
    d * w + w + (l - 1) * (w * w + w) + w + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    pub depth: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

impl Architecture {
    /// Fully inactive architecture.
    pub fn empty(input_dim: usize, depth: usize, width: usize) -> Result<Self> {
        if input_dim == 0 || depth == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "architecture needs d, L, W >= 1 (got {input_dim}, {depth}, {width})"
            )));
        }
        Ok(Architecture {
            input_dim,
            depth,
            width,
            mask: vec![false; param_count(input_dim, depth, width)],
        })
    }

    pub fn num_params(&self) -> usize {
        self.mask.len()
    }

    pub fn sparsity(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Number of affine maps (`depth + 1`).
    pub fn num_layers(&self) -> usize {
        self.depth + 1
    }

    pub fn layer_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.width
        }
    }

    pub fn layer_out(&self, layer: usize) -> usize {
        if layer == self.depth {
            1
        } else {
            self.width
        }
    }

    /// Offset of the first weight of `layer`.
    pub fn layer_offset(&self, layer: usize) -> usize {
        (0..layer)
            .map(|l| self.layer_in(l) * self.layer_out(l) + self.layer_out(l))
            .sum()
    }

    pub fn weight_index(&self, layer: usize, out: usize, input: usize) -> usize {
        self.layer_offset(layer) + out * self.layer_in(layer) + input
    }

    pub fn bias_index(&self, layer: usize, out: usize) -> usize {
        self.layer_offset(layer) + self.layer_in(layer) * self.layer_out(layer) + out
    }

    /// Layer widths `[d, W, …, W, 1]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(std::iter::repeat_n(self.width, self.depth));
        w.push(1);
        w
    }

    /// Flat indices of every parameter attached to the last neuron of each
    /// hidden layer: its incoming weights, its bias and its outgoing weights.
    pub fn last_neuron_indices(&self) -> Vec<usize> {
        let last = self.width - 1;
        let mut idx = Vec::new();
        for h in 0..self.depth {
            for i in 0..self.layer_in(h) {
                idx.push(self.weight_index(h, last, i));
            }
            idx.push(self.bias_index(h, last));
            for o in 0..self.layer_out(h + 1) {
                idx.push(self.weight_index(h + 1, o, last));
            }
        }
        idx
    }
}

/// Network parameters `θ` with architecture and slab bound `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub arch: Architecture,
    pub theta: Vec<f64>,
    pub bound: f64,
}

impl NetworkParams {
    pub fn new(arch: Architecture, theta: Vec<f64>, bound: f64) -> Result<Self> {
        let p = NetworkParams { arch, theta, bound };
        p.validate()?;
        Ok(p)
    }

    /// All-zero parameters of the given shape.
    pub fn zeros(input_dim: usize, depth: usize, width: usize, bound: f64) -> Result<Self> {
        let arch = Architecture::empty(input_dim, depth, width)?;
        let t = arch.num_params();
        NetworkParams::new(arch, vec![0.0; t], bound)
    }

    /// Builds parameters from a dense vector, activating exactly its nonzeros.
    pub fn from_dense(
        input_dim: usize,
        depth: usize,
        width: usize,
        theta: Vec<f64>,
        bound: f64,
    ) -> Result<Self> {
        let mut arch = Architecture::empty(input_dim, depth, width)?;
        if theta.len() != arch.num_params() {
            return Err(Error::ParamLength {
                expected: arch.num_params(),
                got: theta.len(),
            });
        }
        for (m, t) in arch.mask.iter_mut().zip(&theta) {
            *m = *t != 0.0;
        }
        NetworkParams::new(arch, theta, bound)
    }

    pub fn validate(&self) -> Result<()> {
        let t = param_count(self.arch.input_dim, self.arch.depth, self.arch.width);
        if self.arch.mask.len() != t {
            return Err(Error::ParamLength {
                expected: t,
                got: self.arch.mask.len(),
            });
        }
        if self.theta.len() != t {
            return Err(Error::ParamLength {
                expected: t,
                got: self.theta.len(),
            });
        }
        if !(self.bound > 0.0) || !self.bound.is_finite() {
            return Err(Error::InvalidParams(format!(
                "bound must be positive and finite, got {}",
                self.bound
            )));
        }
        for (i, (&th, &m)) in self.theta.iter().zip(&self.arch.mask).enumerate() {
            if !th.is_finite() {
                return Err(Error::InvalidParams(format!("theta[{i}] is not finite")));
            }
            if !m && th != 0.0 {
                return Err(Error::InvalidParams(format!(
                    "theta[{i}] = {th} is masked out but nonzero"
                )));
            }
            if th.abs() > self.bound {
                return Err(Error::InvalidParams(format!(
                    "|theta[{i}]| = {} exceeds bound {}",
                    th.abs(),
                    self.bound
                )));
            }
        }
        Ok(())
    }

    pub fn max_abs_weight(&self) -> f64 {
        self.theta.iter().fold(0.0, |m, t| m.max(t.abs()))
    }

    pub fn sparsity(&self) -> usize {
        self.arch.sparsity()
    }

    /// Adds one inactive neuron at the end of every hidden layer.
    pub fn grow_width(&self) -> NetworkParams {
        let old = &self.arch;
        let mut arch = Architecture::empty(old.input_dim, old.depth, old.width + 1)
            .expect("grown architecture is valid");
        let mut theta = vec![0.0; arch.num_params()];
        for layer in 0..old.num_layers() {
            for o in 0..old.layer_out(layer) {
                for i in 0..old.layer_in(layer) {
                    let (src, dst) = (
                        old.weight_index(layer, o, i),
                        arch.weight_index(layer, o, i),
                    );
                    theta[dst] = self.theta[src];
                    arch.mask[dst] = old.mask[src];
                }
                let (src, dst) = (old.bias_index(layer, o), arch.bias_index(layer, o));
                theta[dst] = self.theta[src];
                arch.mask[dst] = old.mask[src];
            }
        }
        NetworkParams {
            arch,
            theta,
            bound: self.bound,
        }
    }

    /// Removes the last neuron of every hidden layer, provided none of its
    /// parameters are active. Returns `None` otherwise or when `W = 1`.
    pub fn shrink_width(&self) -> Option<NetworkParams> {
        let old = &self.arch;
        if old.width <= 1 {
            return None;
        }
        if old.last_neuron_indices().iter().any(|&i| old.mask[i]) {
            return None;
        }
        let mut arch = Architecture::empty(old.input_dim, old.depth, old.width - 1).ok()?;
        let mut theta = vec![0.0; arch.num_params()];
        for layer in 0..arch.num_layers() {
            for o in 0..arch.layer_out(layer) {
                for i in 0..arch.layer_in(layer) {
                    let (src, dst) = (
                        old.weight_index(layer, o, i),
                        arch.weight_index(layer, o, i),
                    );
                    theta[dst] = self.theta[src];
                    arch.mask[dst] = old.mask[src];
                }
                let (src, dst) = (old.bias_index(layer, o), arch.bias_index(layer, o));
                theta[dst] = self.theta[src];
                arch.mask[dst] = old.mask[src];
            }
        }
        Some(NetworkParams {
            arch,
            theta,
            bound: self.bound,
        })
    }

    pub fn evaluator(&self) -> Evaluator {
        Evaluator::new(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&NetworkJson::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: NetworkJson = serde_json::from_str(s)?;
        j.try_into()
    }
}

/// On-disk form of [`NetworkParams`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkJson {
    #[serde(rename = "L")]
    pub depth: usize,
    pub widths: Vec<usize>,
    /// Mask bits packed LSB-first into bytes, base64 encoded.
    pub gamma: String,
    pub theta: Vec<f64>,
    #[serde(rename = "B")]
    pub bound: f64,
}

pub fn encode_mask(mask: &[bool]) -> String {
    let mut bytes = vec![0u8; mask.len().div_ceil(8)];
    for (i, &b) in mask.iter().enumerate() {
        if b {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    BASE64.encode(bytes)
}

pub fn decode_mask(s: &str, len: usize) -> Result<Vec<bool>> {
    let bytes = BASE64
        .decode(s)
        .map_err(|e| Error::Decode(format!("gamma: {e}")))?;
    if bytes.len() != len.div_ceil(8) {
        return Err(Error::Decode(format!(
            "gamma has {} bytes, expected {}",
            bytes.len(),
            len.div_ceil(8)
        )));
    }
    Ok((0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

impl From<&NetworkParams> for NetworkJson {
    fn from(p: &NetworkParams) -> Self {
        NetworkJson {
            depth: p.arch.depth,
            widths: p.arch.widths(),
            gamma: encode_mask(&p.arch.mask),
            theta: p.theta.clone(),
            bound: p.bound,
        }
    }
}

impl TryFrom<NetworkJson> for NetworkParams {
    type Error = Error;

    fn try_from(j: NetworkJson) -> Result<Self> {
        if j.widths.len() != j.depth + 2 || j.widths[j.depth + 1] != 1 {
            return Err(Error::Decode(format!(
                "widths {:?} inconsistent with L = {}",
                j.widths, j.depth
            )));
        }
        let d = j.widths[0];
        let w = j.widths[1];
        if j.widths[1..=j.depth].iter().any(|&x| x != w) {
            return Err(Error::Decode("hidden widths must be uniform".into()));
        }
        let mut arch = Architecture::empty(d, j.depth, w)?;
        arch.mask = decode_mask(&j.gamma, arch.num_params())?;
        NetworkParams::new(arch, j.theta, j.bound)
    }
}

/// The C² cutoff `clip_F(x) = F·φ(x/F)` with `φ(z) = b + Σ a_i σ3(z − t_i)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub knots: [f64; 8],
    pub weights: [f64; 8],
    pub bias: f64,
    pub scale: f64,
}

impl ClipSpec {
    pub const KNOTS: [f64; 8] = [-2.0, -1.75, -1.5, -1.0, 1.0, 1.5, 1.75, 2.0];
    pub const WEIGHTS: [f64; 8] = [
        14.0 / 3.0,
        -32.0 / 3.0,
        20.0 / 3.0,
        -2.0 / 3.0,
        2.0 / 3.0,
        -20.0 / 3.0,
        32.0 / 3.0,
        -14.0 / 3.0,
    ];

    /// Identity on `(−F, F)`, constant `±2F` outside `[−2F, 2F]`.
    pub fn new(scale: f64) -> Self {
        assert!(scale > 0.0, "clip scale must be positive");
        ClipSpec {
            knots: Self::KNOTS,
            weights: Self::WEIGHTS,
            bias: -2.0,
            scale,
        }
    }

    /// Residuals of the symmetry and moment conditions the coefficients must meet.
    pub fn invariant_residual(&self) -> f64 {
        let (t, a) = (&self.knots, &self.weights);
        let mut r: f64 = 0.0;
        for i in 0..4 {
            r = r.max((t[7 - i] + t[i]).abs()).max((a[7 - i] + a[i]).abs());
        }
        let s0: f64 = a.iter().sum();
        let s1: f64 = a.iter().zip(t).map(|(a, t)| a * t).sum();
        let s2: f64 = (0..4).map(|i| a[i] * t[i] * t[i]).sum();
        // constant term on (−1, 1): b − Σ_{i≤4} a_i t_i³ = 0
        let s3: f64 = self.bias - (0..4).map(|i| a[i] * t[i].powi(3)).sum::<f64>();
        r.max(s0.abs())
            .max(s1.abs())
            .max((s2 - 1.0 / 3.0).abs())
            .max(s3.abs())
    }

    /// Monomial coefficients `(c0, c1, c2, c3)` of the cubic piece active at `z`.
    ///
    /// Knots on a grid of quarters and weights on a grid of thirds are summed as
    /// integers, so the piece on `[−1, 1]` is exactly `z`.
    fn piece(&self, z: f64) -> [f64; 4] {
        let active = self.knots.iter().zip(&self.weights).filter(|(t, _)| z > **t);
        let exact = self.knots.iter().zip(&self.weights).all(|(t, a)| {
            (4.0 * t - (4.0 * t).round()).abs() < 1e-12 && (3.0 * a - (3.0 * a).round()).abs() < 1e-12
        });
        let mut c = [0.0; 4];
        if exact {
            for (t, a) in active {
                let (tt, aa) = ((4.0 * t).round(), (3.0 * a).round());
                c[3] += aa;
                c[2] += aa * tt;
                c[1] += aa * tt * tt;
                c[0] += aa * tt * tt * tt;
            }
            [self.bias - c[0] / 192.0, c[1] / 16.0, -c[2] / 4.0, c[3] / 3.0]
        } else {
            for (t, a) in active {
                c[3] += a;
                c[2] -= 3.0 * a * t;
                c[1] += 3.0 * a * t * t;
                c[0] -= a * t * t * t;
            }
            [self.bias + c[0], c[1], c[2], c[3]]
        }
    }

    /// `(φ(z), φ'(z), φ''(z))` of the unscaled profile.
    pub fn profile(&self, z: f64) -> (f64, f64, f64) {
        let [c0, c1, c2, c3] = self.piece(z);
        (
            ((c3 * z + c2) * z + c1) * z + c0,
            (3.0 * c3 * z + 2.0 * c2) * z + c1,
            6.0 * c3 * z + 2.0 * c2,
        )
    }

    pub fn eval(&self, x: f64) -> f64 {
        let f = self.scale;
        f * self.profile(x / f).0
    }

    pub fn eval_jet(&self, x: &Jet2) -> Jet2 {
        let f = self.scale;
        let (v, d1, d2) = self.profile(x.value / f);
        x.compose(f * v, d1, d2 / f)
    }
}

/// Sparse, evaluation-ready view of a [`NetworkParams`].
#[derive(Debug, Clone)]
pub struct Evaluator {
    input_dim: usize,
    layers: Vec<SparseLayer>,
}

#[derive(Debug, Clone)]
struct SparseLayer {
    out_dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    bias: Vec<f64>,
}

/// Reusable buffers for jet propagation.
#[derive(Debug, Default, Clone)]
pub struct Scratch {
    val: Vec<f64>,
    grad: Vec<f64>,
    hess: Vec<f64>,
    nval: Vec<f64>,
    ngrad: Vec<f64>,
    nhess: Vec<f64>,
}

impl Evaluator {
    pub fn new(p: &NetworkParams) -> Self {
        let a = &p.arch;
        let layers = (0..a.num_layers())
            .map(|l| {
                let (nin, nout) = (a.layer_in(l), a.layer_out(l));
                let mut row_ptr = Vec::with_capacity(nout + 1);
                let mut cols = Vec::new();
                let mut vals = Vec::new();
                row_ptr.push(0);
                for o in 0..nout {
                    let base = a.weight_index(l, o, 0);
                    for i in 0..nin {
                        let w = p.theta[base + i];
                        if w != 0.0 {
                            cols.push(i);
                            vals.push(w);
                        }
                    }
                    row_ptr.push(cols.len());
                }
                let b0 = a.bias_index(l, 0);
                SparseLayer {
                    out_dim: nout,
                    row_ptr,
                    cols,
                    vals,
                    bias: p.theta[b0..b0 + nout].to_vec(),
                }
            })
            .collect();
        Evaluator {
            input_dim: a.input_dim,
            layers,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Raw network output `f_θ(x)` (no clip).
    pub fn eval_value(&self, x: &[f64], scratch: &mut Scratch) -> f64 {
        let Scratch { val, nval, .. } = scratch;
        val.clear();
        val.extend_from_slice(x);
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            nval.clear();
            for o in 0..layer.out_dim {
                let mut z = layer.bias[o];
                for k in layer.row_ptr[o]..layer.row_ptr[o + 1] {
                    z += layer.vals[k] * val[layer.cols[k]];
                }
                nval.push(if li == last { z } else { sigma3(z) });
            }
            std::mem::swap(val, nval);
        }
        val[0]
    }

    /// Raw network output as a jet.
    pub fn eval_jet(&self, x: &[f64], scratch: &mut Scratch) -> Jet2 {
        let d = self.input_dim;
        let dd = d * d;
        let Scratch {
            val,
            grad,
            hess,
            nval,
            ngrad,
            nhess,
        } = scratch;
        val.clear();
        val.extend_from_slice(x);
        grad.clear();
        grad.resize(d * d, 0.0);
        for i in 0..d {
            grad[i * d + i] = 1.0;
        }
        hess.clear();
        hess.resize(d * dd, 0.0);
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let n = layer.out_dim;
            nval.clear();
            nval.resize(n, 0.0);
            ngrad.clear();
            ngrad.resize(n * d, 0.0);
            nhess.clear();
            nhess.resize(n * dd, 0.0);
            for o in 0..n {
                let mut z = layer.bias[o];
                let g = &mut ngrad[o * d..(o + 1) * d];
                let h = &mut nhess[o * dd..(o + 1) * dd];
                for k in layer.row_ptr[o]..layer.row_ptr[o + 1] {
                    let (w, c) = (layer.vals[k], layer.cols[k]);
                    z += w * val[c];
                    for (gi, src) in g.iter_mut().zip(&grad[c * d..(c + 1) * d]) {
                        *gi += w * src;
                    }
                    if li > 0 {
                        for (hi, src) in h.iter_mut().zip(&hess[c * dd..(c + 1) * dd]) {
                            *hi += w * src;
                        }
                    }
                }
                if li == last {
                    nval[o] = z;
                } else {
                    let (s, ds, dds) = sigma3_derivs(z);
                    nval[o] = s;
                    if ds == 0.0 {
                        g.fill(0.0);
                        h.fill(0.0);
                    } else {
                        for i in 0..d {
                            for j in 0..d {
                                h[i * d + j] = ds * h[i * d + j] + dds * g[i] * g[j];
                            }
                        }
                        for gi in g.iter_mut() {
                            *gi *= ds;
                        }
                    }
                }
            }
            std::mem::swap(val, nval);
            std::mem::swap(grad, ngrad);
            std::mem::swap(hess, nhess);
        }
        Jet2::from_parts(val[0], &grad[..d], &hess[..dd]).expect("consistent dims")
    }

    /// `clip ∘ f_θ` as a jet.
    pub fn forward_jet(&self, clip: &ClipSpec, x: &[f64], scratch: &mut Scratch) -> Jet2 {
        clip.eval_jet(&self.eval_jet(x, scratch))
    }

    /// `clip ∘ f_θ` value only.
    pub fn forward_value(&self, clip: &ClipSpec, x: &[f64], scratch: &mut Scratch) -> f64 {
        clip.eval(self.eval_value(x, scratch))
    }
}

/// Value, gradient and Hessian of `clip ∘ f_θ` at `x`.
pub fn forward_jet(params: &NetworkParams, clip: &ClipSpec, x: &[f64]) -> Result<Jet2> {
    if x.len() != params.arch.input_dim {
        return Err(Error::DimensionMismatch {
            expected: params.arch.input_dim,
            got: x.len(),
        });
    }
    params.validate()?;
    Ok(params
        .evaluator()
        .forward_jet(clip, x, &mut Scratch::default()))
}

/// Which exponent convention to use in [`parameter_lipschitz_estimate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LipschitzForm {
    /// Exponents `(3^L − 1)/2` and `(5·3^L − 1)/2`, the form used for the sieve
    /// entropy bound.
    #[default]
    Sieve,
    /// Exponents `(3^{L−1} − 1)/2` and `(5·3^{L−1} − 1)/2`, counting hidden layers only.
    HiddenLayers,
}

/// Envelope `C_0 · W^{(3^L−1)/2} · (B ∨ d)^{(5·3^L−1)/2}` on the sup-norm change of
/// `clip ∘ f_θ` and its first two derivatives per unit `‖θ_1 − θ_2‖_∞`.
pub fn parameter_lipschitz_estimate(
    depth: usize,
    width: usize,
    bound: f64,
    input_dim: usize,
    c0: f64,
    form: LipschitzForm,
) -> f64 {
    let e = match form {
        LipschitzForm::Sieve => depth as i32,
        LipschitzForm::HiddenLayers => depth as i32 - 1,
    };
    let p3 = 3f64.powi(e);
    let base = bound.max(input_dim as f64);
    c0 * (width as f64).powf((p3 - 1.0) / 2.0) * base.powf((5.0 * p3 - 1.0) / 2.0)
}
