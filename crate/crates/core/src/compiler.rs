//! Exact compilation of tensor-product splines into σ3 networks.
//!
//! Every basis function `N_i` is assembled from truncated powers
//! `max(±(l·x_a − m), 0)^{k−1}`, each realized as a product tree of
//! `(k−1)/3` copies of one σ3 neuron. Products use a gadget built from the
//! square identity `z² = −(1/6)[σ3(z+2) − 4σ3(z+1) + 3σ3(z) − 4]`, valid for
//! `z ≥ 0`; a compile-time range analysis checks that every gadget input is
//! nonnegative.
//!
//! Inputs are rescaled so each leaf computes a power of `l·x − m` rather than
//! `x − m/l`. This absorbs the `l^{k−1}` prefactor of the explicit B-spline
//! formula, so no coefficient exceeds `l + k` in magnitude. Each basis
//! function is expanded from whichever end of its support keeps the leaf
//! arguments small on `[0, 1]`, using
//! `Σ_j (−1)^j C(k,j)(z−j)_+^{k−1} = (−1)^k Σ_j (−1)^j C(k,j)(j−z)_+^{k−1}`.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jet::sigma3;
use crate::network::{ClipSpec, NetworkParams};
use crate::spline::{SplineCoeffs, SplineSpec};

/// One atom `weight · σ3(cx·x + cy·y + shift)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GadgetTerm {
    pub cx: f64,
    pub cy: f64,
    pub shift: f64,
    pub weight: f64,
}

/// A cubic combination `Σ weight·σ3(cx·x + cy·y + shift) + constant`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gadget {
    pub name: String,
    pub terms: Vec<GadgetTerm>,
    pub constant: f64,
}

impl Gadget {
    fn univariate(name: &str, scale: f64, atoms: &[(f64, f64)], constant: f64) -> Gadget {
        Gadget {
            name: name.into(),
            terms: atoms
                .iter()
                .map(|&(shift, w)| GadgetTerm {
                    cx: 1.0,
                    cy: 0.0,
                    shift,
                    weight: scale * w,
                })
                .collect(),
            constant: scale * constant,
        }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.terms
            .iter()
            .map(|t| t.weight * sigma3(t.cx * x + t.cy * y + t.shift))
            .sum::<f64>()
            + self.constant
    }

    /// Sum of atom magnitudes, used to scale validation tolerances.
    fn magnitude(&self, x: f64, y: f64) -> f64 {
        self.terms
            .iter()
            .map(|t| (t.weight * sigma3(t.cx * x + t.cy * y + t.shift)).abs())
            .sum::<f64>()
            + self.constant.abs()
    }
}

/// Outcome of checking one identity on its validation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GadgetCheck {
    pub name: String,
    pub printed: bool,
    pub max_abs_error: f64,
    pub max_scaled_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GadgetCoefficients {
    pub linear: Gadget,
    pub square: Gadget,
    pub product: Gadget,
    pub domain: (f64, f64),
    pub checks: Vec<GadgetCheck>,
}

/// Relative tolerance used for gadget validation.
pub const GADGET_TOL: f64 = 1e-9;

fn check(g: &Gadget, printed: bool, target: impl Fn(f64, f64) -> f64, bivariate: bool, dom: (f64, f64)) -> GadgetCheck {
    let grid: Vec<(f64, f64)> = if bivariate {
        let m = 32;
        (0..m * m)
            .map(|p| {
                let s = |i: usize| dom.0 + (dom.1 - dom.0) * i as f64 / (m - 1) as f64;
                (s(p / m), s(p % m))
            })
            .collect()
    } else {
        (0..1000)
            .map(|i| (dom.0 + (dom.1 - dom.0) * i as f64 / 999.0, 0.0))
            .collect()
    };
    let mut max_abs = 0.0f64;
    let mut max_scaled = 0.0f64;
    for (x, y) in grid {
        let err = (g.eval(x, y) - target(x, y)).abs();
        max_abs = max_abs.max(err);
        max_scaled = max_scaled.max(err / g.magnitude(x, y).max(1.0));
    }
    GadgetCheck {
        name: g.name.clone(),
        printed,
        max_abs_error: max_abs,
        max_scaled_error: max_scaled,
        passed: max_scaled <= GADGET_TOL,
    }
}

/// The printed square identity.
pub fn printed_square() -> Gadget {
    Gadget::univariate(
        "square (printed)",
        -1.0 / 6.0,
        &[(2.0, 1.0), (1.0, -4.0), (0.0, 3.0)],
        -4.0,
    )
}

/// The printed linear identity `x = −½[σ3(x+3) − 5σ3(x+2) + 7σ3(x+1) − 3σ3(x) + 6]`.
pub fn printed_linear() -> Gadget {
    Gadget::univariate(
        "linear (printed)",
        -0.5,
        &[(3.0, 1.0), (2.0, -5.0), (1.0, 7.0), (0.0, -3.0)],
        6.0,
    )
}

/// The printed product identity, with shifts `x+y−2` and `x+y−1`.
pub fn printed_product() -> Gadget {
    product_from_shifts("product (printed)", [-2.0, -1.0, 0.0])
}

fn product_from_shifts(name: &str, sum_shifts: [f64; 3]) -> Gadget {
    let s = -1.0 / 12.0;
    let mut terms = Vec::with_capacity(9);
    for (shift, w) in sum_shifts.iter().zip([1.0, -4.0, 3.0]) {
        terms.push(GadgetTerm {
            cx: 1.0,
            cy: 1.0,
            shift: *shift,
            weight: s * w,
        });
    }
    for (cx, cy) in [(1.0, 0.0), (0.0, 1.0)] {
        for (shift, w) in [(2.0, -1.0), (1.0, 4.0), (0.0, -3.0)] {
            terms.push(GadgetTerm {
                cx,
                cy,
                shift,
                weight: s * w,
            });
        }
    }
    Gadget {
        name: name.into(),
        terms,
        constant: s * 4.0,
    }
}

/// Solves for weights `c_s` on `σ3(z + s)`, `s = 0..3`, reproducing `z`.
fn derive_linear() -> Result<Gadget> {
    // Matching powers of z in Σ c_s (z+s)³: z³ → Σc, z² → 3Σcs, z → 3Σcs², 1 → Σcs³.
    let m = Matrix4::from_fn(|r, c| (c as f64).powi(r as i32));
    let rhs = Vector4::new(0.0, 0.0, 1.0 / 3.0, 0.0);
    let c = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("linear gadget system".into()))?;
    Ok(Gadget::univariate(
        "linear (derived)",
        1.0,
        &[(0.0, c[0]), (1.0, c[1]), (2.0, c[2]), (3.0, c[3])],
        0.0,
    ))
}

/// Validates the printed identities and derives the ones used for compilation.
pub fn derive_gadgets() -> Result<GadgetCoefficients> {
    let dom = (0.0, 10.0);
    let square = printed_square();
    let mut checks = vec![
        check(&square, true, |x, _| x * x, false, dom),
        check(&printed_linear(), true, |x, _| x, false, dom),
        check(&printed_product(), true, |x, y| x * y, true, dom),
    ];
    if !checks[0].passed {
        return Err(Error::GadgetValidation(format!(
            "square identity failed: {:?}",
            checks[0]
        )));
    }
    let linear = derive_linear()?;
    // Polarization xy = ((x+y)² − x² − y²)/2 with the square gadget.
    let product = product_from_shifts("product (derived)", [2.0, 1.0, 0.0]);
    let derived = [
        check(&linear, false, |x, _| x, false, dom),
        check(&product, false, |x, y| x * y, true, dom),
    ];
    for c in &derived {
        if !c.passed {
            return Err(Error::GadgetValidation(format!("{c:?}")));
        }
    }
    checks.extend(derived);
    Ok(GadgetCoefficients {
        linear,
        square,
        product,
        domain: dom,
        checks,
    })
}

/// Affine expression over the outputs of one hidden layer, with a declared range.
#[derive(Debug, Clone)]
struct Expr {
    layer: Option<usize>,
    terms: Vec<(usize, f64)>,
    constant: f64,
    lo: f64,
    hi: f64,
}

impl Expr {
    fn constant(c: f64) -> Expr {
        Expr {
            layer: None,
            terms: Vec::new(),
            constant: c,
            lo: c,
            hi: c,
        }
    }

    fn same_layer(a: Option<usize>, b: Option<usize>) -> Result<Option<usize>> {
        match (a, b) {
            (Some(x), Some(y)) if x != y => Err(Error::GadgetValidation(format!(
                "mixing expressions from layers {x} and {y}"
            ))),
            (Some(x), _) | (_, Some(x)) => Ok(Some(x)),
            _ => Ok(None),
        }
    }

    fn combine(parts: &[(f64, &Expr)], lo: f64, hi: f64) -> Result<Expr> {
        let mut layer = None;
        let mut terms = Vec::new();
        let mut constant = 0.0;
        for &(c, e) in parts {
            layer = Self::same_layer(layer, e.layer)?;
            terms.extend(e.terms.iter().map(|&(i, w)| (i, c * w)));
            constant += c * e.constant;
        }
        Ok(Expr {
            layer,
            terms,
            constant,
            lo,
            hi,
        })
    }
}

#[derive(Debug, Clone, Default)]
struct Neuron {
    inputs: Vec<(usize, f64)>,
    bias: f64,
}

/// Layered network under construction.
#[derive(Debug)]
struct Builder {
    input_dim: usize,
    layers: Vec<Vec<Neuron>>,
}

impl Builder {
    fn new(input_dim: usize) -> Self {
        Builder {
            input_dim,
            layers: Vec::new(),
        }
    }

    fn push(&mut self, layer: usize, n: Neuron) -> usize {
        while self.layers.len() <= layer {
            self.layers.push(Vec::new());
        }
        self.layers[layer].push(n);
        self.layers[layer].len() - 1
    }

    /// `σ3(weight·x_axis + bias)` in the first hidden layer; `arg_max` bounds the argument.
    fn leaf(&mut self, axis: usize, weight: f64, bias: f64, arg_max: f64) -> Expr {
        let idx = self.push(
            0,
            Neuron {
                inputs: vec![(axis, weight)],
                bias,
            },
        );
        Expr {
            layer: Some(0),
            terms: vec![(idx, 1.0)],
            constant: 0.0,
            lo: 0.0,
            hi: arg_max.max(0.0).powi(3),
        }
    }

    /// Realizes `x·y` in the layer after the inputs' layer.
    fn product(&mut self, g: &Gadget, x: &Expr, y: &Expr) -> Result<Expr> {
        if x.lo < 0.0 || y.lo < 0.0 {
            return Err(Error::GadgetValidation(format!(
                "product gadget input range [{}, {}] x [{}, {}] is not nonnegative",
                x.lo, x.hi, y.lo, y.hi
            )));
        }
        let src = Expr::same_layer(x.layer, y.layer)?;
        let dst = src.map_or(0, |l| l + 1);
        if src.is_none() {
            return Ok(Expr::constant(x.constant * y.constant));
        }
        let mut out = Expr {
            layer: Some(dst),
            terms: Vec::new(),
            constant: g.constant,
            lo: x.lo * y.lo,
            hi: x.hi * y.hi,
        };
        for t in &g.terms {
            let mut inputs: Vec<(usize, f64)> = Vec::new();
            inputs.extend(x.terms.iter().map(|&(i, w)| (i, t.cx * w)));
            inputs.extend(y.terms.iter().map(|&(i, w)| (i, t.cy * w)));
            inputs.retain(|&(_, w)| w != 0.0);
            let bias = t.cx * x.constant + t.cy * y.constant + t.shift;
            if inputs.is_empty() {
                out.constant += t.weight * sigma3(bias);
            } else {
                let idx = self.push(dst, Neuron { inputs, bias });
                out.terms.push((idx, t.weight));
            }
        }
        Ok(out)
    }

    /// Product of all factors via a balanced tree padded with constant ones.
    fn product_tree(&mut self, g: &Gadget, factors: Vec<Expr>) -> Result<Expr> {
        let mut level = factors;
        let target = level.len().next_power_of_two();
        level.resize(target, Expr::constant(1.0));
        while level.len() > 1 {
            let mut next = Vec::with_capacity(level.len() / 2);
            for pair in level.chunks(2) {
                next.push(self.product(g, &pair[0], &pair[1])?);
            }
            level = next;
        }
        Ok(level.pop().expect("nonempty tree"))
    }

    /// Packs the layers into a uniform-width parameter vector.
    fn finish(self, output: &Expr) -> Result<NetworkParams> {
        let depth = self.layers.len().max(1);
        let width = self.layers.iter().map(Vec::len).max().unwrap_or(0).max(1);
        if let Some(l) = output.layer {
            if l + 1 != depth {
                return Err(Error::GadgetValidation(format!(
                    "output reads layer {l} but network has {depth} hidden layers"
                )));
            }
        }
        let mut arch = crate::network::Architecture::empty(self.input_dim, depth, width)?;
        let mut theta = vec![0.0; arch.num_params()];
        for (h, layer) in self.layers.iter().enumerate() {
            for (o, n) in layer.iter().enumerate() {
                for &(i, w) in &n.inputs {
                    theta[arch.weight_index(h, o, i)] += w;
                }
                theta[arch.bias_index(h, o)] += n.bias;
            }
        }
        for &(i, w) in &output.terms {
            theta[arch.weight_index(depth, 0, i)] += w;
        }
        theta[arch.bias_index(depth, 0)] += output.constant;
        for (m, t) in arch.mask.iter_mut().zip(&theta) {
            *m = *t != 0.0;
        }
        let bound = theta.iter().fold(0.0f64, |m, t| m.max(t.abs()));
        NetworkParams::new(arch, theta, if bound > 0.0 { bound } else { 1.0 })
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, j| acc * j as f64)
}

fn check_degree(degree: usize) -> Result<usize> {
    if degree == 0 || degree % 3 != 0 {
        return Err(Error::InvalidArgument(format!(
            "truncated-power degree {degree} is not a positive multiple of 3"
        )));
    }
    Ok(degree / 3)
}

/// `max(weight·x_axis + bias, 0)^{degree}` as a product tree over copies of one σ3 leaf.
fn truncated_power(
    b: &mut Builder,
    g: &Gadget,
    axis: usize,
    weight: f64,
    bias: f64,
    arg_max: f64,
    degree: usize,
) -> Result<Expr> {
    let copies = check_degree(degree)?;
    let leaves = (0..copies)
        .map(|_| b.leaf(axis, weight, bias, arg_max))
        .collect();
    b.product_tree(g, leaves)
}

/// Standalone network computing `max(x − c, 0)^{degree}` for `x ∈ [lo, hi]`.
pub fn compile_truncated_power(
    shift: f64,
    degree: usize,
    range: (f64, f64),
    gadgets: &GadgetCoefficients,
) -> Result<NetworkParams> {
    let mut b = Builder::new(1);
    let arg_max = range.1 - shift;
    let p = truncated_power(&mut b, &gadgets.product, 0, 1.0, -shift, arg_max, degree)?;
    b.finish(&p)
}

/// A compiled spline network with its clip.
#[derive(Debug, Clone)]
pub struct CompiledNetwork {
    pub params: NetworkParams,
    pub clip: ClipSpec,
    pub spec: SplineSpec,
    /// `max |λ_i|`, which bounds the spline on `[0, 1]^d`.
    pub sup_bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CompileOptions {
    /// Clip scale `F`; defaults to the sup-norm bound plus one.
    pub clip_scale: Option<f64>,
}

/// Expression for `N_i` on axis `axis`, expanded from the cheaper end of its support.
fn basis_expr(b: &mut Builder, g: &Gadget, spec: &SplineSpec, axis: usize, i: i64) -> Result<Option<Expr>> {
    let k = spec.order;
    let l = spec.partition as f64;
    let li = spec.partition as i64;
    let degree = k - 1;
    let norm = 1.0 / factorial(degree);
    let left = li - i <= i + k as i64;
    let sign = if left || k % 2 == 0 { 1.0 } else { -1.0 };
    let mut parts: Vec<(f64, Expr)> = Vec::new();
    for j in 0..=k {
        let m = i + j as i64;
        let c = sign * if j % 2 == 0 { 1.0 } else { -1.0 } * binomial(k, j) * norm;
        let p = if left {
            // (l·x − m)_+ vanishes on [0,1] once m ≥ l.
            if m >= li {
                continue;
            }
            truncated_power(b, g, axis, l, -(m as f64), (li - m) as f64, degree)?
        } else {
            if m <= 0 {
                continue;
            }
            truncated_power(b, g, axis, -l, m as f64, m as f64, degree)?
        };
        parts.push((c, p));
    }
    if parts.is_empty() {
        return Ok(None);
    }
    let refs: Vec<(f64, &Expr)> = parts.iter().map(|(c, e)| (*c, e)).collect();
    Expr::combine(&refs, 0.0, 1.0).map(Some)
}

/// Compiles `Σ λ_i N_i` into a σ3 network whose clipped output equals the spline on `[0,1]^d`.
pub fn compile_spline_network(
    coeffs: &SplineCoeffs,
    gadgets: &GadgetCoefficients,
    opts: &CompileOptions,
) -> Result<CompiledNetwork> {
    let spec = coeffs.spec;
    if !spec.compilable() {
        return Err(Error::InvalidArgument(format!(
            "order {} is not compilable: k − 1 must be a multiple of 3",
            spec.order
        )));
    }
    let sup_bound = coeffs.sup_bound();
    let scale = opts.clip_scale.unwrap_or(sup_bound + 1.0);
    if !(scale > sup_bound) {
        return Err(Error::ClipTooSmall {
            scale,
            bound: sup_bound,
        });
    }
    let g = &gadgets.product;
    let d = spec.dim;
    let mut b = Builder::new(d);

    let n = spec.basis_len();
    let first = spec.first_index();
    // Per-axis basis expressions; built lazily so all-zero slices add no neurons.
    let mut basis: Vec<Vec<Option<Option<Expr>>>> = vec![vec![None; n]; d];
    let mut products: Vec<(f64, Expr)> = Vec::new();
    for p in 0..coeffs.coeffs.len() {
        let c = coeffs.coeffs[p];
        if c == 0.0 {
            continue;
        }
        let idx = coeffs.multi_index(p);
        let mut factors = Vec::with_capacity(d);
        for (a, &ia) in idx.iter().enumerate() {
            let slot = &mut basis[a][(ia - first) as usize];
            if slot.is_none() {
                *slot = Some(basis_expr(&mut b, g, &spec, a, ia)?);
            }
            match slot.as_ref().expect("filled") {
                Some(e) => factors.push(e.clone()),
                None => break,
            }
        }
        if factors.len() < d {
            continue;
        }
        let prod = if d == 1 {
            factors.pop().expect("one factor")
        } else {
            b.product_tree(g, factors)?
        };
        products.push((c, prod));
    }
    let output = if products.is_empty() {
        Expr::constant(0.0)
    } else {
        let lo = -sup_bound;
        let refs: Vec<(f64, &Expr)> = products.iter().map(|(c, e)| (*c, e)).collect();
        Expr::combine(&refs, lo, sup_bound)?
    };
    let params = b.finish(&output)?;
    Ok(CompiledNetwork {
        params,
        clip: ClipSpec::new(scale),
        spec,
        sup_bound,
    })
}

/// Measured size of a compiled network against the construction's envelopes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub order: usize,
    pub partition: usize,
    pub dim: usize,
    pub beta: f64,
    pub depth: usize,
    pub width: usize,
    pub sparsity: usize,
    pub num_params: usize,
    pub max_weight: f64,
    /// `W / (dβ·l^d)`.
    pub width_ratio: f64,
    /// `S / (dβ·l^d)`.
    pub sparsity_ratio: f64,
    /// `max|θ| / l^d`.
    pub weight_ratio: f64,
}

pub fn size_report(net: &NetworkParams, spec: &SplineSpec, beta: f64) -> SizeReport {
    let ld = (spec.partition as f64).powi(spec.dim as i32);
    let scale = spec.dim as f64 * beta * ld;
    let a = &net.arch;
    SizeReport {
        order: spec.order,
        partition: spec.partition,
        dim: spec.dim,
        beta,
        depth: a.depth,
        width: a.width,
        sparsity: a.sparsity(),
        num_params: a.num_params(),
        max_weight: net.max_abs_weight(),
        width_ratio: a.width as f64 / scale,
        sparsity_ratio: a.sparsity() as f64 / scale,
        weight_ratio: net.max_abs_weight() / ld,
    }
}
