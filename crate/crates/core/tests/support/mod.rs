//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use bpinn::network::NetworkParams;
use bpinn::spline::SplineCoeffs;

/// Cox–de Boor recursion on the uniform knots `t_m = m/l`.
pub fn cox_de_boor(k: usize, l: usize, i: i64, x: f64) -> f64 {
    let t = |m: i64| m as f64 / l as f64;
    if k == 1 {
        return if t(i) <= x && x < t(i + 1) { 1.0 } else { 0.0 };
    }
    let km = (k - 1) as i64;
    let a = (x - t(i)) / (t(i + km) - t(i)) * cox_de_boor(k - 1, l, i, x);
    let b = (t(i + k as i64) - x) / (t(i + k as i64) - t(i + 1)) * cox_de_boor(k - 1, l, i + 1, x);
    a + b
}

/// `r`-th derivative (r ≤ 2) via the uniform-knot derivative recursion.
pub fn cox_de_boor_deriv(k: usize, l: usize, i: i64, x: f64, r: usize) -> f64 {
    let lf = l as f64;
    match r {
        0 => cox_de_boor(k, l, i, x),
        1 => lf * (cox_de_boor(k - 1, l, i, x) - cox_de_boor(k - 1, l, i + 1, x)),
        2 => {
            lf * lf
                * (cox_de_boor(k - 2, l, i, x) - 2.0 * cox_de_boor(k - 2, l, i + 1, x)
                    + cox_de_boor(k - 2, l, i + 2, x))
        }
        _ => panic!("derivative order {r} not supported"),
    }
}

/// Value, gradient and Hessian (row-major) of a tensor spline by brute force.
pub fn spline_jet_oracle(c: &SplineCoeffs, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let spec = c.spec;
    let (k, l, d) = (spec.order, spec.partition, spec.dim);
    let first = spec.first_index();
    let n = spec.basis_len();
    // tables[a][i][r] = N_i^{(r)}(x_a)
    let tables: Vec<Vec<[f64; 3]>> = (0..d)
        .map(|a| {
            (0..n)
                .map(|i| {
                    let idx = first + i as i64;
                    [0, 1, 2].map(|r| cox_de_boor_deriv(k, l, idx, x[a], r))
                })
                .collect()
        })
        .collect();
    let mut v = 0.0;
    let mut g = vec![0.0; d];
    let mut h = vec![0.0; d * d];
    for (p, &coef) in c.coeffs.iter().enumerate() {
        let mut idx = vec![0usize; d];
        let mut q = p;
        for a in (0..d).rev() {
            idx[a] = q % n;
            q /= n;
        }
        let order_prod = |orders: &[usize]| -> f64 { (0..d).map(|a| tables[a][idx[a]][orders[a]]).product() };
        v += coef * order_prod(&vec![0; d]);
        for a in 0..d {
            let mut o = vec![0; d];
            o[a] = 1;
            g[a] += coef * order_prod(&o);
            for b in 0..d {
                let mut o = vec![0; d];
                o[a] += 1;
                o[b] += 1;
                h[a * d + b] += coef * order_prod(&o);
            }
        }
    }
    (v, g, h)
}

/// Dense forward pass of the raw network, returning the output and every
/// hidden pre-activation.
pub fn dense_forward(p: &NetworkParams, x: &[f64]) -> (f64, Vec<f64>) {
    let a = &p.arch;
    let mut cur = x.to_vec();
    let mut pre = Vec::new();
    for layer in 0..a.num_layers() {
        let (nin, nout) = (a.layer_in(layer), a.layer_out(layer));
        let mut next = vec![0.0; nout];
        for (o, slot) in next.iter_mut().enumerate() {
            let mut z = p.theta[a.bias_index(layer, o)];
            for (i, xi) in cur.iter().enumerate().take(nin) {
                z += p.theta[a.weight_index(layer, o, i)] * xi;
            }
            if layer == a.depth {
                *slot = z;
            } else {
                pre.push(z);
                *slot = z.max(0.0).powi(3);
            }
        }
        cur = next;
    }
    (cur[0], pre)
}

/// Deterministic xorshift stream in `[0, 1)`.
pub struct Xorshift(pub u64);

impl Xorshift {
    pub fn next_f64(&mut self) -> f64 {
        let s = &mut self.0;
        *s ^= *s << 13;
        *s ^= *s >> 7;
        *s ^= *s << 17;
        (*s >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Chi-square statistic and degrees of freedom with tail bins pooled so every
/// expected count is at least 5.
pub fn chi_square(observed: &[f64], expected: &[f64]) -> (f64, usize) {
    let mut obs = Vec::new();
    let mut exp = Vec::new();
    let (mut o_acc, mut e_acc) = (0.0, 0.0);
    for (o, e) in observed.iter().zip(expected) {
        o_acc += o;
        e_acc += e;
        if e_acc >= 5.0 {
            obs.push(o_acc);
            exp.push(e_acc);
            o_acc = 0.0;
            e_acc = 0.0;
        }
    }
    if e_acc > 0.0 {
        match exp.last_mut() {
            Some(last) => {
                *last += e_acc;
                *obs.last_mut().unwrap() += o_acc;
            }
            None => {
                obs.push(o_acc);
                exp.push(e_acc);
            }
        }
    }
    let stat = obs.iter().zip(&exp).map(|(o, e)| (o - e) * (o - e) / e).sum();
    (stat, exp.len().saturating_sub(1))
}
