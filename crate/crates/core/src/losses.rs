//! Training objective: weighted quantile loss, soft rainy-day count loss and
//! patch similarity loss, combined as `L = p1*Q + p2*R + p3*S`.
//!
//! Each term has a differentiable `*_t` form working on tape tensors and a
//! plain `f64` form that evaluates the same code on constants.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    /// Emphasised quantile level; `None` weights every level equally.
    pub q_star: Option<f64>,
    /// Number of quantile levels `K`.
    pub levels: usize,
    /// Wet-day threshold in mm/day.
    pub wet_threshold: f64,
    /// Temperature of the sigmoid in the rainy-day term.
    pub temperature: f64,
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            p1: 0.99,
            p2: 0.01,
            p3: 1.0,
            q_star: None,
            levels: 1000,
            wet_threshold: 1.0,
            temperature: 1.0,
            eps: 1e-8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.p1, self.p2, self.p3].iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if let Some(q) = self.q_star {
            if !(q > 0.0 && q < 1.0) {
                return Err(Error::Config(format!("q_star {q} outside (0, 1)")));
            }
        }
        if self.levels < 2 {
            return Err(Error::Config(
                "at least two quantile levels required".into(),
            ));
        }
        if !(self.temperature > 0.0) || !(self.eps > 0.0) || !(self.wet_threshold > 0.0) {
            return Err(Error::Config(
                "temperature, eps and wet threshold must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-batch loss components.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub q: f64,
    pub r: f64,
    pub s: f64,
    pub l: f64,
}

/// `L = p1*Q + p2*R + p3*S`.
pub fn composite_loss(q: f64, r: f64, s: f64, w: &LossWeights) -> LossReport {
    LossReport {
        q,
        r,
        s,
        l: w.p1 * q + w.p2 * r + w.p3 * s,
    }
}

/// `K` uniformly spaced levels `(k - 1/2) / K`.
pub fn quantile_levels(k: usize) -> Vec<f64> {
    (0..k).map(|i| (i as f64 + 0.5) / k as f64).collect()
}

/// `exp(-|q - q*|)`, or 1 without an emphasised level.
pub fn quantile_weight(q: f64, q_star: Option<f64>) -> f64 {
    match q_star {
        Some(qs) => (-(q - qs).abs()).exp(),
        None => 1.0,
    }
}

/// Interpolation position of level `q` in a sorted sample of length `n`.
fn position(q: f64, n: usize) -> (usize, usize, f64) {
    let p = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = (p.floor() as usize).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    (lo, hi, p - lo as f64)
}

/// Quantile of an ascending sample by linear interpolation between order
/// statistics at position `q * (n - 1)`.
pub fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let (lo, hi, f) = position(q, sorted.len());
    sorted[lo] * (1.0 - f) + sorted[hi] * f
}

/// Empirical quantile of `x` with missing (NaN) values removed.
pub fn empirical_quantile(x: &[f64], q: f64) -> Result<f64> {
    let mut v: Vec<f64> = x.iter().copied().filter(|v| !v.is_nan()).collect();
    if v.is_empty() {
        return Err(Error::Length(
            "empirical quantile of an empty series".into(),
        ));
    }
    v.sort_by(f64::total_cmp);
    Ok(sorted_quantile(&v, q))
}

/// Differentiable quantiles of a 1-D tensor at the given levels.
pub fn empirical_quantiles_t<'t>(x: &Tensor<'t>, levels: &[f64]) -> Result<Tensor<'t>> {
    let n = x.numel();
    if n == 0 {
        return Err(Error::Length(
            "empirical quantile of an empty series".into(),
        ));
    }
    let (sorted, _) = x.sort_with_permutation()?;
    let tape = x.tape();
    let k = levels.len();
    let mut lo = Vec::with_capacity(k);
    let mut hi = Vec::with_capacity(k);
    let mut wlo = Vec::with_capacity(k);
    let mut whi = Vec::with_capacity(k);
    for &q in levels {
        let (l, h, f) = position(q, n);
        lo.push(l);
        hi.push(h);
        wlo.push(1.0 - f);
        whi.push(f);
    }
    let a = sorted.index_select(&lo)?.mul(&tape.constant(wlo, &[k])?)?;
    let b = sorted.index_select(&hi)?.mul(&tape.constant(whi, &[k])?)?;
    a.add(&b)
}

/// Quantile loss of a corrected series against an ascending reference
/// sample: `(1/K) sum_k g(q_k) |Q_x(q_k) - Q_y(q_k)|`.
pub fn quantile_loss_t<'t>(
    x: &Tensor<'t>,
    y_sorted: &[f64],
    w: &LossWeights,
) -> Result<Tensor<'t>> {
    if y_sorted.is_empty() {
        return Err(Error::Length("empty reference series".into()));
    }
    let levels = quantile_levels(w.levels);
    let qx = empirical_quantiles_t(x, &levels)?;
    let qy: Vec<f64> = levels
        .iter()
        .map(|&q| sorted_quantile(y_sorted, q))
        .collect();
    let g: Vec<f64> = levels
        .iter()
        .map(|&q| quantile_weight(q, w.q_star))
        .collect();
    let tape = x.tape();
    let k = levels.len();
    qx.sub(&tape.constant(qy, &[k])?)?
        .abs()?
        .mul(&tape.constant(g, &[k])?)?
        .mean()
}

/// Soft wet-day count mismatch for one site:
/// `|sum_t sigma((x_t - tau)/T) - sum_t sigma((y_t - tau)/T)|`.
pub fn rainy_day_loss_t<'t>(x: &Tensor<'t>, y: &[f64], w: &LossWeights) -> Result<Tensor<'t>> {
    if x.numel() != y.len() {
        return Err(Error::Shape("rainy-day loss on misaligned series".into()));
    }
    let inv_t = 1.0 / w.temperature;
    let sx = x
        .add_scalar(-w.wet_threshold)?
        .mul_scalar(inv_t)?
        .sigmoid()?
        .sum()?;
    let sy: f64 = y
        .iter()
        .map(|&v| crate::autodiff::sigmoid((v - w.wet_threshold) * inv_t))
        .sum();
    sx.add_scalar(-sy)?.abs()
}

/// Patch similarity loss for one patch: `x` is `[T, P]`, `y` the aligned
/// reference values (row-major `[T][P]`), `mask` zeroes out missing nodes or
/// days. Returns `(1/T) sum_t (1 - corr_t)` with the epsilon-regularised
/// uncentred cosine `corr_t`.
pub fn spatial_corr_loss_t<'t>(
    x: &Tensor<'t>,
    y: &[f64],
    mask: &[f64],
    w: &LossWeights,
) -> Result<Tensor<'t>> {
    let shape = x.shape();
    if shape.len() != 2 || y.len() != x.numel() || mask.len() != x.numel() {
        return Err(Error::Shape(format!("patch loss on {shape:?}")));
    }
    let (t, p) = (shape[0], shape[1]);
    let tape = x.tape();
    let ym: Vec<f64> = y.iter().zip(mask).map(|(a, m)| a * m).collect();
    let dy: Vec<f64> = ym
        .chunks(p)
        .map(|r| (r.iter().map(|v| v * v).sum::<f64>() + w.eps).sqrt())
        .collect();
    let xm = x.mul(&tape.constant(mask.to_vec(), &[t, p])?)?;
    let num = xm.mul(&tape.constant(ym, &[t, p])?)?.sum_axis(1)?;
    let dx = xm.mul(&xm)?.sum_axis(1)?.add_scalar(w.eps)?.sqrt()?;
    let corr = num.div(&dx.mul(&tape.constant(dy, &[t])?)?)?;
    corr.mean()?.neg()?.add_scalar(1.0)
}

fn pairwise_valid(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    x.iter()
        .zip(y)
        .filter(|(a, b)| !a.is_nan() && !b.is_nan())
        .map(|(&a, &b)| (a, b))
        .unzip()
}

/// Quantile loss between two series, missing days removed pairwise.
pub fn quantile_loss(x: &[f64], y: &[f64], w: &LossWeights) -> Result<f64> {
    let (x, mut y) = if x.len() == y.len() {
        pairwise_valid(x, y)
    } else {
        (
            x.iter().copied().filter(|v| !v.is_nan()).collect(),
            y.iter().copied().filter(|v| !v.is_nan()).collect(),
        )
    };
    if x.is_empty() || y.is_empty() {
        return Err(Error::Length("quantile loss of an empty series".into()));
    }
    y.sort_by(f64::total_cmp);
    let tape = Tape::new();
    let n = x.len();
    let xt = tape.constant(x, &[n])?;
    Ok(quantile_loss_t(&xt, &y, w)?.item())
}

/// Rainy-day loss averaged over sites (`x[i]`, `y[i]` aligned per site).
pub fn rainy_day_loss(x: &[Vec<f64>], y: &[Vec<f64>], w: &LossWeights) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Shape(
            "rainy-day loss needs matching, non-empty site lists".into(),
        ));
    }
    let tape = Tape::new();
    let mut total = 0.0;
    for (xs, ys) in x.iter().zip(y) {
        if xs.len() != ys.len() {
            return Err(Error::Shape("rainy-day loss on misaligned series".into()));
        }
        let (xv, yv) = pairwise_valid(xs, ys);
        let n = xv.len();
        let xt = tape.constant(xv, &[n])?;
        total += rainy_day_loss_t(&xt, &yv, w)?.item();
    }
    Ok(total / x.len() as f64)
}

/// Patch similarity loss averaged over a batch: `x[b][t][p]`.
pub fn spatial_corr_loss(x: &[Vec<Vec<f64>>], y: &[Vec<Vec<f64>>], w: &LossWeights) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Shape(
            "patch loss needs matching, non-empty batches".into(),
        ));
    }
    let tape = Tape::new();
    let mut total = 0.0;
    for (xb, yb) in x.iter().zip(y) {
        let t = xb.len();
        let p = xb.first().map_or(0, Vec::len);
        if yb.len() != t || xb.iter().chain(yb).any(|r| r.len() != p) || t == 0 {
            return Err(Error::Shape("ragged patch".into()));
        }
        let mut xv = Vec::with_capacity(t * p);
        let mut yv = Vec::with_capacity(t * p);
        let mut mask = Vec::with_capacity(t * p);
        for (xr, yr) in xb.iter().zip(yb) {
            for (&a, &b) in xr.iter().zip(yr) {
                let ok = !a.is_nan() && !b.is_nan();
                xv.push(if ok { a } else { 0.0 });
                yv.push(if ok { b } else { 0.0 });
                mask.push(if ok { 1.0 } else { 0.0 });
            }
        }
        let xt = tape.constant(xv, &[t, p])?;
        total += spatial_corr_loss_t(&xt, &yv, &mask, w)?.item();
    }
    Ok(total / x.len() as f64)
}
