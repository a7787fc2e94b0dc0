//! The monotone softplus-basis mapping
//!
//! ```text
//! f(x) = alpha * x + sum_z w_z * softplus(s_z * (x - b_z)) + c
//! ```
//!
//! which is strictly increasing whenever `alpha`, `w_z` and `s_z` are
//! positive. Raw network outputs are laid out as
//! `[alpha, w_1..w_Z, s_1..s_Z, b_1..b_Z, c]`.

use crate::autodiff::{sigmoid, softplus, Tensor};
use crate::error::{Error, Result};

/// Number of softplus bumps.
pub const BUMPS: usize = 8;
/// Length of a raw parameter vector for [`BUMPS`] bumps.
pub const RAW_LEN: usize = 3 * BUMPS + 2;

pub fn raw_len(bumps: usize) -> usize {
    3 * bumps + 2
}

/// Inverse of softplus on `(0, inf)`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformParams {
    pub alpha: f64,
    pub w: Vec<f64>,
    pub s: Vec<f64>,
    pub b: Vec<f64>,
    pub c: f64,
}

impl TransformParams {
    /// `f(x) = x`: unit slope, zero-weight bumps, no offset.
    pub fn identity(bumps: usize) -> Self {
        TransformParams {
            alpha: 1.0,
            w: vec![0.0; bumps],
            s: vec![1.0; bumps],
            b: vec![0.0; bumps],
            c: 0.0,
        }
    }

    pub fn bumps(&self) -> usize {
        self.w.len()
    }

    /// The raw vector that [`constrain`] maps back onto these parameters.
    /// Requires strictly positive `alpha`, `w` and `s`.
    pub fn to_raw(&self) -> Result<Vec<f64>> {
        let pos = std::iter::once(&self.alpha).chain(&self.w).chain(&self.s);
        if pos.clone().any(|v| !(*v > 0.0)) {
            return Err(Error::Domain(
                "alpha, w and s must be strictly positive to invert".into(),
            ));
        }
        let mut raw = Vec::with_capacity(raw_len(self.bumps()));
        raw.push(softplus_inv(self.alpha));
        raw.extend(self.w.iter().map(|&v| softplus_inv(v)));
        raw.extend(self.s.iter().map(|&v| softplus_inv(v)));
        raw.extend_from_slice(&self.b);
        raw.push(self.c);
        Ok(raw)
    }
}

/// Map a raw vector onto valid parameters: softplus on `alpha`, `w`, `s`;
/// `b` and `c` unchanged.
pub fn constrain(raw: &[f64]) -> Result<TransformParams> {
    if raw.len() < 2 || !(raw.len() - 2).is_multiple_of(3) {
        return Err(Error::Shape(format!(
            "raw parameter vector of length {} is not 3Z + 2",
            raw.len()
        )));
    }
    let z = (raw.len() - 2) / 3;
    Ok(TransformParams {
        alpha: softplus(raw[0]),
        w: raw[1..1 + z].iter().map(|&v| softplus(v)).collect(),
        s: raw[1 + z..1 + 2 * z].iter().map(|&v| softplus(v)).collect(),
        b: raw[1 + 2 * z..1 + 3 * z].to_vec(),
        c: raw[1 + 3 * z],
    })
}

pub fn apply(theta: &TransformParams, x: f64) -> f64 {
    let bumps: f64 = theta
        .w
        .iter()
        .zip(&theta.s)
        .zip(&theta.b)
        .map(|((w, s), b)| w * softplus(s * (x - b)))
        .sum();
    theta.alpha * x + bumps + theta.c
}

pub fn derivative(theta: &TransformParams, x: f64) -> f64 {
    let bumps: f64 = theta
        .w
        .iter()
        .zip(&theta.s)
        .zip(&theta.b)
        .map(|((w, s), b)| w * s * sigmoid(s * (x - b)))
        .sum();
    theta.alpha + bumps
}

/// Non-negativity clamp for exported precipitation. Never used inside the
/// training objective.
pub fn clamp_output(x_ba: f64) -> f64 {
    x_ba.max(0.0)
}

/// Constrained parameters for `rows` independent (cell, day) positions.
pub struct ThetaTensors<'t> {
    /// `[rows]`
    pub alpha: Tensor<'t>,
    /// `[Z, rows]`
    pub w: Tensor<'t>,
    /// `[Z, rows]`
    pub s: Tensor<'t>,
    /// `[Z, rows]`
    pub b: Tensor<'t>,
    /// `[rows]`
    pub c: Tensor<'t>,
}

/// Differentiable [`constrain`] over a `[rows, 3Z + 2]` raw tensor.
pub fn constrain_t<'t>(raw: &Tensor<'t>) -> Result<ThetaTensors<'t>> {
    let shape = raw.shape();
    if shape.len() != 2 || shape[1] < 2 || !(shape[1] - 2).is_multiple_of(3) {
        return Err(Error::Shape(format!("raw theta tensor {shape:?}")));
    }
    let (rows, width) = (shape[0], shape[1]);
    let z = (width - 2) / 3;
    let cols = raw.permute(&[1, 0])?;
    Ok(ThetaTensors {
        alpha: cols.slice(0, 0, 1)?.reshape(&[rows])?.softplus()?,
        w: cols.slice(0, 1, z)?.softplus()?,
        s: cols.slice(0, 1 + z, z)?.softplus()?,
        b: cols.slice(0, 1 + 2 * z, z)?,
        c: cols.slice(0, 1 + 3 * z, 1)?.reshape(&[rows])?,
    })
}

/// Differentiable [`apply`]: `x` has shape `[rows]`.
pub fn apply_t<'t>(theta: &ThetaTensors<'t>, x: &Tensor<'t>) -> Result<Tensor<'t>> {
    let z = theta.w.shape()[0];
    let xz = x.expand_dim(0, z)?;
    let bumps = theta
        .s
        .mul(&xz.sub(&theta.b)?)?
        .softplus()?
        .mul(&theta.w)?
        .sum_axis(0)?;
    theta.alpha.mul(x)?.add(&bumps)?.add(&theta.c)
}
