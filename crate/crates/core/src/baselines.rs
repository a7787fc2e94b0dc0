//! Classical empirical quantile corrections: quantile mapping (QM),
//! equidistant / equiratio CDF matching (ECDFM) and quantile delta mapping
//! (QDM).
//!
//! CDF positions interpolate linearly between order statistics, with tied
//! values placed at the middle of their run. Multiplicative forms treat
//! values below the trace threshold as zero and floor ratio denominators at
//! it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridio::GridField;
use crate::losses::sorted_quantile;
use crate::par::Exec;

pub const TRACE_MM: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Qm,
    Ecdfm,
    Qdm,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qm" => Ok(Method::Qm),
            "ecdfm" => Ok(Method::Ecdfm),
            "qdm" => Ok(Method::Qdm),
            _ => Err(Error::Config(format!("unknown baseline method {s}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    Multiplicative,
    Additive,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mult" | "multiplicative" => Ok(Mode::Multiplicative),
            "add" | "additive" => Ok(Mode::Additive),
            _ => Err(Error::Config(format!("unknown correction mode {s}"))),
        }
    }
}

/// Sorted model-historical and observed samples.
#[derive(Clone, Debug, PartialEq)]
pub struct EcdfPair {
    pub model_hist: Vec<f64>,
    pub obs: Vec<f64>,
    pub trace: f64,
}

fn sorted_sample(xs: &[f64], what: &str) -> Result<Vec<f64>> {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return Err(Error::Length(format!("empty {what} sample")));
    }
    v.sort_by(f64::total_cmp);
    Ok(v)
}

pub fn qm_fit(model_hist: &[f64], obs: &[f64]) -> Result<EcdfPair> {
    Ok(EcdfPair {
        model_hist: sorted_sample(model_hist, "model-historical")?,
        obs: sorted_sample(obs, "observed")?,
        trace: TRACE_MM,
    })
}

/// Empirical CDF position of `x` in an ascending sample, in `[0, 1]`.
pub fn cdf_position(sorted: &[f64], x: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return 0.5;
    }
    let last = (n - 1) as f64;
    if x < sorted[0] {
        return 0.0;
    }
    if x > sorted[n - 1] {
        return 1.0;
    }
    let lo = sorted.partition_point(|&v| v < x);
    let hi = sorted.partition_point(|&v| v <= x);
    if hi > lo {
        // x is present: middle of its tie run
        return (lo + hi - 1) as f64 / 2.0 / last;
    }
    let (i, j) = (lo - 1, lo);
    let f = (x - sorted[i]) / (sorted[j] - sorted[i]);
    (i as f64 + f) / last
}

impl EcdfPair {
    fn hist_q(&self, tau: f64) -> f64 {
        sorted_quantile(&self.model_hist, tau)
    }

    fn obs_q(&self, tau: f64) -> f64 {
        sorted_quantile(&self.obs, tau)
    }
}

/// Quantile mapping; beyond the fitted range the ratio at the nearest
/// extreme is held constant.
pub fn qm_apply(pair: &EcdfPair, x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    let (mh, ob) = (&pair.model_hist, &pair.obs);
    let (lo, hi) = (mh[0], mh[mh.len() - 1]);
    if x > hi {
        return if hi > pair.trace {
            x * ob[ob.len() - 1] / hi
        } else {
            ob[ob.len() - 1]
        };
    }
    if x < lo {
        return if lo > pair.trace {
            x * ob[0] / lo
        } else {
            ob[0]
        };
    }
    pair.obs_q(cdf_position(mh, x))
}

fn delta_formula(pair: &EcdfPair, future_sorted: &[f64], x: f64, mode: Mode) -> f64 {
    let tau = cdf_position(future_sorted, x);
    match mode {
        Mode::Multiplicative => {
            if x < pair.trace {
                0.0
            } else {
                pair.obs_q(tau) * x / pair.hist_q(tau).max(pair.trace)
            }
        }
        Mode::Additive => pair.obs_q(tau) + (x - pair.hist_q(tau)),
    }
}

/// Delta correction for one future sample. The ratio (or distance) formula
/// is evaluated at every distinct future value, made non-decreasing by a
/// running maximum and interpolated linearly in between. Beyond the sample
/// the formula at the extreme CDF position continues the map.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaMap {
    pair: EcdfPair,
    future: Vec<f64>,
    knots: Vec<f64>,
    values: Vec<f64>,
    mode: Mode,
}

impl DeltaMap {
    pub fn new(pair: &EcdfPair, future: &[f64], mode: Mode) -> Result<Self> {
        let future = sorted_sample(future, "future model")?;
        let mut knots = future.clone();
        knots.dedup();
        let mut values = Vec::with_capacity(knots.len());
        let mut top = f64::NEG_INFINITY;
        for &k in &knots {
            top = top.max(delta_formula(pair, &future, k, mode));
            values.push(top);
        }
        Ok(DeltaMap {
            pair: pair.clone(),
            future,
            knots,
            values,
            mode,
        })
    }

    pub fn apply(&self, x: f64) -> f64 {
        if x.is_nan() {
            return x;
        }
        if self.mode == Mode::Multiplicative && x < self.pair.trace {
            return 0.0;
        }
        let (k, v) = (&self.knots, &self.values);
        let last = k.len() - 1;
        if x <= k[0] {
            return delta_formula(&self.pair, &self.future, x, self.mode).min(v[0]);
        }
        if x >= k[last] {
            return delta_formula(&self.pair, &self.future, x, self.mode).max(v[last]);
        }
        let j = k.partition_point(|&u| u <= x);
        let i = j - 1;
        let f = (x - k[i]) / (k[j] - k[i]);
        v[i] + (v[j] - v[i]) * f
    }
}

/// Apply the observed-to-model ratio (or distance) at the CDF position of
/// `x` within the future model sample. Builds the whole [`DeltaMap`]; use it
/// directly for series.
pub fn ecdfm_apply(pair: &EcdfPair, future: &[f64], x: f64, mode: Mode) -> Result<f64> {
    Ok(DeltaMap::new(pair, future, mode)?.apply(x))
}

/// Scale the observed quantile at the future CDF position of `x` by the
/// modelled relative change at that position. The multiplicative form
/// coincides algebraically with the equiratio form of [`ecdfm_apply`].
pub fn qdm_apply(pair: &EcdfPair, future: &[f64], x: f64, mode: Mode) -> Result<f64> {
    ecdfm_apply(pair, future, x, mode)
}

/// Series-level application of one method.
pub fn apply_series(
    method: Method,
    mode: Mode,
    pair: &EcdfPair,
    future: &[f64],
) -> Result<Vec<f64>> {
    let out = match method {
        Method::Qm => future.iter().map(|&x| qm_apply(pair, x)).collect(),
        Method::Ecdfm | Method::Qdm => {
            let map = DeltaMap::new(pair, future, mode)?;
            future.iter().map(|&x| map.apply(x)).collect()
        }
    };
    Ok(out)
}

/// Correct `gcm_apply` with fits on (`gcm_hist`, `reference`), per cell or
/// pooled over the grid. Outputs are clamped at zero.
pub fn correct_field(
    method: Method,
    mode: Mode,
    reference: &GridField,
    gcm_hist: &GridField,
    gcm_apply: &GridField,
    pooled: bool,
    exec: Exec,
) -> Result<GridField> {
    if !reference.same_grid(gcm_hist) || !reference.same_grid(gcm_apply) {
        return Err(Error::Invariant(
            "baseline inputs are on different grids".into(),
        ));
    }
    let n = reference.ncells();
    let pooled_pair = if pooled {
        let all = |f: &GridField| f.values().iter().map(|&v| v as f64).collect::<Vec<_>>();
        Some(qm_fit(&all(gcm_hist), &all(reference))?)
    } else {
        None
    };
    let pooled_map = match &pooled_pair {
        Some(p) if method != Method::Qm => {
            let all: Vec<f64> = gcm_apply.values().iter().map(|&v| v as f64).collect();
            Some(DeltaMap::new(p, &all, mode)?)
        }
        _ => None,
    };
    let cols = exec.map_range(n, |c| -> Result<Vec<f64>> {
        let pair = match &pooled_pair {
            Some(p) => p.clone(),
            None => qm_fit(&gcm_hist.cell_series(c), &reference.cell_series(c))?,
        };
        let fut = gcm_apply.cell_series(c);
        let out = match &pooled_map {
            Some(map) => fut.iter().map(|&x| map.apply(x)).collect(),
            None => apply_series(method, mode, &pair, &fut)?,
        };
        Ok(out
            .into_iter()
            .map(|v| if v.is_nan() { v } else { v.max(0.0) })
            .collect())
    });
    let cols = cols.into_iter().collect::<Result<Vec<_>>>()?;
    GridField::from_cell_series(
        gcm_apply.start_date(),
        gcm_apply.lats().to_vec(),
        gcm_apply.lons().to_vec(),
        &cols,
    )
}
