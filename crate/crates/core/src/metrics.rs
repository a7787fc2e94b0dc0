//! Evaluation: ETCCDI precipitation indices, percentage bias, box-counting
//! fractal dimension of thresholded snapshots, trend bias and quantile
//! comparison tables.
//!
//! Time runs on a fixed 365-day calendar without leap days. Day 0 of a
//! field falls on day-of-year `start_date mod 365`, and only complete years
//! and months enter the indices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridio::{GridField, WET_DAY_MM};
use crate::losses::sorted_quantile;
use crate::par::Exec;

pub const DAYS_PER_YEAR: usize = 365;
pub const MONTH_LENGTHS: [usize; 12] = [31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];
/// Guard on the raw trend below which trend bias is undefined.
pub const TREND_GUARD: f64 = 1e-6;
/// Guard on the reference value below which percentage bias is undefined.
pub const BIAS_GUARD: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Index {
    R10mm,
    R20mm,
    Rx1day,
    Rx5day,
    Sdii,
    Cdd,
    Cwd,
    R95pTot,
    R99pTot,
}

impl Index {
    pub const ALL: [Index; 9] = [
        Index::R10mm,
        Index::R20mm,
        Index::Rx1day,
        Index::Rx5day,
        Index::Sdii,
        Index::Cdd,
        Index::Cwd,
        Index::R95pTot,
        Index::R99pTot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Index::R10mm => "R10mm",
            Index::R20mm => "R20mm",
            Index::Rx1day => "Rx1day",
            Index::Rx5day => "Rx5day",
            Index::Sdii => "SDII",
            Index::Cdd => "CDD",
            Index::Cwd => "CWD",
            Index::R95pTot => "R95pTOT",
            Index::R99pTot => "R99pTOT",
        }
    }

    pub fn from_name(s: &str) -> Option<Index> {
        Index::ALL
            .iter()
            .copied()
            .find(|i| i.name().eq_ignore_ascii_case(s))
    }

    /// Monthly indices are summarised over months, the rest over years.
    pub fn is_monthly(self) -> bool {
        matches!(self, Index::Rx1day | Index::Rx5day | Index::Sdii)
    }

    /// Wet-day percentile level of the total indices.
    pub fn percentile(self) -> Option<f64> {
        match self {
            Index::R95pTot => Some(0.95),
            Index::R99pTot => Some(0.99),
            _ => None,
        }
    }
}

/// Maps series days onto the no-leap calendar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Calendar {
    /// Day of year of series day 0.
    pub offset: usize,
}

impl Calendar {
    pub fn from_start_date(start_date: i64) -> Self {
        Calendar {
            offset: start_date.rem_euclid(DAYS_PER_YEAR as i64) as usize,
        }
    }

    fn first_year_start(&self) -> usize {
        (DAYS_PER_YEAR - self.offset) % DAYS_PER_YEAR
    }

    /// Day ranges of complete calendar years in a series of length `n`.
    pub fn years(&self, n: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut s = self.first_year_start();
        while s + DAYS_PER_YEAR <= n {
            out.push((s, s + DAYS_PER_YEAR));
            s += DAYS_PER_YEAR;
        }
        out
    }

    /// Day ranges of complete calendar months in a series of length `n`.
    pub fn months(&self, n: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        // walk month starts from the year boundary at or before day 0
        let mut s = -(self.offset as isize);
        let mut m = 0;
        while s < n as isize {
            let e = s + MONTH_LENGTHS[m] as isize;
            if s >= 0 && e <= n as isize {
                out.push((s as usize, e as usize));
            }
            s = e;
            m = (m + 1) % 12;
        }
        out
    }
}

/// One index for one series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtccdiResult {
    pub index: Index,
    /// Per year, or per month for monthly indices; `None` when undefined.
    pub periods: Vec<Option<f64>>,
    /// Mean over defined periods.
    pub mean: Option<f64>,
}

fn valid(v: f64) -> bool {
    !v.is_nan()
}

fn is_wet(v: f64) -> bool {
    valid(v) && v >= WET_DAY_MM
}

fn is_dry(v: f64) -> bool {
    valid(v) && v < WET_DAY_MM
}

fn longest_run(xs: &[f64], pred: impl Fn(f64) -> bool) -> usize {
    let (mut best, mut cur) = (0, 0);
    for &v in xs {
        if pred(v) {
            cur += 1;
            best = best.max(cur);
        } else {
            cur = 0;
        }
    }
    best
}

/// Empirical quantile of the wet-day (>= 1 mm) values of a series; `None`
/// without wet days.
pub fn wet_day_percentile(series: &[f64], q: f64) -> Option<f64> {
    let mut wet: Vec<f64> = series.iter().copied().filter(|&v| is_wet(v)).collect();
    if wet.is_empty() {
        return None;
    }
    wet.sort_by(f64::total_cmp);
    Some(sorted_quantile(&wet, q))
}

fn mean_defined(xs: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = xs.iter().flatten().copied().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

/// Compute one index. `threshold` overrides the wet-day percentile of the
/// total indices; by default it is taken from the series itself.
pub fn etccdi_index(
    series: &[f64],
    index: Index,
    threshold: Option<f64>,
    cal: Calendar,
) -> Result<EtccdiResult> {
    let periods = if index.is_monthly() {
        cal.months(series.len())
    } else {
        cal.years(series.len())
    };
    if periods.is_empty() {
        return Err(Error::Length(format!(
            "{} needs at least one complete {}",
            index.name(),
            if index.is_monthly() { "month" } else { "year" }
        )));
    }
    let thr = match index.percentile() {
        Some(q) => threshold.or_else(|| wet_day_percentile(series, q)),
        None => None,
    };
    let values: Vec<Option<f64>> = periods
        .iter()
        .map(|&(s, e)| {
            let xs = &series[s..e];
            match index {
                Index::R10mm => Some(xs.iter().filter(|&&v| valid(v) && v >= 10.0).count() as f64),
                Index::R20mm => Some(xs.iter().filter(|&&v| valid(v) && v >= 20.0).count() as f64),
                Index::Rx1day => xs.iter().copied().filter(|v| valid(*v)).reduce(f64::max),
                Index::Rx5day => (s..e)
                    .filter(|&d| d >= 4)
                    .map(|d| &series[d - 4..=d])
                    .filter(|w| w.iter().all(|v| valid(*v)))
                    .map(|w| w.iter().sum::<f64>())
                    .reduce(f64::max),
                Index::Sdii => {
                    let wet: Vec<f64> = xs.iter().copied().filter(|&v| is_wet(v)).collect();
                    (!wet.is_empty()).then(|| wet.iter().sum::<f64>() / wet.len() as f64)
                }
                Index::Cdd => Some(longest_run(xs, is_dry) as f64),
                Index::Cwd => Some(longest_run(xs, is_wet) as f64),
                Index::R95pTot | Index::R99pTot => Some(match thr {
                    Some(t) => xs.iter().filter(|&&v| valid(v) && v > t).sum(),
                    None => 0.0,
                }),
            }
        })
        .collect();
    Ok(EtccdiResult {
        index,
        mean: mean_defined(&values),
        periods: values,
    })
}

/// Wet-day 95th and 99th percentiles of every cell, `None` for cells
/// without wet days.
pub fn wet_day_thresholds(field: &GridField) -> Vec<[Option<f64>; 2]> {
    (0..field.ncells())
        .map(|c| {
            let s = field.cell_series(c);
            [wet_day_percentile(&s, 0.95), wet_day_percentile(&s, 0.99)]
        })
        .collect()
}

/// Period means of every index for every cell: `[index][cell]`. The total
/// indices use `thresholds` per cell when given (see [`wet_day_thresholds`]),
/// otherwise each cell's own wet-day percentiles.
pub fn field_indices(
    field: &GridField,
    thresholds: Option<&[[Option<f64>; 2]]>,
    exec: Exec,
) -> Result<Vec<Vec<Option<f64>>>> {
    if thresholds.is_some_and(|t| t.len() != field.ncells()) {
        return Err(Error::Shape("one threshold pair per cell expected".into()));
    }
    let cal = Calendar::from_start_date(field.start_date());
    let per_cell = exec.map_range(field.ncells(), |c| -> Result<Vec<Option<f64>>> {
        let s = field.cell_series(c);
        Index::ALL
            .iter()
            .map(|&i| {
                let thr = match (thresholds, i) {
                    (Some(t), Index::R95pTot) => Some(t[c][0]),
                    (Some(t), Index::R99pTot) => Some(t[c][1]),
                    _ => None,
                };
                match thr {
                    // no reference wet days: nothing can exceed
                    Some(None) => Ok(Some(0.0)),
                    Some(t) => etccdi_index(&s, i, t, cal).map(|r| r.mean),
                    None => etccdi_index(&s, i, None, cal).map(|r| r.mean),
                }
            })
            .collect()
    });
    let per_cell = per_cell.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((0..Index::ALL.len())
        .map(|i| per_cell.iter().map(|v| v[i]).collect())
        .collect())
}

/// Per cell, per index values.
type IndexTable = Vec<Vec<Option<f64>>>;

/// Indices of a reference and a simulated field, with the total indices of
/// both thresholded at the reference wet-day percentiles.
fn paired_indices(
    reference: &GridField,
    sim: &GridField,
    exec: Exec,
) -> Result<(IndexTable, IndexTable)> {
    check_aligned(reference, sim)?;
    let thr = wet_day_thresholds(reference);
    Ok((
        field_indices(reference, Some(&thr), exec)?,
        field_indices(sim, Some(&thr), exec)?,
    ))
}

/// `100 (model - ref) / ref` per cell; undefined where either value is
/// missing or `|ref| < 1e-9`.
pub fn mean_percentage_bias(model: &[Option<f64>], reference: &[Option<f64>]) -> Vec<Option<f64>> {
    model
        .iter()
        .zip(reference)
        .map(|(m, r)| match (m, r) {
            (Some(m), Some(r)) if r.abs() >= BIAS_GUARD => Some(100.0 * (m - r) / r),
            _ => None,
        })
        .collect()
}

/// Spatial mean of `|bias|` over defined cells.
pub fn mean_abs(xs: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = xs.iter().flatten().map(|v| v.abs()).collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

fn check_aligned(a: &GridField, b: &GridField) -> Result<()> {
    if !a.same_grid(b) {
        return Err(Error::Invariant("fields are on different grids".into()));
    }
    if a.ntime() != b.ntime() {
        return Err(Error::Invariant(format!(
            "fields cover {} and {} days",
            a.ntime(),
            b.ntime()
        )));
    }
    Ok(())
}

/// Mean absolute percentage bias of every index, in [`Index::ALL`] order.
pub fn index_bias_summary(reference: &GridField, sim: &GridField) -> Result<Vec<Option<f64>>> {
    let (r, s) = paired_indices(reference, sim, Exec::auto())?;
    Ok(r.iter()
        .zip(&s)
        .map(|(r, s)| mean_abs(&mean_percentage_bias(s, r)))
        .collect())
}

/// Mean over indices of the spatial mean absolute percentage bias.
pub fn composite_score(reference: &GridField, sim: &GridField) -> Result<f64> {
    let per = index_bias_summary(reference, sim)?;
    mean_defined(&per).ok_or_else(|| Error::Numerical("no index bias is defined".into()))
}

/// `mask = value >= quantile_h(field)`.
pub fn binarize_at_quantile(field: &[f64], h: f64) -> Result<Vec<bool>> {
    if field.is_empty() || field.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(
            "binarisation needs a non-empty finite field".into(),
        ));
    }
    let mut s = field.to_vec();
    s.sort_by(f64::total_cmp);
    let thr = sorted_quantile(&s, h);
    Ok(field.iter().map(|&v| v >= thr).collect())
}

/// Number of `l x l` boxes (anchored at the origin, ragged edges included)
/// holding both a set and an unset cell.
pub fn box_count(mask: &[bool], nrow: usize, ncol: usize, l: usize) -> Result<usize> {
    if l < 2 {
        return Err(Error::Domain("box size must be at least 2".into()));
    }
    if mask.len() != nrow * ncol {
        return Err(Error::Shape("mask does not match its dimensions".into()));
    }
    let mut n = 0;
    for br in (0..nrow).step_by(l) {
        for bc in (0..ncol).step_by(l) {
            let (mut any, mut all) = (false, true);
            for r in br..(br + l).min(nrow) {
                for c in bc..(bc + l).min(ncol) {
                    let v = mask[r * ncol + c];
                    any |= v;
                    all &= v;
                }
            }
            if any && !all {
                n += 1;
            }
        }
    }
    Ok(n)
}

/// Dyadic box sizes `2, 4, 8, ...` up to `min(nrow, ncol) / 4`.
pub fn dyadic_sizes(nrow: usize, ncol: usize) -> Vec<usize> {
    let max = nrow.min(ncol) / 4;
    std::iter::successors(Some(2usize), |l| Some(l * 2))
        .take_while(|&l| l <= max)
        .collect()
}

/// Least-squares slope of `log N` against `log(1/l)`; sizes with `N = 0`
/// are dropped and at least three must remain.
pub fn fd_fit(counts: &[(usize, usize)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = counts
        .iter()
        .filter(|(_, n)| *n > 0)
        .map(|&(l, n)| (-(l as f64).ln(), (n as f64).ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Fractal dimension of one snapshot at level `h`.
pub fn snapshot_fd(
    values: &[f64],
    nrow: usize,
    ncol: usize,
    h: f64,
    sizes: &[usize],
) -> Result<Option<f64>> {
    let mask = binarize_at_quantile(values, h)?;
    let counts = sizes
        .iter()
        .map(|&l| box_count(&mask, nrow, ncol, l).map(|n| (l, n)))
        .collect::<Result<Vec<_>>>()?;
    Ok(fd_fit(&counts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdCurve {
    pub levels: Vec<f64>,
    pub fd: Vec<Option<f64>>,
    pub sizes: Vec<usize>,
    /// Snapshots contributing to each level.
    pub samples: Vec<usize>,
}

/// 99 levels `0.01 ..= 0.99`.
pub fn default_fd_levels() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

/// Per-snapshot FD averaged over time at each level. Snapshots with
/// missing values are skipped.
pub fn fd_curve(field: &GridField, levels: &[f64], sizes: &[usize], exec: Exec) -> Result<FdCurve> {
    let (nr, nc) = (field.nlat(), field.nlon());
    let per_t = exec.map_range(field.ntime(), |t| -> Result<Option<Vec<Option<f64>>>> {
        let snap: Vec<f64> = field.snapshot(t).iter().map(|&v| v as f64).collect();
        if snap.iter().any(|v| v.is_nan()) {
            return Ok(None);
        }
        levels
            .iter()
            .map(|&h| snapshot_fd(&snap, nr, nc, h, sizes))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    });
    let mut sum = vec![0.0; levels.len()];
    let mut cnt = vec![0usize; levels.len()];
    for row in per_t {
        let Some(row) = row? else { continue };
        for (i, v) in row.iter().enumerate() {
            if let Some(v) = v {
                sum[i] += v;
                cnt[i] += 1;
            }
        }
    }
    Ok(FdCurve {
        levels: levels.to_vec(),
        fd: sum
            .iter()
            .zip(&cnt)
            .map(|(s, &c)| (c > 0).then(|| s / c as f64))
            .collect(),
        sizes: sizes.to_vec(),
        samples: cnt,
    })
}

/// Mean absolute FD difference over levels defined in both curves.
pub fn fd_mae(curve: &FdCurve, reference: &FdCurve) -> Result<Option<f64>> {
    if curve.levels != reference.levels {
        return Err(Error::Shape("FD curves use different levels".into()));
    }
    let d: Vec<Option<f64>> = curve
        .fd
        .iter()
        .zip(&reference.fd)
        .map(|(a, b)| Some((a.as_ref()? - b.as_ref()?).abs()))
        .collect();
    Ok(mean_defined(&d))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrendStat {
    Mean,
    Q95,
    /// days above 1 mm per year
    WetDays,
    /// days above 10 mm per year
    VeryWetDays,
}

impl TrendStat {
    pub const ALL: [TrendStat; 4] = [
        TrendStat::Mean,
        TrendStat::Q95,
        TrendStat::WetDays,
        TrendStat::VeryWetDays,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrendStat::Mean => "mean",
            TrendStat::Q95 => "q95",
            TrendStat::WetDays => "wet_days",
            TrendStat::VeryWetDays => "very_wet_days",
        }
    }
}

/// Statistic of a series with missing days removed; counts are scaled to
/// days per 365-day year.
pub fn statistic(series: &[f64], stat: TrendStat) -> Option<f64> {
    let v: Vec<f64> = series.iter().copied().filter(|x| valid(*x)).collect();
    if v.is_empty() {
        return None;
    }
    let per_year = DAYS_PER_YEAR as f64 / v.len() as f64;
    Some(match stat {
        TrendStat::Mean => v.iter().sum::<f64>() / v.len() as f64,
        TrendStat::Q95 => {
            let mut s = v;
            s.sort_by(f64::total_cmp);
            sorted_quantile(&s, 0.95)
        }
        TrendStat::WetDays => v.iter().filter(|&&x| x > WET_DAY_MM).count() as f64 * per_year,
        TrendStat::VeryWetDays => v.iter().filter(|&&x| x > 10.0).count() as f64 * per_year,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendBiasResult {
    pub t_raw: f64,
    pub t_debiased: f64,
    /// Percent; `None` when `|t_raw| < 1e-6`.
    pub tb: Option<f64>,
}

/// `100 (t_deb - t_raw) / t_raw`, guarded.
pub fn trend_bias_value(t_raw: f64, t_deb: f64) -> Option<f64> {
    (t_raw.abs() >= TREND_GUARD).then(|| 100.0 * (t_deb - t_raw) / t_raw)
}

pub fn trend_bias(
    raw_hist: &[f64],
    raw_future: &[f64],
    deb_hist: &[f64],
    deb_future: &[f64],
    stat: TrendStat,
) -> Option<TrendBiasResult> {
    let t_raw = statistic(raw_future, stat)? - statistic(raw_hist, stat)?;
    let t_debiased = statistic(deb_future, stat)? - statistic(deb_hist, stat)?;
    Some(TrendBiasResult {
        t_raw,
        t_debiased,
        tb: trend_bias_value(t_raw, t_debiased),
    })
}

/// Trend bias of every cell with the historical period `[0, split)` and the
/// future period `[split, T)`: `[stat][cell]`.
pub fn trend_bias_field(
    raw: &GridField,
    debiased: &GridField,
    split: usize,
) -> Result<Vec<Vec<Option<TrendBiasResult>>>> {
    check_aligned(raw, debiased)?;
    if split == 0 || split >= raw.ntime() {
        return Err(Error::Config(format!(
            "trend split {split} outside the series"
        )));
    }
    let per_cell: Vec<Vec<Option<TrendBiasResult>>> = (0..raw.ncells())
        .map(|c| {
            let r = raw.cell_series(c);
            let d = debiased.cell_series(c);
            TrendStat::ALL
                .iter()
                .map(|&st| trend_bias(&r[..split], &r[split..], &d[..split], &d[split..], st))
                .collect()
        })
        .collect();
    Ok((0..TrendStat::ALL.len())
        .map(|i| per_cell.iter().map(|v| v[i]).collect())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileCurve {
    pub name: String,
    /// `(q, q^5, value)`
    pub rows: Vec<(f64, f64, f64)>,
}

/// `k` evenly spaced levels over `[0, 1]`.
pub fn curve_levels(k: usize) -> Vec<f64> {
    match k {
        0 => Vec::new(),
        1 => vec![0.5],
        _ => (0..k).map(|i| i as f64 / (k - 1) as f64).collect(),
    }
}

/// Pooled empirical quantiles of each named series with the `q^5`
/// plotting coordinate.
pub fn quantile_curves(series: &[(&str, &[f64])], k: usize) -> Result<Vec<QuantileCurve>> {
    let levels = curve_levels(k);
    series
        .iter()
        .map(|(name, xs)| {
            let mut v: Vec<f64> = xs.iter().copied().filter(|x| valid(*x)).collect();
            if v.is_empty() {
                return Err(Error::Length(format!("series {name} has no values")));
            }
            v.sort_by(f64::total_cmp);
            Ok(QuantileCurve {
                name: name.to_string(),
                rows: levels
                    .iter()
                    .map(|&q| (q, q.powi(5), sorted_quantile(&v, q)))
                    .collect(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexReport {
    pub name: String,
    pub reference: Vec<Option<f64>>,
    pub simulated: Vec<Option<f64>>,
    pub percentage_bias: Vec<Option<f64>>,
    pub mean_abs_bias: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub reference: FdCurve,
    pub simulated: FdCurve,
    pub mae: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub statistic: String,
    pub tb: Vec<Option<f64>>,
    pub mean_abs_tb: Option<f64>,
}

/// Evaluation document written by the `evaluate` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nlat: usize,
    pub nlon: usize,
    pub ntime: usize,
    pub indices: Vec<IndexReport>,
    pub composite_score: Option<f64>,
    pub fd: Option<FdReport>,
    pub trend: Option<Vec<TrendReport>>,
    pub quantiles: Vec<QuantileCurve>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions<'a> {
    pub indices: Vec<Index>,
    pub fd: bool,
    /// Raw model field and history/future split for trend bias.
    pub trend: Option<(&'a GridField, usize)>,
    pub quantile_levels: usize,
}

fn pooled(field: &GridField) -> Vec<f64> {
    field.values().iter().map(|&v| v as f64).collect()
}

pub fn evaluate(
    reference: &GridField,
    sim: &GridField,
    opts: &EvalOptions<'_>,
) -> Result<EvalReport> {
    let exec = Exec::auto();
    let (r, s) = paired_indices(reference, sim, exec)?;
    let indices: Vec<IndexReport> = Index::ALL
        .iter()
        .enumerate()
        .filter(|(_, i)| opts.indices.contains(i))
        .map(|(k, i)| {
            let pb = mean_percentage_bias(&s[k], &r[k]);
            IndexReport {
                name: i.name().into(),
                reference: r[k].clone(),
                simulated: s[k].clone(),
                mean_abs_bias: mean_abs(&pb),
                percentage_bias: pb,
            }
        })
        .collect();
    let composite_score =
        mean_defined(&indices.iter().map(|i| i.mean_abs_bias).collect::<Vec<_>>());
    let fd = if opts.fd {
        let levels = default_fd_levels();
        let sizes = dyadic_sizes(reference.nlat(), reference.nlon());
        let rc = fd_curve(reference, &levels, &sizes, exec)?;
        let sc = fd_curve(sim, &levels, &sizes, exec)?;
        let mae = fd_mae(&sc, &rc)?;
        Some(FdReport {
            reference: rc,
            simulated: sc,
            mae,
        })
    } else {
        None
    };
    let trend = match opts.trend {
        Some((raw, split)) => {
            let tb = trend_bias_field(raw, sim, split)?;
            Some(
                TrendStat::ALL
                    .iter()
                    .zip(tb)
                    .map(|(st, cells)| {
                        let v: Vec<Option<f64>> =
                            cells.iter().map(|c| c.and_then(|c| c.tb)).collect();
                        TrendReport {
                            statistic: st.name().into(),
                            mean_abs_tb: mean_abs(&v),
                            tb: v,
                        }
                    })
                    .collect(),
            )
        }
        None => None,
    };
    let (rv, sv) = (pooled(reference), pooled(sim));
    let quantiles = if opts.quantile_levels > 0 {
        quantile_curves(
            &[("reference", &rv), ("simulated", &sv)],
            opts.quantile_levels,
        )?
    } else {
        Vec::new()
    };
    Ok(EvalReport {
        nlat: reference.nlat(),
        nlon: reference.nlon(),
        ntime: reference.ntime(),
        indices,
        composite_score,
        fd,
        trend,
        quantiles,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x}"))
}

impl EvalReport {
    /// `index,mean_abs_bias` rows.
    pub fn index_csv(&self) -> String {
        let mut s = String::from("index,mean_abs_bias\n");
        for i in &self.indices {
            s.push_str(&format!("{},{}\n", i.name, fmt_opt(i.mean_abs_bias)));
        }
        s
    }

    /// `series,q,q5,value` rows.
    pub fn quantile_csv(&self) -> String {
        let mut s = String::from("series,q,q5,value\n");
        for c in &self.quantiles {
            for (q, q5, v) in &c.rows {
                s.push_str(&format!("{},{q},{q5},{v}\n", c.name));
            }
        }
        s
    }

    /// `h,fd_reference,fd_simulated` rows, empty without FD.
    pub fn fd_csv(&self) -> String {
        let Some(fd) = &self.fd else {
            return String::new();
        };
        let mut s = String::from("h,fd_reference,fd_simulated\n");
        for (i, h) in fd.reference.levels.iter().enumerate() {
            s.push_str(&format!(
                "{h},{},{}\n",
                fmt_opt(fd.reference.fd[i]),
                fmt_opt(fd.simulated.fd[i])
            ));
        }
        s
    }

    /// `statistic,mean_abs_tb` rows, empty without trends.
    pub fn trend_csv(&self) -> String {
        let Some(tr) = &self.trend else {
            return String::new();
        };
        let mut s = String::from("statistic,mean_abs_tb\n");
        for t in tr {
            s.push_str(&format!("{},{}\n", t.statistic, fmt_opt(t.mean_abs_tb)));
        }
        s
    }

    pub fn summary_text(&self) -> String {
        let mut s = format!("grid {}x{}, {} days\n", self.nlat, self.nlon, self.ntime);
        for i in &self.indices {
            s.push_str(&format!(
                "{:<8} |bias| {:>9}\n",
                i.name,
                fmt_pct(i.mean_abs_bias)
            ));
        }
        s.push_str(&format!(
            "composite score {}\n",
            fmt_pct(self.composite_score)
        ));
        if let Some(fd) = &self.fd {
            s.push_str(&format!("fractal dimension MAE {}\n", fmt_opt(fd.mae)));
        }
        if let Some(tr) = &self.trend {
            for t in tr {
                s.push_str(&format!(
                    "trend {:<14} |TB| {}\n",
                    t.statistic,
                    fmt_pct(t.mean_abs_tb)
                ));
            }
        }
        s
    }
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.2}%"))
}
