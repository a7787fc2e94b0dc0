//! Synthetic reference climate with a known, injectable monotone bias.
//!
//! Occurrence is a daily Gaussian noise field, smoothed in space and
//! thresholded at the local wet-day probability; wet-day amounts are gamma
//! draws whose parameters vary smoothly across the grid. The "model" field
//! maps wet values through `a * x^p` and sprinkles drizzle on dry days.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::gridio::{AttributeField, GridField, EARTH_RADIUS_KM, LANDCOVER_CLASSES};
use crate::losses::sorted_quantile;
use crate::metrics::DAYS_PER_YEAR;
use crate::par::Exec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasConfig {
    /// Multiplicative factor `a`.
    pub a: f64,
    /// Exponent `p`.
    pub p: f64,
    pub drizzle_prob: f64,
    /// Mean drizzle amount in mm.
    pub drizzle_scale: f64,
    /// Per-cell factor `a * exp(a_spread * z)` with `z` the standardised
    /// elevation; 0 keeps `a` uniform.
    pub a_spread: f64,
}

impl Default for BiasConfig {
    fn default() -> Self {
        BiasConfig {
            a: 1.3,
            p: 1.1,
            drizzle_prob: 0.3,
            drizzle_scale: 0.5,
            a_spread: 0.0,
        }
    }
}

impl BiasConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0) || !(self.p > 0.0) {
            return Err(Error::Config("bias a and p must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.drizzle_prob) || !(self.drizzle_scale > 0.0) {
            return Err(Error::Config(
                "drizzle probability or scale out of range".into(),
            ));
        }
        if !self.a_spread.is_finite() {
            return Err(Error::Config("bias spread must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub nlat: usize,
    pub nlon: usize,
    /// South-west corner, degrees.
    pub lat0: f64,
    pub lon0: f64,
    pub spacing_deg: f64,
    pub years: usize,
    pub start_date: i64,
    pub seed: u64,
    /// Mean wet-day probability.
    pub p_wet: f64,
    /// Relative spatial variation of the wet-day probability.
    pub p_wet_spread: f64,
    /// Relative amplitude of the seasonal sinusoid.
    pub seasonal_amplitude: f64,
    pub gamma_shape: f64,
    /// mm
    pub gamma_scale: f64,
    /// Relative spatial variation of the gamma parameters.
    pub param_spread: f64,
    /// Correlation length of the noise fields, in cells.
    pub corr_length: f64,
    /// m
    pub elevation_max: f64,
    pub bias: BiasConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            nlat: 8,
            nlon: 8,
            lat0: 37.0,
            lon0: -105.0,
            spacing_deg: 0.25,
            years: 10,
            start_date: 0,
            seed: 7,
            p_wet: 0.35,
            p_wet_spread: 0.3,
            seasonal_amplitude: 0.3,
            gamma_shape: 0.8,
            gamma_scale: 8.0,
            param_spread: 0.3,
            corr_length: 2.0,
            elevation_max: 2000.0,
            bias: BiasConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nlat == 0 || self.nlon == 0 || self.years == 0 {
            return Err(Error::Config("grid and years must be non-empty".into()));
        }
        if !(0.0..1.0).contains(&self.p_wet) {
            return Err(Error::Config(format!(
                "p_wet {} outside [0, 1)",
                self.p_wet
            )));
        }
        if !(self.gamma_shape > 0.0) || !(self.gamma_scale > 0.0) {
            return Err(Error::Config(
                "gamma shape and scale must be positive".into(),
            ));
        }
        if !(self.spacing_deg > 0.0) || !(self.corr_length >= 0.0) || !(self.elevation_max >= 0.0) {
            return Err(Error::Config(
                "spacing, correlation length or elevation invalid".into(),
            ));
        }
        let lat_hi = self.lat0 + self.spacing_deg * (self.nlat - 1) as f64;
        if self.lat0.abs() > 90.0 || lat_hi.abs() > 90.0 {
            return Err(Error::Config("latitudes outside [-90, 90]".into()));
        }
        for s in [
            self.p_wet_spread,
            self.seasonal_amplitude,
            self.param_spread,
        ] {
            if !(0.0..1.0).contains(&s) {
                return Err(Error::Config("relative spreads must lie in [0, 1)".into()));
            }
        }
        self.bias.validate()
    }

    pub fn ndays(&self) -> usize {
        self.years * DAYS_PER_YEAR
    }

    pub fn lats(&self) -> Vec<f64> {
        (0..self.nlat)
            .map(|i| self.lat0 + self.spacing_deg * i as f64)
            .collect()
    }

    pub fn lons(&self) -> Vec<f64> {
        (0..self.nlon)
            .map(|j| self.lon0 + self.spacing_deg * j as f64)
            .collect()
    }
}

/// Separable truncated Gaussian smoother on an `nrow x ncol` grid whose
/// output has unit variance for white-noise input.
struct Smoother {
    nrow: usize,
    ncol: usize,
    kernel: Vec<f64>,
    radius: usize,
    inv_std: Vec<f64>,
}

impl Smoother {
    fn new(nrow: usize, ncol: usize, length: f64) -> Self {
        let radius = if length > 0.0 {
            (3.0 * length).ceil() as usize
        } else {
            0
        };
        let kernel: Vec<f64> = (0..=2 * radius)
            .map(|k| {
                let d = k as f64 - radius as f64;
                if length > 0.0 {
                    (-0.5 * (d / length).powi(2)).exp()
                } else {
                    1.0
                }
            })
            .collect();
        let energy = |n: usize, i: usize| -> f64 {
            (0..=2 * radius)
                .filter_map(|k| {
                    let src = i as isize + k as isize - radius as isize;
                    (src >= 0 && (src as usize) < n).then(|| kernel[k] * kernel[k])
                })
                .sum()
        };
        let row_e: Vec<f64> = (0..nrow).map(|i| energy(nrow, i)).collect();
        let col_e: Vec<f64> = (0..ncol).map(|j| energy(ncol, j)).collect();
        let inv_std = (0..nrow * ncol)
            .map(|c| 1.0 / (row_e[c / ncol] * col_e[c % ncol]).sqrt())
            .collect();
        Smoother {
            nrow,
            ncol,
            kernel,
            radius,
            inv_std,
        }
    }

    fn apply(&self, noise: &[f64]) -> Vec<f64> {
        let (nr, nc, r) = (self.nrow, self.ncol, self.radius as isize);
        let pass = |src: &[f64], along_rows: bool| -> Vec<f64> {
            let mut out = vec![0.0; nr * nc];
            for i in 0..nr {
                for j in 0..nc {
                    let mut acc = 0.0;
                    for (k, w) in self.kernel.iter().enumerate() {
                        let o = k as isize - r;
                        let (ii, jj) = if along_rows {
                            (i as isize + o, j as isize)
                        } else {
                            (i as isize, j as isize + o)
                        };
                        if ii >= 0 && jj >= 0 && (ii as usize) < nr && (jj as usize) < nc {
                            acc += w * src[ii as usize * nc + jj as usize];
                        }
                    }
                    out[i * nc + j] = acc;
                }
            }
            out
        };
        let a = pass(noise, true);
        let mut b = pass(&a, false);
        b.iter_mut().zip(&self.inv_std).for_each(|(v, s)| *v *= s);
        b
    }

    fn field(&self, rng: &mut impl Rng) -> Vec<f64> {
        let noise: Vec<f64> = (0..self.nrow * self.ncol)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        self.apply(&noise)
    }
}

/// Smooth field rescaled to `[-1, 1]` (all zeros if constant).
fn unit_field(sm: &Smoother, rng: &mut impl Rng) -> Vec<f64> {
    let f = sm.field(rng);
    let lo = f.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return vec![0.0; f.len()];
    }
    f.iter().map(|v| 2.0 * (v - lo) / (hi - lo) - 1.0).collect()
}

fn static_rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(0);
    r
}

fn year_rng(seed: u64, year: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1 + year as u64);
    r
}

fn terrain(cfg: &SynthConfig, sm: &Smoother, rng: &mut ChaCha8Rng) -> AttributeField {
    let (nr, nc) = (cfg.nlat, cfg.nlon);
    let elevation: Vec<f64> = unit_field(sm, rng)
        .iter()
        .map(|u| 0.5 * (u + 1.0) * cfg.elevation_max)
        .collect();
    let lats = cfg.lats();
    let km_per_deg = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
    let dy = cfg.spacing_deg * km_per_deg * 1000.0;
    let mut slope = vec![0.0; nr * nc];
    let mut aspect = vec![0.0; nr * nc];
    let z = |i: usize, j: usize| elevation[i * nc + j];
    for i in 0..nr {
        let dx = dy * lats[i].to_radians().cos().max(1e-6);
        for j in 0..nc {
            let (i0, i1) = (i.saturating_sub(1), (i + 1).min(nr - 1));
            let (j0, j1) = (j.saturating_sub(1), (j + 1).min(nc - 1));
            let dzdn = if i1 > i0 {
                (z(i1, j) - z(i0, j)) / ((i1 - i0) as f64 * dy)
            } else {
                0.0
            };
            let dzde = if j1 > j0 {
                (z(i, j1) - z(i, j0)) / ((j1 - j0) as f64 * dx)
            } else {
                0.0
            };
            let g = (dzdn * dzdn + dzde * dzde).sqrt();
            slope[i * nc + j] = g.atan().to_degrees();
            let a = if g > 0.0 {
                (-dzde).atan2(-dzdn).to_degrees().rem_euclid(360.0)
            } else {
                0.0
            };
            aspect[i * nc + j] = if a >= 360.0 { 0.0 } else { a };
        }
    }
    let block = 4;
    let bnc = nc.div_ceil(block);
    let codes: Vec<u8> = (0..nr.div_ceil(block) * bnc)
        .map(|_| rng.random_range(0..LANDCOVER_CLASSES as u8))
        .collect();
    let landcover = (0..nr * nc)
        .map(|c| codes[(c / nc / block) * bnc + (c % nc) / block])
        .collect();
    AttributeField {
        lats,
        lons: cfg.lons(),
        elevation,
        slope,
        aspect,
        landcover,
    }
}

/// Reference precipitation and static attributes, reproducible from the
/// seed. Years are generated independently from per-year streams.
pub fn gen_reference(cfg: &SynthConfig) -> Result<(GridField, AttributeField)> {
    gen_reference_with(cfg, Exec::auto())
}

pub fn gen_reference_with(cfg: &SynthConfig, exec: Exec) -> Result<(GridField, AttributeField)> {
    cfg.validate()?;
    let (nr, nc) = (cfg.nlat, cfg.nlon);
    let ncell = nr * nc;
    let sm = Smoother::new(nr, nc, cfg.corr_length);
    let mut rng = static_rng(cfg.seed);
    let attrs = terrain(cfg, &sm, &mut rng);
    let p_cell: Vec<f64> = unit_field(&sm, &mut rng)
        .iter()
        .map(|u| cfg.p_wet * (1.0 + cfg.p_wet_spread * u))
        .collect();
    let shape: Vec<f64> = unit_field(&sm, &mut rng)
        .iter()
        .map(|u| cfg.gamma_shape * (1.0 + cfg.param_spread * u))
        .collect();
    let scale: Vec<f64> = unit_field(&sm, &mut rng)
        .iter()
        .map(|u| cfg.gamma_scale * (1.0 + cfg.param_spread * u))
        .collect();
    let gammas = shape
        .iter()
        .zip(&scale)
        .map(|(&k, &th)| Gamma::new(k, th).map_err(|e| Error::Config(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let doy0 = cfg.start_date.rem_euclid(DAYS_PER_YEAR as i64) as usize;
    let years = exec.map_range(cfg.years, |y| {
        let mut rng = year_rng(cfg.seed, y);
        let mut vals = vec![0f32; DAYS_PER_YEAR * ncell];
        for d in 0..DAYS_PER_YEAR {
            let doy = (doy0 + d) % DAYS_PER_YEAR;
            let season = 1.0
                + cfg.seasonal_amplitude
                    * (2.0 * std::f64::consts::PI * doy as f64 / DAYS_PER_YEAR as f64).sin();
            let z = sm.field(&mut rng);
            for c in 0..ncell {
                let p = (p_cell[c] * season).clamp(0.0, 0.999);
                let thr = if p > 0.0 {
                    normal.inverse_cdf(p)
                } else {
                    f64::NEG_INFINITY
                };
                // draw the amount unconditionally so streams stay aligned
                let amount: f64 = gammas[c].sample(&mut rng);
                if z[c] < thr {
                    vals[d * ncell + c] = amount.max(f64::from(f32::MIN_POSITIVE)) as f32;
                }
            }
        }
        vals
    });
    let values = years.concat();
    let field = GridField::new(cfg.start_date, cfg.lats(), cfg.lons(), cfg.ndays(), values)?;
    Ok((field, attrs))
}

/// Per-cell bias factor `a * exp(a_spread * z_elevation)`.
pub fn bias_factors(bias: &BiasConfig, attrs: &AttributeField) -> Vec<f64> {
    let n = attrs.elevation.len().max(1) as f64;
    let m = attrs.elevation.iter().sum::<f64>() / n;
    let sd = (attrs
        .elevation
        .iter()
        .map(|e| (e - m) * (e - m))
        .sum::<f64>()
        / n)
        .sqrt();
    attrs
        .elevation
        .iter()
        .map(|e| {
            let z = if sd > 0.0 { (e - m) / sd } else { 0.0 };
            bias.a * (bias.a_spread * z).exp()
        })
        .collect()
}

/// Map wet values through `a x^p` and add drizzle on dry days, with a
/// uniform factor `a`.
pub fn apply_known_bias(reference: &GridField, bias: &BiasConfig, seed: u64) -> Result<GridField> {
    apply_known_bias_cells(reference, bias, &vec![bias.a; reference.ncells()], seed)
}

/// As [`apply_known_bias`] with a factor per cell.
pub fn apply_known_bias_cells(
    reference: &GridField,
    bias: &BiasConfig,
    a_cell: &[f64],
    seed: u64,
) -> Result<GridField> {
    bias.validate()?;
    let n = reference.ncells();
    if a_cell.len() != n || a_cell.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::Config(
            "one positive bias factor per cell required".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let drizzle = Exp::new(1.0 / bias.drizzle_scale).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(reference.values().len());
    for (i, &v) in reference.values().iter().enumerate() {
        let x = v as f64;
        let y = if v.is_nan() {
            f64::NAN
        } else if x > 0.0 {
            a_cell[i % n] * x.powf(bias.p)
        } else if bias.drizzle_prob > 0.0 && rng.random::<f64>() < bias.drizzle_prob {
            drizzle.sample(&mut rng)
        } else {
            0.0
        };
        out.push(y as f32);
    }
    GridField::new(
        reference.start_date(),
        reference.lats().to_vec(),
        reference.lons().to_vec(),
        reference.ntime(),
        out,
    )
}

/// A generated reference, its biased counterpart and the attributes.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub reference: GridField,
    pub gcm: GridField,
    pub attrs: AttributeField,
    pub bias_factors: Vec<f64>,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthWorld> {
    let (reference, attrs) = gen_reference(cfg)?;
    let factors = bias_factors(&cfg.bias, &attrs);
    let gcm = apply_known_bias_cells(&reference, &cfg.bias, &factors, cfg.seed)?;
    Ok(SynthWorld {
        reference,
        gcm,
        attrs,
        bias_factors: factors,
    })
}

fn sorted_valid(xs: Vec<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = xs.into_iter().filter(|x| !x.is_nan()).collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Per cell and level `|Q_biased(q) - Q_ref(q)|`: `[cell][level]`.
pub fn oracle_quantile_gap(
    reference: &GridField,
    biased: &GridField,
    levels: &[f64],
) -> Result<Vec<Vec<f64>>> {
    if !reference.same_grid(biased) {
        return Err(Error::Invariant("fields are on different grids".into()));
    }
    (0..reference.ncells())
        .map(|c| {
            let r = sorted_valid(reference.cell_series(c));
            let b = sorted_valid(biased.cell_series(c));
            if r.is_empty() || b.is_empty() {
                return Err(Error::Length(format!("cell {c} has no valid days")));
            }
            Ok(levels
                .iter()
                .map(|&q| (sorted_quantile(&b, q) - sorted_quantile(&r, q)).abs())
                .collect())
        })
        .collect()
}

/// Mean of [`oracle_quantile_gap`] over cells and levels.
pub fn mean_quantile_gap(reference: &GridField, biased: &GridField, levels: &[f64]) -> Result<f64> {
    let g = oracle_quantile_gap(reference, biased, levels)?;
    let n = (g.len() * levels.len()).max(1) as f64;
    Ok(g.iter().flatten().sum::<f64>() / n)
}
