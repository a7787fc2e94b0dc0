//! Gridded daily precipitation, static attributes and the GRD1 container.
//!
//! GRD1 layout (little-endian):
//!
//! ```text
//! "GRD1" | version u32 = 1 | T u32 | H u32 | W u32 | start_date i64
//!        | H x f64 lats | W x f64 lons | T*H*W x f32 values ([t][lat][lon])
//! ```
//!
//! Missing values are stored as NaN. Attribute fields reuse the container
//! with `T = 1`, one file per attribute.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Exec;

pub const MAGIC: &[u8; 4] = b"GRD1";
pub const VERSION: u32 = 1;
/// Mean Earth radius used for every geodesic computation.
pub const EARTH_RADIUS_KM: f64 = 6371.0;
/// Wet-day threshold in mm/day.
pub const WET_DAY_MM: f64 = 1.0;
/// Shortest window over which a neighbour correlation is trusted.
pub const MIN_CORRELATION_DAYS: usize = 30;
/// Landcover codes are `0..LANDCOVER_CLASSES`.
pub const LANDCOVER_CLASSES: usize = 4;

/// Byte length of a GRD1 header (everything before the value block).
pub fn header_len(nlat: usize, nlon: usize) -> usize {
    4 + 4 + 4 + 4 + 4 + 8 + 8 * nlat + 8 * nlon
}

/// A `(time, lat, lon)` field of daily precipitation in mm/day.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    start_date: i64,
    lats: Vec<f64>,
    lons: Vec<f64>,
    ntime: usize,
    values: Vec<f32>,
}

fn strictly_monotone(v: &[f64]) -> bool {
    if v.iter().any(|x| !x.is_finite()) {
        return false;
    }
    v.windows(2).all(|w| w[1] > w[0]) || v.windows(2).all(|w| w[1] < w[0])
}

fn check_coords(lats: &[f64], lons: &[f64]) -> Result<()> {
    if lats.is_empty() || lons.is_empty() {
        return Err(Error::Invariant("empty coordinate axis".into()));
    }
    if !strictly_monotone(lats) || !strictly_monotone(lons) {
        return Err(Error::Invariant(
            "coordinate arrays must be strictly monotone".into(),
        ));
    }
    if lats.iter().any(|l| l.abs() > 90.0) {
        return Err(Error::Invariant("latitude outside [-90, 90]".into()));
    }
    Ok(())
}

impl GridField {
    pub fn new(
        start_date: i64,
        lats: Vec<f64>,
        lons: Vec<f64>,
        ntime: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        let f = GridField {
            start_date,
            lats,
            lons,
            ntime,
            values,
        };
        f.validate()?;
        Ok(f)
    }

    /// Build a field from per-cell series (`series[cell][t]`).
    pub fn from_cell_series(
        start_date: i64,
        lats: Vec<f64>,
        lons: Vec<f64>,
        series: &[Vec<f64>],
    ) -> Result<Self> {
        let ncell = lats.len() * lons.len();
        if series.len() != ncell {
            return Err(Error::Shape(format!(
                "{} series for {} cells",
                series.len(),
                ncell
            )));
        }
        let ntime = series.first().map_or(0, Vec::len);
        if series.iter().any(|s| s.len() != ntime) {
            return Err(Error::Shape("ragged cell series".into()));
        }
        let mut values = vec![0f32; ntime * ncell];
        for (c, s) in series.iter().enumerate() {
            for (t, &v) in s.iter().enumerate() {
                values[t * ncell + c] = v as f32;
            }
        }
        GridField::new(start_date, lats, lons, ntime, values)
    }

    pub fn validate(&self) -> Result<()> {
        check_coords(&self.lats, &self.lons)?;
        let expect = self.ntime * self.lats.len() * self.lons.len();
        if self.values.len() != expect {
            return Err(Error::Length(format!(
                "expected {} values, found {}",
                expect,
                self.values.len()
            )));
        }
        if let Some(v) = self.values.iter().find(|v| !v.is_nan() && **v < 0.0) {
            return Err(Error::Invariant(format!("negative precipitation {v}")));
        }
        if self.values.iter().any(|v| v.is_infinite()) {
            return Err(Error::Invariant("infinite precipitation value".into()));
        }
        Ok(())
    }

    pub fn start_date(&self) -> i64 {
        self.start_date
    }
    pub fn lats(&self) -> &[f64] {
        &self.lats
    }
    pub fn lons(&self) -> &[f64] {
        &self.lons
    }
    pub fn ntime(&self) -> usize {
        self.ntime
    }
    pub fn nlat(&self) -> usize {
        self.lats.len()
    }
    pub fn nlon(&self) -> usize {
        self.lons.len()
    }
    pub fn ncells(&self) -> usize {
        self.lats.len() * self.lons.len()
    }
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, t: usize, cell: usize) -> f32 {
        self.values[t * self.ncells() + cell]
    }

    /// Centre coordinates `(lat, lon)` of a flat cell index.
    pub fn cell_coord(&self, cell: usize) -> (f64, f64) {
        let w = self.nlon();
        (self.lats[cell / w], self.lons[cell % w])
    }

    /// The 2-D snapshot at day `t`, row-major `[lat][lon]`.
    pub fn snapshot(&self, t: usize) -> &[f32] {
        let n = self.ncells();
        &self.values[t * n..(t + 1) * n]
    }

    /// Full series of one cell as f64, NaN preserved.
    pub fn cell_series(&self, cell: usize) -> Vec<f64> {
        let n = self.ncells();
        (0..self.ntime)
            .map(|t| self.values[t * n + cell] as f64)
            .collect()
    }

    /// Series of one cell restricted to `[start, end)`.
    pub fn cell_window(&self, cell: usize, start: usize, end: usize) -> Vec<f64> {
        let n = self.ncells();
        (start..end.min(self.ntime))
            .map(|t| self.values[t * n + cell] as f64)
            .collect()
    }

    /// A copy restricted to days `[start, end)`.
    pub fn time_slice(&self, start: usize, end: usize) -> Result<GridField> {
        if start >= end || end > self.ntime {
            return Err(Error::Config(format!(
                "time slice {start}..{end} outside 0..{}",
                self.ntime
            )));
        }
        let n = self.ncells();
        GridField::new(
            self.start_date + start as i64,
            self.lats.clone(),
            self.lons.clone(),
            end - start,
            self.values[start * n..end * n].to_vec(),
        )
    }

    /// A copy restricted to the rectangular block `rows x cols` of the grid.
    pub fn sub_grid(&self, rows: Range<usize>, cols: Range<usize>) -> Result<GridField> {
        if rows.is_empty() || cols.is_empty() || rows.end > self.nlat() || cols.end > self.nlon() {
            return Err(Error::Config(format!(
                "sub-grid {rows:?} x {cols:?} outside {} x {}",
                self.nlat(),
                self.nlon()
            )));
        }
        let (n, w) = (self.ncells(), self.nlon());
        let mut values = Vec::with_capacity(self.ntime * rows.len() * cols.len());
        for t in 0..self.ntime {
            for r in rows.clone() {
                let o = t * n + r * w;
                values.extend_from_slice(&self.values[o + cols.start..o + cols.end]);
            }
        }
        GridField::new(
            self.start_date,
            self.lats[rows].to_vec(),
            self.lons[cols].to_vec(),
            self.ntime,
            values,
        )
    }

    pub fn same_grid(&self, other: &GridField) -> bool {
        self.lats == other.lats && self.lons == other.lons
    }

    pub fn map_values(&self, f: impl Fn(f32) -> f32) -> Result<GridField> {
        GridField::new(
            self.start_date,
            self.lats.clone(),
            self.lons.clone(),
            self.ntime,
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out =
            Vec::with_capacity(header_len(self.nlat(), self.nlon()) + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in [self.ntime, self.nlat(), self.nlon()] {
            let d = u32::try_from(d).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.start_date.to_le_bytes());
        for v in self.lats.iter().chain(&self.lons) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<GridField> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic bytes, expected GRD1".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported GRD1 version {version}")));
        }
        let t = r.u32()? as usize;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let start_date = r.i64()?;
        let lats = (0..h).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let lons = (0..w).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let n = t * h * w;
        let rest = &bytes[r.pos..];
        if rest.len() != 4 * n {
            return Err(Error::Length(format!(
                "data block holds {} bytes, header declares {} values ({} bytes)",
                rest.len(),
                n,
                4 * n
            )));
        }
        let values = rest
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        GridField::new(start_date, lats, lons, t, values)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Length("truncated GRD1 header".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn write_grd(field: &GridField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = field.to_bytes()?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_grd(path: impl AsRef<Path>) -> Result<GridField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    GridField::from_bytes(&bytes)
}

/// Static per-cell features on the same grid as a [`GridField`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeField {
    pub lats: Vec<f64>,
    pub lons: Vec<f64>,
    /// metres
    pub elevation: Vec<f64>,
    /// degrees
    pub slope: Vec<f64>,
    /// degrees clockwise from north, `[0, 360)`
    pub aspect: Vec<f64>,
    pub landcover: Vec<u8>,
}

pub const ATTRIBUTE_FILES: [&str; 4] = ["elevation", "slope", "aspect", "landcover"];

impl AttributeField {
    pub fn ncells(&self) -> usize {
        self.lats.len() * self.lons.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_coords(&self.lats, &self.lons)?;
        let n = self.ncells();
        if self.elevation.len() != n
            || self.slope.len() != n
            || self.aspect.len() != n
            || self.landcover.len() != n
        {
            return Err(Error::Length(
                "attribute arrays must hold one value per cell".into(),
            ));
        }
        if self.aspect.iter().any(|a| !(0.0..360.0).contains(a)) {
            return Err(Error::Invariant("aspect outside [0, 360)".into()));
        }
        if self
            .landcover
            .iter()
            .any(|&c| c as usize >= LANDCOVER_CLASSES)
        {
            return Err(Error::Invariant(format!(
                "landcover code outside 0..{LANDCOVER_CLASSES}"
            )));
        }
        if self
            .elevation
            .iter()
            .chain(&self.slope)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Invariant("non-finite attribute value".into()));
        }
        Ok(())
    }

    pub fn matches(&self, field: &GridField) -> bool {
        self.lats == field.lats() && self.lons == field.lons()
    }

    fn layer(&self, values: Vec<f32>) -> Result<GridField> {
        GridField::new(0, self.lats.clone(), self.lons.clone(), 1, values)
    }

    /// Write `elevation.grd`, `slope.grd`, `aspect.grd` and `landcover.grd`
    /// into `dir`. The container forbids negative values, so elevations must
    /// be at or above sea level.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        write_grd(
            &self.layer(to32(&self.elevation))?,
            dir.join("elevation.grd"),
        )?;
        write_grd(&self.layer(to32(&self.slope))?, dir.join("slope.grd"))?;
        write_grd(&self.layer(to32(&self.aspect))?, dir.join("aspect.grd"))?;
        write_grd(
            &self.layer(self.landcover.iter().map(|&c| c as f32).collect())?,
            dir.join("landcover.grd"),
        )
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<AttributeField> {
        let dir = dir.as_ref();
        let mut layers = Vec::new();
        for name in ATTRIBUTE_FILES {
            let f = read_grd(dir.join(format!("{name}.grd")))?;
            if f.ntime() != 1 {
                return Err(Error::Format(format!("{name}.grd must have T = 1")));
            }
            layers.push(f);
        }
        if !layers.iter().all(|l| l.same_grid(&layers[0])) {
            return Err(Error::Invariant(
                "attribute layers on different grids".into(),
            ));
        }
        let to64 = |f: &GridField| f.values().iter().map(|&v| v as f64).collect::<Vec<_>>();
        let landcover = layers[3]
            .values()
            .iter()
            .map(|&v| {
                if v.fract() != 0.0 || v < 0.0 || v > u8::MAX as f32 {
                    Err(Error::Format(format!(
                        "landcover code {v} is not an integer class"
                    )))
                } else {
                    Ok(v as u8)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let a = AttributeField {
            lats: layers[0].lats().to_vec(),
            lons: layers[0].lons().to_vec(),
            elevation: to64(&layers[0]),
            slope: to64(&layers[1]),
            aspect: to64(&layers[2]),
            landcover,
        };
        a.validate()?;
        Ok(a)
    }
}

/// Pairwise geodesic relationship between two points.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct GeoFeatures {
    pub d_north_km: f64,
    pub d_east_km: f64,
    pub distance_km: f64,
    pub bearing_deg: f64,
}

/// Haversine distance, initial bearing and local displacement from `a` to
/// `b`, both given as `(lat, lon)` in degrees.
pub fn geodesic_features(a: (f64, f64), b: (f64, f64)) -> GeoFeatures {
    if a == b {
        return GeoFeatures::default();
    }
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    let distance_km = 2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin();
    let y = dlon.sin() * lat2.cos();
    let x = lat1.cos() * lat2.sin() - lat1.sin() * lat2.cos() * dlon.cos();
    let mut bearing_deg = y.atan2(x).to_degrees().rem_euclid(360.0);
    if bearing_deg >= 360.0 {
        bearing_deg = 0.0;
    }
    GeoFeatures {
        d_north_km: EARTH_RADIUS_KM * dlat,
        d_east_km: EARTH_RADIUS_KM * dlon * ((lat1 + lat2) / 2.0).cos(),
        distance_km,
        bearing_deg,
    }
}

/// Nearest-neighbour regridding: every destination cell copies the value of
/// the geodesically closest source cell centre, ties going to the lower flat
/// source index.
pub fn regrid_nearest(src: &GridField, dst_lats: &[f64], dst_lons: &[f64]) -> Result<GridField> {
    if dst_lats.is_empty() || dst_lons.is_empty() {
        return Err(Error::Config("empty destination grid".into()));
    }
    check_coords(dst_lats, dst_lons)?;
    let nsrc = src.ncells();
    let mut map = Vec::with_capacity(dst_lats.len() * dst_lons.len());
    for &la in dst_lats {
        for &lo in dst_lons {
            let mut best = (f64::INFINITY, 0usize);
            for s in 0..nsrc {
                let d = geodesic_features((la, lo), src.cell_coord(s)).distance_km;
                if d < best.0 {
                    best = (d, s);
                }
            }
            map.push(best.1);
        }
    }
    let ndst = map.len();
    let mut values = vec![0f32; src.ntime() * ndst];
    for t in 0..src.ntime() {
        let snap = src.snapshot(t);
        for (d, &s) in map.iter().enumerate() {
            values[t * ndst + d] = snap[s];
        }
    }
    GridField::new(
        src.start_date(),
        dst_lats.to_vec(),
        dst_lons.to_vec(),
        src.ntime(),
        values,
    )
}

/// Wet-day flags per cell per day; `None` marks a missing day.
#[derive(Clone, Debug, PartialEq)]
pub struct WetDayIndicator {
    pub threshold: f64,
    pub ncells: usize,
    pub ntime: usize,
    /// layout `[t][cell]`
    pub flags: Vec<Option<bool>>,
}

impl WetDayIndicator {
    pub fn get(&self, t: usize, cell: usize) -> Option<bool> {
        self.flags[t * self.ncells + cell]
    }
}

/// Flags for a single series: `Some(x >= threshold)`, `None` where missing.
pub fn wet_days(series: &[f64], threshold: f64) -> Vec<Option<bool>> {
    series
        .iter()
        .map(|&x| {
            if x.is_nan() {
                None
            } else {
                Some(x >= threshold)
            }
        })
        .collect()
}

pub fn wet_day_indicator(field: &GridField, threshold: f64) -> Result<WetDayIndicator> {
    if !(threshold > 0.0) {
        return Err(Error::Config("wet-day threshold must be positive".into()));
    }
    let flags = field
        .values()
        .iter()
        .map(|&v| {
            if v.is_nan() {
                None
            } else {
                Some(v as f64 >= threshold)
            }
        })
        .collect();
    Ok(WetDayIndicator {
        threshold,
        ncells: field.ncells(),
        ntime: field.ntime(),
        flags,
    })
}

/// One selected neighbour of a target cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub cell: usize,
    pub correlation: f64,
    pub geo: GeoFeatures,
}

/// Per-cell ordered lists of positively correlated nearest neighbours.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborGraph {
    pub k: usize,
    pub lists: Vec<Vec<Neighbor>>,
}

impl NeighborGraph {
    pub fn ncells(&self) -> usize {
        self.lists.len()
    }

    /// Slot validity for cell `i`: the first `len` slots are filled, the rest
    /// masked.
    pub fn mask(&self, i: usize) -> Vec<bool> {
        (0..self.k).map(|s| s < self.lists[i].len()).collect()
    }

    pub fn slot(&self, i: usize, s: usize) -> Option<&Neighbor> {
        self.lists[i].get(s)
    }
}

/// Pearson correlation over pairwise non-missing days.
///
/// Returns `None` when fewer than [`MIN_CORRELATION_DAYS`] common days exist
/// or when a zero-variance series makes the coefficient undefined and the two
/// series are not identical. Identical series (including constant ones)
/// correlate at exactly `+1`.
pub fn pairwise_correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    let pairs: Vec<(f64, f64)> = a
        .iter()
        .zip(b)
        .filter(|(x, y)| !x.is_nan() && !y.is_nan())
        .map(|(&x, &y)| (x, y))
        .collect();
    if pairs.len() < MIN_CORRELATION_DAYS {
        return None;
    }
    if pairs.iter().all(|(x, y)| x == y) {
        return Some(1.0);
    }
    let n = pairs.len() as f64;
    let (mx, my) = pairs
        .iter()
        .fold((0.0, 0.0), |(sx, sy), (x, y)| (sx + x, sy + y));
    let (mx, my) = (mx / n, my / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in &pairs {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// For each cell, the `k` geodesically nearest cells whose correlation with
/// it over `window` is strictly positive. `candidates` optionally restricts
/// which cells may act as neighbours (targets are always all cells).
pub fn select_neighbors(
    field: &GridField,
    k: usize,
    window: (usize, usize),
    candidates: Option<&[bool]>,
) -> Result<NeighborGraph> {
    if k < 1 {
        return Err(Error::Config("neighbour count k must be at least 1".into()));
    }
    let (start, end) = window;
    if end > field.ntime() || start >= end {
        return Err(Error::Config(format!(
            "correlation window {start}..{end} outside 0..{}",
            field.ntime()
        )));
    }
    if end - start < MIN_CORRELATION_DAYS {
        return Err(Error::Config(format!(
            "correlation window shorter than {MIN_CORRELATION_DAYS} days"
        )));
    }
    let n = field.ncells();
    if let Some(c) = candidates {
        if c.len() != n {
            return Err(Error::Shape(
                "candidate mask length differs from cell count".into(),
            ));
        }
    }
    let series: Vec<Vec<f64>> = (0..n).map(|c| field.cell_window(c, start, end)).collect();
    let lists = Exec::auto().map_range(n, |i| {
        let here = field.cell_coord(i);
        let mut order: Vec<(f64, usize, GeoFeatures)> = (0..n)
            .filter(|&j| j != i && candidates.is_none_or(|c| c[j]))
            .map(|j| {
                let g = geodesic_features(here, field.cell_coord(j));
                (g.distance_km, j, g)
            })
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut out = Vec::with_capacity(k);
        for (_, j, geo) in order {
            if out.len() == k {
                break;
            }
            if let Some(r) = pairwise_correlation(&series[i], &series[j]) {
                if r > 0.0 {
                    out.push(Neighbor {
                        cell: j,
                        correlation: r,
                        geo,
                    });
                }
            }
        }
        out
    });
    Ok(NeighborGraph { k, lists })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(t: usize, lats: Vec<f64>, lons: Vec<f64>, values: Vec<f32>) -> GridField {
        GridField::new(0, lats, lons, t, values).unwrap()
    }

    #[test]
    fn header_length_matches_layout() {
        assert_eq!(header_len(2, 3), 68);
        let f = field(1, vec![0.0, 1.0], vec![0.0, 1.0, 2.0], vec![0.0; 6]);
        assert_eq!(f.to_bytes().unwrap().len(), 68 + 6 * 4);
    }

    #[test]
    fn rejects_negative_values() {
        let err = GridField::new(0, vec![0.0], vec![0.0], 1, vec![-1.0]).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
    }

    #[test]
    fn rejects_non_monotone_coords() {
        let f = field(1, vec![0.0, 1.0], vec![0.0], vec![0.0, 0.0]);
        let mut bytes = f.to_bytes().unwrap();
        // overwrite second latitude with the first
        let lat0 = bytes[32..40].to_vec();
        bytes[40..48].copy_from_slice(&lat0);
        assert!(matches!(
            GridField::from_bytes(&bytes),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let f = field(10, vec![0.0], vec![0.0, 1.0], vec![1.0; 20]);
        let mut bytes = f.to_bytes().unwrap();
        let good = bytes.clone();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            GridField::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
        let short = &good[..good.len() - 2 * 4];
        assert!(matches!(
            GridField::from_bytes(short),
            Err(Error::Length(_))
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.grd");
        let f = field(
            2,
            vec![10.0, 11.0],
            vec![5.0],
            vec![0.5, f32::NAN, 3.0, 0.0],
        );
        write_grd(&f, &p).unwrap();
        let g = read_grd(&p).unwrap();
        assert_eq!(f.to_bytes().unwrap(), g.to_bytes().unwrap());
        assert!(g.get(0, 1).is_nan());
    }

    #[test]
    fn regrid_picks_nearest_centre() {
        let src = field(1, vec![0.0, 1.0], vec![0.0, 1.0], vec![1.0, 2.0, 3.0, 4.0]);
        let out = regrid_nearest(&src, &[0.1], &[0.1]).unwrap();
        assert_eq!(out.values(), &[1.0]);
        let same = regrid_nearest(&src, src.lats(), src.lons()).unwrap();
        assert_eq!(same, src);
        // equidistant between lon 0 and lon 1 on the equator
        let tie = regrid_nearest(&src, &[0.0], &[0.5]).unwrap();
        assert_eq!(tie.values(), &[1.0]);
        assert!(regrid_nearest(&src, &[], &[0.0]).is_err());
    }

    #[test]
    fn wet_day_flags() {
        assert_eq!(
            wet_days(&[0.5, 1.0, 3.2], 1.0),
            vec![Some(false), Some(true), Some(true)]
        );
        assert_eq!(wet_days(&[0.0; 3], 1.0), vec![Some(false); 3]);
        assert_eq!(wet_days(&[f64::NAN, 2.0], 1.0), vec![None, Some(true)]);
        let f = field(2, vec![0.0], vec![0.0], vec![f32::NAN, 2.0]);
        let w = wet_day_indicator(&f, 1.0).unwrap();
        assert_eq!(w.get(0, 0), None);
        assert_eq!(w.get(1, 0), Some(true));
        assert!(wet_day_indicator(&f, 0.0).is_err());
    }

    #[test]
    fn geodesic_reference_values() {
        assert_eq!(
            geodesic_features((3.0, 4.0), (3.0, 4.0)),
            GeoFeatures::default()
        );
        let e = geodesic_features((0.0, 0.0), (0.0, 1.0));
        let one_deg = EARTH_RADIUS_KM * 1f64.to_radians();
        assert!((e.distance_km - 111.19492664455873).abs() < 1e-9);
        assert!((e.distance_km - one_deg).abs() < 1e-9);
        assert!((e.bearing_deg - 90.0).abs() < 1e-12);
        let n = geodesic_features((0.0, 0.0), (1.0, 0.0));
        assert!((n.distance_km - one_deg).abs() < 1e-9);
        assert!(n.bearing_deg.abs() < 1e-12);
        assert!((n.d_north_km - one_deg).abs() < 1e-9);
    }

    fn ramp(n: usize, sign: f64) -> Vec<f64> {
        (0..n).map(|t| sign * (t as f64 + 1.0)).collect()
    }

    #[test]
    fn identical_series_pick_nearest() {
        let s = ramp(40, 1.0);
        let series = vec![s.clone(); 4];
        let f = GridField::from_cell_series(0, vec![0.0, 1.0], vec![0.0, 2.0], &series).unwrap();
        let g = select_neighbors(&f, 2, (0, 40), None).unwrap();
        // cell 0 at (0,0): nearest is (1,0) [cell 2], then (0,2) [cell 1]
        let picked: Vec<usize> = g.lists[0].iter().map(|n| n.cell).collect();
        assert_eq!(picked, vec![2, 1]);
        assert!(g.lists[0].iter().all(|n| n.correlation == 1.0));
    }

    #[test]
    fn anticorrelated_candidate_excluded() {
        let up = ramp(40, 1.0);
        let mut down = ramp(40, -1.0);
        // keep the field non-negative: reflect about a constant
        down.iter_mut().for_each(|v| *v += 100.0);
        let f =
            GridField::from_cell_series(0, vec![0.0], vec![0.0, 1.0, 5.0], &[up.clone(), down, up])
                .unwrap();
        let g = select_neighbors(&f, 2, (0, 40), None).unwrap();
        let picked: Vec<usize> = g.lists[0].iter().map(|n| n.cell).collect();
        assert_eq!(picked, vec![2]);
        assert_eq!(g.mask(0), vec![true, false]);
    }

    #[test]
    fn degenerate_grid_and_guards() {
        let f = GridField::from_cell_series(0, vec![0.0], vec![0.0], &[ramp(40, 1.0)]).unwrap();
        let g = select_neighbors(&f, 16, (0, 40), None).unwrap();
        assert!(g.lists[0].is_empty());
        assert!(g.mask(0).iter().all(|m| !m));
        assert!(select_neighbors(&f, 0, (0, 40), None).is_err());
        assert!(select_neighbors(&f, 1, (0, 20), None).is_err());
    }

    #[test]
    fn constant_series_rule() {
        let c = vec![2.0; 40];
        assert_eq!(pairwise_correlation(&c, &c), Some(1.0));
        assert_eq!(pairwise_correlation(&c, &ramp(40, 1.0)), None);
        let mut gappy = ramp(40, 1.0);
        gappy[3] = f64::NAN;
        assert!(pairwise_correlation(&gappy, &ramp(40, 1.0)).unwrap() > 0.999);
    }

    #[test]
    fn sub_grid_blocks() {
        let f = field(
            2,
            vec![0.0, 1.0, 2.0],
            vec![10.0, 11.0],
            (0..12).map(|v| v as f32).collect(),
        );
        let g = f.sub_grid(1..3, 1..2).unwrap();
        assert_eq!(g.lats(), &[1.0, 2.0]);
        assert_eq!(g.lons(), &[11.0]);
        assert_eq!(g.values(), &[3.0, 5.0, 9.0, 11.0]);
        assert!(f.sub_grid(0..4, 0..1).is_err());
    }
}
