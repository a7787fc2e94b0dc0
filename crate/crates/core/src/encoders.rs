//! Parameter network: a per-node temporal convolution encoder followed by
//! geodesic-biased self-attention across the nodes of a patch and a linear
//! head emitting raw transform parameters for every node and day.
//!
//! A patch is one target cell plus up to `neighbors` graph neighbours; empty
//! neighbour slots are zero-filled and masked out of the attention keys.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::gridio::{
    geodesic_features, AttributeField, GridField, NeighborGraph, LANDCOVER_CLASSES, WET_DAY_MM,
};
use crate::transform::{self, raw_len, softplus_inv};

/// Static channels: elevation, slope, sin(aspect), cos(aspect), landcover
/// one-hot.
pub const STATIC_CHANNELS: usize = 4 + LANDCOVER_CLASSES;
/// Pair features fed to the attention offset network: north and east
/// displacement, distance, sin and cos of bearing.
pub const PAIR_FEATURES: usize = 5;
const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kernel: usize,
    pub conv_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub model_dim: usize,
    /// Hidden width of the per-head geodesic offset perceptron.
    pub geo_hidden: usize,
    pub lags: usize,
    pub bumps: usize,
    pub neighbors: usize,
    /// Scale applied to the Xavier init of the parameter head weights.
    pub head_init_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kernel: 3,
            conv_layers: 2,
            hidden: 64,
            heads: 2,
            model_dim: 64,
            geo_hidden: 16,
            lags: 3,
            bumps: transform::BUMPS,
            neighbors: 16,
            head_init_scale: 0.01,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config("temporal kernel size must be odd".into()));
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config("model dim must be divisible by heads".into()));
        }
        if self.hidden != self.model_dim {
            return Err(Error::Config(
                "temporal hidden width must equal the attention model dim".into(),
            ));
        }
        if self.bumps == 0 || self.conv_layers == 0 || self.geo_hidden == 0 {
            return Err(Error::Config(
                "bumps, conv layers and geo width must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Current value, its lags and the wet-day indicator.
    pub fn dynamic_channels(&self) -> usize {
        self.lags + 2
    }

    pub fn in_channels(&self) -> usize {
        self.dynamic_channels() + STATIC_CHANNELS
    }

    /// Nodes per patch: the target plus its neighbour slots.
    pub fn patch_nodes(&self) -> usize {
        self.neighbors + 1
    }

    pub fn theta_len(&self) -> usize {
        raw_len(self.bumps)
    }

    /// Receptive-field radius of the temporal encoder in days.
    pub fn halo(&self) -> usize {
        self.conv_layers * (self.kernel - 1) / 2
    }
}

/// A named dense array of parameters or statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of the network's trainable arrays.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    pub arrays: Vec<NamedArray>,
}

impl ParamSet {
    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NamedArray> {
        self.arrays.iter_mut().find(|a| a.name == name)
    }

    pub fn count(&self) -> usize {
        self.arrays.iter().map(|a| a.data.len()).sum()
    }

    fn push(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        self.arrays.push(NamedArray {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
    }
}

/// Per-cell and global normalisation statistics, computed on the training
/// window of the model input field only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub window: (usize, usize),
    /// mean of `log1p(x)` per cell
    pub precip_mean: Vec<f64>,
    /// standard deviation of `log1p(x)` per cell, floored
    pub precip_std: Vec<f64>,
    pub elevation: (f64, f64),
    pub slope: (f64, f64),
    /// Length scale dividing displacement and distance pair features.
    pub geo_scale_km: f64,
    /// 0.999 quantile of the input precipitation over the window.
    pub precip_q999: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 1.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt().max(STD_FLOOR))
}

impl NormalizationStats {
    pub fn compute(
        field: &GridField,
        attrs: &AttributeField,
        graph: &NeighborGraph,
        window: (usize, usize),
    ) -> Result<Self> {
        if !attrs.matches(field) {
            return Err(Error::Invariant(
                "attribute grid does not match the field".into(),
            ));
        }
        if graph.ncells() != field.ncells() {
            return Err(Error::Shape(
                "neighbour graph does not match the field".into(),
            ));
        }
        let (s, e) = window;
        if s >= e || e > field.ntime() {
            return Err(Error::Config(format!(
                "normalisation window {s}..{e} invalid"
            )));
        }
        let mut means = Vec::with_capacity(field.ncells());
        let mut stds = Vec::with_capacity(field.ncells());
        let mut pooled = Vec::new();
        for c in 0..field.ncells() {
            let v: Vec<f64> = field
                .cell_window(c, s, e)
                .into_iter()
                .filter(|x| !x.is_nan())
                .collect();
            pooled.extend_from_slice(&v);
            let logs: Vec<f64> = v.iter().map(|x| x.ln_1p()).collect();
            let (m, sd) = mean_std(&logs);
            means.push(m);
            stds.push(sd);
        }
        pooled.sort_by(f64::total_cmp);
        let precip_q999 = if pooled.is_empty() {
            0.0
        } else {
            crate::losses::sorted_quantile(&pooled, 0.999)
        };
        let dists: Vec<f64> = graph
            .lists
            .iter()
            .flatten()
            .map(|n| n.geo.distance_km)
            .collect();
        let geo_scale_km = if dists.is_empty() {
            100.0
        } else {
            (dists.iter().sum::<f64>() / dists.len() as f64).max(1e-3)
        };
        Ok(NormalizationStats {
            window,
            precip_mean: means,
            precip_std: stds,
            elevation: mean_std(&attrs.elevation),
            slope: mean_std(&attrs.slope),
            geo_scale_km,
            precip_q999,
        })
    }
}

/// One patch ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct InputPatch {
    /// Grid cell of each node; `None` for empty neighbour slots. Node 0 is
    /// the target.
    pub cells: Vec<Option<usize>>,
    pub start: usize,
    pub len: usize,
    /// `[nodes, channels, len]`
    pub channels: Vec<f64>,
    /// `[nodes, nodes, PAIR_FEATURES]`
    pub pairs: Vec<f64>,
    /// Raw model precipitation `[len, nodes]`, NaN where missing or empty.
    pub raw: Vec<f64>,
}

impl InputPatch {
    pub fn nodes(&self) -> usize {
        self.cells.len()
    }

    pub fn key_mask(&self) -> Vec<bool> {
        self.cells.iter().map(Option::is_some).collect()
    }
}

/// Precomputed normalised channels for every cell of an input field.
pub struct InputBuilder {
    config: EncoderConfig,
    ntime: usize,
    coords: Vec<(f64, f64)>,
    /// per cell: `[dynamic_channels][ntime]`
    dynamic: Vec<Vec<f64>>,
    statics: Vec<[f64; STATIC_CHANNELS]>,
    raw: Vec<Vec<f64>>,
    graph: NeighborGraph,
    geo_scale_km: f64,
}

/// Normalise the model field and attributes into per-cell channels.
///
/// Precipitation channels are `log1p` then z-scored per cell; lags before the
/// first day repeat the first observed value; the wet-day indicator stays in
/// `{0, 1}`; elevation and slope are z-scored globally, aspect enters as its
/// sine and cosine and landcover one-hot.
pub fn build_inputs(
    field: &GridField,
    attrs: &AttributeField,
    graph: &NeighborGraph,
    norm: &NormalizationStats,
    config: &EncoderConfig,
) -> Result<InputBuilder> {
    if !attrs.matches(field) {
        return Err(Error::Invariant(
            "attribute grid does not match the field".into(),
        ));
    }
    let n = field.ncells();
    if graph.ncells() != n || norm.precip_mean.len() != n {
        return Err(Error::Shape(
            "graph or normalisation statistics do not match the field".into(),
        ));
    }
    let lags = config.lags;
    let t = field.ntime();
    let mut dynamic = Vec::with_capacity(n);
    let mut raw = Vec::with_capacity(n);
    for c in 0..n {
        let series = field.cell_series(c);
        let (m, sd) = (norm.precip_mean[c], norm.precip_std[c]);
        let z = |x: f64| {
            if x.is_nan() {
                0.0
            } else {
                (x.ln_1p() - m) / sd
            }
        };
        let first = series.iter().copied().find(|x| !x.is_nan()).unwrap_or(0.0);
        let mut ch = vec![0.0; (lags + 2) * t];
        for d in 0..t {
            ch[d] = z(series[d]);
            for l in 1..=lags {
                let v = if d >= l { series[d - l] } else { first };
                ch[l * t + d] = z(v);
            }
            let x = series[d];
            ch[(lags + 1) * t + d] = if !x.is_nan() && x >= WET_DAY_MM {
                1.0
            } else {
                0.0
            };
        }
        dynamic.push(ch);
        raw.push(series);
    }
    let statics = (0..n)
        .map(|c| {
            let mut s = [0.0; STATIC_CHANNELS];
            s[0] = (attrs.elevation[c] - norm.elevation.0) / norm.elevation.1;
            s[1] = (attrs.slope[c] - norm.slope.0) / norm.slope.1;
            let a = attrs.aspect[c].to_radians();
            s[2] = a.sin();
            s[3] = a.cos();
            s[4 + attrs.landcover[c] as usize] = 1.0;
            s
        })
        .collect();
    Ok(InputBuilder {
        config: config.clone(),
        ntime: t,
        coords: (0..n).map(|c| field.cell_coord(c)).collect(),
        dynamic,
        statics,
        raw,
        graph: graph.clone(),
        geo_scale_km: norm.geo_scale_km,
    })
}

impl InputBuilder {
    pub fn ntime(&self) -> usize {
        self.ntime
    }

    pub fn ncells(&self) -> usize {
        self.coords.len()
    }

    /// Node cells of the patch around `target` and their pair features
    /// `[nodes, nodes, PAIR_FEATURES]`.
    pub fn layout(&self, target: usize) -> Result<(Vec<Option<usize>>, Vec<f64>)> {
        if target >= self.ncells() {
            return Err(Error::Config(format!("cell {target} out of range")));
        }
        let nodes = self.config.patch_nodes();
        let mut cells = vec![None; nodes];
        cells[0] = Some(target);
        for (s, nb) in self.graph.lists[target].iter().take(nodes - 1).enumerate() {
            cells[s + 1] = Some(nb.cell);
        }
        let mut pairs = vec![0.0; nodes * nodes * PAIR_FEATURES];
        for (a, ca) in cells.iter().enumerate() {
            for (b, cb) in cells.iter().enumerate() {
                let (Some(ca), Some(cb)) = (ca, cb) else {
                    continue;
                };
                let g = geodesic_features(self.coords[*ca], self.coords[*cb]);
                let o = (a * nodes + b) * PAIR_FEATURES;
                let br = g.bearing_deg.to_radians();
                let same = ca == cb;
                pairs[o] = g.d_north_km / self.geo_scale_km;
                pairs[o + 1] = g.d_east_km / self.geo_scale_km;
                pairs[o + 2] = g.distance_km / self.geo_scale_km;
                pairs[o + 3] = if same { 0.0 } else { br.sin() };
                pairs[o + 4] = if same { 0.0 } else { br.cos() };
            }
        }
        Ok((cells, pairs))
    }

    /// Patch for `target` covering days `[start, start + len)`.
    pub fn patch(&self, target: usize, start: usize, len: usize) -> Result<InputPatch> {
        if target >= self.ncells() || start + len > self.ntime || len == 0 {
            return Err(Error::Config(format!(
                "patch for cell {target} days {start}..{} out of range",
                start + len
            )));
        }
        let (cells, pairs) = self.layout(target)?;
        let nodes = cells.len();
        let cin = self.config.in_channels();
        let dyn_ch = self.config.dynamic_channels();
        let mut channels = vec![0.0; nodes * cin * len];
        let mut raw = vec![f64::NAN; len * nodes];
        for (ni, cell) in cells.iter().enumerate() {
            let Some(c) = *cell else { continue };
            let base = ni * cin * len;
            for ch in 0..dyn_ch {
                let src = &self.dynamic[c][ch * self.ntime + start..ch * self.ntime + start + len];
                channels[base + ch * len..base + (ch + 1) * len].copy_from_slice(src);
            }
            for (k, &v) in self.statics[c].iter().enumerate() {
                let o = base + (dyn_ch + k) * len;
                channels[o..o + len].iter_mut().for_each(|x| *x = v);
            }
            for d in 0..len {
                raw[d * nodes + ni] = self.raw[c][start + d];
            }
        }
        Ok(InputPatch {
            cells,
            start,
            len,
            channels,
            pairs,
            raw,
        })
    }
}

/// The parameter network and its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasNet {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

/// Network weights bound as leaves on one tape.
pub struct NetVars<'t> {
    pub all: Vec<Tensor<'t>>,
    proj: (Tensor<'t>, Tensor<'t>),
    convs: Vec<(Tensor<'t>, Tensor<'t>)>,
    qkv: (Tensor<'t>, Tensor<'t>),
    out: (Tensor<'t>, Tensor<'t>),
    geo: Vec<[Tensor<'t>; 4]>,
    head: (Tensor<'t>, Tensor<'t>),
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Head bias giving a near-identity transform: `alpha ~ 1`, `w ~ 0.05`,
/// `s ~ 1`, knots spread over `[0, precip_max]`, `c = 0`.
pub fn near_identity_bias(bumps: usize, precip_max: f64) -> Vec<f64> {
    let mut b = Vec::with_capacity(raw_len(bumps));
    b.push(softplus_inv(1.0));
    b.extend(std::iter::repeat_n(softplus_inv(0.05), bumps));
    b.extend(std::iter::repeat_n(softplus_inv(1.0), bumps));
    let hi = precip_max.max(0.0);
    for z in 0..bumps {
        let frac = if bumps > 1 {
            z as f64 / (bumps - 1) as f64
        } else {
            0.0
        };
        b.push(hi * frac);
    }
    b.push(0.0);
    b
}

impl BiasNet {
    /// Xavier-uniform weights, zero biases, near-identity head bias.
    pub fn init(config: &EncoderConfig, precip_max: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::default();
        let (h, d, k, cin) = (
            config.hidden,
            config.model_dim,
            config.kernel,
            config.in_channels(),
        );
        p.push("proj.w", &[h, cin, 1], xavier(&mut rng, cin, h, h * cin));
        p.push("proj.b", &[h], vec![0.0; h]);
        for l in 0..config.conv_layers {
            p.push(
                &format!("conv{l}.w"),
                &[h, h, k],
                xavier(&mut rng, h * k, h * k, h * h * k),
            );
            p.push(&format!("conv{l}.b"), &[h], vec![0.0; h]);
        }
        p.push(
            "attn.qkv.w",
            &[d, 3 * d],
            xavier(&mut rng, d, 3 * d, 3 * d * d),
        );
        p.push("attn.qkv.b", &[3 * d], vec![0.0; 3 * d]);
        p.push("attn.out.w", &[d, d], xavier(&mut rng, d, d, d * d));
        p.push("attn.out.b", &[d], vec![0.0; d]);
        let g = config.geo_hidden;
        for hd in 0..config.heads {
            p.push(
                &format!("geo{hd}.w1"),
                &[PAIR_FEATURES, g],
                xavier(&mut rng, PAIR_FEATURES, g, PAIR_FEATURES * g),
            );
            p.push(&format!("geo{hd}.b1"), &[g], vec![0.0; g]);
            p.push(&format!("geo{hd}.w2"), &[g, 1], xavier(&mut rng, g, 1, g));
            p.push(&format!("geo{hd}.b2"), &[1], vec![0.0]);
        }
        let tl = config.theta_len();
        let hw = xavier(&mut rng, d, tl, d * tl)
            .into_iter()
            .map(|v| v * config.head_init_scale)
            .collect();
        p.push("head.w", &[d, tl], hw);
        p.push(
            "head.b",
            &[tl],
            near_identity_bias(config.bumps, precip_max),
        );
        Ok(BiasNet {
            config: config.clone(),
            params: p,
        })
    }

    /// Bind every parameter array as a leaf (or constant) on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<NetVars<'t>> {
        let all = self
            .params
            .arrays
            .iter()
            .map(|a| {
                if trainable {
                    tape.leaf(a.data.clone(), &a.shape)
                } else {
                    tape.constant(a.data.clone(), &a.shape)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let find = |name: &str| -> Result<Tensor<'t>> {
            self.params
                .arrays
                .iter()
                .position(|a| a.name == name)
                .map(|i| all[i])
                .ok_or_else(|| Error::Format(format!("missing parameter array {name}")))
        };
        let pair =
            |a: &str, b: &str| -> Result<(Tensor<'t>, Tensor<'t>)> { Ok((find(a)?, find(b)?)) };
        let convs = (0..self.config.conv_layers)
            .map(|l| pair(&format!("conv{l}.w"), &format!("conv{l}.b")))
            .collect::<Result<Vec<_>>>()?;
        let geo = (0..self.config.heads)
            .map(|h| {
                Ok([
                    find(&format!("geo{h}.w1"))?,
                    find(&format!("geo{h}.b1"))?,
                    find(&format!("geo{h}.w2"))?,
                    find(&format!("geo{h}.b2"))?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NetVars {
            proj: pair("proj.w", "proj.b")?,
            convs,
            qkv: pair("attn.qkv.w", "attn.qkv.b")?,
            out: pair("attn.out.w", "attn.out.b")?,
            geo,
            head: pair("head.w", "head.b")?,
            all,
        })
    }
}

fn add_row_bias<'t>(x: &Tensor<'t>, bias: &Tensor<'t>) -> Result<Tensor<'t>> {
    let rows = x.shape()[0];
    x.add(&bias.expand_dim(0, rows)?)
}

/// Per-node temporal encoding: `[nodes, channels, T] -> [nodes, hidden, T]`.
/// A pointwise input projection is followed by the convolution layers, each
/// with a softplus activation. Nodes never mix.
pub fn temporal_encode<'t>(vars: &NetVars<'t>, x: &Tensor<'t>) -> Result<Tensor<'t>> {
    let mut h = x.conv1d(&vars.proj.0, Some(&vars.proj.1))?;
    for (w, b) in &vars.convs {
        h = h.conv1d(w, Some(b))?.softplus()?;
    }
    Ok(h)
}

/// Output of [`spatial_attend`].
pub struct Attended<'t> {
    /// `[T, nodes, model_dim]`
    pub embeddings: Tensor<'t>,
    /// `[heads * T, nodes, nodes]`, head-major. `None` when every key was
    /// masked and the input passed through unchanged.
    pub weights: Option<Tensor<'t>>,
}

/// Per-head `[nodes, nodes]` logit offsets from pairwise geodesic features.
fn geo_offsets<'t>(
    vars: &NetVars<'t>,
    tape: &'t Tape,
    pairs: &[f64],
    n: usize,
) -> Result<Vec<Tensor<'t>>> {
    let pf = tape.constant(pairs.to_vec(), &[n * n, PAIR_FEATURES])?;
    vars.geo
        .iter()
        .map(|[w1, b1, w2, b2]| {
            let hid = add_row_bias(&pf.matmul(w1)?, b1)?.softplus()?;
            add_row_bias(&hid.matmul(w2)?, b2)?.reshape(&[n, n])
        })
        .collect()
}

/// Multi-head self-attention over the nodes of a patch, independently per
/// day, with a learned per-head offset on the logits computed from pairwise
/// geodesic features. Masked nodes are excluded as keys; a residual
/// connection wraps the block.
pub fn spatial_attend<'t>(
    vars: &NetVars<'t>,
    config: &EncoderConfig,
    h: &Tensor<'t>,
    pairs: &[f64],
    key_mask: &[bool],
) -> Result<Attended<'t>> {
    let shape = h.shape();
    if shape.len() != 3 || shape[1] != config.model_dim {
        return Err(Error::Shape(format!("attention input {shape:?}")));
    }
    let (n, d, t) = (shape[0], shape[1], shape[2]);
    if key_mask.len() != n || pairs.len() != n * n * PAIR_FEATURES {
        return Err(Error::Shape(
            "attention mask or pair features misaligned".into(),
        ));
    }
    let tape = h.tape();
    let hp = h.permute(&[2, 0, 1])?;
    if !key_mask.iter().any(|&m| m) {
        return Ok(Attended {
            embeddings: hp,
            weights: None,
        });
    }
    let heads = config.heads;
    let dh = d / heads;
    let flat = hp.reshape(&[t * n, d])?;
    let qkv = add_row_bias(&flat.matmul(&vars.qkv.0)?, &vars.qkv.1)?
        .reshape(&[t, n, 3, heads, dh])?
        .permute(&[2, 3, 0, 1, 4])?
        .reshape(&[3 * heads * t, n, dh])?;
    let ht = heads * t;
    let q = qkv.slice(0, 0, ht)?;
    let k = qkv.slice(0, ht, ht)?;
    let v = qkv.slice(0, 2 * ht, ht)?;
    let scores = q
        .matmul_t(&k, false, true)?
        .mul_scalar(1.0 / (dh as f64).sqrt())?;

    let offsets = geo_offsets(vars, tape, pairs, n)?
        .iter()
        .map(|o| o.expand_dim(0, t))
        .collect::<Result<Vec<_>>>()?;
    let offset = Tensor::concat(&offsets, 0)?;

    let mut mask = vec![0.0; ht * n * n];
    for row in mask.chunks_mut(n) {
        for (j, m) in key_mask.iter().enumerate() {
            if !m {
                row[j] = f64::NEG_INFINITY;
            }
        }
    }
    let logits = scores
        .add(&offset)?
        .add(&tape.constant(mask, &[ht, n, n])?)?;
    let weights = logits.softmax()?;
    let ctx = weights
        .matmul(&v)?
        .reshape(&[heads, t, n, dh])?
        .permute(&[1, 2, 0, 3])?
        .reshape(&[t * n, d])?;
    let out = add_row_bias(&ctx.matmul(&vars.out.0)?, &vars.out.1)?;
    let embeddings = flat.add(&out)?.reshape(&[t, n, d])?;
    Ok(Attended {
        embeddings,
        weights: Some(weights),
    })
}

/// Linear head: `[T, nodes, model_dim] -> [T * nodes, 3Z + 2]` raw parameters
/// (row `t * nodes + node`).
pub fn predict_theta<'t>(vars: &NetVars<'t>, z: &Tensor<'t>) -> Result<Tensor<'t>> {
    let s = z.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("head input {s:?}")));
    }
    let flat = z.reshape(&[s[0] * s[1], s[2]])?;
    add_row_bias(&flat.matmul(&vars.head.0)?, &vars.head.1)
}

/// Embed a patch and emit raw parameters for every node:
/// `[nodes, channels, T] -> [T * nodes, 3Z + 2]`.
pub fn patch_theta<'t>(
    vars: &NetVars<'t>,
    config: &EncoderConfig,
    x: &Tensor<'t>,
    pairs: &[f64],
    key_mask: &[bool],
) -> Result<Tensor<'t>> {
    let h = temporal_encode(vars, x)?;
    let att = spatial_attend(vars, config, &h, pairs, key_mask)?;
    predict_theta(vars, &att.embeddings)
}

/// Raw parameters of node 0 only, from already encoded node states
/// `[nodes, hidden, T]`. Returns `[T, 3Z + 2]`.
pub fn target_theta<'t>(
    vars: &NetVars<'t>,
    config: &EncoderConfig,
    h: &Tensor<'t>,
    pairs: &[f64],
    key_mask: &[bool],
) -> Result<Tensor<'t>> {
    let att = spatial_attend(vars, config, h, pairs, key_mask)?;
    predict_theta(vars, &att.embeddings.slice(1, 0, 1)?)
}

/// Node states and their attention projections for a set of cells, used to
/// evaluate target rows without recomputing shared work.
pub struct Projected {
    pub len: usize,
    /// `[cells, T, model_dim]`
    pub states: Vec<f64>,
    /// `[cells, T, 3 * model_dim]`, query / key / value blocks.
    pub qkv: Vec<f64>,
}

/// Project encoded states `[cells, hidden, T]` once for [`target_theta_projected`].
pub fn project_nodes(vars: &NetVars<'_>, h: &Tensor<'_>) -> Result<Projected> {
    let s = h.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("projection input {s:?}")));
    }
    let (n, d, t) = (s[0], s[1], s[2]);
    let flat = h.permute(&[0, 2, 1])?.reshape(&[n * t, d])?;
    let qkv = add_row_bias(&flat.matmul(&vars.qkv.0)?, &vars.qkv.1)?;
    Ok(Projected {
        len: t,
        states: flat.to_vec(),
        qkv: qkv.to_vec(),
    })
}

/// Same result as [`target_theta`] but attends with the target query only,
/// reading node states from `proj`. `cells[j]` names the cell at patch slot
/// `j`; empty slots are masked out.
pub fn target_theta_projected<'t>(
    vars: &NetVars<'t>,
    config: &EncoderConfig,
    proj: &Projected,
    target: usize,
    cells: &[Option<usize>],
    pairs: &[f64],
) -> Result<Tensor<'t>> {
    let (t, d, n) = (proj.len, config.model_dim, cells.len());
    let (heads, dh) = (config.heads, config.model_dim / config.heads);
    if pairs.len() != n * n * PAIR_FEATURES || !proj.states.len().is_multiple_of(t * d) {
        return Err(Error::Shape("projected attention inputs misaligned".into()));
    }
    let tape = vars.head.0.tape();
    let h0 = tape.constant(
        proj.states[target * t * d..(target + 1) * t * d].to_vec(),
        &[t, d],
    )?;
    if cells.iter().all(Option::is_none) {
        return add_row_bias(&h0.matmul(&vars.head.0)?, &vars.head.1);
    }
    let row = |cell: usize, tt: usize, part: usize, hd: usize| {
        let o = (cell * t + tt) * 3 * d + part * d + hd * dh;
        &proj.qkv[o..o + dh]
    };
    let ht = heads * t;
    let mut q = Vec::with_capacity(ht * dh);
    let (mut k, mut v) = (
        Vec::with_capacity(ht * n * dh),
        Vec::with_capacity(ht * n * dh),
    );
    for hd in 0..heads {
        for tt in 0..t {
            q.extend_from_slice(row(target, tt, 0, hd));
            for c in cells {
                let c = c.unwrap_or(target);
                k.extend_from_slice(row(c, tt, 1, hd));
                v.extend_from_slice(row(c, tt, 2, hd));
            }
        }
    }
    let q = tape.constant(q, &[ht, 1, dh])?;
    let k = tape.constant(k, &[ht, n, dh])?;
    let v = tape.constant(v, &[ht, n, dh])?;
    let scores = q
        .matmul_t(&k, false, true)?
        .mul_scalar(1.0 / (dh as f64).sqrt())?;
    let offsets = geo_offsets(vars, tape, pairs, n)?
        .iter()
        .map(|o| o.slice(0, 0, 1)?.expand_dim(0, t))
        .collect::<Result<Vec<_>>>()?;
    let mut mask = vec![0.0; ht * n];
    for r in mask.chunks_mut(n) {
        for (m, c) in r.iter_mut().zip(cells) {
            if c.is_none() {
                *m = f64::NEG_INFINITY;
            }
        }
    }
    let weights = scores
        .add(&Tensor::concat(&offsets, 0)?)?
        .add(&tape.constant(mask, &[ht, 1, n])?)?
        .softmax()?;
    let ctx = weights
        .matmul(&v)?
        .reshape(&[heads, t, dh])?
        .permute(&[1, 0, 2])?
        .reshape(&[t, d])?;
    let out = h0.add(&add_row_bias(&ctx.matmul(&vars.out.0)?, &vars.out.1)?)?;
    add_row_bias(&out.matmul(&vars.head.0)?, &vars.head.1)
}

fn fill_missing(raw: &[f64]) -> Vec<f64> {
    raw.iter()
        .map(|v| if v.is_nan() { 0.0 } else { *v })
        .collect()
}

/// Full forward pass for one patch: corrected precipitation `[T, nodes]`
/// (unclamped), with missing or empty entries fed as zero.
pub fn forward_patch<'t>(
    net: &BiasNet,
    vars: &NetVars<'t>,
    tape: &'t Tape,
    patch: &InputPatch,
) -> Result<Tensor<'t>> {
    let cfg = &net.config;
    let n = patch.nodes();
    let len = patch.len;
    let x = tape.constant(patch.channels.clone(), &[n, cfg.in_channels(), len])?;
    let raw_theta = patch_theta(vars, cfg, &x, &patch.pairs, &patch.key_mask())?;
    let theta = transform::constrain_t(&raw_theta)?;
    let xt = tape.constant(fill_missing(&patch.raw), &[len * n])?;
    transform::apply_t(&theta, &xt)?.reshape(&[len, n])
}

impl InputBuilder {
    /// Normalised channels of every cell over `[start, start + len)`,
    /// shaped `[cells, channels, len]`.
    pub fn all_cells(&self, start: usize, len: usize) -> Result<Vec<f64>> {
        if start + len > self.ntime || len == 0 {
            return Err(Error::Config("time range out of bounds".into()));
        }
        let cin = self.config.in_channels();
        let dyn_ch = self.config.dynamic_channels();
        let mut out = vec![0.0; self.ncells() * cin * len];
        for (c, block) in out.chunks_mut(cin * len).enumerate() {
            for ch in 0..dyn_ch {
                let o = ch * self.ntime + start;
                block[ch * len..(ch + 1) * len].copy_from_slice(&self.dynamic[c][o..o + len]);
            }
            for (k, &v) in self.statics[c].iter().enumerate() {
                let o = (dyn_ch + k) * len;
                block[o..o + len].iter_mut().for_each(|x| *x = v);
            }
        }
        Ok(out)
    }

    /// Raw model precipitation of one cell.
    pub fn raw_series(&self, cell: usize) -> &[f64] {
        &self.raw[cell]
    }
}
