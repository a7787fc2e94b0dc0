//! Adam training of the parameter network, checkpoints, inference and the
//! validation-based hyperparameter selection.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::encoders::{
    build_inputs, forward_patch, project_nodes, target_theta_projected, temporal_encode, BiasNet,
    EncoderConfig, InputBuilder, NamedArray, NormalizationStats, ParamSet,
};
use crate::error::{Error, Result};
use crate::gridio::{AttributeField, GridField, NeighborGraph};
use crate::losses::{
    composite_loss, quantile_loss_t, rainy_day_loss_t, spatial_corr_loss_t, LossReport, LossWeights,
};
use crate::metrics;
use crate::par::Exec;
use crate::transform;

pub const CKPT_MAGIC: &[u8; 4] = b"DCKP";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter array.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(Error::Shape(
            "adam parameter, gradient and state lengths differ".into(),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over every array of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub lr: f64,
    pub states: Vec<AdamState>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, config: AdamConfig) -> Self {
        Adam {
            config,
            lr,
            states: params
                .arrays
                .iter()
                .map(|a| AdamState::new(a.data.len()))
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.arrays.len() {
            return Err(Error::Shape(
                "one gradient per parameter array expected".into(),
            ));
        }
        for ((a, g), s) in params.arrays.iter_mut().zip(grads).zip(&mut self.states) {
            adam_step(&mut a.data, g, s, self.lr, &self.config)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Target cells per step.
    pub batch: usize,
    pub seqlen: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Day range `[start, end)` used for fitting.
    pub train_window: (usize, usize),
    pub val_window: Option<(usize, usize)>,
    /// Restrict targets and neighbour candidates to these cells.
    pub train_cells: Option<Vec<usize>>,
    /// Optimiser steps per epoch; by default one pass over the target cells.
    pub steps_per_epoch: Option<usize>,
    /// Moving-average window of the screening rule.
    pub smoothing: usize,
    pub loss: LossWeights,
    pub adam: AdamConfig,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch: 5,
            seqlen: 365,
            epochs: 100,
            seed: 0,
            train_window: (0, 365),
            val_window: None,
            train_cells: None,
            steps_per_epoch: None,
            smoothing: 5,
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

fn overlaps(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 < b.1 && b.0 < a.1
}

impl TrainConfig {
    pub fn validate(&self, ntime: usize, ncells: usize) -> Result<()> {
        self.loss.validate()?;
        self.encoder.validate()?;
        if self.batch == 0 || self.seqlen == 0 || self.smoothing == 0 {
            return Err(Error::Config(
                "batch, seqlen and smoothing must be at least 1".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        let (s, e) = self.train_window;
        if s >= e || e > ntime {
            return Err(Error::Config(format!(
                "train window {s}..{e} outside 0..{ntime}"
            )));
        }
        if e - s < self.seqlen {
            return Err(Error::Config(format!(
                "train window of {} days is shorter than seqlen {}",
                e - s,
                self.seqlen
            )));
        }
        if let Some(v) = self.val_window {
            if v.0 >= v.1 || v.1 > ntime {
                return Err(Error::Config(format!(
                    "validation window {}..{} invalid",
                    v.0, v.1
                )));
            }
            if overlaps(v, self.train_window) {
                return Err(Error::Config("train and validation windows overlap".into()));
            }
        }
        if let Some(cells) = &self.train_cells {
            if cells.is_empty() || cells.iter().any(|&c| c >= ncells) {
                return Err(Error::Config(
                    "training cell list empty or out of range".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn candidate_mask(&self, ncells: usize) -> Option<Vec<bool>> {
        self.train_cells.as_ref().map(|cells| {
            let mut m = vec![false; ncells];
            cells.iter().for_each(|&c| m[c] = true);
            m
        })
    }
}

/// Mean loss components of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub q: f64,
    pub r: f64,
    pub s: f64,
    pub l: f64,
}

/// Everything needed to correct a field without the training data.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: BiasNet,
    pub train: TrainConfig,
    pub norm: NormalizationStats,
    pub attrs: AttributeField,
    pub graph: NeighborGraph,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    encoder: EncoderConfig,
    train: TrainConfig,
    norm: NormalizationStats,
    attrs: AttributeField,
    graph: NeighborGraph,
    epoch: usize,
    history: Vec<EpochRecord>,
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Length(format!("checkpoint truncated at byte {pos}")))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn take_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, pos, 4)?.try_into().unwrap()))
}

fn take_u64(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    Ok(u64::from_le_bytes(take(bytes, pos, 8)?.try_into().unwrap()))
}

impl Checkpoint {
    /// DCKP layout (little-endian): magic, version u32, metadata length u64,
    /// metadata JSON, array count u32, then per array: name length u32,
    /// name, rank u32, rank x u64 dims, f64 data.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = CheckpointMeta {
            encoder: self.net.config.clone(),
            train: self.train.clone(),
            norm: self.norm.clone(),
            attrs: self.attrs.clone(),
            graph: self.graph.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.net.params.arrays.len() as u32).to_le_bytes());
        for a in &self.net.params.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        if take(bytes, &mut pos, 4)? != CKPT_MAGIC {
            return Err(Error::Format("not a DCKP checkpoint".into()));
        }
        let version = take_u32(bytes, &mut pos)?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let jlen = take_u64(bytes, &mut pos)? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(take(bytes, &mut pos, jlen)?)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let count = take_u32(bytes, &mut pos)?;
        let mut arrays = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let nlen = take_u32(bytes, &mut pos)? as usize;
            let name = String::from_utf8(take(bytes, &mut pos, nlen)?.to_vec())
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let rank = take_u32(bytes, &mut pos)?;
            let shape = (0..rank)
                .map(|_| take_u64(bytes, &mut pos).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = take(bytes, &mut pos, n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push(NamedArray { name, shape, data });
        }
        if pos != bytes.len() {
            return Err(Error::Length(
                "trailing bytes after checkpoint arrays".into(),
            ));
        }
        meta.encoder.validate()?;
        let ckpt = Checkpoint {
            net: BiasNet {
                config: meta.encoder,
                params: ParamSet { arrays },
            },
            train: meta.train,
            norm: meta.norm,
            attrs: meta.attrs,
            graph: meta.graph,
            epoch: meta.epoch,
            history: meta.history,
        };
        // bind once to confirm every expected array is present
        ckpt.net.bind(&Tape::new(), false)?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn quantile_history(&self) -> Vec<f64> {
        self.history.iter().map(|h| h.q).collect()
    }
}

/// `epoch,Q,R,S,L` rows with a header line.
pub fn loss_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,Q,R,S,L\n");
    for h in history {
        s.push_str(&format!("{},{},{},{},{}\n", h.epoch, h.q, h.r, h.s, h.l));
    }
    s
}

pub fn write_loss_csv(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(loss_csv(history).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Trailing moving average over `window` values; empty when the series is
/// shorter than the window.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || xs.len() < window {
        return Vec::new();
    }
    xs.windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

/// Screening rule: the smoothed series never increases.
pub fn smoothed_monotone(xs: &[f64], window: usize) -> bool {
    let ma = moving_average(xs, window.min(xs.len().max(1)));
    ma.iter().all(|v| v.is_finite()) && ma.windows(2).all(|w| w[1] <= w[0])
}

/// Training data aligned on one grid.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub reference: &'a GridField,
    pub gcm: &'a GridField,
    pub attrs: &'a AttributeField,
    pub graph: &'a NeighborGraph,
}

impl TrainData<'_> {
    fn check(&self) -> Result<()> {
        if !self.reference.same_grid(self.gcm) || self.reference.ntime() != self.gcm.ntime() {
            return Err(Error::Invariant(
                "reference and model fields are not aligned".into(),
            ));
        }
        if !self.attrs.matches(self.gcm) {
            return Err(Error::Invariant(
                "attributes do not match the model grid".into(),
            ));
        }
        if self.graph.ncells() != self.gcm.ncells() {
            return Err(Error::Shape(
                "neighbour graph does not match the grid".into(),
            ));
        }
        Ok(())
    }
}

/// Loss tape for one target: `(report, gradient per parameter array)`.
#[allow(clippy::too_many_arguments)]
fn target_step(
    net: &BiasNet,
    builder: &InputBuilder,
    reference: &[Vec<f64>],
    target: usize,
    start: usize,
    len: usize,
    w: &LossWeights,
    scale: f64,
) -> Result<(LossReport, Vec<Vec<f64>>)> {
    let tape = Tape::new();
    let vars = net.bind(&tape, true)?;
    let (report, loss) = patch_loss(net, &vars, &tape, builder, reference, target, start, len, w)?;
    let grads = tape.backward(loss.mul_scalar(scale)?)?;
    Ok((report, vars.all.iter().map(|t| grads.wrt(t)).collect()))
}

#[allow(clippy::too_many_arguments)]
fn patch_loss<'t>(
    net: &BiasNet,
    vars: &crate::encoders::NetVars<'t>,
    tape: &'t Tape,
    builder: &InputBuilder,
    reference: &[Vec<f64>],
    target: usize,
    start: usize,
    len: usize,
    w: &LossWeights,
) -> Result<(LossReport, crate::autodiff::Tensor<'t>)> {
    let patch = builder.patch(target, start, len)?;
    let x = forward_patch(net, vars, tape, &patch)?;
    let n = patch.nodes();
    let mut y = vec![0.0; len * n];
    let mut mask = vec![0.0; len * n];
    for (ni, cell) in patch.cells.iter().enumerate() {
        let Some(c) = *cell else { continue };
        for d in 0..len {
            let (yv, xv) = (reference[c][start + d], patch.raw[d * n + ni]);
            if !yv.is_nan() && !xv.is_nan() {
                y[d * n + ni] = yv;
                mask[d * n + ni] = 1.0;
            }
        }
    }
    let days: Vec<usize> = (0..len).filter(|&d| mask[d * n] > 0.0).collect();
    if days.is_empty() {
        return Err(Error::Numerical(format!(
            "target cell {target} has no valid days in {start}..{}",
            start + len
        )));
    }
    let xt = x.slice(1, 0, 1)?.reshape(&[len])?.index_select(&days)?;
    let yt: Vec<f64> = days.iter().map(|&d| y[d * n]).collect();
    let mut ys = yt.clone();
    ys.sort_by(f64::total_cmp);
    let q = quantile_loss_t(&xt, &ys, w)?;
    let r = rainy_day_loss_t(&xt, &yt, w)?;
    let s = spatial_corr_loss_t(&x, &y, &mask, w)?;
    let l = q
        .mul_scalar(w.p1)?
        .add(&r.mul_scalar(w.p2)?)?
        .add(&s.mul_scalar(w.p3)?)?;
    Ok((composite_loss(q.item(), r.item(), s.item(), w), l))
}

/// Composite loss and summed gradients of one batch of `(target, start)`
/// windows, evaluated on independent tapes.
pub fn batch_gradients(
    net: &BiasNet,
    builder: &InputBuilder,
    reference: &[Vec<f64>],
    batch: &[(usize, usize)],
    len: usize,
    w: &LossWeights,
    exec: Exec,
) -> Result<(LossReport, Vec<Vec<f64>>)> {
    let scale = 1.0 / batch.len() as f64;
    let parts = exec.map(batch, |&(t, s)| {
        target_step(net, builder, reference, t, s, len, w, scale)
    });
    let mut report = LossReport::default();
    let mut grads: Vec<Vec<f64>> = net
        .params
        .arrays
        .iter()
        .map(|a| vec![0.0; a.data.len()])
        .collect();
    for (part, &(t, s)) in parts.into_iter().zip(batch) {
        let (r, g) = part?;
        if !r.l.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss for target cell {t}, days {s}..{}",
                s + len
            )));
        }
        report.q += r.q * scale;
        report.r += r.r * scale;
        report.s += r.s * scale;
        report.l += r.l * scale;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
        }
    }
    Ok((report, grads))
}

/// Composite loss of one batch without gradients.
pub fn batch_loss(
    net: &BiasNet,
    builder: &InputBuilder,
    reference: &[Vec<f64>],
    batch: &[(usize, usize)],
    len: usize,
    w: &LossWeights,
    exec: Exec,
) -> Result<LossReport> {
    let scale = 1.0 / batch.len() as f64;
    let parts = exec.map(batch, |&(t, s)| {
        let tape = Tape::new();
        let vars = net.bind(&tape, false)?;
        patch_loss(net, &vars, &tape, builder, reference, t, s, len, w).map(|(r, _)| r)
    });
    let mut report = LossReport::default();
    for p in parts {
        let r = p?;
        report.q += r.q * scale;
        report.r += r.r * scale;
        report.s += r.s * scale;
        report.l += r.l * scale;
    }
    Ok(report)
}

/// Prepared state shared by training and evaluation helpers.
pub struct Prepared {
    pub norm: NormalizationStats,
    pub builder: InputBuilder,
    pub reference: Vec<Vec<f64>>,
    pub targets: Vec<usize>,
}

pub fn prepare(data: &TrainData<'_>, cfg: &TrainConfig) -> Result<Prepared> {
    data.check()?;
    cfg.validate(data.gcm.ntime(), data.gcm.ncells())?;
    let norm = NormalizationStats::compute(data.gcm, data.attrs, data.graph, cfg.train_window)?;
    let builder = build_inputs(data.gcm, data.attrs, data.graph, &norm, &cfg.encoder)?;
    let reference = (0..data.reference.ncells())
        .map(|c| data.reference.cell_series(c))
        .collect();
    let targets = cfg
        .train_cells
        .clone()
        .unwrap_or_else(|| (0..data.gcm.ncells()).collect());
    Ok(Prepared {
        norm,
        builder,
        reference,
        targets,
    })
}

/// Random batches of `(target, window start)` for one epoch.
pub fn epoch_batches(
    targets: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<(usize, usize)>> {
    let (ws, we) = cfg.train_window;
    let max_start = we - cfg.seqlen;
    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| targets.len().div_ceil(cfg.batch));
    let mut order: Vec<usize> = Vec::new();
    let mut batches = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut b = Vec::with_capacity(cfg.batch);
        while b.len() < cfg.batch.min(targets.len()) {
            if order.is_empty() {
                order = targets.to_vec();
                order.shuffle(rng);
            }
            let t = order.pop().unwrap();
            b.push((t, rng.random_range(ws..=max_start)));
        }
        batches.push(b);
    }
    batches
}

/// Fit the network. Fixed seed and config give an identical history
/// regardless of the execution strategy.
pub fn train(data: &TrainData<'_>, cfg: &TrainConfig) -> Result<Checkpoint> {
    train_with(data, cfg, Exec::auto())
}

pub fn train_with(data: &TrainData<'_>, cfg: &TrainConfig, exec: Exec) -> Result<Checkpoint> {
    let prep = prepare(data, cfg)?;
    let mut net = BiasNet::init(&cfg.encoder, prep.norm.precip_q999, cfg.seed)?;
    let mut adam = Adam::new(&net.params, cfg.lr, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(&prep.targets, cfg, &mut rng);
        let mut acc = LossReport::default();
        for b in &batches {
            let (r, g) = batch_gradients(
                &net,
                &prep.builder,
                &prep.reference,
                b,
                cfg.seqlen,
                &cfg.loss,
                exec,
            )?;
            adam.step(&mut net.params, &g)?;
            acc.q += r.q;
            acc.r += r.r;
            acc.s += r.s;
            acc.l += r.l;
        }
        let k = batches.len().max(1) as f64;
        let rec = EpochRecord {
            epoch,
            q: acc.q / k,
            r: acc.r / k,
            s: acc.s / k,
            l: acc.l / k,
        };
        log::info!(
            "epoch {epoch}: Q={:.5} R={:.4} S={:.5} L={:.5}",
            rec.q,
            rec.r,
            rec.s,
            rec.l
        );
        history.push(rec);
    }
    Ok(Checkpoint {
        net,
        train: cfg.clone(),
        norm: prep.norm,
        attrs: data.attrs.clone(),
        graph: data.graph.clone(),
        epoch: cfg.epochs,
        history,
    })
}

/// Apply a checkpoint to a model field on the checkpoint's grid. Output is
/// clamped at zero; missing input days stay missing.
pub fn correct_field(ckpt: &Checkpoint, gcm: &GridField) -> Result<GridField> {
    correct_field_with(ckpt, gcm, Exec::auto())
}

pub fn correct_field_with(ckpt: &Checkpoint, gcm: &GridField, exec: Exec) -> Result<GridField> {
    if !ckpt.attrs.matches(gcm) || ckpt.graph.ncells() != gcm.ncells() {
        return Err(Error::Invariant(
            "field grid differs from the checkpoint grid".into(),
        ));
    }
    let cfg = &ckpt.net.config;
    let builder = build_inputs(gcm, &ckpt.attrs, &ckpt.graph, &ckpt.norm, cfg)?;
    let ntime = gcm.ntime();
    let ncells = gcm.ncells();
    let chunk = ckpt.train.seqlen.max(1);
    let halo = cfg.halo();
    let mut out = vec![vec![f64::NAN; ntime]; ncells];
    let layouts = (0..ncells)
        .map(|c| builder.layout(c))
        .collect::<Result<Vec<_>>>()?;
    let cin = cfg.in_channels();
    let mut s = 0;
    while s < ntime {
        let e = (s + chunk).min(ntime);
        let a = s.saturating_sub(halo);
        let b = (e + halo).min(ntime);
        let len = b - a;
        let proj = {
            let tape = Tape::new();
            let vars = ckpt.net.bind(&tape, false)?;
            let x = tape.constant(builder.all_cells(a, len)?, &[ncells, cin, len])?;
            project_nodes(&vars, &temporal_encode(&vars, &x)?)?
        };
        let cols = exec.map_range(ncells, |c| -> Result<Vec<f64>> {
            let (cells, pairs) = &layouts[c];
            let tape = Tape::new();
            let vars = ckpt.net.bind(&tape, false)?;
            let raw = target_theta_projected(&vars, cfg, &proj, c, cells, pairs)?;
            let theta = transform::constrain_t(&raw)?;
            let series = &builder.raw_series(c)[a..b];
            let xin: Vec<f64> = series
                .iter()
                .map(|v| if v.is_nan() { 0.0 } else { *v })
                .collect();
            let y = transform::apply_t(&theta, &tape.constant(xin, &[len])?)?.to_vec();
            Ok((s..e)
                .map(|t| {
                    let v = y[t - a];
                    if series[t - a].is_nan() {
                        f64::NAN
                    } else {
                        transform::clamp_output(v)
                    }
                })
                .collect())
        });
        for (c, col) in cols.into_iter().enumerate() {
            let col = col?;
            if col.iter().any(|v| v.is_infinite()) {
                return Err(Error::Numerical(format!(
                    "non-finite corrected value at cell {c}"
                )));
            }
            out[c][s..e].copy_from_slice(&col);
        }
        s = e;
    }
    GridField::from_cell_series(
        gcm.start_date(),
        gcm.lats().to_vec(),
        gcm.lons().to_vec(),
        &out,
    )
}

/// Mean over indices of the spatial mean absolute percentage bias of the
/// corrected validation field.
pub fn validate_composite_score(
    ckpt: &Checkpoint,
    ref_val: &GridField,
    gcm_val: &GridField,
) -> Result<f64> {
    let corrected = correct_field(ckpt, gcm_val)?;
    metrics::composite_score(ref_val, &corrected)
}

/// Outcome of [`select_hyperparameters`].
#[derive(Clone, Debug)]
pub struct Selection {
    pub best: usize,
    pub checkpoint: Checkpoint,
    /// Validation score per candidate; `None` when screened out.
    pub scores: Vec<Option<f64>>,
    pub screened: Vec<bool>,
}

/// Pick the lowest-score candidate among those passing the screening rule,
/// ties to the earliest. A single candidate is always returned.
pub fn select_from(screened: &[bool], scores: &[f64]) -> Option<usize> {
    if scores.len() == 1 {
        return Some(0);
    }
    let mut best: Option<usize> = None;
    for (i, (&ok, &s)) in screened.iter().zip(scores).enumerate() {
        if ok && s.is_finite() && best.is_none_or(|b| s < scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Train every candidate, screen by the smoothed quantile loss and keep the
/// best validation composite score. Validation data are the candidates'
/// `val_window` slices of `data`.
pub fn select_hyperparameters(
    candidates: &[TrainConfig],
    data: &TrainData<'_>,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::Config("no hyperparameter candidates".into()));
    }
    let mut ckpts = Vec::with_capacity(candidates.len());
    let mut scores = Vec::with_capacity(candidates.len());
    let mut screened = Vec::with_capacity(candidates.len());
    for cfg in candidates {
        let (vs, ve) = cfg
            .val_window
            .ok_or_else(|| Error::Config("candidate lacks a validation window".into()))?;
        let ckpt = train(data, cfg)?;
        let ok = smoothed_monotone(&ckpt.quantile_history(), cfg.smoothing);
        let score = validate_composite_score(
            &ckpt,
            &data.reference.time_slice(vs, ve)?,
            &data.gcm.time_slice(vs, ve)?,
        )?;
        log::info!(
            "candidate {}: score {score:.4}, screening {}",
            ckpts.len(),
            ok
        );
        screened.push(ok);
        scores.push(score);
        ckpts.push(ckpt);
    }
    let best = select_from(&screened, &scores)
        .ok_or_else(|| Error::Numerical("every candidate failed the screening rule".into()))?;
    Ok(Selection {
        best,
        checkpoint: ckpts.swap_remove(best),
        scores: scores
            .iter()
            .zip(&screened)
            .map(|(&s, &ok)| ok.then_some(s))
            .collect(),
        screened,
    })
}
