//! Training with truncated back-propagation through time, evaluation,
//! inference and ablation runs.

mod optim;
mod preview;

pub use optim::{clip_global_norm, one_cycle_lr, AdamW, OptimizerConfig, ScheduleConfig};
pub use preview::{colorize, encode_ppm};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::depth::{compute_metrics, gradient_matching_loss, pfm, scale_invariant_loss, DepthCodec, DepthMap, MetricReport};
use crate::error::{Error, Result};
use crate::events::{normalize_embedding, rasterize, EventStream, Normalization};
use crate::model::checkpoint::Checkpoint;
use crate::model::grvit::{RecurrentState, TransferMode};
use crate::model::stf::SkipMode;
use crate::model::{Bound, ModelConfig, Network, ParamStore, TapeStates, LEVELS};
use crate::rng;
use crate::sim::{read_dataset, DatasetSpec, LabeledSequence};
use crate::tensor::{Graph, Tensor, Var};

/// Version string hashed into every manifest.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory of `seq_*` sequences; when absent the sequences are simulated
    /// from `dataset`.
    pub dir: Option<PathBuf>,
    pub normalization: Normalization,
    /// Random-scene recipe. With `dir` set only its size and bin length are
    /// used, as expectations on the loaded data.
    pub dataset: DatasetSpec,
    /// Every `validation_every`-th sequence (1-based) is held out.
    pub validation_every: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            normalization: Normalization::default(),
            dataset: DatasetSpec::default(),
            validation_every: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Bins per truncated back-propagation window.
    pub bptt: usize,
    /// Variance weight of the scale-invariant loss.
    pub lambda: f64,
    /// Weight of the optional gradient-matching term; 0 disables it.
    pub gradient_matching_weight: f64,
    pub gradient_matching_scales: usize,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub codec: DepthCodec,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 20,
            batch_size: 2,
            bptt: 8,
            lambda: 0.85,
            gradient_matching_weight: 0.0,
            gradient_matching_scales: 4,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            codec: DepthCodec::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Canonical text form; also stored in checkpoints.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.model.validate()?;
        self.schedule.validate()?;
        self.data.dataset.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.bptt == 0 {
            return bad("epochs, batch_size and bptt must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        let o = &self.optimizer;
        if !(o.max_lr > 0.0 && o.eps >= 0.0 && o.weight_decay >= 0.0 && o.clip_norm >= 0.0) {
            return bad("optimizer rates must be positive and eps, weight_decay, clip_norm non-negative");
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.gradient_matching_weight < 0.0 || self.gradient_matching_scales == 0 {
            return bad("gradient matching needs a non-negative weight and at least one scale");
        }
        if self.data.validation_every < 2 {
            return bad("validation_every must be at least 2");
        }
        let d = &self.data.dataset;
        if d.width as usize != self.model.width || d.height as usize != self.model.height {
            return bad("data.dataset size must match the model input size");
        }
        Ok(())
    }

    pub fn bin_us(&self) -> u64 {
        self.data.dataset.bin_us
    }
}

/// One sequence ready for the network: normalized event images and log depth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub inputs: Vec<Tensor<f32>>,
    pub gt_log: Vec<Tensor<f32>>,
    pub masks: Vec<Tensor<f32>>,
    pub depths: Vec<DepthMap>,
}

impl Sample {
    pub fn bins(&self) -> usize {
        self.inputs.len()
    }
}

/// Rasterized, normalized inputs of every bin of `stream`.
pub fn event_images(stream: &EventStream, bin_us: u64, norm: Normalization) -> Result<Vec<Tensor<f32>>> {
    let (w, h) = (stream.width as usize, stream.height as usize);
    Ok(stream
        .split_into_bins(bin_us)?
        .iter()
        .map(|b| normalize_embedding(&rasterize::<f32>(b, w, h), norm))
        .collect())
}

pub fn prepare(seq: &LabeledSequence, norm: Normalization) -> Result<Sample> {
    let inputs = event_images(&seq.stream, seq.bin_us, norm)?;
    if inputs.len() != seq.depths.len() {
        return Err(Error::Data(format!(
            "{} bins but {} depth maps",
            inputs.len(),
            seq.depths.len()
        )));
    }
    Ok(Sample {
        inputs,
        gt_log: seq.depths.iter().map(DepthMap::log_tensor).collect(),
        masks: seq.depths.iter().map(DepthMap::mask_tensor).collect(),
        depths: seq.depths.clone(),
    })
}

/// Simulates or loads the configured sequences.
pub fn load_sequences(cfg: &DataConfig) -> Result<Vec<LabeledSequence>> {
    let d = &cfg.dataset;
    let seqs = match &cfg.dir {
        Some(dir) => read_dataset(dir)?,
        None => d.scenes().iter().map(|s| s.emit_events()).collect::<Result<Vec<_>>>()?,
    };
    for (i, s) in seqs.iter().enumerate() {
        if s.stream.width != d.width || s.stream.height != d.height || s.bin_us != d.bin_us {
            return Err(Error::Data(format!(
                "sequence {i} is {}x{} with {} µs bins, config expects {}x{} with {} µs",
                s.stream.width, s.stream.height, s.bin_us, d.width, d.height, d.bin_us
            )));
        }
    }
    Ok(seqs)
}

/// Indices of training and validation sequences: every `every`-th is held out.
pub fn split_indices(n: usize, every: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|i| (i + 1) % every != 0)
}

fn log_depth<'g>(v: Var<'g, f32>, codec: &DepthCodec) -> Result<Var<'g, f32>> {
    v.scale(codec.alpha)?.add_scalar(codec.max_depth.ln() - codec.alpha)
}

/// Scale-invariant loss of bin `t`, plus the weighted gradient-matching term.
fn bin_loss<'g>(cfg: &TrainConfig, depth: Var<'g, f32>, sample: &Sample, t: usize) -> Result<Var<'g, f32>> {
    let pred = log_depth(depth, &cfg.codec)?;
    let l = scale_invariant_loss(pred, &sample.gt_log[t], &sample.masks[t], cfg.lambda)?;
    if cfg.gradient_matching_weight > 0.0 {
        let gm = gradient_matching_loss(pred, &sample.gt_log[t], &sample.masks[t], cfg.gradient_matching_scales)?;
        return l.add(gm.scale(cfg.gradient_matching_weight)?);
    }
    Ok(l)
}

type CarriedStates = Vec<Option<RecurrentState<Tensor<f32>>>>;

fn empty_carried() -> CarriedStates {
    (0..LEVELS).map(|_| None).collect()
}

fn on_tape<'g>(g: &'g Graph<f32>, carried: &CarriedStates) -> TapeStates<'g, f32> {
    carried
        .iter()
        .map(|s| s.as_ref().map(|s| RecurrentState::new(g.constant(s.h.clone()), s.bin)))
        .collect()
}

fn off_tape(states: &TapeStates<'_, f32>) -> CarriedStates {
    states.iter().map(|s| s.as_ref().map(|s| s.to_tensor())).collect()
}

/// Where a non-finite value showed up.
#[derive(Clone, Copy, Debug)]
pub struct Position {
    pub epoch: usize,
    pub window: usize,
    pub sequence: usize,
}

impl Position {
    /// Prefixes a non-finite error raised inside the window, such as the
    /// per-op check of debug builds, with where it happened.
    fn locate(self, e: Error) -> Error {
        match e {
            Error::NonFinite(m) if !m.starts_with("epoch ") => {
                Error::NonFinite(format!("epoch {}, window {}, sequence {}: {m}", self.epoch, self.window, self.sequence))
            }
            e => e,
        }
    }
}

/// Per-window outcome for one sequence.
struct WindowResult {
    loss: f64,
    grads: Vec<Tensor<f32>>,
    states: CarriedStates,
}

fn window_step(
    cfg: &TrainConfig,
    net: &Network<f32>,
    sample: &Sample,
    bins: std::ops::Range<usize>,
    carried: &CarriedStates,
    at: Position,
) -> Result<WindowResult> {
    let g = Graph::new();
    let b = Bound::new(&g, &net.params, true);
    let mut states = on_tape(&g, carried);
    let mut total: Option<Var<'_, f32>> = None;
    let mut counted = 0usize;
    for t in bins {
        let out = net.forward_bin(&b, g.constant(sample.inputs[t].clone()), &mut states)?;
        if sample.depths[t].valid_count() == 0 {
            continue;
        }
        let l = bin_loss(cfg, out.depth, sample, t)?;
        total = Some(match total {
            Some(s) => s.add(l)?,
            None => l,
        });
        counted += 1;
    }
    let next = off_tape(&states);
    drop(states);
    let Some(total) = total else {
        return Ok(WindowResult {
            loss: 0.0,
            grads: net.params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            states: next,
        });
    };
    let loss = total.scale(1.0 / counted as f64)?;
    let value = f64::from(loss.value().item());
    let mut grads = g.backward(loss)?;
    let grads: Vec<Tensor<f32>> = b
        .gradients(&mut grads)
        .into_iter()
        .zip(net.params.iter())
        .map(|(g, (_, p))| g.unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    if !value.is_finite() || grads.iter().any(|g| !g.all_finite()) {
        return Err(non_finite(value, &grads, &net.params, at));
    }
    Ok(WindowResult {
        loss: value * counted as f64,
        grads,
        states: next,
    })
}

fn non_finite(loss: f64, grads: &[Tensor<f32>], params: &ParamStore<f32>, at: Position) -> Error {
    let norm = |g: &Tensor<f32>| {
        let s: f64 = g.data().iter().map(|&v| f64::from(v) * f64::from(v)).sum();
        if s.is_nan() {
            f64::INFINITY
        } else {
            s.sqrt()
        }
    };
    let (worst, n) = grads
        .iter()
        .enumerate()
        .map(|(i, g)| (i, norm(g)))
        .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    Error::NonFinite(format!(
        "epoch {}, window {}, sequence {}: loss {loss}; largest gradient in `{}` (norm {n})",
        at.epoch,
        at.window,
        at.sequence,
        params.name(worst)
    ))
}

/// Bin-weighted mean training loss of `net` over `samples`, streamed with
/// carried states and no parameter update.
pub fn mean_loss(cfg: &TrainConfig, net: &Network<f32>, samples: &[Sample]) -> Result<f64> {
    let (mut sum, mut bins) = (0.0, 0usize);
    for s in samples {
        let mut carried = empty_carried();
        for t in 0..s.bins() {
            let g = Graph::new();
            let b = Bound::new(&g, &net.params, false);
            let mut states = on_tape(&g, &carried);
            let out = net.forward_bin(&b, g.constant(s.inputs[t].clone()), &mut states)?;
            if s.depths[t].valid_count() > 0 {
                let l = bin_loss(cfg, out.depth, s, t)?;
                sum += f64::from(l.value().item());
                bins += 1;
            }
            carried = off_tape(&states);
        }
    }
    if bins == 0 {
        return Err(Error::Data("no bins with valid depth".into()));
    }
    Ok(sum / bins as f64)
}

/// Aggregated validation metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: Vec<MetricReport>,
    pub aggregate: MetricReport,
}

/// Metric depth in meters for every bin of `sample`, with hidden state carried
/// across bins.
pub fn predict(net: &Network<f32>, inputs: &[Tensor<f32>], codec: &DepthCodec) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(inputs.len());
    let mut carried = empty_carried();
    for x in inputs {
        let g = Graph::new();
        let b = Bound::new(&g, &net.params, false);
        let mut states = on_tape(&g, &carried);
        let o = net.forward_bin(&b, g.constant(x.clone()), &mut states)?;
        let v = o.depth.value();
        if !v.all_finite() {
            return Err(Error::NonFinite("prediction contains non-finite values".into()));
        }
        out.push(
            v.data()
                .iter()
                .map(|&v| codec.decode(f64::from(v)).map(|d| d as f32))
                .collect::<Result<Vec<_>>>()?,
        );
        carried = off_tape(&states);
    }
    Ok(out)
}

/// Streams every sample through the network and averages per-bin metrics,
/// first within each sequence and then across sequences.
pub fn evaluate(net: &Network<f32>, samples: &[Sample], codec: &DepthCodec) -> Result<EvalReport> {
    let mut sequences = Vec::with_capacity(samples.len());
    for s in samples {
        let preds = predict(net, &s.inputs, codec)?;
        let mut bins = Vec::new();
        for (p, d) in preds.iter().zip(&s.depths) {
            if d.valid_count() == 0 {
                continue;
            }
            let p: Vec<f64> = p.iter().map(|&v| f64::from(v)).collect();
            bins.push(compute_metrics(&p, &d.values_f64(), &d.mask)?);
        }
        sequences.push(MetricReport::mean(&bins).ok_or_else(|| Error::Data("sequence without valid depth".into()))?);
    }
    let aggregate = MetricReport::mean(&sequences).ok_or_else(|| Error::Data("nothing to evaluate".into()))?;
    Ok(EvalReport { sequences, aggregate })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate of the last step of the epoch.
    pub lr: f64,
    pub validation: Option<MetricReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    /// SHA-256 of the code version string.
    pub code_hash: String,
    pub seed: u64,
    pub config: String,
    pub train_sequences: Vec<usize>,
    pub validation_sequences: Vec<usize>,
    pub untrained_validation: Option<MetricReport>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub checkpoints: Vec<String>,
}

pub fn code_hash() -> String {
    Sha256::digest(CODE_VERSION.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest is serializable") + "\n"
    }
}

/// Model, optimizer and progress of a run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub net: Network<f32>,
    pub opt: AdamW<f32>,
    /// Completed epochs.
    pub epoch: usize,
}

const PARAM: &str = "param/";
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";
const PROGRESS: &str = "train/progress";

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = Network::new(config.model.clone(), config.seed)?;
        let opt = AdamW::new(config.optimizer.clone(), &net.params);
        Ok(Trainer {
            config,
            net,
            opt,
            epoch: 0,
        })
    }

    /// Optimizer steps in one epoch over `train`.
    pub fn steps_per_epoch(&self, train: &[Sample]) -> usize {
        let bptt = self.config.bptt;
        train
            .chunks(self.config.batch_size)
            .map(|batch| batch.iter().map(|s| s.bins().div_ceil(bptt)).max().unwrap_or(0))
            .sum()
    }

    fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(self.config.seed, &format!("epoch/{epoch}")));
        order
    }

    /// Runs one epoch and returns the bin-weighted mean training loss and the
    /// last learning rate.
    pub fn train_epoch(&mut self, train: &[Sample]) -> Result<(f64, f64)> {
        let cfg = self.config.clone();
        let per_epoch = self.steps_per_epoch(train);
        let total = per_epoch * cfg.epochs;
        let order = self.epoch_order(train.len(), self.epoch);
        let (mut loss_sum, mut bins) = (0.0, 0usize);
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut carried: Vec<CarriedStates> = batch.iter().map(|_| empty_carried()).collect();
            let windows = batch.iter().map(|&i| train[i].bins().div_ceil(cfg.bptt)).max().unwrap_or(0);
            for w in 0..windows {
                let mut sum: Option<Vec<Tensor<f32>>> = None;
                let mut contributing = 0usize;
                for (k, &i) in batch.iter().enumerate() {
                    let s = &train[i];
                    let lo = w * cfg.bptt;
                    if lo >= s.bins() {
                        continue;
                    }
                    let range = lo..(lo + cfg.bptt).min(s.bins());
                    let n = range.len();
                    let at = Position {
                        epoch: self.epoch,
                        window: w,
                        sequence: i,
                    };
                    let r = window_step(&cfg, &self.net, s, range, &carried[k], at).map_err(|e| at.locate(e))?;
                    carried[k] = r.states;
                    loss_sum += r.loss;
                    bins += n;
                    contributing += 1;
                    sum = Some(match sum {
                        None => r.grads,
                        Some(mut acc) => {
                            for (a, g) in acc.iter_mut().zip(&r.grads) {
                                a.add_assign(g);
                            }
                            acc
                        }
                    });
                }
                let Some(mut grads) = sum else { continue };
                let inv = 1.0 / contributing as f32;
                for g in grads.iter_mut() {
                    for v in g.data_mut() {
                        *v *= inv;
                    }
                }
                clip_global_norm(&mut grads, cfg.optimizer.clip_norm);
                let step = self.opt.step as usize;
                lr = one_cycle_lr(step.min(total - 1), total, cfg.optimizer.max_lr, &cfg.schedule)?;
                self.opt.update(&mut self.net.params, &grads, lr)?;
            }
        }
        self.epoch += 1;
        Ok((if bins > 0 { loss_sum / bins as f64 } else { 0.0 }, lr))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.config.to_toml());
        c.push::<f64>(PROGRESS, &Tensor::from_f64(&[2], &[self.epoch as f64, self.opt.step as f64]).expect("two values"));
        for (name, t) in self.net.params.iter() {
            c.push(&format!("{PARAM}{name}"), t);
        }
        for (i, (name, _)) in self.net.params.iter().enumerate() {
            c.push(&format!("{MOMENT1}{name}"), &self.opt.m[i]);
            c.push(&format!("{MOMENT2}{name}"), &self.opt.v[i]);
        }
        c
    }

    /// Restores a run; optimizer state is optional so bare parameter files load too.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let config = TrainConfig::from_toml(&c.config)?;
        let mut params = ParamStore::new();
        for r in &c.records {
            if let Some(name) = r.name.strip_prefix(PARAM) {
                params.insert(name, c.tensor::<f32>(&r.name)?)?;
            }
        }
        let net = Network::from_parts(config.model.clone(), params)?;
        let mut opt = AdamW::new(config.optimizer.clone(), &net.params);
        let mut epoch = 0;
        if c.record(PROGRESS).is_some() {
            let p = c.tensor::<f64>(PROGRESS)?;
            epoch = p.data()[0] as usize;
            opt.step = p.data()[1] as u64;
            for (i, (name, _)) in net.params.iter().enumerate() {
                opt.m[i] = c.tensor(&format!("{MOMENT1}{name}"))?;
                opt.v[i] = c.tensor(&format!("{MOMENT2}{name}"))?;
            }
        }
        Ok(Trainer { config, net, opt, epoch })
    }
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub manifest: RunManifest,
    pub final_validation: Option<MetricReport>,
}

/// Names of files written into the output directory.
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const MANIFEST: &str = "manifest.json";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Trains on the configured data. With `out` set, the manifest and the last
/// and best-by-validation checkpoints are written there after every epoch.
/// `resume` continues a previous run from its last completed epoch.
pub fn train(
    config: TrainConfig,
    sequences: &[LabeledSequence],
    out: Option<&Path>,
    resume: Option<Trainer>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let mut trainer = match resume {
        Some(t) => {
            if t.config != config {
                return Err(Error::Config("resume checkpoint was written with a different config".into()));
            }
            t
        }
        None => Trainer::new(config)?,
    };
    let cfg = trainer.config.clone();
    let samples = sequences
        .iter()
        .map(|s| prepare(s, cfg.data.normalization))
        .collect::<Result<Vec<_>>>()?;
    let (train_idx, val_idx) = split_indices(samples.len(), cfg.data.validation_every);
    if train_idx.is_empty() {
        return Err(Error::Data("no training sequences".into()));
    }
    let train_set: Vec<Sample> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let val_set: Vec<Sample> = val_idx.iter().map(|&i| samples[i].clone()).collect();
    let validate = |net: &Network<f32>| -> Result<Option<MetricReport>> {
        if val_set.is_empty() {
            return Ok(None);
        }
        Ok(Some(evaluate(net, &val_set, &cfg.codec)?.aggregate))
    };

    let mut manifest = RunManifest {
        code_version: CODE_VERSION.to_string(),
        code_hash: code_hash(),
        seed: cfg.seed,
        config: cfg.to_toml(),
        train_sequences: train_idx.clone(),
        validation_sequences: val_idx.clone(),
        untrained_validation: None,
        epochs: Vec::new(),
        best_epoch: None,
        checkpoints: Vec::new(),
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST);
        if trainer.epoch > 0 && path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let prev: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            manifest.untrained_validation = prev.untrained_validation;
            manifest.epochs = prev.epochs.into_iter().take(trainer.epoch).collect();
            manifest.best_epoch = prev.best_epoch.filter(|&e| e <= trainer.epoch);
        }
    }
    if trainer.epoch == 0 {
        manifest.untrained_validation = validate(&trainer.net)?;
    }
    let mut best = manifest
        .best_epoch
        .and_then(|e| manifest.epochs.get(e - 1))
        .and_then(|l| l.validation.as_ref())
        .map(|v| v.abs_rel);
    let mut last_val = None;
    while trainer.epoch < cfg.epochs {
        let (mean_loss, lr) = trainer.train_epoch(&train_set)?;
        let validation = validate(&trainer.net)?;
        let log = EpochLog {
            epoch: trainer.epoch,
            mean_loss,
            lr,
            validation: validation.clone(),
        };
        on_epoch(&log);
        manifest.epochs.push(log);
        let improved = match (&validation, best) {
            (Some(v), Some(b)) => v.abs_rel < b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            best = validation.as_ref().map(|v| v.abs_rel);
            manifest.best_epoch = Some(trainer.epoch);
        }
        if let Some(dir) = out {
            let bytes = trainer.checkpoint().encode();
            write_file(&dir.join(LAST_CHECKPOINT), &bytes)?;
            if improved || (validation.is_none()) {
                write_file(&dir.join(BEST_CHECKPOINT), &bytes)?;
            }
            manifest.checkpoints = vec![LAST_CHECKPOINT.to_string(), BEST_CHECKPOINT.to_string()];
            write_file(&dir.join(MANIFEST), manifest.to_json().as_bytes())?;
        }
        last_val = validation;
    }
    Ok(TrainOutcome {
        trainer,
        manifest,
        final_validation: last_val,
    })
}

/// Writes one metric-depth PFM and one colorized PPM preview per bin of
/// `stream` into `out`, carrying hidden state across bins. Returns the number
/// of bins.
pub fn infer(net: &Network<f32>, cfg: &TrainConfig, stream: &EventStream, out: &Path) -> Result<usize> {
    let (w, h) = (net.config.width, net.config.height);
    if stream.width as usize != w || stream.height as usize != h {
        return Err(Error::Data(format!(
            "events are {}x{}, model expects {w}x{h}",
            stream.width, stream.height
        )));
    }
    if stream.is_empty() {
        return Ok(0);
    }
    let inputs = event_images(stream, cfg.bin_us(), cfg.data.normalization)?;
    let preds = predict(net, &inputs, &cfg.codec)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (i, p) in preds.iter().enumerate() {
        let stem = format!("depth_{:04}", i + 1);
        pfm::write(&out.join(format!("{stem}.pfm")), w, h, p)?;
        let rgb = colorize(p, cfg.codec.decode(0.0)?, cfg.codec.max_depth);
        write_file(&out.join(format!("{stem}.ppm")), &encode_ppm(w, h, &rgb))?;
    }
    Ok(preds.len())
}

/// One ablation setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub skip_mode: SkipMode,
    pub transfer_mode: TransferMode,
    pub recurrence: bool,
}

impl Variant {
    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        c.model.skip_mode = self.skip_mode;
        c.model.transfer_mode = self.transfer_mode;
        c.model.recurrence = self.recurrence;
        c
    }
}

/// The base model and one switch flipped at a time.
pub fn default_variants() -> Vec<Variant> {
    let v = |name: &str, skip_mode, transfer_mode, recurrence| Variant {
        name: name.to_string(),
        skip_mode,
        transfer_mode,
        recurrence,
    };
    vec![
        v("full", SkipMode::Stf, TransferMode::UpdateGate, true),
        v("no_recurrence", SkipMode::Stf, TransferMode::UpdateGate, false),
        v("attended", SkipMode::Stf, TransferMode::Attended, true),
        v("residual", SkipMode::Stf, TransferMode::Residual, true),
        v("add_skip", SkipMode::Add, TransferMode::UpdateGate, true),
        v("concat_skip", SkipMode::Concat, TransferMode::UpdateGate, true),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    /// Final validation abs_rel per seed.
    pub abs_rel: Vec<f64>,
    pub median: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains every variant once per seed on the same sequences and reports the
/// final validation abs_rel.
pub fn ablation_suite(
    base: &TrainConfig,
    sequences: &[LabeledSequence],
    seeds: &[u64],
    variants: &[Variant],
    mut on_run: impl FnMut(&Variant, u64, f64),
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let mut scores = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..v.apply(base) };
            let outcome = train(cfg, sequences, None, None, |_| {})?;
            let score = outcome
                .final_validation
                .ok_or_else(|| Error::Data("ablation needs validation sequences".into()))?
                .abs_rel;
            on_run(v, seed, score);
            scores.push(score);
        }
        rows.push(AblationRow {
            variant: v.name.clone(),
            seeds: seeds.to_vec(),
            median: median(&scores),
            abs_rel: scores,
        });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<16} {:>10}  per-seed abs_rel\n", "variant", "median");
    for r in rows {
        let per: Vec<String> = r.abs_rel.iter().map(|v| format!("{v:.4}")).collect();
        s += &format!("{:<16} {:>10.4}  {}\n", r.variant, r.median, per.join(" "));
    }
    s
}
