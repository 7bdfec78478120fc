//! Pre-training, teacher-forced training and autoregressive inference.

mod infer;
mod optim;

use std::io::Write;
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use infer::{infer_scanpath, mean_ss, sample_scanpaths, InferMode, StageCache};
pub use optim::{clip_global_norm, global_norm, AdamW, LearningRates};

use crate::autodiff::{grad_check, AutodiffError, GradCheckReport, Graph, Mode, Probe, Real, Tensor, Var};
use crate::data::Corpus;
use crate::domain::{Fixation, PackKind, TrialRecord};
use crate::metrics::MetricError;
use crate::model::{encode_stage, forward_pack, GazeModel, ModelConfig, Readout};
use crate::objectives::{
    loss_bbox, loss_duration, loss_target, loss_token, loss_xy, partial_loss, token_targets, BatchCounts,
    GroundTerms, GroundingAverage, LossBreakdown, PackTerms,
};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss in epoch {epoch}: {detail}")]
    Numeric { epoch: usize, detail: String },
    #[error(transparent)]
    Model(#[from] AutodiffError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, EngineError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Pretrain,
    Train,
}

/// Validation-SS early stopping: check every `every` epochs and stop after
/// `patience` checks without improvement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopping {
    pub every: usize,
    pub patience: usize,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        Self { every: 10, patience: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LearningRates,
    pub weight_decay: f64,
    pub seed: u64,
    pub duration_enabled: bool,
    /// Add the grounding loss on qualifying packs while training.
    pub grounding: bool,
    pub grounding_average: GroundingAverage,
    /// Global gradient-norm limit; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Only used by `train` when validation records are given.
    pub early_stopping: Option<EarlyStopping>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::train()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            phase: Phase::Pretrain,
            epochs: 200,
            batch_size: 128,
            lr: LearningRates::uniform(1e-5),
            weight_decay: 1e-4,
            seed: 0,
            duration_enabled: true,
            grounding: true,
            grounding_average: GroundingAverage::Qualifying,
            grad_clip: Some(1.0),
            early_stopping: None,
        }
    }

    pub fn train() -> Self {
        Self {
            phase: Phase::Train,
            epochs: 200,
            batch_size: 64,
            lr: LearningRates { stubs: 1e-7, vl: 1e-5, rest: 1e-4 },
            early_stopping: Some(EarlyStopping::default()),
            ..Self::pretrain()
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(EngineError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.lr.all().iter().any(|r| !r.is_finite() || *r < 0.0) {
            return bad(format!("learning rates must be finite and non-negative: {:?}", self.lr));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return bad("weight_decay must be finite and non-negative".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        if let Some(es) = self.early_stopping {
            if es.every == 0 || es.patience == 0 {
                return bad("early stopping needs positive every and patience".into());
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the training and model configs.
    pub fn hash_with(&self, model: &ModelConfig) -> String {
        let json = serde_json::to_string(&(self, model)).expect("configs serialize");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over the epoch's minibatches.
    pub loss: LossBreakdown,
    pub steps: usize,
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
    /// Steps whose gradient was clipped.
    pub clipped: usize,
    pub val_ss: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub phase: Phase,
    pub seed: u64,
    pub config_hash: String,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept when validation was used.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

#[derive(Serialize)]
struct RunHeader<'a> {
    phase: Phase,
    seed: u64,
    config_hash: &'a str,
    best_epoch: Option<usize>,
    stopped_early: bool,
}

impl RunLog {
    /// A header line followed by one line per epoch.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = RunHeader {
            phase: self.phase,
            seed: self.seed,
            config_hash: &self.config_hash,
            best_epoch: self.best_epoch,
            stopped_early: self.stopped_early,
        };
        let io = |e: serde_json::Error| EngineError::Io(e.into());
        serde_json::to_writer(&mut w, &header).map_err(io)?;
        writeln!(w)?;
        for e in &self.epochs {
            serde_json::to_writer(&mut w, e).map_err(io)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

// Independent random streams drawn from one run seed.
const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_NOISE: u64 = 3;
pub(crate) const STREAM_SAMPLE: u64 = 4;

/// A `u64` seed for `(stream, index)` derived from `seed`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r.set_word_pos(2 * index as u128);
    r.next_u64()
}

fn epoch_index(epoch: usize, item: usize) -> u64 {
    ((epoch as u64) << 32) | item as u64
}

fn add_grads(acc: &mut IndexMap<String, Tensor<f32>>, grads: IndexMap<String, Tensor<f32>>) {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
            None => {
                acc.insert(name, g);
            }
        }
    }
}

fn numeric(epoch: usize, e: AutodiffError) -> EngineError {
    match e {
        AutodiffError::Numeric { op } => EngineError::Numeric { epoch, detail: format!("in {op}") },
        other => other.into(),
    }
}

/// Ground-truth box of a record as normalized `(x, y, w, h)`.
pub fn normalized_box(r: &TrialRecord) -> [f64; 4] {
    r.target_bbox.normalized(r.image).map(f64::from)
}

struct Stepper<'a> {
    cfg: &'a TrainConfig,
    opt: AdamW,
    norms: Vec<f64>,
    clipped: usize,
    losses: Vec<LossBreakdown>,
}

impl<'a> Stepper<'a> {
    fn new(cfg: &'a TrainConfig) -> Self {
        Self { cfg, opt: AdamW::new(cfg.weight_decay), norms: Vec::new(), clipped: 0, losses: Vec::new() }
    }

    fn step(&mut self, model: &mut GazeModel, mut grads: IndexMap<String, Tensor<f32>>, loss: LossBreakdown) {
        let norm = match self.cfg.grad_clip {
            Some(c) => clip_global_norm(&mut grads, c),
            None => global_norm(&grads),
        };
        if self.cfg.grad_clip.is_some_and(|c| norm > c) {
            self.clipped += 1;
        }
        self.opt.update(&mut model.params, &grads, &self.cfg.lr);
        self.norms.push(norm);
        self.losses.push(loss);
    }

    fn finish_epoch(&mut self, epoch: usize, started: Instant) -> EpochLog {
        let n = self.losses.len().max(1) as f64;
        let mut loss = LossBreakdown::default();
        for l in &self.losses {
            loss.add(l);
        }
        let log = EpochLog {
            epoch,
            loss: loss.scaled(1.0 / n),
            steps: self.losses.len(),
            grad_norm_mean: self.norms.iter().sum::<f64>() / n,
            grad_norm_max: self.norms.iter().copied().fold(0.0, f64::max),
            clipped: self.clipped,
            val_ss: None,
            wall_ms: started.elapsed().as_secs_f64() * 1000.0,
        };
        self.norms.clear();
        self.losses.clear();
        self.clipped = 0;
        log
    }
}

/// Optimizes the grounding loss `l_reg + l_giou + l_target` on complete
/// expressions. Only the stubs and the visuo-linguistic encoder receive
/// gradients.
pub fn pretrain(model: &mut GazeModel, corpus: &Corpus, cfg: &TrainConfig) -> Result<RunLog> {
    cfg.check()?;
    if cfg.phase != Phase::Pretrain {
        return Err(EngineError::Config("pretrain needs phase PRETRAIN".into()));
    }
    let mcfg = ModelConfig { dropout_ground: model.config.dropout_ground_pretrain, ..model.config.clone() };
    let mut log = RunLog {
        phase: cfg.phase,
        seed: cfg.seed,
        config_hash: cfg.hash_with(&model.config),
        epochs: Vec::new(),
        best_epoch: None,
        stopped_early: false,
    };
    let mut stepper = Stepper::new(cfg);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHUFFLE, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let w = 1.0 / batch.len() as f64;
            let mut acc = IndexMap::new();
            let mut bd = LossBreakdown::default();
            for &ri in batch {
                let r = &corpus.records[ri];
                let seed = derive_seed(cfg.seed, STREAM_DROPOUT, epoch_index(epoch, ri));
                let mut g = Graph::with_params(&model.params, Mode::Train { seed });
                let (loss, b) = (|| {
                    let vl = encode_stage(&mut g, &mcfg, &model.vocab, r, r.n_words())?;
                    let (l_reg, l_giou) = loss_bbox(&mut g, vl.bbox, normalized_box(r))?;
                    let cat = model.vocab.category_index(&r.target_category)?;
                    let l_target = loss_target(&mut g, vl.tgt_dist, cat)?;
                    let parts = g.concat_rows(&[l_reg, l_giou, l_target])?;
                    let s = g.sum(parts)?;
                    let loss = g.scale(s, w)?;
                    let v = |g: &Graph<'_, f32>, x| g.value(x).item() as f64 * w;
                    let b = LossBreakdown {
                        l_reg: v(&g, l_reg),
                        l_giou: v(&g, l_giou),
                        l_target: v(&g, l_target),
                        ..Default::default()
                    };
                    Ok::<_, AutodiffError>((loss, b))
                })()
                .map_err(|e| numeric(epoch, e))?;
                add_grads(&mut acc, g.backward(loss)?.params());
                bd.add(&b);
            }
            bd.l_ground = bd.l_reg + bd.l_giou + bd.l_target;
            bd.total = bd.l_ground;
            stepper.step(model, acc, bd);
        }
        log.epochs.push(stepper.finish_epoch(epoch, started));
    }
    Ok(log)
}

/// Packs of one record at one stage, across subjects. They share one
/// visuo-linguistic encoding.
#[derive(Clone, Debug)]
pub struct StageGroup {
    pub record: usize,
    pub stage: usize,
    /// `(subject index, grounding active)`.
    pub items: Vec<(usize, bool)>,
}

/// Every ground-truth pack of the corpus, grouped by `(record, stage)`.
/// Grounding is active once the last word has been heard or on the
/// terminal pack of a scanpath.
pub fn stage_groups(corpus: &Corpus) -> Vec<StageGroup> {
    let mut out = Vec::new();
    for (ri, r) in corpus.records.iter().enumerate() {
        let l = r.n_words();
        for j in 0..=l + 1 {
            let items: Vec<(usize, bool)> = r
                .human_scanpaths
                .iter()
                .enumerate()
                .filter_map(|(si, h)| {
                    h.scanpath.pack_at(j).map(|p| (si, j >= l || p.kind == PackKind::Terminal))
                })
                .collect();
            if !items.is_empty() {
                out.push(StageGroup { record: ri, stage: j, items });
            }
        }
    }
    out
}

/// Ground-truth fixations made before stage `j`.
pub fn gt_history(r: &TrialRecord, subject: usize, j: usize) -> Vec<Fixation> {
    r.human_scanpaths[subject]
        .scanpath
        .flatten()
        .into_iter()
        .filter(|f| f.pack_index < j)
        .collect()
}

fn group_loss<T: Real>(
    g: &mut Graph<'_, T>,
    model: &GazeModel,
    corpus: &Corpus,
    group: &StageGroup,
    cfg: &TrainConfig,
    counts: BatchCounts,
    noise_seed: u64,
) -> std::result::Result<(Var, LossBreakdown), AutodiffError> {
    let r = &corpus.records[group.record];
    let j = group.stage;
    let vl = encode_stage(g, &model.config, &model.vocab, r, j)?;
    let grounded = cfg.grounding && group.items.iter().any(|&(_, f)| f);
    let ground = if grounded {
        let (l_reg, l_giou) = loss_bbox(g, vl.bbox, normalized_box(r))?;
        let cat = model.vocab.category_index(&r.target_category)?;
        let l_target = loss_target(g, vl.tgt_dist, cat)?;
        Some(GroundTerms { l_reg, l_giou, l_target })
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut terms = Vec::with_capacity(group.items.len());
    for &(si, flag) in &group.items {
        let gt = r.human_scanpaths[si].scanpath.pack_at(j).expect("grouped pack exists");
        let hist = gt_history(r, si, j);
        let p = forward_pack(g, &model.config, &vl, &hist, j, r.image, Readout::Teacher, &mut rng)?;
        let l_token = loss_token(g, p.token_probs, gt)?;
        let (l_xy, l_d) = if gt.kind == PackKind::Normal {
            let loc = p.sampled_loc(g)?;
            let l_xy = loss_xy(g, loc, gt)?;
            let l_d = if cfg.duration_enabled {
                let dur = p.sampled_dur(g)?;
                Some(loss_duration(g, dur, gt)?)
            } else {
                None
            };
            (Some(l_xy), l_d)
        } else {
            (None, None)
        };
        terms.push(PackTerms { l_xy, l_token, l_d, ground: if flag { ground } else { None } });
    }
    partial_loss(g, &terms, counts, cfg.grounding_average)
}

/// The training loss of one minibatch made of `groups`, built on a single
/// graph. `train` computes the same value split across one graph per group.
pub fn batch_loss<T: Real>(
    g: &mut Graph<'_, T>,
    model: &GazeModel,
    corpus: &Corpus,
    groups: &[StageGroup],
    cfg: &TrainConfig,
    noise_seed: u64,
) -> std::result::Result<(Var, LossBreakdown), AutodiffError> {
    let counts = batch_counts(groups.iter(), cfg);
    let mut total: Option<Var> = None;
    let mut bd = LossBreakdown::default();
    for (i, group) in groups.iter().enumerate() {
        let seed = derive_seed(noise_seed, STREAM_NOISE, i as u64);
        let (l, b) = group_loss(g, model, corpus, group, cfg, counts, seed)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
        bd.add(&b);
    }
    let total = total.ok_or_else(|| AutodiffError::Contract("empty minibatch".into()))?;
    Ok((total, bd))
}

fn batch_counts<'a>(groups: impl Iterator<Item = &'a StageGroup>, cfg: &TrainConfig) -> BatchCounts {
    let (mut packs, mut grounded) = (0, 0);
    for gr in groups {
        packs += gr.items.len();
        if cfg.grounding {
            grounded += gr.items.iter().filter(|i| i.1).count();
        }
    }
    BatchCounts { packs, grounded }
}

/// Teacher-forced training: every ground-truth pack is a minibatch item
/// whose fixation context is the subject's own earlier fixations.
///
/// Minibatches are runs of whole stage groups (shuffled each epoch) holding
/// at least `batch_size` packs. With `val` records and early stopping
/// configured, the parameters with the best validation SS are kept.
pub fn train(model: &mut GazeModel, corpus: &Corpus, val: Option<&Corpus>, cfg: &TrainConfig) -> Result<RunLog> {
    cfg.check()?;
    if cfg.phase != Phase::Train {
        return Err(EngineError::Config("train needs phase TRAIN".into()));
    }
    let groups = stage_groups(corpus);
    let mut log = RunLog {
        phase: cfg.phase,
        seed: cfg.seed,
        config_hash: cfg.hash_with(&model.config),
        epochs: Vec::new(),
        best_epoch: None,
        stopped_early: false,
    };
    let mut stepper = Stepper::new(cfg);
    let mut best: Option<(f64, usize, crate::autodiff::ParamStore)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..groups.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHUFFLE, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut start = 0;
        while start < order.len() {
            let mut end = start;
            let mut packs = 0;
            while end < order.len() && packs < cfg.batch_size {
                packs += groups[order[end]].items.len();
                end += 1;
            }
            let batch = &order[start..end];
            start = end;
            let counts = batch_counts(batch.iter().map(|&gi| &groups[gi]), cfg);
            let mut acc = IndexMap::new();
            let mut bd = LossBreakdown::default();
            for &gi in batch {
                let idx = epoch_index(epoch, gi);
                let seed = derive_seed(cfg.seed, STREAM_DROPOUT, idx);
                let noise = derive_seed(cfg.seed, STREAM_NOISE, idx);
                let mut g = Graph::with_params(&model.params, Mode::Train { seed });
                let (loss, b) = group_loss(&mut g, model, corpus, &groups[gi], cfg, counts, noise)
                    .map_err(|e| numeric(epoch, e))?;
                add_grads(&mut acc, g.backward(loss)?.params());
                bd.add(&b);
            }
            stepper.step(model, acc, bd);
        }
        let mut entry = stepper.finish_epoch(epoch, started);
        if let (Some(val), Some(es)) = (val, cfg.early_stopping) {
            if (epoch + 1) % es.every == 0 || epoch + 1 == cfg.epochs {
                let ss = mean_ss(model, val)?;
                entry.val_ss = Some(ss);
                if best.as_ref().is_none_or(|b| ss > b.0) {
                    best = Some((ss, epoch, model.params.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                }
            }
        }
        log.epochs.push(entry);
        if cfg.early_stopping.is_some_and(|es| since_best >= es.patience) {
            log.stopped_early = true;
            break;
        }
    }
    if let Some((_, epoch, params)) = best {
        model.params = params;
        log.best_epoch = Some(epoch);
    }
    Ok(log)
}

/// Finite-difference check of the full training loss on a minibatch made
/// of every pack of `corpus`, in double precision with dropout active.
pub fn grad_check_total_loss(
    model: &GazeModel,
    corpus: &Corpus,
    cfg: &TrainConfig,
    eps: f64,
    probe: &Probe,
) -> Result<GradCheckReport> {
    cfg.check()?;
    let groups = stage_groups(corpus);
    let params = model.params.cast::<f64>();
    let mode = Mode::Train { seed: derive_seed(cfg.seed, STREAM_DROPOUT, 0) };
    let noise = derive_seed(cfg.seed, STREAM_NOISE, 0);
    let report = grad_check(&params, eps, mode, probe, |g| {
        Ok(batch_loss(g, model, corpus, &groups, cfg, noise)?.0)
    })?;
    Ok(report)
}

/// Teacher-forced statistics with mean readout and no dropout.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TeacherForcedStats {
    /// Fraction of slots whose argmax token matches the target layout.
    pub token_accuracy: f64,
    /// Mean `l_xy` (pixels) over normal ground-truth packs.
    pub l_xy: f64,
    /// Mean `l_d` (seconds) over normal ground-truth packs.
    pub l_d: f64,
    pub packs: usize,
}

pub fn teacher_forced_eval(model: &GazeModel, corpus: &Corpus) -> Result<TeacherForcedStats> {
    let (mut hits, mut slots, mut normal) = (0usize, 0usize, 0usize);
    let (mut xy, mut dd) = (0.0, 0.0);
    let groups = stage_groups(corpus);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for group in &groups {
        let r = &corpus.records[group.record];
        let j = group.stage;
        let mut g = Graph::with_params(&model.params, Mode::Eval);
        let vl = encode_stage(&mut g, &model.config, &model.vocab, r, j)?;
        for &(si, _) in &group.items {
            let gt = r.human_scanpaths[si].scanpath.pack_at(j).expect("grouped pack exists");
            let hist = gt_history(r, si, j);
            let p = forward_pack(&mut g, &model.config, &vl, &hist, j, r.image, Readout::Mean, &mut rng)?;
            let probs = g.value(p.token_probs).clone();
            for (row, t) in token_targets(gt, probs.rows()).into_iter().enumerate() {
                hits += usize::from(argmax(probs.row(row)) == t);
                slots += 1;
            }
            if gt.kind == PackKind::Normal {
                let l = loss_xy(&mut g, p.loc_mean, gt)?;
                xy += g.value(l).item() as f64;
                let l = loss_duration(&mut g, p.dur_mean, gt)?;
                dd += g.value(l).item() as f64;
                normal += 1;
            }
        }
    }
    let n = normal.max(1) as f64;
    Ok(TeacherForcedStats {
        token_accuracy: hits as f64 / slots.max(1) as f64,
        l_xy: xy / n,
        l_d: dd / n,
        packs: groups.iter().map(|g| g.items.len()).sum(),
    })
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
