use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, derive_seed, EngineError, STREAM_SAMPLE};
use crate::autodiff::{AutodiffError, Graph, Mode, Tensor};
use crate::data::Corpus;
use crate::domain::{Pack, Scanpath, TrialRecord};
use crate::metrics::{scanpath_metrics, MetricConfig};
use crate::model::{encode_stage, forward_pack, GazeModel, Readout, VlState};
use crate::objectives::{EOS, FIX};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InferMode {
    Sample,
    Mean,
}

struct Stage {
    f_vlg: Tensor<f32>,
    bbox: Tensor<f32>,
    tgt: Tensor<f32>,
    mask: Vec<bool>,
}

/// Visuo-linguistic encodings of one record's stages, computed on first
/// use. In eval mode they do not depend on the generated history, so
/// repeated runs on the same record can share them.
pub struct StageCache<'a> {
    model: &'a GazeModel,
    record: &'a TrialRecord,
    stages: Vec<Option<Stage>>,
}

impl<'a> StageCache<'a> {
    pub fn new(model: &'a GazeModel, record: &'a TrialRecord) -> Self {
        let n = record.n_words() + 2;
        Self { model, record, stages: (0..n).map(|_| None).collect() }
    }

    fn get(&mut self, j: usize) -> Result<&Stage, AutodiffError> {
        if self.stages[j].is_none() {
            let mut g = Graph::with_params(&self.model.params, Mode::Eval);
            let vl = encode_stage(&mut g, &self.model.config, &self.model.vocab, self.record, j)?;
            self.stages[j] = Some(Stage {
                f_vlg: g.value(vl.f_vlg).clone(),
                bbox: g.value(vl.bbox).clone(),
                tgt: g.value(vl.tgt_dist).clone(),
                mask: vl.mask,
            });
        }
        Ok(self.stages[j].as_ref().expect("filled above"))
    }

    /// One autoregressive run. Each stage decodes a pack from the fixations
    /// generated so far; slots are read greedily and the leading FIX slots
    /// become fixations. An EOS slot ends the scanpath; otherwise it ends
    /// after stage `L + 1`.
    pub fn run(&mut self, mode: InferMode, seed: u64) -> Result<Scanpath, AutodiffError> {
        let model = self.model;
        let record = self.record;
        let l = record.n_words();
        let readout = match mode {
            InferMode::Sample => Readout::Sample,
            InferMode::Mean => Readout::Mean,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut packs: Vec<Pack> = Vec::new();
        let mut history = Vec::new();
        for j in 0..=l + 1 {
            let stage = self.get(j)?;
            let mut g = Graph::with_params(&model.params, Mode::Eval);
            let vl = VlState {
                f_vlg: g.constant(stage.f_vlg.clone())?,
                bbox: g.constant(stage.bbox.clone())?,
                tgt_dist: g.constant(stage.tgt.clone())?,
                mask: stage.mask.clone(),
            };
            let p = forward_pack(&mut g, &model.config, &vl, &history, j, record.image, readout, &mut rng)?;
            let probs = g.value(p.token_probs);
            let tokens: Vec<usize> = (0..probs.rows()).map(|i| argmax(probs.row(i))).collect();
            let kept = tokens.iter().take_while(|&&t| t == FIX).count();
            let eos = tokens.contains(&EOS);
            let samples = g.value(p.sampled);
            let fix: Vec<(f32, f32, u32)> = (0..kept)
                .map(|i| {
                    let s = samples.row(i);
                    (s[0], s[1], (s[2] as f64 * 1000.0).round() as u32)
                })
                .collect();
            let pack = Pack::normal(j, &fix);
            history.extend(pack.fixations.iter().copied());
            if eos {
                if kept == 0 {
                    packs.push(Pack::terminal(j));
                } else {
                    packs.push(pack);
                    if j <= l {
                        packs.push(Pack::terminal(j + 1));
                    }
                }
                break;
            }
            packs.push(pack);
        }
        Ok(Scanpath::from_packs(packs, l))
    }
}

pub fn infer_scanpath(
    model: &GazeModel,
    record: &TrialRecord,
    mode: InferMode,
    seed: u64,
) -> Result<Scanpath, AutodiffError> {
    StageCache::new(model, record).run(mode, seed)
}

/// `n` independent sampled runs with seeds derived from `seed`.
pub fn sample_scanpaths(
    model: &GazeModel,
    record: &TrialRecord,
    n: usize,
    seed: u64,
) -> Result<Vec<Scanpath>, AutodiffError> {
    if n == 0 {
        return Err(AutodiffError::Contract("need at least one sample".into()));
    }
    let mut cache = StageCache::new(model, record);
    (0..n as u64)
        .map(|i| cache.run(InferMode::Sample, derive_seed(seed, STREAM_SAMPLE, i)))
        .collect()
}

/// Mean SS of mean-mode inference against every human scanpath; used for
/// early stopping.
pub fn mean_ss(model: &GazeModel, corpus: &Corpus) -> Result<f64, EngineError> {
    let cfg = MetricConfig::default();
    let (mut sum, mut n) = (0.0, 0usize);
    for r in &corpus.records {
        let pred = infer_scanpath(model, r, InferMode::Mean, 0)?;
        for h in &r.human_scanpaths {
            sum += scanpath_metrics(&pred, &h.scanpath, cfg.grid, r.image)?.0;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}
