//! The gaze network: stub visual and language encoders, the
//! visuo-linguistic encoder with box and category tokens, the fixation
//! context encoder, the pack decoder and the fixation heads.
//!
//! All forward functions take a [`Graph`] bound to the model's parameter
//! store, so the same code runs in `f32` for training and in `f64` for
//! gradient checks.

use std::io::{BufRead, Write};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{self, linear};
use crate::autodiff::{init, AutodiffError, Graph, ParamStore, Real, Tensor, Var};
use crate::data::{Corpus, BOT, EOT, PAD};
use crate::domain::{FeatureGrid, Fixation, ImageSize, TrialRecord};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Sampled durations never go below this many seconds.
pub const MIN_SAMPLED_DURATION_S: f64 = 0.06;
/// Sampled durations are capped here so a runaway duration head still
/// yields a finite fixation.
pub const MAX_SAMPLED_DURATION_S: f64 = 10.0;
/// Initial duration mean in seconds (added to the raw head output).
const DURATION_OFFSET_S: f64 = 0.25;
const DURATION_LOGVAR_OFFSET: f64 = -5.991_464_547_107_982; // ln(0.05²)
const SINUSOID_BASE: f64 = 10_000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub l_p: usize,
    pub l_c: usize,
    pub l_lang: usize,
    pub grid: (usize, usize),
    pub d_lang_stub: usize,
    pub d_vis_stub: usize,
    pub dropout_enc: f64,
    pub dropout_dec: f64,
    pub dropout_heads: f64,
    pub dropout_ground: f64,
    /// Grounding-head dropout while pre-training.
    pub dropout_ground_pretrain: f64,
    /// Shrinks to `d = 64`, two layers each and `d_ff = 128`.
    pub toy_scale: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 256,
            n_enc_layers: 6,
            n_dec_layers: 6,
            n_heads: 8,
            d_ff: 1024,
            l_p: 6,
            l_c: 36,
            l_lang: 32,
            grid: (10, 18),
            d_lang_stub: 64,
            d_vis_stub: 64,
            dropout_enc: 0.1,
            dropout_dec: 0.2,
            dropout_heads: 0.4,
            dropout_ground: 0.2,
            dropout_ground_pretrain: 0.3,
            toy_scale: false,
        }
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self { toy_scale: true, ..Self::default() }
    }

    pub fn without_dropout(self) -> Self {
        Self {
            dropout_enc: 0.0,
            dropout_dec: 0.0,
            dropout_heads: 0.0,
            dropout_ground: 0.0,
            dropout_ground_pretrain: 0.0,
            ..self
        }
    }

    /// The sizes actually used, after applying `toy_scale`.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if c.toy_scale {
            c.d = 64;
            c.n_enc_layers = 2;
            c.n_dec_layers = 2;
            c.d_ff = 128;
        }
        c
    }

    pub fn check(&self) -> Result<()> {
        let c = self.resolved();
        let bad = |m: String| Err(AutodiffError::Config(m));
        if c.d == 0 || c.n_heads == 0 || c.d % c.n_heads != 0 {
            return bad(format!("d = {} must be a positive multiple of n_heads = {}", c.d, c.n_heads));
        }
        if c.d % 2 != 0 {
            return bad("d must be even for sinusoidal encodings".into());
        }
        if c.l_p == 0 || c.l_c < c.l_p {
            return bad(format!("need 0 < L_P ≤ L_C, got {} and {}", c.l_p, c.l_c));
        }
        if c.l_lang < 3 || c.grid.0 == 0 || c.grid.1 == 0 {
            return bad("l_lang must be at least 3 and the grid non-empty".into());
        }
        if c.d_lang_stub == 0 || c.d_vis_stub == 0 || c.d_ff == 0 || c.n_enc_layers == 0 {
            return bad("layer sizes must be positive".into());
        }
        for (name, p) in [
            ("dropout_enc", c.dropout_enc),
            ("dropout_dec", c.dropout_dec),
            ("dropout_heads", c.dropout_heads),
            ("dropout_ground", c.dropout_ground),
            ("dropout_ground_pretrain", c.dropout_ground_pretrain),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1)"));
            }
        }
        Ok(())
    }

    fn lang_heads(&self) -> usize {
        if self.d_lang_stub % self.n_heads == 0 {
            self.n_heads
        } else {
            1
        }
    }

    /// Width of the visuo-linguistic sequence: `h·w + l_lang + 2`.
    pub fn vl_len(&self) -> usize {
        self.grid.0 * self.grid.1 + self.l_lang + 2
    }
}

/// Vocabularies the model was built for; stored alongside the config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub words: Vec<String>,
    pub categories: Vec<String>,
    pub feature_dim: usize,
}

impl Vocab {
    pub fn of(corpus: &Corpus) -> Self {
        Self {
            words: corpus.word_vocab.clone(),
            categories: corpus.category_vocab.clone(),
            feature_dim: corpus.feature_dim,
        }
    }

    pub fn word_indices(&self, words: &[String]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| {
                self.words.iter().position(|v| v == w).ok_or(AutodiffError::Index {
                    what: "word vocabulary",
                    index: usize::MAX,
                    size: self.words.len(),
                })
            })
            .collect()
    }

    pub fn category_index(&self, c: &str) -> Result<usize> {
        self.categories.iter().position(|v| v == c).ok_or(AutodiffError::Index {
            what: "category vocabulary",
            index: usize::MAX,
            size: self.categories.len(),
        })
    }
}

/// Configuration, vocabularies and parameters of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    config: ModelConfig,
    vocab: Vocab,
}

impl GazeModel {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.check()?;
        if vocab.words.len() < 3 || vocab.categories.is_empty() || vocab.feature_dim == 0 {
            return Err(AutodiffError::Config("vocabularies must be non-empty".into()));
        }
        let c = config.resolved();
        let mut rng = StdRng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let cells = c.grid.0 * c.grid.1;

        nn::define_linear(&mut s, &mut rng, "vis.proj", vocab.feature_dim, c.d_vis_stub)?;
        s.insert("vis.pos", init::normal(&mut rng, &[cells, c.d_vis_stub], 0.02))?;

        s.insert("lang.embed", init::normal(&mut rng, &[vocab.words.len(), c.d_lang_stub], 0.02))?;
        s.insert("lang.pos", init::normal(&mut rng, &[c.l_lang, c.d_lang_stub], 0.02))?;
        nn::define_encoder_layer(&mut s, &mut rng, "lang.enc", c.d_lang_stub, 2 * c.d_lang_stub)?;

        nn::define_linear(&mut s, &mut rng, "vl.vis_proj", c.d_vis_stub, c.d)?;
        nn::define_linear(&mut s, &mut rng, "vl.lang_proj", c.d_lang_stub, c.d)?;
        s.insert("vl.bbox_token", init::normal(&mut rng, &[1, c.d], 0.02))?;
        s.insert("vl.tgt_token", init::normal(&mut rng, &[1, c.d], 0.02))?;
        for i in 0..c.n_enc_layers {
            nn::define_encoder_layer(&mut s, &mut rng, &format!("vl.enc{i}"), c.d, c.d_ff)?;
        }
        nn::define_linear(&mut s, &mut rng, "vl.bbox_head", c.d, 4)?;
        nn::define_linear(&mut s, &mut rng, "vl.tgt_head", c.d, vocab.categories.len())?;

        nn::define_linear(&mut s, &mut rng, "ctx.proj", 4 * c.d, c.d)?;
        s.insert("dec.seg_ctxt", init::normal(&mut rng, &[1, c.d], 0.02))?;
        s.insert("dec.seg_curr", init::normal(&mut rng, &[1, c.d], 0.02))?;
        s.insert("dec.queries", init::normal(&mut rng, &[c.l_p, c.d], 0.02))?;
        for i in 0..c.n_dec_layers {
            nn::define_decoder_layer(&mut s, &mut rng, &format!("dec.layer{i}"), c.d, c.d_ff)?;
        }

        nn::define_linear(&mut s, &mut rng, "head.tok1", c.d, c.d)?;
        nn::define_linear(&mut s, &mut rng, "head.tok2", c.d, 3)?;
        for h in ["head.x_mu", "head.y_mu", "head.x_lv", "head.y_lv", "head.d_mu", "head.d_lv"] {
            nn::define_linear(&mut s, &mut rng, h, c.d, 1)?;
        }
        Ok(Self { config, vocab, params: s })
    }

    pub fn save<W1: Write, W2: Write>(&self, config_out: W1, checkpoint: W2, run_seed: u64) -> Result<()> {
        let file = ModelFile { config: self.config.clone(), vocab: self.vocab.clone() };
        serde_json::to_writer_pretty(config_out, &file)
            .map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        self.params.save_checkpoint(checkpoint, run_seed)
    }

    /// Loads a model; the checkpoint must hold exactly the parameters the
    /// config would create, with the same shapes.
    pub fn load<R1: std::io::Read, R2: BufRead>(config_in: R1, checkpoint: R2) -> Result<(Self, u64)> {
        let file: ModelFile =
            serde_json::from_reader(config_in).map_err(|e| AutodiffError::Config(e.to_string()))?;
        let (params, seed) = ParamStore::load_checkpoint(checkpoint)?;
        let template = Self::new(file.config.clone(), file.vocab.clone(), 0)?;
        let expected: Vec<(&str, &[usize])> = template.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let got: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != got {
            return Err(AutodiffError::Checkpoint("parameters do not match the model config".into()));
        }
        Ok((Self { config: file.config, vocab: file.vocab, params }, seed))
    }
}

/// Token indices for comprehension stage `j` plus the validity mask
/// (`false` on padding). Stage 0 has heard nothing, stage `L + 1` marks the
/// end of the utterance with a second EOT.
pub fn tokenize_prefix(words: &[usize], j: usize, l_lang: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    let l = words.len();
    if j > l + 1 {
        return Err(AutodiffError::Contract(format!("stage {j} beyond {} words + 1", l)));
    }
    if l + 3 > l_lang {
        return Err(AutodiffError::Contract(format!(
            "{l} words do not fit l_lang = {l_lang}"
        )));
    }
    let mut t = vec![BOT];
    t.extend_from_slice(&words[..j.min(l)]);
    t.push(EOT);
    if j == l + 1 {
        t.push(EOT);
    }
    let mut mask = vec![true; t.len()];
    mask.resize(l_lang, false);
    t.resize(l_lang, PAD);
    Ok((t, mask))
}

fn constant<T: Real>(g: &mut Graph<'_, T>, rows: usize, cols: usize, data: impl IntoIterator<Item = f64>) -> Result<Var> {
    g.constant(Tensor::matrix(rows, cols, data.into_iter().map(T::of).collect())?)
}

/// `cells × d_vis` grid embedding: per-cell linear projection plus a
/// learned position embedding.
pub fn encode_visual<T: Real>(g: &mut Graph<'_, T>, cfg: &ModelConfig, grid: &FeatureGrid) -> Result<Var> {
    let c = cfg.resolved();
    if (grid.rows, grid.cols) != c.grid {
        return Err(AutodiffError::shape(
            "encode_visual",
            format!("grid {}×{} but config {}×{}", grid.rows, grid.cols, c.grid.0, c.grid.1),
        ));
    }
    let x = constant(g, grid.rows * grid.cols, grid.channels, grid.cell_major().into_iter().map(f64::from))?;
    let h = linear(g, x, "vis.proj")?;
    let pos = g.param("vis.pos")?;
    g.add(h, pos)
}

/// `l_lang × d_lang` contextual token embeddings.
pub fn encode_language<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    tokens: &[usize],
    mask: &[bool],
) -> Result<Var> {
    let c = cfg.resolved();
    if tokens.len() != c.l_lang || mask.len() != c.l_lang {
        return Err(AutodiffError::shape("encode_language", format!("{} tokens", tokens.len())));
    }
    let table = g.param("lang.embed")?;
    let e = g.gather_rows(table, tokens)?;
    let pos = g.param("lang.pos")?;
    let x = g.add(e, pos)?;
    nn::encoder_layer(g, x, "lang.enc", c.lang_heads(), Some(mask), c.dropout_enc)
}

#[derive(Clone, Debug)]
pub struct VlState {
    /// `(2 + h·w + l_lang) × d`: BBOX, TGT, grid cells, language tokens.
    pub f_vlg: Var,
    /// `1 × 4` normalized `(x, y, w, h)` in (0, 1).
    pub bbox: Var,
    /// `1 × C` category distribution.
    pub tgt_dist: Var,
    /// Key mask over `f_vlg` rows (language padding is `false`).
    pub mask: Vec<bool>,
}

pub fn encode_visuolinguistic<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    g_vis: Var,
    g_lang: Var,
    lang_mask: &[bool],
) -> Result<VlState> {
    let c = cfg.resolved();
    let v = linear(g, g_vis, "vl.vis_proj")?;
    let l = linear(g, g_lang, "vl.lang_proj")?;
    let bbox_tok = g.param("vl.bbox_token")?;
    let tgt_tok = g.param("vl.tgt_token")?;
    let mut x = g.concat_rows(&[bbox_tok, tgt_tok, v, l])?;
    let mut mask = vec![true; 2 + g.value(v).rows()];
    mask.extend_from_slice(lang_mask);
    if mask.len() != c.vl_len() {
        return Err(AutodiffError::shape("encode_visuolinguistic", format!("{} rows", mask.len())));
    }
    for i in 0..c.n_enc_layers {
        x = nn::encoder_layer(g, x, &format!("vl.enc{i}"), c.n_heads, Some(&mask), c.dropout_enc)?;
    }
    let b = g.slice_rows(x, 0, 1)?;
    let b = g.dropout(b, c.dropout_ground)?;
    let b = linear(g, b, "vl.bbox_head")?;
    let bbox = g.sigmoid(b)?;
    let t = g.slice_rows(x, 1, 1)?;
    let t = g.dropout(t, c.dropout_ground)?;
    let t = linear(g, t, "vl.tgt_head")?;
    let tgt_dist = g.softmax_rows(t)?;
    Ok(VlState { f_vlg: x, bbox, tgt_dist, mask })
}

/// Record-level encoding for stage `j`: tokenization, both stubs and the
/// visuo-linguistic encoder.
pub fn encode_stage<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    vocab: &Vocab,
    record: &TrialRecord,
    j: usize,
) -> Result<VlState> {
    let c = cfg.resolved();
    let words = vocab.word_indices(&record.words)?;
    let (tokens, mask) = tokenize_prefix(&words, j, c.l_lang)?;
    let vis = encode_visual(g, &c, &record.features)?;
    let lang = encode_language(g, &c, &tokens, &mask)?;
    encode_visuolinguistic(g, &c, vis, lang, &mask)
}

/// 1D sinusoidal encoding of `pos` with `dim` interleaved sin/cos entries.
pub fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|k| {
            let freq = SINUSOID_BASE.powf(-((k / 2 * 2) as f64) / dim as f64);
            if k % 2 == 0 {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct FixationContext {
    /// `L_C × d`; rows past the history are zero.
    pub values: Var,
    pub valid: Vec<bool>,
}

impl FixationContext {
    pub fn len(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Encodes the fixations made before stage `j`, keeping the most recent
/// `L_C` of them.
pub fn encode_fixation_context<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    history: &[Fixation],
    j: usize,
) -> Result<FixationContext> {
    let c = cfg.resolved();
    debug_assert!(history.iter().all(|f| f.pack_index < j), "history reaches stage {j}");
    let kept = &history[history.len().saturating_sub(c.l_c)..];
    let k = kept.len();
    let mut valid = vec![true; k];
    valid.resize(c.l_c, false);
    if k == 0 {
        let values = constant(g, c.l_c, c.d, std::iter::repeat_n(0.0, c.l_c * c.d))?;
        return Ok(FixationContext { values, valid });
    }
    let feats: Vec<f64> = kept
        .iter()
        .flat_map(|f| {
            let mut v = sinusoid(f.x as f64, c.d);
            v.extend(sinusoid(f.y as f64, c.d));
            v.extend(sinusoid(f.pack_index as f64, c.d));
            v.extend(sinusoid(f.order as f64, c.d));
            v
        })
        .collect();
    let x = constant(g, k, 4 * c.d, feats)?;
    let mut values = linear(g, x, "ctx.proj")?;
    if k < c.l_c {
        let pad = constant(g, c.l_c - k, c.d, std::iter::repeat_n(0.0, (c.l_c - k) * c.d))?;
        values = g.concat_rows(&[values, pad])?;
    }
    Ok(FixationContext { values, valid })
}

/// `L_P × d` pack features. Invalid context rows are dropped before
/// decoding: they are masked as keys and their own outputs are discarded,
/// so the result is the same as decoding the padded sequence.
pub fn decode_pack<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    ctx: &FixationContext,
    vl: &VlState,
) -> Result<Var> {
    let c = cfg.resolved();
    let k = ctx.len();
    if ctx.valid[..k].iter().any(|v| !v) || ctx.valid[k..].iter().any(|&v| v) {
        return Err(AutodiffError::Contract("context validity must be a prefix".into()));
    }
    let q = g.param("dec.queries")?;
    let seg_curr = g.param("dec.seg_curr")?;
    let q = g.add_row(q, seg_curr)?;
    let mut x = if k == 0 {
        q
    } else {
        let cx = g.slice_rows(ctx.values, 0, k)?;
        let seg = g.param("dec.seg_ctxt")?;
        let cx = g.add_row(cx, seg)?;
        g.concat_rows(&[cx, q])?
    };
    for i in 0..c.n_dec_layers {
        x = nn::decoder_layer(
            g,
            x,
            vl.f_vlg,
            &format!("dec.layer{i}"),
            c.n_heads,
            None,
            Some(&vl.mask),
            c.dropout_dec,
        )?;
    }
    g.slice_rows(x, k, c.l_p)
}

/// How predicted locations and durations are read out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Readout {
    /// Differentiable reparameterized samples `μ + σ·ε` for training.
    Teacher,
    /// Reparameterized samples, clamped to the image and duration floor.
    Sample,
    /// The means, clamped like samples.
    Mean,
}

#[derive(Clone, Debug)]
pub struct PackPrediction {
    /// `L_P × 3` over FIX, PAD, EOS.
    pub token_probs: Var,
    /// `L_P × 2` pixels.
    pub loc_mean: Var,
    pub loc_logvar: Var,
    /// `L_P × 1` seconds.
    pub dur_mean: Var,
    pub dur_logvar: Var,
    /// `L_P × 3` rows `(x, y, seconds)`.
    pub sampled: Var,
}

impl PackPrediction {
    pub fn sampled_loc<T: Real>(&self, g: &mut Graph<'_, T>) -> Result<Var> {
        g.slice_cols(self.sampled, 0, 2)
    }

    pub fn sampled_dur<T: Real>(&self, g: &mut Graph<'_, T>) -> Result<Var> {
        g.slice_cols(self.sampled, 2, 1)
    }
}

fn head<T: Real>(g: &mut Graph<'_, T>, x: Var, name: &str) -> Result<Var> {
    linear(g, x, &format!("head.{name}"))
}

/// Token, location and duration heads on the pack features.
pub fn predict_fixations<T: Real, R: Rng>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    f_pack: Var,
    image: ImageSize,
    mode: Readout,
    rng: &mut R,
) -> Result<PackPrediction> {
    let c = cfg.resolved();
    let n = g.value(f_pack).rows();
    let x = g.dropout(f_pack, c.dropout_heads)?;

    let t = head(g, x, "tok1")?;
    let t = g.gelu(t)?;
    let t = head(g, t, "tok2")?;
    let token_probs = g.softmax_rows(t)?;

    let (w, h) = (image.width as f64, image.height as f64);
    let xm = head(g, x, "x_mu")?;
    let ym = head(g, x, "y_mu")?;
    let m = g.concat_cols(&[xm, ym])?;
    let m = g.sigmoid(m)?;
    let dims = constant(g, 2, 2, [w, 0.0, 0.0, h])?;
    let loc_mean = g.matmul(m, dims)?;
    let xl = head(g, x, "x_lv")?;
    let yl = head(g, x, "y_lv")?;
    let lv = g.concat_cols(&[xl, yl])?;
    // Initial spread of about 1/32 of each image side.
    let offs = constant(g, 1, 2, [(w * w / 1024.0).ln(), (h * h / 1024.0).ln()])?;
    let loc_logvar = g.add_row(lv, offs)?;

    let dm = head(g, x, "d_mu")?;
    let dur_mean = g.add_scalar(dm, DURATION_OFFSET_S)?;
    let dl = head(g, x, "d_lv")?;
    let dur_logvar = g.add_scalar(dl, DURATION_LOGVAR_OFFSET)?;

    let mean = g.concat_cols(&[loc_mean, dur_mean])?;
    let logvar = g.concat_cols(&[loc_logvar, dur_logvar])?;
    let sampled = match mode {
        Readout::Teacher => {
            let half = g.scale(logvar, 0.5)?;
            let sd = g.exp(half)?;
            let eps = constant(g, n, 3, (0..3 * n).map(|_| StandardNormal.sample(rng)))?;
            let noise = g.mul(sd, eps)?;
            g.add(mean, noise)?
        }
        Readout::Sample | Readout::Mean => {
            let mu = g.value(mean).clone();
            let lv = g.value(logvar).clone();
            let vals: Vec<f64> = (0..3 * n)
                .map(|i| {
                    let mut v = mu.data()[i].as_f64();
                    if mode == Readout::Sample {
                        let e: f64 = StandardNormal.sample(rng);
                        v += (0.5 * lv.data()[i].as_f64()).exp() * e;
                    }
                    clamp_sample(i % 3, v, image)
                })
                .collect();
            constant(g, n, 3, vals)?
        }
    };
    Ok(PackPrediction { token_probs, loc_mean, loc_logvar, dur_mean, dur_logvar, sampled })
}

fn clamp_sample(col: usize, v: f64, image: ImageSize) -> f64 {
    let v = if v.is_nan() { 0.0 } else { v };
    match col {
        0 => v.clamp(0.0, image.width as f64 - 1.0),
        1 => v.clamp(0.0, image.height as f64 - 1.0),
        _ => v.clamp(MIN_SAMPLED_DURATION_S, MAX_SAMPLED_DURATION_S),
    }
}

/// Everything computed for one pack: stage encoding, context, decoder and
/// heads.
pub fn forward_pack<T: Real, R: Rng>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    vl: &VlState,
    history: &[Fixation],
    j: usize,
    image: ImageSize,
    mode: Readout,
    rng: &mut R,
) -> Result<PackPrediction> {
    let ctx = encode_fixation_context(g, cfg, history, j)?;
    let f = decode_pack(g, cfg, &ctx, vl)?;
    predict_fixations(g, cfg, f, image, mode, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;
    use crate::data::{synthesize_corpus, SynthConfig};

    fn small() -> (GazeModel, Corpus) {
        let corpus = synthesize_corpus(&SynthConfig { n_records: 4, seed: 3, ..Default::default() }).unwrap();
        let cfg = ModelConfig { n_heads: 4, ..ModelConfig::toy() };
        (GazeModel::new(cfg, Vocab::of(&corpus), 9).unwrap(), corpus)
    }

    #[test]
    fn tokenizer_rules() {
        let w = [10, 11, 12, 13];
        let (t, m) = tokenize_prefix(&w, 0, 32).unwrap();
        assert_eq!(&t[..3], &[BOT, EOT, PAD]);
        assert_eq!(m.iter().filter(|&&v| v).count(), 2);
        let (t, _) = tokenize_prefix(&w, 4, 32).unwrap();
        assert_eq!(&t[..7], &[BOT, 10, 11, 12, 13, EOT, PAD]);
        let (t, _) = tokenize_prefix(&w, 5, 32).unwrap();
        assert_eq!(&t[..8], &[BOT, 10, 11, 12, 13, EOT, EOT, PAD]);
        assert!(tokenize_prefix(&w, 6, 32).is_err());
        assert!(tokenize_prefix(&w, 1, 6).is_err());
        for j in 1..3 {
            let (a, ma) = tokenize_prefix(&w, j, 32).unwrap();
            let (b, _) = tokenize_prefix(&w, j + 1, 32).unwrap();
            let n = ma.iter().filter(|&&v| v).count() - 1;
            assert_eq!(&a[..n], &b[..n]);
        }
    }

    #[test]
    fn sinusoid_at_zero() {
        assert_eq!(sinusoid(0.0, 6), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn shapes_and_normalization() {
        let (m, corpus) = small();
        let r = &corpus.records[0];
        let mut g = Graph::with_params(&m.params, Mode::Eval);
        let vl = encode_stage(&mut g, &m.config, &m.vocab, r, 1).unwrap();
        assert_eq!(g.shape(vl.f_vlg), &[214, 64]);
        let s: f32 = g.value(vl.tgt_dist).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
        assert!(g.value(vl.bbox).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let mut rng = StdRng::seed_from_u64(0);
        let p = forward_pack(&mut g, &m.config, &vl, &[], 1, r.image, Readout::Mean, &mut rng).unwrap();
        assert_eq!(g.shape(p.token_probs), &[6, 3]);
        for row in 0..6 {
            let s: f32 = g.value(p.token_probs).row(row).iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        for row in 0..6 {
            let v = g.value(p.sampled).row(row);
            assert!(r.image.contains(v[0], v[1]) && (MIN_SAMPLED_DURATION_S - 1e-7..=MAX_SAMPLED_DURATION_S).contains(&(v[2] as f64)));
        }
    }

    #[test]
    fn visual_stub_is_local() {
        let (m, corpus) = small();
        let c = m.config.resolved();
        let mut g = Graph::with_params(&m.params, Mode::Eval);
        let zero = FeatureGrid::zeros(corpus.feature_dim, 10, 18);
        let out = encode_visual(&mut g, &c, &zero).unwrap();
        let bias = m.params.get("vis.proj.b").unwrap().data().to_vec();
        let pos = m.params.get("vis.pos").unwrap();
        for (i, v) in g.value(out).data().iter().enumerate() {
            assert!((v - pos.data()[i] - bias[i % 64]).abs() < 1e-7);
        }
        assert!(encode_visual(&mut g, &c, &FeatureGrid::zeros(corpus.feature_dim, 9, 18)).is_err());
    }

    #[test]
    fn masked_context_and_memory_sensitivity() {
        let (m, corpus) = small();
        let c = m.config.resolved();
        let r = &corpus.records[0];
        let mut g = Graph::with_params(&m.params, Mode::Eval);
        let vl = encode_stage(&mut g, &m.config, &m.vocab, r, 2).unwrap();
        let hist = [Fixation { x: 100.0, y: 50.0, duration_ms: 200, pack_index: 0, order: 0 }];
        let ctx = encode_fixation_context(&mut g, &c, &hist, 1).unwrap();
        assert_eq!(ctx.valid.iter().filter(|&&v| v).count(), 1);
        let a = decode_pack(&mut g, &c, &ctx, &vl).unwrap();
        // Garbage in the padded rows must not leak into the output.
        let junk = g.constant(Tensor::full(&[36, 64], 5.0)).unwrap();
        let head = g.slice_rows(ctx.values, 0, 1).unwrap();
        let tail = g.slice_rows(junk, 1, 35).unwrap();
        let noisy = FixationContext { values: g.concat_rows(&[head, tail]).unwrap(), valid: ctx.valid.clone() };
        let b = decode_pack(&mut g, &c, &noisy, &vl).unwrap();
        assert_eq!(g.value(a), g.value(b));
        let vl2 = encode_stage(&mut g, &m.config, &m.vocab, r, 0).unwrap();
        let d = decode_pack(&mut g, &c, &ctx, &vl2).unwrap();
        assert_ne!(g.value(a), g.value(d));
        let empty = encode_fixation_context(&mut g, &c, &[], 0).unwrap();
        assert!(g.value(empty.values).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn word_order_matters() {
        let (m, corpus) = small();
        let mut r = corpus.records[0].clone();
        let mut g = Graph::with_params(&m.params, Mode::Eval);
        let l = r.words.len();
        let a = encode_stage(&mut g, &m.config, &m.vocab, &r, l).unwrap();
        r.words.swap(0, l - 1);
        let b = encode_stage(&mut g, &m.config, &m.vocab, &r, l).unwrap();
        assert_ne!(g.value(a.f_vlg), g.value(b.f_vlg));
    }

    #[test]
    fn zero_variance_sample_is_mean() {
        let (mut m, corpus) = small();
        for name in ["head.x_lv.b", "head.y_lv.b", "head.d_lv.b"] {
            m.params.get_mut(name).unwrap().data_mut().fill(-1e4);
        }
        let r = &corpus.records[1];
        let mut g = Graph::with_params(&m.params, Mode::Eval);
        let vl = encode_stage(&mut g, &m.config, &m.vocab, r, 0).unwrap();
        let mut rng = StdRng::seed_from_u64(1);
        let s = forward_pack(&mut g, &m.config, &vl, &[], 0, r.image, Readout::Sample, &mut rng).unwrap();
        let mu = forward_pack(&mut g, &m.config, &vl, &[], 0, r.image, Readout::Mean, &mut rng).unwrap();
        assert_eq!(g.value(s.sampled), g.value(mu.sampled));
    }

    #[test]
    fn save_load_round_trip() {
        let (m, _) = small();
        let (mut cfg, mut ck) = (Vec::new(), Vec::new());
        m.save(&mut cfg, &mut ck, 5).unwrap();
        let (back, seed) = GazeModel::load(cfg.as_slice(), ck.as_slice()).unwrap();
        assert_eq!((back, seed), (m, 5));
    }
}
