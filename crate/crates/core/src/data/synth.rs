//! Scripted toy trials.
//!
//! Each image holds a few flat-colored shapes on a cell-aligned layout. The
//! expression names the target's color and shape and, when an identical twin
//! is present, its side ("the red star on the left"). Scripted subjects keep
//! their gaze at the start point until the prefix heard so far singles the
//! target out, then move onto it and stop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, DataError, RESERVED_WORDS};
use crate::domain::{
    BBox, FeatureGrid, HumanScanpath, ImageSize, Pack, Scanpath, TrialRecord,
};

pub const SHAPE_NAMES: [&str; 18] = [
    "circle", "square", "triangle", "star", "diamond", "heart", "cross", "ring", "hexagon",
    "pentagon", "arrow", "moon", "oval", "kite", "bolt", "drop", "leaf", "cube",
];
pub const COLOR_NAMES: [&str; 4] = ["red", "green", "blue", "yellow"];
const FILLER_WORDS: [&str; 4] = ["the", "on", "left", "right"];
const ONSET_STEP_MS: u32 = 300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OraclePolicy {
    /// Null packs until the target is identifiable, then 1–3 fixations onto it.
    WaitThenGo,
    /// Looks at objects matching the prefix so far, then onto the target.
    Scan,
    /// Null packs, then a single fixation on the target.
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_records: usize,
    pub n_categories: usize,
    /// Inclusive range of objects per image.
    pub n_objects: (usize, usize),
    /// Inclusive range of scripted subjects per record.
    pub n_subjects: (usize, usize),
    pub seed: u64,
    pub oracle_policy: OraclePolicy,
    pub image_w: u32,
    pub image_h: u32,
    /// `(rows, cols)`.
    pub grid: (usize, usize),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_records: 200,
            n_categories: SHAPE_NAMES.len(),
            n_objects: (2, 5),
            n_subjects: (1, 3),
            seed: 0,
            oracle_policy: OraclePolicy::WaitThenGo,
            image_w: 720,
            image_h: 400,
            grid: (10, 18),
        }
    }
}

impl SynthConfig {
    pub fn feature_dim(&self) -> usize {
        self.n_categories + COLOR_NAMES.len() + 3
    }

    fn check(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if self.n_records == 0 {
            return bad("n_records must be positive");
        }
        if self.n_categories == 0 || self.n_categories > SHAPE_NAMES.len() {
            return bad("n_categories must be in 1..=18");
        }
        let (lo, hi) = self.n_objects;
        if lo == 0 || lo > hi || hi > 8 {
            return bad("n_objects must be a non-empty range within 1..=8");
        }
        let (lo, hi) = self.n_subjects;
        if lo == 0 || lo > hi {
            return bad("n_subjects must be a non-empty range starting at 1 or more");
        }
        if self.grid.0 < 4 || self.grid.1 < 4 {
            return bad("grid must be at least 4×4");
        }
        if (self.image_w as usize) < self.grid.1 || (self.image_h as usize) < self.grid.0 {
            return bad("image must be at least one pixel per grid cell");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Object {
    category: usize,
    color: usize,
    bbox: BBox,
}

/// Object indices consistent with a prefix of the expression words.
fn candidates(objects: &[Object], words: &[String], cfg: &SynthConfig) -> Vec<usize> {
    let mut live: Vec<usize> = (0..objects.len()).collect();
    for w in words {
        if let Some(c) = COLOR_NAMES.iter().position(|n| n == w) {
            live.retain(|&i| objects[i].color == c);
        } else if let Some(s) = SHAPE_NAMES[..cfg.n_categories].iter().position(|n| n == w) {
            live.retain(|&i| objects[i].category == s);
        } else if w == "left" || w == "right" {
            let xs = live.iter().map(|&i| objects[i].bbox.center().0);
            let pick = if w == "left" {
                xs.fold(f32::INFINITY, f32::min)
            } else {
                xs.fold(f32::NEG_INFINITY, f32::max)
            };
            live.retain(|&i| objects[i].bbox.center().0 == pick);
        }
    }
    live
}

fn quantize(v: f32) -> f32 {
    (v * 4.0).round() / 4.0
}

struct Layout {
    image: ImageSize,
    rows: usize,
    cols: usize,
}

impl Layout {
    fn cell_w(&self) -> f32 {
        self.image.width as f32 / self.cols as f32
    }

    fn cell_h(&self) -> f32 {
        self.image.height as f32 / self.rows as f32
    }

    /// A free cell-aligned rectangle, or `None` after repeated collisions.
    /// Rectangles keep one free cell between each other.
    fn place(&self, rng: &mut ChaCha8Rng, taken: &[(usize, usize, usize, usize)]) -> Option<(usize, usize, usize, usize)> {
        for _ in 0..200 {
            let h = rng.random_range(2..=3usize.min(self.rows - 1));
            let w = rng.random_range(2..=3usize.min(self.cols - 1));
            let r0 = rng.random_range(0..=self.rows - h);
            let c0 = rng.random_range(0..=self.cols - w);
            let clear = taken.iter().all(|&(r, c, th, tw)| {
                r0 >= r + th + 1 || r >= r0 + h + 1 || c0 >= c + tw + 1 || c >= c0 + w + 1
            });
            if clear {
                return Some((r0, c0, h, w));
            }
        }
        None
    }

    fn bbox(&self, (r0, c0, h, w): (usize, usize, usize, usize)) -> BBox {
        BBox {
            x: c0 as f32 * self.cell_w(),
            y: r0 as f32 * self.cell_h(),
            w: w as f32 * self.cell_w(),
            h: h as f32 * self.cell_h(),
        }
    }

    fn clamp(&self, x: f32, y: f32) -> (f32, f32) {
        let max_x = self.image.width as f32 - 1.0;
        let max_y = self.image.height as f32 - 1.0;
        (quantize(x.clamp(0.0, max_x)), quantize(y.clamp(0.0, max_y)))
    }
}

fn duration(rng: &mut ChaCha8Rng) -> u32 {
    rng.random_range(15..=40u32) * 10
}

/// A point inside the central half of `b`.
fn point_in(rng: &mut ChaCha8Rng, b: &BBox) -> (f32, f32) {
    let (cx, cy) = b.center();
    let x = cx + rng.random_range(-0.25..=0.25f32) * b.w;
    let y = cy + rng.random_range(-0.25..=0.25f32) * b.h;
    (quantize(x), quantize(y))
}

/// Fixations from `start` to a landing point on the target; the last one is
/// inside the target box.
fn approach(
    rng: &mut ChaCha8Rng,
    layout: &Layout,
    start: (f32, f32),
    target: &BBox,
    steps: usize,
) -> Vec<(f32, f32, u32)> {
    let land = point_in(rng, target);
    let mut out = Vec::with_capacity(steps);
    for s in 1..steps {
        let t = s as f32 / steps as f32;
        let x = start.0 + t * (land.0 - start.0) + rng.random_range(-12.0..=12.0f32);
        let y = start.1 + t * (land.1 - start.1) + rng.random_range(-12.0..=12.0f32);
        let (x, y) = layout.clamp(x, y);
        out.push((x, y, duration(rng)));
    }
    out.push((land.0, land.1, duration(rng)));
    out
}

fn approach_steps(start: (f32, f32), target: &BBox) -> usize {
    let (cx, cy) = target.center();
    let d = (cx - start.0).hypot(cy - start.1);
    if d < 150.0 {
        1
    } else if d < 300.0 {
        2
    } else {
        3
    }
}

fn record(cfg: &SynthConfig, index: usize) -> TrialRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let layout = Layout {
        image: ImageSize { width: cfg.image_w, height: cfg.image_h },
        rows: cfg.grid.0,
        cols: cfg.grid.1,
    };

    let n_obj = rng.random_range(cfg.n_objects.0..=cfg.n_objects.1);
    let target_cat = rng.random_range(0..cfg.n_categories);
    let target_color = rng.random_range(0..COLOR_NAMES.len());
    // 0: color alone identifies, 1: shape needed, 2: side needed.
    let mut scenario = if n_obj >= 2 { rng.random_range(0..3) } else { 0 };
    if scenario == 1 && cfg.n_categories < 2 {
        scenario = 2;
    }

    let mut attrs = vec![(target_cat, target_color)];
    for k in 1..n_obj {
        let pair = match (scenario, k) {
            (1, 1) => {
                let mut c = rng.random_range(0..cfg.n_categories - 1);
                if c >= target_cat {
                    c += 1;
                }
                (c, target_color)
            }
            (2, 1) => (target_cat, target_color),
            _ => loop {
                let c = rng.random_range(0..cfg.n_categories);
                let col = rng.random_range(0..COLOR_NAMES.len());
                let clash = if scenario == 0 {
                    col == target_color
                } else {
                    (c, col) == (target_cat, target_color)
                };
                if !clash {
                    break (c, col);
                }
            },
        };
        attrs.push(pair);
    }

    let mut taken = Vec::new();
    let mut objects: Vec<Object> = Vec::new();
    for (k, &(category, color)) in attrs.iter().enumerate() {
        let mut slot = layout.place(&mut rng, &taken);
        // An identical twin must sit at a different horizontal position.
        if scenario == 2 && k == 1 {
            let tx = objects[0].bbox.center().0;
            let same_column = |slot: Option<_>| slot.is_some_and(|s| layout.bbox(s).center().0 == tx);
            for _ in 0..50 {
                if !same_column(slot) {
                    break;
                }
                slot = layout.place(&mut rng, &taken);
            }
            if same_column(slot) {
                slot = None;
            }
        }
        let Some(s) = slot else {
            if k == 0 {
                unreachable!("an empty grid always fits the target");
            }
            continue;
        };
        taken.push(s);
        objects.push(Object { category, color, bbox: layout.bbox(s) });
    }

    let target = objects[0];
    let mut words: Vec<String> = Vec::new();
    if rng.random_bool(0.5) {
        words.push("the".into());
    }
    words.push(COLOR_NAMES[target.color].into());
    words.push(SHAPE_NAMES[target.category].into());
    if candidates(&objects, &words, cfg).len() > 1 {
        let twin_x = objects
            .iter()
            .skip(1)
            .find(|o| (o.category, o.color) == (target.category, target.color))
            .map(|o| o.bbox.center().0)
            .expect("ambiguity comes from a twin");
        let side = if target.bbox.center().0 < twin_x { "left" } else { "right" };
        words.extend(["on", "the", side].map(String::from));
    }
    let n_words = words.len();
    let decisive = (0..=n_words)
        .find(|&j| candidates(&objects, &words[..j], cfg) == [0])
        .expect("the full expression identifies the target");

    let mut features = FeatureGrid::zeros(cfg.feature_dim(), layout.rows, layout.cols);
    let color_base = cfg.n_categories;
    let pos_base = color_base + COLOR_NAMES.len();
    let w = layout.image.width as f32;
    let h = layout.image.height as f32;
    for (o, &(r0, c0, rh, cw)) in objects.iter().zip(&taken) {
        let (cx, cy) = o.bbox.center();
        for r in r0..r0 + rh {
            for c in c0..c0 + cw {
                features.set(o.category, r, c, 1.0);
                features.set(color_base + o.color, r, c, 1.0);
                features.set(pos_base, r, c, cx / w);
                features.set(pos_base + 1, r, c, cy / h);
                features.set(pos_base + 2, r, c, 1.0);
            }
        }
    }

    let n_subjects = rng.random_range(cfg.n_subjects.0..=cfg.n_subjects.1);
    let center = layout.image.center();
    let steps = approach_steps(center, &target.bbox);
    let mut human_scanpaths = Vec::with_capacity(n_subjects);
    for s in 0..n_subjects {
        let mut packs = Vec::with_capacity(decisive + 2);
        let mut pos = center;
        for j in 0..decisive {
            let pack = match cfg.oracle_policy {
                OraclePolicy::Scan => {
                    let live = candidates(&objects, &words[..j], cfg);
                    let pick = live[rng.random_range(0..live.len())];
                    let (x, y) = point_in(&mut rng, &objects[pick].bbox);
                    pos = (x, y);
                    Pack::normal(j, &[(x, y, duration(&mut rng))])
                }
                OraclePolicy::WaitThenGo | OraclePolicy::Direct => Pack::null(j),
            };
            packs.push(pack);
        }
        let fixations = match cfg.oracle_policy {
            OraclePolicy::WaitThenGo => approach(&mut rng, &layout, pos, &target.bbox, steps),
            OraclePolicy::Scan => {
                let steps = approach_steps(pos, &target.bbox);
                approach(&mut rng, &layout, pos, &target.bbox, steps)
            }
            OraclePolicy::Direct => approach(&mut rng, &layout, pos, &target.bbox, 1),
        };
        packs.push(Pack::normal(decisive, &fixations));
        packs.push(Pack::terminal(decisive + 1));
        human_scanpaths.push(HumanScanpath {
            subject: format!("s{s}"),
            scanpath: Scanpath::from_packs(packs, n_words),
        });
    }

    TrialRecord {
        trial_id: format!("syn{index:05}"),
        image: layout.image,
        features,
        word_onsets_ms: (1..=n_words as u32).map(|i| i * ONSET_STEP_MS).collect(),
        words,
        target_bbox: target.bbox,
        target_category: SHAPE_NAMES[target.category].into(),
        human_scanpaths,
    }
}

/// Generates `cfg.n_records` trials; identical configs give identical corpora
/// and record `i` does not depend on `n_records`.
pub fn synthesize_corpus(cfg: &SynthConfig) -> Result<Corpus, DataError> {
    cfg.check()?;
    let mut word_vocab: Vec<String> = RESERVED_WORDS.iter().map(|s| s.to_string()).collect();
    word_vocab.extend(FILLER_WORDS.iter().map(|s| s.to_string()));
    word_vocab.extend(COLOR_NAMES.iter().map(|s| s.to_string()));
    word_vocab.extend(SHAPE_NAMES[..cfg.n_categories].iter().map(|s| s.to_string()));
    Ok(Corpus {
        records: (0..cfg.n_records).map(|i| record(cfg, i)).collect(),
        category_vocab: SHAPE_NAMES[..cfg.n_categories].iter().map(|s| s.to_string()).collect(),
        word_vocab,
        grid_shape: cfg.grid,
        feature_dim: cfg.feature_dim(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::write_corpus;
    use crate::domain::{validate_scanpath, PackKind};

    fn bytes(c: &Corpus) -> Vec<u8> {
        let mut b = Vec::new();
        write_corpus(c, &mut b).unwrap();
        b
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SynthConfig { n_records: 25, seed: 1, ..SynthConfig::default() };
        assert_eq!(bytes(&synthesize_corpus(&cfg).unwrap()), bytes(&synthesize_corpus(&cfg).unwrap()));
        let other = SynthConfig { seed: 2, ..cfg.clone() };
        assert_ne!(bytes(&synthesize_corpus(&cfg).unwrap()), bytes(&synthesize_corpus(&other).unwrap()));
    }

    #[test]
    fn every_policy_yields_valid_records_ending_on_target() {
        for policy in [OraclePolicy::WaitThenGo, OraclePolicy::Scan, OraclePolicy::Direct] {
            let cfg = SynthConfig { n_records: 150, seed: 9, oracle_policy: policy, ..SynthConfig::default() };
            let c = synthesize_corpus(&cfg).unwrap();
            for r in &c.records {
                assert!(r.validate().is_valid(), "{}: {}", r.trial_id, r.validate());
                for h in &r.human_scanpaths {
                    assert!(validate_scanpath(&h.scanpath, r).is_valid());
                    assert!(h.scanpath.terminated);
                    let last = *h.scanpath.flatten().last().unwrap();
                    assert!(r.target_bbox.contains(last.x, last.y));
                }
            }
        }
    }

    #[test]
    fn wait_then_go_is_null_before_decisive_word() {
        let cfg = SynthConfig { n_records: 100, seed: 3, ..SynthConfig::default() };
        let c = synthesize_corpus(&cfg).unwrap();
        for r in &c.records {
            let words: Vec<String> = r.words.clone();
            for h in &r.human_scanpaths {
                let first = h.scanpath.packs.iter().position(|p| p.kind == PackKind::Normal).unwrap();
                for j in 0..first {
                    assert_eq!(h.scanpath.pack_at(j).unwrap().kind, PackKind::Null);
                }
                // The prefix before the fixation pack is still ambiguous.
                assert!(first >= 1, "{words:?}");
            }
        }
    }

    #[test]
    fn direct_policy_uses_one_fixation() {
        let cfg = SynthConfig { n_records: 40, oracle_policy: OraclePolicy::Direct, ..SynthConfig::default() };
        let c = synthesize_corpus(&cfg).unwrap();
        assert!(c.records.iter().all(|r| r.human_scanpaths.iter().all(|h| h.scanpath.num_fixations() == 1)));
    }

    #[test]
    fn empty_ranges_are_config_errors() {
        for cfg in [
            SynthConfig { n_records: 0, ..SynthConfig::default() },
            SynthConfig { n_objects: (3, 2), ..SynthConfig::default() },
            SynthConfig { n_subjects: (0, 0), ..SynthConfig::default() },
            SynthConfig { n_categories: 0, ..SynthConfig::default() },
        ] {
            assert!(matches!(synthesize_corpus(&cfg), Err(DataError::Config(_))));
        }
    }
}
