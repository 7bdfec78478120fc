//! Fixations, packs, scanpaths and trial records.
//!
//! A scanpath is a sequence of packs indexed by comprehension stage: pack 0
//! precedes the first word, pack `j` (1 ≤ j ≤ L) follows word `j`, and pack
//! `L + 1` follows the end of the expression. Image coordinates are pixels
//! with the origin at the top-left corner.

use std::fmt;

/// Fixations shorter than this are filtered from the corpus.
pub const MIN_FIXATION_MS: u32 = 60;
/// Default maximum number of fixations in one pack.
pub const DEFAULT_MAX_PACK_LEN: usize = 6;
pub const MIN_EXPRESSION_WORDS: usize = 2;
pub const MAX_EXPRESSION_WORDS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fixation {
    pub x: f32,
    pub y: f32,
    pub duration_ms: u32,
    /// Index of the pack (word stage) this fixation belongs to.
    pub pack_index: usize,
    /// Position within its pack, starting at 0.
    pub order: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PackKind {
    Normal,
    Null,
    Terminal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pack {
    pub kind: PackKind,
    pub word_index: usize,
    pub fixations: Vec<Fixation>,
}

impl Pack {
    /// A pack of fixations given as `(x, y, duration_ms)`; `pack_index` and
    /// `order` are filled in. An empty list yields a null pack.
    pub fn normal(word_index: usize, points: &[(f32, f32, u32)]) -> Self {
        if points.is_empty() {
            return Self::null(word_index);
        }
        let fixations = points
            .iter()
            .enumerate()
            .map(|(order, &(x, y, duration_ms))| Fixation {
                x,
                y,
                duration_ms,
                pack_index: word_index,
                order,
            })
            .collect();
        Self { kind: PackKind::Normal, word_index, fixations }
    }

    pub fn null(word_index: usize) -> Self {
        Self { kind: PackKind::Null, word_index, fixations: Vec::new() }
    }

    pub fn terminal(word_index: usize) -> Self {
        Self { kind: PackKind::Terminal, word_index, fixations: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.fixations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixations.is_empty()
    }

    pub fn is_normal(&self) -> bool {
        self.kind == PackKind::Normal
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scanpath {
    pub packs: Vec<Pack>,
    /// True iff the last pack is terminal or the last stage `L + 1` was reached.
    pub terminated: bool,
}

impl Scanpath {
    pub fn new(packs: Vec<Pack>, terminated: bool) -> Self {
        Self { packs, terminated }
    }

    /// Builds a scanpath and derives `terminated` from its packs for an
    /// expression of `n_words` words.
    pub fn from_packs(packs: Vec<Pack>, n_words: usize) -> Self {
        let terminated = packs.last().is_some_and(|p| {
            p.kind == PackKind::Terminal || p.word_index == n_words + 1
        });
        Self { packs, terminated }
    }

    /// All fixations of normal packs in word order.
    pub fn flatten(&self) -> Vec<Fixation> {
        self.packs
            .iter()
            .filter(|p| p.is_normal())
            .flat_map(|p| p.fixations.iter().copied())
            .collect()
    }

    /// The pack recorded for stage `j`, or `None` when the scanpath never
    /// reached that stage. Null and terminal packs are returned as packs.
    pub fn pack_at(&self, j: usize) -> Option<&Pack> {
        self.packs.get(j).filter(|p| p.word_index == j)
    }

    pub fn num_fixations(&self) -> usize {
        self.packs.iter().map(Pack::len).sum()
    }

    /// Number of packs before termination (terminal packs excluded).
    pub fn active_len(&self) -> usize {
        self.packs.iter().filter(|p| p.kind != PackKind::Terminal).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn contains(&self, x: f32, y: f32) -> bool {
        x >= self.x && x <= self.x + self.w && y >= self.y && y <= self.y + self.h
    }

    pub fn center(&self) -> (f32, f32) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Box parameters divided by the image width/height.
    pub fn normalized(&self, image: ImageSize) -> [f32; 4] {
        let (w, h) = (image.width as f32, image.height as f32);
        [self.x / w, self.y / h, self.w / w, self.h / h]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub fn contains(&self, x: f32, y: f32) -> bool {
        x.is_finite()
            && y.is_finite()
            && x >= 0.0
            && y >= 0.0
            && x < self.width as f32
            && y < self.height as f32
    }

    /// The point subjects fixate before a trial starts.
    pub fn center(&self) -> (f32, f32) {
        (self.width as f32 / 2.0, self.height as f32 / 2.0)
    }

    pub fn diagonal(&self) -> f32 {
        (self.width as f32).hypot(self.height as f32)
    }
}

/// Feature grid stored channel-major: `channels × rows × cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl FeatureGrid {
    pub fn zeros(channels: usize, rows: usize, cols: usize) -> Self {
        Self { channels, rows, cols, values: vec![0.0; channels * rows * cols] }
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.values[(channel * self.rows + row) * self.cols + col]
    }

    pub fn set(&mut self, channel: usize, row: usize, col: usize, v: f32) {
        self.values[(channel * self.rows + row) * self.cols + col] = v;
    }

    /// One row per cell (row-major cell order), one column per channel.
    pub fn cell_major(&self) -> Vec<f32> {
        let cells = self.rows * self.cols;
        let mut out = vec![0.0; cells * self.channels];
        for c in 0..self.channels {
            for cell in 0..cells {
                out[cell * self.channels + c] = self.values[c * cells + cell];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HumanScanpath {
    pub subject: String,
    pub scanpath: Scanpath,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub trial_id: String,
    pub image: ImageSize,
    pub features: FeatureGrid,
    pub words: Vec<String>,
    pub word_onsets_ms: Vec<u32>,
    pub target_bbox: BBox,
    pub target_category: String,
    pub human_scanpaths: Vec<HumanScanpath>,
}

impl TrialRecord {
    pub fn n_words(&self) -> usize {
        self.words.len()
    }

    /// Record-level invariants (expression length, onsets, target box).
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let n = self.words.len();
        if !(MIN_EXPRESSION_WORDS..=MAX_EXPRESSION_WORDS).contains(&n) {
            report.push(Violation::ExpressionLength { words: n });
        }
        if self.word_onsets_ms.len() != n {
            report.push(Violation::OnsetCount { onsets: self.word_onsets_ms.len(), words: n });
        }
        if self.word_onsets_ms.windows(2).any(|w| w[1] <= w[0]) {
            report.push(Violation::OnsetsNotIncreasing);
        }
        let b = self.target_bbox;
        let inside = b.w > 0.0
            && b.h > 0.0
            && b.x >= 0.0
            && b.y >= 0.0
            && b.x + b.w <= self.image.width as f32
            && b.y + b.h <= self.image.height as f32;
        if !inside {
            report.push(Violation::TargetBox);
        }
        let f = &self.features;
        if f.values.len() != f.channels * f.rows * f.cols {
            report.push(Violation::FeatureGridSize);
        }
        for h in &self.human_scanpaths {
            report.extend(validate_scanpath(&h.scanpath, self));
        }
        report
    }
}

/// Limits applied by [`validate_scanpath_with`].
#[derive(Clone, Copy, Debug)]
pub struct ValidationLimits {
    pub max_pack_len: usize,
    pub min_duration_ms: u32,
}

impl Default for ValidationLimits {
    fn default() -> Self {
        Self { max_pack_len: DEFAULT_MAX_PACK_LEN, min_duration_ms: MIN_FIXATION_MS }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    OutOfBounds { pack: usize, order: usize, x: f32, y: f32 },
    ShortFixation { pack: usize, order: usize, duration_ms: u32 },
    PackIndexMismatch { pack: usize, found: usize },
    OrderMismatch { pack: usize, expected: usize, found: usize },
    WordIndexSequence { position: usize, found: usize },
    WordIndexRange { pack: usize, max: usize },
    TerminalNotLast { pack: usize },
    EmptyNormalPack { pack: usize },
    FixationsInEmptyKind { pack: usize },
    PackTooLong { pack: usize, len: usize, max: usize },
    TerminationFlag { flagged: bool, derived: bool },
    ExpressionLength { words: usize },
    OnsetCount { onsets: usize, words: usize },
    OnsetsNotIncreasing,
    TargetBox,
    FeatureGridSize,
    UnknownWord { word: String },
    UnknownCategory { category: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::OutOfBounds { pack, order, x, y } => {
                write!(f, "fixation {pack}/{order} at ({x}, {y}) is outside the image")
            }
            Violation::ShortFixation { pack, order, duration_ms } => write!(
                f,
                "fixation {pack}/{order} lasts {duration_ms} ms, below {MIN_FIXATION_MS} ms"
            ),
            Violation::PackIndexMismatch { pack, found } => {
                write!(f, "fixation in pack {pack} carries pack index {found}")
            }
            Violation::OrderMismatch { pack, expected, found } => {
                write!(f, "pack {pack}: expected order {expected}, found {found}")
            }
            Violation::WordIndexSequence { position, found } => {
                write!(f, "pack at position {position} has word index {found}")
            }
            Violation::WordIndexRange { pack, max } => {
                write!(f, "pack index {pack} exceeds the last stage {max}")
            }
            Violation::TerminalNotLast { pack } => {
                write!(f, "terminal pack {pack} is followed by further packs")
            }
            Violation::EmptyNormalPack { pack } => write!(f, "normal pack {pack} is empty"),
            Violation::FixationsInEmptyKind { pack } => {
                write!(f, "null/terminal pack {pack} contains fixations")
            }
            Violation::PackTooLong { pack, len, max } => {
                write!(f, "pack {pack} holds {len} fixations, limit {max}")
            }
            Violation::TerminationFlag { flagged, derived } => {
                write!(f, "terminated flag is {flagged} but packs imply {derived}")
            }
            Violation::ExpressionLength { words } => {
                write!(f, "expression has {words} words, allowed {MIN_EXPRESSION_WORDS}..={MAX_EXPRESSION_WORDS}")
            }
            Violation::OnsetCount { onsets, words } => {
                write!(f, "{onsets} word onsets for {words} words")
            }
            Violation::OnsetsNotIncreasing => write!(f, "word onsets are not strictly increasing"),
            Violation::TargetBox => write!(f, "target box is empty or leaves the image"),
            Violation::FeatureGridSize => write!(f, "feature grid size does not match its shape"),
            Violation::UnknownWord { word } => write!(f, "word `{word}` is not in the vocabulary"),
            Violation::UnknownCategory { category } => {
                write!(f, "category `{category}` is not in the vocabulary")
            }
        }
    }
}

/// Every invariant violation found; empty means valid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn push(&mut self, v: Violation) {
        self.violations.push(v);
    }

    pub fn extend(&mut self, other: ValidationReport) {
        self.violations.extend(other.violations);
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

pub fn validate_scanpath(s: &Scanpath, t: &TrialRecord) -> ValidationReport {
    validate_scanpath_with(s, t, ValidationLimits::default())
}

pub fn validate_scanpath_with(
    s: &Scanpath,
    t: &TrialRecord,
    limits: ValidationLimits,
) -> ValidationReport {
    let mut r = ValidationReport::default();
    let last_stage = t.n_words() + 1;
    for (pos, pack) in s.packs.iter().enumerate() {
        let j = pack.word_index;
        if j != pos {
            r.push(Violation::WordIndexSequence { position: pos, found: j });
        }
        if j > last_stage {
            r.push(Violation::WordIndexRange { pack: j, max: last_stage });
        }
        if pack.kind == PackKind::Terminal && pos + 1 != s.packs.len() {
            r.push(Violation::TerminalNotLast { pack: j });
        }
        match pack.kind {
            PackKind::Normal if pack.fixations.is_empty() => {
                r.push(Violation::EmptyNormalPack { pack: j })
            }
            PackKind::Null | PackKind::Terminal if !pack.fixations.is_empty() => {
                r.push(Violation::FixationsInEmptyKind { pack: j })
            }
            _ => {}
        }
        if pack.fixations.len() > limits.max_pack_len {
            r.push(Violation::PackTooLong {
                pack: j,
                len: pack.fixations.len(),
                max: limits.max_pack_len,
            });
        }
        for (i, fx) in pack.fixations.iter().enumerate() {
            if !t.image.contains(fx.x, fx.y) {
                r.push(Violation::OutOfBounds { pack: j, order: fx.order, x: fx.x, y: fx.y });
            }
            if fx.duration_ms < limits.min_duration_ms {
                r.push(Violation::ShortFixation {
                    pack: j,
                    order: fx.order,
                    duration_ms: fx.duration_ms,
                });
            }
            if fx.pack_index != j {
                r.push(Violation::PackIndexMismatch { pack: j, found: fx.pack_index });
            }
            if fx.order != i {
                r.push(Violation::OrderMismatch { pack: j, expected: i, found: fx.order });
            }
        }
    }
    let derived = s.packs.last().is_some_and(|p| {
        p.kind == PackKind::Terminal || p.word_index == last_stage
    });
    if derived != s.terminated {
        r.push(Violation::TerminationFlag { flagged: s.terminated, derived });
    }
    r
}
