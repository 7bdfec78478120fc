//! Scanpath similarity metrics.
//!
//! Whole-scanpath SS/FED compare cluster-id strings of the flattened
//! fixations. The pack variants compare one pack at a time; a pack without
//! fixations (null, terminal, or never reached) is replaced by the last
//! fixation seen before it in the same scanpath, or the trial's start point.

mod saliency;
mod strings;

pub use saliency::{
    build_map, cc_pack, cc_per_pack, nss, nss_pack, pearson, SaliencyMap, CC_EPS, DOWNSAMPLE,
};
pub use strings::{fixation_edit_distance, lcs_len, sequence_score};

use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::domain::{Fixation, ImageSize, PackKind, Scanpath};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("fixation ({x}, {y}) lies outside the {width}×{height} image")]
    OutOfBounds { x: f32, y: f32, width: u32, height: u32 },
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Axis-aligned partition of the image into `rows × cols` clusters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterGrid {
    pub rows: usize,
    pub cols: usize,
}

impl Default for ClusterGrid {
    fn default() -> Self {
        Self { rows: 10, cols: 18 }
    }
}

impl ClusterGrid {
    pub fn cell(&self, x: f32, y: f32, image: ImageSize) -> Result<usize, MetricError> {
        if !image.contains(x, y) {
            return Err(MetricError::OutOfBounds { x, y, width: image.width, height: image.height });
        }
        let r = ((y as f64 * self.rows as f64 / image.height as f64) as usize).min(self.rows - 1);
        let c = ((x as f64 * self.cols as f64 / image.width as f64) as usize).min(self.cols - 1);
        Ok(r * self.cols + c)
    }
}

pub fn cluster_string(
    fixations: &[Fixation],
    grid: ClusterGrid,
    image: ImageSize,
) -> Result<Vec<usize>, MetricError> {
    fixations.iter().map(|f| grid.cell(f.x, f.y, image)).collect()
}

/// Cluster ids with each id repeated `ceil(duration / bin_ms)` times.
pub fn binned_string(
    fixations: &[Fixation],
    grid: ClusterGrid,
    image: ImageSize,
    bin_ms: u32,
) -> Result<Vec<usize>, MetricError> {
    if bin_ms == 0 {
        return Err(MetricError::Contract("bin_ms must be positive".into()));
    }
    let mut out = Vec::new();
    for f in fixations {
        let id = grid.cell(f.x, f.y, image)?;
        let repeats = f.duration_ms.div_ceil(bin_ms).max(1);
        out.extend(std::iter::repeat_n(id, repeats as usize));
    }
    Ok(out)
}

/// The stand-in for an empty sequence: the start point, lasting one bin.
fn start_fixation(image: ImageSize, bin_ms: u32) -> Fixation {
    let (x, y) = image.center();
    Fixation { x, y, duration_ms: bin_ms, pack_index: 0, order: 0 }
}

/// Number of packs compared by the pack metrics: every stage before the
/// later of the two terminations, at least one.
pub fn pack_range(scanpaths: &[&Scanpath]) -> usize {
    scanpaths.iter().map(|s| s.active_len()).max().unwrap_or(0).max(1)
}

/// Fixations standing for stage `j` of `s`: the pack itself if it has
/// fixations, else the last earlier fixation, else the start point.
pub fn pack_fixations(s: &Scanpath, j: usize, image: ImageSize, bin_ms: u32) -> Vec<Fixation> {
    if let Some(p) = s.pack_at(j) {
        if p.kind == PackKind::Normal && !p.fixations.is_empty() {
            return p.fixations.clone();
        }
    }
    let last = s
        .packs
        .iter()
        .take(j)
        .rev()
        .find_map(|p| if p.kind == PackKind::Normal { p.fixations.last().copied() } else { None });
    vec![last.unwrap_or_else(|| start_fixation(image, bin_ms))]
}

/// Per-stage `(pred, gt)` cluster strings after the substitution rules.
/// With `bin_ms` set, ids are repeated per duration bin.
pub fn pack_strings(
    pred: &Scanpath,
    gt: &Scanpath,
    grid: ClusterGrid,
    image: ImageSize,
    bin_ms: Option<u32>,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>, MetricError> {
    let fill_ms = bin_ms.unwrap_or(1);
    let encode = |f: &[Fixation]| match bin_ms {
        Some(b) => binned_string(f, grid, image, b),
        None => cluster_string(f, grid, image),
    };
    (0..pack_range(&[pred, gt]))
        .map(|j| {
            Ok((
                encode(&pack_fixations(pred, j, image, fill_ms))?,
                encode(&pack_fixations(gt, j, image, fill_ms))?,
            ))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PackScores {
    pub ss_pack: f64,
    pub fed_pack: f64,
}

pub fn pack_metrics(
    pred: &Scanpath,
    gt: &Scanpath,
    grid: ClusterGrid,
    image: ImageSize,
) -> Result<PackScores, MetricError> {
    pack_metrics_binned(pred, gt, grid, image, None)
}

/// [`pack_metrics`] on duration-binned strings when `bin_ms` is set.
pub fn pack_metrics_binned(
    pred: &Scanpath,
    gt: &Scanpath,
    grid: ClusterGrid,
    image: ImageSize,
    bin_ms: Option<u32>,
) -> Result<PackScores, MetricError> {
    let pairs = pack_strings(pred, gt, grid, image, bin_ms)?;
    let n = pairs.len() as f64;
    let mut ss = 0.0;
    let mut fed = 0.0;
    for (a, b) in &pairs {
        ss += sequence_score(a, b)?;
        fed += fixation_edit_distance(a, b) as f64;
    }
    Ok(PackScores { ss_pack: ss / n, fed_pack: fed / n })
}

/// Whole-scanpath fixations, with the start point standing in for a
/// scanpath that has none.
fn whole(s: &Scanpath, image: ImageSize, bin_ms: u32) -> Vec<Fixation> {
    let f = s.flatten();
    if f.is_empty() {
        vec![start_fixation(image, bin_ms)]
    } else {
        f
    }
}

/// Whole-scanpath `(SS, FED)`.
pub fn scanpath_metrics(
    pred: &Scanpath,
    gt: &Scanpath,
    grid: ClusterGrid,
    image: ImageSize,
) -> Result<(f64, f64), MetricError> {
    let a = cluster_string(&whole(pred, image, 1), grid, image)?;
    let b = cluster_string(&whole(gt, image, 1), grid, image)?;
    Ok((sequence_score(&a, &b)?, fixation_edit_distance(&a, &b) as f64))
}

/// Duration-aware whole-scanpath `(SS_t, FED_t)`.
pub fn duration_aware(
    pred: &Scanpath,
    gt: &Scanpath,
    grid: ClusterGrid,
    image: ImageSize,
    bin_ms: u32,
) -> Result<(f64, f64), MetricError> {
    let a = binned_string(&whole(pred, image, bin_ms), grid, image, bin_ms)?;
    let b = binned_string(&whole(gt, image, bin_ms), grid, image, bin_ms)?;
    Ok((sequence_score(&a, &b)?, fixation_edit_distance(&a, &b) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub grid: ClusterGrid,
    /// Gaussian width at full image resolution, in pixels.
    pub sigma_px: f64,
    pub bin_ms: u32,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { grid: ClusterGrid::default(), sigma_px: 32.0, bin_ms: 50 }
    }
}

/// Column names in report order.
pub const METRIC_NAMES: [&str; 10] = [
    "SS", "SS_pack", "FED", "FED_pack", "CC_pack", "NSS_pack", "SS_t", "SS_pack_t", "FED_t",
    "FED_pack_t",
];

/// Every metric for one set of predictions against one ground truth.
/// `nss_pack` is `None` when no stage has fixations on both sides.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreRow {
    pub ss: f64,
    pub ss_pack: f64,
    pub fed: f64,
    pub fed_pack: f64,
    pub cc_pack: f64,
    pub nss_pack: Option<f64>,
    pub ss_t: f64,
    pub ss_pack_t: f64,
    pub fed_t: f64,
    pub fed_pack_t: f64,
}

impl ScoreRow {
    pub fn values(&self) -> [Option<f64>; 10] {
        [
            Some(self.ss),
            Some(self.ss_pack),
            Some(self.fed),
            Some(self.fed_pack),
            Some(self.cc_pack),
            self.nss_pack,
            Some(self.ss_t),
            Some(self.ss_pack_t),
            Some(self.fed_t),
            Some(self.fed_pack_t),
        ]
    }
}

/// Scores a set of predicted scanpaths against one ground truth. String
/// metrics are averaged over the predictions; CC/NSS pool the predictions
/// into one map per stage.
pub fn score(
    preds: &[Scanpath],
    gt: &Scanpath,
    image: ImageSize,
    cfg: &MetricConfig,
) -> Result<ScoreRow, MetricError> {
    if preds.is_empty() {
        return Err(MetricError::Contract("no predicted scanpaths".into()));
    }
    let n = preds.len() as f64;
    let mut sums = [0.0f64; 8];
    for p in preds {
        let (ss, fed) = scanpath_metrics(p, gt, cfg.grid, image)?;
        let pk = pack_metrics(p, gt, cfg.grid, image)?;
        let (ss_t, fed_t) = duration_aware(p, gt, cfg.grid, image, cfg.bin_ms)?;
        let pk_t = pack_metrics_binned(p, gt, cfg.grid, image, Some(cfg.bin_ms))?;
        for (s, v) in sums.iter_mut().zip([
            ss, pk.ss_pack, fed, pk.fed_pack, ss_t, pk_t.ss_pack, fed_t, pk_t.fed_pack,
        ]) {
            *s += v;
        }
    }
    let m = sums.map(|s| s / n);
    Ok(ScoreRow {
        ss: m[0],
        ss_pack: m[1],
        fed: m[2],
        fed_pack: m[3],
        cc_pack: cc_pack(preds, gt, cfg.sigma_px, image),
        nss_pack: nss_pack(preds, gt, cfg.sigma_px, image),
        ss_t: m[4],
        ss_pack_t: m[5],
        fed_t: m[6],
        fed_pack_t: m[7],
    })
}

/// Mean of `Some` values per column, `None` where a column has none.
pub fn mean_rows(rows: &[ScoreRow]) -> [Option<f64>; 10] {
    let mut out = [None; 10];
    for (k, slot) in out.iter_mut().enumerate() {
        let vals: Vec<f64> = rows.iter().filter_map(|r| r.values()[k]).collect();
        if !vals.is_empty() {
            *slot = Some(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyReport {
    /// `(trial_id, per-record mean row)` for records with ≥ 2 scanpaths.
    pub per_record: Vec<(String, [Option<f64>; 10])>,
    /// Trials skipped for having fewer than two scanpaths.
    pub skipped: Vec<String>,
    pub mean: [Option<f64>; 10],
}

/// Leave-one-out agreement between human subjects: every scanpath of a
/// record is scored as a prediction against every other one.
pub fn human_consistency(corpus: &Corpus, cfg: &MetricConfig) -> Result<ConsistencyReport, MetricError> {
    let mut per_record = Vec::new();
    let mut skipped = Vec::new();
    let mut record_means = Vec::new();
    for r in &corpus.records {
        let hs = &r.human_scanpaths;
        if hs.len() < 2 {
            skipped.push(r.trial_id.clone());
            continue;
        }
        let mut rows = Vec::new();
        for (i, held) in hs.iter().enumerate() {
            for (k, other) in hs.iter().enumerate() {
                if i != k {
                    rows.push(score(std::slice::from_ref(&held.scanpath), &other.scanpath, r.image, cfg)?);
                }
            }
        }
        let mean = mean_rows(&rows);
        record_means.push(mean);
        per_record.push((r.trial_id.clone(), mean));
    }
    let mut mean = [None; 10];
    for (k, slot) in mean.iter_mut().enumerate() {
        let vals: Vec<f64> = record_means.iter().filter_map(|m| m[k]).collect();
        if !vals.is_empty() {
            *slot = Some(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    Ok(ConsistencyReport { per_record, skipped, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Pack;

    const IMG: ImageSize = ImageSize { width: 720, height: 400 };

    #[test]
    fn center_maps_to_cell_99() {
        assert_eq!(ClusterGrid::default().cell(360.0, 200.0, IMG).unwrap(), 99);
        assert!(ClusterGrid::default().cell(720.0, 0.0, IMG).is_err());
        assert!(cluster_string(&[], ClusterGrid::default(), IMG).unwrap().is_empty());
    }

    #[test]
    fn ceil_binning() {
        let f = Fixation { x: 10.0, y: 10.0, duration_ms: 120, pack_index: 0, order: 0 };
        assert_eq!(binned_string(&[f], ClusterGrid::default(), IMG, 50).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn identical_scanpaths_are_optimal() {
        let s = Scanpath::from_packs(
            vec![
                Pack::null(0),
                Pack::normal(1, &[(100.0, 100.0, 200), (300.0, 50.0, 100)]),
                Pack::terminal(2),
            ],
            3,
        );
        let row = score(std::slice::from_ref(&s), &s, IMG, &MetricConfig::default()).unwrap();
        assert_eq!((row.ss, row.fed, row.ss_pack, row.fed_pack), (1.0, 0.0, 1.0, 0.0));
        assert!((row.cc_pack - 1.0).abs() < 1e-6);
        assert_eq!((row.ss_t, row.fed_t), (1.0, 0.0));
    }

    #[test]
    fn doubled_durations_lower_ss_t() {
        let a = Scanpath::from_packs(vec![Pack::normal(0, &[(100.0, 100.0, 200)])], 2);
        let b = Scanpath::from_packs(vec![Pack::normal(0, &[(100.0, 100.0, 400)])], 2);
        let (ss_t, _) = duration_aware(&b, &a, ClusterGrid::default(), IMG, 50).unwrap();
        assert!(ss_t < 1.0);
        assert_eq!(scanpath_metrics(&b, &a, ClusterGrid::default(), IMG).unwrap().0, 1.0);
    }
}
