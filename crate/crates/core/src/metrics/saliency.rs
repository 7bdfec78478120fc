use std::f64::consts::PI;

use super::pack_range;
use crate::domain::{ImageSize, PackKind, Scanpath};

/// Added to maps and to standard deviations so empty maps stay finite.
pub const CC_EPS: f64 = 1e-9;
/// Maps are built at 1/8 of the image resolution.
pub const DOWNSAMPLE: u32 = 8;
const TRUNCATE_SIGMAS: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl SaliencyMap {
    pub fn zeros(image: ImageSize) -> Self {
        let rows = image.height.div_ceil(DOWNSAMPLE) as usize;
        let cols = image.width.div_ceil(DOWNSAMPLE) as usize;
        Self { rows, cols, values: vec![0.0; rows * cols] }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    /// Map cell containing full-resolution pixel `(x, y)`.
    pub fn cell_of(&self, x: f32, y: f32) -> (usize, usize) {
        let r = ((y / DOWNSAMPLE as f32) as usize).min(self.rows - 1);
        let c = ((x / DOWNSAMPLE as f32) as usize).min(self.cols - 1);
        (r, c)
    }

    pub fn argmax(&self) -> (usize, usize) {
        let (i, _) = self
            .values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        (i / self.cols, i % self.cols)
    }

    fn scaled_to_peak(&self) -> Vec<f64> {
        let max = self.values.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            self.values.iter().map(|v| v / max).collect()
        } else {
            self.values.clone()
        }
    }
}

/// Sum of unit-mass isotropic Gaussians (width `sigma_px` at full
/// resolution) centered on the given points, evaluated at map cell centers
/// and cut off beyond four standard deviations.
pub fn build_map(points: &[(f32, f32)], sigma_px: f64, image: ImageSize) -> SaliencyMap {
    assert!(sigma_px > 0.0, "sigma must be positive");
    let mut map = SaliencyMap::zeros(image);
    let s = sigma_px / DOWNSAMPLE as f64;
    let reach = TRUNCATE_SIGMAS * s;
    let norm = 1.0 / (2.0 * PI * s * s);
    for &(x, y) in points {
        let cx = x as f64 / DOWNSAMPLE as f64;
        let cy = y as f64 / DOWNSAMPLE as f64;
        let r_lo = (cy - reach - 0.5).floor().max(0.0) as usize;
        let r_hi = ((cy + reach - 0.5).ceil().max(0.0) as usize).min(map.rows - 1);
        let c_lo = (cx - reach - 0.5).floor().max(0.0) as usize;
        let c_hi = ((cx + reach - 0.5).ceil().max(0.0) as usize).min(map.cols - 1);
        for r in r_lo..=r_hi {
            let dy = r as f64 + 0.5 - cy;
            for c in c_lo..=c_hi {
                let dx = c as f64 + 0.5 - cx;
                let d2 = dx * dx + dy * dy;
                if d2 <= reach * reach {
                    map.values[r * map.cols + c] += norm * (-d2 / (2.0 * s * s)).exp();
                }
            }
        }
    }
    map
}

/// Pearson correlation of two maps offset by `eps`, with `eps` also added
/// to both standard deviations; two constant maps correlate at 0.
pub fn pearson(a: &[f64], b: &[f64], eps: f64) -> f64 {
    // The offset cancels in every centered moment, so it is not applied to
    // the values themselves (which would only add rounding noise).
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    (cov / n) / (((va / n).sqrt() + eps) * ((vb / n).sqrt() + eps))
}

fn normal_points(s: &Scanpath, j: usize) -> Vec<(f32, f32)> {
    s.pack_at(j)
        .filter(|p| p.kind == PackKind::Normal)
        .map(|p| p.fixations.iter().map(|f| (f.x, f.y)).collect())
        .unwrap_or_default()
}

fn pooled_points(preds: &[Scanpath], j: usize) -> Vec<(f32, f32)> {
    preds.iter().flat_map(|p| normal_points(p, j)).collect()
}

/// Per-stage CC: `(value, any fixations on either side)`. Maps are scaled
/// to unit peak before correlating.
pub fn cc_per_pack(preds: &[Scanpath], gt: &Scanpath, sigma_px: f64, image: ImageSize) -> Vec<(f64, bool)> {
    let mut all: Vec<&Scanpath> = preds.iter().collect();
    all.push(gt);
    (0..pack_range(&all))
        .map(|j| {
            let p = pooled_points(preds, j);
            let g = normal_points(gt, j);
            let pm = build_map(&p, sigma_px, image).scaled_to_peak();
            let gm = build_map(&g, sigma_px, image).scaled_to_peak();
            (pearson(&pm, &gm, CC_EPS), !p.is_empty() || !g.is_empty())
        })
        .collect()
}

/// Mean CC over the stages where at least one side fixated; stages that
/// are null on both sides score 0 but are left out of the mean. Returns 0
/// when no stage qualifies.
pub fn cc_pack(preds: &[Scanpath], gt: &Scanpath, sigma_px: f64, image: ImageSize) -> f64 {
    let live: Vec<f64> = cc_per_pack(preds, gt, sigma_px, image)
        .into_iter()
        .filter_map(|(v, any)| any.then_some(v))
        .collect();
    if live.is_empty() {
        0.0
    } else {
        live.iter().sum::<f64>() / live.len() as f64
    }
}

/// Mean of the z-scored map at the given full-resolution points; a
/// constant map scores 0.
pub fn nss(map: &SaliencyMap, points: &[(f32, f32)]) -> f64 {
    let vals = map.scaled_to_peak();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    points
        .iter()
        .map(|&(x, y)| {
            let (r, c) = map.cell_of(x, y);
            (vals[r * map.cols + c] - mean) / (std + CC_EPS)
        })
        .sum::<f64>()
        / points.len() as f64
}

/// [`nss`] of the pooled prediction map at the ground-truth fixations,
/// averaged over the stages where both sides fixated.
pub fn nss_pack(preds: &[Scanpath], gt: &Scanpath, sigma_px: f64, image: ImageSize) -> Option<f64> {
    let mut all: Vec<&Scanpath> = preds.iter().collect();
    all.push(gt);
    let mut per_pack = Vec::new();
    for j in 0..pack_range(&all) {
        let p = pooled_points(preds, j);
        let g = normal_points(gt, j);
        if p.is_empty() || g.is_empty() {
            continue;
        }
        let score = nss(&build_map(&p, sigma_px, image), &g);
        per_pack.push(score);
    }
    (!per_pack.is_empty()).then(|| per_pack.iter().sum::<f64>() / per_pack.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Pack;

    const IMG: ImageSize = ImageSize { width: 720, height: 400 };

    #[test]
    fn map_basics() {
        let empty = build_map(&[], 32.0, IMG);
        assert_eq!((empty.rows, empty.cols), (50, 90));
        assert!(empty.values.iter().all(|&v| v == 0.0));
        let one = build_map(&[(203.0, 117.0)], 32.0, IMG);
        assert_eq!(one.argmax(), one.cell_of(203.0, 117.0));
        let two = build_map(&[(203.0, 117.0), (203.0, 117.0)], 32.0, IMG);
        for (a, b) in one.values.iter().zip(&two.values) {
            assert_eq!(2.0 * a, *b);
        }
        // Mass of an interior Gaussian is close to 1 after truncation.
        let mass: f64 = one.values.iter().sum();
        assert!((mass - 1.0).abs() < 1e-3, "{mass}");
    }

    #[test]
    fn null_null_stage_is_zero_and_skipped() {
        let s = Scanpath::from_packs(vec![Pack::null(0), Pack::normal(1, &[(50.0, 50.0, 100)])], 3);
        let per = cc_per_pack(std::slice::from_ref(&s), &s, 32.0, IMG);
        assert_eq!(per[0], (0.0, false));
        assert!((per[1].0 - 1.0).abs() < 1e-6);
        assert!((cc_pack(std::slice::from_ref(&s), &s, 32.0, IMG) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn nss_rules() {
        let s = Scanpath::from_packs(vec![Pack::normal(0, &[(300.0, 200.0, 100)])], 3);
        assert!(nss_pack(std::slice::from_ref(&s), &s, 32.0, IMG).unwrap() > 0.0);
        let mut flat = SaliencyMap::zeros(IMG);
        flat.values.iter_mut().for_each(|v| *v = 0.25);
        assert_eq!(nss(&flat, &[(10.0, 10.0), (700.0, 390.0)]), 0.0);
        let nulls = Scanpath::from_packs(vec![Pack::null(0), Pack::null(1)], 3);
        assert_eq!(nss_pack(std::slice::from_ref(&nulls), &s, 32.0, IMG), None);
    }
}
