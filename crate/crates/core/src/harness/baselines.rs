use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Pack, Scanpath, TrialRecord};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    /// Pack lengths are drawn from `0..=l_p`.
    pub l_p: usize,
    /// Duration given to every fixation; the corpus mean in practice.
    pub duration_ms: u32,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { l_p: 6, duration_ms: 250 }
    }
}

/// Uniform pack lengths and uniform locations over the whole image, for
/// every pack `0..=L+1`.
pub fn random_baseline(record: &TrialRecord, seed: u64, cfg: &BaselineConfig) -> Scanpath {
    let (w, h) = (record.image.width as f32, record.image.height as f32);
    uniform_packs(record, seed, cfg, [0.0, 0.0, w, h])
}

/// As [`random_baseline`] with locations uniform inside the target box
/// (clipped to the image).
pub fn bbox_baseline(record: &TrialRecord, seed: u64, cfg: &BaselineConfig) -> Scanpath {
    let b = record.target_bbox;
    let (w, h) = (record.image.width as f32, record.image.height as f32);
    let x0 = b.x.clamp(0.0, w - 1.0);
    let y0 = b.y.clamp(0.0, h - 1.0);
    let x1 = (b.x + b.w).clamp(x0, w);
    let y1 = (b.y + b.h).clamp(y0, h);
    uniform_packs(record, seed, cfg, [x0, y0, x1, y1])
}

/// Draws inside `[x0, x1) × [y0, y1)`; an empty range collapses to its
/// start.
fn uniform_packs(record: &TrialRecord, seed: u64, cfg: &BaselineConfig, area: [f32; 4]) -> Scanpath {
    let [x0, y0, x1, y1] = area;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |lo: f32, hi: f32, rng: &mut ChaCha8Rng| {
        if hi > lo {
            // Rounding can land on `hi`; keep the half-open support.
            let v = rng.random_range(lo..hi);
            if v < hi { v } else { lo }
        } else {
            lo
        }
    };
    let l = record.n_words();
    let packs = (0..=l + 1)
        .map(|j| {
            let n = rng.random_range(0..=cfg.l_p);
            let pts: Vec<(f32, f32, u32)> = (0..n)
                .map(|_| {
                    let x = draw(x0, x1, &mut rng);
                    let y = draw(y0, y1, &mut rng);
                    (x, y, cfg.duration_ms)
                })
                .collect();
            Pack::normal(j, &pts)
        })
        .collect();
    Scanpath::from_packs(packs, l)
}
