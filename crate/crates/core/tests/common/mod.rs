//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refgaze_core::domain::{ImageSize, Pack, Scanpath};
use refgaze_core::metrics::{fixation_edit_distance, pack_strings, sequence_score, ClusterGrid};
use refgaze_core::objectives::{giou, iou};

fn is_subsequence(sub: &[u8], s: &[u8]) -> bool {
    let mut it = s.iter();
    sub.iter().all(|c| it.any(|x| x == c))
}

/// Longest common subsequence by trying every subsequence of `a`.
pub fn lcs_brute(a: &[u8], b: &[u8]) -> usize {
    let mut best = 0;
    let mut sub = Vec::with_capacity(a.len());
    for mask in 0u32..(1 << a.len()) {
        let k = mask.count_ones() as usize;
        if k <= best {
            continue;
        }
        sub.clear();
        sub.extend((0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| a[i]));
        if is_subsequence(&sub, b) {
            best = k;
        }
    }
    best
}

/// Levenshtein distance by the textbook recursion on the first symbols.
pub fn lev_naive(a: &[u8], b: &[u8]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    if a[0] == b[0] {
        return lev_naive(&a[1..], &b[1..]);
    }
    1 + lev_naive(&a[1..], b).min(lev_naive(a, &b[1..])).min(lev_naive(&a[1..], &b[1..]))
}

/// Calls `f` with every string of length `len` in which symbols first
/// appear in order 0, 1, 2, 3, along with its number of distinct symbols.
fn restricted_growth(len: usize, s: &mut Vec<u8>, used: u8, f: &mut impl FnMut(&[u8], u8)) {
    if s.len() == len {
        f(s, used);
        return;
    }
    for c in 0..(used + 1).min(4) {
        s.push(c);
        restricted_growth(len, s, used.max(c + 1), f);
        s.pop();
    }
}

/// Calls `f` with every injective map from `k` labels into 4 symbols.
fn injections(k: usize, map: &mut Vec<u8>, f: &mut impl FnMut(&[u8])) {
    if map.len() == k {
        f(map);
        return;
    }
    for c in 0..4u8 {
        if !map.contains(&c) {
            map.push(c);
            injections(k, map, f);
            map.pop();
        }
    }
}

/// Checks `sequence_score` and `fixation_edit_distance` on every pair of
/// strings of length ≤ `max_len` over a 4-symbol alphabet. Both oracles
/// only compare symbols for equality, so they run once per relabeling
/// class and the implementation runs on every member of the class, which
/// together cover each pair exactly once. Returns the number of pairs
/// checked and the first mismatch.
pub fn check_all_string_pairs(max_len: usize) -> (u64, Option<String>) {
    let mut pairs = 0u64;
    let mut mismatch = None;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for la in 0..=max_len {
        for lb in 0..=max_len {
            restricted_growth(la + lb, &mut Vec::new(), 0, &mut |s, used| {
                if mismatch.is_some() {
                    return;
                }
                let (ca, cb) = s.split_at(la);
                let lcs = lcs_brute(ca, cb);
                let lev = lev_naive(ca, cb);
                let want_ss = (la > 0 && lb > 0).then(|| lcs as f64 / la.max(lb) as f64);
                injections(used as usize, &mut Vec::new(), &mut |map| {
                    if mismatch.is_some() {
                        return;
                    }
                    pairs += 1;
                    a.clear();
                    a.extend(ca.iter().map(|&c| map[c as usize]));
                    b.clear();
                    b.extend(cb.iter().map(|&c| map[c as usize]));
                    let fed = fixation_edit_distance(&a, &b);
                    if fed != lev {
                        mismatch = Some(format!("FED {a:?} {b:?}: {fed} vs oracle {lev}"));
                    }
                    let ss = sequence_score(&a, &b).ok();
                    if ss != want_ss {
                        mismatch = Some(format!("SS {a:?} {b:?}: {ss:?} vs oracle {want_ss:?}"));
                    }
                });
            });
        }
    }
    (pairs, mismatch)
}

/// Pixels per unit length of the raster oracle.
pub const RASTER: u32 = 1000;

/// A box on the pixel lattice, `(x, y, w, h)` in pixels.
pub type PixelBox = [u32; 4];

fn covers(b: PixelBox, axis: usize, p: u32) -> bool {
    p >= b[axis] && p < b[axis] + b[axis + 2]
}

fn enclosing(a: PixelBox, b: PixelBox) -> PixelBox {
    let x = a[0].min(b[0]);
    let y = a[1].min(b[1]);
    [x, y, (a[0] + a[2]).max(b[0] + b[2]) - x, (a[1] + a[3]).max(b[1] + b[3]) - y]
}

/// `(intersection, union, enclosing)` pixel counts by testing every pixel
/// of a `side × side` raster against the boxes.
pub fn raster_areas(a: PixelBox, b: PixelBox, side: u32) -> (u64, u64, u64) {
    let c = enclosing(a, b);
    let (mut inter, mut uni, mut enc) = (0u64, 0u64, 0u64);
    for py in 0..side {
        for px in 0..side {
            let ia = covers(a, 0, px) && covers(a, 1, py);
            let ib = covers(b, 0, px) && covers(b, 1, py);
            inter += u64::from(ia && ib);
            uni += u64::from(ia || ib);
            enc += u64::from(covers(c, 0, px) && covers(c, 1, py));
        }
    }
    (inter, uni, enc)
}

/// Same counts as [`raster_areas`], scanning each axis once. The pixel set
/// of a box, and of the overlap of two boxes, is a product of a column set
/// and a row set, so its count is the product of the per-axis counts.
pub fn raster_areas_by_axis(a: PixelBox, b: PixelBox, side: u32) -> (u64, u64, u64) {
    let c = enclosing(a, b);
    let count = |f: &dyn Fn(u32) -> bool| (0..side).filter(|&p| f(p)).count() as u64;
    let area = |bx: PixelBox| count(&|p| covers(bx, 0, p)) * count(&|p| covers(bx, 1, p));
    let inter = count(&|p| covers(a, 0, p) && covers(b, 0, p)) * count(&|p| covers(a, 1, p) && covers(b, 1, p));
    (inter, area(a) + area(b) - inter, area(c))
}

pub fn giou_from_areas((inter, union, enc): (u64, u64, u64)) -> f64 {
    inter as f64 / union as f64 - (enc - union) as f64 / enc as f64
}

pub fn iou_from_areas((inter, union, _): (u64, u64, u64)) -> f64 {
    inter as f64 / union as f64
}

/// A pixel box as a normalized box for a frame of `side` pixels.
pub fn normalized(b: PixelBox, side: u32) -> [f64; 4] {
    b.map(|v| v as f64 / side as f64)
}

/// Pearson correlation straight from the definition.
pub fn pearson_naive(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va.sqrt() * vb.sqrt())
}

/// One constructed pack-metric case: the per-pack `(pred, gt)` cell strings
/// produced and the strings expected by hand.
pub struct EdgeCase {
    pub name: &'static str,
    pub got: Vec<(Vec<usize>, Vec<usize>)>,
    pub want: Vec<(Vec<usize>, Vec<usize>)>,
}

const EDGE_IMAGE: ImageSize = ImageSize { width: 720, height: 400 };

/// Cell id of a point for a 720×400 image cut into 40 px cells, 18 per row.
pub fn cell(x: f32, y: f32) -> usize {
    (y / 40.0) as usize * 18 + (x / 40.0) as usize
}

fn strings(pred: &Scanpath, gt: &Scanpath) -> Vec<(Vec<usize>, Vec<usize>)> {
    pack_strings(pred, gt, ClusterGrid { rows: 10, cols: 18 }, EDGE_IMAGE, None).unwrap()
}

pub fn edge_cases() -> Vec<EdgeCase> {
    let mut cases = Vec::new();

    // A null pack after a normal one repeats the last fixation before it.
    let gt = Scanpath::from_packs(
        vec![Pack::normal(0, &[(50.0, 50.0, 200), (130.0, 90.0, 200)]), Pack::null(1), Pack::terminal(2)],
        1,
    );
    let pred = Scanpath::from_packs(
        vec![Pack::normal(0, &[(50.0, 50.0, 200)]), Pack::normal(1, &[(300.0, 300.0, 200)]), Pack::terminal(2)],
        1,
    );
    cases.push(EdgeCase {
        name: "null pack repeats the previous fixation",
        got: strings(&pred, &gt),
        want: vec![
            (vec![cell(50.0, 50.0)], vec![cell(50.0, 50.0), cell(130.0, 90.0)]),
            (vec![cell(300.0, 300.0)], vec![cell(130.0, 90.0)]),
        ],
    });

    // Null packs with nothing before them stand at the image center.
    let gt = Scanpath::from_packs(
        vec![Pack::normal(0, &[(360.0, 200.0, 200)]), Pack::normal(1, &[(365.0, 210.0, 200)]), Pack::terminal(2)],
        1,
    );
    let pred = Scanpath::from_packs(vec![Pack::null(0), Pack::null(1), Pack::terminal(2)], 1);
    let center = cell(360.0, 200.0);
    cases.push(EdgeCase {
        name: "leading null packs use the center",
        got: strings(&pred, &gt),
        want: vec![(vec![center], vec![center]), (vec![center], vec![center])],
    });

    // Past its terminal pack a scanpath repeats its last fixation.
    let gt = Scanpath::from_packs(
        vec![
            Pack::normal(0, &[(45.0, 45.0, 200)]),
            Pack::null(1),
            Pack::normal(2, &[(85.0, 45.0, 200), (125.0, 45.0, 200)]),
            Pack::terminal(3),
        ],
        4,
    );
    let pred = Scanpath::from_packs(
        (0..5).map(|j| Pack::normal(j, &[(45.0 + 80.0 * j as f32, 300.0, 200)])).collect(),
        4,
    );
    let last = cell(125.0, 45.0);
    let gts = [
        vec![cell(45.0, 45.0)],
        vec![cell(45.0, 45.0)],
        vec![cell(85.0, 45.0), last],
        vec![last],
        vec![last],
    ];
    cases.push(EdgeCase {
        name: "terminated scanpath repeats its last fixation",
        got: strings(&pred, &gt),
        want: gts.into_iter().enumerate().map(|(j, g)| (vec![cell(45.0 + 80.0 * j as f32, 300.0)], g)).collect(),
    });
    cases
}

/// Two distinct lattice coordinates in `0..=RASTER`, as `(start, length)`.
fn span(rng: &mut ChaCha8Rng) -> (u32, u32) {
    loop {
        let (p, q) = (rng.random_range(0..=RASTER), rng.random_range(0..=RASTER));
        if p != q {
            return (p.min(q), p.max(q) - p.min(q));
        }
    }
}

pub fn random_pixel_box(rng: &mut ChaCha8Rng) -> PixelBox {
    let (x, w) = span(rng);
    let (y, h) = span(rng);
    [x, y, w, h]
}

#[derive(Debug, Default)]
pub struct GiouReport {
    pub pairs: usize,
    /// Largest |giou − raster giou|.
    pub worst: f64,
    /// Pairs violating range, symmetry, the IoU bound, or the equality rule.
    pub violations: Vec<String>,
    /// giou of the worked example in a 2×2 frame.
    pub example: f64,
    /// The worked example evaluated by a full 2D pixel scan.
    pub example_raster: f64,
}

/// Random lattice box pairs against the pixel raster, plus the worked example.
pub fn giou_report(pairs: usize, seed: u64) -> GiouReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = GiouReport { pairs, ..Default::default() };
    for _ in 0..pairs {
        let (a, b) = (random_pixel_box(&mut rng), random_pixel_box(&mut rng));
        let (na, nb) = (normalized(a, RASTER), normalized(b, RASTER));
        let g = giou(na, nb).unwrap();
        let i = iou(na, nb).unwrap();
        let areas = raster_areas_by_axis(a, b, RASTER);
        rep.worst = rep.worst.max((g - giou_from_areas(areas)).abs());
        let mut bad = |what: &str| rep.violations.push(format!("{what}: {a:?} {b:?} giou {g} iou {i}"));
        if !(g > -1.0 && g <= 1.0) {
            bad("range");
        }
        if g != giou(nb, na).unwrap() {
            bad("symmetry");
        }
        if g > i + 1e-12 {
            bad("above IoU");
        }
        // Equal to IoU exactly when the enclosing box is the union.
        let tight = areas.2 == areas.1;
        if tight != ((g - i).abs() < 1e-9) {
            bad("equality rule");
        }
    }
    let half = RASTER / 2;
    rep.example = giou([0.0, 0.0, 1.0, 1.0], [1.0, 1.0, 1.0, 1.0]).unwrap();
    rep.example_raster = giou_from_areas(raster_areas([0, 0, half, half], [half, half, half, half], RASTER));
    rep
}
