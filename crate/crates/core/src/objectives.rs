//! Training losses.
//!
//! Gaze losses are per pack: L1 on locations (pixels) and durations
//! (seconds) over the ground-truth fixations, and cross-entropy of the slot
//! tokens. Grounding losses (box L1, GIoU, category cross-entropy) apply to
//! packs after the last word or at the end of a scanpath.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Real, Tensor, Var};
use crate::domain::{Pack, PackKind};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Slot classes of the token head.
pub const FIX: usize = 0;
pub const PAD: usize = 1;
pub const EOS: usize = 2;
pub const N_TOKENS: usize = 3;
pub const LOG_FLOOR: f64 = 1e-12;

fn constant<T: Real>(g: &mut Graph<'_, T>, rows: usize, cols: usize, data: &[f64]) -> Result<Var> {
    g.constant(Tensor::matrix(rows, cols, data.iter().map(|&v| T::of(v)).collect())?)
}

fn normal_fixations(gt: &Pack, max_slots: usize, loss: &str) -> Result<usize> {
    if gt.kind != PackKind::Normal || gt.fixations.is_empty() {
        return Err(AutodiffError::Contract(format!(
            "{loss} needs a ground-truth pack with fixations"
        )));
    }
    Ok(gt.fixations.len().min(max_slots))
}

/// `(1/l) Σ |x − x̂| + |y − ŷ|` over the `l` ground-truth fixations, with
/// `loc` the `L_P × 2` predicted pixel locations.
pub fn loss_xy<T: Real>(g: &mut Graph<'_, T>, loc: Var, gt: &Pack) -> Result<Var> {
    let l = normal_fixations(gt, g.value(loc).rows(), "loss_xy")?;
    let target: Vec<f64> = gt.fixations[..l]
        .iter()
        .flat_map(|f| [f.x as f64, f.y as f64])
        .collect();
    let target = constant(g, l, 2, &target)?;
    let pred = g.slice_rows(loc, 0, l)?;
    let diff = g.sub(pred, target)?;
    let diff = g.abs(diff)?;
    let s = g.sum(diff)?;
    g.scale(s, 1.0 / l as f64)
}

/// `(1/l) Σ |d − d̂|` in seconds, `dur` being `L_P × 1`.
pub fn loss_duration<T: Real>(g: &mut Graph<'_, T>, dur: Var, gt: &Pack) -> Result<Var> {
    let l = normal_fixations(gt, g.value(dur).rows(), "loss_duration")?;
    let target: Vec<f64> = gt.fixations[..l].iter().map(|f| f.duration_ms as f64 / 1000.0).collect();
    let target = constant(g, l, 1, &target)?;
    let pred = g.slice_rows(dur, 0, l)?;
    let diff = g.sub(pred, target)?;
    let diff = g.abs(diff)?;
    let s = g.sum(diff)?;
    g.scale(s, 1.0 / l as f64)
}

/// Slot targets for a pack: `l` FIX then PAD for normal packs, all PAD for
/// null packs, all EOS for terminal packs.
pub fn token_targets(gt: &Pack, slots: usize) -> Vec<usize> {
    match gt.kind {
        PackKind::Normal => {
            let l = gt.fixations.len().min(slots);
            (0..slots).map(|i| if i < l { FIX } else { PAD }).collect()
        }
        PackKind::Null => vec![PAD; slots],
        PackKind::Terminal => vec![EOS; slots],
    }
}

/// `−Σ_slots log p(target)` with the log clamped at `1e-12`.
pub fn loss_token<T: Real>(g: &mut Graph<'_, T>, probs: Var, gt: &Pack) -> Result<Var> {
    let (slots, classes) = g.value(probs).dims2();
    if classes != N_TOKENS {
        return Err(AutodiffError::shape("loss_token", format!("{classes} token classes")));
    }
    let mut onehot = vec![0.0; slots * N_TOKENS];
    for (i, t) in token_targets(gt, slots).into_iter().enumerate() {
        onehot[i * N_TOKENS + t] = 1.0;
    }
    let onehot = constant(g, slots, N_TOKENS, &onehot)?;
    let logp = g.log_clamped(probs, LOG_FLOOR)?;
    let picked = g.mul(logp, onehot)?;
    let s = g.sum(picked)?;
    g.scale(s, -1.0)
}

/// Boxes are `(x, y, w, h)` with `(x, y)` the upper-left corner.
fn check_box(b: [f64; 4]) -> Result<()> {
    if b.iter().all(|v| v.is_finite()) && b[2] > 0.0 && b[3] > 0.0 {
        Ok(())
    } else {
        Err(AutodiffError::Contract(format!("degenerate box {b:?}")))
    }
}

pub fn iou(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    check_box(a)?;
    check_box(b)?;
    let iw = ((a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0])).max(0.0);
    let ih = ((a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    Ok(inter / (a[2] * a[3] + b[2] * b[3] - inter))
}

/// Generalized IoU: IoU minus the share of the enclosing box not covered
/// by the union. Lies in (−1, 1].
pub fn giou(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    let i = iou(a, b)?;
    let inter = i * (a[2] * a[3] + b[2] * b[3]) / (1.0 + i);
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    let ew = (a[0] + a[2]).max(b[0] + b[2]) - a[0].min(b[0]);
    let eh = (a[1] + a[3]).max(b[1] + b[3]) - a[1].min(b[1]);
    let enclosing = ew * eh;
    Ok(i - (enclosing - union) / enclosing)
}

/// Differentiable `1 − giou(pred, gt)` for a `1×4` predicted box.
pub fn loss_giou<T: Real>(g: &mut Graph<'_, T>, pred: Var, gt: [f64; 4]) -> Result<Var> {
    check_box(gt)?;
    if g.value(pred).data().iter().enumerate().any(|(k, v)| k >= 2 && v.as_f64() <= 0.0) {
        return Err(AutodiffError::Contract("predicted box has no area".into()));
    }
    let px = g.slice_cols(pred, 0, 1)?;
    let py = g.slice_cols(pred, 1, 1)?;
    let pw = g.slice_cols(pred, 2, 1)?;
    let ph = g.slice_cols(pred, 3, 1)?;
    let px2 = g.add(px, pw)?;
    let py2 = g.add(py, ph)?;
    let c = |g: &mut Graph<'_, T>, v: f64| constant(g, 1, 1, &[v]);
    let (gx, gy) = (c(g, gt[0])?, c(g, gt[1])?);
    let (gx2, gy2) = (c(g, gt[0] + gt[2])?, c(g, gt[1] + gt[3])?);
    let zero = c(g, 0.0)?;

    let ix1 = g.maximum(px, gx)?;
    let ix2 = g.minimum(px2, gx2)?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.maximum(iw, zero)?;
    let iy1 = g.maximum(py, gy)?;
    let iy2 = g.minimum(py2, gy2)?;
    let ih = g.sub(iy2, iy1)?;
    let ih = g.maximum(ih, zero)?;
    let inter = g.mul(iw, ih)?;

    let area_p = g.mul(pw, ph)?;
    let union = g.add_scalar(area_p, gt[2] * gt[3])?;
    let union = g.sub(union, inter)?;
    let iou = g.div(inter, union)?;

    let ex1 = g.minimum(px, gx)?;
    let ex2 = g.maximum(px2, gx2)?;
    let ew = g.sub(ex2, ex1)?;
    let ey1 = g.minimum(py, gy)?;
    let ey2 = g.maximum(py2, gy2)?;
    let eh = g.sub(ey2, ey1)?;
    let enclosing = g.mul(ew, eh)?;
    let slack = g.sub(enclosing, union)?;
    let slack = g.div(slack, enclosing)?;
    let giou = g.sub(iou, slack)?;
    let neg = g.scale(giou, -1.0)?;
    let loss = g.add_scalar(neg, 1.0)?;
    g.sum(loss)
}

/// `(l_reg, l_giou)` for normalized boxes; `l_reg` sums the four absolute
/// differences.
pub fn loss_bbox<T: Real>(g: &mut Graph<'_, T>, pred: Var, gt: [f64; 4]) -> Result<(Var, Var)> {
    let target = constant(g, 1, 4, &gt)?;
    let diff = g.sub(pred, target)?;
    let diff = g.abs(diff)?;
    let l_reg = g.sum(diff)?;
    Ok((l_reg, loss_giou(g, pred, gt)?))
}

/// `−log p[gt]` with the log clamped at `1e-12`; `dist` is `1 × C`.
pub fn loss_target<T: Real>(g: &mut Graph<'_, T>, dist: Var, gt: usize) -> Result<Var> {
    let c = g.value(dist).numel();
    if gt >= c {
        return Err(AutodiffError::Index { what: "category vocabulary", index: gt, size: c });
    }
    let p = g.slice_cols(dist, gt, 1)?;
    let logp = g.log_clamped(p, LOG_FLOOR)?;
    let s = g.sum(logp)?;
    g.scale(s, -1.0)
}

#[derive(Clone, Copy, Debug)]
pub struct GroundTerms {
    pub l_reg: Var,
    pub l_giou: Var,
    pub l_target: Var,
}

/// Loss terms of one pack (one minibatch item). `l_xy` and `l_d` are
/// `None` for null and terminal packs and `l_d` also when durations are
/// disabled; such terms count as 0. `ground` is set when grounding is
/// active for the pack.
#[derive(Clone, Copy, Debug)]
pub struct PackTerms {
    pub l_xy: Option<Var>,
    pub l_token: Var,
    pub l_d: Option<Var>,
    pub ground: Option<GroundTerms>,
}

/// How the grounding loss is averaged over a minibatch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundingAverage {
    /// Mean over the packs where grounding is active.
    #[default]
    Qualifying,
    /// Sum over active packs divided by the minibatch size.
    Batch,
}

/// Scalar loss values; means over the minibatch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_xy: f64,
    pub l_token: f64,
    pub l_d: f64,
    pub l_reg: f64,
    pub l_giou: f64,
    pub l_target: f64,
    pub l_gaze: f64,
    pub l_ground: f64,
    pub total: f64,
}

/// Minibatch sizes needed to weight a part of a minibatch.
#[derive(Clone, Copy, Debug)]
pub struct BatchCounts {
    /// Packs in the whole minibatch.
    pub packs: usize,
    /// Packs with grounding active in the whole minibatch.
    pub grounded: usize,
}

impl BatchCounts {
    pub fn of(items: &[PackTerms]) -> Self {
        Self { packs: items.len(), grounded: items.iter().filter(|t| t.ground.is_some()).count() }
    }

    fn ground_divisor(&self, avg: GroundingAverage) -> usize {
        match avg {
            GroundingAverage::Qualifying => self.grounded.max(1),
            GroundingAverage::Batch => self.packs.max(1),
        }
    }
}

/// This part's contribution to the minibatch loss
/// `(1/M) Σ l_gaze + (1/G) Σ_active l_ground`, plus its contribution to
/// each breakdown entry. Summing parts of a minibatch gives the totals.
pub fn partial_loss<T: Real>(
    g: &mut Graph<'_, T>,
    items: &[PackTerms],
    counts: BatchCounts,
    avg: GroundingAverage,
) -> Result<(Var, LossBreakdown)> {
    if items.is_empty() || counts.packs == 0 {
        return Err(AutodiffError::Contract("empty minibatch".into()));
    }
    let wg = 1.0 / counts.packs as f64;
    let wr = 1.0 / counts.ground_divisor(avg) as f64;
    let mut parts = Vec::new();
    let mut b = LossBreakdown::default();
    let val = |g: &Graph<'_, T>, v: Var| g.value(v).item().as_f64();
    for t in items {
        let mut gaze = vec![t.l_token];
        b.l_token += wg * val(g, t.l_token);
        if let Some(v) = t.l_xy {
            gaze.push(v);
            b.l_xy += wg * val(g, v);
        }
        if let Some(v) = t.l_d {
            gaze.push(v);
            b.l_d += wg * val(g, v);
        }
        for v in gaze {
            parts.push(g.scale(v, wg)?);
        }
        if let Some(gr) = t.ground {
            for v in [gr.l_reg, gr.l_giou, gr.l_target] {
                parts.push(g.scale(v, wr)?);
            }
            b.l_reg += wr * val(g, gr.l_reg);
            b.l_giou += wr * val(g, gr.l_giou);
            b.l_target += wr * val(g, gr.l_target);
        }
    }
    let rows = g.concat_rows(&parts)?;
    let total = g.sum(rows)?;
    b.l_gaze = b.l_xy + b.l_token + b.l_d;
    b.l_ground = b.l_reg + b.l_giou + b.l_target;
    b.total = b.l_gaze + b.l_ground;
    Ok((total, b))
}

/// Multitask loss of a whole minibatch held in one graph: `l_gaze`
/// always, plus `l_ground` for packs where it is active.
pub fn total_loss<T: Real>(
    g: &mut Graph<'_, T>,
    items: &[PackTerms],
    avg: GroundingAverage,
) -> Result<(Var, LossBreakdown)> {
    partial_loss(g, items, BatchCounts::of(items), avg)
}

impl LossBreakdown {
    /// Entry-wise sum, used to combine the parts of one minibatch.
    pub fn add(&mut self, o: &LossBreakdown) {
        self.l_xy += o.l_xy;
        self.l_token += o.l_token;
        self.l_d += o.l_d;
        self.l_reg += o.l_reg;
        self.l_giou += o.l_giou;
        self.l_target += o.l_target;
        self.l_gaze += o.l_gaze;
        self.l_ground += o.l_ground;
        self.total += o.total;
    }

    pub fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            l_xy: self.l_xy * s,
            l_token: self.l_token * s,
            l_d: self.l_d * s,
            l_reg: self.l_reg * s,
            l_giou: self.l_giou * s,
            l_target: self.l_target * s,
            l_gaze: self.l_gaze * s,
            l_ground: self.l_ground * s,
            total: self.total * s,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;

    fn g64() -> Graph<'static, f64> {
        Graph::new(Mode::Eval)
    }

    fn mat(g: &mut Graph<'_, f64>, rows: usize, cols: usize, data: &[f64]) -> Var {
        g.constant(Tensor::matrix(rows, cols, data.to_vec()).unwrap()).unwrap()
    }

    fn item(g: &Graph<'_, f64>, v: Var) -> f64 {
        g.value(v).item()
    }

    #[test]
    fn loss_xy_examples() {
        let gt = Pack::normal(1, &[(10.0, 20.0, 100)]);
        let mut g = g64();
        let exact = mat(&mut g, 2, 2, &[10.0, 20.0, 0.0, 0.0]);
        let l = loss_xy(&mut g, exact, &gt).unwrap();
        assert_eq!(item(&g, l), 0.0);
        let off = mat(&mut g, 2, 2, &[13.0, 24.0, 5.0, 5.0]);
        let l = loss_xy(&mut g, off, &gt).unwrap();
        assert_eq!(item(&g, l), 7.0);

        let gt2 = Pack::normal(1, &[(0.0, 0.0, 100), (5.0, 5.0, 100)]);
        let p = mat(&mut g, 2, 2, &[1.0, 0.0, 5.0, 6.0]);
        let l = loss_xy(&mut g, p, &gt2).unwrap();
        assert_eq!(item(&g, l), 1.0);
        assert!(loss_xy(&mut g, p, &Pack::null(0)).is_err());
    }

    #[test]
    fn loss_token_examples() {
        let mut g = g64();
        let uniform = mat(&mut g, 6, 3, &[1.0 / 3.0; 18]);
        let l = loss_token(&mut g, uniform, &Pack::null(2)).unwrap();
        assert!((item(&g, l) - 6.0 * 3f64.ln()).abs() < 1e-12);
        let mut eos = vec![0.0; 18];
        for i in 0..6 {
            eos[i * 3 + EOS] = 1.0;
        }
        let eos = mat(&mut g, 6, 3, &eos);
        let l = loss_token(&mut g, eos, &Pack::terminal(3)).unwrap();
        assert_eq!(item(&g, l), 0.0);
        assert_eq!(
            token_targets(&Pack::normal(0, &[(1.0, 1.0, 100), (2.0, 2.0, 100)]), 4),
            vec![FIX, FIX, PAD, PAD]
        );
    }

    #[test]
    fn loss_duration_example() {
        let mut g = g64();
        let gt = Pack::normal(0, &[(1.0, 1.0, 300)]);
        let d = mat(&mut g, 2, 1, &[0.25, 9.0]);
        let l = loss_duration(&mut g, d, &gt).unwrap();
        assert!((item(&g, l) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn giou_examples() {
        let a = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(giou(a, a).unwrap(), 1.0);
        assert!((giou([0.0, 0.0, 1.0, 1.0], [1.0, 1.0, 1.0, 1.0]).unwrap() + 0.5).abs() < 1e-12);
        assert!(giou([0.0, 0.0, 0.0, 1.0], a).is_err());
        let mut g = g64();
        let p = mat(&mut g, 1, 4, &[0.2, 0.2, 0.3, 0.4]);
        let (reg, gl) = loss_bbox(&mut g, p, a).unwrap();
        assert!((item(&g, reg) - 0.1).abs() < 1e-12);
        let expect = 1.0 - giou([0.2, 0.2, 0.3, 0.4], a).unwrap();
        assert!((item(&g, gl) - expect).abs() < 1e-12);
        let far = mat(&mut g, 1, 4, &[0.8, 0.8, 0.1, 0.1]);
        let (_, gl) = loss_bbox(&mut g, far, a).unwrap();
        assert!(item(&g, gl) > 1.0);
    }

    #[test]
    fn loss_target_examples() {
        let mut g = g64();
        let uniform = mat(&mut g, 1, 18, &[1.0 / 18.0; 18]);
        let l = loss_target(&mut g, uniform, 4).unwrap();
        assert!((item(&g, l) - 18f64.ln()).abs() < 1e-12);
        let mut miss = vec![0.0; 18];
        miss[0] = 1.0;
        let miss = mat(&mut g, 1, 18, &miss);
        let l = loss_target(&mut g, miss, 3).unwrap();
        assert!((item(&g, l) + 1e-12f64.ln()).abs() < 1e-9);
        assert!(loss_target(&mut g, miss, 18).is_err());
    }

    #[test]
    fn grounding_only_where_flagged() {
        let mut g = g64();
        let one = mat(&mut g, 1, 1, &[1.0]);
        let two = mat(&mut g, 1, 1, &[2.0]);
        let early = PackTerms { l_xy: Some(one), l_token: one, l_d: None, ground: None };
        let (t, b) = total_loss(&mut g, &[early, early], GroundingAverage::Qualifying).unwrap();
        assert_eq!((item(&g, t), b.l_ground), (2.0, 0.0));
        let gr = GroundTerms { l_reg: one, l_giou: one, l_target: two };
        let late = PackTerms { ground: Some(gr), ..early };
        let (t, b) = total_loss(&mut g, &[early, late], GroundingAverage::Qualifying).unwrap();
        assert_eq!(b.l_gaze, 2.0);
        assert_eq!(b.l_ground, 4.0);
        assert_eq!(item(&g, t), 6.0);
        let (t, _) = total_loss(&mut g, &[early, late], GroundingAverage::Batch).unwrap();
        assert_eq!(item(&g, t), 4.0);
    }
}
