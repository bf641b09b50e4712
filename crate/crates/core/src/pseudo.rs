//! Online pixel-level pseudo-supervision for the segmentation head.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::loc_prior::OldModelOutput;
use crate::ops;
use crate::pooling::NormalizedMap;
use crate::taxonomy::IncrementalSchedule;

/// Index of the largest entry, lowest index on ties.
fn argmax_lowest(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, v) in values.enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best.0
}

/// Per-pixel argmax class channel, `(N, H, W)` in row-major order.
pub fn argmax_channels(probs: &Tensor) -> Result<Vec<usize>> {
    let (n, c, h, w) = probs.dims4()?;
    let values = ops::to_f64_vec(probs)?;
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        let base = b * c * hw;
        for i in 0..hw {
            out.push(argmax_lowest((0..c).map(|k| values[base + k * hw + i])));
        }
    }
    Ok(out)
}

/// One-hot encoding of the per-pixel argmax of `m`.
pub fn hard_labels(m: &NormalizedMap) -> Result<Tensor> {
    let probs = m.probs();
    let (n, c, h, w) = probs.dims4()?;
    let hw = h * w;
    let mut one_hot = vec![0f64; n * c * hw];
    for (p, k) in argmax_channels(probs)?.into_iter().enumerate() {
        let (b, i) = (p / hw, p % hw);
        one_hot[b * c * hw + k * hw + i] = 1.0;
    }
    Ok(Tensor::from_vec(one_hot, (n, c, h, w), probs.device())?.to_dtype(probs.dtype())?)
}

/// `q = α q_hard + (1 − α) m`, with `m` taken as a constant.
pub fn smooth_labels(q_hard: &Tensor, m: &NormalizedMap, alpha: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("smoothing alpha {alpha} outside [0, 1]")));
    }
    if q_hard.dims() != m.probs().dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", q_hard.dims(), m.probs().dims())));
    }
    let soft = m.probs().detach().affine(1.0 - alpha, 0.0)?;
    Ok((q_hard.detach().affine(alpha, 0.0)? + soft)?)
}

/// Bilinear upsampling of scores to the segmentation output size.
pub fn upsample_scores(map: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (_, _, h, w) = map.dims4()?;
    if target.0 < h || target.1 < w {
        return Err(Error::Unsupported(format!(
            "upsampling {h}x{w} to {}x{} would downscale",
            target.0, target.1
        )));
    }
    Ok(ops::bilinear_resize(map, target)?)
}

/// Pixel-level targets `q̂` for the segmentation head.
#[derive(Debug, Clone)]
pub struct PseudoSupervision {
    q_hat: Tensor,
    alpha: f64,
}

impl PseudoSupervision {
    pub fn new(q_hat: Tensor, alpha: f64) -> Result<Self> {
        q_hat.dims4()?;
        check_unit_interval(&q_hat)?;
        Ok(Self {
            q_hat: q_hat.detach(),
            alpha,
        })
    }

    pub fn q_hat(&self) -> &Tensor {
        &self.q_hat
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

fn check_unit_interval(q: &Tensor) -> Result<()> {
    if ops::to_f64_vec(q)?.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::ContractViolation("pseudo-supervision outside [0, 1]".into()));
    }
    Ok(())
}

/// Merges the smoothed localizer labels with the old model: background takes
/// the smaller of the two, new classes follow `q`, old classes follow the old
/// model.
pub fn compose_supervision(
    q: &Tensor,
    old: &OldModelOutput,
    schedule: &IncrementalSchedule,
    t: usize,
    alpha: f64,
) -> Result<PseudoSupervision> {
    let n_seen = schedule.seen_classes(t)?.len();
    let n_old = schedule.old_classes(t)?.len();
    let (_, c, h, w) = q.dims4()?;
    if c != n_seen {
        return Err(Error::Schema(format!("soft labels have {c} channels, step {t} has {n_seen} classes")));
    }
    if old.num_classes() != n_old || n_old == 0 {
        return Err(Error::Schema(format!(
            "old model has {} channels, step {t} expects {n_old}",
            old.num_classes()
        )));
    }
    if old.spatial() != (h, w) {
        return Err(Error::shape(format!("old output {:?} vs labels {h}x{w}", old.spatial())));
    }
    let omega = old.tensor().to_dtype(q.dtype())?;
    let background = q.narrow(1, 0, 1)?.minimum(&omega.narrow(1, 0, 1)?)?;
    let old_rest = omega.narrow(1, 1, n_old - 1)?;
    let new = q.narrow(1, n_old, n_seen - n_old)?;
    PseudoSupervision::new(Tensor::cat(&[&background, &old_rest, &new], 1)?, alpha)
}

/// Multi-label logistic loss between segmentation logits `p` and `q̂`, summed
/// over classes and averaged over pixels and images.
pub fn segmentation_loss(p: &Tensor, q_hat: &PseudoSupervision) -> Result<Tensor> {
    let target = q_hat.q_hat();
    if p.dims() != target.dims() {
        return Err(Error::shape(format!("logits {:?} vs targets {:?}", p.dims(), target.dims())));
    }
    let (n, _, h, w) = p.dims4()?;
    let per_element = ops::bce_with_logits(p, &target.to_dtype(p.dtype())?)?;
    Ok(per_element.sum_all()?.affine(1.0 / (n * h * w) as f64, 0.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::IncrementalSchedule;
    use approx::assert_relative_eq;
    use candle_core::{Device, Var};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn t(values: Vec<f64>, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(values, shape, &Device::Cpu).unwrap()
    }

    fn dist(values: Vec<f64>, shape: (usize, usize, usize, usize)) -> NormalizedMap {
        NormalizedMap::from_probs(t(values, shape)).unwrap()
    }

    fn schedule() -> IncrementalSchedule {
        IncrementalSchedule::new(vec![vec![1, 2], vec![3, 4]], BTreeMap::new()).unwrap()
    }

    #[test]
    fn hard_labels_pick_argmax_and_lowest_tie() {
        let m = dist(vec![0.7, 0.5, 0.2, 0.5, 0.1, 0.0], (1, 3, 1, 2));
        let q = ops::to_f64_vec(&hard_labels(&m).unwrap()).unwrap();
        assert_eq!(q, vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn smoothing_endpoints_and_midpoint() {
        let m = dist(vec![0.7, 0.3], (1, 2, 1, 1));
        let hard = hard_labels(&m).unwrap();
        let at = |a| ops::to_f64_vec(&smooth_labels(&hard, &m, a).unwrap()).unwrap();
        assert_eq!(at(1.0), vec![1.0, 0.0]);
        assert_eq!(at(0.0), vec![0.7, 0.3]);
        let mid = at(0.5);
        assert_relative_eq!(mid[0], 0.85, epsilon = 1e-12);
        assert_relative_eq!(mid[1], 0.15, epsilon = 1e-12);
        assert!(matches!(smooth_labels(&hard, &m, 1.5), Err(Error::Config(_))));
        assert!(matches!(smooth_labels(&hard, &m, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn composition_rules() {
        // Channels at step 1: bg, 1, 2 (old), 3, 4 (new).
        let q = t(vec![0.6, 0.1, 0.1, 0.1, 0.1], (1, 5, 1, 1));
        let old = OldModelOutput::new(t(vec![0.9, 0.8, 0.05], (1, 3, 1, 1))).unwrap();
        let s = compose_supervision(&q, &old, &schedule(), 1, 0.5).unwrap();
        assert_eq!(ops::to_f64_vec(s.q_hat()).unwrap(), vec![0.6, 0.8, 0.05, 0.1, 0.1]);

        let old = OldModelOutput::new(t(vec![0.2, 0.8, 0.05], (1, 3, 1, 1))).unwrap();
        let s = compose_supervision(&q, &old, &schedule(), 1, 0.5).unwrap();
        assert_eq!(ops::to_f64_vec(s.q_hat()).unwrap()[0], 0.2);
    }

    #[test]
    fn composition_checks_channel_bookkeeping() {
        let q = t(vec![0.2; 4], (1, 4, 1, 1));
        let old = OldModelOutput::new(t(vec![0.5; 3], (1, 3, 1, 1))).unwrap();
        assert!(matches!(compose_supervision(&q, &old, &schedule(), 1, 0.5), Err(Error::Schema(_))));
        let q = t(vec![0.2; 5], (1, 5, 1, 1));
        let old = OldModelOutput::new(t(vec![0.5; 2], (1, 2, 1, 1))).unwrap();
        assert!(matches!(compose_supervision(&q, &old, &schedule(), 1, 0.5), Err(Error::Schema(_))));
    }

    #[test]
    fn upsampling() {
        let x = t(vec![1.0, 2.0, 3.0, 4.0], (1, 1, 2, 2));
        assert_eq!(ops::to_f64_vec(&upsample_scores(&x, (2, 2)).unwrap()).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        let c = upsample_scores(&t(vec![0.3; 4], (1, 1, 2, 2)), (7, 5)).unwrap();
        assert!(ops::to_f64_vec(&c).unwrap().iter().all(|v| (v - 0.3).abs() < 1e-12));
        assert!(matches!(upsample_scores(&x, (1, 4)), Err(Error::Unsupported(_))));
    }

    #[test]
    fn checkerboard_upsampling_matches_closed_form() {
        // Half-pixel centres: output pixel o maps to source coordinate
        // (o + 0.5) / 2 - 0.5, clamped to [0, 1].
        let src = [[1.0, 0.0], [0.0, 1.0]];
        let coord = |o: usize| ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
        let got = ops::to_f64_vec(&upsample_scores(&t(vec![1.0, 0.0, 0.0, 1.0], (1, 1, 2, 2)), (4, 4)).unwrap()).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let (fy, fx) = (coord(y), coord(x));
                let want = src[0][0] * (1.0 - fy) * (1.0 - fx)
                    + src[0][1] * (1.0 - fy) * fx
                    + src[1][0] * fy * (1.0 - fx)
                    + src[1][1] * fy * fx;
                assert_relative_eq!(got[y * 4 + x], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn segmentation_loss_limits() {
        let q = PseudoSupervision::new(t(vec![1.0, 0.0], (1, 2, 1, 1)), 0.5).unwrap();
        let loss = segmentation_loss(&t(vec![60.0, -60.0], (1, 2, 1, 1)), &q).unwrap();
        assert!(loss.to_scalar::<f64>().unwrap() < 1e-20);

        let q = PseudoSupervision::new(t(vec![0.3, 0.9, 0.0], (1, 3, 1, 1)), 0.5).unwrap();
        let loss = segmentation_loss(&t(vec![0.0; 3], (1, 3, 1, 1)), &q).unwrap();
        assert_relative_eq!(loss.to_scalar::<f64>().unwrap(), 3.0 * 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn out_of_range_targets_are_rejected() {
        assert!(matches!(
            PseudoSupervision::new(t(vec![1.2, 0.0], (1, 2, 1, 1)), 0.5),
            Err(Error::ContractViolation(_))
        ));
    }

    fn loop_oracle(p: &[f64], q: &[f64], c: usize, hw: usize) -> f64 {
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut total = 0.0;
        for i in 0..hw {
            for k in 0..c {
                let (pk, qk) = (p[k * hw + i], q[k * hw + i]);
                total -= qk * sig(pk).ln() + (1.0 - qk) * (1.0 - sig(pk)).ln();
            }
        }
        total / hw as f64
    }

    #[test]
    fn segmentation_loss_matches_loop_oracle() {
        let p = vec![0.3, -1.2, 2.0, 0.1, -0.7, 0.9, 1.4, -2.2, 0.0, 0.5, -0.4, 1.1];
        let q = vec![0.9, 0.1, 0.5, 0.0, 1.0, 0.3, 0.7, 0.2, 0.25, 0.6, 0.05, 0.8];
        let target = PseudoSupervision::new(t(q.clone(), (1, 3, 2, 2)), 0.5).unwrap();
        let got = segmentation_loss(&t(p.clone(), (1, 3, 2, 2)), &target).unwrap().to_scalar::<f64>().unwrap();
        assert_relative_eq!(got, loop_oracle(&p, &q, 3, 4), epsilon = 1e-9);
    }

    #[test]
    fn segmentation_gradient_matches_finite_differences() {
        let p0 = vec![0.3, -1.2, 2.0, 0.1, -0.7, 0.9];
        let q = vec![0.9, 0.1, 0.5, 0.0, 1.0, 0.3];
        let p = Var::from_tensor(&t(p0.clone(), (1, 3, 2, 1))).unwrap();
        let target = PseudoSupervision::new(t(q.clone(), (1, 3, 2, 1)), 0.5).unwrap();
        let loss = segmentation_loss(p.as_tensor(), &target).unwrap();
        let grad = ops::to_f64_vec(loss.backward().unwrap().get(p.as_tensor()).unwrap()).unwrap();
        let h = 1e-6;
        for k in 0..p0.len() {
            let (mut up, mut down) = (p0.clone(), p0.clone());
            up[k] += h;
            down[k] -= h;
            let fd = (loop_oracle(&up, &q, 3, 2) - loop_oracle(&down, &q, 3, 2)) / (2.0 * h);
            assert!((grad[k] - fd).abs() <= 1e-4 * fd.abs().max(1e-8), "{k}: {} vs {fd}", grad[k]);
        }
    }

    #[test]
    fn no_gradient_reaches_localizer_or_old_model() {
        let z = Var::from_tensor(&t(vec![0.4, -0.3, 1.0, 0.2, 0.0], (1, 5, 1, 1))).unwrap();
        let old_logits = Var::from_tensor(&t(vec![1.0, -0.5, 0.3], (1, 3, 1, 1))).unwrap();
        let m = crate::pooling::softmax_normalize(&crate::pooling::ScoreMap::new(z.as_tensor().clone()).unwrap()).unwrap();
        let q = smooth_labels(&hard_labels(&m).unwrap(), &m, 0.5).unwrap();
        let old = OldModelOutput::from_logits(old_logits.as_tensor()).unwrap();
        let target = compose_supervision(&q, &old, &schedule(), 1, 0.5).unwrap();
        let p = Var::from_tensor(&t(vec![0.0; 5], (1, 5, 1, 1))).unwrap();
        let grads = segmentation_loss(p.as_tensor(), &target).unwrap().backward().unwrap();
        assert!(grads.get(p.as_tensor()).is_some());
        assert!(grads.get(z.as_tensor()).is_none());
        assert!(grads.get(old_logits.as_tensor()).is_none());
    }

    fn simplex(c: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, c).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn smoothed_labels_stay_on_the_simplex(m in simplex(4), alpha in 0.0f64..=1.0) {
            let m = dist(m, (1, 4, 1, 1));
            let q = ops::to_f64_vec(&smooth_labels(&hard_labels(&m).unwrap(), &m, alpha).unwrap()).unwrap();
            let probs = ops::to_f64_vec(m.probs()).unwrap();
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (qc, mc) in q.iter().zip(&probs) {
                prop_assert!(*qc >= alpha.min((1.0 - alpha) * mc) - 1e-12);
                prop_assert!(*qc <= alpha + (1.0 - alpha) * mc + 1e-12);
            }
        }

        #[test]
        fn composed_background_is_monotone_and_bounded(
            qb in 0.0f64..=1.0, ob in 0.0f64..=1.0, bump in 0.0f64..=1.0,
        ) {
            let q = t(vec![qb, 0.1, 0.2, 0.3, 0.4], (1, 5, 1, 1));
            let compose = |b: f64| {
                let old = OldModelOutput::new(t(vec![b, 0.5, 0.5], (1, 3, 1, 1))).unwrap();
                ops::to_f64_vec(compose_supervision(&q, &old, &schedule(), 1, 0.5).unwrap().q_hat()).unwrap()
            };
            let lo = compose(ob);
            let hi = compose((ob + bump).min(1.0));
            prop_assert!(lo[0] <= qb && lo[0] <= ob);
            prop_assert!(hi[0] >= lo[0] && hi[0] <= qb);
            prop_assert!(lo.iter().all(|v| *v <= 1.0));
        }
    }
}
