//! Training objectives.
//!
//! Losses are recorded on a [`Tape`] so they can be differentiated. Class
//! targets are head-channel indices with `None` for ignored pixels.
//! Probability inputs are softmax outputs over the channel axis.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Real, Tape, Tensor, Var};
use crate::error::{GscError, Result};
use crate::relabel::PROB_EPS;

/// Upper clip for step-aware weights.
pub const PSI_MAX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Soft relation distillation.
    pub lambda1: f64,
    /// Sharp confidence (self-entropy).
    pub lambda2: f64,
    /// Pooled feature distillation.
    pub lambda_pd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.3,
            lambda2: 0.1,
            lambda_pd: 0.01,
        }
    }
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda_pd: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_pd", self.lambda_pd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(GscError::contract(
                    "total_loss",
                    format!("{name} must be a non-negative number, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

/// A recorded scalar loss and the number of pixels it averaged over.
#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub var: Var,
    pub counted: usize,
}

impl LossTerm {
    /// True when every pixel was ignored and the loss was defined as zero.
    pub fn all_ignored(&self) -> bool {
        self.counted == 0
    }
}

fn pixel_count<E: Real>(tape: &Tape<E>, probs: Var, op: &'static str) -> Result<(usize, usize)> {
    let (n, k, h, w) = tape.value(probs).dims4(op)?;
    Ok((n * h * w, k))
}

/// Cross-entropy `-mean log p[target]` over non-ignored pixels.
pub fn ce_loss<E: Real>(tape: &mut Tape<E>, probs: Var, targets: &[Option<usize>]) -> Result<LossTerm> {
    let ones = vec![1.0; targets.len()];
    weighted_ce("ce_loss", tape, probs, targets, &ones)
}

/// Step-aware compensated CE: `-mean psi * log p[target]` over non-ignored
/// pixels. `psi` is a constant and receives no gradient.
pub fn sg_loss<E: Real>(tape: &mut Tape<E>, probs: Var, targets: &[Option<usize>], psi: &[f64]) -> Result<LossTerm> {
    weighted_ce("sg_loss", tape, probs, targets, psi)
}

fn weighted_ce<E: Real>(
    op: &'static str,
    tape: &mut Tape<E>,
    probs: Var,
    targets: &[Option<usize>],
    weights: &[f64],
) -> Result<LossTerm> {
    let (px, _) = pixel_count(tape, probs, op)?;
    if targets.len() != px || weights.len() != px {
        return Err(GscError::contract(
            op,
            "targets and weights must have one entry per pixel",
        ));
    }
    let counted = targets.iter().filter(|t| t.is_some()).count();
    if counted == 0 {
        let var = tape.constant(Tensor::scalar(E::zero()));
        return Ok(LossTerm { var, counted });
    }
    let shape = {
        let s = tape.value(probs).shape();
        [s[0], 1, s[2], s[3]]
    };
    let picked = tape.pick_channel(probs, targets.to_vec())?;
    let logp = tape.log_clamped(picked, PROB_EPS)?;
    let inv = -1.0 / counted as f64;
    let coef = Tensor::from_fn(&shape, |p| {
        if targets[p].is_some() {
            E::of(weights[p] * inv)
        } else {
            E::zero()
        }
    });
    let weighted = tape.mul_const(logp, coef)?;
    let var = tape.sum(weighted)?;
    Ok(LossTerm { var, counted })
}

/// Soft relation distillation: `-mean_pixels sum_k soft_k log p_k`. The soft
/// labels are used as given, without normalization.
pub fn sr_loss<E: Real>(tape: &mut Tape<E>, probs: Var, soft: &Tensor<E>) -> Result<LossTerm> {
    let (px, _) = pixel_count(tape, probs, "sr_loss")?;
    if soft.shape() != tape.value(probs).shape() {
        return Err(GscError::ShapeMismatch {
            op: "sr_loss",
            expected: tape.value(probs).shape().to_vec(),
            got: soft.shape().to_vec(),
        });
    }
    let logp = tape.log_clamped(probs, PROB_EPS)?;
    let inv = E::of(-1.0 / px as f64);
    let weighted = tape.mul_const(logp, soft.map(|v| v * inv))?;
    let var = tape.sum(weighted)?;
    Ok(LossTerm { var, counted: px })
}

/// Mean per-pixel self-entropy `-sum_k p_k log p_k`.
pub fn sc_loss<E: Real>(tape: &mut Tape<E>, probs: Var) -> Result<LossTerm> {
    let (px, _) = pixel_count(tape, probs, "sc_loss")?;
    let logp = tape.log_clamped(probs, PROB_EPS)?;
    let plogp = tape.mul(probs, logp)?;
    let s = tape.sum(plogp)?;
    let var = tape.scale(s, -1.0 / px as f64)?;
    Ok(LossTerm { var, counted: px })
}

/// Pooled feature distillation between the trainable model's block
/// activations and constant activations of the frozen model.
///
/// Each layer is compared at full resolution and after 2x2 average pooling.
/// At each scale the activations are averaged along width and along height;
/// the term is the Euclidean distance between the concatenated new and old
/// statistics divided by their element count. Terms are averaged over
/// scales, then layers.
pub fn pd_loss<E: Real>(tape: &mut Tape<E>, new: &[Var], old: &[Tensor<E>]) -> Result<LossTerm> {
    if new.len() != old.len() || new.is_empty() {
        return Err(GscError::contract(
            "pd_loss",
            format!("{} new layers vs {} old layers", new.len(), old.len()),
        ));
    }
    let mut terms = Vec::new();
    for (&a, b) in new.iter().zip(old) {
        if tape.value(a).shape() != b.shape() {
            return Err(GscError::ShapeMismatch {
                op: "pd_loss",
                expected: tape.value(a).shape().to_vec(),
                got: b.shape().to_vec(),
            });
        }
        let b = tape.constant(b.clone());
        let (_, _, h, w) = tape.value(a).dims4("pd_loss")?;
        let mut scales = vec![(a, b)];
        if h >= 2 && w >= 2 {
            let (pa, pb) = (tape.avg_pool2(a)?, tape.avg_pool2(b)?);
            scales.push((pa, pb));
        }
        let n_scales = scales.len() as f64;
        for (x, y) in scales {
            let mut sq_sums = Vec::with_capacity(2);
            let mut count = 0;
            for axis in [3, 2] {
                let (px, py) = (tape.pool_mean(x, axis)?, tape.pool_mean(y, axis)?);
                count += tape.value(px).len();
                let d = tape.sub(px, py)?;
                let d2 = tape.mul(d, d)?;
                sq_sums.push(tape.sum(d2)?);
            }
            let s = tape.add(sq_sums[0], sq_sums[1])?;
            let dist = tape.sqrt(s)?;
            terms.push(tape.scale(dist, 1.0 / (count as f64 * n_scales * new.len() as f64))?);
        }
    }
    let mut var = terms[0];
    for &t in &terms[1..] {
        var = tape.add(var, t)?;
    }
    let counted = tape.value(new[0]).shape()[0];
    Ok(LossTerm { var, counted })
}

/// Handles of the individual objective terms.
#[derive(Clone, Copy, Debug)]
pub struct LossComponents {
    pub sg: Var,
    pub sr: Option<Var>,
    pub sc: Option<Var>,
    pub pd: Option<Var>,
}

/// `L_sg + lambda1 L_sr + lambda2 L_sc + lambda_pd L_pd`. Terms whose weight
/// is zero or which are absent are left out, so all-zero weights return
/// `L_sg` itself.
pub fn total_loss<E: Real>(tape: &mut Tape<E>, c: LossComponents, weights: &LossWeights) -> Result<Var> {
    weights.validate()?;
    let mut total = c.sg;
    for (term, w) in [
        (c.sr, weights.lambda1),
        (c.sc, weights.lambda2),
        (c.pd, weights.lambda_pd),
    ] {
        if let Some(v) = term {
            if w != 0.0 {
                let s = tape.scale(v, w)?;
                total = tape.add(total, s)?;
            }
        }
    }
    Ok(total)
}

/// Soft targets over the full head: old channels carry `sigmoid(old logits)`
/// at every pixel, new channels the one-hot visible label (all zero on
/// background). `gt` holds head-channel indices.
pub fn build_soft_labels<E: Real>(gt: &[usize], old_logits: &Tensor<E>, total_width: usize) -> Result<Tensor<E>> {
    let (n, k_old, h, w) = old_logits.dims4("build_soft_labels")?;
    let px = h * w;
    if gt.len() != n * px || total_width < k_old {
        return Err(GscError::contract(
            "build_soft_labels",
            "labels or widths do not match logits",
        ));
    }
    let mut out = Tensor::zeros(&[n, total_width, h, w]);
    let o = out.data_mut();
    let src = old_logits.data();
    for b in 0..n {
        for c in 0..k_old {
            for q in 0..px {
                o[(b * total_width + c) * px + q] = sigmoid(src[(b * k_old + c) * px + q]);
            }
        }
        for q in 0..px {
            let g = gt[b * px + q];
            if g >= k_old {
                if g >= total_width {
                    return Err(GscError::contract(
                        "build_soft_labels",
                        format!("label {g} outside head"),
                    ));
                }
                o[(b * total_width + g) * px + q] = E::one();
            }
        }
    }
    Ok(out)
}

/// Per-pixel gradient measurement `G = sigmoid_prob[target] - 1`, or `None`
/// for ignored pixels.
pub fn gradient_measurement<E: Real>(sigmoid_probs: &Tensor<E>, targets: &[Option<usize>]) -> Result<Vec<Option<f64>>> {
    let (n, k, h, w) = sigmoid_probs.dims4("gradient_measurement")?;
    let px = h * w;
    if targets.len() != n * px {
        return Err(GscError::contract(
            "gradient_measurement",
            "one target per pixel required",
        ));
    }
    let d = sigmoid_probs.data();
    targets
        .iter()
        .enumerate()
        .map(|(p, t)| match *t {
            None => Ok(None),
            Some(c) if c < k => Ok(Some(d[((p / px) * k + c) * px + p % px].as_f64() - 1.0)),
            Some(c) => Err(GscError::contract(
                "gradient_measurement",
                format!("channel {c} >= {k}"),
            )),
        })
        .collect()
}

/// Which running mean a pixel's gradient feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatGroup {
    Background,
    OldStep(usize),
    Current,
}

/// Groups by target channel. `old_boundaries` are the frozen model's
/// cumulative head widths, so channel `c` in `1..old_boundaries[m]` not
/// covered by an earlier entry belongs to old step `m`.
pub fn stat_group(channel: usize, old_boundaries: &[usize]) -> StatGroup {
    if channel == 0 {
        return StatGroup::Background;
    }
    match old_boundaries.iter().position(|&b| channel < b) {
        Some(m) => StatGroup::OldStep(m),
        None => StatGroup::Current,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum StatsMode {
    /// Means over everything seen since the last `finish_epoch`, published at the boundary.
    ExactEpoch,
    /// Exponential moving average of per-batch means.
    Ema { beta: f64 },
}

impl Default for StatsMode {
    fn default() -> Self {
        StatsMode::Ema { beta: 0.9 }
    }
}

/// Running mean `|G|` per old step and for background.
#[derive(Clone, Debug)]
pub struct GradientStats {
    mode: StatsMode,
    boundaries: Vec<usize>,
    old_means: Vec<Option<f64>>,
    bg_mean: Option<f64>,
    pending_old: Vec<(f64, u64)>,
    pending_bg: (f64, u64),
}

impl GradientStats {
    pub fn new(mode: StatsMode, old_boundaries: &[usize]) -> Self {
        let m = old_boundaries.len();
        GradientStats {
            mode,
            boundaries: old_boundaries.to_vec(),
            old_means: vec![None; m],
            bg_mean: None,
            pending_old: vec![(0.0, 0); m],
            pending_bg: (0.0, 0),
        }
    }

    pub fn mode(&self) -> StatsMode {
        self.mode
    }

    pub fn old_boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    /// `G^m`, absent until a qualifying pixel has been seen.
    pub fn old_mean(&self, m: usize) -> Option<f64> {
        self.old_means.get(m).copied().flatten()
    }

    pub fn background_mean(&self) -> Option<f64> {
        self.bg_mean
    }

    pub fn update(&mut self, g: &[Option<f64>], targets: &[Option<usize>]) -> Result<()> {
        if g.len() != targets.len() {
            return Err(GscError::contract(
                "update_gradient_stats",
                "one measurement per target",
            ));
        }
        let m = self.boundaries.len();
        let mut batch_old = vec![(0.0, 0u64); m];
        let mut batch_bg = (0.0, 0u64);
        for (gv, t) in g.iter().zip(targets) {
            let (Some(gv), Some(c)) = (gv, t) else { continue };
            let slot = match stat_group(*c, &self.boundaries) {
                StatGroup::Background => &mut batch_bg,
                StatGroup::OldStep(s) => &mut batch_old[s],
                StatGroup::Current => continue,
            };
            slot.0 += gv.abs();
            slot.1 += 1;
        }
        match self.mode {
            StatsMode::ExactEpoch => {
                for (p, b) in self.pending_old.iter_mut().zip(&batch_old) {
                    p.0 += b.0;
                    p.1 += b.1;
                }
                self.pending_bg.0 += batch_bg.0;
                self.pending_bg.1 += batch_bg.1;
            }
            StatsMode::Ema { beta } => {
                let blend = |cur: Option<f64>, (s, n): (f64, u64)| match (cur, n) {
                    (c, 0) => c,
                    (None, n) => Some(s / n as f64),
                    (Some(c), n) => Some(beta * c + (1.0 - beta) * (s / n as f64)),
                };
                for (cur, b) in self.old_means.iter_mut().zip(batch_old) {
                    *cur = blend(*cur, b);
                }
                self.bg_mean = blend(self.bg_mean, batch_bg);
            }
        }
        Ok(())
    }

    /// Publishes the epoch's pooled means in exact mode; a group with no
    /// pixels this epoch becomes absent. No effect in EMA mode.
    pub fn finish_epoch(&mut self) {
        if self.mode != StatsMode::ExactEpoch {
            return;
        }
        let mean = |(s, n): (f64, u64)| (n > 0).then(|| s / n as f64);
        self.old_means = self.pending_old.iter().map(|&p| mean(p)).collect();
        self.bg_mean = mean(self.pending_bg);
        self.pending_old.iter_mut().for_each(|p| *p = (0.0, 0));
        self.pending_bg = (0.0, 0);
    }
}

/// Step-aware weights `psi = |G| / G^group`, clipped to `[0, psi_max]`.
/// Current-class pixels, ignored pixels and groups without statistics or
/// with a zero mean get 1.
pub fn step_aware_weights(
    g: &[Option<f64>],
    targets: &[Option<usize>],
    stats: &GradientStats,
    psi_max: f64,
) -> Vec<f64> {
    g.iter()
        .zip(targets)
        .map(|(gv, t)| {
            let (Some(gv), Some(c)) = (gv, t) else { return 1.0 };
            let mean = match stat_group(*c, stats.old_boundaries()) {
                StatGroup::Background => stats.background_mean(),
                StatGroup::OldStep(m) => stats.old_mean(m),
                StatGroup::Current => None,
            };
            match mean {
                Some(mu) if mu > 0.0 => (gv.abs() / mu).clamp(0.0, psi_max),
                _ => 1.0,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check, Tolerance};
    use crate::autodiff::softmax_channels;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn rand_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| r.random_range(-2.0..2.0))
    }

    fn probs_of(t: &mut Tape<f64>, logits: Tensor<f64>) -> Var {
        let l = t.constant(logits);
        t.softmax(l).unwrap()
    }

    #[test]
    fn ce_uniform_is_ln_k() {
        let mut t = Tape::new();
        let p = probs_of(&mut t, Tensor::zeros(&[1, 4, 2, 2]));
        let l = ce_loss(&mut t, p, &[Some(0), Some(3), Some(1), None]).unwrap();
        assert!((t.value(l.var).item() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(l.counted, 3);
    }

    #[test]
    fn ce_perfect_is_near_zero_and_all_ignored_is_zero() {
        let mut t = Tape::new();
        let p = probs_of(
            &mut t,
            Tensor::from_fn(&[1, 2, 1, 1], |i| if i == 1 { 40.0 } else { 0.0 }),
        );
        let l = ce_loss(&mut t, p, &[Some(1)]).unwrap();
        assert!(t.value(l.var).item() <= 1.2e-7);
        let z = ce_loss(&mut t, p, &[None]).unwrap();
        assert!(z.all_ignored());
        assert_eq!(t.value(z.var).item(), 0.0);
    }

    #[test]
    fn ce_matches_scalar_recomputation() {
        let mut r = rng();
        let logits = rand_tensor(&[2, 3, 2, 3], &mut r);
        let targets: Vec<Option<usize>> = (0..12).map(|i| (i % 5 != 0).then_some(i % 3)).collect();
        let probs = softmax_channels(&logits).unwrap();
        let mut s = 0.0;
        let mut n = 0;
        for (p, tgt) in targets.iter().enumerate() {
            if let Some(c) = tgt {
                s -= probs.data()[((p / 6) * 3 + c) * 6 + p % 6].ln();
                n += 1;
            }
        }
        let mut t = Tape::new();
        let pv = probs_of(&mut t, logits);
        let l = ce_loss(&mut t, pv, &targets).unwrap();
        assert!((t.value(l.var).item() - s / n as f64).abs() < 1e-12);
    }

    #[test]
    fn sg_reduces_to_ce_and_is_linear_in_psi() {
        let mut r = rng();
        let logits = rand_tensor(&[1, 3, 2, 2], &mut r);
        let targets = vec![Some(0), Some(2), None, Some(1)];
        let mut t = Tape::new();
        let p = probs_of(&mut t, logits);
        let ce = ce_loss(&mut t, p, &targets).unwrap();
        let sg = sg_loss(&mut t, p, &targets, &[1.0; 4]).unwrap();
        assert_eq!(t.value(ce.var).item(), t.value(sg.var).item());

        let one = sg_loss(&mut t, p, &targets, &[0.0, 1.0, 0.0, 0.0]).unwrap();
        let two = sg_loss(&mut t, p, &targets, &[0.0, 2.0, 0.0, 0.0]).unwrap();
        assert!((2.0 * t.value(one.var).item() - t.value(two.var).item()).abs() < 1e-12);
    }

    #[test]
    fn sr_of_own_distribution_is_entropy() {
        let mut r = rng();
        let logits = rand_tensor(&[1, 4, 3, 3], &mut r);
        let probs = softmax_channels(&logits).unwrap();
        let mut t = Tape::new();
        let p = probs_of(&mut t, logits);
        let sr = sr_loss(&mut t, p, &probs).unwrap();
        let sc = sc_loss(&mut t, p).unwrap();
        assert!((t.value(sr.var).item() - t.value(sc.var).item()).abs() < 1e-12);
        let zero = sr_loss(&mut t, p, &Tensor::zeros(&[1, 4, 3, 3])).unwrap();
        assert_eq!(t.value(zero.var).item(), 0.0);
    }

    #[test]
    fn sc_bounds() {
        let mut t = Tape::new();
        let u = probs_of(&mut t, Tensor::zeros(&[1, 5, 1, 2]));
        let sc = sc_loss(&mut t, u).unwrap();
        assert!((t.value(sc.var).item() - 5f64.ln()).abs() < 1e-12);
        let oh = t.constant(Tensor::from_fn(&[1, 3, 1, 1], |i| if i == 2 { 1.0 } else { 0.0 }));
        let sc = sc_loss(&mut t, oh).unwrap();
        assert_eq!(t.value(sc.var).item(), 0.0);
    }

    #[test]
    fn soft_label_construction() {
        let old = Tensor::from_fn(&[1, 2, 1, 3], |_| 0.0);
        let soft = build_soft_labels(&[0, 2, 3], &old, 4).unwrap();
        let at = |c: usize, q: usize| soft.data()[c * 3 + q];
        for q in 0..3 {
            assert_eq!(at(0, q), 0.5);
            assert_eq!(at(1, q), 0.5);
        }
        assert_eq!((at(2, 0), at(3, 0)), (0.0, 0.0));
        assert_eq!((at(2, 1), at(3, 1)), (1.0, 0.0));
        assert_eq!((at(2, 2), at(3, 2)), (0.0, 1.0));
    }

    #[test]
    fn pd_zero_for_identical_and_positive_otherwise() {
        let mut r = rng();
        let a = rand_tensor(&[1, 2, 4, 4], &mut r);
        let mut t = Tape::new();
        let v = t.param(a.clone());
        let l = pd_loss(&mut t, &[v], std::slice::from_ref(&a)).unwrap();
        assert_eq!(t.value(l.var).item(), 0.0);
        let mut b = a.clone();
        b.data_mut()[5] += 0.1;
        let l = pd_loss(&mut t, &[v], &[b]).unwrap();
        assert!(t.value(l.var).item() > 0.0);
        assert!(pd_loss(&mut t, &[v], &[]).is_err());
    }

    #[test]
    fn total_loss_reductions() {
        let mut t = Tape::<f64>::new();
        let parts: Vec<Var> = [1.5, 2.0, 0.5, 4.0]
            .iter()
            .map(|&v| t.param(Tensor::scalar(v)))
            .collect();
        let c = LossComponents {
            sg: parts[0],
            sr: Some(parts[1]),
            sc: Some(parts[2]),
            pd: Some(parts[3]),
        };
        let z = total_loss(&mut t, c, &LossWeights::ZERO).unwrap();
        assert_eq!(z, parts[0]);
        let d = total_loss(&mut t, c, &LossWeights::default()).unwrap();
        assert!((t.value(d).item() - (1.5 + 0.3 * 2.0 + 0.1 * 0.5 + 0.01 * 4.0)).abs() < 1e-12);
        let bad = LossWeights {
            lambda1: -0.1,
            ..LossWeights::default()
        };
        assert!(total_loss(&mut t, c, &bad).is_err());
    }

    #[test]
    fn gradient_measurement_values() {
        let s = Tensor::from_fn(&[1, 2, 1, 2], |i| [1.0, 0.5, 0.3, 0.9][i]);
        let g = gradient_measurement(&s, &[Some(0), Some(1)]).unwrap();
        assert_eq!(g[0], Some(0.0));
        assert!((g[1].unwrap() + 0.1).abs() < 1e-12);
        let half = Tensor::from_fn(&[1, 1, 1, 1], |_| 0.5);
        assert_eq!(gradient_measurement(&half, &[Some(0)]).unwrap(), vec![Some(-0.5)]);
        assert_eq!(gradient_measurement(&half, &[None]).unwrap(), vec![None]);
    }

    #[test]
    fn stats_routing_and_psi() {
        // old head: step 0 covers channels 0..3, step 1 covers 3..4; current step adds 4..
        let bounds = [3, 4];
        let targets = vec![Some(0), Some(1), Some(2), Some(3), Some(4), None];
        let g = vec![Some(-0.4), Some(-0.2), Some(-0.6), Some(-0.3), Some(-0.9), Some(-0.5)];
        let mut st = GradientStats::new(StatsMode::ExactEpoch, &bounds);
        st.update(&g, &targets).unwrap();
        assert_eq!(st.old_mean(0), None);
        st.finish_epoch();
        assert!((st.old_mean(0).unwrap() - 0.4).abs() < 1e-12);
        assert!((st.old_mean(1).unwrap() - 0.3).abs() < 1e-12);
        assert!((st.background_mean().unwrap() - 0.4).abs() < 1e-12);
        let psi = step_aware_weights(&g, &targets, &st, PSI_MAX);
        assert!((psi[0] - 1.0).abs() < 1e-12);
        assert!((psi[1] - 0.5).abs() < 1e-12);
        assert!((psi[2] - 1.5).abs() < 1e-12);
        assert!((psi[3] - 1.0).abs() < 1e-12);
        assert_eq!(psi[4], 1.0);
        assert_eq!(psi[5], 1.0);
    }

    #[test]
    fn exact_epoch_pools_batches_and_ema_blends() {
        let bounds = [3];
        let mut st = GradientStats::new(StatsMode::ExactEpoch, &bounds);
        st.update(&[Some(-0.2), Some(-0.4)], &[Some(1), Some(2)]).unwrap();
        st.update(&[Some(-0.9)], &[Some(1)]).unwrap();
        st.finish_epoch();
        assert!((st.old_mean(0).unwrap() - 0.5).abs() < 1e-12);
        st.finish_epoch();
        assert_eq!(st.old_mean(0), None);

        let mut e = GradientStats::new(StatsMode::Ema { beta: 0.9 }, &bounds);
        e.update(&[Some(-0.2)], &[Some(1)]).unwrap();
        assert!((e.old_mean(0).unwrap() - 0.2).abs() < 1e-12);
        e.update(&[Some(-1.0)], &[Some(1)]).unwrap();
        assert!((e.old_mean(0).unwrap() - 0.28).abs() < 1e-12);
        assert_eq!(e.background_mean(), None);
    }

    #[test]
    fn psi_clips() {
        let mut st = GradientStats::new(StatsMode::ExactEpoch, &[2]);
        st.update(&[Some(-0.01)], &[Some(1)]).unwrap();
        st.finish_epoch();
        assert_eq!(step_aware_weights(&[Some(-1.0)], &[Some(1)], &st, PSI_MAX), vec![10.0]);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut r = rng();
        let tol = Tolerance::default();
        let logits = rand_tensor(&[1, 3, 3, 3], &mut r);
        let targets: Vec<Option<usize>> = (0..9).map(|i| (i != 4).then_some(i % 3)).collect();
        let psi: Vec<f64> = (0..9).map(|i| 0.5 + 0.2 * i as f64).collect();
        let soft = Tensor::from_fn(&[1, 3, 3, 3], |i| (i % 7) as f64 / 7.0);
        let res = check(
            &[logits],
            |t, v| {
                let p = t.softmax(v[0])?;
                let sg = sg_loss(t, p, &targets, &psi)?;
                let sr = sr_loss(t, p, &soft)?;
                let sc = sc_loss(t, p)?;
                let c = LossComponents {
                    sg: sg.var,
                    sr: Some(sr.var),
                    sc: Some(sc.var),
                    pd: None,
                };
                total_loss(t, c, &LossWeights::default())
            },
            tol,
            None,
            &mut r,
        )
        .unwrap();
        assert!(res.passed(), "{res:?}");

        let act = rand_tensor(&[1, 2, 4, 4], &mut r);
        let old = rand_tensor(&[1, 2, 4, 4], &mut r);
        let res = check(
            &[act],
            |t, v| Ok(pd_loss(t, &[v[0]], std::slice::from_ref(&old))?.var),
            tol,
            None,
            &mut r,
        )
        .unwrap();
        assert!(res.passed(), "{res:?}");
    }
}
