//! Prototypical pseudo re-labeling.
//!
//! Pixels labeled background at step `t` may really belong to old classes.
//! The frozen old model proposes a label for each of them; the proposal is
//! kept only when the old model is confident (entropy below the class's
//! median entropy) and when re-weighting its probabilities by feature
//! distance to class prototypes does not change the winner. Everything else
//! is ignored during training.
//!
//! All labels here are head-channel indices; channel 0 is background.

use std::collections::BTreeMap;

use crate::autodiff::{Real, Tensor};
use crate::error::{GscError, Result};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Temperature of the correction-weight softmax.
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

/// Per-pixel training target: a channel index, or `None` for ignored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabelMap {
    pub labels: Vec<Option<usize>>,
}

impl PseudoLabelMap {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// 8-bit rendering with ignored pixels as 255.
    pub fn to_u8(&self) -> Vec<u8> {
        self.labels
            .iter()
            .map(|l| l.map_or(255, |c| c.min(254) as u8))
            .collect()
    }
}

/// Mean old-model feature of background pixels per coarse class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrototypeTable {
    pub dim: usize,
    pub prototypes: BTreeMap<usize, Vec<f64>>,
}

impl PrototypeTable {
    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.prototypes.get(&class).map(Vec::as_slice)
    }
}

/// Streaming sums for [`PrototypeTable`]; partial accumulators merge by addition.
#[derive(Clone, Debug)]
pub struct PrototypeAccumulator {
    dim: usize,
    sums: BTreeMap<usize, (Vec<f64>, u64)>,
}

impl PrototypeAccumulator {
    pub fn new(dim: usize) -> Self {
        PrototypeAccumulator {
            dim,
            sums: BTreeMap::new(),
        }
    }

    /// Adds every pixel whose coarse label is `c` and whose current ground
    /// truth is background to class `c`'s running sum.
    pub fn add<E: Real>(&mut self, features: &Tensor<E>, coarse: &[usize], background: &[bool]) -> Result<()> {
        let (n, f, h, w) = features.dims4("compute_prototypes")?;
        let px = h * w;
        if f != self.dim || coarse.len() != n * px || background.len() != n * px {
            return Err(GscError::contract("compute_prototypes", "inputs are not pixel-aligned"));
        }
        let data = features.data();
        for p in 0..n * px {
            if !background[p] {
                continue;
            }
            let (b, q) = (p / px, p % px);
            let entry = self.sums.entry(coarse[p]).or_insert_with(|| (vec![0.0; f], 0));
            for (k, s) in entry.0.iter_mut().enumerate() {
                *s += data[(b * f + k) * px + q].as_f64();
            }
            entry.1 += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &PrototypeAccumulator) {
        for (c, (s, n)) in &other.sums {
            let e = self.sums.entry(*c).or_insert_with(|| (vec![0.0; self.dim], 0));
            for (a, b) in e.0.iter_mut().zip(s) {
                *a += b;
            }
            e.1 += n;
        }
    }

    pub fn finish(self) -> PrototypeTable {
        let prototypes = self
            .sums
            .into_iter()
            .filter(|(_, (_, n))| *n > 0)
            .map(|(c, (s, n))| (c, s.into_iter().map(|v| v / n as f64).collect()))
            .collect();
        PrototypeTable {
            dim: self.dim,
            prototypes,
        }
    }
}

/// Per-pixel argmax over channels; ties go to the lowest channel.
pub fn coarse_labels<E: Real>(logits: &Tensor<E>) -> Result<Vec<usize>> {
    let (n, k, h, w) = logits.dims4("coarse_labels")?;
    let px = h * w;
    let d = logits.data();
    let mut out = vec![0usize; n * px];
    for b in 0..n {
        for q in 0..px {
            let mut best = 0;
            let mut best_v = d[b * k * px + q];
            for c in 1..k {
                let v = d[(b * k + c) * px + q];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out[b * px + q] = best;
        }
    }
    Ok(out)
}

/// Prototypes over one batch of features; see [`PrototypeAccumulator`] for streaming.
pub fn compute_prototypes<E: Real>(
    features: &Tensor<E>,
    coarse: &[usize],
    background: &[bool],
) -> Result<PrototypeTable> {
    let mut acc = PrototypeAccumulator::new(features.dims4("compute_prototypes")?.1);
    acc.add(features, coarse, background)?;
    Ok(acc.finish())
}

/// Class-wise correction weights for one pixel feature: a softmax over the
/// present prototypes of `-||feature - prototype|| / T`. Returned densely over
/// `channels` entries, with zero for classes that have no prototype.
pub fn correction_weights(
    feature: &[f64],
    prototypes: &PrototypeTable,
    temperature: f64,
    channels: usize,
) -> Result<Vec<f64>> {
    if prototypes.is_empty() {
        return Err(GscError::EmptyPrototypes);
    }
    let scores: Vec<(usize, f64)> = prototypes
        .prototypes
        .iter()
        .filter(|(c, _)| **c < channels)
        .map(|(&c, eta)| {
            let d2: f64 = feature.iter().zip(eta).map(|(a, b)| (a - b) * (a - b)).sum();
            (c, -d2.sqrt() / temperature)
        })
        .collect();
    if scores.is_empty() {
        return Err(GscError::EmptyPrototypes);
    }
    Ok(softmax_sparse(&scores, channels))
}

/// Softmax over `(channel, score)` pairs, scattered into a dense vector.
pub fn softmax_sparse(scores: &[(usize, f64)], channels: usize) -> Vec<f64> {
    let m = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s.1 - m).exp()).sum();
    let mut out = vec![0.0; channels];
    for &(c, s) in scores {
        out[c] = (s - m).exp() / z;
    }
    out
}

/// Shannon entropy (nats) of a distribution, with probabilities clamped at [`PROB_EPS`].
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| v * v.max(PROB_EPS).ln()).sum::<f64>()
}

/// Median old-model entropy per coarse class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EntropyThresholds {
    pub tau: BTreeMap<usize, f64>,
}

impl EntropyThresholds {
    pub fn get(&self, class: usize) -> Option<f64> {
        self.tau.get(&class).copied()
    }
}

/// Collects per-class entropies so medians can be taken over a whole dataset.
#[derive(Clone, Debug, Default)]
pub struct ThresholdAccumulator {
    per_class: BTreeMap<usize, Vec<f64>>,
}

impl ThresholdAccumulator {
    pub fn add<E: Real>(&mut self, probs: &Tensor<E>, coarse: &[usize]) -> Result<()> {
        let (n, k, h, w) = probs.dims4("entropy_thresholds")?;
        let px = h * w;
        if coarse.len() != n * px {
            return Err(GscError::contract("entropy_thresholds", "inputs are not pixel-aligned"));
        }
        let mut dist = vec![0.0; k];
        for (p, &c) in coarse.iter().enumerate() {
            pixel_probs(probs, p, &mut dist);
            self.per_class.entry(c).or_default().push(entropy(&dist));
        }
        Ok(())
    }

    pub fn merge(&mut self, other: ThresholdAccumulator) {
        for (c, mut v) in other.per_class {
            self.per_class.entry(c).or_default().append(&mut v);
        }
    }

    pub fn finish(self) -> EntropyThresholds {
        let tau = self
            .per_class
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(c, v)| (c, median(v)))
            .collect();
        EntropyThresholds { tau }
    }
}

/// Median; the mean of the two middle values for even counts.
pub fn median(mut v: Vec<f64>) -> f64 {
    let n = v.len();
    assert!(n > 0, "median of nothing");
    let mid = n / 2;
    let (_, &mut hi, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        hi
    } else {
        let lo = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

pub fn entropy_thresholds<E: Real>(probs: &Tensor<E>, coarse: &[usize]) -> Result<EntropyThresholds> {
    let mut acc = ThresholdAccumulator::default();
    acc.add(probs, coarse)?;
    Ok(acc.finish())
}

/// Channel distribution of flat pixel `p` of an NCHW tensor.
fn pixel_probs<E: Real>(t: &Tensor<E>, p: usize, out: &mut [f64]) {
    let s = t.shape();
    let (k, px) = (s[1], s[2] * s[3]);
    let (b, q) = (p / px, p % px);
    for (c, o) in out.iter_mut().enumerate().take(k) {
        *o = t.data()[(b * k + c) * px + q].as_f64();
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// The old model's confident proposal for a background pixel, before the
/// prototype check: `Some(c*)` iff `entropy < tau[c*]`.
fn confident_proposal(dist: &[f64], thresholds: &EntropyThresholds) -> Option<usize> {
    let c = argmax(dist);
    let tau = thresholds.get(c)?;
    (entropy(dist) < tau).then_some(c)
}

fn check_aligned<E: Real>(op: &'static str, gt: &[usize], probs: &Tensor<E>) -> Result<(usize, usize)> {
    let (n, k, h, w) = probs.dims4(op)?;
    if gt.len() != n * h * w {
        return Err(GscError::contract(op, "labels and probabilities are not pixel-aligned"));
    }
    Ok((k, h * w))
}

/// Three-case pseudo labels:
/// 1. non-background ground truth keeps its label;
/// 2. a background pixel takes the old model's argmax `c*` when its entropy is
///    below `tau[c*]` and the prototype-weighted argmax is also `c*`;
/// 3. otherwise the pixel is ignored.
///
/// `old_probs` are the old model's softmax outputs over its channels;
/// `features` are the current model's features for the same pixels.
pub fn relabel<E: Real>(
    gt: &[usize],
    old_probs: &Tensor<E>,
    features: &Tensor<E>,
    prototypes: &PrototypeTable,
    thresholds: &EntropyThresholds,
    temperature: f64,
) -> Result<PseudoLabelMap> {
    let (k, px) = check_aligned("relabel", gt, old_probs)?;
    let (fn_, f, fh, fw) = features.dims4("relabel")?;
    if fn_ * fh * fw != gt.len() || f != prototypes.dim {
        return Err(GscError::contract(
            "relabel",
            "features are not pixel-aligned with labels",
        ));
    }
    let mut dist = vec![0.0; k];
    let mut feat = vec![0.0; f];
    let mut labels = Vec::with_capacity(gt.len());
    for (p, &g) in gt.iter().enumerate() {
        if g != 0 {
            labels.push(Some(g));
            continue;
        }
        pixel_probs(old_probs, p, &mut dist);
        let Some(c) = confident_proposal(&dist, thresholds) else {
            labels.push(None);
            continue;
        };
        if prototypes.get(c).is_none() {
            labels.push(None);
            continue;
        }
        let (b, q) = (p / px, p % px);
        for (j, v) in feat.iter_mut().enumerate() {
            *v = features.data()[(b * f + j) * px + q].as_f64();
        }
        let zeta = correction_weights(&feat, prototypes, temperature, k)?;
        let weighted: Vec<f64> = zeta.iter().zip(&dist).map(|(z, p)| z * p).collect();
        labels.push((argmax(&weighted) == c).then_some(c));
    }
    Ok(PseudoLabelMap { labels })
}

/// Entropy-threshold pseudo labels without the prototype check.
pub fn plain_relabel<E: Real>(
    gt: &[usize],
    old_probs: &Tensor<E>,
    thresholds: &EntropyThresholds,
) -> Result<PseudoLabelMap> {
    let (k, _) = check_aligned("plain_relabel", gt, old_probs)?;
    let mut dist = vec![0.0; k];
    let labels = gt
        .iter()
        .enumerate()
        .map(|(p, &g)| {
            if g != 0 {
                return Some(g);
            }
            pixel_probs(old_probs, p, &mut dist);
            confident_proposal(&dist, thresholds)
        })
        .collect();
    Ok(PseudoLabelMap { labels })
}

/// Case counts and quality of old-class pseudo labels against complete labels.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LabelAudit {
    pub pixel_count: u64,
    pub case1: u64,
    pub case2: u64,
    pub ignored: u64,
    /// Old foreground labels assigned to background pixels.
    pub old_labeled: u64,
    /// ... of which match the complete labels.
    pub old_correct: u64,
    /// Background pixels that truly belong to an old foreground class.
    pub old_present: u64,
}

impl LabelAudit {
    /// Tallies a pseudo-label map. `gt` and `gt_full` are channel indices
    /// (classes not yet in the head may carry any channel >= `old_width`).
    pub fn tally(pseudo: &PseudoLabelMap, gt: &[usize], gt_full: &[usize], old_width: usize) -> Self {
        let mut a = LabelAudit::default();
        for ((&l, &g), &f) in pseudo.labels.iter().zip(gt).zip(gt_full) {
            a.pixel_count += 1;
            let truly_old = (1..old_width).contains(&f);
            match l {
                _ if g != 0 => a.case1 += 1,
                Some(c) => {
                    a.case2 += 1;
                    if c != 0 {
                        a.old_labeled += 1;
                        if c == f {
                            a.old_correct += 1;
                        }
                    }
                }
                None => a.ignored += 1,
            }
            if g == 0 && truly_old {
                a.old_present += 1;
            }
        }
        a
    }

    pub fn merge(&mut self, o: &LabelAudit) {
        self.pixel_count += o.pixel_count;
        self.case1 += o.case1;
        self.case2 += o.case2;
        self.ignored += o.ignored;
        self.old_labeled += o.old_labeled;
        self.old_correct += o.old_correct;
        self.old_present += o.old_present;
    }

    /// Fraction of old-class pseudo labels that are correct; 1 when none were assigned.
    pub fn precision(&self) -> f64 {
        if self.old_labeled == 0 {
            1.0
        } else {
            self.old_correct as f64 / self.old_labeled as f64
        }
    }

    /// Fraction of hidden old-class pixels recovered; 0 when there were none.
    pub fn recall(&self) -> f64 {
        if self.old_present == 0 {
            0.0
        } else {
            self.old_correct as f64 / self.old_present as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(pixels: &[&[f64]]) -> Tensor<f64> {
        let k = pixels[0].len();
        let n = pixels.len();
        Tensor::from_fn(&[1, k, 1, n], |i| pixels[i % n][i / n])
    }

    fn feats(pixels: &[&[f64]]) -> Tensor<f64> {
        probs(pixels)
    }

    #[test]
    fn coarse_argmax_and_ties() {
        let l = probs(&[&[0.0, 5.0, 1.0], &[2.0, 2.0, 1.0], &[0.0, 1.0, 1.0]]);
        assert_eq!(coarse_labels(&l).unwrap(), vec![1, 0, 1]);
    }

    #[test]
    fn prototype_means() {
        let f = feats(&[&[1.0, 2.0], &[3.0, 6.0], &[9.0, 9.0]]);
        let t = compute_prototypes(&f, &[1, 1, 2], &[true, true, false]).unwrap();
        assert_eq!(t.get(1).unwrap(), &[2.0, 4.0]);
        assert!(t.get(2).is_none());
        let same = compute_prototypes(&feats(&[&[0.5, 0.5], &[0.5, 0.5]]), &[0, 0], &[true, true]).unwrap();
        assert_eq!(same.get(0).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn zeta_values() {
        let one = PrototypeTable {
            dim: 1,
            prototypes: BTreeMap::from([(2, vec![3.0])]),
        };
        let z = correction_weights(&[0.0], &one, 1.0, 3).unwrap();
        assert_eq!(z, vec![0.0, 0.0, 1.0]);

        let sym = PrototypeTable {
            dim: 1,
            prototypes: BTreeMap::from([(0, vec![-1.0]), (1, vec![1.0])]),
        };
        let z = correction_weights(&[0.0], &sym, 1.0, 2).unwrap();
        assert!((z[0] - 0.5).abs() < 1e-15 && (z[1] - 0.5).abs() < 1e-15);

        // distances 0 and ln 4 -> exp(0) : exp(-ln 4) = 4 : 1
        let d = PrototypeTable {
            dim: 1,
            prototypes: BTreeMap::from([(0, vec![0.0]), (1, vec![4f64.ln()])]),
        };
        let z = correction_weights(&[0.0], &d, 1.0, 2).unwrap();
        assert!((z[0] - 0.8).abs() < 1e-12 && (z[1] - 0.2).abs() < 1e-12);

        assert!(matches!(
            correction_weights(&[0.0], &PrototypeTable::default(), 1.0, 2),
            Err(GscError::EmptyPrototypes)
        ));
    }

    #[test]
    fn thresholds_are_class_medians() {
        let p = probs(&[&[0.5, 0.5], &[0.5, 0.5], &[1.0, 0.0]]);
        let t = entropy_thresholds(&p, &[0, 0, 1]).unwrap();
        assert!((t.get(0).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(t.get(1).unwrap(), 0.0);
        assert_eq!(median(vec![5.0, 1.0, 3.0]), 3.0);
        assert_eq!(median(vec![4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn one_hot_old_predictions_ignore_all_background() {
        let p = probs(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let coarse = coarse_labels(&p).unwrap();
        let t = entropy_thresholds(&p, &coarse).unwrap();
        let m = plain_relabel(&[0, 0], &p, &t).unwrap();
        assert_eq!(m.labels, vec![None, None]);
    }

    /// Pixel 0: foreground GT. Pixel 1: confident, prototype agrees.
    /// Pixel 2: confident, but its feature sits on the other prototype and
    /// the weighting flips the argmax.
    #[test]
    fn three_cases_and_the_flip() {
        let p = probs(&[&[0.1, 0.9, 0.0], &[0.05, 0.95, 0.0], &[0.45, 0.55, 0.0]]);
        let f = feats(&[&[0.0], &[5.0], &[0.0]]);
        let thresholds = EntropyThresholds {
            tau: BTreeMap::from([(0, 1.0), (1, 1.0)]),
        };
        let protos = PrototypeTable {
            dim: 1,
            prototypes: BTreeMap::from([(0, vec![0.0]), (1, vec![5.0])]),
        };
        let gt = [3, 0, 0];
        let m = relabel(&gt, &p, &f, &protos, &thresholds, 1.0).unwrap();
        assert_eq!(m.labels, vec![Some(3), Some(1), None]);
        let plain = plain_relabel(&gt, &p, &thresholds).unwrap();
        assert_eq!(plain.labels, vec![Some(3), Some(1), Some(1)]);
        assert_eq!(m.to_u8(), vec![3, 1, 255]);
    }

    #[test]
    fn missing_prototype_is_ignored() {
        let p = probs(&[&[0.05, 0.95]]);
        let f = feats(&[&[0.0]]);
        let thresholds = EntropyThresholds {
            tau: BTreeMap::from([(1, 1.0)]),
        };
        let protos = PrototypeTable {
            dim: 1,
            prototypes: BTreeMap::from([(0, vec![0.0])]),
        };
        let m = relabel(&[0], &p, &f, &protos, &thresholds, 1.0).unwrap();
        assert_eq!(m.labels, vec![None]);
    }

    #[test]
    fn audit_counts() {
        let pseudo = PseudoLabelMap {
            labels: vec![Some(3), Some(1), Some(2), None, Some(0)],
        };
        let gt = [3, 0, 0, 0, 0];
        let full = [3, 1, 1, 2, 0];
        let a = LabelAudit::tally(&pseudo, &gt, &full, 3);
        assert_eq!((a.case1, a.case2, a.ignored), (1, 3, 1));
        assert_eq!((a.old_labeled, a.old_correct, a.old_present), (2, 1, 3));
        assert_eq!(a.precision(), 0.5);
    }
}
