//! The incremental protocol: supervised step 0, then one training run per
//! later step in which only the new classes are labeled.
//!
//! Training is single-threaded and fully deterministic: batch order is a
//! function of `(seed, step, epoch)` and every reduction runs in a fixed
//! order.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softmax_channels, Real, Tape, Tensor, Var};
use crate::error::{GscError, Result};
use crate::losses::{
    build_soft_labels, gradient_measurement, pd_loss, sc_loss, sg_loss, sr_loss, stat_group, step_aware_weights,
    total_loss, GradientStats, LossComponents, LossWeights, StatGroup, StatsMode, PSI_MAX,
};
use crate::metrics::{
    forgetting_pace, grouped_miou, iou_per_class, ClassIouRow, ConfusionMatrix, GroupedMiou, PaceRow, SummaryRow,
};
use crate::relabel::{
    coarse_labels, plain_relabel, relabel, EntropyThresholds, LabelAudit, PrototypeAccumulator, PrototypeTable,
    PseudoLabelMap, ThresholdAccumulator, DEFAULT_TEMPERATURE,
};
use crate::scenario::{build_eval_set, build_joint_dataset, build_step_dataset, EvalSet, ScenarioSpec, StepDataset};
use crate::segnet::{encode_checkpoint, Architecture, ForwardVars, HeadInit, ModelSnapshot, SegNetwork};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs_per_step: usize,
    pub batch_size: usize,
    pub lr_step0: f64,
    pub lr_incremental: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub lr_decay: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weights: LossWeights,
    pub stats_mode: StatsMode,
    pub psi_max: f64,
    pub temperature: f64,
    pub head_init: HeadInit,
    pub architecture: Architecture,
    pub precision: Precision,
    /// Images per inference chunk outside the training loop.
    pub eval_chunk: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_per_step: 30,
            batch_size: 8,
            lr_step0: 1e-2,
            lr_incremental: 1e-3,
            lr_decay: 0.9,
            momentum: 0.9,
            nesterov: true,
            weights: LossWeights::default(),
            stats_mode: StatsMode::default(),
            psi_max: PSI_MAX,
            temperature: DEFAULT_TEMPERATURE,
            head_init: HeadInit::default(),
            architecture: Architecture::default(),
            precision: Precision::default(),
            eval_chunk: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_step0", self.lr_step0),
            ("lr_incremental", self.lr_incremental),
            ("lr_decay", self.lr_decay),
            ("psi_max", self.psi_max),
            ("temperature", self.temperature),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GscError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(GscError::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.epochs_per_step == 0 || self.batch_size == 0 || self.eval_chunk == 0 {
            return Err(GscError::Config(
                "epochs, batch size and eval chunk must be at least 1".into(),
            ));
        }
        if let StatsMode::Ema { beta } = self.stats_mode {
            if !(0.0..1.0).contains(&beta) {
                return Err(GscError::Config(format!("ema beta must be in [0, 1), got {beta}")));
            }
        }
        self.weights.validate().map_err(|e| GscError::Config(e.to_string()))
    }
}

/// `lr0 * decay^epoch`.
pub fn learning_rate(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Visit order of `n` training images; a pure function of its arguments.
pub fn epoch_order(seed: u64, step: usize, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, step as u64 + 1, epoch as u64 + 1));
    order.shuffle(&mut rng);
    order
}

/// Source of fresh parameters (step-0 network, new head rows) for `step`.
pub fn init_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, 0xA11CE, step as u64))
}

/// SGD with (optionally Nesterov) momentum and no weight decay.
#[derive(Clone, Debug)]
pub struct Sgd<E> {
    momentum: E,
    nesterov: bool,
    velocity: Vec<Tensor<E>>,
}

impl<E: Real> Sgd<E> {
    pub fn new(net: &SegNetwork<E>, momentum: f64, nesterov: bool) -> Self {
        Sgd {
            momentum: E::of(momentum),
            nesterov,
            velocity: net.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// `v <- mu v + g`; `p <- p - lr (g + mu v)` with Nesterov, else `p <- p - lr v`.
    pub fn step(&mut self, params: Vec<&mut Tensor<E>>, grads: &[Option<&Tensor<E>>], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(GscError::contract("sgd", "parameter count changed"));
        }
        let lr = E::of(lr);
        for ((p, v), g) in params.into_iter().zip(&mut self.velocity).zip(grads) {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(GscError::contract("sgd", "gradient shape differs from parameter"));
            }
            for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi;
                let d = if self.nesterov { gi + self.momentum * *vi } else { *vi };
                *pi = *pi - lr * d;
            }
        }
        Ok(())
    }
}

/// Averages of each loss component over an epoch's batches, plus the mean
/// step-aware weight of each statistics group.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_sg: f64,
    pub l_sr: f64,
    pub l_sc: f64,
    pub l_pd: f64,
    pub total: f64,
    /// Mean psi over background-labeled pixels.
    pub psi_background: Option<f64>,
    /// Mean psi over pixels of each old step.
    pub psi_old_steps: Vec<Option<f64>>,
}

struct BatchOutput {
    total: Var,
    sg: Var,
    sr: Option<Var>,
    sc: Option<Var>,
    pd: Option<Var>,
    /// `(sum, count)` of psi for background, then each old step.
    psi: Vec<(f64, u64)>,
}

trait Objective<E: Real> {
    fn begin_epoch(&mut self, _net: &SegNetwork<E>, _epoch: usize) -> Result<()> {
        Ok(())
    }

    fn batch_loss(
        &mut self,
        tape: &mut Tape<E>,
        fwd: &ForwardVars,
        images: &Tensor<E>,
        batch: &[usize],
        epoch: usize,
    ) -> Result<BatchOutput>;

    fn end_epoch(&mut self) {}
}

/// Plain cross-entropy on fixed channel targets.
struct Supervised {
    targets: Vec<usize>,
    px: usize,
}

impl<E: Real> Objective<E> for Supervised {
    fn batch_loss(
        &mut self,
        tape: &mut Tape<E>,
        fwd: &ForwardVars,
        _images: &Tensor<E>,
        batch: &[usize],
        _epoch: usize,
    ) -> Result<BatchOutput> {
        let targets: Vec<Option<usize>> = batch
            .iter()
            .flat_map(|&i| self.targets[i * self.px..(i + 1) * self.px].iter().map(|&c| Some(c)))
            .collect();
        let probs = tape.softmax(fwd.logits)?;
        let ones = vec![1.0; targets.len()];
        let sg = sg_loss(tape, probs, &targets, &ones)?.var;
        Ok(BatchOutput {
            total: sg,
            sg,
            sr: None,
            sc: None,
            pd: None,
            psi: Vec::new(),
        })
    }
}

fn diverged(step: usize, epoch: usize) -> impl Fn(GscError) -> GscError {
    move |e| match e {
        GscError::NonFinite { .. } => GscError::Diverged {
            step,
            epoch,
            loss: f64::NAN,
        },
        other => other,
    }
}

fn optimize<E: Real, O: Objective<E>>(
    net: &mut SegNetwork<E>,
    images: &Tensor<E>,
    cfg: &TrainConfig,
    lr0: f64,
    step: usize,
    obj: &mut O,
) -> Result<Vec<EpochLog>> {
    let n = images.shape()[0];
    let mut sgd = Sgd::new(net, cfg.momentum, cfg.nesterov);
    let mut logs = Vec::with_capacity(cfg.epochs_per_step);
    for epoch in 0..cfg.epochs_per_step {
        let div = diverged(step, epoch);
        obj.begin_epoch(net, epoch).map_err(&div)?;
        let lr = learning_rate(lr0, cfg.lr_decay, epoch);
        let mut sums = [0.0f64; 5];
        let mut psi: Vec<(f64, u64)> = Vec::new();
        let mut batches = 0usize;
        for batch in epoch_order(cfg.seed, step, epoch, n).chunks(cfg.batch_size) {
            let x = images.gather_batch(batch);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let fwd = net.forward(&mut tape, xv, true).map_err(&div)?;
            let out = obj.batch_loss(&mut tape, &fwd, &x, batch, epoch).map_err(&div)?;
            let total = tape.value(out.total).item().as_f64();
            if !total.is_finite() {
                return Err(GscError::Diverged {
                    step,
                    epoch,
                    loss: total,
                });
            }
            let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().as_f64());
            for (s, v) in sums
                .iter_mut()
                .zip([val(Some(out.sg)), val(out.sr), val(out.sc), val(out.pd), total])
            {
                *s += v;
            }
            if psi.len() < out.psi.len() {
                psi.resize(out.psi.len(), (0.0, 0));
            }
            for (a, b) in psi.iter_mut().zip(&out.psi) {
                a.0 += b.0;
                a.1 += b.1;
            }
            tape.backward(out.total).map_err(&div)?;
            let grads: Vec<Option<&Tensor<E>>> = fwd.params.iter().map(|&v| tape.grad(v)).collect();
            sgd.step(net.params_mut(), &grads, lr)?;
            if net.params().iter().any(|p| !p.is_finite()) {
                return Err(GscError::Diverged {
                    step,
                    epoch,
                    loss: total,
                });
            }
            batches += 1;
        }
        obj.end_epoch();
        let b = batches.max(1) as f64;
        let mean = |(s, n): (f64, u64)| (n > 0).then(|| s / n as f64);
        logs.push(EpochLog {
            step,
            epoch,
            lr,
            l_sg: sums[0] / b,
            l_sr: sums[1] / b,
            l_sc: sums[2] / b,
            l_pd: sums[3] / b,
            total: sums[4] / b,
            psi_background: psi.first().and_then(|&p| mean(p)),
            psi_old_steps: psi.iter().skip(1).map(|&p| mean(p)).collect(),
        });
    }
    Ok(logs)
}

/// Head-channel targets for class-id labels.
pub fn to_channels(labels: &[u8], channel_of: &[usize]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| {
            channel_of
                .get(l as usize)
                .copied()
                .ok_or_else(|| GscError::contract("to_channels", format!("unknown class id {l}")))
        })
        .collect()
}

/// Trains a fresh network on `C^0` with cross-entropy on the visible labels.
pub fn train_step0<E: Real>(
    cfg: &TrainConfig,
    spec: &ScenarioSpec,
    data: &StepDataset,
) -> Result<(SegNetwork<E>, Vec<EpochLog>)> {
    cfg.validate()?;
    let mut net = SegNetwork::new(&cfg.architecture, spec.groups[0].len(), &mut init_rng(cfg.seed, 0))?;
    let mut obj = Supervised {
        targets: to_channels(&data.gt_visible, &spec.channel_of())?,
        px: data.pixels_per_image(),
    };
    let images = data.images.cast::<E>();
    let logs = optimize(&mut net, &images, cfg, cfg.lr_step0, 0, &mut obj)?;
    net.mark_step_trained();
    Ok((net, logs))
}

/// Joint upper bound: one network trained on the union of all steps' images
/// with complete labels.
pub fn train_joint<E: Real>(cfg: &TrainConfig, spec: &ScenarioSpec) -> Result<(SegNetwork<E>, Vec<EpochLog>)> {
    cfg.validate()?;
    let last = spec.steps() - 1;
    let data = build_joint_dataset(spec, last)?;
    let mut net = SegNetwork::new(&cfg.architecture, spec.num_classes(), &mut init_rng(cfg.seed, 0))?;
    let mut obj = Supervised {
        targets: to_channels(&data.gt_visible, &spec.channel_of())?,
        px: data.pixels_per_image(),
    };
    let images = data.images.cast::<E>();
    let logs = optimize(&mut net, &images, cfg, cfg.lr_step0, last, &mut obj)?;
    net.mark_step_trained();
    Ok((net, logs))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gsc,
    /// Fine-tuning on the visible labels only.
    Ft,
    /// Entropy-threshold pseudo labels, cross-entropy and pooled feature distillation.
    PlainDistill,
    Joint,
}

impl FromStr for Method {
    type Err = GscError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gsc" => Ok(Method::Gsc),
            "ft" => Ok(Method::Ft),
            "plain" | "plain_distill" => Ok(Method::PlainDistill),
            "joint" => Ok(Method::Joint),
            _ => Err(GscError::Config(format!(
                "unknown method {s:?} (gsc, ft, plain, joint)"
            ))),
        }
    }
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Gsc => "gsc",
            Method::Ft => "ft",
            Method::PlainDistill => "plain",
            Method::Joint => "joint",
        }
    }
}

/// Components switched off in ablation runs of [`Method::Gsc`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// psi fixed to 1.
    pub no_sg: bool,
    /// Soft relation and sharp confidence terms dropped.
    pub no_sr_sc: bool,
    /// Entropy-threshold pseudo labels instead of prototype-checked ones.
    pub no_pr: bool,
}

/// A method together with optional ablations and loss-weight overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub label: String,
    pub method: Method,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub weights: Option<LossWeights>,
}

impl MethodSpec {
    pub fn plain(method: Method) -> Self {
        MethodSpec {
            label: method.name().to_string(),
            method,
            ablation: Ablation::default(),
            weights: None,
        }
    }

    pub fn ablated(label: &str, ablation: Ablation) -> Self {
        MethodSpec {
            label: label.to_string(),
            method: Method::Gsc,
            ablation,
            weights: None,
        }
    }

    pub fn with_weights(label: &str, weights: LossWeights) -> Self {
        MethodSpec {
            label: label.to_string(),
            method: Method::Gsc,
            ablation: Ablation::default(),
            weights: Some(weights),
        }
    }
}

/// Frozen-model quantities fixed for a whole incremental step.
pub struct RelabelContext<E> {
    /// Old-model softmax over the dataset, `[N, K_old, H, W]`.
    pub old_probs: Tensor<E>,
    pub prototypes: PrototypeTable,
    pub thresholds: EntropyThresholds,
    /// Visible labels as head channels.
    pub gt: Vec<usize>,
}

/// One pass of the old model over `images`: coarse labels, prototypes from
/// background pixels, and per-class median entropies.
pub fn prepare_relabel<E: Real>(
    old: &SegNetwork<E>,
    images: &Tensor<E>,
    gt: Vec<usize>,
    chunk: usize,
) -> Result<RelabelContext<E>> {
    let n = images.shape()[0];
    let mut protos = PrototypeAccumulator::new(old.feature_width());
    let mut thresholds = ThresholdAccumulator::default();
    let mut probs = Vec::new();
    let mut offset = 0;
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let inf = old.infer(&images.gather_batch(&idx))?;
        let p = softmax_channels(&inf.logits)?;
        let coarse = coarse_labels(&inf.logits)?;
        let len = coarse.len();
        let bg: Vec<bool> = gt[offset..offset + len].iter().map(|&g| g == 0).collect();
        protos.add(&inf.features, &coarse, &bg)?;
        thresholds.add(&p, &coarse)?;
        probs.push(p);
        offset += len;
    }
    if gt.len() != offset {
        return Err(GscError::contract("prepare_relabel", "labels do not cover the dataset"));
    }
    Ok(RelabelContext {
        old_probs: Tensor::concat_batch(&probs.iter().collect::<Vec<_>>())?,
        prototypes: protos.finish(),
        thresholds: thresholds.finish(),
        gt,
    })
}

impl<E: Real> RelabelContext<E> {
    /// Prototype-checked pseudo labels using `current`'s features.
    pub fn relabel_with(
        &self,
        current: &SegNetwork<E>,
        images: &Tensor<E>,
        chunk: usize,
        temperature: f64,
    ) -> Result<PseudoLabelMap> {
        let n = images.shape()[0];
        let px = self.gt.len() / n.max(1);
        let mut labels = Vec::with_capacity(self.gt.len());
        for start in (0..n).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let feats = current.infer(&images.gather_batch(&idx))?.features;
            let probs = self.old_probs.gather_batch(&idx);
            let gt = &self.gt[start * px..(start + idx.len()) * px];
            if self.prototypes.is_empty() {
                // nothing to check against: fall back to entropy-only labels
                labels.extend(plain_relabel(gt, &probs, &self.thresholds)?.labels);
            } else {
                labels.extend(relabel(gt, &probs, &feats, &self.prototypes, &self.thresholds, temperature)?.labels);
            }
        }
        Ok(PseudoLabelMap { labels })
    }

    pub fn plain(&self) -> Result<PseudoLabelMap> {
        plain_relabel(&self.gt, &self.old_probs, &self.thresholds)
    }
}

/// Pseudo-label quality of both strategies at the start of a step.
#[derive(Clone, Debug)]
pub struct StepAudit {
    pub step: usize,
    pub prototypical: LabelAudit,
    pub plain: LabelAudit,
    pub prototypical_map: PseudoLabelMap,
    pub plain_map: PseudoLabelMap,
}

/// Audits both relabeling strategies for `data` using the frozen `old`
/// model for probabilities, prototypes and features.
pub fn audit_labels<E: Real>(
    old: &SegNetwork<E>,
    spec: &ScenarioSpec,
    data: &StepDataset,
    chunk: usize,
    temperature: f64,
) -> Result<StepAudit> {
    let channel_of = spec.channel_of();
    let images = data.images.cast::<E>();
    let ctx = prepare_relabel(old, &images, to_channels(&data.gt_visible, &channel_of)?, chunk)?;
    let proto = ctx.relabel_with(old, &images, chunk, temperature)?;
    let plain = ctx.plain()?;
    audit_from(&ctx, proto, plain, spec, data, old.head_width())
}

fn audit_from<E>(
    ctx: &RelabelContext<E>,
    proto: PseudoLabelMap,
    plain: PseudoLabelMap,
    spec: &ScenarioSpec,
    data: &StepDataset,
    old_width: usize,
) -> Result<StepAudit> {
    let full = to_channels(&data.gt_full, &spec.channel_of())?;
    Ok(StepAudit {
        step: data.step,
        prototypical: LabelAudit::tally(&proto, &ctx.gt, &full, old_width),
        plain: LabelAudit::tally(&plain, &ctx.gt, &full, old_width),
        prototypical_map: proto,
        plain_map: plain,
    })
}

struct Incremental<E: Real> {
    old: ModelSnapshot<E>,
    ctx: RelabelContext<E>,
    images: Tensor<E>,
    pseudo: Vec<Option<usize>>,
    prototypical: bool,
    use_sg: bool,
    weights: LossWeights,
    stats: GradientStats,
    psi_max: f64,
    temperature: f64,
    chunk: usize,
    total_width: usize,
    px: usize,
    old_queries: usize,
}

impl<E: Real> Objective<E> for Incremental<E> {
    fn begin_epoch(&mut self, net: &SegNetwork<E>, epoch: usize) -> Result<()> {
        // epoch-0 labels were computed when the step was set up
        if self.prototypical && epoch > 0 {
            self.pseudo = self
                .ctx
                .relabel_with(net, &self.images, self.chunk, self.temperature)?
                .labels;
        }
        Ok(())
    }

    fn batch_loss(
        &mut self,
        tape: &mut Tape<E>,
        fwd: &ForwardVars,
        images: &Tensor<E>,
        batch: &[usize],
        epoch: usize,
    ) -> Result<BatchOutput> {
        let px = self.px;
        let targets: Vec<Option<usize>> = batch
            .iter()
            .flat_map(|&i| self.pseudo[i * px..(i + 1) * px].iter().copied())
            .collect();
        let need_relation = self.weights.lambda1 > 0.0 || self.weights.lambda2 > 0.0;
        let old = if need_relation || self.weights.lambda_pd > 0.0 {
            self.old_queries += 1;
            Some(self.old.infer(images)?)
        } else {
            None
        };
        let probs = tape.softmax(fwd.logits)?;

        let groups = self.stats.old_boundaries().len() + 1;
        let mut psi_log = vec![(0.0, 0u64); groups];
        let psi = if self.use_sg {
            let sig = tape.value(fwd.logits).map(sigmoid);
            let g = gradient_measurement(&sig, &targets)?;
            self.stats.update(&g, &targets)?;
            if epoch == 0 {
                vec![1.0; targets.len()]
            } else {
                step_aware_weights(&g, &targets, &self.stats, self.psi_max)
            }
        } else {
            vec![1.0; targets.len()]
        };
        for (&w, t) in psi.iter().zip(&targets) {
            let Some(c) = t else { continue };
            let slot = match stat_group(*c, self.stats.old_boundaries()) {
                StatGroup::Background => 0,
                StatGroup::OldStep(m) => m + 1,
                StatGroup::Current => continue,
            };
            psi_log[slot].0 += w;
            psi_log[slot].1 += 1;
        }

        let sg = sg_loss(tape, probs, &targets, &psi)?.var;
        let (mut sr, mut sc, mut pd) = (None, None, None);
        if let Some(old) = &old {
            if self.weights.lambda1 > 0.0 {
                let gt: Vec<usize> = batch
                    .iter()
                    .flat_map(|&i| self.ctx.gt[i * px..(i + 1) * px].iter().copied())
                    .collect();
                let soft = build_soft_labels(&gt, &old.logits, self.total_width)?;
                sr = Some(sr_loss(tape, probs, &soft)?.var);
            }
            if self.weights.lambda2 > 0.0 {
                sc = Some(sc_loss(tape, probs)?.var);
            }
            if self.weights.lambda_pd > 0.0 {
                pd = Some(pd_loss(tape, &fwd.intermediates, &old.intermediates)?.var);
            }
        }
        let total = total_loss(tape, LossComponents { sg, sr, sc, pd }, &self.weights)?;
        Ok(BatchOutput {
            total,
            sg,
            sr,
            sc,
            pd,
            psi: psi_log,
        })
    }

    fn end_epoch(&mut self) {
        self.stats.finish_epoch();
    }
}

/// Result of one incremental step.
pub struct StepOutcome<E> {
    pub net: SegNetwork<E>,
    pub logs: Vec<EpochLog>,
    /// Number of forward passes of the frozen model during optimization
    /// (set-up passes for pseudo labels included).
    pub old_model_queries: usize,
    pub audit: Option<StepAudit>,
}

/// Trains step `data.step >= 1` starting from the network of the previous step.
pub fn train_incremental_step<E: Real>(
    cfg: &TrainConfig,
    spec: &ScenarioSpec,
    prev: &SegNetwork<E>,
    data: &StepDataset,
    method: &MethodSpec,
) -> Result<StepOutcome<E>> {
    cfg.validate()?;
    let t = data.step;
    if t == 0 || t >= spec.steps() {
        return Err(GscError::contract(
            "train_incremental_step",
            format!("step {t} is not incremental"),
        ));
    }
    let mut net = prev.expand_head(spec.groups[t].len(), cfg.head_init, &mut init_rng(cfg.seed, t))?;
    let gt = to_channels(&data.gt_visible, &spec.channel_of())?;
    let px = data.pixels_per_image();
    let images = data.images.cast::<E>();

    let outcome = match method.method {
        Method::Joint => {
            return Err(GscError::contract(
                "train_incremental_step",
                "joint training has no incremental steps",
            ))
        }
        Method::Ft => {
            let mut obj = Supervised { targets: gt, px };
            let logs = optimize(&mut net, &images, cfg, cfg.lr_incremental, t, &mut obj)?;
            StepOutcome {
                net,
                logs,
                old_model_queries: 0,
                audit: None,
            }
        }
        Method::Gsc | Method::PlainDistill => {
            let old = ModelSnapshot::of(prev);
            let chunk = cfg.eval_chunk;
            let ctx = prepare_relabel(old.network(), &images, gt, chunk)?;
            let plain = ctx.plain()?;
            let (prototypical, use_sg, weights) = match method.method {
                Method::Gsc => {
                    let mut w = method.weights.unwrap_or(cfg.weights);
                    if method.ablation.no_sr_sc {
                        w.lambda1 = 0.0;
                        w.lambda2 = 0.0;
                    }
                    (!method.ablation.no_pr, !method.ablation.no_sg, w)
                }
                _ => (
                    false,
                    false,
                    LossWeights {
                        lambda_pd: method.weights.unwrap_or(cfg.weights).lambda_pd,
                        ..LossWeights::ZERO
                    },
                ),
            };
            let mut queries = 1;
            let (pseudo, audit) = if prototypical {
                let proto = ctx.relabel_with(&net, &images, chunk, cfg.temperature)?;
                let audit = audit_from(&ctx, proto.clone(), plain, spec, data, prev.head_width())?;
                (proto.labels, Some(audit))
            } else {
                (plain.labels, None)
            };
            let mut obj = Incremental {
                stats: GradientStats::new(cfg.stats_mode, old.network().step_boundaries()),
                old,
                ctx,
                images: images.clone(),
                pseudo,
                prototypical,
                use_sg,
                weights,
                psi_max: cfg.psi_max,
                temperature: cfg.temperature,
                chunk,
                total_width: net.head_width(),
                px,
                old_queries: 0,
            };
            let logs = optimize(&mut net, &images, cfg, cfg.lr_incremental, t, &mut obj)?;
            queries += obj.old_queries;
            StepOutcome {
                net,
                logs,
                old_model_queries: queries,
                audit,
            }
        }
    };
    let mut net = outcome.net;
    net.mark_step_trained();
    Ok(StepOutcome { net, ..outcome })
}

/// Predicted class ids for every pixel of `images`.
pub fn predict<E: Real>(
    net: &SegNetwork<E>,
    images: &Tensor<E>,
    class_of_channel: &[u8],
    chunk: usize,
) -> Result<Vec<u8>> {
    let n = images.shape()[0];
    let mut out = Vec::new();
    for start in (0..n).step_by(chunk.max(1)) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let logits = net.infer(&images.gather_batch(&idx))?.logits;
        for ch in coarse_labels(&logits)? {
            out.push(class_of_channel[ch]);
        }
    }
    Ok(out)
}

/// Confusion matrix of `net` on an evaluation set, indexed by class id.
pub fn evaluate<E: Real>(
    net: &SegNetwork<E>,
    spec: &ScenarioSpec,
    eval: &EvalSet,
    chunk: usize,
) -> Result<ConfusionMatrix> {
    let ids = spec.classes.iter().map(|c| c.id as usize).max().unwrap_or(0) + 1;
    let mut cm = ConfusionMatrix::new(ids);
    let pred = predict(net, &eval.images.cast::<E>(), &spec.class_of_channel(), chunk)?;
    cm.add_pixels(&eval.labels, &pred)?;
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Indexed by class id.
    pub ious: Vec<Option<f64>>,
    pub grouped: GroupedMiou,
}

pub struct MethodReport {
    pub label: String,
    pub method: Method,
    pub steps: Vec<StepMetrics>,
    pub logs: Vec<EpochLog>,
    pub audits: Vec<StepAudit>,
    pub old_model_queries: usize,
    /// Encoded checkpoint after each reported step.
    pub checkpoints: Vec<(usize, Vec<u8>)>,
}

impl MethodReport {
    pub fn final_metrics(&self) -> &StepMetrics {
        self.steps.last().expect("at least one step")
    }

    /// Mean IoU over background and the base classes after the last step.
    pub fn final_old_miou(&self) -> Option<f64> {
        self.final_metrics().grouped.initial
    }

    pub fn final_all_miou(&self) -> Option<f64> {
        self.final_metrics().grouped.all
    }
}

pub struct ScenarioReport {
    pub spec: ScenarioSpec,
    pub methods: Vec<MethodReport>,
}

impl ScenarioReport {
    pub fn method(&self, label: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.label == label)
    }

    pub fn class_rows(&self) -> Vec<ClassIouRow> {
        let mut rows = Vec::new();
        for m in &self.methods {
            for s in &m.steps {
                for (id, iou) in s.ious.iter().enumerate() {
                    rows.push(ClassIouRow {
                        method: m.label.clone(),
                        step: s.step,
                        class_id: id as u8,
                        iou: *iou,
                    });
                }
            }
        }
        rows
    }

    pub fn summary_rows(&self) -> Vec<SummaryRow> {
        self.methods
            .iter()
            .flat_map(|m| {
                m.steps.iter().map(|s| SummaryRow {
                    method: m.label.clone(),
                    step: s.step,
                    miou_initial: s.grouped.initial,
                    miou_incremental: s.grouped.incremental,
                    miou_all: s.grouped.all,
                })
            })
            .collect()
    }

    pub fn pace_rows(&self) -> Vec<PaceRow> {
        let mut rows = Vec::new();
        for m in &self.methods {
            let (first, last) = (&m.steps[0].ious, &m.final_metrics().ious);
            let pace = forgetting_pace(first, last);
            for id in 0..first.len() {
                rows.push(PaceRow {
                    method: m.label.clone(),
                    class_id: id as u8,
                    iou_first: first[id],
                    iou_last: last[id],
                    pace: pace[id],
                });
            }
        }
        rows
    }
}

fn step_metrics<E: Real>(
    net: &SegNetwork<E>,
    spec: &ScenarioSpec,
    evals: &[EvalSet],
    step: usize,
    chunk: usize,
) -> Result<StepMetrics> {
    let cm = evaluate(net, spec, &evals[step], chunk)?;
    let ious = iou_per_class(&cm);
    let grouped = grouped_miou(&ious, &spec.groups[..=step]);
    Ok(StepMetrics { step, ious, grouped })
}

/// Trains step 0 once, then each incremental method from that network over
/// steps `1..T`; joint methods train once on everything. Results are
/// evaluated after each step on test images of all steps so far.
pub fn run_scenario(spec: &ScenarioSpec, cfg: &TrainConfig, methods: &[MethodSpec]) -> Result<ScenarioReport> {
    match cfg.precision {
        Precision::F32 => run_scenario_as::<f32>(spec, cfg, methods),
        Precision::F64 => run_scenario_as::<f64>(spec, cfg, methods),
    }
}

fn run_scenario_as<E: Real>(spec: &ScenarioSpec, cfg: &TrainConfig, methods: &[MethodSpec]) -> Result<ScenarioReport> {
    spec.validate()?;
    cfg.validate()?;
    if methods.is_empty() {
        return Err(GscError::Config("no methods to run".into()));
    }
    let chunk = cfg.eval_chunk;
    let last = spec.steps() - 1;
    let evals = (0..spec.steps())
        .map(|t| build_eval_set(spec, t))
        .collect::<Result<Vec<_>>>()?;

    let incremental = methods.iter().any(|m| m.method != Method::Joint);
    let mut datasets = Vec::new();
    let mut base = None;
    if incremental {
        datasets = (0..spec.steps())
            .map(|t| build_step_dataset(spec, t))
            .collect::<Result<Vec<_>>>()?;
        let (net, logs) = train_step0::<E>(cfg, spec, &datasets[0])?;
        let metrics = step_metrics(&net, spec, &evals, 0, chunk)?;
        base = Some((net, logs, metrics));
    }

    let mut reports = Vec::with_capacity(methods.len());
    for m in methods {
        if m.method == Method::Joint {
            let (net, logs) = train_joint::<E>(cfg, spec)?;
            reports.push(MethodReport {
                label: m.label.clone(),
                method: m.method,
                steps: vec![step_metrics(&net, spec, &evals, last, chunk)?],
                logs,
                audits: Vec::new(),
                old_model_queries: 0,
                checkpoints: vec![(last, encode_checkpoint(&net))],
            });
            continue;
        }
        let (net0, logs0, metrics0) = base.as_ref().expect("step 0 trained");
        let mut net = net0.clone();
        let mut report = MethodReport {
            label: m.label.clone(),
            method: m.method,
            steps: vec![metrics0.clone()],
            logs: logs0.clone(),
            audits: Vec::new(),
            old_model_queries: 0,
            checkpoints: vec![(0, encode_checkpoint(&net))],
        };
        for (t, data) in datasets.iter().enumerate().skip(1) {
            let out = train_incremental_step(cfg, spec, &net, data, m)?;
            net = out.net;
            report.logs.extend(out.logs);
            report.old_model_queries += out.old_model_queries;
            report.audits.extend(out.audit);
            report.steps.push(step_metrics(&net, spec, &evals, t, chunk)?);
            report.checkpoints.push((t, encode_checkpoint(&net)));
        }
        reports.push(report);
    }
    Ok(ScenarioReport {
        spec: spec.clone(),
        methods: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Setting;

    fn tiny_spec() -> ScenarioSpec {
        let mut s = ScenarioSpec::preset("4-1", Setting::Overlapped, 3).unwrap();
        s.images_per_step = 6;
        s.test_images_per_step = 3;
        s.image_size = (16, 16);
        s
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs_per_step: 2,
            batch_size: 4,
            architecture: Architecture {
                in_channels: 3,
                widths: vec![4, 4],
                kernel: 3,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_is_exact() {
        assert_eq!(learning_rate(1e-2, 0.9, 0), 1e-2);
        assert_eq!(learning_rate(1e-2, 0.9, 3), 1e-2 * 0.9f64.powi(3));
    }

    #[test]
    fn order_is_a_pure_permutation() {
        let a = epoch_order(5, 1, 2, 20);
        assert_eq!(a, epoch_order(5, 1, 2, 20));
        assert_ne!(a, epoch_order(5, 1, 3, 20));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn nesterov_update() {
        let mut rng = init_rng(0, 0);
        let arch = Architecture {
            in_channels: 1,
            widths: vec![1],
            kernel: 1,
        };
        let mut net = SegNetwork::<f64>::new(&arch, 1, &mut rng).unwrap();
        let before: Vec<f64> = net.params()[0].data().to_vec();
        let grads: Vec<Tensor<f64>> = net.params().iter().map(|p| Tensor::full(p.shape(), 1.0)).collect();
        let g: Vec<Option<&Tensor<f64>>> = grads.iter().map(Some).collect();
        let mut sgd = Sgd::new(&net, 0.9, true);
        sgd.step(net.params_mut(), &g, 0.1).unwrap();
        // v = 1, step = 1 + 0.9
        assert!((net.params()[0].data()[0] - (before[0] - 0.19)).abs() < 1e-12);
        sgd.step(net.params_mut(), &g, 0.1).unwrap();
        // v = 1.9, step = 1 + 1.71
        assert!((net.params()[0].data()[0] - (before[0] - 0.19 - 0.271)).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            epochs_per_step: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let json = r#"{"epochs_per_step": 3, "weights": {"lambda1": 1.0, "lambda2": 0.1, "lambda_pd": 0.01}}"#;
        let c: TrainConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.epochs_per_step, 3);
        assert_eq!(c.batch_size, 8);
    }

    #[test]
    fn ft_never_queries_old_model_and_gsc_does() {
        let spec = tiny_spec();
        let cfg = tiny_cfg();
        let d0 = build_step_dataset(&spec, 0).unwrap();
        let d1 = build_step_dataset(&spec, 1).unwrap();
        let (net, _) = train_step0::<f64>(&cfg, &spec, &d0).unwrap();
        let ft = train_incremental_step(&cfg, &spec, &net, &d1, &MethodSpec::plain(Method::Ft)).unwrap();
        assert_eq!(ft.old_model_queries, 0);
        let gsc = train_incremental_step(&cfg, &spec, &net, &d1, &MethodSpec::plain(Method::Gsc)).unwrap();
        assert!(gsc.old_model_queries > 0);
        assert_eq!(gsc.net.head_width(), 6);
        assert!(gsc.audit.is_some());
    }

    #[test]
    fn report_shape() {
        let spec = tiny_spec();
        let cfg = tiny_cfg();
        let methods = [MethodSpec::plain(Method::Gsc), MethodSpec::plain(Method::Joint)];
        let r = run_scenario(&spec, &cfg, &methods).unwrap();
        assert_eq!(r.method("gsc").unwrap().steps.len(), spec.steps());
        assert_eq!(r.method("joint").unwrap().steps.len(), 1);
        assert_eq!(r.summary_rows().len(), spec.steps() + 1);
        assert_eq!(r.class_rows().len(), (spec.steps() + 1) * 6);
    }
}
