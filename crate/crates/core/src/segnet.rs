//! The segmentation model: a stack of 3x3 conv+ReLU blocks followed by a
//! 1x1 classifier head that grows by a few output channels each step.
//!
//! Head channel 0 is background; channels for the classes of step `m`
//! occupy `step_boundaries[m-1]..step_boundaries[m]` (with an implicit
//! leading boundary of 1).

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{GscError, Result};

/// Standard deviation of freshly initialized classifier rows.
pub const HEAD_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// New rows drawn from N(0, 0.01^2), zero bias.
    #[default]
    Random,
    /// New rows copy the background row; their bias is the background bias
    /// minus ln(new + 1). Old rows are untouched.
    BackgroundSplit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    /// Output width of each extractor block; the last one is the feature width.
    pub widths: Vec<usize>,
    pub kernel: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            in_channels: 3,
            widths: vec![16, 16, 16],
            kernel: 3,
        }
    }
}

impl Architecture {
    pub fn feature_width(&self) -> usize {
        *self.widths.last().expect("at least one block")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<E> {
    pub kernel: Tensor<E>,
    pub bias: Tensor<E>,
}

impl<E: Real> ConvLayer<E> {
    fn he_init<R: Rng>(cout: usize, cin: usize, k: usize, rng: &mut R) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        ConvLayer {
            kernel: Tensor::from_fn(&[cout, cin, k, k], |_| E::of(normal.sample(rng))),
            bias: Tensor::zeros(&[cout]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegNetwork<E> {
    blocks: Vec<ConvLayer<E>>,
    head: ConvLayer<E>,
    step_boundaries: Vec<usize>,
    trained_steps: usize,
}

/// Tape handles produced by a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub features: Var,
    pub intermediates: Vec<Var>,
    pub logits: Var,
    /// Parameter leaves in [`SegNetwork::params`] order.
    pub params: Vec<Var>,
}

/// Materialized outputs of an inference pass.
#[derive(Clone, Debug)]
pub struct Inference<E> {
    pub features: Tensor<E>,
    pub intermediates: Vec<Tensor<E>>,
    pub logits: Tensor<E>,
}

impl<E: Real> SegNetwork<E> {
    /// Fresh step-0 network with `1 + base_classes` head channels.
    pub fn new<R: Rng>(arch: &Architecture, base_classes: usize, rng: &mut R) -> Result<Self> {
        if base_classes == 0 {
            return Err(GscError::contract("SegNetwork::new", "step 0 needs at least one class"));
        }
        if arch.widths.is_empty() || arch.kernel.is_multiple_of(2) {
            return Err(GscError::Config("architecture needs blocks and an odd kernel".into()));
        }
        let mut blocks = Vec::with_capacity(arch.widths.len());
        let mut cin = arch.in_channels;
        for &w in &arch.widths {
            blocks.push(ConvLayer::he_init(w, cin, arch.kernel, rng));
            cin = w;
        }
        let width = 1 + base_classes;
        let normal = Normal::new(0.0, HEAD_INIT_STD).expect("valid std");
        let head = ConvLayer {
            kernel: Tensor::from_fn(&[width, cin, 1, 1], |_| E::of(normal.sample(rng))),
            bias: Tensor::zeros(&[width]),
        };
        Ok(SegNetwork {
            blocks,
            head,
            step_boundaries: vec![width],
            trained_steps: 0,
        })
    }

    pub fn head_width(&self) -> usize {
        self.head.bias.len()
    }

    pub fn feature_width(&self) -> usize {
        self.head.kernel.shape()[1]
    }

    pub fn in_channels(&self) -> usize {
        self.blocks[0].kernel.shape()[1]
    }

    /// Cumulative head width after each step.
    pub fn step_boundaries(&self) -> &[usize] {
        &self.step_boundaries
    }

    /// Index of the current (last) step.
    pub fn step(&self) -> usize {
        self.step_boundaries.len() - 1
    }

    /// Step owning head channel `ch`; `None` for background.
    pub fn step_of_channel(&self, ch: usize) -> Option<usize> {
        if ch == 0 {
            return None;
        }
        self.step_boundaries.iter().position(|&b| ch < b)
    }

    pub fn trained_steps(&self) -> usize {
        self.trained_steps
    }

    /// Records that training of the current step has finished.
    pub fn mark_step_trained(&mut self) {
        self.trained_steps = self.step_boundaries.len();
    }

    pub fn head(&self) -> &ConvLayer<E> {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut ConvLayer<E> {
        &mut self.head
    }

    /// Parameters in a fixed order: block kernels and biases, then the head.
    pub fn params(&self) -> Vec<&Tensor<E>> {
        let mut v = Vec::with_capacity(2 * self.blocks.len() + 2);
        for b in &self.blocks {
            v.push(&b.kernel);
            v.push(&b.bias);
        }
        v.push(&self.head.kernel);
        v.push(&self.head.bias);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<E>> {
        let mut v = Vec::with_capacity(2 * self.blocks.len() + 2);
        for b in &mut self.blocks {
            v.push(&mut b.kernel);
            v.push(&mut b.bias);
        }
        v.push(&mut self.head.kernel);
        v.push(&mut self.head.bias);
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Records the forward pass on `tape`. Parameters become trainable leaves
    /// iff `trainable`.
    pub fn forward(&self, tape: &mut Tape<E>, images: Var, trainable: bool) -> Result<ForwardVars> {
        let (_, c, _, _) = tape.value(images).dims4("forward")?;
        if c != self.in_channels() {
            return Err(GscError::ShapeMismatch {
                op: "forward",
                expected: vec![self.in_channels()],
                got: vec![c],
            });
        }
        let params: Vec<Var> = self
            .params()
            .into_iter()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect();
        self.forward_with(tape, images, params)
    }

    /// Forward pass with caller-provided parameter nodes, in
    /// [`SegNetwork::params`] order. The stored parameter values are not used.
    pub fn forward_with(&self, tape: &mut Tape<E>, images: Var, params: Vec<Var>) -> Result<ForwardVars> {
        let expected: Vec<&[usize]> = self.params().iter().map(|p| p.shape()).collect();
        if params.len() != expected.len() || params.iter().zip(&expected).any(|(v, s)| tape.value(*v).shape() != *s) {
            return Err(GscError::contract(
                "forward_with",
                "parameter nodes do not match the network",
            ));
        }
        let pad = self.blocks[0].kernel.shape()[2] / 2;
        let mut x = images;
        let mut intermediates = Vec::with_capacity(self.blocks.len());
        for i in 0..self.blocks.len() {
            let z = tape.conv2d(x, params[2 * i], params[2 * i + 1], pad)?;
            x = tape.relu(z)?;
            intermediates.push(x);
        }
        let n = params.len();
        let logits = tape.conv2d(x, params[n - 2], params[n - 1], 0)?;
        Ok(ForwardVars {
            features: x,
            intermediates,
            logits,
            params,
        })
    }

    /// Inference-only forward pass on a throwaway tape.
    pub fn infer(&self, images: &Tensor<E>) -> Result<Inference<E>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, x, false)?;
        Ok(Inference {
            features: tape.value(out.features).clone(),
            intermediates: out.intermediates.iter().map(|&v| tape.value(v).clone()).collect(),
            logits: tape.value(out.logits).clone(),
        })
    }

    /// Logits only, computed in chunks of `chunk` images.
    pub fn infer_logits(&self, images: &Tensor<E>, chunk: usize) -> Result<Tensor<E>> {
        let n = images.shape()[0];
        let mut parts = Vec::new();
        for start in (0..n).step_by(chunk.max(1)) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            parts.push(self.infer(&images.gather_batch(&idx))?.logits);
        }
        Tensor::concat_batch(&parts.iter().collect::<Vec<_>>())
    }

    /// Appends `new_classes` head rows for a new step. Existing rows are
    /// copied verbatim, so old-channel logits are unchanged.
    pub fn expand_head<R: Rng>(&self, new_classes: usize, init: HeadInit, rng: &mut R) -> Result<Self> {
        if new_classes == 0 {
            return Err(GscError::contract("expand_head", "a step must add at least one class"));
        }
        if self.trained_steps < self.step_boundaries.len() {
            return Err(GscError::contract(
                "expand_head",
                format!("step {} has not finished training", self.step()),
            ));
        }
        let f = self.feature_width();
        let old = self.head_width();
        let width = old + new_classes;
        let mut kernel = self.head.kernel.data().to_vec();
        let mut bias = self.head.bias.data().to_vec();
        match init {
            HeadInit::Random => {
                let normal = Normal::new(0.0, HEAD_INIT_STD).expect("valid std");
                kernel.extend((0..new_classes * f).map(|_| E::of(normal.sample(rng))));
                bias.extend(std::iter::repeat_n(E::zero(), new_classes));
            }
            HeadInit::BackgroundSplit => {
                let bg_row = self.head.kernel.data()[..f].to_vec();
                let shift = E::of(((new_classes + 1) as f64).ln());
                let b = self.head.bias.data()[0] - shift;
                for _ in 0..new_classes {
                    kernel.extend_from_slice(&bg_row);
                    bias.push(b);
                }
            }
        }
        let mut step_boundaries = self.step_boundaries.clone();
        step_boundaries.push(width);
        Ok(SegNetwork {
            blocks: self.blocks.clone(),
            head: ConvLayer {
                kernel: Tensor::new(vec![width, f, 1, 1], kernel)?,
                bias: Tensor::new(vec![width], bias)?,
            },
            step_boundaries,
            trained_steps: self.trained_steps,
        })
    }

    pub fn cast<F: Real>(&self) -> SegNetwork<F> {
        let cast = |l: &ConvLayer<E>| ConvLayer {
            kernel: l.kernel.cast(),
            bias: l.bias.cast(),
        };
        SegNetwork {
            blocks: self.blocks.iter().map(cast).collect(),
            head: cast(&self.head),
            step_boundaries: self.step_boundaries.clone(),
            trained_steps: self.trained_steps,
        }
    }
}

/// Frozen copy of a network at the end of a step. Inference only.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSnapshot<E> {
    net: SegNetwork<E>,
}

impl<E: Real> ModelSnapshot<E> {
    pub fn of(net: &SegNetwork<E>) -> Self {
        ModelSnapshot { net: net.clone() }
    }

    pub fn restore(&self) -> SegNetwork<E> {
        self.net.clone()
    }

    pub fn network(&self) -> &SegNetwork<E> {
        &self.net
    }

    pub fn infer(&self, images: &Tensor<E>) -> Result<Inference<E>> {
        self.net.infer(images)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.net, path)
    }
}

const MAGIC: &[u8; 4] = b"GSC1";

/// Encodes a network in the `GSC1` checkpoint layout (see `docs/checkpoint.md`).
pub fn encode_checkpoint<E: Real>(net: &SegNetwork<E>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(E::BYTES);
    let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    put(&mut out, net.step_boundaries.len());
    for &b in &net.step_boundaries {
        put(&mut out, b);
    }
    put(&mut out, net.trained_steps);
    let params = net.params();
    put(&mut out, params.len());
    for p in &params {
        put(&mut out, p.shape().len());
        for &d in p.shape() {
            put(&mut out, d);
        }
    }
    for p in &params {
        for &v in p.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(GscError::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

fn read_values<E: Real, S: Real>(r: &mut Reader<'_>, n: usize) -> Result<Vec<E>> {
    let w = S::BYTES as usize;
    let raw = r.take(n * w)?;
    Ok(raw.chunks_exact(w).map(|c| E::of(S::read_le(c).as_f64())).collect())
}

/// Decodes a `GSC1` checkpoint. Values stored at a different width are
/// converted to `E`.
pub fn decode_checkpoint<E: Real>(bytes: &[u8]) -> Result<SegNetwork<E>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(GscError::Format("bad magic, expected GSC1".into()));
    }
    let width = r.take(1)?[0];
    if width != 4 && width != 8 {
        return Err(GscError::Format(format!("unsupported value width {width}")));
    }
    let nb = r.u32()?;
    let step_boundaries = (0..nb).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let trained_steps = r.u32()?;
    let nt = r.u32()?;
    if nt < 4 || nt % 2 != 0 {
        return Err(GscError::Format(format!("{nt} tensors cannot form a network")));
    }
    let mut shapes = Vec::with_capacity(nt);
    for _ in 0..nt {
        let rank = r.u32()?;
        shapes.push((0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?);
    }
    let mut tensors = Vec::with_capacity(nt);
    for shape in shapes {
        let n = shape.iter().product();
        let data = if width == 4 {
            read_values::<E, f32>(&mut r, n)?
        } else {
            read_values::<E, f64>(&mut r, n)?
        };
        tensors.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(GscError::Format("trailing bytes after payload".into()));
    }
    let mut layers: Vec<ConvLayer<E>> = tensors
        .chunks_exact(2)
        .map(|c| ConvLayer {
            kernel: c[0].clone(),
            bias: c[1].clone(),
        })
        .collect();
    let head = layers.pop().expect("nt >= 4");
    if step_boundaries.last() != Some(&head.bias.len()) || step_boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(GscError::Format("step boundaries inconsistent with head width".into()));
    }
    Ok(SegNetwork {
        blocks: layers,
        head,
        step_boundaries,
        trained_steps,
    })
}

pub fn save_checkpoint<E: Real>(net: &SegNetwork<E>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&encode_checkpoint(net))?;
    f.sync_all()?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<E: Real>(path: &Path) -> Result<SegNetwork<E>> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::softmax_channels;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probe(seed: u64, n: usize, hw: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, 3, hw, hw], |_| rng.random_range(0.0..1.0))
    }

    fn net(seed: u64) -> SegNetwork<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SegNetwork::new(&Architecture::default(), 4, &mut rng).unwrap()
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let mut n = net(1);
        let w = n.head_width();
        n.head_mut().kernel = Tensor::zeros(&[w, 16, 1, 1]);
        let out = n.infer(&probe(2, 2, 8)).unwrap();
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
        let p = softmax_channels(&out.logits).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / w as f64).abs() < 1e-15));
    }

    #[test]
    fn same_padding_keeps_spatial_size() {
        let out = net(1).infer(&probe(3, 1, 12)).unwrap();
        assert_eq!(out.logits.shape(), &[1, 5, 12, 12]);
        assert_eq!(out.features.shape(), &[1, 16, 12, 12]);
        assert_eq!(out.intermediates.len(), 3);
    }

    #[test]
    fn snapshot_is_frozen_and_deterministic() {
        let mut live = net(4);
        let snap = ModelSnapshot::of(&live);
        let x = probe(5, 2, 8);
        let a = snap.infer(&x).unwrap();
        live.params_mut()[0].data_mut()[0] += 1.0;
        let b = snap.infer(&x).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.logits, b.logits);
        assert_eq!(snap.restore().infer(&x).unwrap().logits, a.logits);
    }

    #[test]
    fn expand_requires_trained_step_and_new_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut n = net(6);
        assert!(n.expand_head(1, HeadInit::Random, &mut rng).is_err());
        n.mark_step_trained();
        assert!(n.expand_head(0, HeadInit::Random, &mut rng).is_err());
        let e = n.expand_head(2, HeadInit::Random, &mut rng).unwrap();
        assert_eq!(e.head_width(), 7);
        assert_eq!(e.step_boundaries(), &[5, 7]);
        assert_eq!(e.step_of_channel(0), None);
        assert_eq!(e.step_of_channel(4), Some(0));
        assert_eq!(e.step_of_channel(5), Some(1));
    }

    #[test]
    fn expansion_preserves_old_logits_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut n = net(7);
        n.mark_step_trained();
        let x = probe(8, 2, 10);
        let before = n.infer(&x).unwrap().logits;
        for init in [HeadInit::Random, HeadInit::BackgroundSplit] {
            let after = n.expand_head(1, init, &mut rng).unwrap().infer(&x).unwrap().logits;
            let px = 100;
            for b in 0..2 {
                for k in 0..5 {
                    let old = &before.data()[(b * 5 + k) * px..(b * 5 + k + 1) * px];
                    let new = &after.data()[(b * 6 + k) * px..(b * 6 + k + 1) * px];
                    assert_eq!(old, new);
                }
            }
        }
    }

    #[test]
    fn new_class_logits_are_small() {
        // 100 random probes; mean |logit| of the new channel stays below 0.05.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut n = net(10);
        n.mark_step_trained();
        let e = n.expand_head(1, HeadInit::Random, &mut rng).unwrap();
        let x = probe(12, 100, 6);
        let logits = e.infer(&x).unwrap().logits;
        let px = 36;
        let mut acc = 0.0;
        for b in 0..100 {
            acc += logits.data()[(b * 6 + 5) * px..(b * 6 + 6) * px]
                .iter()
                .map(|v| v.abs())
                .sum::<f64>();
        }
        assert!(acc / ((100 * px) as f64) < 0.05);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.gsc");
        let mut n = net(13);
        n.mark_step_trained();
        let n = n
            .expand_head(1, HeadInit::Random, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        ModelSnapshot::of(&n).save(&path).unwrap();
        let back: SegNetwork<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(back, n);
        let x = probe(14, 1, 8);
        assert_eq!(back.infer(&x).unwrap().logits, n.infer(&x).unwrap().logits);
        assert_eq!(&std::fs::read(&path).unwrap()[..4], b"GSC1");
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let bytes = encode_checkpoint(&net(15));
        assert!(decode_checkpoint::<f64>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint::<f64>(&bad).is_err());
    }
}
