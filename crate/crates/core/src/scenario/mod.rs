//! Synthetic datasets and incremental scenarios.
//!
//! A [`ScenarioSpec`] splits the foreground classes into ordered groups, one
//! per step. Every image is a pure function of `(seed, split, step, index)`.

mod dump;
mod render;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{GscError, Result};

pub use dump::{dump_dataset, write_pgm, write_png_rgb};
pub use render::ShapeKind;

/// Label id of the background class.
pub const BACKGROUND: u8 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDef {
    pub id: u8,
    pub shape: ShapeKind,
    /// Mean RGB in `[0, 1]`.
    pub color: [f64; 3],
    /// Per-object uniform color offset half-width.
    pub jitter: f64,
    /// Bounding-box side range in pixels, at a 48x48 reference size.
    pub size_range: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Step-`t` images contain only classes seen up to `t`.
    Disjoint,
    /// Step-`t` images may contain any class.
    Overlapped,
}

impl std::str::FromStr for Setting {
    type Err = GscError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disjoint" => Ok(Setting::Disjoint),
            "overlapped" => Ok(Setting::Overlapped),
            other => Err(GscError::Config(format!("unknown setting {other:?}"))),
        }
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Setting::Disjoint => "disjoint",
            Setting::Overlapped => "overlapped",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub classes: Vec<ClassDef>,
    /// Class ids introduced at each step, in head-channel order.
    pub groups: Vec<Vec<u8>>,
    pub setting: Setting,
    pub images_per_step: usize,
    pub test_images_per_step: usize,
    /// `(height, width)`.
    pub image_size: (usize, usize),
    pub seed: u64,
}

fn palette() -> Vec<ClassDef> {
    let c = |id, shape, color| ClassDef {
        id,
        shape,
        color,
        jitter: 0.08,
        size_range: (10, 18),
    };
    vec![
        c(1, ShapeKind::Disk, [0.85, 0.2, 0.2]),
        c(2, ShapeKind::Square, [0.2, 0.75, 0.25]),
        c(3, ShapeKind::Triangle, [0.2, 0.3, 0.85]),
        c(4, ShapeKind::Ring, [0.85, 0.8, 0.2]),
        c(5, ShapeKind::Cross, [0.8, 0.25, 0.8]),
        c(6, ShapeKind::Bar, [0.2, 0.8, 0.8]),
    ]
}

/// Class-order presets for the five-class scenarios, in the style of the
/// A-E orders used for order-robustness studies. `A` is the identity.
pub const CLASS_ORDER_PRESETS: [(&str, [u8; 5]); 5] = [
    ("A", [1, 2, 3, 4, 5]),
    ("B", [3, 5, 1, 4, 2]),
    ("C", [5, 2, 4, 1, 3]),
    ("D", [2, 4, 5, 3, 1]),
    ("E", [4, 1, 3, 5, 2]),
];

impl ScenarioSpec {
    /// Builds a spec from group sizes over the first `sum(sizes)` palette classes.
    pub fn from_group_sizes(name: &str, sizes: &[usize], setting: Setting, seed: u64) -> Result<Self> {
        let total: usize = sizes.iter().sum();
        let classes = palette();
        if total == 0 || total > classes.len() {
            return Err(GscError::Config(format!(
                "group sizes {sizes:?} need between 1 and {} classes",
                classes.len()
            )));
        }
        let mut next = 1u8;
        let groups = sizes
            .iter()
            .map(|&s| {
                let g: Vec<u8> = (next..next + s as u8).collect();
                next += s as u8;
                g
            })
            .collect();
        let spec = ScenarioSpec {
            name: name.to_string(),
            classes: classes.into_iter().take(total).collect(),
            groups,
            setting,
            images_per_step: 200,
            test_images_per_step: 50,
            image_size: (48, 48),
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Named desk scenarios: `4-1` (two steps) and `3-1x3` (four steps).
    pub fn preset(name: &str, setting: Setting, seed: u64) -> Result<Self> {
        match name {
            "4-1" => Self::from_group_sizes(name, &[4, 1], setting, seed),
            "3-1x3" => Self::from_group_sizes(name, &[3, 1, 1, 1], setting, seed),
            other => Err(GscError::Config(format!("unknown scenario preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GscError::Config(m));
        let mut ids = BTreeSet::new();
        for c in &self.classes {
            if c.id == BACKGROUND {
                return bad("class id 0 is reserved for background".into());
            }
            if !ids.insert(c.id) {
                return bad(format!("duplicate class id {}", c.id));
            }
            if c.size_range.0 < 3 || c.size_range.0 > c.size_range.1 {
                return bad(format!("class {} has invalid size range", c.id));
            }
        }
        if self.groups.is_empty() {
            return bad("scenario has no steps".into());
        }
        let mut seen = BTreeSet::new();
        for (t, g) in self.groups.iter().enumerate() {
            if g.is_empty() {
                return bad(format!("step {t} introduces no classes"));
            }
            for id in g {
                if !ids.contains(id) {
                    return bad(format!("step {t} references unknown class {id}"));
                }
                if !seen.insert(*id) {
                    return bad(format!("class {id} appears in two steps"));
                }
            }
        }
        if seen != ids {
            return bad("step groups do not cover every class".into());
        }
        let (h, w) = self.image_size;
        if h < 16 || w < 16 {
            return bad("images must be at least 16x16".into());
        }
        if self.images_per_step == 0 {
            return bad("images_per_step must be positive".into());
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.groups.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, id: u8) -> Option<&ClassDef> {
        self.classes.iter().find(|c| c.id == id)
    }

    /// Foreground ids in head-channel order.
    pub fn class_order(&self) -> Vec<u8> {
        self.groups.iter().flatten().copied().collect()
    }

    /// Head channel of each class id (index = id); background maps to 0.
    pub fn channel_of(&self) -> Vec<usize> {
        let max = self.classes.iter().map(|c| c.id).max().unwrap_or(0) as usize;
        let mut map = vec![0usize; max + 1];
        for (i, id) in self.class_order().into_iter().enumerate() {
            map[id as usize] = i + 1;
        }
        map
    }

    /// Class id of each head channel (index = channel).
    pub fn class_of_channel(&self) -> Vec<u8> {
        std::iter::once(BACKGROUND).chain(self.class_order()).collect()
    }

    /// Number of head channels after step `t`: `1 + |C^0| + ... + |C^t|`.
    pub fn head_width_at(&self, t: usize) -> usize {
        1 + self.groups[..=t].iter().map(Vec::len).sum::<usize>()
    }

    /// Step that introduced class `id`.
    pub fn step_of(&self, id: u8) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&id))
    }

    /// Regroups classes by a permutation of positions. `order[i]` is the
    /// 1-based position (in the current class order) of the class that moves
    /// to position `i`; group sizes are preserved.
    pub fn permute_classes(&self, order: &[u8]) -> Result<Self> {
        let flat = self.class_order();
        let n = flat.len();
        let as_set: BTreeSet<u8> = order.iter().copied().collect();
        if order.len() != n || as_set != (1..=n as u8).collect() {
            return Err(GscError::contract(
                "permute_classes",
                format!("{order:?} is not a permutation of 1..={n}"),
            ));
        }
        let permuted: Vec<u8> = order.iter().map(|&p| flat[p as usize - 1]).collect();
        let mut groups = Vec::with_capacity(self.groups.len());
        let mut at = 0;
        for g in &self.groups {
            groups.push(permuted[at..at + g.len()].to_vec());
            at += g.len();
        }
        Ok(ScenarioSpec { groups, ..self.clone() })
    }

    /// Classes that may appear in images drawn for `step` of `split`.
    fn allowed_classes(&self, step: usize, split: Split) -> Vec<u8> {
        match (split, self.setting) {
            (Split::Train, Setting::Overlapped) => self.class_order(),
            _ => self.groups[..=step].iter().flatten().copied().collect(),
        }
    }

    fn image_seed(&self, split: Split, step: usize, index: usize) -> u64 {
        let tag = match split {
            Split::Train => 0x7472_6169_6e00_0000u64,
            Split::Test => 0x7465_7374_0000_0000u64,
        };
        splitmix(splitmix(splitmix(self.seed ^ tag) ^ step as u64) ^ index as u64)
    }

    /// Renders one image and its full label mask. Train images of step `t`
    /// always contain a class of `C^t`; test images of step `t` contain only
    /// classes seen up to `t`.
    pub fn generate_image(&self, split: Split, step: usize, index: usize) -> Result<(Vec<f32>, Vec<u8>)> {
        if step >= self.steps() {
            return Err(GscError::contract("generate_image", format!("no step {step}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.image_seed(split, step, index));
        let (h, w) = self.image_size;
        let scale = h.min(w) as f64 / 48.0;
        let allowed = self.allowed_classes(step, split);
        let count = rng.random_range(1..=4usize);
        let mut shapes = Vec::with_capacity(count);
        for i in 0..count {
            let id = if i == 0 {
                let g = &self.groups[step];
                g[rng.random_range(0..g.len())]
            } else {
                allowed[rng.random_range(0..allowed.len())]
            };
            let def = self.class(id).expect("validated class id");
            let lo = ((def.size_range.0 as f64 * scale).round() as usize).max(3);
            let hi = ((def.size_range.1 as f64 * scale).round() as usize).max(lo);
            let size = rng.random_range(lo..=hi);
            let color = std::array::from_fn(|c| def.color[c] + rng.random_range(-def.jitter..=def.jitter));
            shapes.push(render::Placement {
                label: id,
                kind: def.shape,
                color,
                size,
            });
        }
        let mut image = vec![0f32; 3 * h * w];
        let mut labels = vec![0u8; h * w];
        render::render(h, w, &shapes, &mut rng, &mut image, &mut labels);
        Ok((image, labels))
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Training data of one step.
#[derive(Clone, Debug)]
pub struct StepDataset {
    pub step: usize,
    pub images: Tensor<f32>,
    /// Labels the learner sees: classes of `C^t` kept, everything else background.
    pub gt_visible: Vec<u8>,
    /// Complete labels, for evaluation and oracle checks only.
    pub gt_full: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

impl StepDataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width
    }
}

fn assemble(
    spec: &ScenarioSpec,
    items: impl Iterator<Item = Result<(Vec<f32>, Vec<u8>)>>,
) -> Result<(Tensor<f32>, Vec<u8>)> {
    let (h, w) = spec.image_size;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut n = 0;
    for item in items {
        let (img, lab) = item?;
        data.extend_from_slice(&img);
        labels.extend_from_slice(&lab);
        n += 1;
    }
    Ok((Tensor::new(vec![n, 3, h, w], data)?, labels))
}

/// Builds `D^t`: renders the step's training images and hides every label
/// outside `C^t` as background.
pub fn build_step_dataset(spec: &ScenarioSpec, step: usize) -> Result<StepDataset> {
    if step >= spec.steps() {
        return Err(GscError::contract("build_step_dataset", format!("no step {step}")));
    }
    let (images, gt_full) = assemble(
        spec,
        (0..spec.images_per_step).map(|i| spec.generate_image(Split::Train, step, i)),
    )?;
    let current: BTreeSet<u8> = spec.groups[step].iter().copied().collect();
    let gt_visible = gt_full
        .iter()
        .map(|l| if current.contains(l) { *l } else { BACKGROUND })
        .collect();
    Ok(StepDataset {
        step,
        images,
        gt_visible,
        gt_full,
        height: spec.image_size.0,
        width: spec.image_size.1,
    })
}

/// Union of the training images of steps `0..=last` with complete labels,
/// as seen by the joint upper bound.
pub fn build_joint_dataset(spec: &ScenarioSpec, last: usize) -> Result<StepDataset> {
    let parts = (0..=last)
        .map(|t| build_step_dataset(spec, t))
        .collect::<Result<Vec<_>>>()?;
    let images = Tensor::concat_batch(&parts.iter().map(|p| &p.images).collect::<Vec<_>>())?;
    let gt_full: Vec<u8> = parts.iter().flat_map(|p| p.gt_full.iter().copied()).collect();
    Ok(StepDataset {
        step: last,
        images,
        gt_visible: gt_full.clone(),
        gt_full,
        height: spec.image_size.0,
        width: spec.image_size.1,
    })
}

/// Evaluation set after step `t`: test images of steps `0..=t`, labeled for
/// every class seen so far.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
}

pub fn build_eval_set(spec: &ScenarioSpec, upto: usize) -> Result<EvalSet> {
    if upto >= spec.steps() {
        return Err(GscError::contract("build_eval_set", format!("no step {upto}")));
    }
    let items =
        (0..=upto).flat_map(|s| (0..spec.test_images_per_step).map(move |i| spec.generate_image(Split::Test, s, i)));
    let (images, labels) = assemble(spec, items)?;
    Ok(EvalSet { images, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(setting: Setting) -> ScenarioSpec {
        let mut s = ScenarioSpec::preset("4-1", setting, 3).unwrap();
        s.images_per_step = 20;
        s.test_images_per_step = 5;
        s
    }

    #[test]
    fn generation_is_deterministic() {
        let s = small(Setting::Overlapped);
        assert_eq!(
            s.generate_image(Split::Train, 1, 7).unwrap(),
            s.generate_image(Split::Train, 1, 7).unwrap()
        );
        assert_ne!(
            s.generate_image(Split::Train, 1, 7).unwrap(),
            s.generate_image(Split::Train, 1, 8).unwrap()
        );
    }

    #[test]
    fn disjoint_step0_has_no_future_classes() {
        let s = ScenarioSpec::preset("3-1x3", Setting::Disjoint, 1).unwrap();
        let future: BTreeSet<u8> = s.groups[1..].iter().flatten().copied().collect();
        for i in 0..100 {
            let (_, gt) = s.generate_image(Split::Train, 0, i).unwrap();
            assert!(gt.iter().all(|l| !future.contains(l)));
        }
    }

    #[test]
    fn disjoint_purity_every_step() {
        let s = ScenarioSpec::preset("3-1x3", Setting::Disjoint, 2).unwrap();
        for t in 0..s.steps() {
            let future: BTreeSet<u8> = s.groups[t + 1..].iter().flatten().copied().collect();
            for i in 0..30 {
                let (_, gt) = s.generate_image(Split::Train, t, i).unwrap();
                assert!(gt.iter().all(|l| !future.contains(l)), "step {t} image {i}");
            }
        }
    }

    #[test]
    fn overlapped_images_often_contain_old_classes() {
        // Measured over 500 step-1 images.
        let s = ScenarioSpec::preset("4-1", Setting::Overlapped, 5).unwrap();
        let old: BTreeSet<u8> = s.groups[0].iter().copied().collect();
        let hits = (0..500)
            .filter(|&i| {
                let (_, gt) = s.generate_image(Split::Train, 1, i).unwrap();
                gt.iter().any(|l| old.contains(l))
            })
            .count();
        assert!(hits as f64 / 500.0 > 0.5, "only {hits}/500");
    }

    #[test]
    fn visible_labels_follow_the_label_space_law() {
        for setting in [Setting::Disjoint, Setting::Overlapped] {
            let s = small(setting);
            for t in 0..s.steps() {
                let d = build_step_dataset(&s, t).unwrap();
                let current: BTreeSet<u8> = s.groups[t].iter().copied().collect();
                for (&v, &f) in d.gt_visible.iter().zip(&d.gt_full) {
                    assert!(v == 0 || current.contains(&v));
                    if current.contains(&f) {
                        assert_eq!(v, f);
                    } else {
                        assert_eq!(v, 0);
                    }
                }
                // every image shows a current class
                let px = d.pixels_per_image();
                for i in 0..d.len() {
                    assert!(d.gt_visible[i * px..(i + 1) * px].iter().any(|&l| l != 0));
                }
            }
        }
    }

    #[test]
    fn old_class_pixels_become_background() {
        let s = small(Setting::Overlapped);
        let d = build_step_dataset(&s, 1).unwrap();
        let old: BTreeSet<u8> = s.groups[0].iter().copied().collect();
        let mut found = false;
        for (&v, &f) in d.gt_visible.iter().zip(&d.gt_full) {
            if old.contains(&f) {
                assert_eq!(v, 0);
                found = true;
            }
        }
        assert!(found);
    }

    #[test]
    fn eval_set_only_has_seen_classes() {
        let s = small(Setting::Overlapped);
        let e = build_eval_set(&s, 0).unwrap();
        assert_eq!(e.images.shape()[0], 5);
        assert!(e.labels.iter().all(|&l| l <= 4));
    }

    #[test]
    fn permutations() {
        let s = small(Setting::Disjoint);
        assert_eq!(s.permute_classes(&[1, 2, 3, 4, 5]).unwrap(), s);
        let order = [3, 5, 1, 4, 2];
        let p = s.permute_classes(&order).unwrap();
        assert_eq!(p.groups, vec![vec![3, 5, 1, 4], vec![2]]);
        let mut inverse = [0u8; 5];
        for (i, &o) in order.iter().enumerate() {
            inverse[o as usize - 1] = i as u8 + 1;
        }
        assert_eq!(p.permute_classes(&inverse).unwrap(), s);
        assert!(s.permute_classes(&[1, 1, 2, 3, 4]).is_err());
        assert!(s.permute_classes(&[1, 2, 3]).is_err());
        for (_, preset) in CLASS_ORDER_PRESETS {
            let q = s.permute_classes(&preset).unwrap();
            assert_eq!(q.groups.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 1]);
            q.validate().unwrap();
        }
    }

    #[test]
    fn validation_catches_bad_groups() {
        let mut s = small(Setting::Disjoint);
        s.groups = vec![vec![1, 2], vec![2, 3, 4, 5]];
        assert!(s.validate().is_err());
        s.groups = vec![vec![1, 2, 3, 4], vec![]];
        assert!(s.validate().is_err());
        s.groups = vec![vec![1, 2, 3, 4]];
        assert!(s.validate().is_err());
    }

    #[test]
    fn channel_maps_are_inverse() {
        let s = small(Setting::Disjoint).permute_classes(&[3, 5, 1, 4, 2]).unwrap();
        let ch = s.channel_of();
        let cls = s.class_of_channel();
        for (c, &id) in cls.iter().enumerate() {
            assert_eq!(ch[id as usize], c);
        }
        assert_eq!(s.head_width_at(0), 5);
        assert_eq!(s.step_of(2), Some(1));
    }
}
