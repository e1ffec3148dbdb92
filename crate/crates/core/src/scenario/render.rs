//! Procedural scene rendering: textured background, optional clutter, and
//! non-overlapping labeled shapes.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Bar,
    Cross,
}

impl ShapeKind {
    /// Whether pixel offset `(dx, dy)` from the box center lies inside a
    /// shape whose bounding box has side `s`. `vertical` only affects bars.
    fn contains(self, dx: f64, dy: f64, s: f64, vertical: bool) -> bool {
        let r = s / 2.0;
        let thick = s / 6.0;
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Triangle => {
                // apex at the top, base at the bottom
                let t = (dy + r) / s;
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (r * 0.5) * (r * 0.5)
            }
            ShapeKind::Bar => {
                let (along, across) = if vertical { (dy, dx) } else { (dx, dy) };
                along.abs() <= r && across.abs() <= thick
            }
            ShapeKind::Cross => (dx.abs() <= r && dy.abs() <= thick) || (dy.abs() <= r && dx.abs() <= thick),
        }
    }
}

/// One object to draw.
pub(crate) struct Placement {
    pub label: u8,
    pub kind: ShapeKind,
    pub color: [f64; 3],
    pub size: usize,
}

/// Renders a scene into `image` (CHW, 3 channels) and `labels` (HW).
/// Shapes that cannot be placed without overlap after a bounded number of
/// retries are dropped; the first shape always fits on an empty canvas.
pub(crate) fn render<R: Rng>(
    h: usize,
    w: usize,
    shapes: &[Placement],
    rng: &mut R,
    image: &mut [f32],
    labels: &mut [u8],
) {
    paint_background(h, w, rng, image);
    labels.fill(0);

    // low-contrast clutter blobs stay labeled background
    let n_clutter = rng.random_range(0..=2);
    for _ in 0..n_clutter {
        let rad = rng.random_range(1.5..3.5_f64);
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let col: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if dx * dx + dy * dy <= rad * rad {
                    for c in 0..3 {
                        let v = &mut image[(c * h + y) * w + x];
                        *v = 0.5 * *v + 0.5 * col[c] as f32;
                    }
                }
            }
        }
    }

    let mut boxes: Vec<(usize, usize, usize)> = Vec::new();
    let jitter = Normal::new(0.0, 0.02).expect("valid std");
    for shape in shapes {
        let s = shape.size.min(h - 2).min(w - 2);
        let mut placed = None;
        for _ in 0..50 {
            let x0 = rng.random_range(1..=w - 1 - s);
            let y0 = rng.random_range(1..=h - 1 - s);
            let clear = boxes
                .iter()
                .all(|&(bx, by, bs)| x0 + s < bx || bx + bs < x0 || y0 + s < by || by + bs < y0);
            if clear {
                placed = Some((x0, y0));
                break;
            }
        }
        let Some((x0, y0)) = placed else { continue };
        boxes.push((x0, y0, s));
        let vertical = rng.random_bool(0.5);
        let half = s as f64 / 2.0;
        let (cx, cy) = (x0 as f64 + half - 0.5, y0 as f64 + half - 0.5);
        for y in y0..y0 + s {
            for x in x0..x0 + s {
                if !shape.kind.contains(x as f64 - cx, y as f64 - cy, s as f64, vertical) {
                    continue;
                }
                labels[y * w + x] = shape.label;
                for c in 0..3 {
                    let v = shape.color[c] + jitter.sample(rng);
                    image[(c * h + y) * w + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
}

/// Low-amplitude noise over a random linear gradient on a muted base color.
fn paint_background<R: Rng>(h: usize, w: usize, rng: &mut R, image: &mut [f32]) {
    let noise = Normal::new(0.0, 0.04).expect("valid std");
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.6));
    let gx = rng.random_range(-0.15..0.15);
    let gy = rng.random_range(-0.15..0.15);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let ramp = gx * (x as f64 / w as f64 - 0.5) + gy * (y as f64 / h as f64 - 0.5);
                let v = base[c] + ramp + noise.sample(rng);
                image[(c * h + y) * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_are_nonempty_at_small_sizes() {
        for kind in [
            ShapeKind::Disk,
            ShapeKind::Square,
            ShapeKind::Triangle,
            ShapeKind::Ring,
            ShapeKind::Bar,
            ShapeKind::Cross,
        ] {
            let s = 6usize;
            let half = s as f64 / 2.0 - 0.5;
            let count = (0..s * s)
                .filter(|&i| {
                    let (x, y) = ((i % s) as f64, (i / s) as f64);
                    kind.contains(x - half, y - half, s as f64, false)
                })
                .count();
            assert!(count > 0, "{kind:?} drew nothing");
        }
    }
}
