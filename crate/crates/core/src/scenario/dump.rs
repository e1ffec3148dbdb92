use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{build_step_dataset, ScenarioSpec};
use crate::error::{GscError, Result};

/// Binary (P5) 8-bit grayscale image.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[u8]) -> Result<()> {
    if values.len() != width * height {
        return Err(GscError::contract("write_pgm", "value count does not match size"));
    }
    let mut f = BufWriter::new(fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(values)?;
    f.flush()?;
    Ok(())
}

/// 8-bit RGB PNG from a CHW float image in `[0, 1]`.
pub fn write_png_rgb(path: &Path, width: usize, height: usize, chw: &[f32]) -> Result<()> {
    if chw.len() != 3 * width * height {
        return Err(GscError::contract("write_png_rgb", "value count does not match size"));
    }
    let px = width * height;
    let mut rgb = Vec::with_capacity(3 * px);
    for p in 0..px {
        for c in 0..3 {
            rgb.push((chw[c * px + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let f = BufWriter::new(fs::File::create(path)?);
    let mut enc = png::Encoder::new(f, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc
        .write_header()
        .map_err(|e| GscError::Format(format!("png header: {e}")))?;
    w.write_image_data(&rgb)
        .map_err(|e| GscError::Format(format!("png data: {e}")))?;
    Ok(())
}

/// Writes every step's training data under `dir`: `manifest.json` with the
/// spec, then `step_<t>/image_<i>.png`, `step_<t>/visible_<i>.pgm` and
/// `step_<t>/full_<i>.pgm`.
pub fn dump_dataset(spec: &ScenarioSpec, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(spec)?)?;
    let (h, w) = spec.image_size;
    for t in 0..spec.steps() {
        let d = build_step_dataset(spec, t)?;
        let sub = dir.join(format!("step_{t}"));
        fs::create_dir_all(&sub)?;
        let px = h * w;
        for i in 0..d.len() {
            write_png_rgb(&sub.join(format!("image_{i:04}.png")), w, h, d.images.image(i))?;
            write_pgm(
                &sub.join(format!("visible_{i:04}.pgm")),
                w,
                h,
                &d.gt_visible[i * px..(i + 1) * px],
            )?;
            write_pgm(
                &sub.join(format!("full_{i:04}.pgm")),
                w,
                h,
                &d.gt_full[i * px..(i + 1) * px],
            )?;
        }
    }
    Ok(())
}
