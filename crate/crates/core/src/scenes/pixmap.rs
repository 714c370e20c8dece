//! Binary 8-bit portable pixmap (P6) export for visual inspection.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::SceneSample;
use crate::error::Result;
use crate::numerics::IGNORE_INDEX;

/// Fixed K-entry palette; ignore-index renders magenta.
pub fn mask_palette(classes: usize) -> Vec<[u8; 3]> {
    (0..classes)
        .map(|c| {
            // Golden-angle hue walk keeps neighbours distinguishable.
            let hue = (c as f32 * 0.618_034) % 1.0;
            let (r, g, b) = hsv_to_rgb8(hue, 0.85, 0.95);
            [r, g, b]
        })
        .collect()
}

fn hsv_to_rgb8(h: f32, s: f32, v: f32) -> (u8, u8, u8) {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match (i as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    (
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    )
}

fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{width} {height}\n255\n")?;
    out.write_all(rgb)?;
    out.flush()?;
    Ok(())
}

/// Map one channel value from [-1, 1] to a byte.
pub fn to_byte(v: f32) -> u8 {
    (((v + 1.0) / 2.0) * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes `<prefix>_image.ppm` and `<prefix>_mask.ppm`.
pub fn export_pixmap(sample: &SceneSample, classes: usize, path_prefix: &Path) -> Result<()> {
    let shape = sample.image.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let data = sample.image.data();

    let mut rgb = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                // Grayscale replicate when the image has fewer channels.
                let src = ch.min(c - 1);
                rgb[(y * w + x) * 3 + ch] = to_byte(data[src * h * w + y * w + x]);
            }
        }
    }
    let prefix = path_prefix.to_string_lossy();
    write_ppm(Path::new(&format!("{prefix}_image.ppm")), w, h, &rgb)?;

    let palette = mask_palette(classes);
    let mut mask_rgb = vec![0u8; h * w * 3];
    for (i, &m) in sample.mask.iter().enumerate() {
        let color = if m == IGNORE_INDEX {
            [255, 0, 255]
        } else {
            palette[usize::from(m)]
        };
        mask_rgb[i * 3..i * 3 + 3].copy_from_slice(&color);
    }
    write_ppm(Path::new(&format!("{prefix}_mask.ppm")), w, h, &mask_rgb)?;
    Ok(())
}
