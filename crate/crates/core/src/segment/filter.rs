//! Pixel-level label filtering for synthetic samples.
//!
//! A pixel is dropped (set to the ignore index) when its cross-entropy
//! under the guidance net exceeds phi times the class-conditional mean
//! cross-entropy measured on real validation data.

use super::SegNet;
use crate::error::{Error, Result};
use crate::numerics::{IGNORE_INDEX, Tensor};
use crate::scenes::SceneSample;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterCalibration {
    /// Mean per-pixel cross-entropy on real validation data, by true class.
    pub per_class_mean_ce: Vec<f64>,
    /// Fallback for classes unseen during calibration.
    pub global_mean_ce: f64,
}

/// Per-pixel negative log-softmax of the labelled class. `None` where the
/// label is the ignore index.
fn per_pixel_ce(logit_rows: &Tensor, mask: &[u8], classes: usize) -> Vec<Option<f64>> {
    mask.iter()
        .enumerate()
        .map(|(p, &label)| {
            if label == IGNORE_INDEX {
                return None;
            }
            let row = &logit_rows.data()[p * classes..(p + 1) * classes];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse: f64 = row
                .iter()
                .map(|&v| f64::from(v - max).exp())
                .sum::<f64>()
                .ln()
                + f64::from(max);
            Some(lse - f64::from(row[usize::from(label)]))
        })
        .collect()
}

/// Measure class-conditional mean CE on real validation samples.
pub fn calibrate_filter(net: &SegNet, validation: &[SceneSample]) -> Result<FilterCalibration> {
    let k = net.cfg.classes;
    let mut sums = vec![0.0f64; k];
    let mut counts = vec![0u64; k];
    for sample in validation {
        let rows = net.logits(&sample.image)?;
        for (ce, &label) in per_pixel_ce(&rows, &sample.mask, k).iter().zip(&sample.mask) {
            if let Some(ce) = ce {
                sums[usize::from(label)] += ce;
                counts[usize::from(label)] += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Contract(
            "calibrate_filter: no scored pixels in validation set".into(),
        ));
    }
    let global = sums.iter().sum::<f64>() / total as f64;
    let per_class = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { global })
        .collect();
    Ok(FilterCalibration {
        per_class_mean_ce: per_class,
        global_mean_ce: global,
    })
}

/// Returns the filtered mask and the fraction of previously-scored pixels
/// that were ignored.
pub fn pixel_filter(
    image: &Tensor,
    mask: &[u8],
    net: &SegNet,
    calibration: Option<&FilterCalibration>,
    phi: f64,
) -> Result<(Vec<u8>, f64)> {
    if phi <= 0.0 {
        return Err(Error::Config(format!("pixel_filter: phi {phi} must be positive")));
    }
    let calibration = calibration.ok_or_else(|| {
        Error::Config("pixel_filter: missing calibration statistics (train the guidance net with a validation split)".into())
    })?;
    let k = net.cfg.classes;
    if calibration.per_class_mean_ce.len() != k {
        return Err(Error::Config(format!(
            "pixel_filter: calibration has {} classes, net has {k}",
            calibration.per_class_mean_ce.len()
        )));
    }
    let rows = net.logits(image)?;
    let ces = per_pixel_ce(&rows, mask, k);
    let mut filtered = mask.to_vec();
    let mut scored = 0u64;
    let mut dropped = 0u64;
    for (p, ce) in ces.iter().enumerate() {
        let Some(ce) = ce else { continue };
        scored += 1;
        let threshold = phi * calibration.per_class_mean_ce[usize::from(mask[p])];
        if *ce > threshold {
            filtered[p] = IGNORE_INDEX;
            dropped += 1;
        }
    }
    let fraction = if scored > 0 {
        dropped as f64 / scored as f64
    } else {
        0.0
    };
    Ok((filtered, fraction))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{generate_scene, SceneConfig};
    use crate::segment::{train_seg, SegNetConfig, SegTrainConfig};

    fn fixture() -> (SegNet, FilterCalibration, Vec<SceneSample>) {
        let mut cfg = SceneConfig::default_desk();
        cfg.size = 16;
        let data: Vec<SceneSample> = (0..40).map(|i| generate_scene(&cfg, i)).collect();
        let net = train_seg(
            &data[..32],
            SegNetConfig {
                classes: 6,
                channels: 3,
                image_size: 16,
                base: 8,
            },
            &SegTrainConfig {
                epochs: 12,
                augment: false,
                seed: 1,
                ..SegTrainConfig::default()
            },
        )
        .unwrap();
        let cal = calibrate_filter(&net, &data[32..]).unwrap();
        (net, cal, data)
    }

    #[test]
    fn large_phi_is_a_noop_and_tiny_phi_ignores_everything() {
        let (net, cal, data) = fixture();
        let s = &data[0];
        let (kept, frac) = pixel_filter(&s.image, &s.mask, &net, Some(&cal), 1e9).unwrap();
        assert_eq!(kept, s.mask);
        assert_eq!(frac, 0.0);
        let (dropped, frac) = pixel_filter(&s.image, &s.mask, &net, Some(&cal), 1e-9).unwrap();
        assert!(dropped.iter().all(|&m| m == IGNORE_INDEX));
        assert_eq!(frac, 1.0);
    }

    #[test]
    fn missing_calibration_is_an_error() {
        let (net, _, data) = fixture();
        let s = &data[0];
        assert!(pixel_filter(&s.image, &s.mask, &net, None, 1.25).is_err());
    }

    #[test]
    fn contradicted_region_is_preferentially_ignored() {
        let (net, cal, data) = fixture();
        // Take a real sample and relabel its upper half with a wrong class:
        // most ignored pixels must land in the upper half.
        let s = &data[1];
        let size = 16usize;
        let mut contradicted = s.mask.clone();
        for y in 0..size / 2 {
            for x in 0..size {
                let wrong = (s.mask[y * size + x] + 1) % 6;
                contradicted[y * size + x] = wrong;
            }
        }
        let (filtered, frac) =
            pixel_filter(&s.image, &contradicted, &net, Some(&cal), 1.25).unwrap();
        assert!(frac > 0.0);
        let upper = filtered[..size * size / 2]
            .iter()
            .filter(|&&m| m == IGNORE_INDEX)
            .count();
        let total = filtered.iter().filter(|&&m| m == IGNORE_INDEX).count();
        assert!(
            upper as f64 >= 0.6 * total as f64,
            "upper {upper} of {total}"
        );
    }
}
