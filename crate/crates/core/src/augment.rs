//! Seeded, label-preserving image augmentation (flip, rotation, zoom).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::frame::{Border, FrameTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FillMode {
    Reflect,
    ConstantZero,
}

impl From<FillMode> for Border {
    fn from(f: FillMode) -> Border {
        match f {
            FillMode::Reflect => Border::Reflect,
            FillMode::ConstantZero => Border::Zero,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub horizontal_flip_prob: f64,
    pub rotation_max_degrees: f64,
    pub zoom_range: (f64, f64),
    pub fill_mode: FillMode,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            horizontal_flip_prob: 0.5,
            rotation_max_degrees: 15.0,
            zoom_range: (0.85, 1.15),
            fill_mode: FillMode::Reflect,
        }
    }
}

impl AugmentPolicy {
    /// Leaves every frame untouched.
    pub fn identity() -> Self {
        Self {
            horizontal_flip_prob: 0.0,
            rotation_max_degrees: 0.0,
            zoom_range: (1.0, 1.0),
            fill_mode: FillMode::Reflect,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.horizontal_flip_prob) {
            return Err(Error::validation("horizontal_flip_prob must lie in [0, 1]"));
        }
        if !(0.0..=180.0).contains(&self.rotation_max_degrees) {
            return Err(Error::validation("rotation_max_degrees must lie in [0, 180]"));
        }
        let (lo, hi) = self.zoom_range;
        if !(lo > 0.0 && lo <= 1.0 && 1.0 <= hi && hi.is_finite()) {
            return Err(Error::validation(format!(
                "zoom range ({lo}, {hi}) must satisfy 0 < lo <= 1 <= hi"
            )));
        }
        Ok(())
    }
}

pub fn horizontal_flip(frame: &FrameTensor) -> FrameTensor {
    let w = frame.width();
    FrameTensor::from_fn(frame.height(), w, frame.channels(), |y, x, c| {
        frame.get(y, w - 1 - x, c)
    })
}

/// Draw a flip, a rotation angle in `[-max, max]` and a zoom factor in
/// `[lo, hi]` from `seed`, then resample bilinearly about the frame center.
pub fn augment_image(frame: &FrameTensor, policy: &AugmentPolicy, seed: u64) -> FrameTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = rng.gen::<f64>() < policy.horizontal_flip_prob;
    let max = policy.rotation_max_degrees;
    let angle = if max > 0.0 { rng.gen_range(-max..=max) } else { 0.0 };
    let (lo, hi) = policy.zoom_range;
    let zoom = if hi > lo { rng.gen_range(lo..=hi) } else { lo };

    let base = if flip {
        horizontal_flip(frame)
    } else {
        frame.clone()
    };
    if angle == 0.0 && zoom == 1.0 {
        return base;
    }

    let border = Border::from(policy.fill_mode);
    let (sin, cos) = angle.to_radians().sin_cos();
    let cy = (frame.height() as f64 - 1.0) / 2.0;
    let cx = (frame.width() as f64 - 1.0) / 2.0;
    FrameTensor::from_fn(frame.height(), frame.width(), frame.channels(), |y, x, c| {
        // inverse map: output pixel -> source pixel
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        let sx = (cos * dx + sin * dy) / zoom + cx;
        let sy = (-sin * dx + cos * dy) / zoom + cy;
        base.sample(sy, sx, c, border)
    })
}

/// Augment every frame with seed `seed + i`; labels pass through untouched.
pub fn augment_batch(
    frames: &[FrameTensor],
    labels: &[Label],
    policy: &AugmentPolicy,
    seed: u64,
) -> Result<(Vec<FrameTensor>, Vec<Label>)> {
    if frames.len() != labels.len() {
        return Err(Error::validation(format!(
            "{} frames but {} labels",
            frames.len(),
            labels.len()
        )));
    }
    let out = frames
        .iter()
        .enumerate()
        .map(|(i, f)| augment_image(f, policy, seed.wrapping_add(i as u64)))
        .collect();
    Ok((out, labels.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize, c: usize) -> FrameTensor {
        FrameTensor::from_fn(h, w, c, |y, x, ch| ((y * w + x) * c + ch) as f64 / (h * w * c) as f64)
    }

    #[test]
    fn identity_policy_returns_input() {
        let f = ramp(7, 5, 3);
        assert_eq!(augment_image(&f, &AugmentPolicy::identity(), 42), f);
    }

    #[test]
    fn flip_reverses_columns() {
        let f = FrameTensor::new(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let flipped = horizontal_flip(&f);
        assert_eq!(flipped.values(), &[0.2, 0.1, 0.4, 0.3]);

        let forced = AugmentPolicy {
            horizontal_flip_prob: 1.0,
            ..AugmentPolicy::identity()
        };
        let once = augment_image(&f, &forced, 3);
        assert_eq!(once, flipped);
        assert_eq!(augment_image(&once, &forced, 4), f);
    }

    #[test]
    fn batch_contract() {
        let policy = AugmentPolicy::default();
        let (f, l) = augment_batch(&[], &[], &policy, 1).unwrap();
        assert!(f.is_empty() && l.is_empty());

        let frames = vec![ramp(4, 4, 3), ramp(4, 4, 3), ramp(4, 4, 3)];
        let labels = vec![Label::Gun, Label::NoGun, Label::Gun];
        let (same, same_labels) =
            augment_batch(&frames, &labels, &AugmentPolicy::identity(), 9).unwrap();
        assert_eq!(same, frames);
        assert_eq!(same_labels, labels);

        let a = augment_batch(&frames, &labels, &policy, 17).unwrap();
        let b = augment_batch(&frames, &labels, &policy, 17).unwrap();
        assert_eq!(a, b);

        assert!(augment_batch(&frames, &labels[..2], &policy, 0).is_err());
    }

    #[test]
    fn policy_validation() {
        assert!(AugmentPolicy::default().validate().is_ok());
        let bad = AugmentPolicy {
            zoom_range: (1.1, 1.3),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentPolicy {
            horizontal_flip_prob: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn shape_range_and_determinism(
            h in 2usize..9, w in 2usize..9, c in 1usize..4,
            flip in 0.0f64..=1.0, rot in 0.0f64..=180.0,
            lo in 0.5f64..=1.0, hi in 1.0f64..2.0,
            zero_fill in any::<bool>(), seed in any::<u64>(),
        ) {
            let policy = AugmentPolicy {
                horizontal_flip_prob: flip,
                rotation_max_degrees: rot,
                zoom_range: (lo, hi),
                fill_mode: if zero_fill { FillMode::ConstantZero } else { FillMode::Reflect },
            };
            let f = ramp(h, w, c);
            let out = augment_image(&f, &policy, seed);
            prop_assert_eq!(out.shape(), f.shape());
            prop_assert!(out.values().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(augment_image(&f, &policy, seed), out);
        }
    }
}
