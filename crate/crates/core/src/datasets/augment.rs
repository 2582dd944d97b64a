use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ImageDims, LabeledImage};
use crate::error::{invalid, Result};

/// Random translation, horizontal flip and per-pixel Gaussian jitter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Largest translation in pixels along each axis.
    pub max_shift: usize,
    pub jitter_std: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_shift: 2,
            jitter_std: 0.05,
            flip_prob: 0.0,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            max_shift: 0,
            jitter_std: 0.0,
            flip_prob: 0.0,
        }
    }

    pub fn validate(&self, dims: ImageDims) -> Result<()> {
        if 2 * self.max_shift >= dims.height.min(dims.width) {
            return Err(invalid(format!(
                "max_shift {} must be below half of min(H, W) = {}",
                self.max_shift,
                dims.height.min(dims.width)
            )));
        }
        if !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) {
            return Err(invalid(format!("jitter_std {} must be >= 0", self.jitter_std)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(invalid(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        Ok(())
    }
}

/// Seeded augmentation `x⁺ = a(x)`; see [`augment_with`].
pub fn augment(image: &LabeledImage, dims: ImageDims, cfg: &AugmentConfig, seed: u64) -> LabeledImage {
    augment_with(image, dims, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Shifts by a uniform integer offset in `[-max_shift, max_shift]²` (vacated
/// pixels become background), flips horizontally with `flip_prob`, adds
/// `N(0, jitter_std²)` noise, and clamps to `[-1, 1]`. The label is untouched.
pub fn augment_with<R: Rng>(
    image: &LabeledImage,
    dims: ImageDims,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> LabeledImage {
    let s = cfg.max_shift as i64;
    let dx = rng.gen_range(-s..=s);
    let dy = rng.gen_range(-s..=s);
    let flip = rng.gen::<f64>() < cfg.flip_prob;
    let (h, w, c) = (dims.height as i64, dims.width as i64, dims.channels);
    let mut out = vec![-1.0; dims.len()];
    for row in 0..h {
        for col in 0..w {
            let src_col = if flip { w - 1 - (col - dx) } else { col - dx };
            let src_row = row - dy;
            if (0..h).contains(&src_row) && (0..w).contains(&src_col) {
                let dst = ((row * w + col) as usize) * c;
                let src = ((src_row * w + src_col) as usize) * c;
                out[dst..dst + c].copy_from_slice(&image.pixels[src..src + c]);
            }
        }
    }
    if cfg.jitter_std > 0.0 {
        let noise = Normal::new(0.0, cfg.jitter_std).expect("validated std");
        for p in &mut out {
            *p += noise.sample(rng);
        }
    }
    for p in &mut out {
        *p = p.clamp(-1.0, 1.0);
    }
    LabeledImage {
        pixels: out,
        label: image.label,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::generate_synthetic;
    use proptest::prelude::*;

    /// Independent translate: `out[r][c] = in[r - dy][c - dx]` with -1 fill.
    fn shift_oracle(px: &[f64], h: usize, w: usize, dx: i64, dy: i64) -> Vec<f64> {
        let mut out = vec![-1.0; h * w];
        for r in 0..h as i64 {
            for c in 0..w as i64 {
                let (sr, sc) = (r - dy, c - dx);
                if sr >= 0 && sc >= 0 && sr < h as i64 && sc < w as i64 {
                    out[(r * w as i64 + c) as usize] = px[(sr * w as i64 + sc) as usize];
                }
            }
        }
        out
    }

    #[test]
    fn identity_config_is_exact() {
        let ds = generate_synthetic(2, 2, 12, 12, 1).unwrap();
        let out = augment(&ds.images[0], ds.dims, &AugmentConfig::identity(), 99);
        assert_eq!(out, ds.images[0]);
    }

    #[test]
    fn pure_shift_matches_translate_oracle() {
        let ds = generate_synthetic(4, 4, 16, 16, 2).unwrap();
        let cfg = AugmentConfig {
            max_shift: 2,
            jitter_std: 0.0,
            flip_prob: 0.0,
        };
        for (seed, im) in ds.images.iter().enumerate() {
            let out = augment(im, ds.dims, &cfg, seed as u64);
            let matched = (-2..=2)
                .flat_map(|dx| (-2..=2).map(move |dy| (dx, dy)))
                .any(|(dx, dy)| shift_oracle(&im.pixels, 16, 16, dx, dy) == out.pixels);
            assert!(matched, "image {seed} is not a translate");
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let ds = generate_synthetic(2, 1, 12, 12, 3).unwrap();
        let cfg = AugmentConfig {
            max_shift: 2,
            jitter_std: 0.1,
            flip_prob: 0.5,
        };
        assert_eq!(
            augment(&ds.images[1], ds.dims, &cfg, 5),
            augment(&ds.images[1], ds.dims, &cfg, 5)
        );
    }

    #[test]
    fn validation() {
        let dims = ImageDims::new(8, 10, 1);
        assert!(AugmentConfig { max_shift: 4, ..AugmentConfig::identity() }.validate(dims).is_err());
        assert!(AugmentConfig { max_shift: 3, ..AugmentConfig::identity() }.validate(dims).is_ok());
        assert!(AugmentConfig { flip_prob: 1.5, ..AugmentConfig::identity() }.validate(dims).is_err());
        assert!(AugmentConfig { jitter_std: -0.1, ..AugmentConfig::identity() }.validate(dims).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn label_kept_and_range_respected(seed in 0u64..10_000, jitter in 0.0f64..2.0, flip in 0.0f64..=1.0, shift in 0usize..4) {
            let ds = generate_synthetic(4, 1, 10, 10, seed % 17).unwrap();
            let cfg = AugmentConfig { max_shift: shift, jitter_std: jitter, flip_prob: flip };
            for im in &ds.images {
                let out = augment(im, ds.dims, &cfg, seed);
                prop_assert_eq!(out.label, im.label);
                prop_assert!(out.pixels.iter().all(|p| (-1.0..=1.0).contains(p)));
            }
        }
    }
}
