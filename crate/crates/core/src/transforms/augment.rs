//! Random (non-adversarial) augmentation: affine, flips, elastic warp, and
//! global brightness/contrast.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::svf::{identity_coords, random_velocity, warp, warp_labels, DeformationField};
use crate::data::{LabelMask, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ranges are symmetric half-widths: a scale range of `0.1` draws scale
/// factors from `[0.9, 1.1]`, a rotation of `15` draws angles in `[-15°, 15°]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandAugConfig {
    pub scale: f64,
    pub rotation_deg: f64,
    pub translation_px: f64,
    pub flip_x_prob: f64,
    pub flip_y_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub elastic_sigma: f64,
    pub elastic_magnitude: f64,
    /// Number of classes used when warping masks through one-hot channels.
    pub classes: usize,
    pub seed: u64,
}

impl Default for RandAugConfig {
    fn default() -> Self {
        Self {
            scale: 0.1,
            rotation_deg: 15.0,
            translation_px: 3.0,
            flip_x_prob: 0.5,
            flip_y_prob: 0.5,
            brightness: 0.1,
            contrast: 0.1,
            elastic_sigma: 4.0,
            elastic_magnitude: 1.5,
            classes: 2,
            seed: 0,
        }
    }
}

impl RandAugConfig {
    /// Every transform disabled.
    pub fn identity() -> Self {
        Self {
            scale: 0.0,
            rotation_deg: 0.0,
            translation_px: 0.0,
            flip_x_prob: 0.0,
            flip_y_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            elastic_sigma: 0.0,
            elastic_magnitude: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("scale", self.scale),
            ("rotation_deg", self.rotation_deg),
            ("translation_px", self.translation_px),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("elastic_sigma", self.elastic_sigma),
            ("elastic_magnitude", self.elastic_magnitude),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("augment.{name} must be >= 0, got {v}")));
            }
        }
        if self.scale >= 1.0 || self.contrast >= 1.0 {
            return Err(Error::Config("augment.scale and augment.contrast must be < 1".into()));
        }
        for (name, p) in [("flip_x_prob", self.flip_x_prob), ("flip_y_prob", self.flip_y_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} must be in [0, 1]")));
            }
        }
        if self.classes < 2 {
            return Err(Error::Config("augment.classes must be >= 2".into()));
        }
        Ok(())
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, half: f64) -> f64 {
    if half == 0.0 {
        0.0
    } else {
        rng.gen_range(-half..=half)
    }
}

fn bernoulli<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    p > 0.0 && rng.gen_bool(p)
}

pub fn flip_x(t: &Tensor) -> Result<Tensor> {
    let (h, w) = t.spatial()?;
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    debug_assert_eq!(out.len() % (h * w), 0);
    Ok(out)
}

pub fn flip_y(t: &Tensor) -> Result<Tensor> {
    let (h, w) = t.spatial()?;
    let planes = t.len() / (h * w);
    let mut out = t.clone();
    for p in 0..planes {
        for y in 0..h {
            let src = &t.data()[(p * h + h - 1 - y) * w..][..w];
            out.data_mut()[(p * h + y) * w..][..w].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// The geometric part shared by image and mask: output pixel `p` samples the
/// source at `c + A⁻¹(p - c - t) + e(p)`.
fn geometry<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &RandAugConfig,
    h: usize,
    w: usize,
) -> Result<Option<DeformationField>> {
    let scale = 1.0 + symmetric(rng, cfg.scale);
    let theta = symmetric(rng, cfg.rotation_deg).to_radians();
    let tx = symmetric(rng, cfg.translation_px);
    let ty = symmetric(rng, cfg.translation_px);
    let elastic = if cfg.elastic_magnitude > 0.0 {
        let mag = cfg.elastic_magnitude * rng.gen_range(0.0..=1.0);
        Some(random_velocity(rng, h, w, cfg.elastic_sigma, mag)?)
    } else {
        None
    };
    if scale == 1.0 && theta == 0.0 && tx == 0.0 && ty == 0.0 && elastic.is_none() {
        return Ok(None);
    }
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = theta.sin_cos();
    let mut coords = identity_coords(h, w);
    let n = h * w;
    for p in 0..n {
        let dx = (p % w) as f64 - cx - tx;
        let dy = (p / w) as f64 - cy - ty;
        // Inverse rotation then inverse scaling.
        let sx = (c * dx + s * dy) / scale;
        let sy = (-s * dx + c * dy) / scale;
        coords.data_mut()[p] = cx + sx;
        coords.data_mut()[n + p] = cy + sy;
    }
    if let Some(e) = elastic {
        coords = coords.add(&e)?;
    }
    let id = identity_coords(h, w);
    Ok(Some(DeformationField::from_displacement(&coords.sub(&id)?)?))
}

/// One random augmentation draw. Geometry is applied identically to image and
/// mask; intensity changes touch the image only.
pub fn rand_augment<R: Rng + ?Sized>(sample: &Sample, cfg: &RandAugConfig, rng: &mut R) -> Result<Sample> {
    let (h, w) = sample.extent();
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();

    if let Some(def) = geometry(rng, cfg, h, w)? {
        image = warp(&image, &def)?;
        mask = mask.map(|m| warp_labels(&m, &def, cfg.classes)).transpose()?;
    }
    if bernoulli(rng, cfg.flip_x_prob) {
        image = flip_x(&image)?;
        mask = mask.as_ref().map(LabelMask::flip_x);
    }
    if bernoulli(rng, cfg.flip_y_prob) {
        image = flip_y(&image)?;
        mask = mask.as_ref().map(LabelMask::flip_y);
    }
    let contrast = 1.0 + symmetric(rng, cfg.contrast);
    let brightness = symmetric(rng, cfg.brightness);
    if contrast != 1.0 || brightness != 0.0 {
        image = image.map(|v| (v * contrast + brightness).clamp(0.0, 1.0))?;
    }
    Ok(Sample { id: sample.id.clone(), image, mask, meta: sample.meta.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Sample {
        generate(&SynthConfig { seed: 1, ..SynthConfig::for_extent(32, 32) }, 1)
            .unwrap()
            .remove(0)
    }

    #[test]
    fn identity_config_leaves_sample_unchanged() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(rand_augment(&s, &RandAugConfig::identity(), &mut rng).unwrap(), s);
    }

    #[test]
    fn flips_are_involutions() {
        let s = sample();
        assert_eq!(flip_x(&flip_x(&s.image).unwrap()).unwrap(), s.image);
        assert_eq!(flip_y(&flip_y(&s.image).unwrap()).unwrap(), s.image);
        let always = RandAugConfig { flip_x_prob: 1.0, ..RandAugConfig::identity() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let once = rand_augment(&s, &always, &mut rng).unwrap();
        let twice = rand_augment(&once, &always, &mut rng).unwrap();
        assert_eq!(twice, s);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let s = sample();
        let cfg = RandAugConfig::default();
        let a = rand_augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = rand_augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a.image.to_bytes(), b.image.to_bytes());
        assert_eq!(a.mask, b.mask);
        assert_ne!(a.image, s.image);
    }

    #[test]
    fn geometry_moves_mask_with_image() {
        // Pure translation by whole pixels keeps image and mask aligned exactly.
        let s = sample();
        let cfg = RandAugConfig { translation_px: 3.0, ..RandAugConfig::identity() };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = rand_augment(&s, &cfg, &mut rng).unwrap();
        let m = out.mask.unwrap();
        // Foreground is mostly preserved under a few-pixel shift.
        let before = s.mask.unwrap().count(1) as f64;
        assert!((m.count(1) as f64 - before).abs() / before < 0.15);
        assert!(RandAugConfig { scale: 1.5, ..RandAugConfig::default() }.validate().is_err());
    }
}
