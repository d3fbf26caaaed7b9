//! Diffeomorphic warps from stationary velocity fields.
//!
//! Vector fields are stored channel-first as `2 x H x W`; channel 0 holds the
//! column (x) component and channel 1 the row (y) component, in pixels.

use rand::Rng;
use rand_distr::StandardNormal;

use super::smooth::smooth_on;
use crate::autodiff::{Tape, Var};
use crate::data::LabelMask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 6;

/// Velocity field with its per-pixel magnitude bound.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    v: Tensor,
    beta: f64,
}

impl VelocityField {
    pub fn new(v: Tensor, beta: f64) -> Result<Self> {
        check_vector_field(&v)?;
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be >= 0, got {beta}")));
        }
        Ok(Self { v, beta })
    }

    pub fn zeros(h: usize, w: usize, beta: f64) -> Result<Self> {
        Self::new(Tensor::zeros(&[2, h, w]), beta)
    }

    pub fn v(&self) -> &Tensor {
        &self.v
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn max_magnitude(&self) -> f64 {
        max_magnitude(&self.v)
    }
}

/// Absolute sampling positions `x + u(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    coords: Tensor,
}

impl DeformationField {
    pub fn identity(h: usize, w: usize) -> Self {
        Self { coords: identity_coords(h, w) }
    }

    pub fn from_displacement(u: &Tensor) -> Result<Self> {
        let (h, w) = check_vector_field(u)?;
        Ok(Self { coords: identity_coords(h, w).add(u)? })
    }

    pub fn coords(&self) -> &Tensor {
        &self.coords
    }

    pub fn displacement(&self) -> Tensor {
        let (h, w) = self.extent();
        self.coords.sub(&identity_coords(h, w)).expect("same shape")
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.coords.shape()[1], self.coords.shape()[2])
    }
}

/// Velocity-field regularization and integration settings.
#[derive(Clone, Debug, PartialEq)]
pub struct MorphConfig {
    /// Gaussian width applied to the velocity field (fluid-like).
    pub sigma_velocity: f64,
    /// Gaussian width applied to the integrated displacement (diffusion-like).
    pub sigma_displacement: f64,
    pub steps: usize,
    pub beta: f64,
}

impl Default for MorphConfig {
    fn default() -> Self {
        Self { sigma_velocity: 1.5, sigma_displacement: 1.0, steps: DEFAULT_STEPS, beta: 2.0 }
    }
}

fn check_vector_field(v: &Tensor) -> Result<(usize, usize)> {
    match *v.shape() {
        [2, h, w] => Ok((h, w)),
        ref s => Err(Error::shape(format!("vector field must be 2xHxW, got {s:?}"))),
    }
}

pub fn identity_coords(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[2, h, w], |i| {
        let p = i % (h * w);
        if i < h * w {
            (p % w) as f64
        } else {
            (p / w) as f64
        }
    })
}

/// Largest per-pixel Euclidean magnitude of a `2xHxW` field.
pub fn max_magnitude(v: &Tensor) -> f64 {
    let n = v.len() / 2;
    let (x, y) = v.data().split_at(n);
    x.iter().zip(y).map(|(a, b)| a.hypot(*b)).fold(0.0, f64::max)
}

/// Recorded scaling and squaring. Returns the `2xHxW` displacement.
pub fn integrate_on(tape: &mut Tape, v: Var, steps: usize) -> Result<Var> {
    if steps == 0 {
        return Err(Error::invalid("scaling and squaring needs at least one step"));
    }
    let (h, w) = check_vector_field(tape.value(v))?;
    let id = tape.leaf(identity_coords(h, w));
    let mut u = tape.scale(v, 0.5f64.powi(steps as i32))?;
    for _ in 0..steps {
        let at = tape.add(id, u)?;
        let moved = tape.grid_sample(u, at)?;
        u = tape.add(u, moved)?;
    }
    Ok(u)
}

/// Flow of `v` over unit time: `Id + v / 2^T` squared `T` times.
pub fn integrate_svf(v: &VelocityField, steps: usize) -> Result<DeformationField> {
    let mut tape = Tape::new();
    let vv = tape.leaf(v.v().clone());
    let u = integrate_on(&mut tape, vv, steps)?;
    DeformationField::from_displacement(tape.value(u))
}

/// Recorded deformation: integrate, then diffuse the displacement. Returns
/// absolute sampling coordinates.
pub fn deformation_on(tape: &mut Tape, v: Var, cfg: &MorphConfig) -> Result<Var> {
    let (h, w) = check_vector_field(tape.value(v))?;
    let u = integrate_on(tape, v, cfg.steps)?;
    let u = smooth_on(tape, u, cfg.sigma_displacement)?;
    let id = tape.leaf(identity_coords(h, w));
    tape.add(id, u)
}

pub fn realize_deformation(v: &VelocityField, cfg: &MorphConfig) -> Result<DeformationField> {
    let mut tape = Tape::new();
    let vv = tape.leaf(v.v().clone());
    let c = deformation_on(&mut tape, vv, cfg)?;
    Ok(DeformationField { coords: tape.value(c).clone() })
}

/// Smooths `v` with the fluid kernel, then rescales it globally so that the
/// fastest pixel moves at `beta`. A zero field stays zero.
pub fn project_velocity(v: &Tensor, cfg: &MorphConfig) -> Result<VelocityField> {
    let mut tape = Tape::new();
    let vv = tape.leaf(v.clone());
    let s = smooth_on(&mut tape, vv, cfg.sigma_velocity)?;
    let smoothed = tape.value(s).clone();
    VelocityField::new(rescale_magnitude(&smoothed, cfg.beta), cfg.beta)
}

/// Global rescale so that `max_magnitude` equals `beta`, rounded down so that
/// it never exceeds `beta` in floating point.
pub fn rescale_magnitude(v: &Tensor, beta: f64) -> Tensor {
    let m = max_magnitude(v);
    if m == 0.0 {
        return v.clone();
    }
    let mut s = beta / m;
    loop {
        let out = v.map(|x| x * s).expect("finite");
        if max_magnitude(&out) <= beta {
            return out;
        }
        s = f64::from_bits(s.to_bits() - 1);
    }
}

/// Gaussian noise smoothed by `sigma`, scaled to a maximum per-pixel
/// magnitude of `max_mag`.
pub fn random_velocity<R: Rng + ?Sized>(
    rng: &mut R,
    h: usize,
    w: usize,
    sigma: f64,
    max_mag: f64,
) -> Result<Tensor> {
    let noise = Tensor::from_fn(&[2, h, w], |_| rng.sample(StandardNormal));
    let mut tape = Tape::new();
    let n = tape.leaf(noise);
    let s = smooth_on(&mut tape, n, sigma)?;
    let smooth = tape.value(s);
    let m = max_magnitude(smooth);
    if m == 0.0 {
        return Ok(smooth.clone());
    }
    smooth.scale(max_mag / m)
}

/// Bilinear `image ∘ def` with replicate boundary.
pub fn warp(image: &Tensor, def: &DeformationField) -> Result<Tensor> {
    let mut tape = Tape::new();
    let i = tape.leaf(image.clone());
    let c = tape.leaf(def.coords.clone());
    let out = warp_on(&mut tape, i, c)?;
    Ok(tape.value(out).clone())
}

pub fn warp_on(tape: &mut Tape, image: Var, coords: Var) -> Result<Var> {
    let (h, w) = tape.value(image).spatial()?;
    let (ch, cw) = check_vector_field(tape.value(coords))?;
    if (h, w) != (ch, cw) {
        return Err(Error::shape(format!("warp: image {h}x{w} vs deformation {ch}x{cw}")));
    }
    tape.grid_sample(image, coords)
}

/// Warps a label mask through its one-hot channels, then takes the argmax.
pub fn warp_labels(mask: &LabelMask, def: &DeformationField, classes: usize) -> Result<LabelMask> {
    let onehot = mask.one_hot(classes)?;
    let warped = warp(&onehot, def)?;
    LabelMask::argmax(&warped)
}

/// `(a ∘ b)(x) = a(b(x))`, composed on displacements.
pub fn compose(a: &DeformationField, b: &DeformationField) -> Result<DeformationField> {
    if a.extent() != b.extent() {
        return Err(Error::shape("compose: extents differ"));
    }
    let ua = a.displacement();
    let ub = b.displacement();
    let moved = warp(&ua, b)?;
    DeformationField::from_displacement(&ub.add(&moved)?)
}

/// Mean displacement magnitude over pixels at least `margin` from the border.
pub fn mean_interior_magnitude(u: &Tensor, margin: usize) -> Result<f64> {
    let (h, w) = check_vector_field(u)?;
    if 2 * margin >= h || 2 * margin >= w {
        return Err(Error::invalid("margin leaves no interior"));
    }
    let n = h * w;
    let mut s = 0.0;
    let mut count = 0usize;
    for y in margin..h - margin {
        for x in margin..w - margin {
            let p = y * w + x;
            s += u.data()[p].hypot(u.data()[n + p]);
            count += 1;
        }
    }
    Ok(s / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_velocity_is_identity() {
        let d = integrate_svf(&VelocityField::zeros(9, 11, 2.0).unwrap(), 6).unwrap();
        assert_eq!(d, DeformationField::identity(9, 11));
    }

    #[test]
    fn constant_velocity_is_translation() {
        let (h, w) = (16, 20);
        let d = 1.7;
        let v = Tensor::from_fn(&[2, h, w], |i| if i < h * w { d } else { 0.0 });
        let def = integrate_svf(&VelocityField::new(v, 5.0).unwrap(), 6).unwrap();
        let u = def.displacement();
        for p in 0..h * w {
            assert!((u.data()[p] - d).abs() < 1e-6);
            assert!(u.data()[h * w + p].abs() < 1e-12);
        }
    }

    #[test]
    fn identity_warp_is_exact_and_integer_shift_moves_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::from_fn(&[3, 10, 12], |_| rng.gen_range(0.0..1.0));
        assert_eq!(warp(&img, &DeformationField::identity(10, 12)).unwrap(), img);
        let shift = Tensor::from_fn(&[2, 10, 12], |i| if i < 120 { 0.0 } else { -3.0 });
        let out = warp(&img, &DeformationField::from_displacement(&shift).unwrap()).unwrap();
        for c in 0..3 {
            for y in 3..10 {
                for x in 0..12 {
                    let got = out.data()[(c * 10 + y) * 12 + x];
                    assert_eq!(got, img.data()[(c * 10 + y - 3) * 12 + x]);
                }
            }
        }
        assert!(warp(&Tensor::ones(&[9, 12]), &DeformationField::identity(10, 12)).is_err());
    }

    #[test]
    fn warp_keeps_simplex_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (h, w) = (12, 12);
        let raw = Tensor::from_fn(&[3, h, w], |_| rng.gen_range(0.01..1.0));
        let mut p = raw.clone();
        for px in 0..h * w {
            let z: f64 = (0..3).map(|c| raw.data()[c * h * w + px]).sum();
            for c in 0..3 {
                p.data_mut()[c * h * w + px] /= z;
            }
        }
        let v = random_velocity(&mut rng, h, w, 1.5, 2.0).unwrap();
        let def = integrate_svf(&VelocityField::new(v, 2.0).unwrap(), 6).unwrap();
        let out = warp(&p, &def).unwrap();
        for px in 0..h * w {
            let s: f64 = (0..3).map(|c| out.data()[c * h * w + px]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_bounds_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = random_velocity(&mut rng, 16, 16, 1.0, 10.0).unwrap();
        let cfg = MorphConfig { beta: 1.25, ..MorphConfig::default() };
        let p = project_velocity(&v, &cfg).unwrap();
        assert!(p.max_magnitude() <= 1.25 && p.max_magnitude() > 1.25 * (1.0 - 1e-12));
        let small = project_velocity(&v.scale(1e-3).unwrap(), &cfg).unwrap();
        assert!(small.max_magnitude() <= 1.25 && small.max_magnitude() > 1.25 * (1.0 - 1e-12));
        let zero = project_velocity(&v, &MorphConfig { beta: 0.0, ..cfg }).unwrap();
        assert!(zero.v().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn label_warp_identity_round_trip() {
        let mask = LabelMask::new(4, 5, (0..20).map(|i| (i % 3) as u8).collect()).unwrap();
        let out = warp_labels(&mask, &DeformationField::identity(4, 5), 3).unwrap();
        assert_eq!(out, mask);
    }

    proptest::proptest! {
        #[test]
        fn projected_velocity_respects_beta(seed in 0u64..1000, scale in 1e-6f64..1e3, beta in 0.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = random_velocity(&mut rng, 12, 12, 1.0, scale).unwrap();
            let p = project_velocity(&v, &MorphConfig { beta, ..MorphConfig::default() }).unwrap();
            proptest::prop_assert!(p.max_magnitude() <= beta);
        }
    }
}
