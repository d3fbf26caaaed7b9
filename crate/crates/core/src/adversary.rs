//! Label-free adversarial perturbations found by projected gradient ascent.
//!
//! Every attack takes a network and an image and nothing else: the target is
//! the network's own clean prediction, held constant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::distance::{composite_on, foreground_channels, kl_on};
use crate::error::{Error, Result};
use crate::segnet::SegNet;
use crate::tensor::Tensor;
use crate::transforms::bias::{bias_on, realize_bias, BiasField};
use crate::transforms::bspline::{ControlGrid, DEFAULT_GRID};
use crate::transforms::svf::{
    deformation_on, max_magnitude, project_velocity, random_velocity, realize_deformation, warp, warp_on,
    DeformationField, MorphConfig, VelocityField,
};

/// Half-width of the uniform control-point initialization (log domain).
pub const INIT_SPREAD: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    /// PGD iterations.
    pub iterations: usize,
    /// Step length of each normalized ascent step.
    pub xi: f64,
    /// Bias bound: `max |phi - 1| <= alpha`.
    pub alpha: f64,
    /// VAT noise norm.
    pub epsilon: f64,
    /// Contour weight inside the composite distance.
    pub w: f64,
    /// Control grid side.
    pub grid: usize,
    /// Velocity regularization and bound (`morph.beta`).
    pub morph: MorphConfig,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            iterations: 1,
            xi: 1.0,
            alpha: 0.3,
            epsilon: 1.0,
            w: 0.5,
            grid: DEFAULT_GRID,
            morph: MorphConfig::default(),
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return bad("attack.iterations must be >= 1".into());
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return bad(format!("attack.xi must be > 0, got {}", self.xi));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("attack.alpha must be in (0, 1), got {}", self.alpha));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("attack.epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return bad(format!("attack.w must be >= 0, got {}", self.w));
        }
        if self.grid < 2 {
            return bad(format!("attack.grid must be >= 2, got {}", self.grid));
        }
        let m = &self.morph;
        if !(m.beta >= 0.0 && m.beta.is_finite()) || m.steps == 0 || m.sigma_velocity < 0.0 || m.sigma_displacement < 0.0 {
            return bad(format!("invalid morph settings {m:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BiasAttack {
    pub grid: ControlGrid,
    pub field: BiasField,
    pub image: Tensor,
    /// Composite distance between clean and attacked predictions.
    pub distance: f64,
    /// The ascent direction vanished; `grid` is the random initialization.
    pub zero_gradient: bool,
}

#[derive(Clone, Debug)]
pub struct MorphAttack {
    pub velocity: VelocityField,
    pub deformation: DeformationField,
    pub image: Tensor,
    /// Equivariance gap: distance between the warped clean prediction and
    /// the prediction on the warped image.
    pub objective: f64,
    pub zero_gradient: bool,
}

#[derive(Clone, Debug)]
pub struct VatAttack {
    pub noise: Tensor,
    pub zero_gradient: bool,
}

fn attack_rng(cfg: &AttackConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed)
}

/// `x + xi * g / n`, or `None` when the norm `n` of `g` is zero.
fn ascend(x: &Tensor, g: &Tensor, xi: f64, n: f64) -> Option<Tensor> {
    (n > 0.0).then(|| x.zip_map(g, |a, b| a + xi * b / n).expect("same shape"))
}

/// Records `D(p, f(image'))` where `perturb` maps the image leaf to
/// `image'` and optionally to a replacement for the clean target `p`.
fn distance_through<F>(
    net: &SegNet,
    tape: &mut Tape,
    clean: &Tensor,
    image: &Tensor,
    w: f64,
    perturb: F,
) -> Result<Var>
where
    F: FnOnce(&mut Tape, Var) -> Result<(Var, Option<Var>)>,
{
    let params = net.bind(tape);
    let x = tape.leaf(image.clone());
    let (moved, target) = perturb(tape, x)?;
    let phat = net.forward_on(tape, &params, moved)?;
    let fg = foreground_channels(net.config().classes);
    let p = match target {
        Some(t) => t,
        None => tape.leaf(clean.clone()),
    };
    composite_on(tape, p, phat, w, &fg)
}

/// PGD over log-domain control points; returns the final grid and whether
/// the search stalled on a zero gradient.
pub(crate) fn bias_search<R: Rng + ?Sized>(
    net: &SegNet,
    image: &Tensor,
    clean: &Tensor,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<(ControlGrid, bool)> {
    let (h, w) = image.spatial()?;
    let k = cfg.grid;
    let mut c = Tensor::from_fn(&[k, k], |_| rng.gen_range(-INIT_SPREAD..=INIT_SPREAD));
    for _ in 0..cfg.iterations {
        let mut tape = Tape::new();
        let cv = tape.leaf(c.clone());
        let d = distance_through(net, &mut tape, clean, image, cfg.w, |t, x| {
            let phi = bias_on(t, cv, cfg.alpha, h, w)?;
            Ok((t.mul(x, phi)?, None))
        })?;
        let g = tape.backward(d, &[cv])?;
        let g = g.get(cv).expect("requested");
        match ascend(&c, g, cfg.xi, g.norm2()) {
            Some(next) => c = next,
            None => return Ok((ControlGrid::new(c, cfg.alpha)?, true)),
        }
    }
    Ok((ControlGrid::new(c, cfg.alpha)?, false))
}

/// PGD over the velocity field of the equivariance gap.
pub(crate) fn morph_search<R: Rng + ?Sized>(
    net: &SegNet,
    image: &Tensor,
    clean: &Tensor,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<(VelocityField, bool)> {
    let (h, w) = image.spatial()?;
    let m = &cfg.morph;
    let init = random_velocity(rng, h, w, m.sigma_velocity, INIT_SPREAD * m.beta)?;
    let mut v = project_velocity(&init, m)?;
    for _ in 0..cfg.iterations {
        let mut tape = Tape::new();
        let vv = tape.leaf(v.v().clone());
        let d = distance_through(net, &mut tape, clean, image, cfg.w, |t, x| {
            let coords = deformation_on(t, vv, m)?;
            let moved = warp_on(t, x, coords)?;
            let p = t.leaf(clean.clone());
            Ok((moved, Some(warp_on(t, p, coords)?)))
        })?;
        let g = tape.backward(d, &[vv])?;
        // Normalized by the fastest pixel: `xi` is a step in pixels.
        let g = g.get(vv).expect("requested");
        match ascend(v.v(), g, cfg.xi, max_magnitude(g)) {
            Some(next) => v = project_velocity(&next, m)?,
            None => return Ok((v, true)),
        }
    }
    Ok((v, false))
}

/// One gradient step from a random unit direction.
pub(crate) fn vat_search<R: Rng + ?Sized>(
    net: &SegNet,
    image: &Tensor,
    clean: &Tensor,
    epsilon: f64,
    rng: &mut R,
) -> Result<VatAttack> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!("VAT epsilon must be > 0, got {epsilon}")));
    }
    let raw = Tensor::from_fn(image.shape(), |_| rng.sample(StandardNormal));
    let r = raw.scale(1.0 / raw.norm2())?;
    let mut tape = Tape::new();
    let params = net.bind(&mut tape);
    let x = tape.leaf(image.clone());
    let rv = tape.leaf(r);
    let moved = tape.add(x, rv)?;
    let phat = net.forward_on(&mut tape, &params, moved)?;
    let p = tape.leaf(clean.clone());
    let d = kl_on(&mut tape, p, phat)?;
    let g = tape.backward(d, &[rv])?;
    let g = g.get(rv).expect("requested");
    let n = g.norm2();
    if n == 0.0 {
        return Ok(VatAttack { noise: Tensor::zeros(image.shape()), zero_gradient: true });
    }
    Ok(VatAttack { noise: g.scale(epsilon / n)?, zero_gradient: false })
}

pub fn attack_bias(net: &SegNet, image: &Tensor, cfg: &AttackConfig) -> Result<BiasAttack> {
    attack_bias_with(net, image, cfg, &mut attack_rng(cfg))
}

/// [`attack_bias`] drawing its initialization from `rng`.
pub fn attack_bias_with<R: Rng + ?Sized>(
    net: &SegNet,
    image: &Tensor,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<BiasAttack> {
    cfg.validate()?;
    let (h, w) = image.spatial()?;
    let clean = net.predict(image)?;
    let (grid, zero_gradient) = bias_search(net, image, &clean, cfg, rng)?;
    let field = realize_bias(&grid, h, w)?;
    let adv = image.mul(field.phi())?;
    let distance = bias_distance(net, image, &field, cfg.w)?;
    Ok(BiasAttack { grid, field, image: adv, distance, zero_gradient })
}

/// Composite distance between predictions on `image` and `image * phi`.
pub fn bias_distance(net: &SegNet, image: &Tensor, field: &BiasField, w: f64) -> Result<f64> {
    let clean = net.predict(image)?;
    let mut tape = Tape::new();
    let d = distance_through(net, &mut tape, &clean, image, w, |t, x| {
        let phi = t.leaf(field.phi().clone());
        Ok((t.mul(x, phi)?, None))
    })?;
    tape.scalar_value(d)
}

pub fn attack_morph(net: &SegNet, image: &Tensor, cfg: &AttackConfig) -> Result<MorphAttack> {
    attack_morph_with(net, image, cfg, &mut attack_rng(cfg))
}

pub fn attack_morph_with<R: Rng + ?Sized>(
    net: &SegNet,
    image: &Tensor,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<MorphAttack> {
    cfg.validate()?;
    let clean = net.predict(image)?;
    let (velocity, zero_gradient) = morph_search(net, image, &clean, cfg, rng)?;
    let deformation = realize_deformation(&velocity, &cfg.morph)?;
    let adv = warp(image, &deformation)?;
    let objective = equivariance_gap(net, image, &deformation, cfg.w)?;
    Ok(MorphAttack { velocity, deformation, image: adv, objective, zero_gradient })
}

/// `D_comp(warp(f(image)), f(warp(image)))`.
pub fn equivariance_gap(net: &SegNet, image: &Tensor, def: &DeformationField, w: f64) -> Result<f64> {
    let clean = net.predict(image)?;
    let mut tape = Tape::new();
    let d = distance_through(net, &mut tape, &clean, image, w, |t, x| {
        let coords = t.leaf(def.coords().clone());
        let moved = warp_on(t, x, coords)?;
        let p = t.leaf(clean.clone());
        Ok((moved, Some(warp_on(t, p, coords)?)))
    })?;
    tape.scalar_value(d)
}

pub fn attack_vat(net: &SegNet, image: &Tensor, epsilon: f64) -> Result<VatAttack> {
    attack_vat_with(net, image, epsilon, &mut ChaCha8Rng::seed_from_u64(0))
}

pub fn attack_vat_with<R: Rng + ?Sized>(
    net: &SegNet,
    image: &Tensor,
    epsilon: f64,
    rng: &mut R,
) -> Result<VatAttack> {
    let clean = net.predict(image)?;
    vat_search(net, image, &clean, epsilon, rng)
}

/// `KL(f(image) || f(image + noise))`.
pub fn noise_kl(net: &SegNet, image: &Tensor, noise: &Tensor) -> Result<f64> {
    let p = net.predict(image)?;
    let q = net.predict(&image.add(noise)?)?;
    crate::distance::kl(&p, &q)
}
