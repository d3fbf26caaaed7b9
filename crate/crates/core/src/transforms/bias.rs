//! Multiplicative bias fields built from log-domain control grids.

use rand::Rng;

use super::bspline::{upsample_on, ControlGrid};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Strictly positive multiplicative field.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasField {
    phi: Tensor,
}

impl BiasField {
    pub fn new(phi: Tensor) -> Result<Self> {
        phi.spatial()?;
        if phi.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("bias field must be strictly positive"));
        }
        Ok(Self { phi })
    }

    pub fn identity(h: usize, w: usize) -> Self {
        Self { phi: Tensor::ones(&[h, w]) }
    }

    pub fn phi(&self) -> &Tensor {
        &self.phi
    }

    pub fn into_phi(self) -> Tensor {
        self.phi
    }

    /// `max |phi - 1|`.
    pub fn max_deviation(&self) -> f64 {
        max_deviation(&self.phi)
    }
}

pub(crate) fn max_deviation(phi: &Tensor) -> f64 {
    phi.data().iter().fold(0.0, |m, v| m.max((v - 1.0).abs()))
}

/// Rescales deviations from one so that `max |phi - 1| <= alpha`.
///
/// Fields already inside the bound are returned unchanged, which makes the
/// projection idempotent. Values that round past the bound are pulled in by
/// single ulps so the bound holds exactly in floating point.
pub fn project_bias(phi: &Tensor, alpha: f64) -> Tensor {
    let m = max_deviation(phi);
    if m <= alpha {
        return phi.clone();
    }
    let s = alpha / m;
    let data = phi
        .data()
        .iter()
        .map(|&v| {
            let mut p = 1.0 + (v - 1.0) * s;
            while (p - 1.0).abs() > alpha {
                p = if p > 1.0 { next_down(p) } else { next_up(p) };
            }
            p
        })
        .collect();
    Tensor::from_parts(phi.shape().to_vec(), data)
}

fn next_up(x: f64) -> f64 {
    f64::from_bits(x.to_bits() + 1)
}

fn next_down(x: f64) -> f64 {
    f64::from_bits(x.to_bits() - 1)
}

/// `phi = exp(upsample(c))`, projected onto `max |phi - 1| <= alpha`.
pub fn realize_bias(grid: &ControlGrid, h: usize, w: usize) -> Result<BiasField> {
    let mut tape = Tape::new();
    let g = tape.leaf(grid.values().clone());
    let log_field = upsample_on(&mut tape, g, h, w)?;
    let phi = tape.exp(log_field)?;
    Ok(BiasField { phi: project_bias(tape.value(phi), grid.alpha()) })
}

/// Recorded bias field for gradient computation with respect to the
/// control grid.
///
/// The projection's rescale factor is held constant, so gradients pass
/// through the projection unchanged up to that factor.
pub fn bias_on(tape: &mut Tape, grid: Var, alpha: f64, h: usize, w: usize) -> Result<Var> {
    let log_field = upsample_on(tape, grid, h, w)?;
    let phi = tape.exp(log_field)?;
    let m = max_deviation(tape.value(phi));
    if m <= alpha {
        return Ok(phi);
    }
    let dev = tape.shift(phi, -1.0)?;
    let dev = tape.scale(dev, alpha / m)?;
    tape.shift(dev, 1.0)
}

/// Pixelwise `image * phi`.
pub fn apply_bias(image: &Tensor, field: &BiasField) -> Result<Tensor> {
    image.mul(field.phi())
}

/// Control values drawn uniformly from `[-ln(1+alpha), ln(1+alpha)]`.
pub fn random_grid<R: Rng + ?Sized>(rng: &mut R, alpha: f64, k: usize) -> Result<ControlGrid> {
    let a = (1.0 + alpha).ln();
    let values = Tensor::from_fn(&[k, k], |_| rng.gen_range(-a..=a));
    ControlGrid::new(values, alpha)
}

pub fn random_bias<R: Rng + ?Sized>(
    rng: &mut R,
    alpha: f64,
    k: usize,
    h: usize,
    w: usize,
) -> Result<BiasField> {
    realize_bias(&random_grid(rng, alpha, k)?, h, w)
}
