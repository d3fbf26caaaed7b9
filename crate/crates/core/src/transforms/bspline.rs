use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default control-grid side.
pub const DEFAULT_GRID: usize = 4;

/// `k x k` log-domain control values of a bias field together with the
/// bound `alpha` on `max |phi - 1|` of the field they induce.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlGrid {
    values: Tensor,
    alpha: f64,
}

impl ControlGrid {
    pub fn new(values: Tensor, alpha: f64) -> Result<Self> {
        let k = match values.shape() {
            &[a, b] if a == b => a,
            s => return Err(Error::shape(format!("control grid must be k x k, got {s:?}"))),
        };
        if k < 2 {
            return Err(Error::invalid(format!("control grid side must be >= 2, got {k}")));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        Ok(Self { values, alpha })
    }

    pub fn zeros(k: usize, alpha: f64) -> Result<Self> {
        Self::new(Tensor::zeros(&[k, k]), alpha)
    }

    pub fn side(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }
}

/// Uniform cubic B-spline basis function, support `(-2, 2)`.
pub fn cubic_bspline(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        (4.0 - 6.0 * a * a + 3.0 * a * a * a) / 6.0
    } else if a < 2.0 {
        let b = 2.0 - a;
        b * b * b / 6.0
    } else {
        0.0
    }
}

/// `n x k` interpolation matrix taking `k` control values that span
/// `[0, n-1]` uniformly (end points included) to `n` samples.
///
/// The control sequence is extended by replicating its end values, so the
/// rows sum to one everywhere and a constant grid maps to a constant field.
pub fn bspline_matrix(k: usize, n: usize) -> Result<Tensor> {
    if k < 2 || n < k {
        return Err(Error::invalid(format!(
            "cannot interpolate {k} control points onto {n} samples"
        )));
    }
    let spacing = (n - 1) as f64 / (k - 1) as f64;
    let mut m = Tensor::zeros(&[n, k]);
    for y in 0..n {
        let u = y as f64 / spacing;
        let lo = u.floor() as isize - 2;
        for i in lo..=lo + 4 {
            let wgt = cubic_bspline(u - i as f64);
            if wgt != 0.0 {
                let col = i.clamp(0, k as isize - 1) as usize;
                m.data_mut()[y * k + col] += wgt;
            }
        }
    }
    Ok(m)
}

/// Dense `H x W` log-domain field interpolated from the control grid.
pub fn bspline_upsample(grid: &ControlGrid, h: usize, w: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let g = tape.leaf(grid.values().clone());
    let f = upsample_on(&mut tape, g, h, w)?;
    Ok(tape.value(f).clone())
}

/// Recorded form of [`bspline_upsample`]; `grid` is a `k x k` node.
pub fn upsample_on(tape: &mut Tape, grid: Var, h: usize, w: usize) -> Result<Var> {
    let k = match tape.value(grid).shape() {
        &[a, b] if a == b => a,
        s => return Err(Error::shape(format!("control grid must be k x k, got {s:?}"))),
    };
    if h < k || w < k {
        return Err(Error::invalid(format!("image {h}x{w} smaller than {k}x{k} control grid")));
    }
    let rows = bspline_matrix(k, h)?;
    let cols = bspline_matrix(k, w)?;
    tape.separable(grid, &rows, &cols)
}
