use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Normalized 1D Gaussian taps, truncated at radius `ceil(4 sigma)`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / z).collect()
}

/// `n x n` matrix of the 1D Gaussian filter with replicate boundary.
pub fn gaussian_matrix(n: usize, sigma: f64) -> Tensor {
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let mut m = Tensor::zeros(&[n, n]);
    for y in 0..n as isize {
        for (j, t) in taps.iter().enumerate() {
            let src = (y + j as isize - r).clamp(0, n as isize - 1) as usize;
            m.data_mut()[y as usize * n + src] += t;
        }
    }
    m
}

/// Separable Gaussian smoothing of every `HxW` plane; `sigma = 0` is the
/// identity.
pub fn gaussian_smooth(field: &Tensor, sigma: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.leaf(field.clone());
    let out = smooth_on(&mut tape, f, sigma)?;
    Ok(tape.value(out).clone())
}

pub fn smooth_on(tape: &mut Tape, field: Var, sigma: f64) -> Result<Var> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(field);
    }
    let (h, w) = tape.value(field).spatial()?;
    let rows = gaussian_matrix(h, sigma);
    let cols = gaussian_matrix(w, sigma);
    tape.separable(field, &rows, &cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_identity() {
        let f = Tensor::from_fn(&[5, 7], |i| (i as f64).sin());
        assert_eq!(gaussian_smooth(&f, 0.0).unwrap(), f);
    }

    #[test]
    fn constants_are_preserved() {
        let f = Tensor::full(&[2, 9, 11], 0.37);
        for sigma in [0.5, 1.0, 2.5, 6.0] {
            let s = gaussian_smooth(&f, sigma).unwrap();
            assert!(s.data().iter().all(|v| (v - 0.37).abs() < 1e-14));
        }
    }

    #[test]
    fn impulse_matches_dense_convolution() {
        let n = 21;
        let mut f = Tensor::zeros(&[n, n]);
        f.data_mut()[10 * n + 10] = 1.0;
        let s = gaussian_smooth(&f, 1.0).unwrap();
        // Dense 2D oracle: directly evaluated, normalized 2D Gaussian kernel.
        let r = 4i64;
        let z: f64 = (-r..=r)
            .flat_map(|a| (-r..=r).map(move |b| (a, b)))
            .map(|(a, b)| (-((a * a + b * b) as f64) / 2.0).exp())
            .sum();
        for dy in -r..=r {
            for dx in -r..=r {
                let want = (-((dy * dy + dx * dx) as f64) / 2.0).exp() / z;
                let got = s.data()[((10 + dy) as usize) * n + (10 + dx) as usize];
                assert!((got - want).abs() < 1e-15);
            }
        }
        let center = s.data()[10 * n + 10];
        assert!((center - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-3);
        assert!(gaussian_smooth(&f, -1.0).is_err());
    }
}
