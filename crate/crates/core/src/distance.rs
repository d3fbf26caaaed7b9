//! Consistency distances between two class-probability maps.
//!
//! All functions take `C x H x W` maps whose channel vectors lie on the
//! probability simplex. The `*_on` variants record onto a [`Tape`] and are
//! what attacks and training losses use; the plain versions evaluate
//! directly.

use crate::autodiff::{Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stabilizer inside the KL logarithms.
pub const KL_EPS: f64 = 1e-8;

pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

fn check_pair(tape: &Tape, p: Var, phat: Var) -> Result<(usize, usize, usize)> {
    let (a, b) = (tape.value(p), tape.value(phat));
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    match *a.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(format!("probability maps must be CxHxW, got {s:?}"))),
    }
}

/// Pixel-mean of `Σ_c p log((p + ε) / (p̂ + ε))`.
pub fn kl_on(tape: &mut Tape, p: Var, phat: Var) -> Result<Var> {
    let (c, _, _) = check_pair(tape, p, phat)?;
    let lp = tape.shift(p, KL_EPS)?;
    let lp = tape.log(lp)?;
    let lq = tape.shift(phat, KL_EPS)?;
    let lq = tape.log(lq)?;
    let d = tape.sub(lp, lq)?;
    let t = tape.mul(p, d)?;
    // mean over all C*H*W entries times C is the pixel mean of the channel sum
    let m = tape.mean(t)?;
    tape.scale(m, c as f64)
}

/// `Σ_{m ∈ foreground} Σ_{S ∈ {Sobel_x, Sobel_y}} ‖S(p_m) - S(p̂_m)‖₂` with
/// zero padding.
pub fn contour_on(tape: &mut Tape, p: Var, phat: Var, foreground: &[usize]) -> Result<Var> {
    let (c, _, _) = check_pair(tape, p, phat)?;
    if foreground.is_empty() {
        return Err(Error::invalid("contour distance needs at least one foreground channel"));
    }
    if let Some(&bad) = foreground.iter().find(|&&m| m >= c) {
        return Err(Error::invalid(format!("foreground channel {bad} out of range for {c}")));
    }
    let diff = tape.sub(p, phat)?;
    let kernels = [
        tape.leaf(Tensor::from_parts(vec![3, 3], SOBEL_X.to_vec())),
        tape.leaf(Tensor::from_parts(vec![3, 3], SOBEL_Y.to_vec())),
    ];
    let mut total: Option<Var> = None;
    for &m in foreground {
        // Sobel is linear, so S(p) - S(p̂) = S(p - p̂).
        let ch = tape.channel(diff, m)?;
        for &k in &kernels {
            let edge = tape.conv2d(ch, k, None, Padding::Zero)?;
            let n = tape.norm2(edge)?;
            total = Some(match total {
                Some(t) => tape.add(t, n)?,
                None => n,
            });
        }
    }
    Ok(total.expect("foreground is non-empty"))
}

/// `kl + w * contour`. With `w = 0` this is exactly [`kl_on`].
pub fn composite_on(tape: &mut Tape, p: Var, phat: Var, w: f64, foreground: &[usize]) -> Result<Var> {
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::invalid(format!("contour weight must be >= 0, got {w}")));
    }
    let kl = kl_on(tape, p, phat)?;
    if w == 0.0 {
        return Ok(kl);
    }
    let ct = contour_on(tape, p, phat, foreground)?;
    let ct = tape.scale(ct, w)?;
    tape.add(kl, ct)
}

fn eval(p: &Tensor, phat: &Tensor, f: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.leaf(p.clone());
    let b = tape.leaf(phat.clone());
    let out = f(&mut tape, a, b)?;
    tape.scalar_value(out)
}

pub fn kl(p: &Tensor, phat: &Tensor) -> Result<f64> {
    eval(p, phat, kl_on)
}

pub fn contour(p: &Tensor, phat: &Tensor, foreground: &[usize]) -> Result<f64> {
    eval(p, phat, |t, a, b| contour_on(t, a, b, foreground))
}

pub fn composite(p: &Tensor, phat: &Tensor, w: f64, foreground: &[usize]) -> Result<f64> {
    eval(p, phat, |t, a, b| composite_on(t, a, b, w, foreground))
}

/// Channels `1..classes`: every class except background.
pub fn foreground_channels(classes: usize) -> Vec<usize> {
    (1..classes).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_grad, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pixel(a: f64, b: f64) -> Tensor {
        Tensor::new(vec![2, 1, 1], vec![a, b]).unwrap()
    }

    fn random_softmax(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        let logits: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        for px in 0..hw {
            let z: f64 = (0..c).map(|k| logits[k * hw + px].exp()).sum();
            for k in 0..c {
                out[k * hw + px] = logits[k * hw + px].exp() / z;
            }
        }
        Tensor::new(vec![c, h, w], out).unwrap()
    }

    #[test]
    fn kl_examples() {
        let p = pixel(0.5, 0.5);
        let q = pixel(0.9, 0.1);
        assert_eq!(kl(&p, &p).unwrap(), 0.0);
        // Direct summation oracle.
        let direct = |a: [f64; 2], b: [f64; 2]| -> f64 {
            (0..2).map(|i| a[i] * ((a[i] + KL_EPS) / (b[i] + KL_EPS)).ln()).sum()
        };
        let forward = kl(&p, &q).unwrap();
        let reverse = kl(&q, &p).unwrap();
        assert!((forward - direct([0.5, 0.5], [0.9, 0.1])).abs() < 1e-12);
        assert!((forward - 0.5108).abs() < 1e-3);
        assert!((reverse - 0.3681).abs() < 1e-3);
        assert!((forward - reverse).abs() > 0.1);
        assert!(kl(&p, &Tensor::ones(&[2, 1, 2])).is_err());
    }

    #[test]
    fn contour_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_softmax(&mut rng, 2, 6, 6);
        assert_eq!(contour(&p, &p, &[1]).unwrap(), 0.0);
        // Constant maps differ only at the zero-padded frame.
        let c1 = Tensor::from_fn(&[2, 6, 6], |i| if i < 36 { 0.3 } else { 0.7 });
        let c2 = Tensor::from_fn(&[2, 6, 6], |i| if i < 36 { 0.6 } else { 0.4 });
        assert!(contour(&c1, &c2, &[1]).unwrap() > 0.0);
        assert!(contour(&p, &p, &[]).is_err());
    }

    #[test]
    fn contour_of_vertical_edge_matches_direct_convolution() {
        let (h, w) = (5, 6);
        let edge = |x: usize| if x < 3 { 1.0 } else { 0.0 };
        let p = Tensor::from_fn(&[2, h, w], |i| {
            let x = i % w;
            if i < h * w { 1.0 - edge(x) } else { edge(x) }
        });
        let uniform = Tensor::full(&[2, h, w], 0.5);
        // Oracle: direct zero-padded convolution of the difference map.
        let d: Vec<f64> = (0..h * w).map(|i| edge(i % w) - 0.5).collect();
        let norm = |k: &[f64; 9]| -> f64 {
            let mut s = 0.0;
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut v = 0.0;
                    for ky in -1..=1isize {
                        for kx in -1..=1isize {
                            let (yy, xx) = (y + ky, x + kx);
                            if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                v += k[((ky + 1) * 3 + kx + 1) as usize] * d[(yy * w as isize + xx) as usize];
                            }
                        }
                    }
                    s += v * v;
                }
            }
            s.sqrt()
        };
        let want = norm(&SOBEL_X) + norm(&SOBEL_Y);
        assert!((contour(&p, &uniform, &[1]).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn constant_plane_has_zero_interior_response() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[7, 7], 0.4));
        let k = tape.leaf(Tensor::from_parts(vec![3, 3], SOBEL_X.to_vec()));
        let e = tape.conv2d(x, k, None, Padding::Zero).unwrap();
        for y in 1..6 {
            for xx in 1..6 {
                assert_eq!(tape.value(e).data()[y * 7 + xx], 0.0);
            }
        }
    }

    #[test]
    fn composite_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_softmax(&mut rng, 3, 5, 5);
        let q = random_softmax(&mut rng, 3, 5, 5);
        let fg = [1, 2];
        assert_eq!(composite(&p, &q, 0.0, &fg).unwrap(), kl(&p, &q).unwrap());
        assert_eq!(composite(&p, &p, 0.5, &fg).unwrap(), 0.0);
        let want = kl(&p, &q).unwrap() + 0.5 * contour(&p, &q, &fg).unwrap();
        assert!((composite(&p, &q, 0.5, &fg).unwrap() - want).abs() < 1e-12);
        assert!(composite(&p, &q, -1.0, &fg).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_softmax(&mut rng, 3, 6, 5);
            let q = random_softmax(&mut rng, 3, 6, 5);
            for which in 0..3 {
                let f = |x: &Tensor| -> Result<f64> {
                    match which {
                        0 => kl(&p, x),
                        1 => contour(&p, x, &[1, 2]),
                        _ => composite(&p, x, 0.5, &[1, 2]),
                    }
                };
                let mut tape = Tape::new();
                let a = tape.leaf(p.clone());
                let b = tape.leaf(q.clone());
                let out = match which {
                    0 => kl_on(&mut tape, a, b),
                    1 => contour_on(&mut tape, a, b, &[1, 2]),
                    _ => composite_on(&mut tape, a, b, 0.5, &[1, 2]),
                }
                .unwrap();
                let g = tape.backward(out, &[b]).unwrap();
                let fd = finite_diff_grad(f, &q, 1e-5).unwrap();
                let err = max_relative_error(g.get(b).unwrap(), &fd);
                assert!(err < 1e-4, "distance {which} seed {seed}: {err}");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn kl_is_nonnegative_and_zero_on_identity(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_softmax(&mut rng, 3, 4, 4);
            let q = random_softmax(&mut rng, 3, 4, 4);
            proptest::prop_assert_eq!(kl(&p, &p).unwrap(), 0.0);
            proptest::prop_assert!(kl(&p, &q).unwrap() >= -1e-12);
        }

        #[test]
        fn contour_is_symmetric(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_softmax(&mut rng, 2, 5, 5);
            let q = random_softmax(&mut rng, 2, 5, 5);
            let a = contour(&p, &q, &[1]).unwrap();
            let b = contour(&q, &p, &[1]).unwrap();
            proptest::prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn composite_is_monotone_in_weight(seed in 0u64..10_000, w1 in 0.0f64..2.0, dw in 0.01f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_softmax(&mut rng, 2, 5, 5);
            let q = random_softmax(&mut rng, 2, 5, 5);
            let lo = composite(&p, &q, w1, &[1]).unwrap();
            let hi = composite(&p, &q, w1 + dw, &[1]).unwrap();
            proptest::prop_assert!(hi > lo);
        }
    }
}
