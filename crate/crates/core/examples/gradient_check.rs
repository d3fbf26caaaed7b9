//! Reverse-mode gradients on the tape against central finite differences:
//! the distance between clean and biased predictions as a function of the
//! bias control grid, and the cross-entropy as a function of the net's
//! parameters.

use advfield::autodiff::{finite_diff_grad, max_relative_error, Tape, Var};
use advfield::distance::{composite_on, foreground_channels};
use advfield::segnet::{cross_entropy_on, SegNet, SegNetConfig};
use advfield::transforms::bias::bias_on;
use advfield::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut net = SegNet::new(SegNetConfig { height: 8, width: 8, widths: vec![2, 3], depth: 1, convs: 1, ..Default::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Nonzero biases keep ReLU inputs away from the kink at 0.
    let params = net
        .params()
        .iter()
        .map(|p| if p.shape().len() == 1 { Tensor::from_fn(p.shape(), |_| rng.gen_range(-0.1..0.1)) } else { p.clone() })
        .collect();
    net.set_params(params)?;
    let image = Tensor::from_fn(&[8, 8], |_| rng.gen_range(0.2..0.9));
    let clean = net.predict(&image)?;
    let fg = foreground_channels(2);

    let distance = |tape: &mut Tape, grid: Var| -> Result<Var> {
        let phi = bias_on(tape, grid, 0.3, 8, 8)?;
        let x = tape.leaf(image.clone());
        let biased = tape.mul(x, phi)?;
        let params = net.bind(tape);
        let phat = net.forward_on(tape, &params, biased)?;
        let p = tape.leaf(clean.clone());
        composite_on(tape, p, phat, 0.5, &fg)
    };
    let grid = Tensor::from_fn(&[4, 4], |_| rng.gen_range(-0.1..0.1));
    let mut tape = Tape::new();
    let c = tape.leaf(grid.clone());
    let d = distance(&mut tape, c)?;
    let analytic = tape.backward(d, &[c])?.take(c).expect("requested");
    let numeric = finite_diff_grad(
        |g| {
            let mut t = Tape::new();
            let c = t.leaf(g.clone());
            let d = distance(&mut t, c)?;
            t.scalar_value(d)
        },
        &grid,
        1e-5,
    )?;
    println!("distance wrt control grid: max relative error {:.2e}", max_relative_error(&analytic, &numeric));

    let labels: Vec<usize> = image.data().iter().map(|&v| usize::from(v > 0.5)).collect();
    let ce = |net: &SegNet, tape: &mut Tape, params: &[Var]| -> Result<Var> {
        let x = tape.leaf(image.clone());
        let p = net.forward_on(tape, params, x)?;
        cross_entropy_on(tape, p, &labels)
    };
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape);
    let loss = ce(&net, &mut tape, &vars)?;
    let mut grads = tape.backward(loss, &vars)?;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.take(v).expect("requested");
        let numeric = finite_diff_grad(
            |x| {
                let mut probe = net.clone();
                let mut ps = net.params().to_vec();
                ps[i] = x.clone();
                probe.set_params(ps)?;
                let mut t = Tape::new();
                let vars = probe.bind(&mut t);
                let l = ce(&probe, &mut t, &vars)?;
                t.scalar_value(l)
            },
            &net.params()[i],
            1e-5,
        )?;
        println!("cross-entropy wrt parameter {i} {:?}: max relative error {:.2e}", net.params()[i].shape(), max_relative_error(&analytic, &numeric));
    }
    Ok(())
}
