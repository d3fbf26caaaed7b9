//! Stationary velocity fields integrated by scaling and squaring: a smooth,
//! invertible warp whose inverse comes from the negated field.
//!
//! cargo run --release --example diffeomorphic_warp [-- OUT_DIR]

use advfield::data::{self, write_pgm, SynthConfig};
use advfield::transforms::svf::{
    compose, integrate_svf, mean_interior_magnitude, random_velocity, realize_deformation, warp, warp_labels,
    MorphConfig, VelocityField,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("advfield-morph"), Into::into);
    std::fs::create_dir_all(&out)?;
    let sample = data::generate(&SynthConfig::default(), 1)?.remove(0);
    let (h, w) = sample.extent();
    let cfg = MorphConfig::default();

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let v = VelocityField::new(random_velocity(&mut rng, h, w, 4.0, 2.0)?, 2.0)?;
    println!("velocity max magnitude {:.3} px (beta {})", v.max_magnitude(), v.beta());

    let forward = integrate_svf(&v, cfg.steps)?;
    let backward = integrate_svf(&VelocityField::new(v.v().scale(-1.0)?, v.beta())?, cfg.steps)?;
    let round_trip = compose(&forward, &backward)?.displacement();
    println!("forward o inverse: mean interior residual {:.4} px", mean_interior_magnitude(&round_trip, 4)?);
    for steps in [2, 4, 6, 8] {
        let a = integrate_svf(&v, steps)?.displacement();
        let b = integrate_svf(&v, steps + 1)?.displacement();
        println!("squarings {steps} -> {}: mean change {:.5} px", steps + 1, mean_interior_magnitude(&a.sub(&b)?, 4)?);
    }

    let def = realize_deformation(&v, &cfg)?;
    let moved = warp(&sample.image, &def)?;
    let mask = warp_labels(sample.mask.as_ref().expect("labelled"), &def, 2)?;
    write_pgm(&sample.image, out.join("image.pgm"))?;
    write_pgm(&moved, out.join("warped.pgm"))?;
    write_pgm(&mask.to_tensor(), out.join("warped_mask.pgm"))?;
    println!("previews in {}", out.display());
    Ok(())
}
