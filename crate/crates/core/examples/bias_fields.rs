//! Smooth multiplicative bias fields from a 4x4 B-spline control grid, the
//! feasibility projection, and their effect on an image.
//!
//! cargo run --release --example bias_fields [-- OUT_DIR]

use advfield::data::{self, write_pgm, SynthConfig};
use advfield::transforms::bias::{apply_bias, random_bias, realize_bias};
use advfield::transforms::bspline::ControlGrid;
use advfield::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("advfield-bias"), Into::into);
    std::fs::create_dir_all(&out)?;
    let (alpha, k) = (0.3, 4);
    let image = data::generate(&SynthConfig::default(), 1)?.remove(0).image;
    let (h, w) = image.spatial()?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let field = random_bias(&mut rng, alpha, k, h, w)?;
        worst = worst.max(field.max_deviation());
        if i < 3 {
            let biased = apply_bias(&image, &field)?;
            write_pgm(&field.phi().map(|v| (v - 1.0 + alpha) / (2.0 * alpha))?, out.join(format!("field_{i}.pgm")))?;
            write_pgm(&biased, out.join(format!("biased_{i}.pgm")))?;
        }
    }
    println!("200 random fields: max |phi - 1| = {worst:.6} (bound {alpha})");

    // Control values far outside the bound are pulled back onto it.
    let wild = ControlGrid::new(Tensor::from_fn(&[k, k], |i| if i % (k + 1) == 0 { 2.0 } else { -1.0 }), alpha)?;
    let field = realize_bias(&wild, h, w)?;
    println!("extreme grid: max |phi - 1| = {:.6}, min phi = {:.4}", field.max_deviation(), min(field.phi().data()));
    write_pgm(&image, out.join("image.pgm"))?;
    println!("previews in {}", out.display());
    Ok(())
}

fn min(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}
