//! Generate a synthetic annulus dataset, split it and write it to disk with
//! PGM previews.
//!
//! cargo run --release --example synth_dataset [-- OUT_DIR]

use advfield::data::{self, SynthConfig};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("advfield-synth"), Into::into);
    let cfg = SynthConfig { seed: 7, ..SynthConfig::default() };
    let samples = data::generate(&cfg, 24)?;
    let splits = data::split(&samples, [0.5, 0.1, 0.25, 0.15], 1)?;
    println!(
        "train {} / val {} / test {} / unlabelled {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        splits.unlabelled.len()
    );
    for s in samples.iter().take(4) {
        let m = s.mask.as_ref().expect("generated samples are labelled");
        let fg = m.count(1) as f64 / (m.height() * m.width()) as f64;
        println!("{}: foreground fraction {fg:.3}, image range [{:.2}, {:.2}]", s.id, min(s.image.data()), max(s.image.data()));
    }
    data::save(&samples, &out, Some(&cfg))?;
    let back = data::load(&out)?;
    assert_eq!(back, samples);
    println!("wrote and reloaded {} samples under {}", back.len(), out.display());
    Ok(())
}

fn min(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}
