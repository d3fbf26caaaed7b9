//! Per-sample Dice on clean, randomly perturbed and adversarially perturbed
//! test images, with aggregates and a config fingerprint.
//!
//! cargo run --release --example robustness_report [-- OUT_DIR]

use advfield::adversary::AttackConfig;
use advfield::data::{self, SynthConfig};
use advfield::eval::{dump_bias_examples, evaluate_robustness, EvalAttack, EvalConfig};
use advfield::segnet::{SegNet, SegNetConfig};
use advfield::trainer::{train, TrainConfig, TrainData, TrainState};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("advfield-eval"), Into::into);
    let samples = data::generate(&SynthConfig { seed: 3, ..SynthConfig::for_extent(32, 32) }, 30)?;
    let splits = data::split(&samples, [0.6, 0.1, 0.3, 0.0], 0)?;
    let net = SegNet::new(SegNetConfig { height: 32, width: 32, widths: vec![4, 8, 16], depth: 2, convs: 1, ..Default::default() })?;
    let mut state = TrainState::new(net, 0);
    let cfg = TrainConfig { pretrain_iters: 300, finetune_iters: 0, ..TrainConfig::desk() };
    train(&cfg, &mut state, TrainData { labelled: &splits.train, unlabelled: &[], val: &splits.val }, None)?;

    let ecfg = EvalConfig { attacks: vec![EvalAttack::Bias, EvalAttack::Morph], trials: 2, attack: AttackConfig::default(), seed: 0 };
    let report = evaluate_robustness(&state.net, &splits.test, &ecfg)?;
    print!("{}", report.summary());
    report.write(&out)?;
    dump_bias_examples(&state.net, &splits.test, &ecfg.attack, out.join("preview"), 2)?;
    println!("report.csv, summary.txt and previews in {}", out.display());
    Ok(())
}
