//! Ablation: no consistency vs random bias fields vs adversarial bias fields,
//! sharing one pretraining run per seed and scored under held-out random
//! bias corruption. Takes a few minutes on one core.
//!
//! cargo run --release --example ablation [-- OUT_DIR]

use advfield::adversary::AttackConfig;
use advfield::data::{self, SynthConfig};
use advfield::eval::{ablate, ablation_summary, write_ablation, AblationCell, AblationConfig, AblationData};
use advfield::segnet::SegNetConfig;
use advfield::trainer::{AttackKind, Consistency, TrainConfig, TrainData};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("advfield-ablation"), Into::into);
    let samples = data::generate(&SynthConfig { seed: 100, ..SynthConfig::for_extent(32, 32) }, 44)?;
    let splits = data::split(&samples, [20.0 / 44.0, 4.0 / 44.0, 20.0 / 44.0, 0.0], 1)?;
    let mut cells = Vec::new();
    for seed in 0..3 {
        for (name, kind) in [("none", AttackKind::None), ("random-bias", AttackKind::RandomBias), ("adv-bias", AttackKind::Bias)] {
            cells.push(AblationCell {
                name: name.into(),
                net: SegNetConfig { height: 32, width: 32, widths: vec![4, 8, 16], depth: 2, convs: 1, seed, ..Default::default() },
                train: TrainConfig {
                    pretrain_iters: 400,
                    finetune_iters: 150,
                    seed,
                    consistency: Consistency { kind, attack: AttackConfig::default() },
                    ..TrainConfig::desk()
                },
            });
        }
    }
    let data = AblationData { train: TrainData { labelled: &splits.train, unlabelled: &[], val: &splits.val }, test: &splits.test };
    let rows = ablate(&cells, data, &AblationConfig::default())?;
    for r in &rows {
        println!("{:<12} seed {} test dice {:.4} corrupted {:.4}", r.cell, r.seed, r.test_dice.unwrap_or(f64::NAN), r.corrupted_dice.unwrap_or(f64::NAN));
    }
    print!("{}", ablation_summary(&rows));
    write_ablation(&rows, &out)?;
    Ok(())
}
