//! Random-augmentation pretraining followed by adversarial bias finetuning,
//! with a CSV log and checkpoints.
//!
//! cargo run --release --example train_supervised [-- OUT_DIR]

use advfield::data::{self, LabelledSample, SynthConfig};
use advfield::eval::{corrupted_dice, mean_foreground_dice};
use advfield::segnet::{SegNet, SegNetConfig};
use advfield::trainer::{train, AttackKind, TrainConfig, TrainData, TrainState};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("advfield-train"), Into::into);
    let _ = std::fs::remove_file(out.join("log.csv"));
    std::fs::create_dir_all(&out)?;
    let samples = data::generate(&SynthConfig { seed: 100, ..SynthConfig::for_extent(32, 32) }, 44)?;
    let splits = data::split(&samples, [20.0 / 44.0, 4.0 / 44.0, 20.0 / 44.0, 0.0], 1)?;
    let net = SegNet::new(SegNetConfig { height: 32, width: 32, widths: vec![4, 8, 16], depth: 2, convs: 1, ..Default::default() })?;
    let mut state = TrainState::new(net, 0);
    let mut cfg = TrainConfig { pretrain_iters: 400, finetune_iters: 150, ..TrainConfig::desk() };
    cfg.consistency.kind = AttackKind::Bias;
    let data = TrainData { labelled: &splits.train, unlabelled: &[], val: &splits.val };
    train(&cfg, &mut state, data, Some(&out.join("log.csv")))?;

    for r in state.history.iter().filter(|r| r.val_dice.is_some()) {
        println!("iter {:>4} phase {} loss {:.4} (ce {:.4} + consistency {:.4}) val dice {:.4}", r.iter, r.phase, r.loss_total, r.loss_ce, r.loss_cons, r.val_dice.unwrap_or(0.0));
    }
    let test: Vec<LabelledSample> = splits.test.iter().map(LabelledSample::try_from).collect::<Result<_, _>>()?;
    println!("test dice {:.4}", mean_foreground_dice(&state.net, &test)?);
    println!("test dice under random bias (alpha 0.3) {:.4}", corrupted_dice(&state.net, &test, 0.3, 4, 4, 0x5eed)?);
    state.save(out.join("state"))?;
    state.best_net().save_checkpoint(out.join("best"), state.best.as_ref().map_or(0, |b| b.iteration as u64))?;
    println!("log, state and best checkpoint in {}", out.display());
    Ok(())
}
