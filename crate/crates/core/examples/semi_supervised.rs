//! Semi-supervised finetuning: few labelled images plus unlabelled images
//! whose masks were stripped, regularized by adversarial bias consistency.

use advfield::data::{self, LabelledSample, SynthConfig};
use advfield::eval::{corrupted_dice, mean_foreground_dice};
use advfield::segnet::{SegNet, SegNetConfig};
use advfield::trainer::{train, Mode, TrainConfig, TrainData, TrainState};

fn main() -> anyhow::Result<()> {
    let samples = data::generate(&SynthConfig { seed: 5, ..SynthConfig::for_extent(32, 32) }, 40)?;
    let splits = data::split(&samples, [0.1, 0.1, 0.4, 0.4], 2)?;
    assert!(splits.unlabelled.iter().all(|s| s.mask.is_none()));
    println!("{} labelled, {} unlabelled", splits.train.len(), splits.unlabelled.len());

    let net = SegNet::new(SegNetConfig { height: 32, width: 32, widths: vec![4, 8, 16], depth: 2, convs: 1, ..Default::default() })?;
    let mut state = TrainState::new(net, 0);
    let cfg = TrainConfig { pretrain_iters: 300, finetune_iters: 60, batch_size: 4, mode: Mode::SemiSupervised, ..TrainConfig::desk() };
    let data = TrainData { labelled: &splits.train, unlabelled: &splits.unlabelled, val: &splits.val };
    train(&cfg, &mut state, data, None)?;

    let last = state.history.last().expect("trained");
    println!(
        "final loss {:.4} = ce {:.4} + {} * {:.4} + {} * {:.4}",
        last.loss_total, last.loss_ce, cfg.lambda_l, last.d_labelled, cfg.lambda_u, last.d_unlabelled
    );
    let test: Vec<LabelledSample> = splits.test.iter().map(LabelledSample::try_from).collect::<Result<_, _>>()?;
    println!("test dice {:.4}, under random bias {:.4}", mean_foreground_dice(&state.net, &test)?, corrupted_dice(&state.net, &test, 0.3, 4, 2, 1)?);
    Ok(())
}
