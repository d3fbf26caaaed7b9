//! Adversarial bias, morphological and noise perturbations against a briefly
//! trained network, each compared with random perturbations of equal size.

use advfield::adversary::{attack_bias_with, attack_morph_with, attack_vat_with, bias_distance, equivariance_gap, noise_kl, AttackConfig};
use advfield::data::{self, SynthConfig};
use advfield::segnet::{SegNet, SegNetConfig};
use advfield::trainer::{train, TrainConfig, TrainData, TrainState};
use advfield::transforms::bias::random_bias;
use advfield::transforms::svf::{project_velocity, random_velocity, realize_deformation};
use advfield::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> anyhow::Result<()> {
    let samples = data::generate(&SynthConfig { seed: 1, ..SynthConfig::for_extent(32, 32) }, 30)?;
    let splits = data::split(&samples, [0.6, 0.1, 0.3, 0.0], 0)?;
    let net = SegNet::new(SegNetConfig { height: 32, width: 32, widths: vec![4, 8, 16], depth: 2, convs: 1, ..Default::default() })?;
    let mut state = TrainState::new(net, 0);
    let cfg = TrainConfig { pretrain_iters: 300, finetune_iters: 0, ..TrainConfig::desk() };
    train(&cfg, &mut state, TrainData { labelled: &splits.train, unlabelled: &[], val: &splits.val }, None)?;
    let net = &state.net;

    let acfg = AttackConfig::default();
    let (h, w) = (32, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut bias, mut morph, mut vat) = ([0.0; 2], [0.0; 2], [0.0; 2]);
    for s in &splits.test {
        let x = &s.image;
        bias[0] += attack_bias_with(net, x, &acfg, &mut rng)?.distance;
        bias[1] += bias_distance(net, x, &random_bias(&mut rng, acfg.alpha, acfg.grid, h, w)?, acfg.w)?;

        morph[0] += attack_morph_with(net, x, &acfg, &mut rng)?.objective;
        let v = project_velocity(&random_velocity(&mut rng, h, w, 1.0, 1.0)?, &acfg.morph)?;
        morph[1] += equivariance_gap(net, x, &realize_deformation(&v, &acfg.morph)?, acfg.w)?;

        let adv = attack_vat_with(net, x, acfg.epsilon, &mut rng)?.noise;
        vat[0] += noise_kl(net, x, &adv)?;
        let r = Tensor::from_fn(&[h, w], |_| StandardNormal.sample(&mut rng));
        vat[1] += noise_kl(net, x, &r.scale(acfg.epsilon / r.norm2())?)?;
    }
    let n = splits.test.len() as f64;
    println!("{:<28} {:>12} {:>12}", "perturbation", "adversarial", "random");
    for (name, v) in [("bias field (composite)", bias), ("morphological (composite)", morph), ("noise (KL)", vat)] {
        println!("{name:<28} {:>12.5} {:>12.5}", v[0] / n, v[1] / n);
    }
    Ok(())
}
