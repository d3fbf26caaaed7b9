//! Acceptance checks, one line per criterion. Exits nonzero if any fails.
//!
//! cargo test --release --test acceptance

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use advfield::adversary::{
    attack_bias, attack_bias_with, attack_morph, attack_morph_with, attack_vat, attack_vat_with, bias_distance,
    equivariance_gap, noise_kl, AttackConfig, BiasAttack, MorphAttack, VatAttack,
};
use advfield::autodiff::{finite_diff_grad, max_relative_error, Padding, Tape, Var};
use advfield::data::{self, LabelledSample, Sample, SynthConfig};
use advfield::distance::{composite_on, contour_on, foreground_channels, kl_on};
use advfield::eval::{ablate, AblationCell, AblationConfig, AblationData};
use advfield::segnet::{cross_entropy_on, SegNet, SegNetConfig};
use advfield::trainer::{
    loss_semisupervised, read_log, train, AttackKind, Consistency, LossBreakdown, Mode, TrainConfig, TrainData,
    TrainState,
};
use advfield::transforms::bias::{bias_on, random_bias};
use advfield::transforms::bspline::upsample_on;
use advfield::transforms::svf::{
    compose, integrate_on, integrate_svf, max_magnitude, mean_interior_magnitude, project_velocity,
    random_velocity, realize_deformation, warp_on, MorphConfig, VelocityField,
};
use advfield::Tensor;
use anyhow::{ensure, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Result<Outcome>); 8] = [
        ("gradient integrity", gradient_integrity),
        ("constraint feasibility", constraint_feasibility),
        ("diffeomorphism quality", diffeomorphism_quality),
        ("adversariality", adversariality),
        ("directional training benefit", training_benefit),
        ("loss recomposition", loss_recomposition),
        ("no-label property", no_label_property),
        ("reproducibility", reproducibility),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        let secs = start.elapsed().as_secs_f64();
        println!("criterion {n} {}: {name} ({secs:.1} s) {detail}", if pass { "PASS" } else { "FAIL" });
        failed += usize::from(!pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `sum(out * r)` for a fixed random `r`, so every output entry matters.
fn project(tape: &mut Tape, out: Var, r: &Tensor) -> advfield::Result<Var> {
    let r = tape.leaf(r.clone());
    let m = tape.mul(out, r)?;
    tape.sum(m)
}

/// Finite-difference step for smooth operations.
const STEP: f64 = 1e-5;
/// Smaller step for bilinear sampling, whose derivative jumps at integer
/// coordinates.
const SAMPLING_STEP: f64 = 1e-6;

/// Reverse-mode against central differences for `f` at `x`.
fn grad_error<F>(x: &Tensor, step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> advfield::Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let analytic = tape.backward(out, &[v])?.take(v).expect("requested");
    let numeric = finite_diff_grad(
        |y| {
            let mut t = Tape::new();
            let v = t.leaf(y.clone());
            let o = f(&mut t, v)?;
            t.scalar_value(o)
        },
        x,
        step,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}

fn gradient_integrity() -> Result<Outcome> {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut note = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    for seed in 0..5 {
        let mut rng = rng(seed);

        let x = uniform(&mut rng, &[2, 7, 7], -1.0, 1.0);
        let k = uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b = uniform(&mut rng, &[3], -1.0, 1.0);
        let r = uniform(&mut rng, &[3, 7, 7], -1.0, 1.0);
        for pad in [Padding::Zero, Padding::Replicate] {
            let conv = |t: &mut Tape, x: Var, k: Var, b: Var| {
                let o = t.conv2d(x, k, Some(b), pad)?;
                project(t, o, &r)
            };
            note("conv2d", grad_error(&x, STEP, |t, v| {
                let (k, b) = (t.leaf(k.clone()), t.leaf(b.clone()));
                conv(t, v, k, b)
            })?);
            note("conv2d", grad_error(&k, STEP, |t, v| {
                let (x, b) = (t.leaf(x.clone()), t.leaf(b.clone()));
                conv(t, x, v, b)
            })?);
            note("conv2d", grad_error(&b, STEP, |t, v| {
                let (x, k) = (t.leaf(x.clone()), t.leaf(k.clone()));
                conv(t, x, k, v)
            })?);
        }

        let grid = uniform(&mut rng, &[4, 4], -0.1, 0.1);
        let r = uniform(&mut rng, &[16, 16], -1.0, 1.0);
        note("bspline upsample", grad_error(&grid, STEP, |t, g| {
            let o = upsample_on(t, g, 16, 16)?;
            project(t, o, &r)
        })?);

        let image = uniform(&mut rng, &[16, 16], 0.2, 0.9);
        note("bias application", grad_error(&grid, STEP, |t, g| {
            let phi = bias_on(t, g, 0.3, 16, 16)?;
            let x = t.leaf(image.clone());
            let o = t.mul(x, phi)?;
            project(t, o, &r)
        })?);

        let v = random_velocity(&mut rng, 10, 10, 1.0, 1.5)?;
        let r2 = uniform(&mut rng, &[2, 10, 10], -1.0, 1.0);
        note("svf integration", grad_error(&v, SAMPLING_STEP, |t, v| {
            let u = integrate_on(t, v, 6)?;
            project(t, u, &r2)
        })?);

        let image = uniform(&mut rng, &[10, 10], 0.0, 1.0);
        let coords = advfield::transforms::svf::identity_coords(10, 10).add(&uniform(&mut rng, &[2, 10, 10], -2.0, 2.0))?;
        let r = uniform(&mut rng, &[10, 10], -1.0, 1.0);
        note("warp", grad_error(&image, SAMPLING_STEP, |t, i| {
            let c = t.leaf(coords.clone());
            let o = warp_on(t, i, c)?;
            project(t, o, &r)
        })?);
        note("warp", grad_error(&coords, SAMPLING_STEP, |t, c| {
            let i = t.leaf(image.clone());
            let o = warp_on(t, i, c)?;
            project(t, o, &r)
        })?);

        let la = uniform(&mut rng, &[3, 6, 6], -2.0, 2.0);
        let lb = uniform(&mut rng, &[3, 6, 6], -2.0, 2.0);
        let fg = foreground_channels(3);
        type Dist<'a> = Box<dyn Fn(&mut Tape, Var, Var) -> advfield::Result<Var> + 'a>;
        let dists: [(&str, Dist); 3] = [
            ("kl", Box::new(kl_on)),
            ("contour", Box::new(|t: &mut Tape, p, q| contour_on(t, p, q, &fg))),
            ("composite", Box::new(|t: &mut Tape, p, q| composite_on(t, p, q, 0.5, &fg))),
        ];
        for (name, d) in &dists {
            note(name, grad_error(&la, STEP, |t, a| {
                let b = t.leaf(lb.clone());
                let (p, q) = (t.softmax(a)?, t.softmax(b)?);
                d(t, p, q)
            })?);
            note(name, grad_error(&lb, STEP, |t, b| {
                let a = t.leaf(la.clone());
                let (p, q) = (t.softmax(a)?, t.softmax(b)?);
                d(t, p, q)
            })?);
        }

        let labels: Vec<usize> = (0..36).map(|_| rng.gen_range(0..3)).collect();
        note("cross-entropy", grad_error(&la, STEP, |t, a| {
            let p = t.softmax(a)?;
            cross_entropy_on(t, p, &labels)
        })?);

        let mut net = SegNet::new(SegNetConfig { height: 8, width: 8, widths: vec![2, 3], depth: 1, convs: 1, seed, ..Default::default() })?;
        // Nonzero biases keep ReLU inputs away from the kink at 0.
        let params = net
            .params()
            .iter()
            .map(|p| if p.shape().len() == 1 { uniform(&mut rng, p.shape(), -0.1, 0.1) } else { p.clone() })
            .collect();
        net.set_params(params)?;
        let image = uniform(&mut rng, &[8, 8], 0.2, 0.9);
        let labels: Vec<usize> = image.data().iter().map(|&v| usize::from(v > 0.5)).collect();
        note("full net", grad_error(&image, STEP, |t, x| {
            let ps = net.bind(t);
            let p = net.forward_on(t, &ps, x)?;
            cross_entropy_on(t, p, &labels)
        })?);
        for i in 0..net.params().len() {
            note("full net", grad_error(&net.params()[i], STEP, |t, v| {
                let mut ps = net.bind(t);
                ps[i] = v;
                let x = t.leaf(image.clone());
                let p = net.forward_on(t, &ps, x)?;
                cross_entropy_on(t, p, &labels)
            })?);
        }
    }
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    outcome(max < 1e-4 && worst.len() == 10, format!("max relative error over 5 seeds: {detail}"))
}

fn small_net(h: usize, w: usize, seed: u64) -> Result<SegNet> {
    Ok(SegNet::new(SegNetConfig { height: h, width: w, widths: vec![4, 8, 16], depth: 2, convs: 1, seed, ..Default::default() })?)
}

fn constraint_feasibility() -> Result<Outcome> {
    let alpha = 0.3;
    let feasible = |phi: &Tensor| phi.data().iter().all(|&v| v > 0.0 && (v - 1.0).abs() <= alpha);
    let deviation = |phi: &Tensor| phi.data().iter().fold(0.0f64, |m, v| m.max((v - 1.0).abs()));
    let mut rng = rng(2);
    let mut bad = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let f = random_bias(&mut rng, alpha, 4, 64, 64)?;
        bad += usize::from(!feasible(f.phi()));
        worst = worst.max(deviation(f.phi()));
    }

    let samples = data::generate(&SynthConfig { seed: 2, ..SynthConfig::for_extent(32, 32) }, 100)?;
    let net = small_net(32, 32, 2)?;
    let cfg = AttackConfig { iterations: 3, alpha, ..AttackConfig::default() };
    let mut vanished = 0;
    let mut worst_adv: f64 = 0.0;
    let mut worst_v: f64 = 0.0;
    for s in &samples {
        let a = attack_bias_with(&net, &s.image, &cfg, &mut rng)?;
        bad += usize::from(!feasible(a.field.phi()));
        worst_adv = worst_adv.max(deviation(a.field.phi()));
        let m = attack_morph_with(&net, &s.image, &cfg, &mut rng)?;
        let mag = max_magnitude(m.velocity.v());
        bad += usize::from(mag > cfg.morph.beta);
        worst_v = worst_v.max(mag);
        vanished += usize::from(a.zero_gradient) + usize::from(m.zero_gradient);
    }
    outcome(
        bad == 0 && vanished == 0,
        format!(
            "{bad} infeasible; max |phi-1| random {worst:.17} adversarial {worst_adv:.17}; max velocity {worst_v:.17} (beta {}); {vanished} vanished gradients",
            cfg.morph.beta
        ),
    )
}

fn diffeomorphism_quality() -> Result<Outcome> {
    let steps = MorphConfig::default().steps;
    let mut rng = rng(3);
    let (mut inverse, mut squaring) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let v = VelocityField::new(random_velocity(&mut rng, 64, 64, 4.0, 2.0)?, 2.0)?;
        let fwd = integrate_svf(&v, steps)?;
        let inv = integrate_svf(&VelocityField::new(v.v().scale(-1.0)?, 2.0)?, steps)?;
        inverse = inverse.max(mean_interior_magnitude(&compose(&fwd, &inv)?.displacement(), 4)?);
        let next = integrate_svf(&v, steps + 1)?;
        squaring = squaring.max(mean_interior_magnitude(&fwd.displacement().sub(&next.displacement())?, 4)?);
    }
    outcome(
        inverse < 0.1 && squaring < 0.05,
        format!("worst mean forward o inverse {inverse:.4} px, worst mean T={steps} vs T+1 change {squaring:.5} px"),
    )
}

fn adversariality() -> Result<Outcome> {
    let samples = data::generate(&SynthConfig { seed: 1, ..SynthConfig::for_extent(32, 32) }, 50)?;
    let splits = data::split(&samples, [0.5, 0.1, 0.4, 0.0], 0)?;
    ensure!(splits.test.len() == 20, "expected 20 test images, got {}", splits.test.len());
    let mut state = TrainState::new(small_net(32, 32, 0)?, 0);
    let cfg = TrainConfig { pretrain_iters: 500, finetune_iters: 0, ..TrainConfig::desk() };
    train(&cfg, &mut state, TrainData { labelled: &splits.train, unlabelled: &[], val: &splits.val }, None)?;
    let net = &state.net;

    let acfg = AttackConfig::default();
    let (h, w) = (32, 32);
    let mut rng = rng(4);
    let (mut bias, mut morph, mut vat) = ([0.0; 2], [0.0; 2], [0.0; 2]);
    for s in &splits.test {
        let x = &s.image;
        bias[0] += attack_bias_with(net, x, &acfg, &mut rng)?.distance;
        morph[0] += attack_morph_with(net, x, &acfg, &mut rng)?.objective;
        let adv = attack_vat_with(net, x, acfg.epsilon, &mut rng)?.noise;
        vat[0] += noise_kl(net, x, &adv)?;
        for _ in 0..20 {
            bias[1] += bias_distance(net, x, &random_bias(&mut rng, acfg.alpha, acfg.grid, h, w)?, acfg.w)? / 20.0;
            let v = project_velocity(&random_velocity(&mut rng, h, w, 1.0, 1.0)?, &acfg.morph)?;
            morph[1] += equivariance_gap(net, x, &realize_deformation(&v, &acfg.morph)?, acfg.w)? / 20.0;
            let r = Tensor::from_fn(&[h, w], |_| StandardNormal.sample(&mut rng));
            vat[1] += noise_kl(net, x, &r.scale(acfg.epsilon / r.norm2())?)? / 20.0;
        }
    }
    let n = splits.test.len() as f64;
    let [b, m, v] = [bias, morph, vat].map(|p| [p[0] / n, p[1] / n]);
    outcome(
        b[0] > b[1] && m[0] > m[1] && v[0] > v[1],
        format!(
            "adversarial vs random: bias {:.4} vs {:.4}, morph {:.4} vs {:.4}, vat {:.5} vs {:.5}",
            b[0], b[1], m[0], m[1], v[0], v[1]
        ),
    )
}

fn training_benefit() -> Result<Outcome> {
    let samples = data::generate(&SynthConfig { seed: 100, ..SynthConfig::for_extent(32, 32) }, 44)?;
    let splits = data::split(&samples, [20.0 / 44.0, 4.0 / 44.0, 20.0 / 44.0, 0.0], 1)?;
    let arms = [("none", AttackKind::None), ("random-bias", AttackKind::RandomBias), ("adv-bias", AttackKind::Bias)];
    let mut cells = Vec::new();
    for seed in 0..3 {
        for (name, kind) in arms {
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
    let score = |arm: &str, seed: u64| -> Result<f64> {
        let row = rows.iter().find(|r| r.cell == arm && r.seed == seed);
        row.and_then(|r| r.corrupted_dice).ok_or_else(|| anyhow::anyhow!("{arm} seed {seed} did not finish"))
    };
    let mut mean = [0.0; 3];
    let mut wins = 0;
    for seed in 0..3 {
        for (i, (arm, _)) in arms.iter().enumerate() {
            mean[i] += score(arm, seed)? / 3.0;
        }
        wins += usize::from(score("adv-bias", seed)? >= score("none", seed)?);
    }
    outcome(
        mean[2] >= mean[1] && mean[1] >= mean[0] && wins >= 2,
        format!(
            "mean corrupted Dice none {:.4}, random-bias {:.4}, adv-bias {:.4}; adv >= none in {wins} of 3 seeds",
            mean[0], mean[1], mean[2]
        ),
    )
}

fn loss_recomposition() -> Result<Outcome> {
    let samples = data::generate(&SynthConfig { seed: 6, ..SynthConfig::for_extent(32, 32) }, 30)?;
    let splits = data::split(&samples, [0.3, 0.1, 0.2, 0.4], 6)?;
    let cfg = TrainConfig {
        pretrain_iters: 10,
        finetune_iters: 40,
        batch_size: 4,
        val_every: 10,
        mode: Mode::SemiSupervised,
        ..TrainConfig::desk()
    };
    let dir = tempfile::tempdir()?;
    let log = dir.path().join("log.csv");
    let mut state = TrainState::new(small_net(32, 32, 6)?, cfg.seed);
    let data = TrainData { labelled: &splits.train, unlabelled: &splits.unlabelled, val: &splits.val };
    train(&cfg, &mut state, data, Some(&log))?;
    let rows = read_log(&log)?;
    ensure!(rows.len() == 50, "expected 50 log rows, got {}", rows.len());
    let mut worst: f64 = 0.0;
    let mut positive = true;
    for r in &rows {
        let cons = cfg.lambda_l * r.d_labelled + cfg.lambda_u * r.d_unlabelled;
        worst = worst.max((r.loss_total - (r.loss_ce + cons)).abs()).max((r.loss_cons - cons).abs());
        if r.phase == 2 {
            positive &= r.d_labelled > 0.0 && r.d_unlabelled > 0.0;
        }
    }
    outcome(
        worst <= 1e-10 && positive,
        format!("max |total - (ce + lambda_l d_l + lambda_u d_u)| = {worst:.2e} over {} rows; finetune distances positive: {positive}", rows.len()),
    )
}

/// Source of a file with its unit-test module cut off.
fn library_part(src: &str) -> &str {
    src.split("#[cfg(test)]").next().unwrap_or(src)
}

/// Body of `fn name` up to the next top-level item.
fn function<'a>(src: &'a str, name: &str) -> &'a str {
    let start = src.find(&format!("fn {name}")).unwrap_or_else(|| panic!("fn {name} not found"));
    let rest = &src[start..];
    let end = rest.find("\n}\n").map_or(rest.len(), |e| e + 3);
    &rest[..end]
}

const LABEL_ACCESS: [&str; 5] = [".mask", "LabelMask", "labels", "LabelledSample", "one_hot"];

fn no_label_property() -> Result<Outcome> {
    let _: fn(&SegNet, &Tensor, &AttackConfig) -> advfield::Result<BiasAttack> = attack_bias;
    let _: fn(&SegNet, &Tensor, &AttackConfig) -> advfield::Result<MorphAttack> = attack_morph;
    let _: fn(&SegNet, &Tensor, f64) -> advfield::Result<VatAttack> = attack_vat;
    let _: fn(&SegNet, &[LabelledSample], &[Tensor], &Consistency, f64, f64, u64) -> advfield::Result<(LossBreakdown, Vec<Tensor>)> =
        loss_semisupervised;

    let adversary = library_part(include_str!("../src/adversary.rs"));
    let distance = library_part(include_str!("../src/distance.rs"));
    let trainer = library_part(include_str!("../src/trainer.rs"));
    let paths = [
        ("adversary.rs", adversary),
        ("distance.rs", distance),
        ("consistency_on", function(trainer, "consistency_on")),
        ("unlabelled_term", function(trainer, "unlabelled_term")),
    ];
    let mut leaks = Vec::new();
    for (name, src) in paths {
        for pat in LABEL_ACCESS {
            if src.contains(pat) {
                leaks.push(format!("{name} uses {pat}"));
            }
        }
    }

    let dir = tempfile::tempdir()?;
    let generated = data::generate(&SynthConfig { seed: 7, ..SynthConfig::for_extent(32, 32) }, 16)?;
    let dataset: Vec<Sample> = generated.iter().enumerate().map(|(i, s)| if i % 2 == 0 { s.clone() } else { s.without_mask() }).collect();
    data::save(&dataset, dir.path(), None)?;
    let loaded = data::load(dir.path())?;
    let (labelled, unlabelled): (Vec<Sample>, Vec<Sample>) = loaded.into_iter().partition(Sample::is_labelled);
    let on_disk = |s: &Sample| dir.path().join("masks").join(format!("{}.advf", s.id)).exists();
    ensure!(unlabelled.len() == 8 && !unlabelled.iter().any(on_disk), "unlabelled samples have masks on disk");
    ensure!(labelled.iter().all(on_disk), "labelled masks missing");

    let net = small_net(32, 32, 7)?;
    let cfg = AttackConfig::default();
    let mut attacked = 0;
    for s in &unlabelled {
        attack_bias(&net, &s.image, &cfg)?;
        attack_morph(&net, &s.image, &cfg)?;
        attack_vat(&net, &s.image, cfg.epsilon)?;
        attacked += 3;
    }
    let mut trained = Vec::new();
    for kind in [AttackKind::Bias, AttackKind::Morph, AttackKind::Vat] {
        let tcfg = TrainConfig {
            pretrain_iters: 1,
            finetune_iters: 2,
            batch_size: 2,
            mode: Mode::SemiSupervised,
            consistency: Consistency { kind, attack: cfg.clone() },
            ..TrainConfig::desk()
        };
        let mut state = TrainState::new(net.clone(), tcfg.seed);
        train(&tcfg, &mut state, TrainData { labelled: &labelled, unlabelled: &unlabelled, val: &[] }, None)?;
        let used = state.history.iter().filter(|r| r.phase == 2).all(|r| r.d_unlabelled > 0.0);
        ensure!(used, "{} consistency on unlabelled images was zero", kind.as_str());
        trained.push(kind.as_str());
    }
    outcome(
        leaks.is_empty(),
        format!(
            "{attacked} attacks and semi-supervised {} training on 8 mask-free samples; label access on unlabelled paths: {}",
            trained.join("/"),
            if leaks.is_empty() { "none".to_string() } else { leaks.join("; ") }
        ),
    )
}

fn files(dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir)?.to_path_buf(), fs::read(&p)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn advfield(args: &[String], threads: Option<&str>) -> Result<()> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_advfield"));
    cmd.args(args);
    if let Some(t) = threads {
        cmd.env("ADVFIELD_THREADS", t);
    }
    let out = cmd.output()?;
    ensure!(out.status.success(), "advfield {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn reproducibility() -> Result<Outcome> {
    let tmp = tempfile::tempdir()?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let p = |d: &Path, s: &str| d.join(s).display().to_string();
    let tiny = ["net.widths=[4, 8, 16]", "net.convs=1", "train.batch_size=2", "train.val_every=3", "eval.trials=2"];
    let sets: Vec<String> = tiny.iter().flat_map(|s| ["--set".to_string(), s.to_string()]).collect();
    let strings = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();

    let data = p(&a, "data");
    let checkpoint = p(&a, "train/best");
    let runs: Vec<(&str, Vec<String>, Vec<String>)> = vec![
        ("data", strings(&["synth", "--count", "20", "--seed", "3", "--set", "synth.extent=32"]), strings(&["synth"])),
        (
            "train",
            [strings(&["train", "--data", &data, "--mode", "semi", "--pretrain-iters", "4", "--finetune-iters", "3"]), sets.clone()].concat(),
            strings(&["train"]),
        ),
        (
            "attack",
            [strings(&["attack", "--data", &data, "--checkpoint", &checkpoint, "--kind", "morph", "--limit", "3"]), sets.clone()].concat(),
            strings(&["attack", "--kind", "morph", "--limit", "3"]),
        ),
        ("eval", [strings(&["eval", "--data", &data, "--checkpoint", &checkpoint, "--dump", "2"]), sets.clone()].concat(), strings(&["eval", "--dump", "2"])),
        (
            "ablate",
            [
                strings(&["ablate", "--data", &data, "--attacks", "none,bias", "--seeds", "0,1"]),
                sets.clone(),
                strings(&["--set", "train.pretrain_iters=3", "--set", "train.finetune_iters=2"]),
            ]
            .concat(),
            strings(&["ablate"]),
        ),
    ];
    let mut compared = 0;
    for (name, first, rerun) in &runs {
        advfield(&[first.clone(), strings(&["--out", &p(&a, name)])].concat(), None)?;
        let config = p(&a, &format!("{name}/config.toml"));
        advfield(&[rerun.clone(), strings(&["--config", &config, "--out", &p(&b, name)])].concat(), Some("2"))?;
        let (x, y) = (files(&a.join(name))?, files(&b.join(name))?);
        ensure!(x.len() > 1, "{name} wrote only {} files", x.len());
        if x != y {
            let names = |v: &[(PathBuf, Vec<u8>)]| v.iter().map(|f| f.0.display().to_string()).collect::<Vec<_>>();
            let differing: Vec<_> = x.iter().filter(|f| !y.contains(f)).map(|f| f.0.display().to_string()).collect();
            return outcome(false, format!("{name} rerun differs: {differing:?} (first {:?}, rerun {:?})", names(&x).len(), names(&y).len()));
        }
        compared += x.len();
    }
    outcome(true, format!("synth/train/attack/eval/ablate reruns from echoed configs with 2 threads: {compared} files byte-identical"))
}
