//! Two-phase training: random-augmentation pretraining with cross-entropy,
//! then finetuning with an added consistency term between clean and
//! perturbed predictions.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{bias_search, morph_search, vat_search, AttackConfig};
use crate::autodiff::{Tape, Var};
use crate::data::{stream_rng, LabelMask, LabelledSample, Sample};
use crate::distance::{composite_on, foreground_channels};
use crate::error::{Error, Result};
use crate::eval::mean_foreground_dice;
use crate::segnet::{cross_entropy_on, parse_manifest, Adam, SegNet};
use crate::tensor::Tensor;
use crate::transforms::augment::{rand_augment, RandAugConfig};
use crate::transforms::bias::{random_bias, realize_bias};
use crate::transforms::svf::realize_deformation;

/// Perturbation used for the consistency term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    None,
    Bias,
    Morph,
    Vat,
    RandomBias,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Bias => "bias",
            AttackKind::Morph => "morph",
            AttackKind::Vat => "vat",
            AttackKind::RandomBias => "random-bias",
        }
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => AttackKind::None,
            "bias" => AttackKind::Bias,
            "morph" => AttackKind::Morph,
            "vat" => AttackKind::Vat,
            "random-bias" => AttackKind::RandomBias,
            _ => return Err(Error::Config(format!("unknown attack `{s}` (none|bias|morph|vat|random-bias)"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Supervised,
    SemiSupervised,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Supervised => "supervised",
            Mode::SemiSupervised => "semi",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Mode::Supervised),
            "semi" => Ok(Mode::SemiSupervised),
            _ => Err(Error::Config(format!("unknown mode `{s}` (supervised|semi)"))),
        }
    }
}

/// The consistency term: which perturbation, and its settings. The contour
/// weight `attack.w` is shared by the attack objective and the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Consistency {
    pub kind: AttackKind,
    pub attack: AttackConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub pretrain_iters: usize,
    pub pretrain_lr: f64,
    pub finetune_iters: usize,
    pub finetune_lr: f64,
    pub batch_size: usize,
    pub lambda_l: f64,
    pub lambda_u: f64,
    pub mode: Mode,
    pub consistency: Consistency,
    pub augment: RandAugConfig,
    /// Validate every this many iterations, and at the end of each phase.
    pub val_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Scaled-down schedule for a single workstation core.
    pub fn desk() -> Self {
        Self {
            pretrain_iters: 500,
            pretrain_lr: 5e-3,
            finetune_iters: 200,
            finetune_lr: 1e-5,
            batch_size: 8,
            lambda_l: 1.0,
            lambda_u: 0.1,
            mode: Mode::Supervised,
            consistency: Consistency { kind: AttackKind::Bias, attack: AttackConfig::default() },
            augment: RandAugConfig::default(),
            val_every: 50,
            seed: 0,
        }
    }

    /// The full-scale schedule and weights.
    pub fn paper() -> Self {
        Self {
            pretrain_iters: 10_000,
            pretrain_lr: 1e-3,
            finetune_iters: 2_000,
            finetune_lr: 1e-5,
            batch_size: 20,
            val_every: 500,
            ..Self::desk()
        }
    }

    pub fn total_iters(&self) -> usize {
        self.pretrain_iters + self.finetune_iters
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, lr) in [("pretrain_lr", self.pretrain_lr), ("finetune_lr", self.finetune_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("train.{name} must be > 0, got {lr}"));
            }
        }
        for (name, l) in [("lambda_l", self.lambda_l), ("lambda_u", self.lambda_u)] {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("train.{name} must be >= 0, got {l}"));
            }
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be >= 1".into());
        }
        if self.val_every == 0 {
            return bad("train.val_every must be >= 1".into());
        }
        self.augment.validate()?;
        if self.consistency.kind != AttackKind::None {
            self.consistency.attack.validate()?;
        }
        Ok(())
    }
}

/// Per-iteration loss terms. `d_labelled` and `d_unlabelled` are batch means
/// of the raw distances; `consistency` is their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub consistency: f64,
    pub d_labelled: f64,
    pub d_unlabelled: f64,
}

struct SampleResult {
    loss: f64,
    ce: f64,
    d: f64,
    grads: Vec<Tensor>,
}

/// Builds the perturbed image on the tape and the (possibly warped) target
/// distribution, runs the net on it and returns the consistency distance.
fn consistency_on<R: Rng + ?Sized>(
    net: &SegNet,
    tape: &mut Tape,
    params: &[Var],
    image: &Tensor,
    clean: &Tensor,
    cons: &Consistency,
    rng: &mut R,
) -> Result<Option<Var>> {
    let cfg = &cons.attack;
    let (h, w) = image.spatial()?;
    let (moved, target) = match cons.kind {
        AttackKind::None => return Ok(None),
        AttackKind::Bias => {
            let (grid, _) = bias_search(net, image, clean, cfg, rng)?;
            (image.mul(realize_bias(&grid, h, w)?.phi())?, clean.clone())
        }
        AttackKind::RandomBias => {
            let field = random_bias(rng, cfg.alpha, cfg.grid, h, w)?;
            (image.mul(field.phi())?, clean.clone())
        }
        AttackKind::Vat => {
            let noise = vat_search(net, image, clean, cfg.epsilon, rng)?.noise;
            (image.add(&noise)?, clean.clone())
        }
        AttackKind::Morph => {
            let (v, _) = morph_search(net, image, clean, cfg, rng)?;
            let def = realize_deformation(&v, &cfg.morph)?;
            let warp = |t: &Tensor| crate::transforms::svf::warp(t, &def);
            (warp(image)?, warp(clean)?)
        }
    };
    let x = tape.leaf(moved);
    let phat = net.forward_on(tape, params, x)?;
    let p = tape.leaf(target);
    let fg = foreground_channels(net.config().classes);
    Ok(Some(composite_on(tape, p, phat, cfg.w, &fg)?))
}

fn labelled_term(
    net: &SegNet,
    s: &LabelledSample,
    cons: &Consistency,
    lambda_l: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let params = net.bind(&mut tape);
    let x = tape.leaf(s.image.clone());
    let p = net.forward_on(&mut tape, &params, x)?;
    let ce = cross_entropy_on(&mut tape, p, &s.mask.labels_usize())?;
    let mut loss = ce;
    let mut d_value = 0.0;
    if lambda_l > 0.0 {
        let clean = tape.value(p).clone();
        if let Some(d) = consistency_on(net, &mut tape, &params, &s.image, &clean, cons, rng)? {
            d_value = tape.scalar_value(d)?;
            let weighted = tape.scale(d, lambda_l)?;
            loss = tape.add(ce, weighted)?;
        }
    }
    let mut grads = tape.backward(loss, &params)?;
    Ok(SampleResult {
        loss: tape.scalar_value(loss)?,
        ce: tape.scalar_value(ce)?,
        d: d_value,
        grads: params.iter().map(|&v| grads.take(v).expect("requested")).collect(),
    })
}

fn unlabelled_term(net: &SegNet, image: &Tensor, cons: &Consistency, rng: &mut ChaCha8Rng) -> Result<SampleResult> {
    let clean = net.predict(image)?;
    let mut tape = Tape::new();
    let params = net.bind(&mut tape);
    let Some(d) = consistency_on(net, &mut tape, &params, image, &clean, cons, rng)? else {
        let grads = net.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        return Ok(SampleResult { loss: 0.0, ce: 0.0, d: 0.0, grads });
    };
    let mut grads = tape.backward(d, &params)?;
    let d = tape.scalar_value(d)?;
    Ok(SampleResult { loss: d, ce: 0.0, d, grads: params.iter().map(|&v| grads.take(v).expect("requested")).collect() })
}

/// Sums `weight * grads` over results in slice order.
fn reduce_grads(acc: &mut [Tensor], results: &[SampleResult], weight: f64) {
    for r in results {
        for (a, g) in acc.iter_mut().zip(&r.grads) {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += weight * y;
            }
        }
    }
}

/// `mean_i [CE(p_i, y_i) + lambda_l * D(p_i, p̂_i)]` over the batch, with
/// gradients with respect to the network parameters.
///
/// Sample `i` draws its augmentation-free perturbation from stream `i` of
/// `seed`.
pub fn loss_supervised(
    net: &SegNet,
    batch: &[LabelledSample],
    cons: &Consistency,
    lambda_l: f64,
    seed: u64,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    loss_semisupervised(net, batch, &[], cons, lambda_l, 0.0, seed)
}

/// [`loss_supervised`] plus `lambda_u` times the mean consistency over the
/// unlabelled images. Unlabelled sample `j` uses stream `batch.len() + j`.
pub fn loss_semisupervised(
    net: &SegNet,
    labelled: &[LabelledSample],
    unlabelled: &[Tensor],
    cons: &Consistency,
    lambda_l: f64,
    lambda_u: f64,
    seed: u64,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    if labelled.is_empty() {
        return Err(Error::invalid("labelled batch is empty"));
    }
    if lambda_u > 0.0 && unlabelled.is_empty() {
        return Err(Error::invalid("unlabelled batch is empty but lambda_u > 0"));
    }
    let nl = labelled.len();
    let lab: Vec<SampleResult> = labelled
        .par_iter()
        .enumerate()
        .map(|(i, s)| labelled_term(net, s, cons, lambda_l, &mut stream_rng(seed, i as u64)))
        .collect::<Result<_>>()?;
    let unl: Vec<SampleResult> = if lambda_u > 0.0 {
        unlabelled
            .par_iter()
            .enumerate()
            .map(|(j, x)| unlabelled_term(net, x, cons, &mut stream_rng(seed, (nl + j) as u64)))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut grads: Vec<Tensor> = net.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    reduce_grads(&mut grads, &lab, 1.0 / nl as f64);
    let mean = |rs: &[SampleResult], f: fn(&SampleResult) -> f64| {
        if rs.is_empty() {
            0.0
        } else {
            rs.iter().map(f).sum::<f64>() / rs.len() as f64
        }
    };
    let mut b = LossBreakdown {
        total: mean(&lab, |r| r.loss),
        ce: mean(&lab, |r| r.ce),
        d_labelled: mean(&lab, |r| r.d),
        ..LossBreakdown::default()
    };
    if !unl.is_empty() {
        reduce_grads(&mut grads, &unl, lambda_u / unl.len() as f64);
        b.d_unlabelled = mean(&unl, |r| r.d);
        b.total += lambda_u * b.d_unlabelled;
    }
    b.consistency = lambda_l * b.d_labelled + lambda_u * b.d_unlabelled;
    Ok((b, grads))
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub loss_total: f64,
    pub loss_ce: f64,
    /// `lambda_l * d_labelled + lambda_u * d_unlabelled`.
    pub loss_cons: f64,
    pub val_dice: Option<f64>,
    /// 1 = pretraining, 2 = finetuning.
    pub phase: u8,
    pub d_labelled: f64,
    pub d_unlabelled: f64,
}

/// Everything needed to resume training exactly where it stopped.
///
/// Randomness is keyed by `(seed, iteration)`, so no generator state is
/// stored beyond the seed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub net: SegNet,
    pub adam: Adam,
    /// Iterations completed.
    pub iteration: usize,
    pub seed: u64,
    pub history: Vec<LogRow>,
    pub best: Option<Best>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Best {
    pub net: SegNet,
    pub iteration: usize,
    pub val_dice: f64,
}

impl TrainState {
    pub fn new(net: SegNet, seed: u64) -> Self {
        let adam = Adam::new(net.params());
        Self { net, adam, iteration: 0, seed, history: Vec::new(), best: None }
    }

    /// The best-on-validation network, or the current one when no validation
    /// has run.
    pub fn best_net(&self) -> &SegNet {
        self.best.as_ref().map_or(&self.net, |b| &b.net)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.net.save_checkpoint(dir.join("net"), self.iteration as u64)?;
        let mut text = String::new();
        let mut kv = |k: &str, v: String| writeln!(text, "{k}={v}").expect("writing to a String");
        kv("format", "advfield-train-state".into());
        kv("version", "1".into());
        kv("iteration", self.iteration.to_string());
        kv("seed", self.seed.to_string());
        kv("adam_step", self.adam.step.to_string());
        kv("adam_beta1", format!("{:?}", self.adam.beta1));
        kv("adam_beta2", format!("{:?}", self.adam.beta2));
        kv("adam_eps", format!("{:?}", self.adam.eps));
        if let Some(b) = &self.best {
            kv("best_iteration", b.iteration.to_string());
            kv("best_val_dice", format!("{:?}", b.val_dice));
            b.net.save_checkpoint(dir.join("best"), b.iteration as u64)?;
        }
        let path = dir.join("state.txt");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        let adam_dir = dir.join("adam");
        fs::create_dir_all(&adam_dir).map_err(|e| Error::io(&adam_dir, e))?;
        for (i, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            m.save(adam_dir.join(format!("m_{i:03}.advf")))?;
            v.save(adam_dir.join(format!("v_{i:03}.advf")))?;
        }
        write_log(&self.history, dir.join("history.csv"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("state.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let kv = parse_manifest(&text)?;
        let get = |k: &str| kv.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
        let need = |k: &str| get(k).ok_or_else(|| Error::Format(format!("train state lacks `{k}`")));
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Format(format!("train state `{k}` = `{v}` is malformed")))
        }
        if need("format")? != "advfield-train-state" || need("version")? != "1" {
            return Err(Error::Format("not an advfield train state (version 1)".into()));
        }
        let (net, _) = SegNet::load_checkpoint(dir.join("net"))?;
        let n = net.params().len();
        let load_all = |prefix: &str| -> Result<Vec<Tensor>> {
            (0..n).map(|i| Tensor::load(dir.join("adam").join(format!("{prefix}_{i:03}.advf")))).collect()
        };
        let adam = Adam {
            beta1: num("adam_beta1", need("adam_beta1")?)?,
            beta2: num("adam_beta2", need("adam_beta2")?)?,
            eps: num("adam_eps", need("adam_eps")?)?,
            step: num("adam_step", need("adam_step")?)?,
            m: load_all("m")?,
            v: load_all("v")?,
        };
        let best = match get("best_iteration") {
            Some(it) => Some(Best {
                net: SegNet::load_checkpoint(dir.join("best"))?.0,
                iteration: num("best_iteration", it)?,
                val_dice: num("best_val_dice", need("best_val_dice")?)?,
            }),
            None => None,
        };
        Ok(Self {
            net,
            adam,
            iteration: num("iteration", need("iteration")?)?,
            seed: num("seed", need("seed")?)?,
            history: read_log(dir.join("history.csv"))?,
            best,
        })
    }
}

pub fn write_log(rows: &[LogRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!("checked is_io_error"),
        }
    } else {
        Error::Format(format!("{}: {e}", path.display()))
    }
}

/// Training inputs. `unlabelled` samples carry no masks.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub labelled: &'a [Sample],
    pub unlabelled: &'a [Sample],
    pub val: &'a [Sample],
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &'a [Sample], n: usize) -> Vec<&'a Sample> {
    if n >= pool.len() {
        // Every sample once, then wrap around in shuffled order.
        let order = sample_indices(rng, pool.len(), pool.len()).into_vec();
        return order.into_iter().cycle().take(n).map(|i| &pool[i]).collect();
    }
    sample_indices(rng, pool.len(), n).iter().map(|i| &pool[i]).collect()
}

/// Runs iterations until `cfg.total_iters()` are complete. `log`, when
/// given, receives each row as it is produced (append-only CSV).
pub fn train(cfg: &TrainConfig, state: &mut TrainState, data: TrainData<'_>, log: Option<&Path>) -> Result<()> {
    train_steps(cfg, state, data, log, usize::MAX)
}

/// Like [`train`], but stops after at most `max_steps` iterations. Stopping
/// and resuming gives exactly the same state as an uninterrupted run.
pub fn train_steps(
    cfg: &TrainConfig,
    state: &mut TrainState,
    data: TrainData<'_>,
    log: Option<&Path>,
    max_steps: usize,
) -> Result<()> {
    cfg.validate()?;
    if data.labelled.is_empty() {
        return Err(Error::Config("training needs at least one labelled sample".into()));
    }
    if let Some(s) = data.labelled.iter().find(|s| !s.is_labelled()) {
        return Err(Error::Config(format!("labelled split contains unlabelled sample {}", s.id)));
    }
    if state.seed != cfg.seed {
        return Err(Error::Config(format!("state was started with seed {}, config has {}", state.seed, cfg.seed)));
    }
    let semi = cfg.mode == Mode::SemiSupervised;
    if semi && data.unlabelled.is_empty() {
        return Err(Error::Config("semi-supervised training needs unlabelled samples".into()));
    }
    if !semi && !data.unlabelled.is_empty() {
        return Err(Error::Config("unlabelled samples given for supervised training".into()));
    }
    let (h, w) = data.labelled[0].extent();
    let ncfg = state.net.config();
    if (ncfg.height, ncfg.width) != (h, w) {
        return Err(Error::Config(format!(
            "network expects {}x{} images, dataset has {h}x{w}",
            ncfg.height, ncfg.width
        )));
    }
    let val: Vec<LabelledSample> = data.val.iter().map(LabelledSample::try_from).collect::<Result<_>>()?;

    let mut writer = match log {
        Some(path) => {
            let file = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
            Some(csv::WriterBuilder::new().has_headers(empty).from_writer(file))
        }
        None => None,
    };

    let stop = cfg.total_iters().min(state.iteration.saturating_add(max_steps));
    while state.iteration < stop {
        let it = state.iteration;
        let finetune = it >= cfg.pretrain_iters;
        if it == cfg.pretrain_iters && it > 0 {
            state.adam = Adam::new(state.net.params());
        }
        let mut rng = stream_rng(cfg.seed, it as u64);
        let batch_seed: u64 = rng.gen();
        let aug_seed: u64 = rng.gen();
        let chosen = pick(&mut rng, data.labelled, cfg.batch_size);
        let chosen_u = if semi && finetune { pick(&mut rng, data.unlabelled, cfg.batch_size) } else { Vec::new() };

        let augment = |i: usize, s: &Sample| rand_augment(s, &cfg.augment, &mut stream_rng(aug_seed, i as u64));
        let labelled: Vec<LabelledSample> = chosen
            .iter()
            .enumerate()
            .map(|(i, s)| LabelledSample::try_from(&augment(i, s)?))
            .collect::<Result<_>>()?;
        let unlabelled: Vec<Tensor> = chosen_u
            .iter()
            .enumerate()
            .map(|(j, s)| Ok(augment(labelled.len() + j, s)?.image))
            .collect::<Result<_>>()?;

        let (b, grads) = if finetune {
            let lambda_u = if semi { cfg.lambda_u } else { 0.0 };
            loss_semisupervised(&state.net, &labelled, &unlabelled, &cfg.consistency, cfg.lambda_l, lambda_u, batch_seed)?
        } else {
            let none = Consistency { kind: AttackKind::None, attack: cfg.consistency.attack.clone() };
            loss_supervised(&state.net, &labelled, &none, 0.0, batch_seed)?
        };
        if !b.total.is_finite() || grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged { iteration: it, loss: b.total });
        }
        let lr = if finetune { cfg.finetune_lr } else { cfg.pretrain_lr };
        state.net.adam_step(&grads, &mut state.adam, lr)?;
        state.iteration += 1;

        let checkpoint = state.iteration % cfg.val_every == 0
            || state.iteration == cfg.pretrain_iters
            || state.iteration == cfg.total_iters();
        let val_dice = if !val.is_empty() && checkpoint {
            let d = mean_foreground_dice(&state.net, &val)?;
            if state.best.as_ref().map_or(true, |best| d > best.val_dice) {
                state.best = Some(Best { net: state.net.clone(), iteration: state.iteration, val_dice: d });
            }
            Some(d)
        } else {
            None
        };
        let row = LogRow {
            iter: it,
            loss_total: b.total,
            loss_ce: b.ce,
            loss_cons: b.consistency,
            val_dice,
            phase: if finetune { 2 } else { 1 },
            d_labelled: b.d_labelled,
            d_unlabelled: b.d_unlabelled,
        };
        if let (Some(w), Some(path)) = (writer.as_mut(), log) {
            w.serialize(&row).map_err(|e| csv_error(path, e))?;
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        state.history.push(row);
    }
    Ok(())
}

/// Hard predictions for a set of images.
pub fn segment_all(net: &SegNet, images: &[Tensor]) -> Result<Vec<LabelMask>> {
    images.par_iter().map(|x| net.segment(x)).collect()
}
