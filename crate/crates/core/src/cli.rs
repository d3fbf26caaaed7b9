//! The `advfield` command line: synth, train, attack, eval and ablate.
//!
//! Every command writes its effective configuration to `<out>/config.toml`;
//! `advfield <command> --config <out>/config.toml --out <elsewhere>` repeats
//! the run. Exit codes: 0 success, 2 configuration error, 3 runtime error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::adversary::{attack_bias_with, attack_morph_with, attack_vat_with};
use crate::config::{parse_override, Profile, RunConfig};
use crate::data::{self, stream_rng, write_pgm, LabelMask, Sample};
use crate::error::{Error, Result};
use crate::eval::{ablate, dump_bias_examples, evaluate_robustness, write_ablation, AblationData};
use crate::segnet::SegNet;
use crate::tensor::Tensor;
use crate::trainer::{train, Mode, TrainData, TrainState};

/// Caps the worker pool when set.
pub const THREADS_ENV: &str = "ADVFIELD_THREADS";

#[derive(Parser, Debug)]
#[command(name = "advfield", version, about = "Adversarial bias-field and morphological augmentation for segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Common {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Config file of dotted `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = ["desk", "paper"])]
    pub profile: Option<String>,
    /// Global seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic annulus segmentation dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: Option<u64>,
    },
    /// Pretrain with random augmentation, then finetune with a consistency term.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_parser = ["none", "bias", "morph", "vat", "random-bias"])]
        attack: Option<String>,
        #[arg(long)]
        pretrain_iters: Option<usize>,
        #[arg(long)]
        finetune_iters: Option<usize>,
        /// Continue from `<out>/state`.
        #[arg(long)]
        resume: bool,
    },
    /// Construct adversarial examples against a checkpoint.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "bias")]
        kind: KindArg,
        /// Attack at most this many samples.
        #[arg(long, default_value_t = 8)]
        limit: usize,
    },
    /// Dice of a checkpoint on the test split, clean and under perturbation.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated subset of `bias,morph`, or `none`.
        #[arg(long)]
        attacks: Option<String>,
        /// Write PGM previews of this many attacked test samples.
        #[arg(long, default_value_t = 0)]
        dump: usize,
    },
    /// Train a grid of attack x contour-weight x seed cells and compare them.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated consistency kinds.
        #[arg(long)]
        attacks: Option<String>,
        /// Comma-separated contour weights.
        #[arg(long)]
        weights: Option<String>,
        /// Comma-separated seeds.
        #[arg(long)]
        seeds: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Supervised,
    Semi,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KindArg {
    Bias,
    Morph,
    Vat,
}

/// Parses the process arguments, runs the command and maps the outcome to
/// an exit code.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match configure_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("advfield: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    if e.is_config_error() {
        2
    } else {
        3
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // A pool built earlier in this process keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, count } => {
            let extra = count.map(|c| ("synth.count".to_string(), c.to_string()));
            let cfg = resolve(&common, extra.into_iter().collect())?;
            cmd_synth(&cfg, &common.out)
        }
        Command::Train { common, data, mode, attack, pretrain_iters, finetune_iters, resume } => {
            let mut extra = data_override(data.as_deref(), "input.data");
            if let Some(m) = mode {
                let m = match m {
                    ModeArg::Supervised => Mode::Supervised,
                    ModeArg::Semi => Mode::SemiSupervised,
                };
                extra.push(("train.mode".into(), quoted(m.as_str())));
            }
            if let Some(a) = attack {
                extra.push(("train.attack".into(), quoted(&a)));
            }
            if let Some(n) = pretrain_iters {
                extra.push(("train.pretrain_iters".into(), n.to_string()));
            }
            if let Some(n) = finetune_iters {
                extra.push(("train.finetune_iters".into(), n.to_string()));
            }
            let cfg = resolve(&common, extra)?;
            cmd_train(&cfg, &common.out, resume)
        }
        Command::Attack { common, data, checkpoint, kind, limit } => {
            let mut extra = data_override(data.as_deref(), "input.data");
            extra.extend(data_override(checkpoint.as_deref(), "input.checkpoint"));
            let cfg = resolve(&common, extra)?;
            cmd_attack(&cfg, &common.out, kind, limit)
        }
        Command::Eval { common, data, checkpoint, attacks, dump } => {
            let mut extra = data_override(data.as_deref(), "input.data");
            extra.extend(data_override(checkpoint.as_deref(), "input.checkpoint"));
            if let Some(a) = attacks {
                let v = if a.trim() == "none" { "[]".to_string() } else { a };
                extra.push(("eval.attacks".into(), v));
            }
            let cfg = resolve(&common, extra)?;
            cmd_eval(&cfg, &common.out, dump)
        }
        Command::Ablate { common, data, attacks, weights, seeds } => {
            let mut extra = data_override(data.as_deref(), "input.data");
            for (k, v) in [("ablate.attacks", attacks), ("ablate.weights", weights), ("ablate.seeds", seeds)] {
                if let Some(v) = v {
                    extra.push((k.into(), v));
                }
            }
            let cfg = resolve(&common, extra)?;
            cmd_ablate(&cfg, &common.out)
        }
    }
}

fn quoted(s: &str) -> String {
    format!("{s:?}")
}

fn data_override(path: Option<&Path>, key: &str) -> Vec<(String, String)> {
    path.map(|p| (key.to_string(), quoted(&p.to_string_lossy()))).into_iter().collect()
}

/// Config file, then `--set`, then `--seed`, then the command's own flags.
fn resolve(common: &Common, extra: Vec<(String, String)>) -> Result<RunConfig> {
    let profile = common.profile.as_deref().map(str::parse::<Profile>).transpose()?;
    let mut overrides: Vec<(String, String)> = common.set.iter().map(|s| parse_override(s)).collect::<Result<_>>()?;
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    overrides.extend(extra);
    RunConfig::resolve(profile, common.config.as_deref(), &overrides)
}

fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.write(out.join("config.toml"))
}

fn input<'a>(path: &'a Option<String>, what: &str, flag: &str) -> Result<&'a Path> {
    path.as_deref()
        .map(Path::new)
        .ok_or_else(|| Error::Config(format!("no {what} given (use {flag} or input.{what} in the config)")))
}

fn load_dataset(cfg: &RunConfig) -> Result<Vec<Sample>> {
    let dir = input(&cfg.data, "data", "--data")?;
    if !dir.join("manifest.json").is_file() {
        return Err(Error::Config(format!("no dataset at {}", dir.display())));
    }
    let samples = data::load(dir)?;
    if samples.is_empty() {
        return Err(Error::Config(format!("dataset at {} is empty", dir.display())));
    }
    Ok(samples)
}

fn load_checkpoint(cfg: &RunConfig, extent: (usize, usize)) -> Result<SegNet> {
    let dir = input(&cfg.checkpoint, "checkpoint", "--checkpoint")?;
    let (net, _) = SegNet::load_checkpoint(dir)?;
    let c = net.config();
    if (c.height, c.width) != extent {
        return Err(Error::Config(format!(
            "checkpoint expects {}x{} images but the dataset holds {}x{}",
            c.height, c.width, extent.0, extent.1
        )));
    }
    Ok(net)
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let synth = cfg.synth_config();
    let samples = data::generate(&synth, cfg.count)?;
    prepare_out(cfg, out)?;
    data::save(&samples, out, Some(&synth))?;
    println!("wrote {} samples ({}x{}) to {}", samples.len(), synth.height, synth.width, out.display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: bool) -> Result<()> {
    let samples = load_dataset(cfg)?;
    let splits = data::split(&samples, cfg.split, cfg.seed)?;
    let (h, w) = samples[0].extent();
    let tcfg = cfg.train_config();
    let state_dir = out.join("state");
    let log = out.join("log.csv");
    let mut state = if resume {
        TrainState::load(&state_dir)?
    } else {
        if log.exists() || state_dir.exists() {
            return Err(Error::Config(format!("{} already holds a run; pass --resume or pick a new --out", out.display())));
        }
        TrainState::new(SegNet::new(cfg.net_config(h, w))?, cfg.seed)
    };
    prepare_out(cfg, out)?;
    let unlabelled = match tcfg.mode {
        Mode::Supervised => &[][..],
        Mode::SemiSupervised => &splits.unlabelled[..],
    };
    let data = TrainData { labelled: &splits.train, unlabelled, val: &splits.val };
    let result = train(&tcfg, &mut state, data, Some(&log));
    // Keep whatever was reached, including on divergence.
    state.save(&state_dir)?;
    let best = state.best.as_ref().map_or(state.iteration, |b| b.iteration);
    state.best_net().save_checkpoint(out.join("best"), best as u64)?;
    result?;
    let last = state.history.last();
    println!(
        "trained {} iterations; final loss {}; best val dice {}",
        state.iteration,
        last.map_or("-".into(), |r| format!("{:.5}", r.loss_total)),
        state.best.as_ref().map_or("-".into(), |b| format!("{:.4} at {}", b.val_dice, b.iteration)),
    );
    Ok(())
}

pub fn cmd_attack(cfg: &RunConfig, out: &Path, kind: KindArg, limit: usize) -> Result<()> {
    let samples = load_dataset(cfg)?;
    let net = load_checkpoint(cfg, samples[0].extent())?;
    let acfg = cfg.attack_config();
    acfg.validate()?;
    prepare_out(cfg, out)?;
    let classes = (net.config().classes - 1).max(1) as f64;
    let as_image = |m: &LabelMask| m.to_tensor().scale(1.0 / classes);
    let mut table = String::from("id,labelled,objective,zero_gradient\n");
    for (i, s) in samples.iter().take(limit).enumerate() {
        let mut rng = stream_rng(acfg.seed, i as u64);
        // Only the image is read: unlabelled samples go through the same path.
        let (field, attacked, objective, zero) = match kind {
            KindArg::Bias => {
                let a = attack_bias_with(&net, &s.image, &acfg, &mut rng)?;
                (a.field.into_phi(), a.image, a.distance, a.zero_gradient)
            }
            KindArg::Morph => {
                let a = attack_morph_with(&net, &s.image, &acfg, &mut rng)?;
                (a.velocity.v().clone(), a.image, a.objective, a.zero_gradient)
            }
            KindArg::Vat => {
                let a = attack_vat_with(&net, &s.image, acfg.epsilon, &mut rng)?;
                let moved = s.image.add(&a.noise)?;
                let kl = crate::adversary::noise_kl(&net, &s.image, &a.noise)?;
                (a.noise, moved, kl, a.zero_gradient)
            }
        };
        let dir = out.join(&s.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let clean_pred = net.predict(&s.image)?;
        let attacked_pred = net.predict(&attacked)?;
        let write = |name: &str, t: &Tensor| t.save(dir.join(format!("{name}.advf")));
        write("image", &s.image)?;
        write("attacked", &attacked)?;
        write("field", &field)?;
        write("clean_pred", &clean_pred)?;
        write("attacked_pred", &attacked_pred)?;
        write_pgm(&s.image, dir.join("image.pgm"))?;
        write_pgm(&attacked, dir.join("attacked.pgm"))?;
        write_pgm(&as_image(&LabelMask::argmax(&clean_pred)?)?, dir.join("clean_pred.pgm"))?;
        write_pgm(&as_image(&LabelMask::argmax(&attacked_pred)?)?, dir.join("attacked_pred.pgm"))?;
        writeln!(table, "{},{},{objective:?},{zero}", s.id, s.is_labelled()).expect("writing to a String");
    }
    let path = out.join("attack.csv");
    fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
    println!("attacked {} samples; results in {}", samples.len().min(limit), out.display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path, dump: usize) -> Result<()> {
    let samples = load_dataset(cfg)?;
    let net = load_checkpoint(cfg, samples[0].extent())?;
    let splits = data::split(&samples, cfg.split, cfg.seed)?;
    if splits.test.is_empty() {
        return Err(Error::Config("the test split is empty; raise split.test".into()));
    }
    let ecfg = cfg.eval_config();
    prepare_out(cfg, out)?;
    let report = evaluate_robustness(&net, &splits.test, &ecfg)?;
    report.write(out)?;
    if dump > 0 {
        dump_bias_examples(&net, &splits.test, &ecfg.attack, out.join("preview"), dump)?;
    }
    print!("{}", report.summary());
    Ok(())
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let samples = load_dataset(cfg)?;
    let splits = data::split(&samples, cfg.split, cfg.seed)?;
    let (h, w) = samples[0].extent();
    let cells = cfg.ablation_cells(h, w);
    let unlabelled = match cfg.train.mode {
        Mode::Supervised => &[][..],
        Mode::SemiSupervised => &splits.unlabelled[..],
    };
    let data = AblationData {
        train: TrainData { labelled: &splits.train, unlabelled, val: &splits.val },
        test: &splits.test,
    };
    prepare_out(cfg, out)?;
    let rows = ablate(&cells, data, &cfg.ablate.corruption)?;
    write_ablation(&rows, out)?;
    print!("{}", crate::eval::ablation_summary(&rows));
    if let Some(r) = rows.iter().find(|r| r.error.is_some()) {
        return Err(Error::invalid(format!("cell {} seed {} failed: {}", r.cell, r.seed, r.error.as_deref().unwrap_or(""))));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("advfield").chain(args.iter().copied()))
    }

    #[test]
    fn count_zero_is_a_usage_error() {
        let e = parse(&["synth", "--out", "x", "--count", "0"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn flags_override_set_and_file() {
        let Command::Train { common, .. } =
            parse(&["train", "--out", "o", "--set", "seed=3", "--seed", "5", "--set", "train.batch_size=2"]).unwrap().command
        else {
            panic!("expected train");
        };
        let cfg = resolve(&common, vec![("train.finetune_iters".into(), "0".into())]).unwrap();
        assert_eq!((cfg.seed, cfg.train.batch_size, cfg.train.finetune_iters), (5, 2, 0));
    }

    #[test]
    fn config_errors_map_to_exit_two() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Diverged { iteration: 1, loss: f64::NAN }), 3);
        let Command::Train { common, .. } = parse(&["train", "--out", "o", "--set", "bogus.key=1"]).unwrap().command else {
            panic!("expected train");
        };
        assert_eq!(exit_code(&resolve(&common, vec![]).unwrap_err()), 2);
    }

    #[test]
    fn missing_dataset_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { data: Some(dir.path().join("nope").to_string_lossy().into()), ..RunConfig::profile(Profile::Desk) };
        assert!(cmd_train(&cfg, &dir.path().join("out"), false).unwrap_err().is_config_error());
    }
}
