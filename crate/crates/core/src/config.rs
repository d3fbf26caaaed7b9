//! Run configuration: flat dotted `key = value` text, named profiles and
//! `--set` style overrides.
//!
//! A config is resolved in layers: profile defaults, then a config file,
//! then overrides. [`RunConfig::to_text`] writes every key, so the emitted
//! text alone reproduces the run.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use toml::{Table, Value};

use crate::adversary::AttackConfig;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::eval::{AblationCell, AblationConfig, EvalAttack, EvalConfig};
use crate::segnet::SegNetConfig;
use crate::trainer::{AttackKind, Consistency, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::Config(format!("unknown profile `{s}` (desk|paper)"))),
        }
    }
}

impl FromStr for EvalAttack {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bias" => Ok(EvalAttack::Bias),
            "morph" => Ok(EvalAttack::Morph),
            _ => Err(Error::Config(format!("unknown eval attack `{s}` (bias|morph)"))),
        }
    }
}

fn eval_attack_str(a: EvalAttack) -> &'static str {
    match a {
        EvalAttack::Bias => "bias",
        EvalAttack::Morph => "morph",
    }
}

/// Network architecture; extents come from the dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct NetSettings {
    pub classes: usize,
    pub widths: Vec<usize>,
    pub depth: usize,
    pub convs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblateSettings {
    pub attacks: Vec<AttackKind>,
    pub weights: Vec<f64>,
    pub seeds: Vec<u64>,
    pub corruption: AblationConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    /// Dataset directory read by train, attack, eval and ablate.
    pub data: Option<String>,
    /// Checkpoint directory read by attack and eval.
    pub checkpoint: Option<String>,
    pub count: usize,
    /// Fractions for (train, val, test, unlabelled).
    pub split: [f64; 4],
    pub synth: SynthConfig,
    pub net: NetSettings,
    pub train: TrainConfig,
    pub eval_attacks: Vec<EvalAttack>,
    pub eval_trials: usize,
    pub ablate: AblateSettings,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let train = match profile {
            Profile::Desk => TrainConfig::desk(),
            Profile::Paper => TrainConfig::paper(),
        };
        Self {
            profile,
            seed: 0,
            data: None,
            checkpoint: None,
            count: 60,
            split: [0.4, 0.1, 0.3, 0.2],
            synth: SynthConfig::default(),
            net: NetSettings { classes: 2, widths: vec![8, 16, 32], depth: 2, convs: 2 },
            train,
            eval_attacks: vec![EvalAttack::Bias, EvalAttack::Morph],
            eval_trials: 4,
            ablate: AblateSettings {
                attacks: vec![AttackKind::None, AttackKind::RandomBias, AttackKind::Bias],
                weights: vec![0.5],
                seeds: vec![0, 1, 2],
                corruption: AblationConfig::default(),
            },
        }
    }

    /// Profile defaults, then the file (if any), then `overrides` in order.
    /// A `profile` key in the file is honoured unless `profile` is given.
    pub fn resolve(profile: Option<Profile>, file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let file_entries = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                parse_entries(&text)?
            }
            None => Vec::new(),
        };
        let file_profile = file_entries
            .iter()
            .find(|(k, _)| k == "profile")
            .map(|(_, v)| as_str("profile", v).and_then(Profile::from_str))
            .transpose()?;
        let mut cfg = Self::profile(profile.or(file_profile).unwrap_or(Profile::Desk));
        for (k, v) in &file_entries {
            if k != "profile" {
                cfg.set(k, v)?;
            }
        }
        for (k, raw) in overrides {
            if k == "profile" {
                return Err(Error::Config("select the profile with --profile, not an override".into()));
            }
            cfg.set(k, &parse_value(raw))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let entries = parse_entries(text)?;
        let profile = entries
            .iter()
            .find(|(k, _)| k == "profile")
            .map(|(_, v)| as_str("profile", v).and_then(Profile::from_str))
            .transpose()?;
        let mut cfg = Self::profile(profile.unwrap_or(Profile::Desk));
        for (k, v) in entries.iter().filter(|(k, _)| k != "profile") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one dotted key. Unknown keys and ill-typed values are config
    /// errors.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let s = &mut self.synth;
        let t = &mut self.train;
        let a = &mut t.consistency.attack;
        let g = &mut t.augment;
        match key {
            "profile" => return Err(Error::Config("`profile` can only be set as a whole".into())),
            "seed" => self.seed = as_u64(key, v)?,
            "input.data" => self.data = Some(as_str(key, v)?.to_string()),
            "input.checkpoint" => self.checkpoint = Some(as_str(key, v)?.to_string()),
            "synth.count" => self.count = as_usize(key, v)?,
            "synth.extent" => {
                // Rescales the geometry to an n x n frame; intensities are kept.
                let n = as_usize(key, v)?;
                let g = SynthConfig::for_extent(n, n);
                s.height = n;
                s.width = n;
                s.center_jitter = g.center_jitter;
                s.outer_radius = g.outer_radius;
                s.thickness = g.thickness;
                s.texture_sigma = g.texture_sigma;
            }
            "synth.height" => s.height = as_usize(key, v)?,
            "synth.width" => s.width = as_usize(key, v)?,
            "synth.center_jitter" => s.center_jitter = as_f64(key, v)?,
            "synth.outer_radius" => s.outer_radius = as_pair(key, v)?,
            "synth.thickness" => s.thickness = as_pair(key, v)?,
            "synth.ring_intensity" => s.ring_intensity = as_pair(key, v)?,
            "synth.pool_intensity" => s.pool_intensity = as_pair(key, v)?,
            "synth.background_intensity" => s.background_intensity = as_pair(key, v)?,
            "synth.texture_sigma" => s.texture_sigma = as_f64(key, v)?,
            "synth.texture_amplitude" => s.texture_amplitude = as_f64(key, v)?,
            "synth.noise_level" => s.noise_level = as_f64(key, v)?,
            "split.train" => self.split[0] = as_f64(key, v)?,
            "split.val" => self.split[1] = as_f64(key, v)?,
            "split.test" => self.split[2] = as_f64(key, v)?,
            "split.unlabelled" => self.split[3] = as_f64(key, v)?,
            "net.classes" => self.net.classes = as_usize(key, v)?,
            "net.widths" => self.net.widths = as_list(key, v, as_usize)?,
            "net.depth" => self.net.depth = as_usize(key, v)?,
            "net.convs" => self.net.convs = as_usize(key, v)?,
            "train.pretrain_iters" => t.pretrain_iters = as_usize(key, v)?,
            "train.pretrain_lr" => t.pretrain_lr = as_f64(key, v)?,
            "train.finetune_iters" => t.finetune_iters = as_usize(key, v)?,
            "train.finetune_lr" => t.finetune_lr = as_f64(key, v)?,
            "train.batch_size" => t.batch_size = as_usize(key, v)?,
            "train.lambda_l" => t.lambda_l = as_f64(key, v)?,
            "train.lambda_u" => t.lambda_u = as_f64(key, v)?,
            "train.mode" => t.mode = as_str(key, v)?.parse()?,
            "train.attack" => t.consistency.kind = as_str(key, v)?.parse()?,
            "train.val_every" => t.val_every = as_usize(key, v)?,
            "attack.iterations" => a.iterations = as_usize(key, v)?,
            "attack.xi" => a.xi = as_f64(key, v)?,
            "attack.alpha" => a.alpha = as_f64(key, v)?,
            "attack.epsilon" => a.epsilon = as_f64(key, v)?,
            "attack.w" => a.w = as_f64(key, v)?,
            "attack.grid" => a.grid = as_usize(key, v)?,
            "attack.morph.sigma_velocity" => a.morph.sigma_velocity = as_f64(key, v)?,
            "attack.morph.sigma_displacement" => a.morph.sigma_displacement = as_f64(key, v)?,
            "attack.morph.steps" => a.morph.steps = as_usize(key, v)?,
            "attack.morph.beta" => a.morph.beta = as_f64(key, v)?,
            "augment.scale" => g.scale = as_f64(key, v)?,
            "augment.rotation_deg" => g.rotation_deg = as_f64(key, v)?,
            "augment.translation_px" => g.translation_px = as_f64(key, v)?,
            "augment.flip_x_prob" => g.flip_x_prob = as_f64(key, v)?,
            "augment.flip_y_prob" => g.flip_y_prob = as_f64(key, v)?,
            "augment.brightness" => g.brightness = as_f64(key, v)?,
            "augment.contrast" => g.contrast = as_f64(key, v)?,
            "augment.elastic_sigma" => g.elastic_sigma = as_f64(key, v)?,
            "augment.elastic_magnitude" => g.elastic_magnitude = as_f64(key, v)?,
            "eval.attacks" => self.eval_attacks = as_list(key, v, |k, x| as_str(k, x)?.parse())?,
            "eval.trials" => self.eval_trials = as_usize(key, v)?,
            "ablate.attacks" => self.ablate.attacks = as_list(key, v, |k, x| as_str(k, x)?.parse())?,
            "ablate.weights" => self.ablate.weights = as_list(key, v, as_f64)?,
            "ablate.seeds" => self.ablate.seeds = as_list(key, v, as_u64)?,
            "ablate.corruption_alpha" => self.ablate.corruption.corruption_alpha = as_f64(key, v)?,
            "ablate.corruption_grid" => self.ablate.corruption.corruption_grid = as_usize(key, v)?,
            "ablate.corruption_trials" => self.ablate.corruption.corruption_trials = as_usize(key, v)?,
            "ablate.corruption_seed" => self.ablate.corruption.corruption_seed = as_u64(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its value rendered as a config literal.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.synth;
        let t = &self.train;
        let a = &t.consistency.attack;
        let g = &t.augment;
        let f = |x: f64| format!("{x:?}");
        let q = |x: &str| format!("{x:?}");
        let pair = |p: [f64; 2]| format!("[{:?}, {:?}]", p[0], p[1]);
        let list = |items: Vec<String>| format!("[{}]", items.join(", "));
        let mut e = vec![("profile", q(self.profile.as_str())), ("seed", self.seed.to_string())];
        if let Some(d) = &self.data {
            e.push(("input.data", q(d)));
        }
        if let Some(c) = &self.checkpoint {
            e.push(("input.checkpoint", q(c)));
        }
        e.extend([
            ("synth.count", self.count.to_string()),
            ("synth.height", s.height.to_string()),
            ("synth.width", s.width.to_string()),
            ("synth.center_jitter", f(s.center_jitter)),
            ("synth.outer_radius", pair(s.outer_radius)),
            ("synth.thickness", pair(s.thickness)),
            ("synth.ring_intensity", pair(s.ring_intensity)),
            ("synth.pool_intensity", pair(s.pool_intensity)),
            ("synth.background_intensity", pair(s.background_intensity)),
            ("synth.texture_sigma", f(s.texture_sigma)),
            ("synth.texture_amplitude", f(s.texture_amplitude)),
            ("synth.noise_level", f(s.noise_level)),
            ("split.train", f(self.split[0])),
            ("split.val", f(self.split[1])),
            ("split.test", f(self.split[2])),
            ("split.unlabelled", f(self.split[3])),
            ("net.classes", self.net.classes.to_string()),
            ("net.widths", list(self.net.widths.iter().map(|w| w.to_string()).collect())),
            ("net.depth", self.net.depth.to_string()),
            ("net.convs", self.net.convs.to_string()),
            ("train.pretrain_iters", t.pretrain_iters.to_string()),
            ("train.pretrain_lr", f(t.pretrain_lr)),
            ("train.finetune_iters", t.finetune_iters.to_string()),
            ("train.finetune_lr", f(t.finetune_lr)),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lambda_l", f(t.lambda_l)),
            ("train.lambda_u", f(t.lambda_u)),
            ("train.mode", q(t.mode.as_str())),
            ("train.attack", q(t.consistency.kind.as_str())),
            ("train.val_every", t.val_every.to_string()),
            ("attack.iterations", a.iterations.to_string()),
            ("attack.xi", f(a.xi)),
            ("attack.alpha", f(a.alpha)),
            ("attack.epsilon", f(a.epsilon)),
            ("attack.w", f(a.w)),
            ("attack.grid", a.grid.to_string()),
            ("attack.morph.sigma_velocity", f(a.morph.sigma_velocity)),
            ("attack.morph.sigma_displacement", f(a.morph.sigma_displacement)),
            ("attack.morph.steps", a.morph.steps.to_string()),
            ("attack.morph.beta", f(a.morph.beta)),
            ("augment.scale", f(g.scale)),
            ("augment.rotation_deg", f(g.rotation_deg)),
            ("augment.translation_px", f(g.translation_px)),
            ("augment.flip_x_prob", f(g.flip_x_prob)),
            ("augment.flip_y_prob", f(g.flip_y_prob)),
            ("augment.brightness", f(g.brightness)),
            ("augment.contrast", f(g.contrast)),
            ("augment.elastic_sigma", f(g.elastic_sigma)),
            ("augment.elastic_magnitude", f(g.elastic_magnitude)),
            ("eval.attacks", list(self.eval_attacks.iter().map(|&k| q(eval_attack_str(k))).collect())),
            ("eval.trials", self.eval_trials.to_string()),
            ("ablate.attacks", list(self.ablate.attacks.iter().map(|k| q(k.as_str())).collect())),
            ("ablate.weights", list(self.ablate.weights.iter().map(|&w| f(w)).collect())),
            ("ablate.seeds", list(self.ablate.seeds.iter().map(|s| s.to_string()).collect())),
            ("ablate.corruption_alpha", f(self.ablate.corruption.corruption_alpha)),
            ("ablate.corruption_grid", self.ablate.corruption.corruption_grid.to_string()),
            ("ablate.corruption_trials", self.ablate.corruption.corruption_trials.to_string()),
            ("ablate.corruption_seed", self.ablate.corruption.corruption_seed.to_string()),
        ]);
        e
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").expect("writing to a String");
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_config().validate()?;
        self.train_config().validate()?;
        if self.count == 0 {
            return Err(Error::Config("synth.count must be >= 1".into()));
        }
        if self.split.iter().any(|f| !(0.0..=1.0).contains(f)) || self.split.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::Config(format!("split fractions must lie in [0, 1] and sum to <= 1, got {:?}", self.split)));
        }
        // Extents are checked once the dataset is known.
        SegNetConfig { height: 1 << self.net.depth, width: 1 << self.net.depth, ..self.net_config(0, 0) }.validate()?;
        if self.eval_trials == 0 {
            return Err(Error::Config("eval.trials must be >= 1".into()));
        }
        let ab = &self.ablate;
        if ab.attacks.is_empty() || ab.weights.is_empty() || ab.seeds.is_empty() {
            return Err(Error::Config("ablate.attacks, ablate.weights and ablate.seeds must be non-empty".into()));
        }
        if let Some(w) = ab.weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("ablate.weights must be >= 0, got {w}")));
        }
        let c = &ab.corruption;
        if !(c.corruption_alpha > 0.0 && c.corruption_alpha < 1.0) || c.corruption_grid < 2 || c.corruption_trials == 0 {
            return Err(Error::Config("ablate.corruption_* needs alpha in (0, 1), grid >= 2 and trials >= 1".into()));
        }
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig { seed: self.seed, ..self.synth.clone() }
    }

    pub fn net_config(&self, height: usize, width: usize) -> SegNetConfig {
        SegNetConfig {
            height,
            width,
            classes: self.net.classes,
            widths: self.net.widths.clone(),
            depth: self.net.depth,
            convs: self.net.convs,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        t.augment.classes = self.net.classes;
        t.augment.seed = self.seed;
        t.consistency.attack.seed = self.seed;
        t
    }

    pub fn attack_config(&self) -> AttackConfig {
        self.train_config().consistency.attack
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig { attacks: self.eval_attacks.clone(), trials: self.eval_trials, attack: self.attack_config(), seed: self.seed }
    }

    /// The attack x weight x seed grid, named `<attack>-w<weight>`.
    pub fn ablation_cells(&self, height: usize, width: usize) -> Vec<AblationCell> {
        let mut cells = Vec::new();
        for &kind in &self.ablate.attacks {
            for &w in &self.ablate.weights {
                for &seed in &self.ablate.seeds {
                    let mut run = RunConfig { seed, ..self.clone() };
                    run.train.consistency = Consistency { kind, attack: AttackConfig { w, ..run.train.consistency.attack } };
                    cells.push(AblationCell {
                        name: format!("{}-w{w}", kind.as_str()),
                        net: run.net_config(height, width),
                        train: run.train_config(),
                    });
                }
            }
        }
        cells
    }
}

/// Parses config text into flattened `(dotted key, value)` pairs.
pub fn parse_entries(text: &str) -> Result<Vec<(String, Value)>> {
    let table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(format!("config syntax: {}", e.message())))?;
    let mut out = Vec::new();
    flatten("", &table, &mut out);
    Ok(out)
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            _ => out.push((key, v.clone())),
        }
    }
}

/// An override value: a config literal, or a bare word read as a string.
pub fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Splits `key=value` into its parts.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config(format!("override `{s}` is not key=value"))),
    }
}

fn type_error(key: &str, want: &str, v: &Value) -> Error {
    Error::Config(format!("`{key}` expects {want}, got `{v}`"))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(x) => Ok(*x),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(type_error(key, "a number", v)),
    }
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(type_error(key, "a non-negative integer", v)),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    as_u64(key, v).map(|x| x as usize)
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| type_error(key, "a string", v))
}

fn as_list<T>(key: &str, v: &Value, item: impl Fn(&str, &Value) -> Result<T>) -> Result<Vec<T>> {
    match v {
        Value::Array(xs) => xs.iter().map(|x| item(key, x)).collect(),
        // Overrides may spell lists as `bias,morph` or a single item.
        Value::String(s) => s.split(',').map(|x| item(key, &parse_value(x.trim()))).collect(),
        Value::Table(_) => Err(type_error(key, "a list", v)),
        scalar => Ok(vec![item(key, scalar)?]),
    }
}

fn as_pair(key: &str, v: &Value) -> Result<[f64; 2]> {
    match as_list(key, v, as_f64)?.as_slice() {
        &[a, b] => Ok([a, b]),
        _ => Err(type_error(key, "a two-element list", v)),
    }
}
