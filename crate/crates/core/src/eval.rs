//! Dice scores, robustness reports and ablation tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::{attack_bias_with, attack_morph_with, AttackConfig};
use crate::data::{stream_rng, write_pgm, LabelMask, LabelledSample, Sample};
use crate::error::{Error, Result};
use crate::segnet::{SegNet, SegNetConfig};
use crate::tensor::Tensor;
use crate::trainer::{csv_error, train, TrainConfig, TrainData, TrainState};
use crate::transforms::bias::{apply_bias, random_bias};
use crate::transforms::svf::{project_velocity, random_velocity, realize_deformation, warp, warp_labels};

/// `2|A ∩ B| / (|A| + |B|)` for one class; two empty masks score 1.
pub fn dice(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<f64> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::shape(format!(
            "dice: {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let (ip, ig) = (p == class, g == class);
        a += ip as usize;
        b += ig as usize;
        both += (ip && ig) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Mean Dice over classes `1..classes`.
pub fn foreground_dice(pred: &LabelMask, gt: &LabelMask, classes: usize) -> Result<f64> {
    let mut s = 0.0;
    for c in 1..classes {
        s += dice(pred, gt, c as u8)?;
    }
    Ok(s / (classes - 1) as f64)
}

/// Mean foreground Dice of the net's argmax predictions over `samples`.
pub fn mean_foreground_dice(net: &SegNet, samples: &[LabelledSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    let classes = net.config().classes;
    let scores: Vec<f64> = samples
        .par_iter()
        .map(|s| foreground_dice(&net.segment(&s.image)?, &s.mask, classes))
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Mean foreground Dice under `trials` random bias fields per sample.
/// Sample `i` draws its fields from stream `i` of `seed`.
pub fn corrupted_dice(net: &SegNet, samples: &[LabelledSample], alpha: f64, grid: usize, trials: usize, seed: u64) -> Result<f64> {
    if samples.is_empty() || trials == 0 {
        return Err(Error::invalid("corrupted_dice needs samples and trials >= 1"));
    }
    let classes = net.config().classes;
    let scores: Vec<f64> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let (h, w) = s.image.spatial()?;
            let mut rng = stream_rng(seed, i as u64);
            let mut acc = 0.0;
            for _ in 0..trials {
                let field = random_bias(&mut rng, alpha, grid, h, w)?;
                acc += foreground_dice(&net.segment(&apply_bias(&s.image, &field)?)?, &s.mask, classes)?;
            }
            Ok(acc / trials as f64)
        })
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalAttack {
    Bias,
    Morph,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub attacks: Vec<EvalAttack>,
    /// Random draws per sample for the random-perturbation columns.
    pub trials: usize,
    pub attack: AttackConfig,
    pub seed: u64,
}

impl EvalConfig {
    /// Stable `key=value` text, the input to the report fingerprint.
    pub fn canonical(&self) -> String {
        let a = &self.attack;
        let attacks: Vec<&str> = self
            .attacks
            .iter()
            .map(|k| match k {
                EvalAttack::Bias => "bias",
                EvalAttack::Morph => "morph",
            })
            .collect();
        let mut s = String::new();
        for (k, v) in [
            ("eval.attacks", attacks.join(",")),
            ("eval.trials", self.trials.to_string()),
            ("eval.seed", self.seed.to_string()),
            ("attack.iterations", a.iterations.to_string()),
            ("attack.xi", format!("{:?}", a.xi)),
            ("attack.alpha", format!("{:?}", a.alpha)),
            ("attack.w", format!("{:?}", a.w)),
            ("attack.grid", a.grid.to_string()),
            ("attack.beta", format!("{:?}", a.morph.beta)),
            ("attack.sigma_velocity", format!("{:?}", a.morph.sigma_velocity)),
            ("attack.sigma_displacement", format!("{:?}", a.morph.sigma_displacement)),
            ("attack.steps", a.morph.steps.to_string()),
            ("attack.seed", a.seed.to_string()),
        ] {
            writeln!(s, "{k}={v}").expect("writing to a String");
        }
        s
    }
}

/// Hex SHA-256 of `text`.
pub fn fingerprint(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Per-sample Dice scores; perturbation columns are empty when that attack
/// was not requested.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub clean: f64,
    pub random_bias: Option<f64>,
    pub adv_bias: Option<f64>,
    pub random_morph: Option<f64>,
    pub adv_morph: Option<f64>,
    pub zero_gradient: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Aggregate {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt(), count: values.len() })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub fingerprint: String,
}

pub const COLUMNS: [&str; 5] = ["clean", "random_bias", "adv_bias", "random_morph", "adv_morph"];

impl EvalReport {
    pub fn column(&self, name: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter_map(|r| match name {
                "clean" => Some(r.clean),
                "random_bias" => r.random_bias,
                "adv_bias" => r.adv_bias,
                "random_morph" => r.random_morph,
                "adv_morph" => r.adv_morph,
                _ => None,
            })
            .collect()
    }

    /// Aggregates recomputed from the rows.
    pub fn aggregate(&self, name: &str) -> Option<Aggregate> {
        Aggregate::of(&self.column(name))
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        writeln!(s, "samples: {}", self.rows.len()).unwrap();
        writeln!(s, "fingerprint: {}", self.fingerprint).unwrap();
        for c in COLUMNS {
            if let Some(a) = self.aggregate(c) {
                writeln!(s, "{c:<13} mean {:.6}  std {:.6}  n {}", a.mean, a.std, a.count).unwrap();
            }
        }
        let flagged = self.rows.iter().filter(|r| r.zero_gradient).count();
        if flagged > 0 {
            writeln!(s, "zero-gradient attacks: {flagged}").unwrap();
        }
        s
    }

    /// Writes `report.csv` and `summary.txt`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("report.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let path = dir.join("summary.txt");
        fs::write(&path, self.summary()).map_err(|e| Error::io(&path, e))
    }

    pub fn read_rows(path: impl AsRef<Path>) -> Result<Vec<EvalRow>> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
    }
}

fn eval_sample(net: &SegNet, s: &Sample, cfg: &EvalConfig, index: usize) -> Result<EvalRow> {
    let classes = net.config().classes;
    let gt = s.mask.as_ref().ok_or_else(|| Error::invalid(format!("test sample {} has no mask", s.id)))?;
    let (h, w) = s.extent();
    let score = |image: &Tensor, truth: &LabelMask| foreground_dice(&net.segment(image)?, truth, classes);
    let mut rng = stream_rng(cfg.seed, index as u64);
    let a = &cfg.attack;
    let mut row = EvalRow {
        id: s.id.clone(),
        clean: score(&s.image, gt)?,
        random_bias: None,
        adv_bias: None,
        random_morph: None,
        adv_morph: None,
        zero_gradient: false,
    };
    for kind in &cfg.attacks {
        match kind {
            EvalAttack::Bias => {
                let mut acc = 0.0;
                for _ in 0..cfg.trials {
                    let field = random_bias(&mut rng, a.alpha, a.grid, h, w)?;
                    acc += score(&apply_bias(&s.image, &field)?, gt)?;
                }
                row.random_bias = Some(acc / cfg.trials as f64);
                let adv = attack_bias_with(net, &s.image, a, &mut rng)?;
                row.zero_gradient |= adv.zero_gradient;
                row.adv_bias = Some(score(&adv.image, gt)?);
            }
            EvalAttack::Morph => {
                let mut acc = 0.0;
                for _ in 0..cfg.trials {
                    let raw = random_velocity(&mut rng, h, w, a.morph.sigma_velocity, a.morph.beta)?;
                    let def = realize_deformation(&project_velocity(&raw, &a.morph)?, &a.morph)?;
                    acc += score(&warp(&s.image, &def)?, &warp_labels(gt, &def, classes)?)?;
                }
                row.random_morph = Some(acc / cfg.trials as f64);
                let adv = attack_morph_with(net, &s.image, a, &mut rng)?;
                row.zero_gradient |= adv.zero_gradient;
                row.adv_morph = Some(score(&adv.image, &warp_labels(gt, &adv.deformation, classes)?)?);
            }
        }
    }
    Ok(row)
}

/// Dice of `net` on each labelled test sample, clean and under the
/// requested perturbations. The net is only read.
pub fn evaluate_robustness(net: &SegNet, test: &[Sample], cfg: &EvalConfig) -> Result<EvalReport> {
    if !cfg.attacks.is_empty() {
        if cfg.trials == 0 {
            return Err(Error::Config("eval.trials must be >= 1".into()));
        }
        cfg.attack.validate()?;
    }
    let rows = test
        .par_iter()
        .enumerate()
        .map(|(i, s)| eval_sample(net, s, cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let mut text = cfg.canonical();
    writeln!(text, "net.checksum={:016x}", net_checksum(net)).unwrap();
    Ok(EvalReport { rows, fingerprint: fingerprint(&text) })
}

/// Combined checksum of all parameters.
pub fn net_checksum(net: &SegNet) -> u64 {
    net.params().iter().fold(0xcbf29ce484222325, |h, p| (h ^ p.checksum()).wrapping_mul(0x100000001b3))
}

/// Writes image, clean prediction, attacked image, attacked prediction and
/// bias field as PGMs for up to `limit` samples.
pub fn dump_bias_examples(net: &SegNet, samples: &[Sample], cfg: &AttackConfig, dir: impl AsRef<Path>, limit: usize) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let classes = (net.config().classes - 1).max(1) as f64;
    let as_image = |m: &LabelMask| m.to_tensor().map(|v| v / classes);
    for (i, s) in samples.iter().take(limit).enumerate() {
        let adv = attack_bias_with(net, &s.image, cfg, &mut stream_rng(cfg.seed, i as u64))?;
        let phi = adv.field.phi().map(|v| (v - 1.0 + cfg.alpha) / (2.0 * cfg.alpha))?;
        write_pgm(&s.image, dir.join(format!("{}_image.pgm", s.id)))?;
        write_pgm(&as_image(&net.segment(&s.image)?)?, dir.join(format!("{}_clean_pred.pgm", s.id)))?;
        write_pgm(&adv.image, dir.join(format!("{}_attacked.pgm", s.id)))?;
        write_pgm(&as_image(&net.segment(&adv.image)?)?, dir.join(format!("{}_attacked_pred.pgm", s.id)))?;
        write_pgm(&phi, dir.join(format!("{}_bias_field.pgm", s.id)))?;
    }
    Ok(())
}

/// One training run of an ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub name: String,
    pub net: SegNetConfig,
    pub train: TrainConfig,
}

/// Datasets shared by every cell.
#[derive(Clone, Copy, Debug)]
pub struct AblationData<'a> {
    pub train: TrainData<'a>,
    pub test: &'a [Sample],
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    /// Held-out random bias corruption applied to the test set.
    pub corruption_alpha: f64,
    pub corruption_grid: usize,
    pub corruption_trials: usize,
    pub corruption_seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { corruption_alpha: 0.3, corruption_grid: 4, corruption_trials: 4, corruption_seed: 0x5eed }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub seed: u64,
    pub attack: String,
    pub w: f64,
    /// Dice of the final network on the clean test set.
    pub test_dice: Option<f64>,
    /// Dice of the final network under held-out random bias fields.
    pub corrupted_dice: Option<f64>,
    pub best_val_dice: Option<f64>,
    /// Wall-clock seconds; not written to disk so reruns stay byte-identical.
    #[serde(skip)]
    pub runtime_s: f64,
    pub error: Option<String>,
}

impl PartialEq for AblationRow {
    /// Runtime is excluded: identical runs compare equal.
    fn eq(&self, o: &Self) -> bool {
        (&self.cell, self.seed, &self.attack, self.w.to_bits(), self.test_dice, self.corrupted_dice, self.best_val_dice, &self.error)
            == (&o.cell, o.seed, &o.attack, o.w.to_bits(), o.test_dice, o.corrupted_dice, o.best_val_dice, &o.error)
    }
}

/// Key of everything that determines the state at the end of pretraining.
fn pretrain_key(c: &AblationCell) -> String {
    let t = &c.train;
    format!(
        "{:?}|{}|{:?}|{}|{:?}|{}|{}",
        c.net, t.pretrain_iters, t.pretrain_lr, t.batch_size, t.augment, t.val_every, t.seed
    )
}

fn run_cell(
    cell: &AblationCell,
    data: AblationData<'_>,
    cfg: &AblationConfig,
    cache: &mut Vec<(String, TrainState)>,
) -> Result<AblationRow> {
    let start = Instant::now();
    let key = pretrain_key(cell);
    let mut state = match cache.iter().find(|(k, _)| *k == key) {
        Some((_, s)) => s.clone(),
        None => {
            let mut s = TrainState::new(SegNet::new(cell.net.clone())?, cell.train.seed);
            let pre = TrainConfig { finetune_iters: 0, ..cell.train.clone() };
            // Unlabelled data only enters during finetuning.
            let pre_data = TrainData { unlabelled: &[], ..data.train };
            let pre_cfg = TrainConfig { mode: crate::trainer::Mode::Supervised, ..pre };
            train(&pre_cfg, &mut s, pre_data, None)?;
            cache.push((key, s.clone()));
            s
        }
    };
    train(&cell.train, &mut state, data.train, None)?;
    let test: Vec<LabelledSample> = data.test.iter().map(LabelledSample::try_from).collect::<Result<_>>()?;
    let (test_dice, corrupted) = if test.is_empty() {
        (None, None)
    } else {
        let clean = mean_foreground_dice(&state.net, &test)?;
        let corrupted = corrupted_dice(
            &state.net,
            &test,
            cfg.corruption_alpha,
            cfg.corruption_grid,
            cfg.corruption_trials,
            cfg.corruption_seed,
        )?;
        (Some(clean), Some(corrupted))
    };
    Ok(AblationRow {
        cell: cell.name.clone(),
        seed: cell.train.seed,
        attack: cell.train.consistency.kind.as_str().to_string(),
        w: cell.train.consistency.attack.w,
        test_dice,
        corrupted_dice: corrupted,
        best_val_dice: state.best.as_ref().map(|b| b.val_dice),
        runtime_s: start.elapsed().as_secs_f64(),
        error: None,
    })
}

/// Trains every cell and scores its final network. Cells that share a
/// network config, seed and pretraining settings share one pretraining run.
/// A failing cell yields a row carrying its error; the others still run.
pub fn ablate(cells: &[AblationCell], data: AblationData<'_>, cfg: &AblationConfig) -> Result<Vec<AblationRow>> {
    if cells.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let mut cache = Vec::new();
    Ok(cells
        .iter()
        .map(|cell| {
            let start = Instant::now();
            run_cell(cell, data, cfg, &mut cache).unwrap_or_else(|e| AblationRow {
                cell: cell.name.clone(),
                seed: cell.train.seed,
                attack: cell.train.consistency.kind.as_str().to_string(),
                w: cell.train.consistency.attack.w,
                test_dice: None,
                corrupted_dice: None,
                best_val_dice: None,
                runtime_s: start.elapsed().as_secs_f64(),
                error: Some(e.to_string()),
            })
        })
        .collect())
}

/// Per-cell means over seeds, in first-appearance order.
pub fn ablation_summary(rows: &[AblationRow]) -> String {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.cell.as_str()) {
            names.push(&r.cell);
        }
    }
    let mut s = String::new();
    writeln!(s, "{:<24} {:>5} {:>10} {:>14}", "cell", "runs", "test_dice", "corrupted_dice").unwrap();
    for name in names {
        let of = |f: fn(&AblationRow) -> Option<f64>| {
            let v: Vec<f64> = rows.iter().filter(|r| r.cell == name).filter_map(f).collect();
            Aggregate::of(&v).map_or("-".to_string(), |a| format!("{:.4}", a.mean))
        };
        let runs = rows.iter().filter(|r| r.cell == name).count();
        writeln!(s, "{name:<24} {runs:>5} {:>10} {:>14}", of(|r| r.test_dice), of(|r| r.corrupted_dice)).unwrap();
    }
    s
}

pub fn write_ablation(rows: &[AblationRow], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = dir.join("ablation_summary.txt");
    fs::write(&path, ablation_summary(rows)).map_err(|e| Error::io(&path, e))
}
