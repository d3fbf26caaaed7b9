//! Synthetic annulus segmentation data, splits, and the on-disk dataset
//! layout.
//!
//! Each sample is a smooth textured background with a bright disk ("blood
//! pool") surrounded by a darker ring. The ring is the foreground class.
//!
//! Directory layout written by [`save`]:
//!
//! ```text
//! manifest.json
//! images/<id>.advf
//! masks/<id>.advf          (labelled samples only)
//! preview/<id>.pgm
//! preview/<id>_mask.pgm    (labelled samples only)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transforms::smooth::gaussian_smooth;

/// Per-pixel integer class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "{} labels for a {height}x{width} mask",
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, labels: vec![0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.height, self.width],
            self.labels.iter().map(|&l| l as f64).collect(),
        )
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [h, w] = *t.shape() else {
            return Err(Error::shape(format!("mask tensor must be HxW, got {:?}", t.shape())));
        };
        let labels = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v < 256.0 && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(Error::Format(format!("invalid label value {v}")))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { height: h, width: w, labels })
    }

    /// `C x H x W` indicator channels.
    pub fn one_hot(&self, classes: usize) -> Result<Tensor> {
        if self.max_label() as usize >= classes {
            return Err(Error::invalid(format!(
                "label {} out of range for {classes} classes",
                self.max_label()
            )));
        }
        let hw = self.height * self.width;
        let mut t = Tensor::zeros(&[classes, self.height, self.width]);
        for (p, &l) in self.labels.iter().enumerate() {
            t.data_mut()[l as usize * hw + p] = 1.0;
        }
        Ok(t)
    }

    /// Per-pixel argmax over the leading axis of a `C x H x W` map. Ties go
    /// to the lowest class.
    pub fn argmax(p: &Tensor) -> Result<Self> {
        let [c, h, w] = *p.shape() else {
            return Err(Error::shape(format!("argmax needs CxHxW, got {:?}", p.shape())));
        };
        let hw = h * w;
        let labels = (0..hw)
            .map(|px| {
                let mut best = 0;
                for k in 1..c {
                    if p.data()[k * hw + px] > p.data()[best * hw + px] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        Ok(Self { height: h, width: w, labels })
    }

    pub fn flip_x(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            out.labels[y * self.width..(y + 1) * self.width].reverse();
        }
        out
    }

    pub fn flip_y(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            let src = self.height - 1 - y;
            out.labels[y * self.width..(y + 1) * self.width]
                .copy_from_slice(&self.labels[src * self.width..(src + 1) * self.width]);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    /// `None` for unlabelled samples.
    pub mask: Option<LabelMask>,
    pub meta: BTreeMap<String, String>,
}

impl Sample {
    pub fn extent(&self) -> (usize, usize) {
        self.image.spatial().expect("sample images are HxW")
    }

    pub fn is_labelled(&self) -> bool {
        self.mask.is_some()
    }

    pub fn without_mask(&self) -> Self {
        Self { mask: None, ..self.clone() }
    }
}

/// Image and mask as consumed by the supervised losses.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelledSample {
    pub image: Tensor,
    pub mask: LabelMask,
}

impl TryFrom<&Sample> for LabelledSample {
    type Error = Error;

    fn try_from(s: &Sample) -> Result<Self> {
        let mask = s
            .mask
            .clone()
            .ok_or_else(|| Error::invalid(format!("sample {} has no mask", s.id)))?;
        Ok(Self { image: s.image.clone(), mask })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Maximum offset of the ring center from the frame center, in pixels.
    pub center_jitter: f64,
    pub outer_radius: [f64; 2],
    pub thickness: [f64; 2],
    pub ring_intensity: [f64; 2],
    pub pool_intensity: [f64; 2],
    pub background_intensity: [f64; 2],
    /// Smoothing width of the background texture, in pixels.
    pub texture_sigma: f64,
    pub texture_amplitude: f64,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::for_extent(64, 64)
    }
}

impl SynthConfig {
    /// Defaults scaled to an `h x w` frame; ring thickness stays at least one
    /// pixel. The ring sits in an intensity band between background and pool,
    /// so it is told apart by level as well as by shape.
    pub fn for_extent(h: usize, w: usize) -> Self {
        let s = h.min(w) as f64 / 64.0;
        Self {
            height: h,
            width: w,
            center_jitter: 6.0 * s,
            outer_radius: [12.0 * s, 19.0 * s],
            thickness: [(3.0 * s).max(1.0), (6.0 * s).max(1.5)],
            ring_intensity: [0.55, 0.65],
            pool_intensity: [0.75, 0.95],
            background_intensity: [0.35, 0.45],
            texture_sigma: 3.0 * s,
            texture_amplitude: 0.1,
            noise_level: 0.02,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: &[f64; 2]| r[0] <= r[1] && r.iter().all(|v| v.is_finite());
        for (name, r) in [
            ("outer_radius", &self.outer_radius),
            ("thickness", &self.thickness),
            ("ring_intensity", &self.ring_intensity),
            ("pool_intensity", &self.pool_intensity),
            ("background_intensity", &self.background_intensity),
        ] {
            if !ordered(r) {
                return Err(Error::Config(format!("synth.{name} must be an ordered range")));
            }
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("synth extents must be at least 8".into()));
        }
        if self.thickness[0] < 1.0 {
            return Err(Error::Config("synth.thickness must be at least one pixel".into()));
        }
        if self.thickness[1] >= self.outer_radius[0] {
            return Err(Error::Config("synth.thickness must stay below the outer radius".into()));
        }
        let half = (self.height.min(self.width) as f64 - 1.0) / 2.0;
        if self.center_jitter < 0.0 || self.center_jitter + self.outer_radius[1] + 1.0 > half {
            return Err(Error::Config(format!(
                "ring of radius {} with jitter {} does not fit a {}x{} frame",
                self.outer_radius[1], self.center_jitter, self.height, self.width
            )));
        }
        if self.texture_sigma < 0.0 || self.noise_level < 0.0 || self.texture_amplitude < 0.0 {
            return Err(Error::Config("synth noise parameters must be non-negative".into()));
        }
        Ok(())
    }
}

/// Deterministic per-sample generator: sample `i` draws from stream `i` of a
/// generator keyed by `seed`.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

pub fn generate(cfg: &SynthConfig, count: usize) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    cfg.validate()?;
    (0..count).map(|i| generate_one(cfg, i)).collect()
}

fn generate_one(cfg: &SynthConfig, index: usize) -> Result<Sample> {
    let mut rng = stream_rng(cfg.seed, index as u64);
    loop {
        let sample = draw_sample(cfg, index, &mut rng)?;
        if sample.mask.as_ref().is_some_and(|m| m.count(1) > 0) {
            return Ok(sample);
        }
    }
}

fn draw_sample(cfg: &SynthConfig, index: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (h, w) = (cfg.height, cfg.width);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let offset = cfg.center_jitter * rng.gen_range(0.0f64..1.0).sqrt();
    let cx = (w as f64 - 1.0) / 2.0 + offset * angle.cos();
    let cy = (h as f64 - 1.0) / 2.0 + offset * angle.sin();
    let r_out = draw(rng, cfg.outer_radius);
    let r_in = r_out - draw(rng, cfg.thickness);
    let ring = draw(rng, cfg.ring_intensity);
    let pool = draw(rng, cfg.pool_intensity);
    let bg = draw(rng, cfg.background_intensity);

    let noise = Tensor::from_fn(&[h, w], |_| rng.sample(StandardNormal));
    let texture = if cfg.texture_amplitude > 0.0 {
        let t = gaussian_smooth(&noise, cfg.texture_sigma)?;
        let m = t.max_abs().max(f64::MIN_POSITIVE);
        t.scale(cfg.texture_amplitude / m)?
    } else {
        Tensor::zeros(&[h, w])
    };

    const SUB: usize = 4;
    let mut image = vec![0.0; h * w];
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let background = bg + texture.data()[p];
            let mut acc = 0.0;
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let px = x as f64 + (sx as f64 + 0.5) / SUB as f64 - 0.5;
                    let py = y as f64 + (sy as f64 + 0.5) / SUB as f64 - 0.5;
                    let d = (px - cx).hypot(py - cy);
                    acc += if d < r_in {
                        pool
                    } else if d <= r_out {
                        ring
                    } else {
                        background
                    };
                }
            }
            image[p] = acc / (SUB * SUB) as f64;
            let d = (x as f64 - cx).hypot(y as f64 - cy);
            labels[p] = u8::from(d >= r_in && d <= r_out);
        }
    }
    if cfg.noise_level > 0.0 {
        for v in image.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += cfg.noise_level * n;
        }
    }
    for v in image.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    let mut meta = BTreeMap::new();
    meta.insert("center".into(), format!("{cx:.4},{cy:.4}"));
    meta.insert("radii".into(), format!("{r_in:.4},{r_out:.4}"));
    meta.insert("intensities".into(), format!("{ring:.4},{pool:.4},{bg:.4}"));
    Ok(Sample {
        id: format!("s{index:05}"),
        image: Tensor::new(vec![h, w], image)?,
        mask: Some(LabelMask::new(h, w, labels)?),
        meta,
    })
}

/// Disjoint subsets of a dataset. `unlabelled` samples carry no masks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub unlabelled: Vec<Sample>,
}

/// Shuffled partition with fractions for (train, val, test, unlabelled).
///
/// Each subset gets `floor(fraction * n)` samples, except that leftovers
/// from rounding go to the first subset with a positive fraction. Samples
/// beyond the fraction total are dropped.
pub fn split(dataset: &[Sample], fractions: [f64; 4], seed: u64) -> Result<Splits> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::Config(format!("split fractions out of range: {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if total > 1.0 + 1e-12 {
        return Err(Error::Config(format!("split fractions sum to {total} > 1")));
    }
    let n = dataset.len();
    let mut counts: Vec<usize> = fractions.iter().map(|f| (f * n as f64).floor() as usize).collect();
    let want = ((total * n as f64) + 1e-9).floor() as usize;
    let have: usize = counts.iter().sum();
    if let Some(first) = fractions.iter().position(|&f| f > 0.0) {
        counts[first] += want.saturating_sub(have);
    }
    for (i, (&f, &c)) in fractions.iter().zip(&counts).enumerate() {
        if f > 0.0 && c == 0 {
            return Err(Error::Config(format!(
                "split {i} requested fraction {f} but gets no samples out of {n}"
            )));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut it = order.into_iter();
    let mut take = |c: usize| -> Vec<Sample> { it.by_ref().take(c).map(|i| dataset[i].clone()).collect() };
    let train = take(counts[0]);
    let val = take(counts[1]);
    let test = take(counts[2]);
    let unlabelled = take(counts[3]).iter().map(Sample::without_mask).collect();
    Ok(Splits { train, val, test, unlabelled })
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
    samples: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    height: usize,
    width: usize,
    labelled: bool,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

const MANIFEST_FORMAT: &str = "advfield-dataset";

/// Writes a dataset directory. `config` is echoed into the manifest.
pub fn save(dataset: &[Sample], dir: impl AsRef<Path>, config: Option<&SynthConfig>) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["images", "masks", "preview"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut ids = BTreeSet::new();
    let mut samples = Vec::with_capacity(dataset.len());
    for s in dataset {
        if !ids.insert(&s.id) || s.id.contains(['/', '\\']) || s.id.is_empty() {
            return Err(Error::invalid(format!("invalid or duplicate sample id {:?}", s.id)));
        }
        let (h, w) = s.extent();
        s.image.save(dir.join("images").join(format!("{}.advf", s.id)))?;
        write_pgm(&s.image, dir.join("preview").join(format!("{}.pgm", s.id)))?;
        if let Some(m) = &s.mask {
            m.to_tensor().save(dir.join("masks").join(format!("{}.advf", s.id)))?;
            let scale = 1.0 / f64::from(m.max_label().max(1));
            write_pgm(&m.to_tensor().scale(scale)?, dir.join("preview").join(format!("{}_mask.pgm", s.id)))?;
        }
        samples.push(ManifestEntry {
            id: s.id.clone(),
            height: h,
            width: w,
            labelled: s.mask.is_some(),
            meta: s.meta.clone(),
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        config: config.map(|c| serde_json::to_value(c).expect("config serializes")),
        samples,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != 1 {
        return Err(Error::Format(format!(
            "unsupported manifest {} v{}",
            manifest.format, manifest.version
        )));
    }
    manifest
        .samples
        .into_iter()
        .map(|e| {
            let image = Tensor::load(dir.join("images").join(format!("{}.advf", e.id)))?;
            if image.shape() != [e.height, e.width] {
                return Err(Error::shape(format!(
                    "image {} is {:?}, manifest says {}x{}",
                    e.id,
                    image.shape(),
                    e.height,
                    e.width
                )));
            }
            let mask = if e.labelled {
                let t = Tensor::load(dir.join("masks").join(format!("{}.advf", e.id)))?;
                if t.shape() != [e.height, e.width] {
                    return Err(Error::shape(format!("mask {} is {:?}", e.id, t.shape())));
                }
                Some(LabelMask::from_tensor(&t)?)
            } else {
                None
            };
            Ok(Sample { id: e.id, image, mask, meta: e.meta })
        })
        .collect()
}

/// Reads the synthesis config echoed in a dataset manifest, if any.
pub fn load_config(dir: impl AsRef<Path>) -> Result<Option<SynthConfig>> {
    let path = dir.as_ref().join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    manifest
        .config
        .map(|v| serde_json::from_value(v).map_err(|e| Error::Format(format!("manifest config: {e}"))))
        .transpose()
}

/// 8-bit binary PGM of an `HxW` tensor, values clamped to `[0, 1]`.
pub fn write_pgm(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let [h, w] = *t.shape() else {
        return Err(Error::shape(format!("PGM export needs HxW, got {:?}", t.shape())));
    };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { seed: 3, ..SynthConfig::for_extent(32, 32) }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small(), 4).unwrap();
        let b = generate(&small(), 4).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthConfig { seed: 4, ..small() }, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_count_and_infeasible_geometry_fail() {
        assert!(generate(&small(), 0).is_err());
        let bad = SynthConfig { outer_radius: [12.0, 30.0], ..small() };
        assert!(matches!(generate(&bad, 1), Err(Error::Config(_))));
        let bad = SynthConfig { thickness: [3.0, 20.0], ..small() };
        assert!(generate(&bad, 1).is_err());
    }

    #[test]
    fn noiseless_images_are_piecewise_constant() {
        let cfg = SynthConfig {
            noise_level: 0.0,
            texture_amplitude: 0.0,
            ring_intensity: [0.3, 0.3],
            pool_intensity: [0.9, 0.9],
            background_intensity: [0.5, 0.5],
            ..small()
        };
        let s = &generate(&cfg, 1).unwrap()[0];
        let mask = s.mask.as_ref().unwrap();
        let mut ring_core = 0;
        for (p, &v) in s.image.data().iter().enumerate() {
            let pure = [0.3, 0.9, 0.5].iter().any(|c| (v - c).abs() < 1e-12);
            // Non-pure values only occur on anti-aliased borders, which lie
            // between the extremes.
            assert!(pure || (0.3..=0.9).contains(&v));
            if mask.labels()[p] == 1 && (v - 0.3).abs() < 1e-12 {
                ring_core += 1;
            }
        }
        assert!(ring_core > 0);
    }

    #[test]
    fn split_partition_law() {
        let data = generate(&small(), 20).unwrap();
        let s = split(&data, [0.5, 0.1, 0.2, 0.2], 9).unwrap();
        let mut ids: Vec<&str> = [&s.train, &s.val, &s.test, &s.unlabelled]
            .iter()
            .flat_map(|v| v.iter().map(|x| x.id.as_str()))
            .collect();
        assert_eq!(ids.len(), 20);
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 20);
        assert!(s.unlabelled.iter().all(|x| x.mask.is_none()));
        assert_eq!(split(&data, [0.5, 0.1, 0.2, 0.2], 9).unwrap(), s);
        let all = split(&data, [1.0, 0.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(all.train.len(), 20);
        assert!(split(&data[..3], [0.5, 0.1, 0.0, 0.0], 1).is_err());
        assert!(split(&data, [0.6, 0.6, 0.0, 0.0], 1).is_err());
    }

    #[test]
    fn mask_tensor_round_trip_and_flips() {
        let m = LabelMask::new(2, 3, vec![0, 1, 2, 1, 1, 0]).unwrap();
        assert_eq!(LabelMask::from_tensor(&m.to_tensor()).unwrap(), m);
        assert_eq!(m.flip_x().flip_x(), m);
        assert_eq!(m.flip_y().flip_y(), m);
        assert_eq!(m.flip_x().labels(), &[2, 1, 0, 0, 1, 1]);
        assert!(LabelMask::from_tensor(&Tensor::full(&[1, 1], 0.5)).is_err());
    }
}
