//! A small U-net: 3x3 conv + ReLU blocks, 2x2 max-pool down, nearest 2x up
//! followed by a conv, skip concatenation, a 1x1 output conv and softmax.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Padding, Tape, Var};
use crate::data::LabelMask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor inside the cross-entropy logarithm.
pub const CE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SegNetConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Channel width per resolution level; `widths.len() == depth + 1`.
    pub widths: Vec<usize>,
    /// Number of pooling steps.
    pub depth: usize,
    /// 3x3 convolutions per encoder and decoder block.
    pub convs: usize,
    pub seed: u64,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self { height: 64, width: 64, classes: 2, widths: vec![8, 16, 32], depth: 2, convs: 2, seed: 0 }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 1usize << self.depth;
        if self.height == 0 || self.width == 0 || self.height % unit != 0 || self.width % unit != 0 {
            return Err(Error::Config(format!(
                "net extents {}x{} must be positive multiples of 2^depth = {unit}",
                self.height, self.width
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("net.classes must be >= 2, got {}", self.classes)));
        }
        if self.widths.len() != self.depth + 1 || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "net.widths needs {} positive entries for depth {}, got {:?}",
                self.depth + 1,
                self.depth,
                self.widths
            )));
        }
        if self.convs == 0 {
            return Err(Error::Config("net.convs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvSpec {
    cin: usize,
    cout: usize,
    k: usize,
}

fn layout(cfg: &SegNetConfig) -> Vec<ConvSpec> {
    let c3 = |cin, cout| ConvSpec { cin, cout, k: 3 };
    let w = &cfg.widths;
    let mut layers = Vec::new();
    let mut cin = 1;
    for &width in w {
        for _ in 0..cfg.convs {
            layers.push(c3(cin, width));
            cin = width;
        }
    }
    for l in (0..cfg.depth).rev() {
        layers.push(c3(w[l + 1], w[l]));
        layers.push(c3(2 * w[l], w[l]));
        for _ in 1..cfg.convs {
            layers.push(c3(w[l], w[l]));
        }
    }
    layers.push(ConvSpec { cin: w[0], cout: cfg.classes, k: 1 });
    layers
}

/// Network parameters. Parameter `2i` is the kernel of layer `i` and `2i+1`
/// its bias.
#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    config: SegNetConfig,
    layers: Vec<ConvSpec>,
    params: Vec<Tensor>,
}

impl SegNet {
    /// He-initialized kernels (`N(0, 2 / fan_in)`), zero biases.
    pub fn new(config: SegNetConfig) -> Result<Self> {
        config.validate()?;
        let layers = layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::with_capacity(2 * layers.len());
        for l in &layers {
            let fan_in = (l.cin * l.k * l.k) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let shape = [l.cout, l.cin, l.k, l.k];
            params.push(Tensor::from_fn(&shape, |_| normal.sample(&mut rng)));
            params.push(Tensor::zeros(&[l.cout]));
        }
        Ok(Self { config, layers, params })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Replaces all parameters; shapes must match.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        check_like(&self.params, &params)?;
        self.params = params;
        Ok(())
    }

    /// Zeroes the output layer so every pixel predicts `1/C`.
    pub fn zero_final_layer(&mut self) {
        let n = self.params.len();
        for p in &mut self.params[n - 2..] {
            p.data_mut().fill(0.0);
        }
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let want = [self.config.height, self.config.width];
        if image.shape() != want {
            return Err(Error::shape(format!("net expects a {want:?} image, got {:?}", image.shape())));
        }
        Ok(())
    }

    /// `C x H x W` class probabilities for the `H x W` image held by `image`.
    pub fn forward_on(&self, tape: &mut Tape, params: &[Var], image: Var) -> Result<Var> {
        self.check_image(tape.value(image))?;
        if params.len() != self.params.len() {
            return Err(Error::shape(format!("{} parameter vars for {} params", params.len(), self.params.len())));
        }
        let cfg = &self.config;
        let mut layer = 0;
        let mut conv = |tape: &mut Tape, x: Var, relu: bool| -> Result<Var> {
            let y = tape.conv2d(x, params[2 * layer], Some(params[2 * layer + 1]), Padding::Zero)?;
            layer += 1;
            if relu {
                tape.relu(y)
            } else {
                Ok(y)
            }
        };

        let mut x = tape.reshape(image, &[1, cfg.height, cfg.width])?;
        let mut skips = Vec::with_capacity(cfg.depth);
        for level in 0..=cfg.depth {
            if level > 0 {
                x = tape.max_pool2(x)?;
            }
            for _ in 0..cfg.convs {
                x = conv(tape, x, true)?;
            }
            if level < cfg.depth {
                skips.push(x);
            }
        }
        for skip in skips.into_iter().rev() {
            x = tape.upsample2(x)?;
            x = conv(tape, x, true)?;
            x = tape.concat(&[x, skip])?;
            for _ in 0..cfg.convs {
                x = conv(tape, x, true)?;
            }
        }
        let logits = conv(tape, x, false)?;
        tape.softmax(logits)
    }

    /// Class probabilities for one image.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let x = tape.leaf(image.clone());
        let p = self.forward_on(&mut tape, &params, x)?;
        Ok(tape.value(p).clone())
    }

    /// Hard labels (per-pixel argmax).
    pub fn segment(&self, image: &Tensor) -> Result<LabelMask> {
        LabelMask::argmax(&self.predict(image)?)
    }

    pub fn adam_step(&mut self, grads: &[Tensor], state: &mut Adam, lr: f64) -> Result<()> {
        state.step(&mut self.params, grads, lr)
    }

    /// Writes `manifest.txt` plus one tensor file per parameter.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>, step: u64) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = &self.config;
        let widths: Vec<String> = cfg.widths.iter().map(ToString::to_string).collect();
        let mut manifest = String::new();
        let lines = [
            ("format", "advfield-checkpoint".to_string()),
            ("version", "1".to_string()),
            ("height", cfg.height.to_string()),
            ("width", cfg.width.to_string()),
            ("classes", cfg.classes.to_string()),
            ("widths", widths.join(",")),
            ("depth", cfg.depth.to_string()),
            ("convs", cfg.convs.to_string()),
            ("seed", cfg.seed.to_string()),
            ("step", step.to_string()),
            ("params", self.params.len().to_string()),
        ];
        for (k, v) in lines {
            writeln!(manifest, "{k}={v}").expect("writing to a String");
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(path, e))?;
        for (i, p) in self.params.iter().enumerate() {
            p.save(dir.join(format!("param_{i:03}.advf")))?;
        }
        Ok(())
    }

    /// Returns the network and the step recorded in its manifest.
    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Self, u64)> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let kv = parse_manifest(&text)?;
        let get = |k: &str| -> Result<&str> {
            kv.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint manifest lacks `{k}`")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?.parse().map_err(|_| Error::Format(format!("checkpoint `{k}` is not an integer")))
        };
        if get("format")? != "advfield-checkpoint" || get("version")? != "1" {
            return Err(Error::Format("not an advfield checkpoint (version 1)".into()));
        }
        let widths = get("widths")?
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::Format(format!("bad width `{s}`"))))
            .collect::<Result<Vec<usize>>>()?;
        let config = SegNetConfig {
            height: num("height")? as usize,
            width: num("width")? as usize,
            classes: num("classes")? as usize,
            widths,
            depth: num("depth")? as usize,
            convs: num("convs")? as usize,
            seed: num("seed")?,
        };
        let mut net = Self::new(config)?;
        if num("params")? as usize != net.params.len() {
            return Err(Error::Format("checkpoint parameter count does not match its config".into()));
        }
        let params = (0..net.params.len())
            .map(|i| Tensor::load(dir.join(format!("param_{i:03}.advf"))))
            .collect::<Result<Vec<_>>>()?;
        check_like(&net.params, &params).map_err(|e| Error::Format(e.to_string()))?;
        net.params = params;
        Ok((net, num("step")?))
    }
}

/// `key=value` lines; blank lines and `#` comments are skipped.
pub(crate) fn parse_manifest(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Format(format!("manifest line without `=`: {l}")))
        })
        .collect()
}

fn check_like(reference: &[Tensor], other: &[Tensor]) -> Result<()> {
    if reference.len() != other.len() {
        return Err(Error::shape(format!("{} tensors, expected {}", other.len(), reference.len())));
    }
    for (i, (a, b)) in reference.iter().zip(other).enumerate() {
        if a.shape() != b.shape() {
            return Err(Error::shape(format!("tensor {i}: {:?}, expected {:?}", b.shape(), a.shape())));
        }
    }
    Ok(())
}

/// Pixel mean of `-ln(p[y] + 1e-12)`.
pub fn cross_entropy_on(tape: &mut Tape, p: Var, labels: &[usize]) -> Result<Var> {
    let picked = tape.pick(p, labels)?;
    let shifted = tape.shift(picked, CE_EPS)?;
    let logp = tape.log(shifted)?;
    let m = tape.mean(logp)?;
    tape.neg(m)
}

pub fn cross_entropy(p: &Tensor, labels: &LabelMask) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(p.clone());
    let l = cross_entropy_on(&mut tape, v, &labels.labels_usize())?;
    tape.scalar_value(l)
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        check_like(params, grads)?;
        check_like(params, &self.m)?;
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (ps, gs) = (p.data_mut(), g.data());
            for (i, &gi) in gs.iter().enumerate() {
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (1.0 - b1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = m.data()[i] / c1;
                let vhat = v.data()[i] / c2;
                ps[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_grad, max_relative_error};
    use rand::Rng;

    /// Biases are jittered away from zero: with zero biases a ReLU-dead
    /// region gives pre-activations of exactly 0, where the loss has a kink.
    fn tiny(seed: u64) -> SegNet {
        let mut net = SegNet::new(SegNetConfig {
            height: 8,
            width: 8,
            classes: 2,
            widths: vec![2, 3],
            depth: 1,
            convs: 1,
            seed,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
        let params = net
            .params()
            .iter()
            .enumerate()
            .map(|(i, p)| if i % 2 == 1 { Tensor::from_fn(p.shape(), |_| rng.gen_range(-0.1..0.1)) } else { p.clone() })
            .collect();
        net.set_params(params).unwrap();
        net
    }

    fn image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[h, w], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn output_is_a_probability_map() {
        let net = SegNet::new(SegNetConfig { height: 16, width: 16, ..SegNetConfig::default() }).unwrap();
        let p = net.predict(&image(0, 16, 16)).unwrap();
        assert_eq!(p.shape(), [2, 16, 16]);
        for px in 0..256 {
            let s = p.data()[px] + p.data()[256 + px];
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert!(net.predict(&image(0, 8, 16)).is_err());
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let cfg = SegNetConfig { height: 16, width: 16, seed: 4, ..SegNetConfig::default() };
        let a = SegNet::new(cfg.clone()).unwrap().predict(&image(1, 16, 16)).unwrap();
        let b = SegNet::new(cfg).unwrap().predict(&image(1, 16, 16)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn zeroed_final_layer_is_uniform() {
        let mut net = SegNet::new(SegNetConfig { height: 16, width: 16, classes: 3, ..SegNetConfig::default() }).unwrap();
        net.zero_final_layer();
        let p = net.predict(&image(2, 16, 16)).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn config_validation() {
        assert!(SegNet::new(SegNetConfig { height: 30, ..SegNetConfig::default() }).is_err());
        assert!(SegNet::new(SegNetConfig { classes: 1, ..SegNetConfig::default() }).is_err());
        assert!(SegNet::new(SegNetConfig { widths: vec![4, 8], ..SegNetConfig::default() }).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let labels = LabelMask::new(1, 2, vec![0, 1]).unwrap();
        let confident = Tensor::new(vec![2, 1, 2], vec![1.0 - 1e-9, 1e-9, 1e-9, 1.0 - 1e-9]).unwrap();
        assert!(cross_entropy(&confident, &labels).unwrap() < 1e-8);
        let uniform = Tensor::full(&[4, 3, 3], 0.25);
        let any = LabelMask::new(3, 3, vec![0, 1, 2, 3, 0, 1, 2, 3, 0]).unwrap();
        assert!((cross_entropy(&uniform, &any).unwrap() - 4f64.ln()).abs() < 1e-10);
        let one = Tensor::new(vec![2, 1, 1], vec![0.75, 0.25]).unwrap();
        let y = LabelMask::new(1, 1, vec![1]).unwrap();
        assert!((cross_entropy(&one, &y).unwrap() - 1.3863).abs() < 1e-4);
        assert!((cross_entropy(&one, &y).unwrap() + 0.25f64.ln()).abs() < 1e-6);
        assert!(cross_entropy(&one, &LabelMask::new(1, 1, vec![2]).unwrap()).is_err());
    }

    fn ce_loss(net: &SegNet, params: &[Tensor], img: &Tensor, labels: &[usize]) -> Result<f64> {
        let mut n = net.clone();
        n.set_params(params.to_vec())?;
        let mut tape = Tape::new();
        let vars = n.bind(&mut tape);
        let x = tape.leaf(img.clone());
        let p = n.forward_on(&mut tape, &vars, x)?;
        let l = cross_entropy_on(&mut tape, p, labels)?;
        tape.scalar_value(l)
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        for seed in 0..5 {
            let net = tiny(seed);
            let img = image(seed + 10, 8, 8);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<usize> = (0..64).map(|_| rng.gen_range(0..2)).collect();
            let mut tape = Tape::new();
            let vars = net.bind(&mut tape);
            let x = tape.leaf(img.clone());
            let p = net.forward_on(&mut tape, &vars, x).unwrap();
            let l = cross_entropy_on(&mut tape, p, &labels).unwrap();
            let grads = tape.backward(l, &vars).unwrap();
            for (i, &v) in vars.iter().enumerate() {
                let fd = finite_diff_grad(
                    |t| {
                        let mut ps = net.params().to_vec();
                        ps[i] = t.clone();
                        ce_loss(&net, &ps, &img, &labels)
                    },
                    &net.params()[i],
                    1e-5,
                )
                .unwrap();
                let err = max_relative_error(grads.get(v).unwrap(), &fd);
                assert!(err < 1e-4, "seed {seed} param {i}: {err}");
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let net = tiny(seed);
            let img = image(seed + 20, 8, 8);
            let loss = |t: &Tensor| -> Result<f64> {
                let mut tape = Tape::new();
                let vars = net.bind(&mut tape);
                let x = tape.leaf(t.clone());
                let p = net.forward_on(&mut tape, &vars, x)?;
                let c = tape.channel(p, 1)?;
                let s = tape.square(c)?;
                let l = tape.sum(s)?;
                tape.scalar_value(l)
            };
            let mut tape = Tape::new();
            let vars = net.bind(&mut tape);
            let x = tape.leaf(img.clone());
            let p = net.forward_on(&mut tape, &vars, x).unwrap();
            let c = tape.channel(p, 1).unwrap();
            let s = tape.square(c).unwrap();
            let l = tape.sum(s).unwrap();
            let g = tape.backward(l, &[x]).unwrap();
            let fd = finite_diff_grad(loss, &img, 1e-5).unwrap();
            let err = max_relative_error(g.get(x).unwrap(), &fd);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn adam_examples() {
        let mut theta = vec![Tensor::scalar(1.0)];
        let mut adam = Adam::new(&theta);
        adam.step(&mut theta, &[Tensor::scalar(0.0)], 0.1).unwrap();
        assert_eq!(theta[0].data(), &[1.0]);

        for g in [50.0, -250.0] {
            let mut theta = vec![Tensor::scalar(1.0)];
            let mut adam = Adam::new(&theta);
            adam.step(&mut theta, &[Tensor::scalar(g)], 1e-3).unwrap();
            assert!((theta[0].data()[0] - (1.0 - 1e-3 * f64::signum(g))).abs() < 1e-12);
        }

        // Bowl f = θ², against a scalar re-derivation of the update.
        let mut theta = vec![Tensor::scalar(0.5)];
        let mut adam = Adam::new(&theta);
        let (mut th, mut m, mut v) = (0.5f64, 0.0, 0.0);
        for t in 1..=200 {
            let g = theta[0].scale(2.0).unwrap();
            adam.step(&mut theta, &[g], 1e-2).unwrap();
            let gs = 2.0 * th;
            m = 0.9 * m + 0.1 * gs;
            v = 0.999 * v + 0.001 * gs * gs;
            th -= 1e-2 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!((theta[0].data()[0] - th).abs() < 1e-12);
        assert!(theta[0].data()[0].abs() < 1e-2, "{}", theta[0].data()[0]);
        assert!(adam.step(&mut theta, &[Tensor::zeros(&[2])], 1e-2).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = SegNet::new(SegNetConfig { height: 16, width: 16, seed: 9, ..SegNetConfig::default() }).unwrap();
        net.save_checkpoint(dir.path(), 17).unwrap();
        let (back, step) = SegNet::load_checkpoint(dir.path()).unwrap();
        assert_eq!(step, 17);
        assert_eq!(back, net);
        fs::write(dir.path().join("manifest.txt"), "format=other\n").unwrap();
        assert!(matches!(SegNet::load_checkpoint(dir.path()), Err(Error::Format(_))));
    }
}
