//! Per-forward-pass reverse-mode differentiation.
//!
//! A [`Tape`] records every operation as a node holding its value and the
//! rule needed to push gradients back to its inputs. Nodes are appended in
//! evaluation order, so walking the tape backwards is a valid topological
//! traversal. The tape is meant to be built for one forward pass, queried
//! with [`Tape::backward`], and dropped.
//!
//! ```
//! use advfield::autodiff::Tape;
//! use advfield::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
//! let sq = tape.square(x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss, &[x]).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Replicate,
}

/// Pointwise operations exposed through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Relu,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Relu,
    Scale(f64),
    Shift(f64),
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
struct ConvMeta {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    padding: Padding,
    padded: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Sum(Var),
    Mean(Var),
    Norm2(Var),
    Reshape(Var),
    Channel(Var, usize),
    Concat(Vec<Var>),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        meta: Box<ConvMeta>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Softmax(Var),
    Pick {
        input: Var,
        labels: Vec<usize>,
    },
    Separable {
        input: Var,
        rows: Tensor,
        cols: Tensor,
    },
    GridSample {
        image: Var,
        coords: Var,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Unary(_, a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Norm2(a)
            | Op::Reshape(a)
            | Op::Channel(a, _)
            | Op::Upsample2(a)
            | Op::Softmax(a) => vec![*a],
            Op::MaxPool2 { input, .. } | Op::Pick { input, .. } | Op::Separable { input, .. } => {
                vec![*input]
            }
            Op::Binary(_, a, b) => vec![*a, *b],
            Op::Concat(parts) => parts.clone(),
            Op::Conv2d { input, kernel, bias, .. } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias.iter().copied());
                v
            }
            Op::GridSample { image, coords } => vec![*image, *coords],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients returned by [`Tape::backward`], keyed by leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.map.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.map.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input. Leaves are the only valid gradient targets.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Copies the current value of `var` into a fresh leaf, cutting the
    /// gradient path through it.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.value(var).clone();
        self.leaf(value)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn scalar_value(&self, var: Var) -> Result<f64> {
        self.value(var).item()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, name: &'static str) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value: Tensor::from_parts(shape, data), op });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- pointwise -------------------------------------------------------

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let binary = match op {
            Elementwise::Add => Some(Binary::Add),
            Elementwise::Sub => Some(Binary::Sub),
            Elementwise::Mul => Some(Binary::Mul),
            Elementwise::Div => Some(Binary::Div),
            _ => None,
        };
        match (binary, b) {
            (Some(bin), Some(b)) => self.binary(bin, a, b),
            (Some(_), None) => Err(Error::invalid(format!("{op:?} needs two operands"))),
            (None, Some(_)) => Err(Error::invalid(format!("{op:?} takes one operand"))),
            (None, None) => {
                let un = match op {
                    Elementwise::Neg => Unary::Neg,
                    Elementwise::Exp => Unary::Exp,
                    Elementwise::Log => Unary::Log,
                    Elementwise::Sqrt => Unary::Sqrt,
                    Elementwise::Square => Unary::Square,
                    _ => Unary::Relu,
                };
                self.unary(un, a)
            }
        }
    }

    fn unary(&mut self, op: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        let f: fn(f64, f64) -> f64 = match op {
            Unary::Neg => |v, _| -v,
            Unary::Exp => |v, _| v.exp(),
            Unary::Log => |v, _| v.ln(),
            Unary::Sqrt => |v, _| v.sqrt(),
            Unary::Square => |v, _| v * v,
            Unary::Relu => |v, _| v.max(0.0),
            Unary::Scale(_) => |v, k| v * k,
            Unary::Shift(_) => |v, k| v + k,
        };
        let k = match op {
            Unary::Scale(k) | Unary::Shift(k) => k,
            _ => 0.0,
        };
        let data = x.data().iter().map(|&v| f(v, k)).collect();
        let shape = x.shape().to_vec();
        self.push(shape, data, Op::Unary(op, a), "elementwise")
    }

    fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let shape = if x.shape() == y.shape() || y.is_scalar() {
            x.shape().to_vec()
        } else if x.is_scalar() {
            y.shape().to_vec()
        } else {
            return Err(Error::shape(format!(
                "{op:?}: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        };
        let n: usize = shape.iter().product();
        let (xs, ys) = (x.data(), y.data());
        let xi = |i: usize| if xs.len() == 1 { xs[0] } else { xs[i] };
        let yi = |i: usize| if ys.len() == 1 { ys[0] } else { ys[i] };
        let data = (0..n)
            .map(|i| match op {
                Binary::Add => xi(i) + yi(i),
                Binary::Sub => xi(i) - yi(i),
                Binary::Mul => xi(i) * yi(i),
                Binary::Div => xi(i) / yi(i),
            })
            .collect();
        self.push(shape, data, Op::Binary(op, a, b), "elementwise")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary(Unary::Scale(k), a)
    }

    /// Addition of a constant.
    pub fn shift(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary(Unary::Shift(k), a)
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(vec![1], vec![s], Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).mean();
        self.push(vec![1], vec![s], Op::Mean(a), "mean")
    }

    /// Euclidean norm of the flattened tensor. The gradient at zero is taken
    /// to be zero.
    pub fn norm2(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).norm2();
        self.push(vec![1], vec![n], Op::Norm2(a), "norm2")
    }

    // ---- shape -----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if shape.iter().product::<usize>() != x.len() {
            return Err(Error::shape(format!("reshape {:?} -> {shape:?}", x.shape())));
        }
        let data = x.data().to_vec();
        self.push(shape.to_vec(), data, Op::Reshape(a), "reshape")
    }

    /// Slice along the leading axis.
    pub fn channel(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a).channel(index)?;
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Channel(a, index), "channel")
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() < 2 || t.shape()[1..] != tail[..] {
                return Err(Error::shape(format!("concat {:?} with tail {tail:?}", t.shape())));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push(shape, data, Op::Concat(parts.to_vec()), "concat")
    }

    // ---- image ops -------------------------------------------------------

    /// Same-size 2D cross-correlation.
    ///
    /// Accepts either an `HxW` input with a `kh x kw` kernel, or a
    /// `Cin x H x W` input with a `Cout x Cin x kh x kw` kernel and an
    /// optional `Cout` bias. Kernel extents must be odd.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: Padding,
    ) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let (cin, h, w, planar) = match x.shape() {
            &[h, w] => (1, h, w, true),
            &[c, h, w] => (c, h, w, false),
            s => return Err(Error::shape(format!("conv2d input {s:?}"))),
        };
        let (cout, kh, kw) = match (k.shape(), planar) {
            (&[kh, kw], true) => (1, kh, kw),
            (&[co, ci, kh, kw], false) if ci == cin => (co, kh, kw),
            (s, _) => {
                return Err(Error::shape(format!(
                    "conv2d kernel {s:?} incompatible with input {:?}",
                    x.shape()
                )))
            }
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!("conv2d kernel extents must be odd, got {kh}x{kw}")));
        }
        if let Some(b) = bias {
            if planar || self.value(b).shape() != [cout] {
                return Err(Error::shape(format!("conv2d bias {:?}", self.value(b).shape())));
            }
        }
        let (ph, pw) = (kh / 2, kw / 2);
        let (hp, wp) = (h + 2 * ph, w + 2 * pw);
        let xs = x.data();
        let mut padded = vec![0.0; cin * hp * wp];
        for c in 0..cin {
            for yp in 0..hp {
                let sy = match pad_index(yp, ph, h, padding) {
                    Some(s) => s,
                    None => continue,
                };
                for xp in 0..wp {
                    if let Some(sx) = pad_index(xp, pw, w, padding) {
                        padded[(c * hp + yp) * wp + xp] = xs[(c * h + sy) * w + sx];
                    }
                }
            }
        }
        let ks = k.data();
        let mut out = vec![0.0; cout * h * w];
        if let Some(b) = bias {
            let bs = self.value(b).data();
            for co in 0..cout {
                out[co * h * w..(co + 1) * h * w].fill(bs[co]);
            }
        }
        for co in 0..cout {
            let o = &mut out[co * h * w..(co + 1) * h * w];
            for ci in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let kv = ks[((co * cin + ci) * kh + ky) * kw + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        for y in 0..h {
                            let src = &padded[(ci * hp + y + ky) * wp + kx..][..w];
                            let dst = &mut o[y * w..(y + 1) * w];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += kv * s;
                            }
                        }
                    }
                }
            }
        }
        let shape = if planar { vec![h, w] } else { vec![cout, h, w] };
        let meta = Box::new(ConvMeta { cin, cout, h, w, kh, kw, padding, padded });
        self.push(shape, out, Op::Conv2d { input, kernel, bias, meta }, "conv2d")
    }

    /// 2x2 max pooling with stride 2 on `CxHxW`, H and W even.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [c, h, w] = *x.shape() else {
            return Err(Error::shape(format!("max_pool2 input {:?}", x.shape())));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("max_pool2 needs even extents, got {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xs = x.data();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ci in 0..c {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut best = (ci * h + 2 * y) * w + 2 * xo;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (ci * h + 2 * y + dy) * w + 2 * xo + dx;
                        if xs[i] > xs[best] {
                            best = i;
                        }
                    }
                    out.push(xs[best]);
                    argmax.push(best);
                }
            }
        }
        self.push(vec![c, ho, wo], out, Op::MaxPool2 { input, argmax }, "max_pool2")
    }

    /// Nearest-neighbour 2x upsampling of `CxHxW`.
    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [c, h, w] = *x.shape() else {
            return Err(Error::shape(format!("upsample2 input {:?}", x.shape())));
        };
        let xs = x.data();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * ho * wo];
        for ci in 0..c {
            for y in 0..ho {
                for xo in 0..wo {
                    out[(ci * ho + y) * wo + xo] = xs[(ci * h + y / 2) * w + xo / 2];
                }
            }
        }
        self.push(vec![c, ho, wo], out, Op::Upsample2(input), "upsample2")
    }

    /// Softmax across the leading (class) axis of `CxHxW`.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [c, h, w] = *x.shape() else {
            return Err(Error::shape(format!("softmax input {:?}", x.shape())));
        };
        let hw = h * w;
        let xs = x.data();
        let mut out = vec![0.0; c * hw];
        for p in 0..hw {
            let m = (0..c).map(|k| xs[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..c {
                let e = (xs[k * hw + p] - m).exp();
                out[k * hw + p] = e;
                z += e;
            }
            for k in 0..c {
                out[k * hw + p] /= z;
            }
        }
        self.push(vec![c, h, w], out, Op::Softmax(input), "softmax")
    }

    /// Per-pixel selection `out[y][x] = input[labels[y*W+x]][y][x]`.
    pub fn pick(&mut self, input: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let [c, h, w] = *x.shape() else {
            return Err(Error::shape(format!("pick input {:?}", x.shape())));
        };
        let hw = h * w;
        if labels.len() != hw {
            return Err(Error::shape(format!("pick: {} labels for {h}x{w}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let xs = x.data();
        let out = labels.iter().enumerate().map(|(p, &l)| xs[l * hw + p]).collect();
        self.push(vec![h, w], out, Op::Pick { input, labels: labels.to_vec() }, "pick")
    }

    /// Applies `rows · X · colsᵀ` to every `HxW` plane of the input.
    ///
    /// `rows` is `Ho x H` and `cols` is `Wo x W`. This covers any separable
    /// linear filter or resampling (B-spline interpolation, Gaussian blur).
    pub fn separable(&mut self, input: Var, rows: &Tensor, cols: &Tensor) -> Result<Var> {
        let x = self.value(input);
        let (h, w) = x.spatial()?;
        let planes = x.len() / (h * w);
        let (&[ho, rh], &[wo, cw]) = (rows.shape(), cols.shape()) else {
            return Err(Error::shape("separable: rows/cols must be matrices"));
        };
        if rh != h || cw != w {
            return Err(Error::shape(format!(
                "separable: rows {:?}, cols {:?} for plane {h}x{w}",
                rows.shape(),
                cols.shape()
            )));
        }
        let mut out = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let plane = &x.data()[p * h * w..(p + 1) * h * w];
            let tmp = matmul_bt(plane, h, w, cols.data(), wo);
            out.extend(matmul(rows.data(), ho, h, &tmp, wo));
        }
        let mut shape = x.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        let op = Op::Separable { input, rows: rows.clone(), cols: cols.clone() };
        self.push(shape, out, op, "separable")
    }

    /// Bilinear resampling of `image` (`HxW` or `CxHxW`) at absolute
    /// positions `coords` (`2 x Ho x Wo`, channel 0 = column, channel 1 =
    /// row). Positions outside the frame are clamped to the border
    /// (replicate boundary).
    pub fn grid_sample(&mut self, image: Var, coords: Var) -> Result<Var> {
        let img = self.value(image);
        let cs = self.value(coords);
        let (h, w) = img.spatial()?;
        let planes = img.len() / (h * w);
        let [2, ho, wo] = *cs.shape() else {
            return Err(Error::shape(format!("grid_sample coords {:?}", cs.shape())));
        };
        let n = ho * wo;
        let mut out = vec![0.0; planes * n];
        for p in 0..n {
            let s = BilinearSite::new(cs.data()[p], cs.data()[n + p], h, w);
            for c in 0..planes {
                let plane = &img.data()[c * h * w..(c + 1) * h * w];
                out[c * n + p] = s.sample(plane, w);
            }
        }
        let mut shape = img.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        self.push(shape, out, Op::GridSample { image, coords }, "grid_sample")
    }

    // ---- backward --------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to each leaf in `targets`.
    ///
    /// Only nodes on a path from a target to the loss are visited.
    pub fn backward(&self, loss: Var, targets: &[Var]) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Gradient(format!("loss {loss:?} not on this tape")));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Gradient(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut needs = vec![false; loss.0 + 1];
        for &t in targets {
            if t.0 >= self.nodes.len() || !matches!(self.nodes[t.0].op, Op::Leaf) {
                return Err(Error::Gradient(format!("{t:?} is not a leaf of this tape")));
            }
            if t.0 <= loss.0 {
                needs[t.0] = true;
            }
        }
        for i in 0..=loss.0 {
            if !needs[i] {
                needs[i] = self.nodes[i].op.inputs().iter().any(|v| needs[v.0]);
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if needs[loss.0] {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &needs, &mut grads)?;
        }

        let mut map = BTreeMap::new();
        for &t in targets {
            let shape = self.value(t).shape().to_vec();
            let data = grads
                .get(t.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("backward"));
            }
            map.insert(t, Tensor::from_parts(shape, data));
        }
        Ok(Gradients { map })
    }

    fn propagate(
        &self,
        i: usize,
        g: &[f64],
        needs: &[bool],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, contrib: Vec<f64>| accumulate(grads, v, contrib);
        match &node.op {
            Op::Leaf => {}
            Op::Unary(op, a) => {
                let x = self.value(*a).data();
                let d: Vec<f64> = match *op {
                    Unary::Neg => g.iter().map(|g| -g).collect(),
                    Unary::Exp => g.iter().zip(out).map(|(g, y)| g * y).collect(),
                    Unary::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                    Unary::Sqrt => g.iter().zip(out).map(|(g, y)| 0.5 * g / y).collect(),
                    Unary::Square => g.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect(),
                    Unary::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                    Unary::Scale(k) => g.iter().map(|g| g * k).collect(),
                    Unary::Shift(_) => g.to_vec(),
                };
                acc(*a, d);
            }
            Op::Binary(op, a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let at = |s: &[f64], j: usize| if s.len() == 1 { s[0] } else { s[j] };
                let n = g.len();
                let (mut ga, mut gb) = (vec![0.0; xa.len()], vec![0.0; xb.len()]);
                for j in 0..n {
                    let (u, v) = (at(xa, j), at(xb, j));
                    let (da, db) = match op {
                        Binary::Add => (g[j], g[j]),
                        Binary::Sub => (g[j], -g[j]),
                        Binary::Mul => (g[j] * v, g[j] * u),
                        Binary::Div => (g[j] / v, -g[j] * u / (v * v)),
                    };
                    ga[if xa.len() == 1 { 0 } else { j }] += da;
                    gb[if xb.len() == 1 { 0 } else { j }] += db;
                }
                if needs[a.0] {
                    acc(*a, ga);
                }
                if needs[b.0] {
                    acc(*b, gb);
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                acc(*a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::Norm2(a) => {
                let x = self.value(*a).data();
                let norm = out[0];
                let d = if norm > 0.0 {
                    x.iter().map(|v| g[0] * v / norm).collect()
                } else {
                    vec![0.0; x.len()]
                };
                acc(*a, d);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Channel(a, idx) => {
                let x = self.value(*a);
                let inner = g.len();
                let mut d = vec![0.0; x.len()];
                d[idx * inner..(idx + 1) * inner].copy_from_slice(g);
                acc(*a, d);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if needs[p.0] {
                        acc(*p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::Conv2d { input, kernel, bias, meta } => {
                self.conv2d_backward(g, *input, *kernel, *bias, meta, needs, grads);
            }
            Op::MaxPool2 { input, argmax } => {
                let mut d = vec![0.0; self.value(*input).len()];
                for (gv, &j) in g.iter().zip(argmax) {
                    d[j] += gv;
                }
                acc(*input, d);
            }
            Op::Upsample2(a) => {
                let x = self.value(*a);
                let [c, h, w] = *x.shape() else { unreachable!() };
                let (ho, wo) = (2 * h, 2 * w);
                let mut d = vec![0.0; x.len()];
                for ci in 0..c {
                    for y in 0..ho {
                        for xo in 0..wo {
                            d[(ci * h + y / 2) * w + xo / 2] += g[(ci * ho + y) * wo + xo];
                        }
                    }
                }
                acc(*a, d);
            }
            Op::Softmax(a) => {
                let [c, h, w] = *node.value.shape() else { unreachable!() };
                let hw = h * w;
                let mut d = vec![0.0; c * hw];
                for p in 0..hw {
                    let dot: f64 = (0..c).map(|k| g[k * hw + p] * out[k * hw + p]).sum();
                    for k in 0..c {
                        d[k * hw + p] = out[k * hw + p] * (g[k * hw + p] - dot);
                    }
                }
                acc(*a, d);
            }
            Op::Pick { input, labels } => {
                let mut d = vec![0.0; self.value(*input).len()];
                let hw = labels.len();
                for (p, &l) in labels.iter().enumerate() {
                    d[l * hw + p] = g[p];
                }
                acc(*input, d);
            }
            Op::Separable { input, rows, cols } => {
                let x = self.value(*input);
                let (h, w) = x.spatial()?;
                let (ho, wo) = (rows.shape()[0], cols.shape()[0]);
                let planes = x.len() / (h * w);
                let rows_t = transpose(rows.data(), ho, h);
                let mut d = Vec::with_capacity(x.len());
                for p in 0..planes {
                    let gp = &g[p * ho * wo..(p + 1) * ho * wo];
                    let tmp = matmul(&rows_t, h, ho, gp, wo);
                    d.extend(matmul(&tmp, h, wo, cols.data(), w));
                }
                acc(*input, d);
            }
            Op::GridSample { image, coords } => {
                let img = self.value(*image);
                let cs = self.value(*coords).data();
                let (h, w) = img.spatial()?;
                let planes = img.len() / (h * w);
                let n = cs.len() / 2;
                let mut d_img = needs[image.0].then(|| vec![0.0; img.len()]);
                let mut d_cs = needs[coords.0].then(|| vec![0.0; cs.len()]);
                for p in 0..n {
                    let s = BilinearSite::new(cs[p], cs[n + p], h, w);
                    for c in 0..planes {
                        let gv = g[c * n + p];
                        if gv == 0.0 {
                            continue;
                        }
                        let base = c * h * w;
                        if let Some(d) = d_img.as_mut() {
                            s.scatter(&mut d[base..base + h * w], w, gv);
                        }
                        if let Some(d) = d_cs.as_mut() {
                            let (dx, dy) = s.spatial_grad(&img.data()[base..base + h * w], w);
                            d[p] += gv * dx;
                            d[n + p] += gv * dy;
                        }
                    }
                }
                if let Some(d) = d_img {
                    acc(*image, d);
                }
                if let Some(d) = d_cs {
                    acc(*coords, d);
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        g: &[f64],
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        m: &ConvMeta,
        needs: &[bool],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let ConvMeta { cin, cout, h, w, kh, kw, padding, ref padded } = *m;
        let (ph, pw) = (kh / 2, kw / 2);
        let (hp, wp) = (h + 2 * ph, w + 2 * pw);
        let ks = self.value(kernel).data();

        if let Some(b) = bias.filter(|b| needs[b.0]) {
            let d = (0..cout).map(|co| g[co * h * w..(co + 1) * h * w].iter().sum()).collect();
            accumulate(grads, b, d);
        }
        if needs[kernel.0] {
            let mut dk = vec![0.0; ks.len()];
            for co in 0..cout {
                let go = &g[co * h * w..(co + 1) * h * w];
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut s = 0.0;
                            for y in 0..h {
                                let src = &padded[(ci * hp + y + ky) * wp + kx..][..w];
                                let gr = &go[y * w..(y + 1) * w];
                                s += gr.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                            }
                            dk[((co * cin + ci) * kh + ky) * kw + kx] = s;
                        }
                    }
                }
            }
            accumulate(grads, kernel, dk);
        }
        if needs[input.0] {
            let mut dp = vec![0.0; cin * hp * wp];
            for co in 0..cout {
                let go = &g[co * h * w..(co + 1) * h * w];
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let kv = ks[((co * cin + ci) * kh + ky) * kw + kx];
                            if kv == 0.0 {
                                continue;
                            }
                            for y in 0..h {
                                let dst = &mut dp[(ci * hp + y + ky) * wp + kx..][..w];
                                for (d, gv) in dst.iter_mut().zip(&go[y * w..(y + 1) * w]) {
                                    *d += kv * gv;
                                }
                            }
                        }
                    }
                }
            }
            let mut dx = vec![0.0; cin * h * w];
            for c in 0..cin {
                for yp in 0..hp {
                    let Some(sy) = pad_index(yp, ph, h, padding) else { continue };
                    for xp in 0..wp {
                        if let Some(sx) = pad_index(xp, pw, w, padding) {
                            dx[(c * h + sy) * w + sx] += dp[(c * hp + yp) * wp + xp];
                        }
                    }
                }
            }
            accumulate(grads, input, dx);
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

/// Source index for padded coordinate `p` (pad width `pad`, extent `n`).
fn pad_index(p: usize, pad: usize, n: usize, mode: Padding) -> Option<usize> {
    let s = p as isize - pad as isize;
    if (0..n as isize).contains(&s) {
        Some(s as usize)
    } else {
        match mode {
            Padding::Zero => None,
            Padding::Replicate => Some(s.clamp(0, n as isize - 1) as usize),
        }
    }
}

/// Bilinear interpolation weights at one sampling position.
struct BilinearSite {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    /// Whether the position lies strictly inside the frame along each axis;
    /// clamped coordinates carry no spatial gradient.
    free_x: bool,
    free_y: bool,
}

impl BilinearSite {
    fn new(cx: f64, cy: f64, h: usize, w: usize) -> Self {
        let (x0, x1, fx, free_x) = axis(cx, w);
        let (y0, y1, fy, free_y) = axis(cy, h);
        Self { x0, x1, y0, y1, fx, fy, free_x, free_y }
    }

    fn sample(&self, plane: &[f64], w: usize) -> f64 {
        let v = |y: usize, x: usize| plane[y * w + x];
        let top = (1.0 - self.fx) * v(self.y0, self.x0) + self.fx * v(self.y0, self.x1);
        let bot = (1.0 - self.fx) * v(self.y1, self.x0) + self.fx * v(self.y1, self.x1);
        (1.0 - self.fy) * top + self.fy * bot
    }

    fn scatter(&self, d: &mut [f64], w: usize, g: f64) {
        let (fx, fy) = (self.fx, self.fy);
        d[self.y0 * w + self.x0] += g * (1.0 - fx) * (1.0 - fy);
        d[self.y0 * w + self.x1] += g * fx * (1.0 - fy);
        d[self.y1 * w + self.x0] += g * (1.0 - fx) * fy;
        d[self.y1 * w + self.x1] += g * fx * fy;
    }

    fn spatial_grad(&self, plane: &[f64], w: usize) -> (f64, f64) {
        let v = |y: usize, x: usize| plane[y * w + x];
        let (a, b) = (v(self.y0, self.x0), v(self.y0, self.x1));
        let (c, d) = (v(self.y1, self.x0), v(self.y1, self.x1));
        let dx = if self.free_x { (1.0 - self.fy) * (b - a) + self.fy * (d - c) } else { 0.0 };
        let dy = if self.free_y {
            (1.0 - self.fx) * (c - a) + self.fx * (d - b)
        } else {
            0.0
        };
        (dx, dy)
    }
}

fn axis(c: f64, n: usize) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let hi = (n - 1) as f64;
    let free = c > 0.0 && c < hi;
    let c = c.clamp(0.0, hi);
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, i0 + 1, c - i0 as f64, free)
}

/// `a (m x k) · b (k x n)`.
pub(crate) fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (m x k) · bᵀ` where `b` is `n x k`.
fn matmul_bt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = ar.iter().zip(&b[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Central finite-difference gradient of a scalar function.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((fp - fm) / (2.0 * step));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Largest elementwise relative disagreement between two gradients.
///
/// Each difference is divided by the larger of the two magnitudes, floored at
/// `1e-3` of the reference gradient's largest entry so that entries that are
/// zero in exact arithmetic do not dominate through rounding noise.
pub fn max_relative_error(actual: &Tensor, reference: &Tensor) -> f64 {
    assert_eq!(actual.shape(), reference.shape(), "gradient shapes differ");
    let floor = (1e-3 * reference.max_abs().max(actual.max_abs())).max(1e-12);
    actual
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}
