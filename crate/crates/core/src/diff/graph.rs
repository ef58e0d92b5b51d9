use super::array::Array;
use super::linalg::gemm;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial padding policy for [`Graph::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// `(k - 1) / 2` zeros on every side; requires odd kernels.
    Same,
    Valid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d(Box<ConvRecord>),
    Relu(Var),
    MulConst(Var, Array),
    GlobalAvgPool(Var),
    Softmax(Var),
    LogClamped(Var, f64),
    Softplus(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    PairwiseDistance(Var),
    NormalizeRows(Var),
    Gather(Var, Vec<usize>),
}

#[derive(Debug)]
struct ConvRecord {
    input: Var,
    kernel: Var,
    geom: ConvGeometry,
    /// im2col buffer, one `(C·kh·kw) × (H'·W')` block per image; empty when nothing is tracked.
    cols: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let op = self.out_pixels();
        for c in 0..self.c {
            let plane = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * op..(row + 1) * op];
                    for oy in 0..self.oh {
                        let y = (oy * self.stride + ki) as isize - self.pad as isize;
                        for ox in 0..self.ow {
                            let x = (ox * self.stride + kj) as isize - self.pad as isize;
                            dst[oy * self.ow + ox] = if y >= 0
                                && x >= 0
                                && (y as usize) < self.h
                                && (x as usize) < self.w
                            {
                                plane[y as usize * self.w + x as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let op = self.out_pixels();
        for c in 0..self.c {
            let plane = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * op..(row + 1) * op];
                    for oy in 0..self.oh {
                        let y = (oy * self.stride + ki) as isize - self.pad as isize;
                        if y < 0 || y as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let x = (ox * self.stride + kj) as isize - self.pad as isize;
                            if x >= 0 && (x as usize) < self.w {
                                plane[y as usize * self.w + x as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    tracked: bool,
}

/// Records executed operations so a single reverse sweep can produce gradients.
///
/// Leaves created with [`Graph::param`] are tracked; everything derived from a
/// tracked value is tracked too. Untracked work never stores backward buffers.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every tracked node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Array> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros of `shape` if the loss never touched it.
    pub fn wrt_or_zeros(&self, var: Var, shape: &[usize]) -> Array {
        self.get(var).cloned().unwrap_or_else(|| Array::zeros(shape))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Array {
        &self.nodes[var.0].value
    }

    pub fn is_tracked(&self, var: Var) -> bool {
        self.nodes[var.0].tracked
    }

    /// Sign of every tracked ReLU input, in recording order. Two evaluations
    /// with equal patterns lie on the same linear piece of every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in self.nodes.iter().filter(|n| n.tracked) {
            if let Op::Relu(x) = node.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    fn push(&mut self, value: Array, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `[N×D]·[D×E]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Array::new(vec![m, n], out)?, Op::MatMul(a, b), tracked))
    }

    /// Adds a per-channel bias along axis 1 (rows of `[N×E]`, channels of `[N×C×H×W]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::dim("add_bias", sx, sb));
        }
        let channels = sx[1];
        let inner: usize = sx[2..].iter().product();
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b[(i / inner) % channels];
        }
        let tracked = self.tracked(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), tracked))
    }

    /// `[x·W + b]` with `W: [D×E]`, `b: [E]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_bias(y, bias)
    }

    /// Cross-correlation of `[N×C×H×W]` with `[K×C×kh×kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (si, sk) = (self.value(input).shape(), self.value(kernel).shape());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(Error::dim("conv2d", si, sk));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be at least 1".into()));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (k, kh, kw) = (sk[0], sk[2], sk[3]);
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same => {
                if kh != kw || kh % 2 == 0 {
                    return Err(Error::Config(format!(
                        "same padding needs a square odd kernel, got {kh}x{kw}"
                    )));
                }
                (kh - 1) / 2
            }
        };
        if kh == 0 || kw == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::dim("conv2d", si, sk));
        }
        let geom = ConvGeometry {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let tracked = self.tracked(&[input, kernel]);
        let (patch, op) = (geom.patch(), geom.out_pixels());
        let mut out = vec![0.0; n * k * op];
        let mut cols = vec![0.0; if tracked { n * patch * op } else { patch * op }];
        let x = self.value(input).data();
        let wk = self.value(kernel).data();
        for img in 0..n {
            let block = if tracked {
                &mut cols[img * patch * op..(img + 1) * patch * op]
            } else {
                &mut cols[..]
            };
            geom.im2col(&x[img * c * h * w..(img + 1) * c * h * w], block);
            gemm(k, patch, op, wk, false, block, false, 0.0, &mut out[img * k * op..(img + 1) * k * op]);
        }
        if !tracked {
            cols = Vec::new();
        }
        let value = Array::new(vec![n, k, geom.oh, geom.ow], out)?;
        let record = ConvRecord {
            input,
            kernel,
            geom,
            cols,
        };
        Ok(self.push(value, Op::Conv2d(Box::new(record)), tracked))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let tracked = self.tracked(&[x]);
        self.push(out, Op::Relu(x), tracked)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, factor: Array) -> Result<Var> {
        if self.value(x).shape() != factor.shape() {
            return Err(Error::dim("mul_const", self.value(x).shape(), factor.shape()));
        }
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .zip(factor.data())
            .for_each(|(v, f)| *v *= f);
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::MulConst(x, factor), tracked))
    }

    /// `[N×C×H×W] → [N×C]`, mean over spatial positions.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 4 || s[2] == 0 || s[3] == 0 {
            return Err(Error::dim("global_avg_pool", s, &[0, 0, 1, 1]));
        }
        let (n, c, area) = (s[0], s[1], s[2] * s[3]);
        let data = self
            .value(x)
            .data()
            .chunks(area)
            .map(|plane| plane.iter().sum::<f64>() / area as f64)
            .collect();
        let tracked = self.tracked(&[x]);
        Ok(self.push(Array::new(vec![n, c], data)?, Op::GlobalAvgPool(x), tracked))
    }

    /// Row-wise softmax of `[N×Ω]`, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows(self.value(x))?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::Softmax(x), tracked))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        let out = self.value(x).map(|v| v.max(floor).ln());
        let tracked = self.tracked(&[x]);
        self.push(out, Op::LogClamped(x, floor), tracked)
    }

    /// `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        let tracked = self.tracked(&[x]);
        self.push(out, Op::Softplus(x), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    fn zip_same(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(op, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Array::new(va.shape().to_vec(), data)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let tracked = self.tracked(&[x]);
        self.push(out, Op::Scale(x, factor), tracked)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let tracked = self.tracked(&[x]);
        self.push(Array::scalar(total), Op::Sum(x), tracked)
    }

    /// `[N×D] → [N×N]` Euclidean distances between rows.
    pub fn pairwise_distance(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.ndim() != 2 {
            return Err(Error::dim("pairwise_distance", v.shape(), &[0, 0]));
        }
        let n = v.dim(0);
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = v
                    .row(i)
                    .iter()
                    .zip(v.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                out[i * n + j] = d;
                out[j * n + i] = d;
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(Array::new(vec![n, n], out)?, Op::PairwiseDistance(x), tracked))
    }

    /// `[N×D]` rows scaled to unit L2 norm; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.ndim() != 2 {
            return Err(Error::dim("l2_normalize_rows", v.shape(), &[0, 0]));
        }
        let mut out = v.clone();
        let width = v.dim(1).max(1);
        for row in out.data_mut().chunks_mut(width) {
            let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|a| *a /= norm);
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::NormalizeRows(x), tracked))
    }

    /// Picks flat (row-major) elements into a 1-D array.
    pub fn gather(&mut self, x: Var, flat_indices: Vec<usize>) -> Result<Var> {
        let v = self.value(x);
        if let Some(&bad) = flat_indices.iter().find(|&&i| i >= v.len()) {
            return Err(Error::dim("gather", v.shape(), &[bad]));
        }
        let out = Array::from_vec(flat_indices.iter().map(|&i| v.data()[i]).collect());
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::Gather(x, flat_indices), tracked))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, dy: &Array, grads: &mut [Option<Array>]) -> Result<()> {
        let mut acc = |var: Var, g: Array| {
            if !self.nodes[var.0].tracked {
                return;
            }
            match &mut grads[var.0] {
                Some(existing) => existing
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(e, d)| *e += d),
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
                if self.is_tracked(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, dy.data(), false, vb.data(), true, 0.0, &mut da);
                    acc(*a, Array::new(vec![m, k], da)?);
                }
                if self.is_tracked(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), true, dy.data(), false, 0.0, &mut db);
                    acc(*b, Array::new(vec![k, n], db)?);
                }
            }
            Op::AddBias(x, bias) => {
                acc(*x, dy.clone());
                let s = dy.shape();
                let (channels, inner) = (s[1], s[2..].iter().product::<usize>());
                let mut db = vec![0.0; channels];
                for (i, g) in dy.data().iter().enumerate() {
                    db[(i / inner) % channels] += g;
                }
                acc(*bias, Array::from_vec(db));
            }
            Op::Conv2d(rec) => {
                let g = rec.geom;
                let (patch, op) = (g.patch(), g.out_pixels());
                let kernel = self.value(rec.kernel);
                let want_x = self.is_tracked(rec.input);
                let want_k = self.is_tracked(rec.kernel);
                let mut dk = vec![0.0; g.k * patch];
                let mut dx = vec![0.0; if want_x { g.n * g.c * g.h * g.w } else { 0 }];
                let mut dcols = vec![0.0; patch * op];
                for img in 0..g.n {
                    let dout = &dy.data()[img * g.k * op..(img + 1) * g.k * op];
                    if want_k {
                        let cols = &rec.cols[img * patch * op..(img + 1) * patch * op];
                        gemm(g.k, op, patch, dout, false, cols, true, 1.0, &mut dk);
                    }
                    if want_x {
                        gemm(patch, g.k, op, kernel.data(), true, dout, false, 0.0, &mut dcols);
                        let plane = g.c * g.h * g.w;
                        g.col2im(&dcols, &mut dx[img * plane..(img + 1) * plane]);
                    }
                }
                if want_k {
                    acc(rec.kernel, Array::new(kernel.shape().to_vec(), dk)?);
                }
                if want_x {
                    acc(rec.input, Array::new(vec![g.n, g.c, g.h, g.w], dx)?);
                }
            }
            Op::Relu(x) => {
                let mut dx = dy.clone();
                dx.data_mut()
                    .iter_mut()
                    .zip(self.value(*x).data())
                    .for_each(|(d, &v)| {
                        if v <= 0.0 {
                            *d = 0.0
                        }
                    });
                acc(*x, dx);
            }
            Op::MulConst(x, factor) => {
                let mut dx = dy.clone();
                dx.data_mut()
                    .iter_mut()
                    .zip(factor.data())
                    .for_each(|(d, f)| *d *= f);
                acc(*x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape().to_vec();
                let area = s[2] * s[3];
                let mut dx = Vec::with_capacity(s.iter().product());
                for &g in dy.data() {
                    dx.extend(std::iter::repeat_n(g / area as f64, area));
                }
                acc(*x, Array::new(s, dx)?);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let width = y.dim(1);
                let mut dx = vec![0.0; y.len()];
                for ((yr, dr), out) in y
                    .data()
                    .chunks(width)
                    .zip(dy.data().chunks(width))
                    .zip(dx.chunks_mut(width))
                {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &dv) in out.iter_mut().zip(yr).zip(dr) {
                        *o = yv * (dv - dot);
                    }
                }
                acc(*x, Array::new(y.shape().to_vec(), dx)?);
            }
            Op::LogClamped(x, floor) => {
                let mut dx = dy.clone();
                dx.data_mut()
                    .iter_mut()
                    .zip(self.value(*x).data())
                    .for_each(|(d, &v)| *d = if v > *floor { *d / v } else { 0.0 });
                acc(*x, dx);
            }
            Op::Softplus(x) => {
                let mut dx = dy.clone();
                dx.data_mut()
                    .iter_mut()
                    .zip(self.value(*x).data())
                    .for_each(|(d, &v)| *d *= sigmoid(v));
                acc(*x, dx);
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = dy.data().iter().zip(vb.data()).map(|(g, v)| g * v).collect();
                let db = dy.data().iter().zip(va.data()).map(|(g, v)| g * v).collect();
                acc(*a, Array::new(va.shape().to_vec(), da)?);
                acc(*b, Array::new(vb.shape().to_vec(), db)?);
            }
            Op::Scale(x, factor) => acc(*x, dy.map(|g| g * factor)),
            Op::Sum(x) => {
                let shape = self.value(*x).shape();
                acc(*x, Array::full(shape, dy.item()));
            }
            Op::PairwiseDistance(x) => {
                let v = self.value(*x);
                let (n, d) = (v.dim(0), v.dim(1));
                let dist = node.value.data();
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..n {
                        let dij = dist[i * n + j];
                        if i == j || dij == 0.0 {
                            continue;
                        }
                        let coef = dy.data()[i * n + j] / dij;
                        if coef == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            let diff = v.data()[i * d + t] - v.data()[j * d + t];
                            dx[i * d + t] += coef * diff;
                            dx[j * d + t] -= coef * diff;
                        }
                    }
                }
                acc(*x, Array::new(vec![n, d], dx)?);
            }
            Op::NormalizeRows(x) => {
                // d(x/|x|) = (g − y·(g·y)) / |x|
                let (v, y) = (self.value(*x), &node.value);
                let width = v.dim(1).max(1);
                let mut dx = vec![0.0; v.len()];
                for (((xr, yr), gr), out) in v
                    .data()
                    .chunks(width)
                    .zip(y.data().chunks(width))
                    .zip(dy.data().chunks(width))
                    .zip(dx.chunks_mut(width))
                {
                    let norm = xr.iter().map(|a| a * a).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &g) in out.iter_mut().zip(yr).zip(gr) {
                        *o = (g - yv * dot) / norm;
                    }
                }
                acc(*x, Array::new(v.shape().to_vec(), dx)?);
            }
            Op::Gather(x, indices) => {
                let shape = self.value(*x).shape();
                let mut dx = Array::zeros(shape);
                for (&i, g) in indices.iter().zip(dy.data()) {
                    dx.data_mut()[i] += g;
                }
                acc(*x, dx);
            }
        }
        Ok(())
    }
}

/// Row-wise max-shifted softmax of a 2-D array.
pub fn softmax_rows(x: &Array) -> Result<Array> {
    if x.ndim() != 2 {
        return Err(Error::dim("softmax", x.shape(), &[0, 0]));
    }
    let width = x.dim(1);
    let mut out = x.clone();
    if width == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_mut(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
