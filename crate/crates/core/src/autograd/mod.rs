//! A small reverse-mode differentiation tape over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse and accumulates adjoints. Parameters enter the
//! tape by name so that gradients can be collected per entry of a
//! [`ParameterStore`](crate::network::ParameterStore).

mod conv;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Whether parameters entering the tape are differentiated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Parameters are leaves that receive gradients.
    Train,
    /// Parameters are constants; intermediate values may be released.
    Frozen,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Scale(Var, f64),
    ScaleChannels {
        x: Var,
        s: Var,
    },
    ScaleSpatial {
        x: Var,
        m: Var,
    },
    SpatialMean(Var),
    SpatialMax {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelMean(Var),
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Crop {
        x: Var,
        y0: usize,
        x0: usize,
    },
    InvertAsm {
        hazy: Var,
        t: Var,
        a: Var,
        t_min: f64,
    },
    SmoothL1Mean {
        a: Var,
        b: Var,
    },
    SquaredErrorMean {
        a: Var,
        b: Var,
    },
    AbsErrorSum {
        a: Var,
        b: Var,
        per: f64,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    mode: GradMode,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Smooth-L1 penalty: quadratic below unit error, linear above.
#[inline]
pub fn huber(e: f64) -> f64 {
    let a = e.abs();
    if a < 1.0 {
        0.5 * e * e
    } else {
        a - 0.5
    }
}

#[inline]
fn huber_slope(e: f64) -> f64 {
    if e.abs() < 1.0 {
        e
    } else {
        e.signum()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new(mode: GradMode) -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            mode,
        }
    }

    pub fn mode(&self) -> GradMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn any_needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.needs(v))
    }

    /// Forward value of `v`.
    ///
    /// Panics if the value was released by [`Graph::release_since`].
    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0]
            .value
            .as_ref()
            .expect("value of a released node")
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A leaf that always receives a gradient, regardless of mode.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Param, true)
    }

    /// Enters a named parameter; repeated calls return the same node.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = match self.mode {
            GradMode::Train => self.push(value.clone(), Op::Param, true),
            GradMode::Frozen => self.push(value.clone(), Op::Constant, false),
        };
        self.params.insert(name.to_string(), v);
        v
    }

    /// Parameter nodes entered so far, by name.
    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Marks the current end of the tape for [`Graph::release_since`].
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// In frozen mode, drops the values of nodes recorded since `mark`,
    /// except those in `keep` and the parameters. A no-op while training,
    /// since backward needs them.
    pub fn release_since(&mut self, mark: usize, keep: &[Var]) {
        if self.mode == GradMode::Train {
            return;
        }
        let mut keep_mask = vec![false; self.nodes.len()];
        for v in keep.iter().chain(self.params.values()) {
            keep_mask[v.0] = true;
        }
        for (node, keep) in self.nodes.iter_mut().zip(keep_mask).skip(mark) {
            if !keep {
                node.value = None;
            }
        }
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = conv::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let needs = self.any_needs(&parents);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            needs,
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = conv::conv_transpose2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let needs = self.any_needs(&parents);
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, factor), needs)
    }

    /// Multiplies each `(n, c)` plane of `x` by `s[n, c, 0, 0]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let xv = self.value(x);
        let sv = self.value(s);
        let [n, c, _, _] = xv.shape();
        sv.expect_shape([n, c, 1, 1], "channel gate")?;
        let mut out = xv.clone();
        for b in 0..n {
            for ch in 0..c {
                let g = sv.at([b, ch, 0, 0]);
                out.plane_mut(b, ch).iter_mut().for_each(|v| *v *= g);
            }
        }
        let needs = self.any_needs(&[x, s]);
        Ok(self.push(out, Op::ScaleChannels { x, s }, needs))
    }

    /// Multiplies every channel of `x` by the single-channel map `m`.
    pub fn scale_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let xv = self.value(x);
        let mv = self.value(m);
        let [n, c, h, w] = xv.shape();
        mv.expect_shape([n, 1, h, w], "spatial gate")?;
        let mut out = xv.clone();
        for b in 0..n {
            let gate = mv.plane(b, 0).to_vec();
            for ch in 0..c {
                for (v, g) in out.plane_mut(b, ch).iter_mut().zip(&gate) {
                    *v *= g;
                }
            }
        }
        let needs = self.any_needs(&[x, m]);
        Ok(self.push(out, Op::ScaleSpatial { x, m }, needs))
    }

    /// Per-plane mean: `(N, C, H, W) → (N, C, 1, 1)`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, _, _] = xv.shape();
        let p = xv.plane_len() as f64;
        let out = Tensor::from_fn([n, c, 1, 1], |[b, ch, _, _]| {
            order_free_sum(&mut xv.plane(b, ch).to_vec()) / p
        });
        let needs = self.needs(x);
        self.push(out, Op::SpatialMean(x), needs)
    }

    /// Per-plane maximum: `(N, C, H, W) → (N, C, 1, 1)`.
    pub fn spatial_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, _, _] = xv.shape();
        let mut argmax = Vec::with_capacity(n * c);
        let mut out = Tensor::zeros([n, c, 1, 1]);
        for b in 0..n {
            for ch in 0..c {
                let (i, m) = first_max(xv.plane(b, ch));
                argmax.push(i);
                out.set([b, ch, 0, 0], m);
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::SpatialMax { x, argmax }, needs)
    }

    /// Mean across channels: `(N, C, H, W) → (N, 1, H, W)`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let mut out = Tensor::zeros([n, 1, h, w]);
        let mut column = Vec::with_capacity(c);
        for b in 0..n {
            for p in 0..h * w {
                column.clear();
                column.extend((0..c).map(|ch| xv.plane(b, ch)[p]));
                out.plane_mut(b, 0)[p] = order_free_sum(&mut column) / c as f64;
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::ChannelMean(x), needs)
    }

    /// Maximum across channels: `(N, C, H, W) → (N, 1, H, W)`.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let p = h * w;
        let mut out = Tensor::full([n, 1, h, w], f64::NEG_INFINITY);
        let mut argmax = vec![0usize; n * p];
        for b in 0..n {
            for ch in 0..c {
                let src = xv.plane(b, ch);
                let dst = out.plane_mut(b, 0);
                for i in 0..p {
                    if src[i] > dst[i] {
                        dst[i] = src[i];
                        argmax[b * p + i] = ch;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::ChannelMax { x, argmax }, needs)
    }

    /// 2×2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Input(format!(
                "max pool needs even size, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for b in 0..n {
            for ch in 0..c {
                let src = xv.plane(b, ch);
                let dst = out.plane_mut(b, ch);
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut best = (2 * y) * w + 2 * xx;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let i = (2 * y + dy) * w + 2 * xx + dx;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                        dst[y * wo + xx] = src[best];
                        argmax.push(best);
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, needs))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&values)?;
        let needs = self.any_needs(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), needs))
    }

    /// Channels `[start, start + count)`.
    pub fn slice_channels(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        if start + count > c {
            return Err(Error::Input(format!(
                "channel slice {start}..{} of {c}",
                start + count
            )));
        }
        let mut data = Vec::with_capacity(n * count * h * w);
        for b in 0..n {
            for ch in start..start + count {
                data.extend_from_slice(xv.plane(b, ch));
            }
        }
        let out = Tensor::from_vec([n, count, h, w], data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::SliceChannels { x, start }, needs))
    }

    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let out = self.value(x).crop(y0, x0, h, w)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Crop { x, y0, x0 }, needs))
    }

    /// Scattering-model inversion `J = (I − A·(1 − t')) / t'`, `t' = max(t, t_min)`,
    /// with `hazy: (N, C, H, W)`, `t: (N, 1, H, W)` and `a: (N, 1, 1, 1)`.
    pub fn invert_asm(&mut self, hazy: Var, t: Var, a: Var, t_min: f64) -> Result<Var> {
        let iv = self.value(hazy);
        let tv = self.value(t);
        let av = self.value(a);
        let [n, c, h, w] = iv.shape();
        tv.expect_shape([n, 1, h, w], "transmission")?;
        av.expect_shape([n, 1, 1, 1], "airlight")?;
        let mut out = iv.clone();
        for b in 0..n {
            let air = av.at([b, 0, 0, 0]);
            let tp = tv.plane(b, 0).to_vec();
            for ch in 0..c {
                for (v, &tt) in out.plane_mut(b, ch).iter_mut().zip(&tp) {
                    let tt = tt.max(t_min);
                    *v = (*v - air * (1.0 - tt)) / tt;
                }
            }
        }
        let needs = self.any_needs(&[hazy, t, a]);
        Ok(self.push(out, Op::InvertAsm { hazy, t, a, t_min }, needs))
    }

    /// Mean smooth-L1 penalty of `a − b` over every element.
    pub fn smooth_l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        av.expect_shape(bv.shape(), "smooth-l1")?;
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(p, q)| huber(p - q))
            .sum();
        let out = Tensor::scalar(s / av.len() as f64);
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(out, Op::SmoothL1Mean { a, b }, needs))
    }

    /// Mean of `(a − b)²` over every element.
    pub fn squared_error_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        av.expect_shape(bv.shape(), "squared error")?;
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(p, q)| (p - q) * (p - q))
            .sum();
        let out = Tensor::scalar(s / av.len() as f64);
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(out, Op::SquaredErrorMean { a, b }, needs))
    }

    /// `Σ|a − b| / per`.
    pub fn abs_error_sum(&mut self, a: Var, b: Var, per: f64) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        av.expect_shape(bv.shape(), "absolute error")?;
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(p, q)| (p - q).abs())
            .sum();
        let out = Tensor::scalar(s / per);
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(out, Op::AbsErrorSum { a, b, per }, needs))
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, wgt) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::Input("weighted sum over non-scalar".into()));
            }
            s += wgt * t.data()[0];
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let needs = self.any_needs(&vars);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), needs))
    }

    /// Back-propagates from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::Input("backward needs a scalar root".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every named parameter reached by `backward`.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.nodes[i].value.as_ref().expect("released node on tape");
        let mut acc = |v: Var, delta: Tensor| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Constant | Op::Param => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (dx, dw, db) = conv::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.needs(*x),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (dx, dw, db) = conv::conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.needs(*x),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::Relu(x) => {
                let d = self
                    .value(*x)
                    .zip_map(g, |v, gv| if v > 0.0 { gv } else { 0.0 })
                    .expect("relu shapes");
                acc(*x, d);
            }
            Op::Sigmoid(x) => {
                let d = out
                    .zip_map(g, |y, gv| gv * y * (1.0 - y))
                    .expect("sigmoid shapes");
                acc(*x, d);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Scale(x, f) => acc(*x, g.map(|v| v * f)),
            Op::ScaleChannels { x, s } => {
                let xv = self.value(*x);
                let sv = self.value(*s);
                let [n, c, _, _] = xv.shape();
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for b in 0..n {
                        for ch in 0..c {
                            let gate = sv.at([b, ch, 0, 0]);
                            dx.plane_mut(b, ch).iter_mut().for_each(|v| *v *= gate);
                        }
                    }
                    acc(*x, dx);
                }
                if self.needs(*s) {
                    let ds = Tensor::from_fn([n, c, 1, 1], |[b, ch, _, _]| {
                        dot(xv.plane(b, ch), g.plane(b, ch))
                    });
                    acc(*s, ds);
                }
            }
            Op::ScaleSpatial { x, m } => {
                let xv = self.value(*x);
                let mv = self.value(*m);
                let [n, c, h, w] = xv.shape();
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for b in 0..n {
                        let gate = mv.plane(b, 0);
                        for ch in 0..c {
                            for (v, gt) in dx.plane_mut(b, ch).iter_mut().zip(gate) {
                                *v *= gt;
                            }
                        }
                    }
                    acc(*x, dx);
                }
                if self.needs(*m) {
                    let mut dm = Tensor::zeros([n, 1, h, w]);
                    for b in 0..n {
                        for ch in 0..c {
                            let xs = xv.plane(b, ch);
                            let gs = g.plane(b, ch);
                            for ((d, xx), gg) in dm.plane_mut(b, 0).iter_mut().zip(xs).zip(gs) {
                                *d += xx * gg;
                            }
                        }
                    }
                    acc(*m, dm);
                }
            }
            Op::SpatialMean(x) => {
                let shape = self.value(*x).shape();
                let p = (shape[2] * shape[3]) as f64;
                let d = Tensor::from_fn(shape, |[b, ch, _, _]| g.at([b, ch, 0, 0]) / p);
                acc(*x, d);
            }
            Op::SpatialMax { x, argmax } => {
                let shape = self.value(*x).shape();
                let mut d = Tensor::zeros(shape);
                for b in 0..shape[0] {
                    for ch in 0..shape[1] {
                        let k = argmax[b * shape[1] + ch];
                        d.plane_mut(b, ch)[k] = g.at([b, ch, 0, 0]);
                    }
                }
                acc(*x, d);
            }
            Op::ChannelMean(x) => {
                let shape = self.value(*x).shape();
                let c = shape[1] as f64;
                let d = Tensor::from_fn(shape, |[b, _, y, xx]| g.at([b, 0, y, xx]) / c);
                acc(*x, d);
            }
            Op::ChannelMax { x, argmax } => {
                let shape = self.value(*x).shape();
                let p = shape[2] * shape[3];
                let mut d = Tensor::zeros(shape);
                for b in 0..shape[0] {
                    let gp = g.plane(b, 0);
                    for k in 0..p {
                        d.plane_mut(b, argmax[b * p + k])[k] = gp[k];
                    }
                }
                acc(*x, d);
            }
            Op::MaxPool2 { x, argmax } => {
                let shape = self.value(*x).shape();
                let mut d = Tensor::zeros(shape);
                let po = g.plane_len();
                for b in 0..shape[0] {
                    for ch in 0..shape[1] {
                        let base = (b * shape[1] + ch) * po;
                        let gp = g.plane(b, ch).to_vec();
                        let dp = d.plane_mut(b, ch);
                        for k in 0..po {
                            dp[argmax[base + k]] += gp[k];
                        }
                    }
                }
                acc(*x, d);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let shape = self.value(p).shape();
                    if self.needs(p) {
                        let [n, c, h, w] = shape;
                        let mut data = Vec::with_capacity(n * c * h * w);
                        for b in 0..n {
                            for ch in start..start + c {
                                data.extend_from_slice(g.plane(b, ch));
                            }
                        }
                        acc(p, Tensor::from_vec(shape, data).expect("concat grad"));
                    }
                    start += shape[1];
                }
            }
            Op::SliceChannels { x, start } => {
                let shape = self.value(*x).shape();
                let mut d = Tensor::zeros(shape);
                for b in 0..shape[0] {
                    for ch in 0..g.channels() {
                        d.plane_mut(b, start + ch).copy_from_slice(g.plane(b, ch));
                    }
                }
                acc(*x, d);
            }
            Op::Crop { x, y0, x0 } => {
                let shape = self.value(*x).shape();
                let [_, _, h, w] = g.shape();
                let mut d = Tensor::zeros(shape);
                for b in 0..shape[0] {
                    for ch in 0..shape[1] {
                        let gp = g.plane(b, ch);
                        let dp = d.plane_mut(b, ch);
                        for y in 0..h {
                            let row = (y0 + y) * shape[3] + x0;
                            dp[row..row + w].copy_from_slice(&gp[y * w..(y + 1) * w]);
                        }
                    }
                }
                acc(*x, d);
            }
            Op::InvertAsm { hazy, t, a, t_min } => {
                let iv = self.value(*hazy);
                let tv = self.value(*t);
                let av = self.value(*a);
                let [n, c, h, w] = iv.shape();
                let mut di = Tensor::zeros(iv.shape());
                let mut dt = Tensor::zeros([n, 1, h, w]);
                let mut da = Tensor::zeros([n, 1, 1, 1]);
                for b in 0..n {
                    let air = av.at([b, 0, 0, 0]);
                    let mut da_b = 0.0;
                    for ch in 0..c {
                        let ip = iv.plane(b, ch);
                        let gp = g.plane(b, ch);
                        for k in 0..h * w {
                            let raw = tv.plane(b, 0)[k];
                            let tt = raw.max(*t_min);
                            di.plane_mut(b, ch)[k] = gp[k] / tt;
                            if raw >= *t_min {
                                dt.plane_mut(b, 0)[k] += -gp[k] * (ip[k] - air) / (tt * tt);
                            }
                            da_b += gp[k] * (1.0 - 1.0 / tt);
                        }
                    }
                    da.set([b, 0, 0, 0], da_b);
                }
                acc(*hazy, di);
                acc(*t, dt);
                acc(*a, da);
            }
            Op::SmoothL1Mean { a, b } => {
                let gs = g.data()[0];
                let av = self.value(*a);
                let n = av.len() as f64;
                let d = av
                    .zip_map(self.value(*b), |p, q| gs * huber_slope(p - q) / n)
                    .expect("smooth-l1 shapes");
                acc(*b, d.map(|v| -v));
                acc(*a, d);
            }
            Op::SquaredErrorMean { a, b } => {
                let gs = g.data()[0];
                let av = self.value(*a);
                let n = av.len() as f64;
                let d = av
                    .zip_map(self.value(*b), |p, q| gs * 2.0 * (p - q) / n)
                    .expect("squared error shapes");
                acc(*b, d.map(|v| -v));
                acc(*a, d);
            }
            Op::AbsErrorSum { a, b, per } => {
                let gs = g.data()[0];
                let d = self
                    .value(*a)
                    .zip_map(self.value(*b), |p, q| gs * sign(p - q) / per)
                    .expect("absolute error shapes");
                acc(*b, d.map(|v| -v));
                acc(*a, d);
            }
            Op::WeightedSum(terms) => {
                let gs = g.data()[0];
                for &(v, wgt) in terms {
                    acc(v, Tensor::scalar(gs * wgt));
                }
            }
        }
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index and value of the first maximum; ties resolve to the lowest index.
fn first_max(xs: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    (best, xs[best])
}

/// Sum that does not depend on the order of its terms, so pooling is exactly
/// invariant under permutations of the pooled axis.
fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}
