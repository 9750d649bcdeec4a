use std::sync::atomic::{AtomicU32, Ordering};

use rand::Rng;

use super::ops::{self, ConvDims};
use super::{ParamStore, Real, Result, StoreKey, Tensor, TensorError, UpsampleMode};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    fn index(self) -> usize {
        self.idx as usize
    }
}

#[derive(Clone, Debug)]
enum Leaf {
    Constant,
    Input,
    Param { store: StoreKey, id: usize },
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf(Leaf),
    Dense { x: usize, w: usize, b: usize },
    Conv { x: usize, k: usize, b: usize },
    Upsample { x: usize, mode: UpsampleMode },
    LeakyRelu { x: usize, slope: T },
    Sigmoid { x: usize },
    Tanh { x: usize },
    Softmax { x: usize, outer: usize, len: usize, inner: usize },
    Log { x: usize, floor: T },
    Dropout { x: usize, scale: Vec<T> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale { x: usize, c: T },
    AddScalar { x: usize },
    Sum { x: usize },
    SumLast { x: usize, n: usize },
    Reshape { x: usize },
    Concat { a: usize, b: usize, outer: usize, na: usize, nb: usize },
    SelectRows { x: usize, rows: Vec<usize>, cols: usize },
    Gather { x: usize, idx: Vec<usize>, cols: usize },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Element-wise activation selector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    SoftmaxRowwise,
    Log,
}

/// Records one forward computation in topological order so it can be
/// differentiated in reverse.
#[derive(Debug)]
pub struct Tape<T: Real> {
    id: u32,
    nodes: Vec<Node<T>>,
    /// Accumulated gradients of leaf nodes (inputs and parameters).
    leaf_grads: Vec<Option<Vec<T>>>,
    frozen: Vec<StoreKey>,
    recording: bool,
    log_floor: T,
    clamped: usize,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A tape that records everything needed for [`Tape::backward`].
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A tape for forward-only evaluation; `backward` is rejected.
    pub fn inference() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            frozen: Vec::new(),
            recording,
            log_floor: T::lit(1e-8),
            clamped: 0,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Parameters of a frozen store enter the tape as constants.
    pub fn freeze(&mut self, key: StoreKey) {
        if !self.frozen.contains(&key) {
            self.frozen.push(key);
        }
    }

    pub fn set_log_floor(&mut self, floor: f64) {
        self.log_floor = T::lit(floor);
    }

    /// Number of log inputs that were clamped at the floor so far.
    pub fn clamped_logs(&self) -> usize {
        self.clamped
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.recording,
        });
        self.leaf_grads.push(None);
        Var {
            tape: self.id,
            idx: (self.nodes.len() - 1) as u32,
        }
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(TensorError::NotOnTape(v));
        }
        Ok(&self.nodes[v.index()])
    }

    fn check(&self, v: Var) -> Result<usize> {
        self.node(v).map(|_| v.index())
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let needs = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.push(value, op, needs)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.index()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.index()].value.shape()
    }

    /// Accumulated gradient of a leaf created with [`Tape::input`] or
    /// [`Tape::param`] (parameters until flushed).
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(v.index())?.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- leaves -------------------------------------------------------

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf(Leaf::Constant), false)
    }

    /// A leaf that collects its own gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf(Leaf::Input), true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: usize) -> Var {
        let key = store.key();
        let trainable = !self.frozen.contains(&key);
        self.push(
            store.value(id).clone(),
            Op::Leaf(Leaf::Param { store: key, id }),
            trainable,
        )
    }

    /// Copy of `v` with no gradient path back.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ---- layers -------------------------------------------------------

    /// `x [batch, in] · w [in, out] + b [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                left: xs.to_vec(),
                right: ws.to_vec(),
            });
        }
        if bs != [ws[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "dense bias",
                left: ws.to_vec(),
                right: bs.to_vec(),
            });
        }
        let (batch, nin, nout) = (xs[0], xs[1], ws[1]);
        let out = ops::dense_forward(
            self.nodes[xi].value.data(),
            self.nodes[wi].value.data(),
            self.nodes[bi].value.data(),
            batch,
            nin,
            nout,
        );
        let t = Tensor::new(vec![batch, nout], out)?;
        Ok(self.derived(t, Op::Dense { x: xi, w: wi, b: bi }, &[xi, wi, bi]))
    }

    /// Same-padded, stride-1 cross-correlation.
    /// `x [n, cin, h, w]`, `k [cout, cin, s, s]` with odd `s`, `b [cout]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let (xi, ki, bi) = (self.check(x)?, self.check(k)?, self.check(b)?);
        let dims = self.conv_dims(xi, ki, bi)?;
        let out = ops::conv_forward(
            self.nodes[xi].value.data(),
            self.nodes[ki].value.data(),
            self.nodes[bi].value.data(),
            &dims,
        );
        let t = Tensor::new(vec![dims.batch, dims.cout, dims.h, dims.w], out)?;
        Ok(self.derived(t, Op::Conv { x: xi, k: ki, b: bi }, &[xi, ki, bi]))
    }

    fn conv_dims(&self, xi: usize, ki: usize, bi: usize) -> Result<ConvDims> {
        let xs = self.nodes[xi].value.shape();
        let ks = self.nodes[ki].value.shape();
        let bs = self.nodes[bi].value.shape();
        if ks.len() == 4 && ks[2].is_multiple_of(2) {
            return Err(TensorError::EvenKernel(ks[2]));
        }
        if xs.len() != 4 || ks.len() != 4 || ks[1] != xs[1] || ks[2] != ks[3] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: xs.to_vec(),
                right: ks.to_vec(),
            });
        }
        if bs != [ks[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                left: ks.to_vec(),
                right: bs.to_vec(),
            });
        }
        Ok(ConvDims {
            batch: xs[0],
            cin: xs[1],
            cout: ks[0],
            h: xs[2],
            w: xs[3],
            k: ks[2],
        })
    }

    /// Doubles the spatial size of `x [n, c, h, w]`.
    pub fn upsample_double(&mut self, x: Var, mode: UpsampleMode) -> Result<Var> {
        let xi = self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "upsample",
                left: s,
                right: vec![0, 0, 0, 0],
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let data = self.nodes[xi].value.data();
        let t = match mode {
            UpsampleMode::Nearest => {
                Tensor::new(vec![n, c, 2 * h, 2 * w], ops::upsample_nearest(data, n * c, h, w))?
            }
            UpsampleMode::SubPixel => {
                if c % 4 != 0 {
                    return Err(TensorError::SubPixelChannels(c));
                }
                let out = ops::upsample_subpixel(data, n, c / 4, h, w);
                Tensor::new(vec![n, c / 4, 2 * h, 2 * w], out)?
            }
        };
        Ok(self.derived(t, Op::Upsample { x: xi, mode }, &[xi]))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::LeakyRelu(slope) => self.leaky_relu(x, slope),
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Tanh => self.tanh(x),
            Activation::SoftmaxRowwise => self.softmax_rows(x),
            Activation::Log => self.log(x),
        }
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let slope = T::lit(slope);
        let src = &self.nodes[xi].value;
        let t = Tensor::new(
            src.shape().to_vec(),
            src.data()
                .iter()
                .map(|&v| if v > T::zero() { v } else { v * slope })
                .collect(),
        )?;
        Ok(self.derived(t, Op::LeakyRelu { x: xi, slope }, &[xi]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let t = self.nodes[xi].value.map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        Ok(self.derived(t, Op::Sigmoid { x: xi }, &[xi]))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let t = self.nodes[xi].value.map(|v| v.tanh());
        Ok(self.derived(t, Op::Tanh { x: xi }, &[xi]))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let len = *s.last().unwrap_or(&1);
        let outer = s.iter().product::<usize>() / len;
        self.softmax_view(x, outer, len, 1, None)
    }

    /// Softmax over `axis`; entries whose index along `axis` is masked out
    /// get probability exactly 0.
    pub fn softmax_axis(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::Invalid(format!(
                "softmax axis {axis} out of range for {s:?}"
            )));
        }
        let outer = s[..axis].iter().product();
        let inner = s[axis + 1..].iter().product();
        self.softmax_view(x, outer, s[axis], inner, mask)
    }

    fn softmax_view(
        &mut self,
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let xi = self.check(x)?;
        if let Some(m) = mask {
            if m.len() != len || !m.iter().any(|&a| a) {
                return Err(TensorError::Invalid(format!(
                    "softmax mask must have {len} entries with at least one allowed"
                )));
            }
        }
        let src = &self.nodes[xi].value;
        let out = ops::softmax(src.data(), outer, len, inner, mask);
        let t = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.derived(t, Op::Softmax { x: xi, outer, len, inner }, &[xi]))
    }

    /// Natural log with inputs below the floor clamped to it.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let floor = self.log_floor;
        let src = &self.nodes[xi].value;
        let mut clamped = 0;
        let data = src
            .data()
            .iter()
            .map(|&v| {
                if v < floor {
                    clamped += 1;
                    floor.ln()
                } else {
                    v.ln()
                }
            })
            .collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        if clamped > 0 {
            self.clamped += clamped;
            log::debug!("log: clamped {clamped} inputs below the floor");
        }
        Ok(self.derived(t, Op::Log { x: xi, floor }, &[xi]))
    }

    /// Inverted dropout. Identity in evaluation mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
        let xi = self.check(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::DropoutRate(rate));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let src = &self.nodes[xi].value;
        let scale: Vec<T> = (0..src.len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = src.data().iter().zip(&scale).map(|(&a, &s)| a * s).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.derived(t, Op::Dropout { x: xi, scale }, &[xi]))
    }

    // ---- element-wise and reductions ----------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok((ai, bi))
    }

    fn zip_with(&self, ai: usize, bi: usize, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (a, b) = (&self.nodes[ai].value, &self.nodes[bi].value);
        Tensor::new(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.same_shape("add", a, b)?;
        let t = self.zip_with(ai, bi, |x, y| x + y)?;
        Ok(self.derived(t, Op::Add(ai, bi), &[ai, bi]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.same_shape("sub", a, b)?;
        let t = self.zip_with(ai, bi, |x, y| x - y)?;
        Ok(self.derived(t, Op::Sub(ai, bi), &[ai, bi]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.same_shape("mul", a, b)?;
        let t = self.zip_with(ai, bi, |x, y| x * y)?;
        Ok(self.derived(t, Op::Mul(ai, bi), &[ai, bi]))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let c = T::lit(c);
        let src = &self.nodes[xi].value;
        let t = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| v * c).collect())?;
        Ok(self.derived(t, Op::Scale { x: xi, c }, &[xi]))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let c = T::lit(c);
        let src = &self.nodes[xi].value;
        let t = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| v + c).collect())?;
        Ok(self.derived(t, Op::AddScalar { x: xi }, &[xi]))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let total = self.nodes[xi].value.data().iter().copied().sum();
        Ok(self.derived(Tensor::scalar(total), Op::Sum { x: xi }, &[xi]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums over the last axis: `[.., n] -> [..]` (a 1-D input gives `[1]`).
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let s = self.shape(x).to_vec();
        let n = *s.last().unwrap_or(&1);
        let out_shape = if s.len() > 1 { s[..s.len() - 1].to_vec() } else { vec![1] };
        let data = self.nodes[xi]
            .value
            .data()
            .chunks(n)
            .map(|c| c.iter().copied().sum())
            .collect();
        let t = Tensor::new(out_shape, data)?;
        Ok(self.derived(t, Op::SumLast { x: xi, n }, &[xi]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let t = self.nodes[xi].value.clone().reshape(shape)?;
        Ok(self.derived(t, Op::Reshape { x: xi }, &[xi]))
    }

    /// Concatenates along axis 1; all other axes must match.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                left: sa,
                right: sb,
            });
        }
        let outer = sa[0];
        let na = sa[1..].iter().product::<usize>();
        let nb = sb[1..].iter().product::<usize>();
        let (da, db) = (self.nodes[ai].value.data(), self.nodes[bi].value.data());
        let mut data = Vec::with_capacity(outer * (na + nb));
        for o in 0..outer {
            data.extend_from_slice(&da[o * na..(o + 1) * na]);
            data.extend_from_slice(&db[o * nb..(o + 1) * nb]);
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let t = Tensor::new(shape, data)?;
        Ok(self.derived(t, Op::Concat { a: ai, b: bi, outer, na, nb }, &[ai, bi]))
    }

    /// Picks rows of `x [b, n]` (repeats allowed): `[rows.len(), n]`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 2 || rows.iter().any(|&r| r >= s[0]) || rows.is_empty() {
            return Err(TensorError::Invalid(format!(
                "select_rows: bad rows for shape {s:?}"
            )));
        }
        let cols = s[1];
        let src = self.nodes[xi].value.data();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let t = Tensor::new(vec![rows.len(), cols], data)?;
        Ok(self.derived(t, Op::SelectRows { x: xi, rows: rows.to_vec(), cols }, &[xi]))
    }

    /// `out[b] = x[b, idx[b]]` for `x [batch, n]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 2 || idx.len() != s[0] || idx.iter().any(|&i| i >= s[1]) {
            return Err(TensorError::Invalid(format!(
                "gather: {} indices for shape {s:?}",
                idx.len()
            )));
        }
        let cols = s[1];
        let src = self.nodes[xi].value.data();
        let data = idx.iter().enumerate().map(|(b, &i)| src[b * cols + i]).collect();
        let t = Tensor::new(vec![s[0]], data)?;
        Ok(self.derived(t, Op::Gather { x: xi, idx: idx.to_vec(), cols }, &[xi]))
    }

    // ---- reverse pass -------------------------------------------------

    /// Propagates d(loss)/d(node) back through the tape. Leaf gradients
    /// accumulate across calls until [`Tape::zero_grad`] or
    /// [`Tape::flush_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.recording {
            return Err(TensorError::NotRecording);
        }
        let root = self.check(loss)?;
        let rs = self.nodes[root].value.shape();
        if self.nodes[root].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(rs.to_vec()));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; root + 1];
        adj[root] = Some(vec![T::one()]);

        for i in (0..=root).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf(leaf) = &self.nodes[i].op {
                if !matches!(leaf, Leaf::Constant) {
                    accumulate(&mut self.leaf_grads[i], g);
                }
                continue;
            }
            for (input, contrib) in self.local_backward(i, &g)? {
                if self.nodes[input].needs_grad {
                    accumulate(&mut adj[input], contrib);
                }
            }
        }
        Ok(())
    }

    /// Moves parameter gradients for `store` off the tape and adds them to
    /// the store's gradient buffers.
    pub fn flush_grads(&mut self, store: &mut ParamStore<T>) {
        let key = store.key();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(Leaf::Param { store: k, id }) = node.op {
                if k == key {
                    if let Some(g) = self.leaf_grads[i].take() {
                        for (dst, v) in store.grad_mut(id).iter_mut().zip(g) {
                            *dst += v;
                        }
                    }
                }
            }
        }
    }

    fn local_backward(&self, i: usize, g: &[T]) -> Result<Vec<(usize, Vec<T>)>> {
        let needs = |j: usize| self.nodes[j].needs_grad;
        let val = |j: usize| self.nodes[j].value.data();
        let out = match &self.nodes[i].op {
            Op::Leaf(_) => Vec::new(),
            Op::Dense { x, w, b } => {
                let s = self.nodes[*x].value.shape();
                let nout = self.nodes[*w].value.shape()[1];
                let grads = ops::dense_backward(
                    g,
                    val(*x),
                    val(*w),
                    s[0],
                    s[1],
                    nout,
                    [needs(*x), needs(*w), needs(*b)],
                );
                collect3([*x, *w, *b], grads)
            }
            Op::Conv { x, k, b } => {
                let dims = self.conv_dims(*x, *k, *b)?;
                let grads = ops::conv_backward(
                    g,
                    val(*x),
                    val(*k),
                    &dims,
                    [needs(*x), needs(*k), needs(*b)],
                );
                collect3([*x, *k, *b], grads)
            }
            Op::Upsample { x, mode } => {
                let s = self.nodes[*x].value.shape();
                let dx = match mode {
                    UpsampleMode::Nearest => {
                        ops::upsample_nearest_backward(g, s[0] * s[1], s[2], s[3])
                    }
                    UpsampleMode::SubPixel => {
                        ops::upsample_subpixel_backward(g, s[0], s[1] / 4, s[2], s[3])
                    }
                };
                vec![(*x, dx)]
            }
            Op::LeakyRelu { x, slope } => {
                let dx = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { gv * *slope })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Sigmoid { x } => {
                let y = self.nodes[i].value.data();
                let dx = y.iter().zip(g).map(|(&v, &gv)| gv * v * (T::one() - v)).collect();
                vec![(*x, dx)]
            }
            Op::Tanh { x } => {
                let y = self.nodes[i].value.data();
                let dx = y.iter().zip(g).map(|(&v, &gv)| gv * (T::one() - v * v)).collect();
                vec![(*x, dx)]
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = self.nodes[i].value.data();
                vec![(*x, ops::softmax_backward(g, y, *outer, *len, *inner))]
            }
            Op::Log { x, floor } => {
                let dx = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v < *floor { T::zero() } else { gv / v })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Dropout { x, scale } => {
                vec![(*x, g.iter().zip(scale).map(|(&a, &s)| a * s).collect())]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
            Op::Mul(a, b) => {
                let da = g.iter().zip(val(*b)).map(|(&gv, &bv)| gv * bv).collect();
                let db = g.iter().zip(val(*a)).map(|(&gv, &av)| gv * av).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale { x, c } => vec![(*x, g.iter().map(|&v| v * *c).collect())],
            Op::AddScalar { x } => vec![(*x, g.to_vec())],
            Op::Sum { x } => vec![(*x, vec![g[0]; self.nodes[*x].value.len()])],
            Op::SumLast { x, n } => {
                let dx = g.iter().flat_map(|&v| std::iter::repeat_n(v, *n)).collect();
                vec![(*x, dx)]
            }
            Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::Concat { a, b, outer, na, nb } => {
                let mut da = Vec::with_capacity(outer * na);
                let mut db = Vec::with_capacity(outer * nb);
                for o in 0..*outer {
                    let row = &g[o * (na + nb)..(o + 1) * (na + nb)];
                    da.extend_from_slice(&row[..*na]);
                    db.extend_from_slice(&row[*na..]);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::SelectRows { x, rows, cols } => {
                let mut dx = vec![T::zero(); self.nodes[*x].value.len()];
                for (k, &r) in rows.iter().enumerate() {
                    for c in 0..*cols {
                        dx[r * cols + c] += g[k * cols + c];
                    }
                }
                vec![(*x, dx)]
            }
            Op::Gather { x, idx, cols } => {
                let mut dx = vec![T::zero(); self.nodes[*x].value.len()];
                for (b, &c) in idx.iter().enumerate() {
                    dx[b * cols + c] += g[b];
                }
                vec![(*x, dx)]
            }
        };
        Ok(out)
    }
}

fn collect3<T>(ids: [usize; 3], grads: [Option<Vec<T>>; 3]) -> Vec<(usize, Vec<T>)> {
    ids.into_iter()
        .zip(grads)
        .filter_map(|(i, g)| g.map(|g| (i, g)))
        .collect()
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
        None => *slot = Some(g),
    }
}
