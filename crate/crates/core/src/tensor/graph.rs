//! Recorded-operation tape for reverse-mode differentiation.

use std::sync::Arc;

use super::ops::{self, ConvGeom};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};
use crate::ssm::selective::{self, ZohRule};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Silu,
    Sigmoid,
    Relu,
    Softplus,
    Exp,
    Neg,
    Abs,
}

enum Op<T: Real> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Unary {
        x: Var,
        kind: Unary,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    MulConst(Var, Tensor<T>),
    MulChannel {
        x: Var,
        gate: Var,
    },
    Gap(Var),
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
    },
    Upsample2x(Var),
    Gather {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    SegmentMaxScatter {
        x: Var,
        argmax: Vec<usize>,
    },
    SelectiveScan {
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        rule: ZohRule,
        states: Vec<T>,
    },
    Sum(Var),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
}

/// A tape of values and the operations that produced them.
///
/// Leaves are pushed first (parameters of a bound [`ParamStore`] occupy the
/// leading indices), then every operator call appends one node.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: usize,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// One pillar: the contiguous row range of its points in the per-point
/// matrix and the flat spatial cell it scatters to.
#[derive(Clone, Copy, Debug)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub cell: usize,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: 0,
        }
    }

    /// A graph whose first leaves are the parameters of `store`, in order.
    pub fn with_params(store: &ParamStore<T>) -> Self {
        let mut g = Self::new();
        for (_, p) in store.iter() {
            g.leaf(p.value.clone());
        }
        g.params = store.len();
        g
    }

    /// A graph whose first leaves are `inputs`, in order.
    pub fn from_leaves(inputs: &[Tensor<T>]) -> Self {
        let mut g = Self::new();
        for t in inputs {
            g.leaf(t.clone());
        }
        g.params = inputs.len();
        g
    }

    pub fn param(&self, id: ParamId) -> Var {
        assert!(
            id.0 < self.params,
            "parameter {} not bound to this graph ({} bound)",
            id.0,
            self.params
        );
        Var(id.0)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    // ----- operators -------------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
            groups,
        )?;
        let y = ops::conv2d_raw(&geom, self.value(x), self.value(w), b.map(|b| self.value(b)));
        Ok(self.push(y, Op::Conv2d { x, w, b, geom }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (y, xhat, rstd) =
            ops::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// `x [rows, in] · wᵀ [in, out] + b` for a weight stored as `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (&[rows, din], &[dout, din_w]) = (xv.shape(), wv.shape()) else {
            return Err(Error::contract(
                "linear",
                format!("expected rank-2 operands, got {:?} and {:?}", xv.shape(), wv.shape()),
            ));
        };
        if din != din_w {
            return Err(Error::shape("linear weight", &[dout, din], wv.shape()));
        }
        let mut y = Tensor::zeros(&[rows, dout]);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return Err(Error::shape("linear bias", &[dout], bv.shape()));
            }
            for row in y.data_mut().chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        let (xd, wd) = (xv.data(), wv.data());
        for (r, yrow) in y.data_mut().chunks_mut(dout).enumerate() {
            let xrow = &xd[r * din..][..din];
            for (o, yo) in yrow.iter_mut().enumerate() {
                let wrow = &wd[o * din..][..din];
                *yo += xrow.iter().zip(wrow).map(|(a, b)| *a * *b).sum::<T>();
            }
        }
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let y = self.value(x).map(|v| unary_forward(kind, v));
        self.push(y, Op::Unary { x, kind })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let y = Tensor::from_fn(av.shape(), |i| av.data()[i] + bv.data()[i]);
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let y = Tensor::from_fn(av.shape(), |i| av.data()[i] * bv.data()[i]);
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let y = self.value(x).map(|v| v * s);
        self.push(y, Op::Scale(x, s))
    }

    /// `x + c` for a constant tensor `c`.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != c.shape() {
            return Err(Error::shape("add_const", xv.shape(), c.shape()));
        }
        let y = Tensor::from_fn(xv.shape(), |i| xv.data()[i] + c.data()[i]);
        Ok(self.push(y, Op::AddConst(x)))
    }

    /// `x ⊙ c` for a constant tensor `c`.
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != c.shape() {
            return Err(Error::shape("mul_const", xv.shape(), c.shape()));
        }
        let y = Tensor::from_fn(xv.shape(), |i| xv.data()[i] * c.data()[i]);
        Ok(self.push(y, Op::MulConst(x, c)))
    }

    /// Scales every channel of a `[n, c, h, w]` map by `gate [n, c]`.
    pub fn mul_channel(&mut self, x: Var, gate: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).nchw()?;
        if self.shape(gate) != [n, c] {
            return Err(Error::shape("mul_channel gate", &[n, c], self.shape(gate)));
        }
        let (xv, gv) = (self.value(x), self.value(gate));
        let y = Tensor::from_fn(xv.shape(), |i| xv.data()[i] * gv.data()[i / (h * w)]);
        Ok(self.push(y, Op::MulChannel { x, gate }))
    }

    /// Spatial mean per channel: `[n, c, h, w] -> [n, c]`.
    pub fn global_average_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).nchw()?;
        let inv = T::one() / T::c((h * w) as f64);
        let xd = self.value(x).data();
        let y = Tensor::from_fn(&[n, c], |i| {
            xd[i * h * w..][..h * w].iter().copied().sum::<T>() * inv
        });
        Ok(self.push(y, Op::Gap(x)))
    }

    /// Concatenates feature maps (or `[rows, cols]` matrices) along the
    /// channel axis (axis 1).
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat", "no inputs"));
        };
        let lead = self.shape(first)[0];
        let tail: Vec<usize> = self.shape(first)[2..].to_vec();
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() < 2 || s[0] != lead || s[2..] != tail[..] {
                let mut expected = vec![lead, s.get(1).copied().unwrap_or(0)];
                expected.extend(&tail);
                return Err(Error::shape("concat", &expected, s));
            }
            channels += s[1];
        }
        let inner: usize = tail.iter().product();
        let mut shape = vec![lead, channels];
        shape.extend(&tail);
        let mut data = Vec::with_capacity(lead * channels * inner);
        for n in 0..lead {
            for &p in parts {
                let v = self.value(p);
                let block = v.shape()[1] * inner;
                data.extend_from_slice(&v.data()[n * block..][..block]);
            }
        }
        let y = Tensor::new(&shape, data)?;
        Ok(self.push(y, Op::Concat(parts.to_vec())))
    }

    /// Channels `start..start+len` of `x` (axis 1).
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || start + len > s[1] {
            return Err(Error::contract(
                "narrow_channels",
                format!("channels {start}..{} out of range for shape {s:?}", start + len),
            ));
        }
        let inner: usize = s[2..].iter().product();
        let mut shape = s.clone();
        shape[1] = len;
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * len * inner);
        for n in 0..s[0] {
            data.extend_from_slice(&xd[(n * s[1] + start) * inner..][..len * inner]);
        }
        let y = Tensor::new(&shape, data)?;
        Ok(self.push(y, Op::Narrow { x, start }))
    }

    /// Splits along channels into consecutive pieces of the given sizes.
    pub fn split_channels(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let total = self.shape(x).get(1).copied().unwrap_or(0);
        if sizes.iter().sum::<usize>() != total {
            return Err(Error::contract(
                "split_channels",
                format!("sizes {sizes:?} do not sum to {total} channels"),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow_channels(x, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn upsample_nearest_2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).nchw()?;
        let xd = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let y = Tensor::from_fn(&[n, c, h2, w2], |i| {
            let ox = i % w2;
            let oy = (i / w2) % h2;
            let nc = i / (h2 * w2);
            xd[(nc * h + oy / 2) * w + ox / 2]
        });
        Ok(self.push(y, Op::Upsample2x(x)))
    }

    /// `out.data[i] = x.data[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let xd = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= xd.len()) {
            return Err(Error::contract(
                "gather",
                format!("index {bad} out of range for {} values", xd.len()),
            ));
        }
        let y = Tensor::new(shape, index.iter().map(|&i| xd[i]).collect())?;
        Ok(self.push(y, Op::Gather { x, index }))
    }

    /// Channelwise max of each segment of rows of `x [rows, c]`, written to
    /// its cell of a zero `[1, c, h, w]` map.
    pub fn segment_max_scatter(
        &mut self,
        x: Var,
        segments: &[Segment],
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let &[rows, c] = xv.shape() else {
            return Err(Error::contract("segment_max_scatter", "expected [rows, channels]"));
        };
        let hw = h * w;
        let mut y = Tensor::zeros(&[1, c, h, w]);
        let mut argmax = vec![usize::MAX; c * hw];
        let xd = xv.data();
        for s in segments {
            if s.start >= s.end || s.end > rows || s.cell >= hw {
                return Err(Error::contract(
                    "segment_max_scatter",
                    format!("bad segment {s:?} for {rows} rows and {hw} cells"),
                ));
            }
            for ch in 0..c {
                let mut best = s.start;
                for r in s.start + 1..s.end {
                    if xd[r * c + ch] > xd[best * c + ch] {
                        best = r;
                    }
                }
                y.data_mut()[ch * hw + s.cell] = xd[best * c + ch];
                argmax[ch * hw + s.cell] = best * c + ch;
            }
        }
        Ok(self.push(y, Op::SegmentMaxScatter { x, argmax }))
    }

    /// Selective scan over `x [len, d]` with per-step `delta [len, d]`,
    /// continuous diagonal `a [d, m]` and per-step `b, c [len, m]`.
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        rule: ZohRule,
    ) -> Result<Var> {
        let (y, states) = selective::scan_forward(
            self.value(x),
            self.value(delta),
            self.value(a),
            self.value(b),
            self.value(c),
            rule,
        )?;
        Ok(self.push(
            y,
            Op::SelectiveScan {
                x,
                delta,
                a,
                b,
                c,
                rule,
                states,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x))
    }

    // ----- reverse pass ----------------------------------------------------

    /// Back-propagates from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Grads<T>> {
        let seed = self.value(out);
        if seed.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("output must hold one value, has shape {:?}", seed.shape()),
            ));
        }
        self.backward_with(out, Tensor::full(seed.shape(), T::one()))
    }

    /// Back-propagates an explicit output gradient.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Result<Grads<T>> {
        if seed.shape() != self.shape(out) {
            return Err(Error::shape("backward seed", self.shape(out), seed.shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Grads { grads })
    }

    fn backprop_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = ops::conv2d_backward(geom, val(*x), val(*w), gy, b.is_some());
                accum(grads, *x, gx);
                accum(grads, *w, gw);
                if let (Some(b), Some(gb)) = (b, gb) {
                    accum(grads, *b, gb);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let shape = val(*x).nchw().expect("validated in forward");
                let (gx, gg, gb) = ops::layer_norm_backward(shape, val(*gamma), xhat, rstd, gy);
                accum(grads, *x, gx);
                accum(grads, *gamma, gg);
                accum(grads, *beta, gb);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (rows, din) = (xv.shape()[0], xv.shape()[1]);
                let dout = wv.shape()[0];
                let mut gx = Tensor::zeros(xv.shape());
                let mut gw = Tensor::zeros(wv.shape());
                let (xd, wd, gyd) = (xv.data(), wv.data(), gy.data());
                for r in 0..rows {
                    let gxrow = &mut gx.data_mut()[r * din..][..din];
                    for o in 0..dout {
                        let g = gyd[r * dout + o];
                        if g == T::zero() {
                            continue;
                        }
                        for (gxv, wv) in gxrow.iter_mut().zip(&wd[o * din..][..din]) {
                            *gxv += g * *wv;
                        }
                    }
                }
                for o in 0..dout {
                    let gwrow = &mut gw.data_mut()[o * din..][..din];
                    for r in 0..rows {
                        let g = gyd[r * dout + o];
                        if g == T::zero() {
                            continue;
                        }
                        for (gwv, xv) in gwrow.iter_mut().zip(&xd[r * din..][..din]) {
                            *gwv += g * *xv;
                        }
                    }
                }
                accum(grads, *x, gx);
                accum(grads, *w, gw);
                if let Some(b) = b {
                    let mut gb = Tensor::zeros(&[dout]);
                    for row in gyd.chunks(dout) {
                        for (a, g) in gb.data_mut().iter_mut().zip(row) {
                            *a += *g;
                        }
                    }
                    accum(grads, *b, gb);
                }
            }
            Op::Unary { x, kind } => {
                let (xv, yv) = (val(*x), &node.value);
                let gx = Tensor::from_fn(xv.shape(), |i| {
                    gy.data()[i] * unary_derivative(*kind, xv.data()[i], yv.data()[i])
                });
                accum(grads, *x, gx);
            }
            Op::Add(a, b) => {
                accum(grads, *a, gy.clone());
                accum(grads, *b, gy.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                accum(
                    grads,
                    *a,
                    Tensor::from_fn(av.shape(), |i| gy.data()[i] * bv.data()[i]),
                );
                accum(
                    grads,
                    *b,
                    Tensor::from_fn(bv.shape(), |i| gy.data()[i] * av.data()[i]),
                );
            }
            Op::Scale(x, s) => accum(grads, *x, gy.map(|g| g * *s)),
            Op::AddConst(x) => accum(grads, *x, gy.clone()),
            Op::MulConst(x, c) => accum(
                grads,
                *x,
                Tensor::from_fn(c.shape(), |i| gy.data()[i] * c.data()[i]),
            ),
            Op::MulChannel { x, gate } => {
                let (xv, gv) = (val(*x), val(*gate));
                let [_, _, h, w] = xv.nchw().expect("validated in forward");
                let hw = h * w;
                let gx = Tensor::from_fn(xv.shape(), |i| gy.data()[i] * gv.data()[i / hw]);
                let gg = Tensor::from_fn(gv.shape(), |j| {
                    let s = j * hw;
                    (s..s + hw).map(|i| gy.data()[i] * xv.data()[i]).sum()
                });
                accum(grads, *x, gx);
                accum(grads, *gate, gg);
            }
            Op::Gap(x) => {
                let xv = val(*x);
                let [_, _, h, w] = xv.nchw().expect("validated in forward");
                let inv = T::one() / T::c((h * w) as f64);
                let gx = Tensor::from_fn(xv.shape(), |i| gy.data()[i / (h * w)] * inv);
                accum(grads, *x, gx);
            }
            Op::Concat(parts) => {
                let lead = gy.shape()[0];
                let inner: usize = gy.shape()[2..].iter().product();
                let total = gy.shape()[1] * inner;
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let block = pv.shape()[1] * inner;
                    let mut gp = Tensor::zeros(pv.shape());
                    for n in 0..lead {
                        gp.data_mut()[n * block..][..block]
                            .copy_from_slice(&gy.data()[n * total + offset..][..block]);
                    }
                    offset += block;
                    accum(grads, p, gp);
                }
            }
            Op::Narrow { x, start } => {
                let xv = val(*x);
                let s = xv.shape();
                let inner: usize = s[2..].iter().product();
                let len = gy.shape()[1];
                let mut gx = Tensor::zeros(s);
                for n in 0..s[0] {
                    gx.data_mut()[(n * s[1] + start) * inner..][..len * inner]
                        .copy_from_slice(&gy.data()[n * len * inner..][..len * inner]);
                }
                accum(grads, *x, gx);
            }
            Op::Upsample2x(x) => {
                let xv = val(*x);
                let [_, _, h, w] = xv.nchw().expect("validated in forward");
                let (h2, w2) = (2 * h, 2 * w);
                let mut gx = Tensor::zeros(xv.shape());
                for (i, g) in gy.data().iter().enumerate() {
                    let ox = i % w2;
                    let oy = (i / w2) % h2;
                    let nc = i / (h2 * w2);
                    gx.data_mut()[(nc * h + oy / 2) * w + ox / 2] += *g;
                }
                accum(grads, *x, gx);
            }
            Op::Gather { x, index } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                for (g, &i) in gy.data().iter().zip(index.iter()) {
                    gx.data_mut()[i] += *g;
                }
                accum(grads, *x, gx);
            }
            Op::SegmentMaxScatter { x, argmax } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                for (g, &src) in gy.data().iter().zip(argmax) {
                    if src != usize::MAX {
                        gx.data_mut()[src] += *g;
                    }
                }
                accum(grads, *x, gx);
            }
            Op::SelectiveScan {
                x,
                delta,
                a,
                b,
                c,
                rule,
                states,
            } => {
                let g = selective::scan_backward(
                    val(*x),
                    val(*delta),
                    val(*a),
                    val(*b),
                    val(*c),
                    *rule,
                    states,
                    gy,
                );
                accum(grads, *x, g.x);
                accum(grads, *delta, g.delta);
                accum(grads, *a, g.a);
                accum(grads, *b, g.b);
                accum(grads, *c, g.c);
            }
            Op::Sum(x) => {
                let g = gy.data()[0];
                accum(grads, *x, Tensor::full(val(*x).shape(), g));
            }
        }
    }
}

fn accum<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Real>(v: T) -> T {
    // log(1 + e^v) without overflow
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

fn unary_forward<T: Real>(kind: Unary, v: T) -> T {
    match kind {
        Unary::Silu => v * sigmoid(v),
        Unary::Sigmoid => sigmoid(v),
        Unary::Relu => v.max(T::zero()),
        Unary::Softplus => softplus(v),
        Unary::Exp => v.exp(),
        Unary::Neg => -v,
        Unary::Abs => v.abs(),
    }
}

fn unary_derivative<T: Real>(kind: Unary, x: T, y: T) -> T {
    match kind {
        Unary::Silu => {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        }
        Unary::Sigmoid => y * (T::one() - y),
        Unary::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::Softplus => sigmoid(x),
        Unary::Exp => y,
        Unary::Neg => -T::one(),
        Unary::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
    }
}

/// Gradients produced by one reverse pass, indexed by [`Var`].
pub struct Grads<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.get_index(v.0)
    }

    pub(crate) fn get_index(&self, i: usize) -> Option<&Tensor<T>> {
        self.grads.get(i).and_then(|g| g.as_ref())
    }

    /// The gradient of `v`, or zeros of `shape` if nothing flowed into it.
    pub fn or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(g.value(y).data(), &[9.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn split_then_concat_is_identity() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2, 5, 2, 3], |i| i as f64));
        let parts = g.split_channels(x, &[2, 1, 2]).unwrap();
        let y = g.concat_channels(&parts).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert!(g.split_channels(x, &[2, 2]).is_err());
    }

    #[test]
    fn unary_zero_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[3]));
        let s = g.silu(x);
        let sg = g.sigmoid(x);
        let sp = g.softplus(x);
        assert_eq!(g.value(s).data(), &[0.0; 3]);
        assert_eq!(g.value(sg).data(), &[0.5; 3]);
        assert!((g.value(sp).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!(softplus(-1000.0f64) < 1e-300);
    }

    #[test]
    fn gap_and_mul_channel() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 2, 1, 2], &[1.0, 3.0, -2.0, 4.0]));
        let p = g.global_average_pool(x).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 1.0]);
        let y = g.mul_channel(x, p).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 6.0, -2.0, 4.0]);
    }

    #[test]
    fn upsample_repeats_cells() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 1, 1, 2], &[1.0, 2.0]));
        let y = g.upsample_nearest_2x(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 4]);
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn segment_max_scatter_leaves_empty_cells_zero() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3, 2], &[1.0, -5.0, 4.0, -6.0, -1.0, 2.0]));
        let segs = [
            Segment {
                start: 0,
                end: 2,
                cell: 3,
            },
            Segment {
                start: 2,
                end: 3,
                cell: 0,
            },
        ];
        let y = g.segment_max_scatter(x, &segs, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 0.0, 0.0, 4.0, 2.0, 0.0, 0.0, -5.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }
}
