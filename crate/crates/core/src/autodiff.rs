//! Reverse-mode automatic differentiation on f64 arrays.
//!
//! A [`Tape`] records every operation; [`Tape::backward`] walks the record
//! in reverse and accumulates gradients in a fixed order, so a given graph
//! always produces bit-identical gradients. Nodes whose ancestors contain no
//! differentiable leaf are skipped during the backward pass, which is what
//! makes frozen sub-networks cheap.
//!
//! Values are `ArrayD<f64>` throughout. Convolution parallelizes over the
//! batch axis; each output element is still computed by a single sequential
//! reduction, so thread count never changes results.

use std::cell::{Ref, RefCell};

use ndarray::{concatenate, ArrayD, ArrayViewD, Axis, Dimension, Ix1, Ix2, Ix4, IxDyn, Slice};
use rayon::prelude::*;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    /// Per-channel bias over NCHW: `b[c]` added to `a[(b,c,h,w)]`.
    AddChanBias(usize, usize),
    /// Per-channel scale over NCHW.
    MulChan(usize, usize),
    /// Bias over the last axis: `b[j]` added to `a[(.., j)]`.
    AddLastBias(usize, usize),
    Matmul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    UpsampleNearest2(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Silu(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Clamp(usize, f64, f64),
    SumAll(usize),
    MeanLast(usize),
    BroadcastLast(usize),
    Reshape(usize),
    PermuteAxes(usize, Vec<usize>),
    Slice2 {
        a: usize,
        ranges: Vec<(usize, usize)>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    /// Row gather along axis 0. Indices are captured, not a node.
    IndexSelect {
        a: usize,
        idx: Vec<usize>,
    },
    /// Softmax over the last axis; fully masked rows produce all zeros.
    /// The mask only shapes the forward value, so it is not stored.
    Softmax(usize),
    /// Fused sparse attention: for each query row t, attend over the rows of
    /// k/v selected by `idx[t]` where `valid[t]` is 1. Empty rows yield zero.
    GatherAttend {
        q: usize,
        k: usize,
        v: usize,
        idx: Vec<Vec<usize>>,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Operation record. Create one per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients keyed by node, produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Borrow a node's value without cloning.
    pub fn value(&self, v: Var) -> Ref<'_, ArrayD<f64>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn value_cloned(&self, v: Var) -> ArrayD<f64> {
        self.value(v).clone()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        *val.iter().next().unwrap()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    /// Differentiable leaf (a parameter).
    pub fn leaf(&self, a: ArrayD<f64>) -> Var {
        self.push(a, Op::Leaf, true)
    }

    /// Non-differentiable input (data, masks, frozen weights).
    pub fn constant(&self, a: ArrayD<f64>) -> Var {
        self.push(a, Op::Leaf, false)
    }

    pub fn constant_scalar(&self, x: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), x))
    }

    // ---------------------------------------------------------------- ops

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            debug_assert_eq!(nodes[a.0].value.shape(), nodes[b.0].value.shape());
            &nodes[a.0].value + &nodes[b.0].value
        };
        self.push(v, Op::Add(a.0, b.0), self.needs(a) || self.needs(b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            debug_assert_eq!(nodes[a.0].value.shape(), nodes[b.0].value.shape());
            &nodes[a.0].value - &nodes[b.0].value
        };
        self.push(v, Op::Sub(a.0, b.0), self.needs(a) || self.needs(b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            debug_assert_eq!(nodes[a.0].value.shape(), nodes[b.0].value.shape());
            &nodes[a.0].value * &nodes[b.0].value
        };
        self.push(v, Op::Mul(a.0, b.0), self.needs(a) || self.needs(b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value / &nodes[b.0].value
        };
        self.push(v, Op::Div(a.0, b.0), self.needs(a) || self.needs(b))
    }

    pub fn neg(&self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| -x);
        self.push(v, Op::Neg(a.0), self.needs(a))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let v = self.value(a).mapv(|x| x * s);
        self.push(v, Op::Scale(a.0, s), self.needs(a))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let v = self.value(a).mapv(|x| x + s);
        self.push(v, Op::AddScalar(a.0), self.needs(a))
    }

    pub fn add_chan_bias(&self, a: Var, b: Var) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let x = nodes[a.0]
                .value
                .view()
                .into_dimensionality::<Ix4>()
                .expect("add_chan_bias expects NCHW");
            let bias = nodes[b.0]
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .expect("bias must be rank 1");
            let mut out = x.to_owned();
            for c in 0..bias.len() {
                out.index_axis_mut(Axis(1), c).mapv_inplace(|t| t + bias[c]);
            }
            out.into_dyn()
        };
        self.push(v, Op::AddChanBias(a.0, b.0), self.needs(a) || self.needs(b))
    }

    pub fn mul_chan(&self, a: Var, g: Var) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let x = nodes[a.0]
                .value
                .view()
                .into_dimensionality::<Ix4>()
                .expect("mul_chan expects NCHW");
            let gain = nodes[g.0]
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .expect("gain must be rank 1");
            let mut out = x.to_owned();
            for c in 0..gain.len() {
                out.index_axis_mut(Axis(1), c).mapv_inplace(|t| t * gain[c]);
            }
            out.into_dyn()
        };
        self.push(v, Op::MulChan(a.0, g.0), self.needs(a) || self.needs(g))
    }

    pub fn add_last_bias(&self, a: Var, b: Var) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let bias = nodes[b.0]
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .expect("bias must be rank 1");
            let mut out = x.clone();
            let c = bias.len();
            debug_assert_eq!(out.shape().last(), Some(&c));
            for (i, t) in out.iter_mut().enumerate() {
                *t += bias[i % c];
            }
            out
        };
        self.push(v, Op::AddLastBias(a.0, b.0), self.needs(a) || self.needs(b))
    }

    /// `(m, k) x (k, n) -> (m, n)`
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let x = nodes[a.0]
                .value
                .view()
                .into_dimensionality::<Ix2>()
                .expect("matmul lhs must be rank 2");
            let y = nodes[b.0]
                .value
                .view()
                .into_dimensionality::<Ix2>()
                .expect("matmul rhs must be rank 2");
            x.dot(&y).into_dyn()
        };
        self.push(v, Op::Matmul(a.0, b.0), self.needs(a) || self.needs(b))
    }

    /// 2-D convolution, `x (B,Cin,H,W)` with `w (Cout,Cin,kh,kw)`.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let xv = nodes[x.0]
                .value
                .view()
                .into_dimensionality::<Ix4>()
                .expect("conv input must be NCHW");
            let wv = nodes[w.0]
                .value
                .view()
                .into_dimensionality::<Ix4>()
                .expect("conv weight must be OIHW");
            conv2d_forward(&xv, &wv, stride, pad).into_dyn()
        };
        self.push(
            v,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                stride,
                pad,
            },
            self.needs(x) || self.needs(w),
        )
    }

    pub fn upsample_nearest2(&self, a: Var) -> Var {
        let v = {
            let x = self.value(a);
            let x = x.view().into_dimensionality::<Ix4>().unwrap();
            let (b, c, h, w) = x.dim();
            let mut out = ndarray::Array4::<f64>::zeros((b, c, 2 * h, 2 * w));
            for bi in 0..b {
                for ci in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let val = x[(bi, ci, i, j)];
                            out[(bi, ci, 2 * i, 2 * j)] = val;
                            out[(bi, ci, 2 * i + 1, 2 * j)] = val;
                            out[(bi, ci, 2 * i, 2 * j + 1)] = val;
                            out[(bi, ci, 2 * i + 1, 2 * j + 1)] = val;
                        }
                    }
                }
            }
            out.into_dyn()
        };
        self.push(v, Op::UpsampleNearest2(a.0), self.needs(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a.0), self.needs(a))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let v = self.value(a).mapv(|x| if x >= 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a.0, slope), self.needs(a))
    }

    pub fn silu(&self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a.0), self.needs(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a.0), self.needs(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a.0), self.needs(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a.0), self.needs(a))
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a.0, lo, hi), self.needs(a))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            Op::SumAll(a.0),
            self.needs(a),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean over the last axis, keeping it with length 1.
    pub fn mean_last(&self, a: Var) -> Var {
        let v = {
            let x = self.value(a);
            let last = x.ndim() - 1;
            let m = x.mean_axis(Axis(last)).unwrap();
            m.insert_axis(Axis(last))
        };
        self.push(v, Op::MeanLast(a.0), self.needs(a))
    }

    /// Repeat a trailing length-1 axis out to length `n`.
    pub fn broadcast_last(&self, a: Var, n: usize) -> Var {
        let v = {
            let x = self.value(a);
            let last = x.ndim() - 1;
            debug_assert_eq!(x.shape()[last], 1);
            let mut shape = x.shape().to_vec();
            shape[last] = n;
            x.broadcast(IxDyn(&shape)).unwrap().to_owned()
        };
        self.push(v, Op::BroadcastLast(a.0), self.needs(a))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let v = {
            let x = self.value(a);
            debug_assert_eq!(x.len(), shape.iter().product::<usize>());
            x.as_standard_layout()
                .to_owned()
                .into_shape_with_order(IxDyn(shape))
                .unwrap()
        };
        self.push(v, Op::Reshape(a.0), self.needs(a))
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Var {
        let v = {
            let x = self.value(a);
            x.view().permuted_axes(IxDyn(perm)).to_owned()
        };
        self.push(v, Op::PermuteAxes(a.0, perm.to_vec()), self.needs(a))
    }

    /// Rectangular slice; `ranges` gives `(start, end)` per axis.
    pub fn slice(&self, a: Var, ranges: &[(usize, usize)]) -> Var {
        let v = {
            let x = self.value(a);
            debug_assert_eq!(ranges.len(), x.ndim());
            x.slice_each_axis(|ax| {
                let (s, e) = ranges[ax.axis.index()];
                Slice::from(s..e)
            })
            .to_owned()
        };
        self.push(
            v,
            Op::Slice2 {
                a: a.0,
                ranges: ranges.to_vec(),
            },
            self.needs(a),
        )
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let views: Vec<ArrayViewD<f64>> =
                parts.iter().map(|p| nodes[p.0].value.view()).collect();
            concatenate(Axis(axis), &views).expect("concat shape mismatch")
        };
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(
            v,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
            needs,
        )
    }

    /// Gather rows of a rank-2 array.
    pub fn index_select(&self, a: Var, idx: &[usize]) -> Var {
        let v = {
            let x = self.value(a);
            let x = x.view().into_dimensionality::<Ix2>().expect("rank 2");
            let mut out = ndarray::Array2::<f64>::zeros((idx.len(), x.ncols()));
            for (row, &i) in idx.iter().enumerate() {
                out.row_mut(row).assign(&x.row(i));
            }
            out.into_dyn()
        };
        self.push(
            v,
            Op::IndexSelect {
                a: a.0,
                idx: idx.to_vec(),
            },
            self.needs(a),
        )
    }

    /// Softmax over the last axis. With a mask, masked entries get zero
    /// probability; rows whose mask is all zero output all zeros.
    pub fn softmax(&self, a: Var, mask: Option<&ArrayD<f64>>) -> Var {
        let v = {
            let x = self.value(a);
            softmax_forward(&x, mask)
        };
        self.push(v, Op::Softmax(a.0), self.needs(a))
    }

    /// Restricted attention: `out[t] = softmax_c(q[t]·k[idx[t][c]]/√d) v[idx[t][c]]`,
    /// with `out[t] = 0` when `idx[t]` is empty.
    pub fn gather_attend(&self, q: Var, k: Var, v: Var, idx: &[Vec<usize>]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let qm = nodes[q.0].value.view().into_dimensionality::<Ix2>().unwrap();
            let km = nodes[k.0].value.view().into_dimensionality::<Ix2>().unwrap();
            let vm = nodes[v.0].value.view().into_dimensionality::<Ix2>().unwrap();
            gather_attend_forward(&qm, &km, &vm, idx).into_dyn()
        };
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            value,
            Op::GatherAttend {
                q: q.0,
                k: k.0,
                v: v.0,
                idx: idx.to_vec(),
            },
            needs,
        )
    }

    // ---------------------------------------------------------- backward

    /// Backpropagate from a scalar `root`. Returns per-node gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..n).map(|_| None).collect();
        debug_assert_eq!(nodes[root.0].value.len(), 1, "backward root must be scalar");
        grads[root.0] = Some(ArrayD::from_elem(nodes[root.0].value.raw_dim(), 1.0));

        for i in (0..=root.0).rev() {
            if !nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let acc = |grads: &mut Vec<Option<ArrayD<f64>>>, j: usize, dg: ArrayD<f64>| {
                if !nodes[j].needs_grad {
                    return;
                }
                match &mut grads[j] {
                    Some(existing) => *existing += &dg,
                    slot @ None => *slot = Some(dg),
                }
            };
            match &nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.mapv(|x| -x));
                }
                Op::Mul(a, b) => {
                    let da = &g * &nodes[*b].value;
                    let db = &g * &nodes[*a].value;
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Div(a, b) => {
                    let bv = &nodes[*b].value;
                    let da = &g / bv;
                    let db = -&(&g * &nodes[*a].value) / &(bv * bv);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Neg(a) => acc(&mut grads, *a, g.mapv(|x| -x)),
                Op::Scale(a, s) => acc(&mut grads, *a, g.mapv(|x| x * s)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::AddChanBias(a, b) => {
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let c = nodes[*b].value.len();
                    let mut db = ndarray::Array1::<f64>::zeros(c);
                    for ci in 0..c {
                        db[ci] = g4.index_axis(Axis(1), ci).sum();
                    }
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, db.into_dyn());
                }
                Op::MulChan(a, gn) => {
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let xa = nodes[*a].value.view().into_dimensionality::<Ix4>().unwrap();
                    let gain = nodes[*gn].value.view().into_dimensionality::<Ix1>().unwrap();
                    let c = gain.len();
                    let mut da = xa.to_owned();
                    for ci in 0..c {
                        let gi = gain[ci];
                        da.index_axis_mut(Axis(1), ci).assign(
                            &g4.index_axis(Axis(1), ci).mapv(|x| x * gi),
                        );
                    }
                    let mut dgain = ndarray::Array1::<f64>::zeros(c);
                    for ci in 0..c {
                        dgain[ci] = (&g4.index_axis(Axis(1), ci) * &xa.index_axis(Axis(1), ci)).sum();
                    }
                    acc(&mut grads, *a, da.into_dyn());
                    acc(&mut grads, *gn, dgain.into_dyn());
                }
                Op::AddLastBias(a, b) => {
                    let c = nodes[*b].value.len();
                    let mut db = vec![0.0; c];
                    for (iflat, x) in g.as_standard_layout().iter().enumerate() {
                        db[iflat % c] += x;
                    }
                    acc(&mut grads, *a, g.clone());
                    acc(
                        &mut grads,
                        *b,
                        ndarray::Array1::from(db).into_dyn(),
                    );
                }
                Op::Matmul(a, b) => {
                    let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                    let av = nodes[*a].value.view().into_dimensionality::<Ix2>().unwrap();
                    let bv = nodes[*b].value.view().into_dimensionality::<Ix2>().unwrap();
                    let da = gm.dot(&bv.t());
                    let db = av.t().dot(&gm);
                    acc(&mut grads, *a, da.into_dyn());
                    acc(&mut grads, *b, db.into_dyn());
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap().to_owned();
                    let xv = nodes[*x].value.view().into_dimensionality::<Ix4>().unwrap();
                    let wv = nodes[*w].value.view().into_dimensionality::<Ix4>().unwrap();
                    let want_dx = nodes[*x].needs_grad;
                    let want_dw = nodes[*w].needs_grad;
                    let (dx, dw) = conv2d_backward(&xv, &wv, &g4.view(), *stride, *pad, want_dx, want_dw);
                    if let Some(dx) = dx {
                        acc(&mut grads, *x, dx.into_dyn());
                    }
                    if let Some(dw) = dw {
                        acc(&mut grads, *w, dw.into_dyn());
                    }
                }
                Op::UpsampleNearest2(a) => {
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (b, c, h2, w2) = g4.dim();
                    let (h, w) = (h2 / 2, w2 / 2);
                    let mut da = ndarray::Array4::<f64>::zeros((b, c, h, w));
                    for bi in 0..b {
                        for ci in 0..c {
                            for i in 0..h {
                                for j in 0..w {
                                    da[(bi, ci, i, j)] = g4[(bi, ci, 2 * i, 2 * j)]
                                        + g4[(bi, ci, 2 * i + 1, 2 * j)]
                                        + g4[(bi, ci, 2 * i, 2 * j + 1)]
                                        + g4[(bi, ci, 2 * i + 1, 2 * j + 1)];
                                }
                            }
                        }
                    }
                    acc(&mut grads, *a, da.into_dyn());
                }
                Op::Relu(a) => {
                    let da = ndarray::Zip::from(&g)
                        .and(&nodes[*a].value)
                        .map_collect(|&gi, &xi| if xi > 0.0 { gi } else { 0.0 });
                    acc(&mut grads, *a, da);
                }
                Op::LeakyRelu(a, slope) => {
                    let s = *slope;
                    let da = ndarray::Zip::from(&g)
                        .and(&nodes[*a].value)
                        .map_collect(|&gi, &xi| if xi >= 0.0 { gi } else { s * gi });
                    acc(&mut grads, *a, da);
                }
                Op::Silu(a) => {
                    let da = ndarray::Zip::from(&g)
                        .and(&nodes[*a].value)
                        .map_collect(|&gi, &xi| {
                            let s = sigmoid(xi);
                            gi * (s + xi * s * (1.0 - s))
                        });
                    acc(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let da = ndarray::Zip::from(&g)
                        .and(&nodes[i].value)
                        .map_collect(|&gi, &yi| gi * (1.0 - yi * yi));
                    acc(&mut grads, *a, da);
                }
                Op::Exp(a) => {
                    let da = &g * &nodes[i].value;
                    acc(&mut grads, *a, da);
                }
                Op::Ln(a) => {
                    let da = &g / &nodes[*a].value;
                    acc(&mut grads, *a, da);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let da = ndarray::Zip::from(&g)
                        .and(&nodes[*a].value)
                        .map_collect(|&gi, &xi| if xi > lo && xi < hi { gi } else { 0.0 });
                    acc(&mut grads, *a, da);
                }
                Op::SumAll(a) => {
                    let gs = g[[0]];
                    let da = ArrayD::from_elem(nodes[*a].value.raw_dim(), gs);
                    acc(&mut grads, *a, da);
                }
                Op::MeanLast(a) => {
                    let shape = nodes[*a].value.raw_dim();
                    let last = shape.ndim() - 1;
                    let c = shape[last] as f64;
                    let expanded = g
                        .broadcast(shape.clone())
                        .unwrap()
                        .mapv(|x| x / c);
                    acc(&mut grads, *a, expanded);
                }
                Op::BroadcastLast(a) => {
                    let last = g.ndim() - 1;
                    let da = g.sum_axis(Axis(last)).insert_axis(Axis(last));
                    acc(&mut grads, *a, da);
                }
                Op::Reshape(a) => {
                    let da = g
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order(nodes[*a].value.raw_dim())
                        .unwrap();
                    acc(&mut grads, *a, da);
                }
                Op::PermuteAxes(a, perm) => {
                    let mut inverse = vec![0usize; perm.len()];
                    for (to, &from) in perm.iter().enumerate() {
                        inverse[from] = to;
                    }
                    let da = g.view().permuted_axes(IxDyn(&inverse)).to_owned();
                    acc(&mut grads, *a, da);
                }
                Op::Slice2 { a, ranges } => {
                    let mut da = ArrayD::<f64>::zeros(nodes[*a].value.raw_dim());
                    da.slice_each_axis_mut(|ax| {
                        let (s, e) = ranges[ax.axis.index()];
                        Slice::from(s..e)
                    })
                    .assign(&g);
                    acc(&mut grads, *a, da);
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0usize;
                    for &p in parts {
                        let len = nodes[p].value.shape()[*axis];
                        let da = g
                            .slice_axis(Axis(*axis), Slice::from(offset..offset + len))
                            .to_owned();
                        acc(&mut grads, p, da);
                        offset += len;
                    }
                }
                Op::IndexSelect { a, idx } => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let shape = nodes[*a].value.raw_dim();
                    let mut da = ndarray::Array2::<f64>::zeros((shape[0], shape[1]));
                    for (row, &src) in idx.iter().enumerate() {
                        let mut target = da.row_mut(src);
                        target += &g2.row(row);
                    }
                    acc(&mut grads, *a, da.into_dyn());
                }
                Op::Softmax(a) => {
                    // dL/ds = p ⊙ (g − Σ_last(g ⊙ p)); zero rows stay zero.
                    let p = &nodes[i].value;
                    let last = p.ndim() - 1;
                    let gp = &g * p;
                    let dot = gp.sum_axis(Axis(last)).insert_axis(Axis(last));
                    let da = p * &(&g - &dot.broadcast(p.raw_dim()).unwrap());
                    acc(&mut grads, *a, da);
                }
                Op::GatherAttend { q, k, v, idx } => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let qm = nodes[*q].value.view().into_dimensionality::<Ix2>().unwrap();
                    let km = nodes[*k].value.view().into_dimensionality::<Ix2>().unwrap();
                    let vm = nodes[*v].value.view().into_dimensionality::<Ix2>().unwrap();
                    let (dq, dk, dv) = gather_attend_backward(&qm, &km, &vm, idx, &g2);
                    acc(&mut grads, *q, dq.into_dyn());
                    acc(&mut grads, *k, dk.into_dyn());
                    acc(&mut grads, *v, dv.into_dyn());
                }
            }
        }
        Gradients { grads }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ------------------------------------------------------------------ conv

fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Unfold one sample into `(Cin*kh*kw, Ho*Wo)` columns.
fn im2col(
    x: &ndarray::ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array2<f64> {
    let (cin, h, w) = x.dim();
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(w, kw, stride, pad);
    let mut cols = ndarray::Array2::<f64>::zeros((cin * kh * kw, ho * wo));
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[(row, oi * wo + oj)] = x[(c, ii as usize, jj as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Fold columns back into an input-shaped accumulator.
fn col2im(
    cols: &ndarray::Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array3<f64> {
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(w, kw, stride, pad);
    let mut out = ndarray::Array3::<f64>::zeros((cin, h, w));
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        out[(c, ii as usize, jj as usize)] += cols[(row, oi * wo + oj)];
                    }
                }
            }
        }
    }
    out
}

fn conv2d_forward(
    x: &ndarray::ArrayView4<f64>,
    w: &ndarray::ArrayView4<f64>,
    stride: usize,
    pad: usize,
) -> ndarray::Array4<f64> {
    let (b, cin, h, wd) = x.dim();
    let (cout, cin_w, kh, kw) = w.dim();
    assert_eq!(cin, cin_w, "conv channel mismatch");
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(wd, kw, stride, pad);
    let wmat = w
        .to_shape((cout, cin * kh * kw))
        .expect("weights contiguous")
        .to_owned();

    let samples: Vec<ndarray::Array3<f64>> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let cols = im2col(&x.index_axis(Axis(0), bi), kh, kw, stride, pad);
            let y = wmat.dot(&cols); // (cout, ho*wo)
            y.into_shape_with_order((cout, ho, wo)).unwrap()
        })
        .collect();

    let mut out = ndarray::Array4::<f64>::zeros((b, cout, ho, wo));
    for (bi, s) in samples.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), bi).assign(&s);
    }
    out
}

#[allow(clippy::type_complexity)]
fn conv2d_backward(
    x: &ndarray::ArrayView4<f64>,
    w: &ndarray::ArrayView4<f64>,
    g: &ndarray::ArrayView4<f64>,
    stride: usize,
    pad: usize,
    want_dx: bool,
    want_dw: bool,
) -> (Option<ndarray::Array4<f64>>, Option<ndarray::Array4<f64>>) {
    let (b, cin, h, wd) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let (_, _, ho, wo) = g.dim();
    let wmat = w.to_shape((cout, cin * kh * kw)).unwrap().to_owned();

    // per-sample contributions computed in parallel, combined in index order
    let per_sample: Vec<(Option<ndarray::Array3<f64>>, Option<ndarray::Array2<f64>>)> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let gmat = g
                .index_axis(Axis(0), bi)
                .to_shape((cout, ho * wo))
                .unwrap()
                .to_owned();
            let dx = if want_dx {
                let dcols = wmat.t().dot(&gmat);
                Some(col2im(&dcols, cin, h, wd, kh, kw, stride, pad))
            } else {
                None
            };
            let dw = if want_dw {
                let cols = im2col(&x.index_axis(Axis(0), bi), kh, kw, stride, pad);
                Some(gmat.dot(&cols.t()))
            } else {
                None
            };
            (dx, dw)
        })
        .collect();

    let mut dx_out = want_dx.then(|| ndarray::Array4::<f64>::zeros((b, cin, h, wd)));
    let mut dw_acc = want_dw.then(|| ndarray::Array2::<f64>::zeros((cout, cin * kh * kw)));
    for (bi, (dx, dw)) in per_sample.into_iter().enumerate() {
        if let (Some(out), Some(dx)) = (dx_out.as_mut(), dx) {
            out.index_axis_mut(Axis(0), bi).assign(&dx);
        }
        if let (Some(acc), Some(dw)) = (dw_acc.as_mut(), dw) {
            *acc += &dw;
        }
    }
    let dw_out =
        dw_acc.map(|acc| acc.into_shape_with_order((cout, cin, kh, kw)).unwrap());
    (dx_out, dw_out)
}

// --------------------------------------------------------------- softmax

fn softmax_forward(x: &ArrayD<f64>, mask: Option<&ArrayD<f64>>) -> ArrayD<f64> {
    let last = x.ndim() - 1;
    let c = x.shape()[last];
    let mut out = x.as_standard_layout().to_owned();
    let mask_std = mask.map(|m| m.as_standard_layout().to_owned());
    let rows = out.len() / c;
    let flat = out.as_slice_mut().unwrap();
    let mask_flat = mask_std.as_ref().map(|m| m.as_slice().unwrap());
    for r in 0..rows {
        let row = &mut flat[r * c..(r + 1) * c];
        let mrow = mask_flat.map(|m| &m[r * c..(r + 1) * c]);
        let mut maxv = f64::NEG_INFINITY;
        for (j, v) in row.iter().enumerate() {
            let keep = mrow.map_or(true, |m| m[j] != 0.0);
            if keep && *v > maxv {
                maxv = *v;
            }
        }
        if maxv == f64::NEG_INFINITY {
            row.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            let keep = mrow.map_or(true, |m| m[j] != 0.0);
            *v = if keep { (*v - maxv).exp() } else { 0.0 };
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

// ---------------------------------------------------------- gather-attend

fn gather_attend_forward(
    q: &ndarray::ArrayView2<f64>,
    k: &ndarray::ArrayView2<f64>,
    v: &ndarray::ArrayView2<f64>,
    idx: &[Vec<usize>],
) -> ndarray::Array2<f64> {
    let (t, d) = q.dim();
    debug_assert_eq!(idx.len(), t);
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = ndarray::Array2::<f64>::zeros((t, v.ncols()));
    for (ti, cand) in idx.iter().enumerate() {
        if cand.is_empty() {
            continue;
        }
        let qr = q.row(ti);
        let mut scores: Vec<f64> = cand
            .iter()
            .map(|&c| qr.dot(&k.row(c)) * scale)
            .collect();
        let maxv = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - maxv).exp();
            sum += *s;
        }
        let mut row = out.row_mut(ti);
        for (s, &c) in scores.iter().zip(cand.iter()) {
            let p = s / sum;
            row.scaled_add(p, &v.row(c));
        }
    }
    out
}

#[allow(clippy::type_complexity)]
fn gather_attend_backward(
    q: &ndarray::ArrayView2<f64>,
    k: &ndarray::ArrayView2<f64>,
    v: &ndarray::ArrayView2<f64>,
    idx: &[Vec<usize>],
    g: &ndarray::ArrayView2<f64>,
) -> (
    ndarray::Array2<f64>,
    ndarray::Array2<f64>,
    ndarray::Array2<f64>,
) {
    let d = q.ncols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = ndarray::Array2::<f64>::zeros(q.raw_dim());
    let mut dk = ndarray::Array2::<f64>::zeros(k.raw_dim());
    let mut dv = ndarray::Array2::<f64>::zeros(v.raw_dim());
    for (ti, cand) in idx.iter().enumerate() {
        if cand.is_empty() {
            continue;
        }
        let qr = q.row(ti);
        let gr = g.row(ti);
        let mut probs: Vec<f64> = cand
            .iter()
            .map(|&c| qr.dot(&k.row(c)) * scale)
            .collect();
        let maxv = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in probs.iter_mut() {
            *s = (*s - maxv).exp();
            sum += *s;
        }
        probs.iter_mut().for_each(|p| *p /= sum);

        // dp = g·v_c ; ds = p ⊙ (dp − Σ dp p)
        let dp: Vec<f64> = cand.iter().map(|&c| gr.dot(&v.row(c))).collect();
        let dot: f64 = dp.iter().zip(probs.iter()).map(|(a, b)| a * b).sum();
        for ((&c, &p), &dpi) in cand.iter().zip(probs.iter()).zip(dp.iter()) {
            let ds = p * (dpi - dot);
            dv.row_mut(c).scaled_add(p, &gr);
            dq.row_mut(ti).scaled_add(ds * scale, &k.row(c));
            dk.row_mut(c).scaled_add(ds * scale, &qr);
        }
    }
    (dq, dk, dv)
}

// ------------------------------------------------------------ grad check

/// Central-difference gradient check utilities shared by the test suites.
pub mod gradcheck {
    /// Relative error between an analytic derivative and a central
    /// difference of `f` at `x0`, using step `h`.
    pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        (analytic - numeric).abs() / denom
    }

    /// Evaluate `f` at `x0 ± h` and return the central difference.
    pub fn central<F: FnMut(f64) -> f64>(mut f: F, x0: f64, h: f64) -> f64 {
        (f(x0 + h) - f(x0 - h)) / (2.0 * h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array, Array2, Array4};
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn rand_array(shape: &[usize], rng: &mut ChaCha12Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Numeric gradient of `build` (graph builder returning scalar root)
    /// with respect to entry `flat` of the leaf array.
    fn check_graph<F>(shape: &[usize], build: F, tol: f64)
    where
        F: Fn(&Tape, Var) -> Var,
    {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let base = rand_array(shape, &mut rng);
        let n = base.len();
        let probe: Vec<usize> = (0..n.min(6)).map(|_| rng.gen_range(0..n)).collect();

        let tape = Tape::new();
        let x = tape.leaf(base.clone());
        let loss = build(&tape, x);
        let grads = tape.backward(loss);
        let g = grads.get(x).expect("leaf must receive gradient");

        for &i in &probe {
            let numeric = gradcheck::central(
                |v| {
                    let mut a = base.clone();
                    a.as_slice_mut().unwrap()[i] = v;
                    let t = Tape::new();
                    let xx = t.leaf(a);
                    t.scalar(build(&t, xx))
                },
                base.as_slice().unwrap()[i],
                1e-5,
            );
            let analytic = g.as_slice().unwrap()[i];
            let err = gradcheck::relative_error(analytic, numeric);
            assert!(
                err < tol,
                "grad mismatch at {i}: analytic {analytic}, numeric {numeric}, rel {err}"
            );
        }
    }

    #[test]
    fn elementwise_grads() {
        check_graph(&[3, 4], |t, x| t.mean_all(t.mul(x, x)), 1e-7);
        check_graph(&[3, 4], |t, x| t.mean_all(t.silu(x)), 1e-6);
        check_graph(&[3, 4], |t, x| t.mean_all(t.tanh(x)), 1e-7);
        check_graph(&[3, 4], |t, x| t.mean_all(t.exp(x)), 1e-7);
        check_graph(&[3, 4], |t, x| {
            let y = t.add_scalar(x, 3.0); // keep ln argument positive
            t.mean_all(t.ln(y))
        }, 1e-7);
        check_graph(&[3, 4], |t, x| t.mean_all(t.leaky_relu(x, 0.2)), 1e-6);
        check_graph(&[2, 3], |t, x| {
            let s = t.scale(x, 2.5);
            let n = t.neg(s);
            t.sum_all(n)
        }, 1e-8);
    }

    #[test]
    fn binary_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let other = rand_array(&[3, 4], &mut rng).mapv(|x| x + 2.0);
        check_graph(&[3, 4], |t, x| {
            let c = t.constant(other.clone());
            let y = t.div(x, c);
            let z = t.mul(y, y);
            t.mean_all(z)
        }, 1e-6);
        check_graph(&[3, 4], |t, x| {
            let c = t.constant(other.clone());
            t.mean_all(t.sub(x, c))
        }, 1e-8);
    }

    #[test]
    fn matmul_grad() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let b = rand_array(&[4, 5], &mut rng);
        check_graph(&[3, 4], |t, x| {
            let bv = t.constant(b.clone());
            let y = t.matmul(x, bv);
            t.mean_all(t.mul(y, y))
        }, 1e-6);
        // also through the rhs
        let a = rand_array(&[3, 4], &mut rng);
        check_graph(&[4, 5], |t, x| {
            let av = t.constant(a.clone());
            let y = t.matmul(av, x);
            t.mean_all(t.mul(y, y))
        }, 1e-6);
    }

    #[test]
    fn conv_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let w = rand_array(&[3, 2, 3, 3], &mut rng);
        // x-gradient
        check_graph(&[2, 2, 5, 5], |t, x| {
            let wv = t.constant(w.clone());
            let y = t.conv2d(x, wv, 1, 1);
            t.mean_all(t.mul(y, y))
        }, 1e-6);
        // w-gradient, strided
        let x = rand_array(&[2, 2, 6, 6], &mut rng);
        check_graph(&[3, 2, 3, 3], |t, wv| {
            let xv = t.constant(x.clone());
            let y = t.conv2d(xv, wv, 2, 1);
            t.mean_all(t.mul(y, y))
        }, 1e-6);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x = rand_array(&[1, 2, 4, 4], &mut rng);
        let w = rand_array(&[3, 2, 3, 3], &mut rng);
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let y = tape.conv2d(xv, wv, 1, 1);
        let out = tape.value_cloned(y);

        let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
        let w4 = w.view().into_dimensionality::<Ix4>().unwrap();
        for co in 0..3 {
            for oi in 0..4 {
                for oj in 0..4 {
                    let mut s = 0.0;
                    for ci in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let ii = oi as isize + ki as isize - 1;
                                let jj = oj as isize + kj as isize - 1;
                                if ii >= 0 && ii < 4 && jj >= 0 && jj < 4 {
                                    s += x4[(0, ci, ii as usize, jj as usize)]
                                        * w4[(co, ci, ki, kj)];
                                }
                            }
                        }
                    }
                    let got = out[IxDyn(&[0, co, oi, oj])];
                    assert!((got - s).abs() < 1e-12, "conv mismatch: {got} vs {s}");
                }
            }
        }
    }

    #[test]
    fn structural_grads() {
        check_graph(&[2, 3, 4, 4], |t, x| {
            let up = t.upsample_nearest2(x);
            t.mean_all(t.mul(up, up))
        }, 1e-6);
        check_graph(&[4, 6], |t, x| {
            let s = t.slice(x, &[(1, 3), (2, 5)]);
            t.mean_all(t.mul(s, s))
        }, 1e-7);
        check_graph(&[2, 12], |t, x| {
            let r = t.reshape(x, &[4, 6]);
            let p = t.permute(r, &[1, 0]);
            t.mean_all(t.mul(p, p))
        }, 1e-7);
        check_graph(&[3, 4], |t, x| {
            let m = t.mean_last(x);
            let b = t.broadcast_last(m, 4);
            let d = t.sub(x, b);
            t.mean_all(t.mul(d, d))
        }, 1e-6);
        check_graph(&[4, 3], |t, x| {
            let y = t.index_select(x, &[0, 2, 2, 1]);
            t.mean_all(t.mul(y, y))
        }, 1e-7);
        check_graph(&[2, 3], |t, x| {
            let other = t.constant(Array2::<f64>::ones((2, 2)).into_dyn());
            let c = t.concat(&[x, other], 1);
            t.mean_all(t.mul(c, c))
        }, 1e-7);
    }

    #[test]
    fn bias_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = rand_array(&[2, 3, 4, 4], &mut rng);
        check_graph(&[3], |t, b| {
            let xv = t.constant(x.clone());
            let y = t.add_chan_bias(xv, b);
            t.mean_all(t.mul(y, y))
        }, 1e-6);
        check_graph(&[3], |t, g| {
            let xv = t.constant(x.clone());
            let y = t.mul_chan(xv, g);
            t.mean_all(t.mul(y, y))
        }, 1e-6);
        let tok = rand_array(&[5, 4], &mut rng);
        check_graph(&[4], |t, b| {
            let xv = t.constant(tok.clone());
            let y = t.add_last_bias(xv, b);
            t.mean_all(t.mul(y, y))
        }, 1e-6);
    }

    #[test]
    fn softmax_grad_and_mask() {
        check_graph(&[3, 5], |t, x| {
            let p = t.softmax(x, None);
            let w = t.constant(Array::linspace(0.0, 1.0, 15).into_shape_with_order(IxDyn(&[3, 5])).unwrap());
            t.sum_all(t.mul(p, w))
        }, 1e-6);

        // masked row sums to one over the kept entries; fully masked row is zero
        let tape = Tape::new();
        let x = tape.constant(arr2(&[[1.0, 2.0, 3.0], [0.5, 0.5, 0.5]]).into_dyn());
        let mask = arr2(&[[1.0, 0.0, 1.0], [0.0, 0.0, 0.0]]).into_dyn();
        let p = tape.softmax(x, Some(&mask));
        let pv = tape.value_cloned(p);
        assert!((pv[IxDyn(&[0, 0])] + pv[IxDyn(&[0, 2])] - 1.0).abs() < 1e-12);
        assert_eq!(pv[IxDyn(&[0, 1])], 0.0);
        for j in 0..3 {
            assert_eq!(pv[IxDyn(&[1, j])], 0.0);
        }
    }

    #[test]
    fn gather_attend_matches_naive_and_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let k = rand_array(&[7, 4], &mut rng);
        let v = rand_array(&[7, 4], &mut rng);
        let idx: Vec<Vec<usize>> = vec![vec![0, 3, 5], vec![], vec![6, 6, 1, 2]];

        // naive reference
        let q = rand_array(&[3, 4], &mut rng);
        let tape = Tape::new();
        let qv = tape.constant(q.clone());
        let kv = tape.constant(k.clone());
        let vv = tape.constant(v.clone());
        let out = tape.gather_attend(qv, kv, vv, &idx);
        let got = tape.value_cloned(out);
        let q2 = q.view().into_dimensionality::<Ix2>().unwrap();
        let k2 = k.view().into_dimensionality::<Ix2>().unwrap();
        let v2 = v.view().into_dimensionality::<Ix2>().unwrap();
        for (ti, cand) in idx.iter().enumerate() {
            let mut expect = vec![0.0; 4];
            if !cand.is_empty() {
                let scores: Vec<f64> = cand
                    .iter()
                    .map(|&c| q2.row(ti).dot(&k2.row(c)) / 2.0)
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for (e, &c) in exps.iter().zip(cand.iter()) {
                    for d in 0..4 {
                        expect[d] += e / sum * v2[(c, d)];
                    }
                }
            }
            for d in 0..4 {
                assert!((got[IxDyn(&[ti, d])] - expect[d]).abs() < 1e-12);
            }
        }

        // gradients through q, k, v
        for role in 0..3 {
            let k = k.clone();
            let v = v.clone();
            let q = q.clone();
            let idx = idx.clone();
            check_graph(&[if role == 0 { 3 } else { 7 }, 4], |t, leaf| {
                let qv = if role == 0 { leaf } else { t.constant(q.clone()) };
                let kv = if role == 1 { leaf } else { t.constant(k.clone()) };
                let vv = if role == 2 { leaf } else { t.constant(v.clone()) };
                let o = t.gather_attend(qv, kv, vv, &idx);
                t.mean_all(t.mul(o, o))
            }, 1e-6);
        }
    }

    #[test]
    fn frozen_subgraph_receives_no_gradient() {
        let tape = Tape::new();
        let frozen = tape.constant(arr1(&[1.0, 2.0]).into_dyn());
        let live = tape.leaf(arr1(&[3.0, 4.0]).into_dyn());
        let prod = tape.mul(frozen, live);
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss);
        assert!(grads.get(frozen).is_none());
        assert_eq!(
            grads.get(live).unwrap().as_slice().unwrap(),
            &[1.0, 2.0]
        );
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let tape = Tape::new();
        let x = tape.leaf(arr1(&[-20.0, 0.0, 20.0]).into_dyn());
        let y = tape.clamp(x, -14.0, 8.0);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x).unwrap().as_slice().unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let x = rand_array(&[2, 3, 8, 8], &mut rng);
        let w = rand_array(&[4, 3, 3, 3], &mut rng);
        let run = || {
            let t = Tape::new();
            let xv = t.leaf(x.clone());
            let wv = t.leaf(w.clone());
            let y = t.conv2d(xv, wv, 1, 1);
            let s = t.silu(y);
            let loss = t.mean_all(t.mul(s, s));
            let g = t.backward(loss);
            (
                g.get(xv).unwrap().clone(),
                g.get(wv).unwrap().clone(),
            )
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn upsample_shapes() {
        let tape = Tape::new();
        let x = tape.constant(Array4::<f64>::ones((1, 2, 3, 3)).into_dyn());
        let y = tape.upsample_nearest2(x);
        assert_eq!(tape.shape(y), vec![1, 2, 6, 6]);
    }
}
