//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A `Tape` records one forward pass as an arena of nodes; `backward`
//! consumes the recording and accumulates gradients into every node that
//! requires them. All primitives are deterministic; the only randomness
//! (dropout masks) is drawn from an explicitly passed generator.
//!
//! Shape mismatches and invalid hyperparameters (for example a dropout rate
//! outside `[0, 1)`) are programming-contract violations and panic; data
//! errors belong to the modules above this one.

mod adam;
mod check;
mod params;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use check::{fd_check, FdReport};
pub use params::{load_params, read_params, save_params, write_params, ParamStore};

use std::cell::{Cell, RefCell};

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn};
use rand::Rng;

use crate::error::{MeldError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: usize,
}

struct Node {
    value: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    /// Placeholder left behind once backward has consumed the node.
    Consumed,
    MatMul {
        a: usize,
        b: usize,
    },
    Bmm {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: f64,
    },
    SoftmaxLast {
        x: usize,
    },
    LogSoftmaxLast {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: ArrayD<f64>,
        inv_std: ArrayD<f64>,
    },
    Gelu {
        x: usize,
    },
    Tanh {
        x: usize,
    },
    Dropout {
        x: usize,
        /// Mask already divided by the keep probability.
        mask: ArrayD<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: ArrayD<f64>,
        inv_std: Vec<f64>,
        /// True when normalization used batch statistics (gradients flow
        /// through the mean and variance).
        batch_stats: bool,
    },
    MaskedFill {
        x: usize,
        keep: ArrayD<f64>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    SumAll {
        x: usize,
    },
    MeanAll {
        x: usize,
    },
    PickLast {
        x: usize,
        ids: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
}

/// Recording of one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Numpy-style broadcast of two shapes; panics when incompatible.
fn broadcast_shapes(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "cannot broadcast shapes {a:?} and {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum `grad` down to `shape` by collapsing broadcast axes.
fn unbroadcast(grad: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut g = grad;
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, (&gs, &ts)) in g.shape().to_vec().iter().zip(shape.iter()).enumerate() {
        if ts == 1 && gs > 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g
}

fn to_2d(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    v.view().into_dimensionality().expect("expected 2-d tensor")
}

fn to_3d(v: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    v.view().into_dimensionality().expect("expected 3-d tensor")
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    // Non-finite values are allowed to flow through the tape; divergence is
    // detected at the loss level where the offending batch can be reported.
    fn push(&self, value: ArrayD<f64>, requires_grad: bool, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var {
            idx: nodes.len() - 1,
        }
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.idx].requires_grad)
    }

    /// Register a trainable or non-trainable input tensor.
    pub fn leaf(&self, value: ArrayD<f64>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Register a constant (never receives gradient).
    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn value(&self, v: Var) -> ArrayD<f64> {
        self.nodes.borrow()[v.idx].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.idx].value.shape().to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.idx].value;
        assert!(val.len() == 1, "scalar_value on tensor of {:?}", val.shape());
        *val.iter().next().unwrap()
    }

    /// Gradient accumulated for `v` by the last `backward`, if any.
    pub fn grad(&self, v: Var) -> Option<ArrayD<f64>> {
        self.nodes.borrow()[v.idx].grad.clone()
    }

    // -- primitives ---------------------------------------------------------

    /// 2-d matrix product.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = to_2d(&nodes[a.idx].value);
            let bv = to_2d(&nodes[b.idx].value);
            assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
            av.dot(&bv).into_dyn()
        };
        let rg = self.needs_grad(&[a, b]);
        self.push(value, rg, Op::MatMul { a: a.idx, b: b.idx })
    }

    /// Batched 3-d matrix product `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = to_3d(&nodes[a.idx].value);
            let bv = to_3d(&nodes[b.idx].value);
            assert_eq!(av.shape()[0], bv.shape()[0], "bmm batch dims");
            assert_eq!(av.shape()[2], bv.shape()[1], "bmm inner dims");
            let (bsz, m, n) = (av.shape()[0], av.shape()[1], bv.shape()[2]);
            let mut out = ndarray::Array3::zeros((bsz, m, n));
            for i in 0..bsz {
                out.index_axis_mut(Axis(0), i)
                    .assign(&av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i)));
            }
            out.into_dyn()
        };
        let rg = self.needs_grad(&[a, b]);
        self.push(value, rg, Op::Bmm { a: a.idx, b: b.idx })
    }

    /// Elementwise sum with numpy broadcasting.
    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.idx].value;
            let bv = &nodes[b.idx].value;
            let shape = broadcast_shapes(av.shape(), bv.shape());
            let dim = IxDyn(&shape);
            &av.broadcast(dim.clone()).unwrap() + &bv.broadcast(dim).unwrap()
        };
        let rg = self.needs_grad(&[a, b]);
        self.push(value, rg, Op::Add { a: a.idx, b: b.idx })
    }

    /// Elementwise product with numpy broadcasting.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.idx].value;
            let bv = &nodes[b.idx].value;
            let shape = broadcast_shapes(av.shape(), bv.shape());
            let dim = IxDyn(&shape);
            &av.broadcast(dim.clone()).unwrap() * &bv.broadcast(dim).unwrap()
        };
        let rg = self.needs_grad(&[a, b]);
        self.push(value, rg, Op::Mul { a: a.idx, b: b.idx })
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let value = self.nodes.borrow()[x.idx].value.mapv(|v| v * c);
        let rg = self.needs_grad(&[x]);
        self.push(value, rg, Op::Scale { x: x.idx, c })
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    /// Softmax along the last axis, computed with max subtraction.
    pub fn softmax_last(&self, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[x.idx].value.clone();
            for mut lane in out.rows_mut() {
                let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                lane.mapv_inplace(|v| (v - max).exp());
                let sum = lane.sum();
                lane.mapv_inplace(|v| v / sum);
            }
            out
        };
        let rg = self.needs_grad(&[x]);
        self.push(value, rg, Op::SoftmaxLast { x: x.idx })
    }

    /// Log-softmax along the last axis; finite for inputs up to 1e4.
    pub fn log_softmax_last(&self, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[x.idx].value.clone();
            for mut lane in out.rows_mut() {
                let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = lane.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                lane.mapv_inplace(|v| v - lse);
            }
            out
        };
        let rg = self.needs_grad(&[x]);
        self.push(value, rg, Op::LogSoftmaxLast { x: x.idx })
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (value, mean, inv_std) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.idx].value;
            let d = *xv.shape().last().expect("layer_norm needs >= 1 axis");
            let gv = &nodes[gamma.idx].value;
            let bv = &nodes[beta.idx].value;
            assert_eq!(gv.shape(), &[d], "gamma shape");
            assert_eq!(bv.shape(), &[d], "beta shape");
            let mut out = xv.clone();
            let mut mean_shape = xv.shape().to_vec();
            *mean_shape.last_mut().unwrap() = 1;
            let mut means = ArrayD::zeros(IxDyn(&mean_shape));
            let mut inv_stds = ArrayD::zeros(IxDyn(&mean_shape));
            for (mut lane, (m_slot, s_slot)) in out
                .rows_mut()
                .into_iter()
                .zip(means.iter_mut().zip(inv_stds.iter_mut()))
            {
                let mean = lane.sum() / d as f64;
                let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                *m_slot = mean;
                *s_slot = inv;
                for (i, v) in lane.iter_mut().enumerate() {
                    *v = (*v - mean) * inv * gv[[i]] + bv[[i]];
                }
            }
            (out, means, inv_stds)
        };
        let rg = self.needs_grad(&[x, gamma, beta]);
        self.push(
            value,
            rg,
            Op::LayerNorm {
                x: x.idx,
                gamma: gamma.idx,
                beta: beta.idx,
                mean,
                inv_std,
            },
        )
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&self, x: Var) -> Var {
        let value = self.nodes.borrow()[x.idx].value.mapv(gelu_fwd);
        let rg = self.needs_grad(&[x]);
        self.push(value, rg, Op::Gelu { x: x.idx })
    }

    pub fn tanh(&self, x: Var) -> Var {
        let value = self.nodes.borrow()[x.idx].value.mapv(f64::tanh);
        let rg = self.needs_grad(&[x]);
        self.push(value, rg, Op::Tanh { x: x.idx })
    }

    /// Inverted dropout: at train time each entry is kept with probability
    /// `1 - rate` and scaled by `1 / (1 - rate)`; identity otherwise.
    pub fn dropout<R: Rng>(&self, x: Var, rate: f64, train: bool, rng: &mut R) -> Var {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate} not in [0,1)");
        if !train || rate == 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mask = {
            let nodes = self.nodes.borrow();
            nodes[x.idx]
                .value
                .mapv(|_| if rng.random::<f64>() >= rate { 1.0 / keep } else { 0.0 })
        };
        let value = &self.nodes.borrow()[x.idx].value * &mask;
        let rg = self.needs_grad(&[x]);
        self.push(value, rg, Op::Dropout { x: x.idx, mask })
    }

    /// Row lookup `out[n] = table[ids[n]]`; backward scatter-adds.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let tv = to_2d(&nodes[table.idx].value);
            let mut out = ndarray::Array2::zeros((ids.len(), tv.ncols()));
            for (n, &id) in ids.iter().enumerate() {
                assert!(id < tv.nrows(), "embedding id {id} out of range");
                out.row_mut(n).assign(&tv.row(id));
            }
            out.into_dyn()
        };
        let rg = self.needs_grad(&[table]);
        self.push(
            value,
            rg,
            Op::Embedding {
                table: table.idx,
                ids: ids.to_vec(),
            },
        )
    }

    /// 1-d convolution over `[T, C_in]` with odd-width kernels and same
    /// (zero) padding. Weight is `[C_out, C_in, width]`, bias `[C_out]`.
    pub fn conv1d(&self, x: Var, w: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = to_2d(&nodes[x.idx].value);
            let wv = &nodes[w.idx].value;
            let bv = &nodes[b.idx].value;
            assert_eq!(wv.ndim(), 3, "conv1d weight must be [C_out, C_in, width]");
            let (c_out, c_in, width) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
            assert_eq!(xv.ncols(), c_in, "conv1d input channels");
            assert_eq!(bv.shape(), &[c_out], "conv1d bias");
            assert!(width % 2 == 1, "conv1d needs odd width for same padding");
            let pad = (width - 1) / 2;
            let t_len = xv.nrows();
            let wv3 = to_3d(wv);
            let bv1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let mut out = ndarray::Array2::zeros((t_len, c_out));
            out += &bv1;
            // Same-padded conv as a sum of shifted matmuls: one [T', C_in] x
            // [C_in, C_out] product per kernel offset.
            for k in 0..width {
                let shift = k as isize - pad as isize;
                let lo = (-shift).max(0) as usize;
                let hi = (t_len as isize - shift.max(0)) as usize;
                if lo >= hi {
                    continue;
                }
                let src = (lo as isize + shift) as usize..(hi as isize + shift) as usize;
                let xs = xv.slice(ndarray::s![src, ..]);
                let wk = wv3.slice(ndarray::s![.., .., k]);
                out.slice_mut(ndarray::s![lo..hi, ..])
                    .scaled_add(1.0, &xs.dot(&wk.t()));
            }
            let _ = c_in;
            out.into_dyn()
        };
        let rg = self.needs_grad(&[x, w, b]);
        self.push(
            value,
            rg,
            Op::Conv1d {
                x: x.idx,
                w: w.idx,
                b: b.idx,
            },
        )
    }

    /// Batch normalization over axis 0 of `[T, C]`. At train time the batch
    /// statistics normalize and the updated running statistics are returned
    /// for the caller to apply; at eval time the provided running statistics
    /// normalize and `None` is returned.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_1d(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        momentum: f64,
        eps: f64,
        train: bool,
    ) -> (Var, Option<(Vec<f64>, Vec<f64>)>) {
        let (value, xhat, inv_std, updated) = {
            let nodes = self.nodes.borrow();
            let xv = to_2d(&nodes[x.idx].value);
            let (t_len, c_len) = (xv.nrows(), xv.ncols());
            let gv = &nodes[gamma.idx].value;
            let bv = &nodes[beta.idx].value;
            assert_eq!(gv.shape(), &[c_len], "gamma shape");
            assert_eq!(bv.shape(), &[c_len], "beta shape");
            assert_eq!(running_mean.len(), c_len, "running mean shape");
            assert_eq!(running_var.len(), c_len, "running var shape");
            let (mean, var): (Vec<f64>, Vec<f64>) = if train {
                assert!(t_len >= 1, "batch_norm needs at least one row");
                let mean: Vec<f64> =
                    (0..c_len).map(|c| xv.column(c).sum() / t_len as f64).collect();
                let var: Vec<f64> = (0..c_len)
                    .map(|c| {
                        xv.column(c)
                            .iter()
                            .map(|v| (v - mean[c]) * (v - mean[c]))
                            .sum::<f64>()
                            / t_len as f64
                    })
                    .collect();
                (mean, var)
            } else {
                (running_mean.to_vec(), running_var.to_vec())
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = ndarray::Array2::zeros((t_len, c_len));
            let mut out = ndarray::Array2::zeros((t_len, c_len));
            for t in 0..t_len {
                for c in 0..c_len {
                    let h = (xv[[t, c]] - mean[c]) * inv_std[c];
                    xhat[[t, c]] = h;
                    out[[t, c]] = h * gv[[c]] + bv[[c]];
                }
            }
            let updated = train.then(|| {
                let new_mean: Vec<f64> = running_mean
                    .iter()
                    .zip(mean.iter())
                    .map(|(r, m)| (1.0 - momentum) * r + momentum * m)
                    .collect();
                let new_var: Vec<f64> = running_var
                    .iter()
                    .zip(var.iter())
                    .map(|(r, v)| (1.0 - momentum) * r + momentum * v)
                    .collect();
                (new_mean, new_var)
            });
            (out.into_dyn(), xhat.into_dyn(), inv_std, updated)
        };
        let rg = self.needs_grad(&[x, gamma, beta]);
        let var = self.push(
            value,
            rg,
            Op::BatchNorm {
                x: x.idx,
                gamma: gamma.idx,
                beta: beta.idx,
                xhat,
                inv_std,
                batch_stats: train,
            },
        );
        (var, updated)
    }

    /// Replace entries where `mask` is true with `fill`; their gradient is
    /// exactly zero. The mask broadcasts to the value's shape.
    pub fn masked_fill(&self, x: Var, mask: &ndarray::ArrayD<bool>, fill: f64) -> Var {
        let (value, keep) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.idx].value;
            let m = mask
                .broadcast(xv.raw_dim())
                .expect("mask not broadcastable to value shape");
            let mut out = xv.clone();
            let mut keep = ArrayD::zeros(xv.raw_dim());
            for ((o, k), &m) in out.iter_mut().zip(keep.iter_mut()).zip(m.iter()) {
                if m {
                    *o = fill;
                } else {
                    *k = 1.0;
                }
            }
            (out, keep)
        };
        let rg = self.needs_grad(&[x]);
        self.push(value, rg, Op::MaskedFill { x: x.idx, keep })
    }

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Var {
        assert!(!inputs.is_empty(), "concat of zero tensors");
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<ArrayViewD<f64>> =
                inputs.iter().map(|v| nodes[v.idx].value.view()).collect();
            ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch")
        };
        let rg = self.needs_grad(inputs);
        self.push(
            value,
            rg,
            Op::Concat {
                inputs: inputs.iter().map(|v| v.idx).collect(),
                axis,
            },
        )
    }

    /// Contiguous range `[start, end)` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, end: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.idx].value;
            assert!(
                start <= end && end <= xv.shape()[axis],
                "slice [{start}, {end}) out of range on axis {axis} of {:?}",
                xv.shape()
            );
            xv.slice_axis(Axis(axis), ndarray::Slice::from(start..end))
                .to_owned()
        };
        let rg = self.needs_grad(&[x]);
        self.push(
            value,
            rg,
            Op::Slice {
                x: x.idx,
                axis,
                start,
            },
        )
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let value = ArrayD::from_elem(IxDyn(&[]), self.nodes.borrow()[x.idx].value.sum());
        let rg = self.needs_grad(&[x]);
        self.push(value, rg, Op::SumAll { x: x.idx })
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let nodes_len = self.nodes.borrow()[x.idx].value.len();
        assert!(nodes_len > 0, "mean of empty tensor");
        let value = ArrayD::from_elem(
            IxDyn(&[]),
            self.nodes.borrow()[x.idx].value.sum() / nodes_len as f64,
        );
        let rg = self.needs_grad(&[x]);
        self.push(value, rg, Op::MeanAll { x: x.idx })
    }

    /// Gather `out[n] = x[n, ids[n]]` from a 2-d tensor.
    pub fn pick_last(&self, x: Var, ids: &[usize]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = to_2d(&nodes[x.idx].value);
            assert_eq!(xv.nrows(), ids.len(), "pick_last row count");
            let mut out = ndarray::Array1::zeros(ids.len());
            for (n, &id) in ids.iter().enumerate() {
                assert!(id < xv.ncols(), "pick_last id {id} out of range");
                out[n] = xv[[n, id]];
            }
            out.into_dyn()
        };
        let rg = self.needs_grad(&[x]);
        self.push(
            value,
            rg,
            Op::PickLast {
                x: x.idx,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.idx].value;
            xv.view()
                .to_shape(IxDyn(shape))
                .expect("reshape length mismatch")
                .to_owned()
        };
        let rg = self.needs_grad(&[x]);
        self.push(value, rg, Op::Reshape { x: x.idx })
    }

    /// Permute axes and materialize in standard layout.
    pub fn permute(&self, x: Var, axes: &[usize]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.idx].value;
            assert_eq!(axes.len(), xv.ndim(), "permute axes rank");
            xv.view()
                .permuted_axes(IxDyn(axes))
                .as_standard_layout()
                .to_owned()
        };
        let rg = self.needs_grad(&[x]);
        self.push(
            value,
            rg,
            Op::Permute {
                x: x.idx,
                axes: axes.to_vec(),
            },
        )
    }

    // -- composites ---------------------------------------------------------

    /// `x W + b` for 2-d `x`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add(xw, b)
    }

    /// Mean squared error against a target, averaged over all entries.
    pub fn mse(&self, pred: Var, target: Var) -> Var {
        let diff = self.sub(pred, target);
        let sq = self.mul(diff, diff);
        self.mean_all(sq)
    }

    // -- backward -----------------------------------------------------------

    /// Reverse accumulation from a scalar loss. Consumes the recording; a
    /// second call without a fresh forward pass is an error.
    pub fn backward(&self, loss: Var) -> Result<()> {
        if self.consumed.get() {
            return Err(MeldError::InvalidData(
                "backward called twice on one tape".into(),
            ));
        }
        self.consumed.set(true);
        let mut nodes = self.nodes.borrow_mut();
        {
            let l = &mut nodes[loss.idx];
            assert!(l.value.len() == 1, "backward needs a scalar loss");
            l.grad = Some(ArrayD::from_elem(l.value.raw_dim(), 1.0));
        }
        for i in (0..=loss.idx).rev() {
            if !nodes[i].requires_grad || nodes[i].grad.is_none() {
                continue;
            }
            let op = std::mem::replace(&mut nodes[i].op, Op::Consumed);
            let grad_out = nodes[i].grad.clone().unwrap();
            backward_op(&mut nodes, i, op, grad_out);
        }
        Ok(())
    }
}

fn gelu_fwd(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

fn accumulate(nodes: &mut [Node], idx: usize, grad: ArrayD<f64>) {
    if !nodes[idx].requires_grad {
        return;
    }
    debug_assert_eq!(nodes[idx].value.shape(), grad.shape(), "gradient shape");
    match &mut nodes[idx].grad {
        Some(g) => *g += &grad,
        slot @ None => *slot = Some(grad),
    }
}

fn backward_op(nodes: &mut [Node], out_idx: usize, op: Op, grad_out: ArrayD<f64>) {
    match op {
        Op::Leaf | Op::Consumed => {}
        Op::MatMul { a, b } => {
            let ga = {
                let gv = to_2d(&grad_out);
                let bv = to_2d(&nodes[b].value);
                gv.dot(&bv.t()).into_dyn()
            };
            let gb = {
                let gv = to_2d(&grad_out);
                let av = to_2d(&nodes[a].value);
                av.t().dot(&gv).into_dyn()
            };
            accumulate(nodes, a, ga);
            accumulate(nodes, b, gb);
        }
        Op::Bmm { a, b } => {
            let (ga, gb) = {
                let gv = to_3d(&grad_out);
                let av = to_3d(&nodes[a].value);
                let bv = to_3d(&nodes[b].value);
                let bsz = gv.shape()[0];
                let mut ga = ndarray::Array3::zeros((bsz, av.shape()[1], av.shape()[2]));
                let mut gb = ndarray::Array3::zeros((bsz, bv.shape()[1], bv.shape()[2]));
                for i in 0..bsz {
                    let g = gv.index_axis(Axis(0), i);
                    ga.index_axis_mut(Axis(0), i)
                        .assign(&g.dot(&bv.index_axis(Axis(0), i).t()));
                    gb.index_axis_mut(Axis(0), i)
                        .assign(&av.index_axis(Axis(0), i).t().dot(&g));
                }
                (ga.into_dyn(), gb.into_dyn())
            };
            accumulate(nodes, a, ga);
            accumulate(nodes, b, gb);
        }
        Op::Add { a, b } => {
            let ga = unbroadcast(grad_out.clone(), &nodes[a].value.shape().to_vec());
            let gb = unbroadcast(grad_out, &nodes[b].value.shape().to_vec());
            accumulate(nodes, a, ga);
            accumulate(nodes, b, gb);
        }
        Op::Mul { a, b } => {
            let shape = grad_out.shape().to_vec();
            let dim = IxDyn(&shape);
            let ga = {
                let bv = nodes[b].value.broadcast(dim.clone()).unwrap().to_owned();
                unbroadcast(&grad_out * &bv, &nodes[a].value.shape().to_vec())
            };
            let gb = {
                let av = nodes[a].value.broadcast(dim).unwrap().to_owned();
                unbroadcast(&grad_out * &av, &nodes[b].value.shape().to_vec())
            };
            accumulate(nodes, a, ga);
            accumulate(nodes, b, gb);
        }
        Op::Scale { x, c } => {
            accumulate(nodes, x, grad_out.mapv(|g| g * c));
        }
        Op::SoftmaxLast { x } => {
            let y = &nodes[out_idx].value;
            let mut gx = grad_out.clone();
            for (mut glane, ylane) in gx.rows_mut().into_iter().zip(y.rows()) {
                let dot: f64 = glane.iter().zip(ylane.iter()).map(|(g, y)| g * y).sum();
                for (g, &yv) in glane.iter_mut().zip(ylane.iter()) {
                    *g = yv * (*g - dot);
                }
            }
            accumulate(nodes, x, gx);
        }
        Op::LogSoftmaxLast { x } => {
            let y = &nodes[out_idx].value;
            let mut gx = grad_out.clone();
            for (mut glane, ylane) in gx.rows_mut().into_iter().zip(y.rows()) {
                let gsum: f64 = glane.iter().sum();
                for (g, &lv) in glane.iter_mut().zip(ylane.iter()) {
                    *g -= lv.exp() * gsum;
                }
            }
            accumulate(nodes, x, gx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        } => {
            let d = *nodes[x].value.shape().last().unwrap();
            let gv = nodes[gamma].value.clone();
            let mut gx = nodes[x].value.clone();
            let mut ggamma = ArrayD::zeros(IxDyn(&[d]));
            let mut gbeta = ArrayD::zeros(IxDyn(&[d]));
            let xv = nodes[x].value.clone();
            for (((xlane, glane), mut outlane), (m, s)) in xv
                .rows()
                .into_iter()
                .zip(grad_out.rows())
                .zip(gx.rows_mut())
                .zip(mean.iter().zip(inv_std.iter()))
            {
                // xhat = (x - m) * s; dxhat = dy * gamma
                let xhat: Vec<f64> = xlane.iter().map(|v| (v - m) * s).collect();
                let dxhat: Vec<f64> = glane
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * gv[[i]])
                    .collect();
                for i in 0..d {
                    ggamma[[i]] += glane[i] * xhat[i];
                    gbeta[[i]] += glane[i];
                }
                let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / d as f64;
                let mean_dxhat_xhat: f64 =
                    dxhat.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for i in 0..d {
                    outlane[i] = s * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                }
            }
            accumulate(nodes, x, gx);
            accumulate(nodes, gamma, ggamma);
            accumulate(nodes, beta, gbeta);
        }
        Op::Gelu { x } => {
            let gx = &grad_out * &nodes[x].value.mapv(gelu_grad);
            accumulate(nodes, x, gx);
        }
        Op::Tanh { x } => {
            let y = &nodes[out_idx].value;
            let gx = &grad_out * &y.mapv(|t| 1.0 - t * t);
            accumulate(nodes, x, gx);
        }
        Op::Dropout { x, mask } => {
            accumulate(nodes, x, &grad_out * &mask);
        }
        Op::Embedding { table, ids } => {
            let mut gt = ArrayD::zeros(nodes[table].value.raw_dim());
            {
                let g2 = to_2d(&grad_out);
                let mut gt2 = gt
                    .view_mut()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                for (n, &id) in ids.iter().enumerate() {
                    let mut row = gt2.row_mut(id);
                    row += &g2.row(n);
                }
            }
            accumulate(nodes, table, gt);
        }
        Op::Conv1d { x, w, b } => {
            let (gx, gw, gb) = {
                let xv = to_2d(&nodes[x].value);
                let wv = &nodes[w].value;
                let gv = to_2d(&grad_out);
                let (c_out, c_in, width) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                let pad = (width - 1) / 2;
                let t_len = xv.nrows();
                let mut gx = ndarray::Array2::zeros((t_len, c_in));
                let mut gw = ArrayD::zeros(wv.raw_dim());
                let mut gb = ArrayD::zeros(IxDyn(&[c_out]));
                for t in 0..t_len {
                    for o in 0..c_out {
                        let g = gv[[t, o]];
                        gb[[o]] += g;
                        for k in 0..width {
                            let src = t as isize + k as isize - pad as isize;
                            if src < 0 || src >= t_len as isize {
                                continue;
                            }
                            let src = src as usize;
                            for c in 0..c_in {
                                gx[[src, c]] += g * wv[[o, c, k]];
                                gw[[o, c, k]] += g * xv[[src, c]];
                            }
                        }
                    }
                }
                (gx.into_dyn(), gw, gb)
            };
            accumulate(nodes, x, gx);
            accumulate(nodes, w, gw);
            accumulate(nodes, b, gb);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let (gx, ggamma, gbeta) = {
                let gv = to_2d(&grad_out);
                let hv = to_2d(&xhat);
                let gammav = &nodes[gamma].value;
                let (t_len, c_len) = (gv.nrows(), gv.ncols());
                let mut ggamma = ArrayD::zeros(IxDyn(&[c_len]));
                let mut gbeta = ArrayD::zeros(IxDyn(&[c_len]));
                for t in 0..t_len {
                    for c in 0..c_len {
                        ggamma[[c]] += gv[[t, c]] * hv[[t, c]];
                        gbeta[[c]] += gv[[t, c]];
                    }
                }
                let mut gx = ndarray::Array2::zeros((t_len, c_len));
                for c in 0..c_len {
                    let g_scale = gammav[[c]] * inv_std[c];
                    if batch_stats {
                        let sum_dy: f64 = (0..t_len).map(|t| gv[[t, c]]).sum();
                        let sum_dy_h: f64 = (0..t_len).map(|t| gv[[t, c]] * hv[[t, c]]).sum();
                        for t in 0..t_len {
                            gx[[t, c]] = g_scale
                                * (gv[[t, c]]
                                    - sum_dy / t_len as f64
                                    - hv[[t, c]] * sum_dy_h / t_len as f64);
                        }
                    } else {
                        for t in 0..t_len {
                            gx[[t, c]] = g_scale * gv[[t, c]];
                        }
                    }
                }
                (gx.into_dyn(), ggamma, gbeta)
            };
            accumulate(nodes, x, gx);
            accumulate(nodes, gamma, ggamma);
            accumulate(nodes, beta, gbeta);
        }
        Op::MaskedFill { x, keep } => {
            accumulate(nodes, x, &grad_out * &keep);
        }
        Op::Concat { inputs, axis } => {
            let mut offset = 0;
            for idx in inputs {
                let len = nodes[idx].value.shape()[axis];
                let g = grad_out
                    .slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + len))
                    .to_owned();
                accumulate(nodes, idx, g);
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let mut gx = ArrayD::zeros(nodes[x].value.raw_dim());
            let len = grad_out.shape()[axis];
            gx.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                .assign(&grad_out);
            accumulate(nodes, x, gx);
        }
        Op::SumAll { x } => {
            let g = *grad_out.iter().next().unwrap();
            accumulate(nodes, x, ArrayD::from_elem(nodes[x].value.raw_dim(), g));
        }
        Op::MeanAll { x } => {
            let n = nodes[x].value.len() as f64;
            let g = *grad_out.iter().next().unwrap() / n;
            accumulate(nodes, x, ArrayD::from_elem(nodes[x].value.raw_dim(), g));
        }
        Op::PickLast { x, ids } => {
            let mut gx = ArrayD::zeros(nodes[x].value.raw_dim());
            {
                let mut g2 = gx
                    .view_mut()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let g1 = grad_out
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap();
                for (n, &id) in ids.iter().enumerate() {
                    g2[[n, id]] += g1[n];
                }
            }
            accumulate(nodes, x, gx);
        }
        Op::Reshape { x } => {
            let g = grad_out
                .view()
                .to_shape(nodes[x].value.raw_dim())
                .unwrap()
                .to_owned();
            accumulate(nodes, x, g);
        }
        Op::Permute { x, axes } => {
            let mut inverse = vec![0usize; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let g = grad_out
                .view()
                .permuted_axes(IxDyn(&inverse))
                .as_standard_layout()
                .to_owned();
            accumulate(nodes, x, g);
        }
    }
}
