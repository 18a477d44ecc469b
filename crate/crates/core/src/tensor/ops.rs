//! Differentiable tensor operations.
//!
//! Each op computes its value eagerly and, when any operand is attached,
//! records one tape node whose backward closure pushes the output gradient
//! into the attached operands. Gradients of piecewise functions take the
//! subgradient of the branch actually evaluated (relu at 0 propagates 0,
//! the log clamp region propagates 0, max/min reductions route to the first
//! extremum in scan order).

use std::rc::Rc;

use super::{common_core, record, NodeRef, Tensor};

/// Lower clamp applied to the argument of `log_clamped`.
pub const LOG_CLAMP: f64 = 1e-8;

#[inline(always)]
fn fma(a: f64, b: f64, c: f64) -> f64 {
    if cfg!(target_feature = "fma") {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

/// y[j] += a * x[j] over contiguous slices; the workhorse of every kernel.
#[inline(always)]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yj, xj) in y.iter_mut().zip(x) {
        *yj = fma(a, *xj, *yj);
    }
}

// ---------------------------------------------------------------------------
// broadcasting helpers
// ---------------------------------------------------------------------------

/// Right-aligned broadcast of two shapes where mismatched axes must be 1.
/// Returns the output shape; panics on incompatibility.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "shapes {a:?} and {b:?} do not broadcast (axis {i})"
        );
        out[i] = da.max(db);
    }
    out
}

/// Row-major strides, with stride 0 on broadcast (size-1) axes, right-aligned
/// against `out_shape`.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output element of a broadcast binary op, yielding the two
/// mapped input offsets. `f(out_index, a_index, b_index)`.
fn for_each_broadcast(
    out_shape: &[usize],
    astr: &[usize],
    bstr: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut ai = 0usize;
    let mut bi = 0usize;
    for oi in 0..total {
        f(oi, ai, bi);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ai += astr[d];
            bi += bstr[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ai -= astr[d] * out_shape[d];
            bi -= bstr[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn binary_elementwise(
    a: &Tensor,
    b: &Tensor,
    fwd: impl Fn(f64, f64) -> f64,
    // (g, a_val, b_val) -> (da, db)
    bwd: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
) -> Tensor {
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let total: usize = out_shape.iter().product();
    let mut out = vec![0.0; total];
    let same = a.shape() == b.shape();
    let (astr, bstr);
    if same {
        for ((o, &x), &y) in out.iter_mut().zip(a.data()).zip(b.data()) {
            *o = fwd(x, y);
        }
        astr = Vec::new();
        bstr = Vec::new();
    } else {
        astr = broadcast_strides(a.shape(), &out_shape);
        bstr = broadcast_strides(b.shape(), &out_shape);
        let (ad, bd) = (a.data(), b.data());
        for_each_broadcast(&out_shape, &astr, &bstr, |oi, ai, bi| {
            out[oi] = fwd(ad[ai], bd[bi]);
        });
    }
    let core = common_core(&[a.node_ref(), b.node_ref()]);
    let node = core.map(|c| {
        let (aid, bid) = (a.node_ref().map(|n| n.id), b.node_ref().map(|n| n.id));
        let (ad, bd) = (a.data_rc(), b.data_rc());
        let shape = out_shape.clone();
        record(
            &c,
            total,
            Box::new(move |g, store| {
                if same {
                    if let Some(aid) = aid {
                        let ga = store.accum(aid);
                        for i in 0..g.len() {
                            ga[i] += bwd(g[i], ad[i], bd[i]).0;
                        }
                    }
                    if let Some(bid) = bid {
                        let gb = store.accum(bid);
                        for i in 0..g.len() {
                            gb[i] += bwd(g[i], ad[i], bd[i]).1;
                        }
                    }
                } else {
                    if let Some(aid) = aid {
                        // Two passes keep the borrow of one buffer at a time.
                        let ga = store.accum(aid);
                        for_each_broadcast(&shape, &astr, &bstr, |oi, ai, bi| {
                            ga[ai] += bwd(g[oi], ad[ai], bd[bi]).0;
                        });
                    }
                    if let Some(bid) = bid {
                        let gb = store.accum(bid);
                        for_each_broadcast(&shape, &astr, &bstr, |oi, ai, bi| {
                            gb[bi] += bwd(g[oi], ad[ai], bd[bi]).1;
                        });
                    }
                }
            }),
        )
    });
    Tensor::from_parts(out_shape, out, node)
}

/// Unary op whose derivative needs only the input values.
fn unary_from_input(
    x: &Tensor,
    fwd: impl Fn(f64) -> f64,
    bwd: impl Fn(f64, f64) -> f64 + 'static, // (g, x_val) -> dx
) -> Tensor {
    let out: Vec<f64> = x.data().iter().map(|&v| fwd(v)).collect();
    let node = x.node_ref().map(|n| {
        let xid = n.id;
        let xd = x.data_rc();
        record(
            &n.core,
            out.len(),
            Box::new(move |g, store| {
                let gx = store.accum(xid);
                for i in 0..g.len() {
                    gx[i] += bwd(g[i], xd[i]);
                }
            }),
        )
    });
    Tensor::from_parts(x.shape().to_vec(), out, node)
}

/// Unary op whose derivative needs only the output values; the backward
/// closure shares the output allocation instead of copying it.
fn unary_from_output(
    x: &Tensor,
    fwd: impl Fn(f64) -> f64,
    bwd: impl Fn(f64, f64) -> f64 + 'static, // (g, out_val) -> dx
) -> Tensor {
    let out: Vec<f64> = x.data().iter().map(|&v| fwd(v)).collect();
    let od: Rc<[f64]> = Rc::from(out);
    let node = x.node_ref().map(|n| {
        let xid = n.id;
        let od = Rc::clone(&od);
        record(
            &n.core,
            od.len(),
            Box::new(move |g, store| {
                let gx = store.accum(xid);
                for i in 0..g.len() {
                    gx[i] += bwd(g[i], od[i]);
                }
            }),
        )
    });
    Tensor { shape: x.shape().to_vec(), data: od, node }
}

/// Unary op with a value-independent derivative (affine maps).
fn unary_stateless(
    x: &Tensor,
    fwd: impl Fn(f64) -> f64,
    bwd: impl Fn(f64) -> f64 + 'static, // g -> dx
) -> Tensor {
    let out: Vec<f64> = x.data().iter().map(|&v| fwd(v)).collect();
    let node = x.node_ref().map(|n| {
        let xid = n.id;
        record(
            &n.core,
            out.len(),
            Box::new(move |g, store| {
                let gx = store.accum(xid);
                for i in 0..g.len() {
                    gx[i] += bwd(g[i]);
                }
            }),
        )
    });
    Tensor::from_parts(x.shape().to_vec(), out, node)
}

impl Tensor {
    // -- elementwise binary ------------------------------------------------

    pub fn add(&self, other: &Tensor) -> Tensor {
        binary_elementwise(self, other, |a, b| a + b, |g, _, _| (g, g))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        binary_elementwise(self, other, |a, b| a - b, |g, _, _| (g, -g))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        binary_elementwise(self, other, |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    // -- elementwise unary -------------------------------------------------

    pub fn scale(&self, k: f64) -> Tensor {
        unary_stateless(self, |v| v * k, move |g| g * k)
    }

    pub fn add_scalar(&self, k: f64) -> Tensor {
        unary_stateless(self, |v| v + k, |g| g)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// Rectified linear unit; the subgradient at 0 is 0.
    pub fn relu(&self) -> Tensor {
        unary_from_input(self, |v| v.max(0.0), |g, x| if x > 0.0 { g } else { 0.0 })
    }

    pub fn exp(&self) -> Tensor {
        unary_from_output(self, f64::exp, |g, o| g * o)
    }

    /// Natural log with the argument clamped below at [`LOG_CLAMP`]; in the
    /// clamped region the derivative is 0 (the function is constant there).
    pub fn log_clamped(&self) -> Tensor {
        unary_from_input(
            self,
            |v| v.max(LOG_CLAMP).ln(),
            |g, x| if x >= LOG_CLAMP { g / x } else { 0.0 },
        )
    }

    /// Numerically stable logistic sigmoid.
    pub fn sigmoid(&self) -> Tensor {
        unary_from_output(
            self,
            |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            |g, o| g * o * (1.0 - o),
        )
    }

    // -- reductions ----------------------------------------------------------

    /// Sum of all elements, as a scalar-shaped tensor.
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let node = self.node_ref().map(|n| {
            let xid = n.id;
            record(
                &n.core,
                1,
                Box::new(move |g, store| {
                    let g0 = g[0];
                    let gx = store.accum(xid);
                    for v in gx.iter_mut() {
                        *v += g0;
                    }
                }),
            )
        });
        Tensor::from_parts(vec![], vec![s], node)
    }

    /// Arithmetic mean of all elements, as a scalar-shaped tensor.
    pub fn mean(&self) -> Tensor {
        assert!(!self.is_empty(), "mean of an empty tensor");
        let inv = 1.0 / self.len() as f64;
        let s: f64 = self.data().iter().sum::<f64>() * inv;
        let node = self.node_ref().map(|n| {
            let xid = n.id;
            record(
                &n.core,
                1,
                Box::new(move |g, store| {
                    let g0 = g[0] * inv;
                    let gx = store.accum(xid);
                    for v in gx.iter_mut() {
                        *v += g0;
                    }
                }),
            )
        });
        Tensor::from_parts(vec![], vec![s], node)
    }

    // -- shape plumbing ------------------------------------------------------

    /// View with a new shape of identical element count.
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let len: usize = shape.iter().product();
        assert_eq!(
            len,
            self.len(),
            "reshape from {:?} to {:?} changes element count",
            self.shape(),
            shape
        );
        let node = self.node_ref().map(|n| {
            let xid = n.id;
            record(
                &n.core,
                len,
                Box::new(move |g, store| {
                    let gx = store.accum(xid);
                    for (gxi, gi) in gx.iter_mut().zip(g) {
                        *gxi += gi;
                    }
                }),
            )
        });
        Tensor { shape: shape.to_vec(), data: self.data_rc(), node }
    }

    /// Gathers rows (leading-axis slices) by index; rows may repeat.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        assert!(self.rank() >= 1, "gather_rows requires rank >= 1");
        let rows = self.shape()[0];
        let row_len: usize = self.shape()[1..].iter().product();
        for &i in idx {
            assert!(i < rows, "gather_rows index {i} out of bounds for {rows} rows");
        }
        let mut out = vec![0.0; idx.len() * row_len];
        let d = self.data();
        for (o, &i) in out.chunks_exact_mut(row_len).zip(idx) {
            o.copy_from_slice(&d[i * row_len..(i + 1) * row_len]);
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[0] = idx.len();
        let node = self.node_ref().map(|n| {
            let xid = n.id;
            let idx: Rc<[usize]> = Rc::from(idx.to_vec());
            record(
                &n.core,
                out.len(),
                Box::new(move |g, store| {
                    let gx = store.accum(xid);
                    for (grow, &i) in g.chunks_exact(row_len).zip(idx.iter()) {
                        axpy(1.0, grow, &mut gx[i * row_len..(i + 1) * row_len]);
                    }
                }),
            )
        });
        Tensor::from_parts(out_shape, out, node)
    }

    /// Concatenates tensors along the leading axis; trailing dims must match.
    pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_rows of zero tensors");
        let tail = &parts[0].shape()[1..];
        let row_len: usize = tail.iter().product();
        let mut rows = 0usize;
        for p in parts {
            assert_eq!(
                &p.shape()[1..],
                tail,
                "concat_rows trailing dims differ: {:?} vs {:?}",
                p.shape(),
                parts[0].shape()
            );
            rows += p.shape()[0];
        }
        let mut out = Vec::with_capacity(rows * row_len);
        for p in parts {
            out.extend_from_slice(p.data());
        }
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[0] = rows;
        let core = {
            let nodes: Vec<Option<&NodeRef>> = parts.iter().map(|p| p.node_ref()).collect();
            common_core(&nodes)
        };
        let node = core.map(|c| {
            let spans: Vec<(Option<usize>, usize)> =
                parts.iter().map(|p| (p.node_ref().map(|n| n.id), p.len())).collect();
            record(
                &c,
                out.len(),
                Box::new(move |g, store| {
                    let mut off = 0usize;
                    for &(id, len) in &spans {
                        if let Some(id) = id {
                            let gx = store.accum(id);
                            axpy(1.0, &g[off..off + len], gx);
                        }
                        off += len;
                    }
                }),
            )
        });
        Tensor::from_parts(out_shape, out, node)
    }

    // -- linear algebra ------------------------------------------------------

    /// Matrix product of `[m,k] x [k,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.rank(), 2, "matmul lhs must be rank 2, got {:?}", self.shape());
        assert_eq!(rhs.rank(), 2, "matmul rhs must be rank 2, got {:?}", rhs.shape());
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (rhs.shape()[0], rhs.shape()[1]);
        assert_eq!(
            k, k2,
            "matmul inner dims differ: {:?} x {:?}",
            self.shape(),
            rhs.shape()
        );
        let mut out = vec![0.0; m * n];
        gemm(self.data(), rhs.data(), &mut out, m, k, n);
        let core = common_core(&[self.node_ref(), rhs.node_ref()]);
        let node = core.map(|c| {
            let (aid, bid) = (self.node_ref().map(|x| x.id), rhs.node_ref().map(|x| x.id));
            let (ad, bd) = (self.data_rc(), rhs.data_rc());
            record(
                &c,
                m * n,
                Box::new(move |g, store| {
                    if let Some(aid) = aid {
                        // dA = g . B^T
                        let bt = transpose(&bd, k, n);
                        gemm(g, &bt, store.accum(aid), m, n, k);
                    }
                    if let Some(bid) = bid {
                        // dB = A^T . g
                        let at = transpose(&ad, m, k);
                        gemm(&at, g, store.accum(bid), k, m, n);
                    }
                }),
            )
        });
        Tensor::from_parts(vec![m, n], out, node)
    }

    // -- convolution -----------------------------------------------------------

    /// 2D convolution over a `[H,W,Cin]` tensor with a `[kh,kw,Cin,Cout]`
    /// kernel, stride 1, zero padding chosen so the output stays `[H,W,Cout]`
    /// (kernel sides must be odd).
    pub fn conv2d(&self, kernel: &Tensor, bias: Option<&Tensor>) -> Tensor {
        assert_eq!(self.rank(), 3, "conv2d input must be [H,W,Cin], got {:?}", self.shape());
        assert_eq!(
            kernel.rank(),
            4,
            "conv2d kernel must be [kh,kw,Cin,Cout], got {:?}",
            kernel.shape()
        );
        let (h, w, ci) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (kh, kw, kci, co) =
            (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2], kernel.shape()[3]);
        assert_eq!(ci, kci, "conv2d channel mismatch: input {:?} kernel {:?}", self.shape(), kernel.shape());
        assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d kernel sides must be odd, got {kh}x{kw}");
        if let Some(b) = bias {
            assert_eq!(b.shape(), [co], "conv2d bias must be [Cout], got {:?}", b.shape());
        }
        let mut out = vec![0.0; h * w * co];
        if let Some(b) = bias {
            for px in out.chunks_exact_mut(co) {
                px.copy_from_slice(b.data());
            }
        }
        conv_forward(self.data(), kernel.data(), &mut out, h, w, ci, co, kh, kw);
        let core = common_core(&[self.node_ref(), kernel.node_ref(), bias.and_then(|b| b.node_ref())]);
        let node = core.map(|c| {
            let xid = self.node_ref().map(|n| n.id);
            let kid = kernel.node_ref().map(|n| n.id);
            let bid = bias.and_then(|b| b.node_ref()).map(|n| n.id);
            let xd = self.data_rc();
            let kd = kernel.data_rc();
            record(
                &c,
                h * w * co,
                Box::new(move |g, store| {
                    if let Some(bid) = bid {
                        let gb = store.accum(bid);
                        for grow in g.chunks_exact(co) {
                            axpy(1.0, grow, gb);
                        }
                    }
                    if let Some(kid) = kid {
                        let gk = store.accum(kid);
                        conv_backward_kernel(&xd, g, gk, h, w, ci, co, kh, kw);
                    }
                    if let Some(xid) = xid {
                        let gx = store.accum(xid);
                        conv_backward_input(&kd, g, gx, h, w, ci, co, kh, kw);
                    }
                }),
            )
        });
        Tensor::from_parts(vec![h, w, co], out, node)
    }

    // -- softmax ---------------------------------------------------------------

    /// Softmax along `axis` with max subtraction; each lane sums to 1 within
    /// f64 roundoff. Panics on non-finite input.
    pub fn softmax(&self, axis: usize) -> Tensor {
        assert!(axis < self.rank(), "softmax axis {axis} out of range for shape {:?}", self.shape());
        for (i, v) in self.data().iter().enumerate() {
            assert!(v.is_finite(), "softmax input has non-finite value {v} at flat index {i}");
        }
        let n = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let outer: usize = self.shape()[..axis].iter().product();
        let d = self.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for t in 0..n {
                    mx = mx.max(d[base + t * inner]);
                }
                let mut s = 0.0;
                for t in 0..n {
                    let e = (d[base + t * inner] - mx).exp();
                    out[base + t * inner] = e;
                    s += e;
                }
                let inv = 1.0 / s;
                for t in 0..n {
                    out[base + t * inner] *= inv;
                }
            }
        }
        let node = self.node_ref().map(|nr| {
            let xid = nr.id;
            let od: Rc<[f64]> = Rc::from(out.clone());
            record(
                &nr.core,
                d.len(),
                Box::new(move |g, store| {
                    let gx = store.accum(xid);
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let mut dot = 0.0;
                            for t in 0..n {
                                let k = base + t * inner;
                                dot = fma(g[k], od[k], dot);
                            }
                            for t in 0..n {
                                let k = base + t * inner;
                                gx[k] += od[k] * (g[k] - dot);
                            }
                        }
                    }
                }),
            )
        });
        Tensor::from_parts(self.shape().to_vec(), out, node)
    }
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// out[i*n..] += sum_l a[i*k+l] * b[l*n..], i.e. C += A·B on row-major
/// slices. Register-tiled: a 4x8 block of C is preloaded into local
/// accumulators and held across the whole K loop, so each element's fma
/// chain is interleaved with 31 independent ones instead of serialising on
/// a single in-memory row. Every matrix-shaped kernel in the crate funnels
/// through here, so this loop structure is what sets the training rate.
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    const RB: usize = 4;
    const JB: usize = 8;
    let mut i = 0;
    while i + RB <= m {
        let arows = &a[i * k..(i + RB) * k];
        let orows = &mut out[i * n..(i + RB) * n];
        let mut j = 0;
        while j + JB <= n {
            let mut acc = [[0.0f64; JB]; RB];
            for (r, accr) in acc.iter_mut().enumerate() {
                accr.copy_from_slice(&orows[r * n + j..r * n + j + JB]);
            }
            for l in 0..k {
                let brow: &[f64; JB] = b[l * n + j..l * n + j + JB].try_into().unwrap();
                for (r, accr) in acc.iter_mut().enumerate() {
                    let a_rl = arows[r * k + l];
                    for t in 0..JB {
                        accr[t] = fma(a_rl, brow[t], accr[t]);
                    }
                }
            }
            for (r, accr) in acc.iter().enumerate() {
                orows[r * n + j..r * n + j + JB].copy_from_slice(accr);
            }
            j += JB;
        }
        if j < n {
            for r in 0..RB {
                let arow = &arows[r * k..(r + 1) * k];
                let orow = &mut orows[r * n + j..r * n + n];
                for (l, &a_rl) in arow.iter().enumerate() {
                    axpy(a_rl, &b[l * n + j..(l + 1) * n], orow);
                }
            }
        }
        i += RB;
    }
    while i < m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &a_il) in arow.iter().enumerate() {
            axpy(a_il, &b[l * n..(l + 1) * n], orow);
        }
        i += 1;
    }
}

/// For a same-padding tap offset `d` (0..k) on an axis of length `len`,
/// returns the output index range whose shifted read stays inside the map.
/// Output index `i` reads input index `i + d - k/2`.
fn tap_span(d: usize, k: usize, len: usize) -> (usize, usize) {
    let p = k / 2;
    (p.saturating_sub(d), len.min(len + p - d))
}

fn conv_forward(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    h: usize,
    wid: usize,
    ci: usize,
    co: usize,
    kh: usize,
    kw: usize,
) {
    let ph = kh / 2;
    let pw = kw / 2;
    // Tap-major: for each kernel offset, the valid output pixels of a row form
    // one contiguous span whose shifted input pixels are also contiguous, so
    // the whole row contribution is a single [len,ci]x[ci,co] product. At the
    // crate's channel widths this streams no scratch at all, which beats any
    // patch-matrix formulation whose gathers would dwarf the arithmetic.
    for dy in 0..kh {
        let (ylo, yhi) = tap_span(dy, kh, h);
        for dx in 0..kw {
            let (xlo, xhi) = tap_span(dx, kw, wid);
            if xlo >= xhi {
                continue;
            }
            let len = xhi - xlo;
            let sx = xlo + dx - pw;
            let wtap = &w[(dy * kw + dx) * ci * co..][..ci * co];
            for y in ylo..yhi {
                let sy = y + dy - ph;
                gemm(
                    &x[(sy * wid + sx) * ci..][..len * ci],
                    wtap,
                    &mut out[(y * wid + xlo) * co..][..len * co],
                    len,
                    ci,
                    co,
                );
            }
        }
    }
}

fn conv_backward_kernel(
    x: &[f64],
    g: &[f64],
    gk: &mut [f64],
    h: usize,
    wid: usize,
    ci: usize,
    co: usize,
    kh: usize,
    kw: usize,
) {
    let ph = kh / 2;
    let pw = kw / 2;
    // gk[dy,dx,:,:] += x_span^T . g_span per row; the input span is
    // transposed into a reused scratch row so both gemm operands are
    // contiguous.
    let mut xt = vec![0.0; ci * wid];
    for dy in 0..kh {
        let (ylo, yhi) = tap_span(dy, kh, h);
        for dx in 0..kw {
            let (xlo, xhi) = tap_span(dx, kw, wid);
            if xlo >= xhi {
                continue;
            }
            let len = xhi - xlo;
            let sx = xlo + dx - pw;
            let gtap = &mut gk[(dy * kw + dx) * ci * co..][..ci * co];
            for y in ylo..yhi {
                let sy = y + dy - ph;
                let xseg = &x[(sy * wid + sx) * ci..][..len * ci];
                let xtt = &mut xt[..ci * len];
                for (r, xrow) in xseg.chunks_exact(ci).enumerate() {
                    for (c, &v) in xrow.iter().enumerate() {
                        xtt[c * len + r] = v;
                    }
                }
                gemm(xtt, &g[(y * wid + xlo) * co..][..len * co], gtap, ci, len, co);
            }
        }
    }
}

fn conv_backward_input(
    w: &[f64],
    g: &[f64],
    gx: &mut [f64],
    h: usize,
    wid: usize,
    ci: usize,
    co: usize,
    kh: usize,
    kw: usize,
) {
    // Kernel transposed per tap into [kh,kw,Cout,Cin] blocks makes the
    // scatter back onto input pixels a mirror of the forward spans:
    // gx_span += g_span . W_tap^T.
    let mut wt = vec![0.0; w.len()];
    for tap in 0..kh * kw {
        let src = &w[tap * ci * co..][..ci * co];
        let dst = &mut wt[tap * ci * co..][..ci * co];
        for c in 0..ci {
            for o in 0..co {
                dst[o * ci + c] = src[c * co + o];
            }
        }
    }
    let ph = kh / 2;
    let pw = kw / 2;
    for dy in 0..kh {
        let (ylo, yhi) = tap_span(dy, kh, h);
        for dx in 0..kw {
            let (xlo, xhi) = tap_span(dx, kw, wid);
            if xlo >= xhi {
                continue;
            }
            let len = xhi - xlo;
            let sx = xlo + dx - pw;
            let wtap = &wt[(dy * kw + dx) * ci * co..][..ci * co];
            for y in ylo..yhi {
                let sy = y + dy - ph;
                gemm(
                    &g[(y * wid + xlo) * co..][..len * co],
                    wtap,
                    &mut gx[(sy * wid + sx) * ci..][..len * ci],
                    len,
                    co,
                    ci,
                );
            }
        }
    }
}
