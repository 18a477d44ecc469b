//! Dense f64 tensors and a reverse-mode differentiation tape.
//!
//! Tensors are row-major, immutable value holders. A [`Tape`] records one
//! forward pass; [`Tape::backward`] consumes it and returns gradients for
//! every reachable node. One backward per tape: recording onto a consumed
//! tape panics, calling backward twice is an error.
//!
//! Conventions shared by every operation:
//! - everything is f64; evaluation order is fixed, so results are
//!   bit-identical across runs on the same machine and binary;
//! - shape mismatches, mixed tapes and similar misuse are contract
//!   violations and panic with both shapes in the message;
//! - broadcasting in elementwise ops is limited to size-1 axes
//!   (right-aligned, NumPy style), which keeps the backward rule a plain
//!   sum over the broadcast axes.

mod checkpoint;
mod grad_check;
mod ops;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointEntry, CheckpointManifest};
pub use grad_check::{grad_check, grad_check_default, GradCheckReport, FD_STEP, FD_TOL};
pub use ops::LOG_CLAMP;
pub(crate) use ops::{gemm, transpose};

use std::cell::RefCell;
use std::rc::Rc;

/// Errors from tape evaluation. Structural misuse panics instead.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward requires a loss attached to the tape (got a detached tensor)")]
    DetachedLoss,
    #[error("tape already consumed by a previous backward")]
    TapeConsumed,
}

type BackFn = Box<dyn Fn(&[f64], &mut GradBuffers)>;

struct Node {
    len: usize,
    backward: Option<BackFn>, // None for leaves
}

pub(crate) struct TapeCore {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradient accumulation buffers, indexed by node id. Buffers are allocated
/// lazily so unreachable nodes never materialize one.
pub(crate) struct GradBuffers {
    lens: Vec<usize>,
    bufs: Vec<Option<Box<[f64]>>>,
}

impl GradBuffers {
    /// Mutable gradient buffer for node `id`, zero-initialized on first use.
    pub(crate) fn accum(&mut self, id: usize) -> &mut [f64] {
        let slot = &mut self.bufs[id];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.lens[id]].into_boxed_slice());
        }
        slot.as_deref_mut().unwrap()
    }

    /// Removes node `id`'s buffer from the store (allocating it first when
    /// missing) so a backward closure can hold two accumulators at once.
    /// Must be paired with [`GradBuffers::put`].
    fn take(&mut self, id: usize) -> Box<[f64]> {
        self.accum(id);
        self.bufs[id].take().unwrap()
    }

    fn put(&mut self, id: usize, buf: Box<[f64]>) {
        debug_assert!(self.bufs[id].is_none());
        self.bufs[id] = Some(buf);
    }
}

/// Handle tying a tensor to its node on a tape.
pub(crate) struct NodeRef {
    pub(crate) core: Rc<RefCell<TapeCore>>,
    pub(crate) id: usize,
}

impl Clone for NodeRef {
    fn clone(&self) -> Self {
        NodeRef { core: Rc::clone(&self.core), id: self.id }
    }
}

/// Records a new node on the tape and returns its handle.
///
/// Panics if the tape was already consumed by a backward pass.
pub(crate) fn record(core: &Rc<RefCell<TapeCore>>, len: usize, backward: BackFn) -> NodeRef {
    let mut tape = core.borrow_mut();
    assert!(!tape.consumed, "tape already consumed by backward; build a new tape per forward pass");
    let id = tape.nodes.len();
    tape.nodes.push(Node { len, backward: Some(backward) });
    NodeRef { core: Rc::clone(core), id }
}

/// Resolves the common tape of up to three operands, panicking when two
/// attached operands live on different tapes.
pub(crate) fn common_core(nodes: &[Option<&NodeRef>]) -> Option<Rc<RefCell<TapeCore>>> {
    let mut found: Option<&NodeRef> = None;
    for n in nodes.iter().flatten() {
        match found {
            None => found = Some(n),
            Some(prev) => assert!(
                Rc::ptr_eq(&prev.core, &n.core),
                "operands belong to different tapes"
            ),
        }
    }
    found.map(|n| Rc::clone(&n.core))
}

/// Records a custom operation with one differentiable input and precomputed
/// output data.  `backward(g, dx)` must add the contribution of the upstream
/// gradient `g` into the input accumulator `dx`.  A detached input yields a
/// detached output.
pub(crate) fn record_unary_map(
    x: &Tensor,
    shape: &[usize],
    out: Vec<f64>,
    backward: impl Fn(&[f64], &mut [f64]) + 'static,
) -> Tensor {
    debug_assert_eq!(out.len(), shape.iter().product::<usize>());
    let len = out.len();
    let node = x.node_ref().map(|n| {
        let xid = n.id;
        record(&n.core, len, Box::new(move |g, store| backward(g, store.accum(xid))))
    });
    Tensor::from_parts(shape.to_vec(), out, node)
}

/// Records a custom operation over a required input `a` and an optional
/// second input `b`, computing the forward pass from their raw buffers.
///
/// The backward closure receives `(g, a_data, b_data, da, db)`: the upstream
/// gradient, both value buffers, and one accumulator per input — `None` when
/// that input is detached and needs no gradient.  It must *add* into the
/// accumulators.
pub(crate) fn record_binary_map(
    a: &Tensor,
    b: Option<&Tensor>,
    shape: &[usize],
    forward: impl Fn(&[f64], Option<&[f64]>) -> Vec<f64>,
    backward: impl Fn(&[f64], &[f64], Option<&[f64]>, Option<&mut [f64]>, Option<&mut [f64]>)
        + 'static,
) -> Tensor {
    let out = forward(a.data(), b.map(|t| t.data()));
    debug_assert_eq!(out.len(), shape.iter().product::<usize>());
    let len = out.len();
    let core = common_core(&[a.node_ref(), b.and_then(|t| t.node_ref())]);
    let node = core.map(|c| {
        let aid = a.node_ref().map(|n| n.id);
        let bid = b.and_then(|t| t.node_ref()).map(|n| n.id);
        let ad = a.data_rc();
        let bd = b.map(|t| t.data_rc());
        record(
            &c,
            len,
            Box::new(move |g, store| {
                // Pull a's buffer out of the store so both accumulators can
                // be borrowed simultaneously.
                let mut a_buf = aid.map(|id| store.take(id));
                let db = bid.map(|id| store.accum(id));
                backward(g, &ad, bd.as_deref(), a_buf.as_deref_mut(), db);
                if let (Some(id), Some(buf)) = (aid, a_buf) {
                    store.put(id, buf);
                }
            }),
        )
    });
    Tensor::from_parts(shape.to_vec(), out, node)
}

/// A recording of one forward pass.
pub struct Tape {
    core: Rc<RefCell<TapeCore>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { core: Rc::new(RefCell::new(TapeCore { nodes: Vec::new(), consumed: false })) }
    }

    /// Registers a differentiable leaf (a parameter) on the tape.
    pub fn leaf(&self, shape: &[usize], data: Vec<f64>) -> Tensor {
        let len: usize = shape.iter().product();
        assert_eq!(
            len,
            data.len(),
            "leaf data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        let id = {
            let mut core = self.core.borrow_mut();
            assert!(!core.consumed, "tape already consumed by backward; build a new tape per forward pass");
            core.nodes.push(Node { len, backward: None });
            core.nodes.len() - 1
        };
        Tensor {
            shape: shape.to_vec(),
            data: Rc::from(data),
            node: Some(NodeRef { core: Rc::clone(&self.core), id }),
        }
    }

    /// Runs reverse-mode differentiation from a scalar loss and consumes the
    /// tape. Returns the gradient of the loss with respect to every reachable
    /// node; query per tensor with [`Gradients::wrt`].
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients, TensorError> {
        let nref = loss.node.as_ref().ok_or(TensorError::DetachedLoss)?;
        assert!(
            Rc::ptr_eq(&nref.core, &self.core),
            "loss tensor belongs to a different tape"
        );
        if loss.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: loss.shape.clone() });
        }
        let nodes = {
            let mut core = self.core.borrow_mut();
            if core.consumed {
                return Err(TensorError::TapeConsumed);
            }
            core.consumed = true;
            std::mem::take(&mut core.nodes)
        };
        let loss_id = nref.id;
        let mut store = GradBuffers {
            lens: nodes.iter().map(|n| n.len).collect(),
            bufs: (0..nodes.len()).map(|_| None).collect(),
        };
        store.accum(loss_id)[0] = 1.0;
        for id in (0..=loss_id).rev() {
            if store.bufs[id].is_none() {
                continue;
            }
            if let Some(back) = &nodes[id].backward {
                let g = store.bufs[id].take().unwrap();
                back(&g, &mut store);
                store.bufs[id] = Some(g);
            }
        }
        Ok(Gradients { tape_token: Rc::as_ptr(&self.core) as usize, bufs: store.bufs })
    }
}

/// Gradients produced by one backward pass, addressable by tensor.
pub struct Gradients {
    tape_token: usize,
    bufs: Vec<Option<Box<[f64]>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`. `None` when `t` is detached
    /// or was not reachable from the loss.
    pub fn wrt(&self, t: &Tensor) -> Option<&[f64]> {
        let node = t.node.as_ref()?;
        assert_eq!(
            Rc::as_ptr(&node.core) as usize,
            self.tape_token,
            "gradient queried for a tensor from a different tape"
        );
        self.bufs.get(node.id)?.as_deref()
    }
}

/// A dense row-major f64 tensor, optionally attached to a tape.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<[f64]>,
    node: Option<NodeRef>,
}

impl Tensor {
    /// A tensor with no tape attachment; gradients never flow into it.
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Tensor {
        let len: usize = shape.iter().product();
        assert_eq!(
            len,
            data.len(),
            "constant data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape: shape.to_vec(), data: Rc::from(data), node: None }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(&[], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(shape, vec![0.0; shape.iter().product()])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The single element of a scalar-shaped tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() requires a scalar, got shape {:?}", self.shape);
        self.data[0]
    }

    /// Same values, severed from the tape: gradients stop here.
    pub fn detach(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Rc::clone(&self.data), node: None }
    }

    /// Whether gradients can flow into this tensor.
    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node_ref(&self) -> Option<&NodeRef> {
        self.node.as_ref()
    }

    pub(crate) fn data_rc(&self) -> Rc<[f64]> {
        Rc::clone(&self.data)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>, node: Option<NodeRef>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data: Rc::from(data), node }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        write!(
            f,
            "Tensor(shape={:?}, attached={}, data[..{}]={:?}{})",
            self.shape,
            self.is_attached(),
            preview.len(),
            preview,
            if self.len() > 8 { ", ..." } else { "" }
        )
    }
}
