//! Gradient graph nodes and retained-activation accounting.
//!
//! Every op that needs buffers for its backward pass wraps them in
//! [`Saved`], which registers with a thread-local gauge on creation and
//! deregisters on drop. The gauge therefore tracks exactly the buffers
//! that are alive only because backward might need them, which is the
//! quantity the memory reports assert on. Parameter and constant buffers
//! (leaf tensors) are kept alive by their owners, so saved references to
//! them are deliberately not counted.
//!
//! Graph construction and backward are single-threaded; each thread has
//! its own gauge, so concurrent training runs on separate threads do not
//! interfere with each other's accounting.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use super::scalar::Scalar;
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Thread-local gauge

thread_local! {
    static LIVE_BUFFERS: Cell<usize> = const { Cell::new(0) };
    static LIVE_BYTES: Cell<usize> = const { Cell::new(0) };
    static PEAK_BUFFERS: Cell<usize> = const { Cell::new(0) };
    static PEAK_BYTES: Cell<usize> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static OP_EVALS: Cell<u64> = const { Cell::new(0) };
    static CONV_EVALS: Cell<u64> = const { Cell::new(0) };
}

/// Snapshot of the retained-activation gauge for the current thread.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ActivationStats {
    pub live_buffers: usize,
    pub live_bytes: usize,
    pub peak_buffers: usize,
    pub peak_bytes: usize,
}

pub fn activation_stats() -> ActivationStats {
    ActivationStats {
        live_buffers: LIVE_BUFFERS.get(),
        live_bytes: LIVE_BYTES.get(),
        peak_buffers: PEAK_BUFFERS.get(),
        peak_bytes: PEAK_BYTES.get(),
    }
}

/// Resets the peak watermarks to the current live values.
pub fn reset_peak_stats() {
    PEAK_BUFFERS.set(LIVE_BUFFERS.get());
    PEAK_BYTES.set(LIVE_BYTES.get());
}

fn gauge_register(buffers: usize, bytes: usize) {
    LIVE_BUFFERS.set(LIVE_BUFFERS.get() + buffers);
    LIVE_BYTES.set(LIVE_BYTES.get() + bytes);
    if LIVE_BUFFERS.get() > PEAK_BUFFERS.get() {
        PEAK_BUFFERS.set(LIVE_BUFFERS.get());
    }
    if LIVE_BYTES.get() > PEAK_BYTES.get() {
        PEAK_BYTES.set(LIVE_BYTES.get());
    }
}

fn gauge_release(buffers: usize, bytes: usize) {
    LIVE_BUFFERS.set(LIVE_BUFFERS.get() - buffers);
    LIVE_BYTES.set(LIVE_BYTES.get() - bytes);
}

/// Total op evaluations on this thread (instrumentation).
pub fn op_evals() -> u64 {
    OP_EVALS.get()
}

/// Convolution evaluations on this thread (instrumentation).
pub fn conv_evals() -> u64 {
    CONV_EVALS.get()
}

pub(crate) fn count_op_eval(is_conv: bool) {
    OP_EVALS.set(OP_EVALS.get() + 1);
    if is_conv {
        CONV_EVALS.set(CONV_EVALS.get() + 1);
    }
}

// ---------------------------------------------------------------------------
// No-grad mode

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.get()
}

// ---------------------------------------------------------------------------
// Kink tracing
//
// Finite-difference checks are only valid where the loss is smooth over
// the probe bracket. When tracing is on, every leaky-relu records its
// input signs and every max-pool its argmax choices; two evaluations with
// identical traces took identical piecewise-linear branches, so central
// differences across them see a genuinely differentiable path.

thread_local! {
    static KINK_TRACE: RefCell<Option<Vec<u32>>> = const { RefCell::new(None) };
}

pub(crate) fn kink_trace_extend(values: impl Iterator<Item = u32>) {
    KINK_TRACE.with(|t| {
        if let Some(trace) = t.borrow_mut().as_mut() {
            trace.extend(values);
        }
    });
}

pub(crate) fn kink_trace_enabled() -> bool {
    KINK_TRACE.with(|t| t.borrow().is_some())
}

/// Runs `f` with branch tracing enabled and returns its branch trace.
pub fn with_kink_trace<R>(f: impl FnOnce() -> R) -> (R, Vec<u32>) {
    KINK_TRACE.with(|t| *t.borrow_mut() = Some(Vec::new()));
    let out = f();
    let trace = KINK_TRACE.with(|t| t.borrow_mut().take()).unwrap_or_default();
    (out, trace)
}

/// RAII guard that disables graph construction on the current thread.
pub struct NoGrad {
    prev: bool,
}

impl NoGrad {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.get();
        GRAD_ENABLED.set(false);
        NoGrad { prev }
    }
}

impl Drop for NoGrad {
    fn drop(&mut self) {
        GRAD_ENABLED.set(self.prev);
    }
}

/// Runs `f` with graph construction disabled.
pub fn with_no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = NoGrad::new();
    f()
}

// ---------------------------------------------------------------------------
// Saved buffers

/// A buffer retained for backward. `counted_bytes > 0` means it is
/// tracked by the gauge (activations); saved parameter/constant data is
/// held but not counted.
pub(crate) struct Saved<T: Scalar> {
    pub data: Arc<Vec<T>>,
    counted_bytes: usize,
}

impl<T: Scalar> Saved<T> {
    pub fn counted(data: Arc<Vec<T>>) -> Self {
        let bytes = data.len() * T::BYTES;
        gauge_register(1, bytes);
        Saved {
            data,
            counted_bytes: bytes,
        }
    }

    pub fn uncounted(data: Arc<Vec<T>>) -> Self {
        Saved {
            data,
            counted_bytes: 0,
        }
    }
}

impl<T: Scalar> Drop for Saved<T> {
    fn drop(&mut self) {
        if self.counted_bytes > 0 {
            gauge_release(1, self.counted_bytes);
        }
    }
}

/// Saved integer index buffer (max-pool argmax positions).
pub(crate) struct SavedIdx {
    pub data: Arc<Vec<u32>>,
    counted_bytes: usize,
}

impl SavedIdx {
    pub fn counted(data: Arc<Vec<u32>>) -> Self {
        let bytes = data.len() * 4;
        gauge_register(1, bytes);
        SavedIdx {
            data,
            counted_bytes: bytes,
        }
    }
}

impl Drop for SavedIdx {
    fn drop(&mut self) {
        gauge_release(1, self.counted_bytes);
    }
}

// ---------------------------------------------------------------------------
// Nodes

pub(crate) type Edge<T> = Option<Rc<Node<T>>>;

pub(crate) struct Node<T: Scalar> {
    pub op: Op<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub b: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvTDims {
    pub b: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) enum Op<T: Scalar> {
    Leaf {
        grad: RefCell<Option<Vec<T>>>,
        numel: usize,
    },
    Add {
        a: Edge<T>,
        b: Edge<T>,
    },
    Mul {
        a: Edge<T>,
        b: Edge<T>,
        a_data: Saved<T>,
        b_data: Saved<T>,
    },
    SumAll {
        input: Edge<T>,
        numel: usize,
    },
    LeakyRelu {
        input: Edge<T>,
        slope: f64,
        x: Saved<T>,
    },
    Conv2d {
        x: Edge<T>,
        w: Edge<T>,
        bias: Edge<T>,
        x_data: Saved<T>,
        w_data: Saved<T>,
        dims: ConvDims,
    },
    ConvTranspose2d {
        x: Edge<T>,
        w: Edge<T>,
        bias: Edge<T>,
        x_data: Saved<T>,
        w_data: Saved<T>,
        dims: ConvTDims,
    },
    InstanceNorm {
        input: Edge<T>,
        xhat: Saved<T>,
        inv_std: Saved<T>,
        shape: [usize; 4],
    },
    MaxPool2 {
        input: Edge<T>,
        idx: SavedIdx,
        in_numel: usize,
    },
    ConcatChannels {
        a: Edge<T>,
        b: Edge<T>,
        a_shape: [usize; 4],
        b_shape: [usize; 4],
    },
    SoftmaxChannels {
        input: Edge<T>,
        probs: Saved<T>,
        shape: [usize; 4],
    },
    CrossEntropy {
        input: Edge<T>,
        probs: Saved<T>,
        target: Arc<Vec<u32>>,
        shape: [usize; 4],
    },
    SoftDice {
        input: Edge<T>,
        probs: Saved<T>,
        target: Arc<Vec<u32>>,
        shape: [usize; 4],
        smooth: f64,
        /// Per foreground class: (intersection sum, denominator sum).
        class_sums: Vec<(f64, f64)>,
    },
}

impl<T: Scalar> Node<T> {
    fn input_edges(&self) -> Vec<&Rc<Node<T>>> {
        let mut out = Vec::new();
        let edges: [&Edge<T>; 3] = match &self.op {
            Op::Leaf { .. } => return out,
            Op::Add { a, b } | Op::Mul { a, b, .. } | Op::ConcatChannels { a, b, .. } => {
                [a, b, &None]
            }
            Op::SumAll { input, .. }
            | Op::LeakyRelu { input, .. }
            | Op::InstanceNorm { input, .. }
            | Op::MaxPool2 { input, .. }
            | Op::SoftmaxChannels { input, .. }
            | Op::CrossEntropy { input, .. }
            | Op::SoftDice { input, .. } => [input, &None, &None],
            Op::Conv2d { x, w, bias, .. } | Op::ConvTranspose2d { x, w, bias, .. } => {
                [x, w, bias]
            }
        };
        for e in edges {
            if let Some(n) = e {
                out.push(n);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Backward

/// Runs reverse-mode accumulation from `root` (a scalar-shaped output),
/// depositing gradients into every reachable leaf's grad slot.
pub(crate) fn run_backward<T: Scalar>(root: &Rc<Node<T>>) -> Result<()> {
    // Post-order DFS (iterative); each node visited exactly once.
    let mut topo: Vec<Rc<Node<T>>> = Vec::new();
    let mut visited: std::collections::HashSet<*const Node<T>> = std::collections::HashSet::new();
    let mut stack: Vec<(Rc<Node<T>>, usize)> = vec![(Rc::clone(root), 0)];
    visited.insert(Rc::as_ptr(root));
    while let Some((node, child_idx)) = stack.pop() {
        let children: Vec<Rc<Node<T>>> = node
            .input_edges()
            .into_iter()
            .map(Rc::clone)
            .collect();
        if child_idx < children.len() {
            stack.push((Rc::clone(&node), child_idx + 1));
            let child = Rc::clone(&children[child_idx]);
            if visited.insert(Rc::as_ptr(&child)) {
                stack.push((child, 0));
            }
        } else {
            topo.push(node);
        }
    }

    let mut grads: HashMap<*const Node<T>, Vec<T>> = HashMap::new();
    grads.insert(Rc::as_ptr(root), vec![T::one()]);

    for node in topo.iter().rev() {
        let Some(gout) = grads.remove(&Rc::as_ptr(node)) else {
            continue;
        };
        match &node.op {
            Op::Leaf { grad, numel } => {
                if gout.len() != *numel {
                    return Err(Error::Graph(format!(
                        "leaf gradient length {} != {}",
                        gout.len(),
                        numel
                    )));
                }
                let mut slot = grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(gout.iter()) {
                            *a = *a + *g;
                        }
                    }
                    None => *slot = Some(gout),
                }
            }
            op => {
                propagate(op, &gout, &mut |edge: &Edge<T>, g: Vec<T>| {
                    if let Some(n) = edge {
                        match grads.entry(Rc::as_ptr(n)) {
                            std::collections::hash_map::Entry::Occupied(mut e) => {
                                for (a, b) in e.get_mut().iter_mut().zip(g.iter()) {
                                    *a = *a + *b;
                                }
                            }
                            std::collections::hash_map::Entry::Vacant(e) => {
                                e.insert(g);
                            }
                        }
                    }
                });
            }
        }
    }
    Ok(())
}

/// Computes input gradients for one op and hands them to `sink`.
fn propagate<T: Scalar>(op: &Op<T>, gout: &[T], sink: &mut dyn FnMut(&Edge<T>, Vec<T>)) {
    use super::kernels;
    match op {
        Op::Leaf { .. } => unreachable!("leaf handled by caller"),
        Op::Add { a, b } => {
            if a.is_some() {
                sink(a, gout.to_vec());
            }
            if b.is_some() {
                sink(b, gout.to_vec());
            }
        }
        Op::Mul {
            a,
            b,
            a_data,
            b_data,
        } => {
            if a.is_some() {
                let g: Vec<T> = gout
                    .iter()
                    .zip(b_data.data.iter())
                    .map(|(&g, &v)| g * v)
                    .collect();
                sink(a, g);
            }
            if b.is_some() {
                let g: Vec<T> = gout
                    .iter()
                    .zip(a_data.data.iter())
                    .map(|(&g, &v)| g * v)
                    .collect();
                sink(b, g);
            }
        }
        Op::SumAll { input, numel } => {
            if input.is_some() {
                sink(input, vec![gout[0]; *numel]);
            }
        }
        Op::LeakyRelu { input, slope, x } => {
            if input.is_some() {
                let s = T::from_f64(*slope);
                let g: Vec<T> = gout
                    .iter()
                    .zip(x.data.iter())
                    .map(|(&g, &v)| if v > T::zero() { g } else { g * s })
                    .collect();
                sink(input, g);
            }
        }
        Op::Conv2d {
            x,
            w,
            bias,
            x_data,
            w_data,
            dims,
        } => {
            // The input and weight gradients are independent; overlap them.
            let (dx, dw) = match (x.is_some(), w.is_some()) {
                (true, true) => rayon::join(
                    || Some(kernels::conv2d_bwd_input(gout, &w_data.data, dims)),
                    || Some(kernels::conv2d_bwd_weight(gout, &x_data.data, dims)),
                ),
                (true, false) => (Some(kernels::conv2d_bwd_input(gout, &w_data.data, dims)), None),
                (false, true) => (None, Some(kernels::conv2d_bwd_weight(gout, &x_data.data, dims))),
                (false, false) => (None, None),
            };
            if let Some(dx) = dx {
                sink(x, dx);
            }
            if let Some(dw) = dw {
                sink(w, dw);
            }
            if bias.is_some() {
                sink(bias, kernels::conv2d_bwd_bias(gout, dims.b, dims.co, dims.ho * dims.wo));
            }
        }
        Op::ConvTranspose2d {
            x,
            w,
            bias,
            x_data,
            w_data,
            dims,
        } => {
            if x.is_some() {
                sink(x, kernels::convt_bwd_input(gout, &w_data.data, dims));
            }
            if w.is_some() {
                sink(w, kernels::convt_bwd_weight(gout, &x_data.data, dims));
            }
            if bias.is_some() {
                sink(bias, kernels::conv2d_bwd_bias(gout, dims.b, dims.co, dims.ho * dims.wo));
            }
        }
        Op::InstanceNorm {
            input,
            xhat,
            inv_std,
            shape,
        } => {
            if input.is_some() {
                sink(
                    input,
                    kernels::instance_norm_bwd(gout, &xhat.data, &inv_std.data, *shape),
                );
            }
        }
        Op::MaxPool2 {
            input,
            idx,
            in_numel,
        } => {
            if input.is_some() {
                let mut g = vec![T::zero(); *in_numel];
                for (&i, &go) in idx.data.iter().zip(gout.iter()) {
                    g[i as usize] = g[i as usize] + go;
                }
                sink(input, g);
            }
        }
        Op::ConcatChannels {
            a,
            b,
            a_shape,
            b_shape,
        } => {
            let (ga, gb) = kernels::concat_channels_bwd(gout, *a_shape, *b_shape);
            if a.is_some() {
                sink(a, ga);
            }
            if b.is_some() {
                sink(b, gb);
            }
        }
        Op::SoftmaxChannels {
            input,
            probs,
            shape,
        } => {
            if input.is_some() {
                sink(input, kernels::softmax_channels_bwd(gout, &probs.data, *shape));
            }
        }
        Op::CrossEntropy {
            input,
            probs,
            target,
            shape,
        } => {
            if input.is_some() {
                sink(
                    input,
                    kernels::cross_entropy_bwd(gout[0], &probs.data, target, *shape),
                );
            }
        }
        Op::SoftDice {
            input,
            probs,
            target,
            shape,
            smooth,
            class_sums,
        } => {
            if input.is_some() {
                sink(
                    input,
                    kernels::soft_dice_bwd(gout[0], &probs.data, target, *shape, *smooth, class_sums),
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauge_roundtrip() {
        let before = activation_stats();
        let buf = Arc::new(vec![0.0f32; 128]);
        let saved = Saved::counted(buf);
        let during = activation_stats();
        assert_eq!(during.live_buffers, before.live_buffers + 1);
        assert_eq!(during.live_bytes, before.live_bytes + 512);
        drop(saved);
        let after = activation_stats();
        assert_eq!(after.live_buffers, before.live_buffers);
        assert_eq!(after.live_bytes, before.live_bytes);
    }

    #[test]
    fn uncounted_saved_does_not_register() {
        let before = activation_stats();
        let saved = Saved::uncounted(Arc::new(vec![0.0f64; 64]));
        assert_eq!(activation_stats().live_buffers, before.live_buffers);
        drop(saved);
    }

    #[test]
    fn no_grad_guard_restores() {
        assert!(grad_enabled());
        {
            let _g = NoGrad::new();
            assert!(!grad_enabled());
            {
                let _g2 = NoGrad::new();
                assert!(!grad_enabled());
            }
            assert!(!grad_enabled());
        }
        assert!(grad_enabled());
    }
}
