//! Differentiable operations.
//!
//! Each op validates shapes, computes the forward value through
//! [`super::kernels`], and attaches a graph node when tracking is on
//! (grad mode enabled and at least one input carries a node).

use std::rc::Rc;
use std::sync::Arc;

use super::graph::{
    self as graph, count_op_eval, grad_enabled, ConvDims, ConvTDims, Edge, Node, Op, Saved,
    SavedIdx,
};
use super::kernels;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn edge<T: Scalar>(t: &Tensor<T>) -> Edge<T> {
    t.node.clone()
}

/// Saves an input buffer for backward; counted by the gauge only when the
/// buffer is a graph-produced activation (not a leaf or constant).
fn save_input<T: Scalar>(t: &Tensor<T>) -> Saved<T> {
    if t.has_node() && !t.is_leaf() {
        Saved::counted(t.data_arc())
    } else {
        Saved::uncounted(t.data_arc())
    }
}

fn tracking<T: Scalar>(inputs: &[&Tensor<T>]) -> bool {
    grad_enabled() && inputs.iter().any(|t| t.has_node())
}

fn with_node<T: Scalar>(mut out: Tensor<T>, op: Op<T>) -> Tensor<T> {
    out.node = Some(Rc::new(Node { op }));
    out
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Elementwise sum of two same-shape tensors.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "add")?;
    count_op_eval(false);
    let data: Vec<T> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    let out = Tensor::from_vec(a.shape().to_vec(), data)?;
    if tracking(&[a, b]) {
        Ok(with_node(
            out,
            Op::Add {
                a: edge(a),
                b: edge(b),
            },
        ))
    } else {
        Ok(out)
    }
}

/// Elementwise product of two same-shape tensors.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "mul")?;
    count_op_eval(false);
    let data: Vec<T> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x * y)
        .collect();
    let out = Tensor::from_vec(a.shape().to_vec(), data)?;
    if tracking(&[a, b]) {
        let op = Op::Mul {
            a: edge(a),
            b: edge(b),
            a_data: save_input(a),
            b_data: save_input(b),
        };
        Ok(with_node(out, op))
    } else {
        Ok(out)
    }
}

/// Sum of all elements, as a `[1]`-shaped tensor.
pub fn sum_all<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    count_op_eval(false);
    let mut s = T::zero();
    for &v in a.data() {
        s = s + v;
    }
    let out = Tensor::from_vec(vec![1], vec![s])?;
    if tracking(&[a]) {
        Ok(with_node(
            out,
            Op::SumAll {
                input: edge(a),
                numel: a.numel(),
            },
        ))
    } else {
        Ok(out)
    }
}

pub fn leaky_relu<T: Scalar>(a: &Tensor<T>, slope: f64) -> Result<Tensor<T>> {
    count_op_eval(false);
    if graph::kink_trace_enabled() {
        graph::kink_trace_extend(a.data().iter().map(|&v| (v > T::zero()) as u32));
    }
    let s = T::from_f64(slope);
    let data: Vec<T> = a
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { v * s })
        .collect();
    let out = Tensor::from_vec(a.shape().to_vec(), data)?;
    if tracking(&[a]) {
        let op = Op::LeakyRelu {
            input: edge(a),
            slope,
            x: save_input(a),
        };
        Ok(with_node(out, op))
    } else {
        Ok(out)
    }
}

fn conv_out_extent(input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let span = input + 2 * padding;
    if span < k {
        return Err(Error::Shape(format!(
            "kernel {k} larger than padded input {span}"
        )));
    }
    if (span - k) % stride != 0 {
        return Err(Error::Shape(format!(
            "conv extent ({input} + 2*{padding} - {k}) not divisible by stride {stride}"
        )));
    }
    Ok((span - k) / stride + 1)
}

/// 2-D cross-correlation with bias. Weight layout `[co, ci, kh, kw]`;
/// kernel extents must be odd.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let [b, ci, h, w] = input.shape4()?;
    let [co, wci, kh, kw] = weight.shape4()?;
    if stride < 1 {
        return Err(Error::Shape("conv2d stride must be >= 1".into()));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Shape(format!("conv2d kernel must be odd, got {kh}x{kw}")));
    }
    if wci != ci {
        return Err(Error::Shape(format!(
            "conv2d channels: input has {ci}, weight expects {wci}"
        )));
    }
    if bias.shape() != [co] {
        return Err(Error::Shape(format!(
            "conv2d bias shape {:?}, expected [{co}]",
            bias.shape()
        )));
    }
    let ho = conv_out_extent(h, kh, stride, padding)?;
    let wo = conv_out_extent(w, kw, stride, padding)?;
    let dims = ConvDims {
        b,
        ci,
        h,
        w,
        co,
        kh,
        kw,
        stride,
        padding,
        ho,
        wo,
    };
    count_op_eval(true);
    let data = kernels::conv2d_fwd(input.data(), weight.data(), bias.data(), &dims);
    let out = Tensor::from_vec(vec![b, co, ho, wo], data)?;
    if tracking(&[input, weight, bias]) {
        let op = Op::Conv2d {
            x: edge(input),
            w: edge(weight),
            bias: edge(bias),
            x_data: save_input(input),
            w_data: save_input(weight),
            dims,
        };
        Ok(with_node(out, op))
    } else {
        Ok(out)
    }
}

/// Transposed convolution (adjoint of `conv2d` with the same stride and
/// zero padding). Weight layout `[ci, co, kh, kw]`; output extents are
/// `(in - 1) * stride + k`.
pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let [b, ci, h, w] = input.shape4()?;
    let [wci, co, kh, kw] = weight.shape4()?;
    if stride < 1 {
        return Err(Error::Shape("conv_transpose2d stride must be >= 1".into()));
    }
    if wci != ci {
        return Err(Error::Shape(format!(
            "conv_transpose2d channels: input has {ci}, weight expects {wci}"
        )));
    }
    if bias.shape() != [co] {
        return Err(Error::Shape(format!(
            "conv_transpose2d bias shape {:?}, expected [{co}]",
            bias.shape()
        )));
    }
    let ho = (h - 1) * stride + kh;
    let wo = (w - 1) * stride + kw;
    let dims = ConvTDims {
        b,
        ci,
        h,
        w,
        co,
        kh,
        kw,
        stride,
        ho,
        wo,
    };
    count_op_eval(true);
    let data = kernels::convt_fwd(input.data(), weight.data(), bias.data(), &dims);
    let out = Tensor::from_vec(vec![b, co, ho, wo], data)?;
    if tracking(&[input, weight, bias]) {
        let op = Op::ConvTranspose2d {
            x: edge(input),
            w: edge(weight),
            bias: edge(bias),
            x_data: save_input(input),
            w_data: save_input(weight),
            dims,
        };
        Ok(with_node(out, op))
    } else {
        Ok(out)
    }
}

/// Per-sample, per-channel normalization over the spatial extent; no
/// learned affine parameters. Maps the zero tensor to the zero tensor.
pub fn instance_norm<T: Scalar>(input: &Tensor<T>, epsilon: f64) -> Result<Tensor<T>> {
    let shape = input.shape4()?;
    if epsilon <= 0.0 {
        return Err(Error::Shape("instance_norm epsilon must be > 0".into()));
    }
    if shape[2] * shape[3] == 0 {
        return Err(Error::Shape("instance_norm on empty spatial extent".into()));
    }
    count_op_eval(false);
    let (xhat, inv_std) = kernels::instance_norm_fwd(input.data(), shape, epsilon);
    // The normalized output doubles as the saved buffer for backward.
    let xhat = Arc::new(xhat);
    let out = Tensor::from_shared(input.shape().to_vec(), Arc::clone(&xhat));
    if tracking(&[input]) {
        let op = Op::InstanceNorm {
            input: edge(input),
            xhat: Saved::counted(xhat),
            inv_std: Saved::counted(Arc::new(inv_std)),
            shape,
        };
        Ok(with_node(out, op))
    } else {
        Ok(out)
    }
}

/// 2x2 max pooling with stride 2. Spatial extents must be even.
pub fn max_pool2d<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = input.shape4()?;
    let [b, c, h, w] = shape;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "max_pool2d requires even extents, got {h}x{w}"
        )));
    }
    count_op_eval(false);
    let (data, idx) = kernels::max_pool2_fwd(input.data(), shape);
    if graph::kink_trace_enabled() {
        graph::kink_trace_extend(idx.iter().copied());
    }
    let out = Tensor::from_vec(vec![b, c, h / 2, w / 2], data)?;
    if tracking(&[input]) {
        let op = Op::MaxPool2 {
            input: edge(input),
            idx: SavedIdx::counted(Arc::new(idx)),
            in_numel: input.numel(),
        };
        Ok(with_node(out, op))
    } else {
        Ok(out)
    }
}

/// Concatenation along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let a_shape = a.shape4()?;
    let b_shape = b.shape4()?;
    if a_shape[0] != b_shape[0] || a_shape[2] != b_shape[2] || a_shape[3] != b_shape[3] {
        return Err(Error::Shape(format!(
            "concat_channels: incompatible shapes {a_shape:?} vs {b_shape:?}"
        )));
    }
    count_op_eval(false);
    let data = kernels::concat_channels_fwd(a.data(), b.data(), a_shape, b_shape);
    let out = Tensor::from_vec(
        vec![a_shape[0], a_shape[1] + b_shape[1], a_shape[2], a_shape[3]],
        data,
    )?;
    if tracking(&[a, b]) {
        let op = Op::ConcatChannels {
            a: edge(a),
            b: edge(b),
            a_shape,
            b_shape,
        };
        Ok(with_node(out, op))
    } else {
        Ok(out)
    }
}

/// Softmax over the channel axis.
pub fn softmax_channels<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = input.shape4()?;
    count_op_eval(false);
    let probs = Arc::new(kernels::softmax_channels_fwd(input.data(), shape));
    let out = Tensor::from_shared(input.shape().to_vec(), Arc::clone(&probs));
    if tracking(&[input]) {
        let op = Op::SoftmaxChannels {
            input: edge(input),
            probs: Saved::counted(probs),
            shape,
        };
        Ok(with_node(out, op))
    } else {
        Ok(out)
    }
}

fn check_target<T: Scalar>(logits: &Tensor<T>, target: &[u32]) -> Result<[usize; 4]> {
    let shape = logits.shape4()?;
    let [b, c, h, w] = shape;
    if target.len() != b * h * w {
        return Err(Error::Shape(format!(
            "target length {} != {}x{}x{}",
            target.len(),
            b,
            h,
            w
        )));
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= c) {
        return Err(Error::Shape(format!(
            "target class {bad} out of range for {c} channels"
        )));
    }
    Ok(shape)
}

/// Mean per-pixel cross-entropy of softmaxed logits against an integer
/// class map. Target layout `[b, h, w]`, row-major.
pub fn cross_entropy_with_softmax<T: Scalar>(
    logits: &Tensor<T>,
    target: &Arc<Vec<u32>>,
) -> Result<Tensor<T>> {
    let shape = check_target(logits, target)?;
    count_op_eval(false);
    let (loss, probs) = kernels::cross_entropy_fwd(logits.data(), target, shape);
    let out = Tensor::from_vec(vec![1], vec![loss])?;
    if tracking(&[logits]) {
        let op = Op::CrossEntropy {
            input: edge(logits),
            probs: Saved::counted(Arc::new(probs)),
            target: Arc::clone(target),
            shape,
        };
        Ok(with_node(out, op))
    } else {
        Ok(out)
    }
}

/// Soft-Dice loss (1 - mean foreground Dice of softmaxed logits), with
/// `smooth` added to both numerator and denominator.
pub fn soft_dice_with_softmax<T: Scalar>(
    logits: &Tensor<T>,
    target: &Arc<Vec<u32>>,
    smooth: f64,
) -> Result<Tensor<T>> {
    let shape = check_target(logits, target)?;
    count_op_eval(false);
    let (loss, probs, class_sums) = kernels::soft_dice_fwd(logits.data(), target, shape, smooth);
    let out = Tensor::from_vec(vec![1], vec![loss])?;
    if tracking(&[logits]) {
        let op = Op::SoftDice {
            input: edge(logits),
            probs: Saved::counted(Arc::new(probs)),
            target: Arc::clone(target),
            shape,
            smooth,
            class_sums,
        };
        Ok(with_node(out, op))
    } else {
        Ok(out)
    }
}

/// Gradient accumulation from a scalar loss into all reachable leaves.
pub fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<()> {
    loss.backward()
}
