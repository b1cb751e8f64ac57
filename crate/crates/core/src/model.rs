//! The 2-D U-Net partitioned into input projection (I), recycling module
//! (R) and output projection (O), plus the recycling forward pass.
//!
//! I is the first convolutional stage (two conv+norm+leaky-relu blocks),
//! R is everything from the first pooling up to but excluding the final
//! classifier (skip connections live entirely inside R and are recomputed
//! every cycle), and O is the final 1x1 classifier. Recycled features are
//! injected by `R(z + norm(r))` where `norm` is non-affine instance
//! normalization, so a zero `r` collapses the step to a plain forward.
//!
//! Weight initialization draws from a seeded [`PortableRng`] in fixed
//! construction order (I blocks, then encoder stages shallow to deep,
//! then decoder stages deep to shallow with the upsampler before its
//! blocks, then the classifier; within a layer the weight buffer is
//! filled in index order before the bias). Weights are He-normal
//! (std = sqrt(2 / fan_in)); biases start at zero.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::engine::{self as eng, NoGrad, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::PortableRng;

/// Architecture description. Channels double at every stage; each stage
/// past the first halves the spatial extent.
#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub num_stages: usize,
    pub leaky_slope: f64,
    pub norm_epsilon: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 1,
            num_classes: 4,
            base_channels: 16,
            num_stages: 4,
            leaky_slope: 0.01,
            norm_epsilon: 1e-5,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.num_classes == 0
            || self.base_channels == 0
            || self.num_stages == 0
        {
            return Err(Error::Config(
                "channels, classes and stages must be positive".into(),
            ));
        }
        if self.norm_epsilon <= 0.0 {
            return Err(Error::Config("norm_epsilon must be > 0".into()));
        }
        Ok(())
    }

    fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << (stage - 1)
    }

    /// Spatial divisibility required by the pooling pyramid.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.num_stages - 1)
    }
}

/// Gradient-graph policy for a multi-cycle forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Graph spans I, the final cycle and O only; earlier cycles run
    /// without a graph, so their features enter the last cycle as
    /// constants.
    DetachLastOnly,
    /// No detachment: the graph spans every cycle (recurrent-style
    /// backpropagation through time).
    FullBptt,
    /// No graph at all.
    Inference,
}

struct ConvBlock<T: Scalar> {
    w: Tensor<T>,
    b: Tensor<T>,
}

struct UpConv<T: Scalar> {
    w: Tensor<T>,
    b: Tensor<T>,
}

struct Stage<T: Scalar> {
    blocks: Vec<ConvBlock<T>>,
}

struct DecoderStage<T: Scalar> {
    up: UpConv<T>,
    blocks: Vec<ConvBlock<T>>,
}

/// U-Net with parameters partitioned into I, R and O.
pub struct UNetModel<T: Scalar> {
    pub config: UNetConfig,
    input_proj: Stage<T>,
    encoder: Vec<Stage<T>>,
    body: Option<Stage<T>>,
    decoder: Vec<DecoderStage<T>>,
    classifier: ConvBlock<T>,
}

fn he_conv<T: Scalar>(
    rng: &mut PortableRng,
    shape: Vec<usize>,
    fan_in: usize,
) -> Result<Tensor<T>> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64(rng.normal() * std)).collect();
    Tensor::parameter(shape, data)
}

fn zero_bias<T: Scalar>(n: usize) -> Result<Tensor<T>> {
    Tensor::parameter(vec![n], vec![T::zero(); n])
}

fn conv_block<T: Scalar>(
    rng: &mut PortableRng,
    cin: usize,
    cout: usize,
    k: usize,
) -> Result<ConvBlock<T>> {
    Ok(ConvBlock {
        w: he_conv(rng, vec![cout, cin, k, k], cin * k * k)?,
        b: zero_bias(cout)?,
    })
}

fn stage<T: Scalar>(rng: &mut PortableRng, cin: usize, cout: usize) -> Result<Stage<T>> {
    Ok(Stage {
        blocks: vec![conv_block(rng, cin, cout, 3)?, conv_block(rng, cout, cout, 3)?],
    })
}

impl<T: Scalar> UNetModel<T> {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = PortableRng::seed_from_u64(seed);
        let s = config.num_stages;
        let input_proj = stage(&mut rng, config.in_channels, config.base_channels)?;
        let mut encoder = Vec::new();
        for st in 2..=s {
            encoder.push(stage(
                &mut rng,
                config.stage_channels(st - 1),
                config.stage_channels(st),
            )?);
        }
        let body = if s == 1 {
            Some(stage(&mut rng, config.base_channels, config.base_channels)?)
        } else {
            None
        };
        let mut decoder = Vec::new();
        for st in (1..s).rev() {
            let c_deep = config.stage_channels(st + 1);
            let c = config.stage_channels(st);
            decoder.push(DecoderStage {
                up: UpConv {
                    w: he_conv(&mut rng, vec![c_deep, c, 2, 2], c_deep * 4)?,
                    b: zero_bias(c)?,
                },
                // Concatenated skip doubles the input channels.
                blocks: vec![conv_block(&mut rng, 2 * c, c, 3)?, conv_block(&mut rng, c, c, 3)?],
            });
        }
        let classifier = ConvBlock {
            w: he_conv(
                &mut rng,
                vec![config.num_classes, config.base_channels, 1, 1],
                config.base_channels,
            )?,
            b: zero_bias(config.num_classes)?,
        };
        Ok(UNetModel {
            config,
            input_proj,
            encoder,
            body,
            decoder,
            classifier,
        })
    }

    fn block_forward(&self, x: &Tensor<T>, blk: &ConvBlock<T>) -> Result<Tensor<T>> {
        let y = eng::conv2d(x, &blk.w, &blk.b, 1, 1)?;
        let y = eng::instance_norm(&y, self.config.norm_epsilon)?;
        eng::leaky_relu(&y, self.config.leaky_slope)
    }

    fn stage_forward(&self, x: &Tensor<T>, st: &Stage<T>) -> Result<Tensor<T>> {
        let mut cur = self.block_forward(x, &st.blocks[0])?;
        for blk in &st.blocks[1..] {
            cur = self.block_forward(&cur, blk)?;
        }
        Ok(cur)
    }

    /// I: projects the raw input into recycling feature space.
    pub fn input_project(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, c, h, w] = x.shape4()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "input has {c} channels, config expects {}",
                self.config.in_channels
            )));
        }
        let div = self.config.spatial_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "spatial extents {h}x{w} not divisible by {div}"
            )));
        }
        self.stage_forward(x, &self.input_proj)
    }

    /// The recycling module body: remaining encoder stages, bottleneck and
    /// decoder, excluding the final classifier. Maps `[b, base, h, w]` to
    /// the same shape; skip connections are internal.
    fn recycling_module(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        if let Some(body) = &self.body {
            return self.stage_forward(a, body);
        }
        let mut skips: Vec<Tensor<T>> = vec![a.clone()];
        let mut cur = a.clone();
        for st in &self.encoder {
            cur = eng::max_pool2d(&cur)?;
            cur = self.stage_forward(&cur, st)?;
            skips.push(cur.clone());
        }
        skips.pop(); // the bottleneck output is consumed directly
        for dec in &self.decoder {
            cur = eng::conv_transpose2d(&cur, &dec.up.w, &dec.up.b, 2)?;
            let skip = skips.pop().expect("skip stack in sync with decoder");
            cur = eng::concat_channels(&skip, &cur)?;
            let mut x = self.block_forward(&cur, &dec.blocks[0])?;
            for blk in &dec.blocks[1..] {
                x = self.block_forward(&x, blk)?;
            }
            cur = x;
        }
        Ok(cur)
    }

    /// One recycling cycle: `R(z + norm(r))`. A zero `r` reduces this to
    /// `R(z)` because the normalization maps zero to zero.
    pub fn recycle_step(&self, z: &Tensor<T>, r: &Tensor<T>) -> Result<Tensor<T>> {
        if z.shape() != r.shape() {
            return Err(Error::Shape(format!(
                "recycle_step: z {:?} vs r {:?}",
                z.shape(),
                r.shape()
            )));
        }
        let normed = eng::instance_norm(r, self.config.norm_epsilon)?;
        let a = eng::add(z, &normed)?;
        self.recycling_module(&a)
    }

    /// O: per-pixel class logits from recycled features.
    pub fn output_project(&self, r: &Tensor<T>) -> Result<Tensor<T>> {
        eng::conv2d(r, &self.classifier.w, &self.classifier.b, 1, 0)
    }

    /// Plain non-recycling composition `O(R(I(x)))`.
    pub fn forward_plain(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self.input_project(x)?;
        let r = self.recycling_module(&z)?;
        self.output_project(&r)
    }

    /// Runs `n_cycles` recycling cycles and returns the per-cycle logits
    /// (element `i` is `O(r)` after cycle `i + 1`).
    ///
    /// In `DetachLastOnly` mode only the final element carries a graph;
    /// earlier cycles and all intermediate projections run without one.
    /// In `FullBptt` mode the final element's graph spans every cycle.
    /// In `Inference` mode nothing is tracked.
    pub fn forward_with_cycles(
        &self,
        x: &Tensor<T>,
        n_cycles: usize,
        mode: GradMode,
    ) -> Result<Vec<Tensor<T>>> {
        self.run_cycles(x, n_cycles, mode, true)
    }

    /// Training fast path: same cycle loop, final logits only,
    /// intermediate projections skipped.
    pub fn forward_final(
        &self,
        x: &Tensor<T>,
        n_cycles: usize,
        mode: GradMode,
    ) -> Result<Tensor<T>> {
        let mut out = self.run_cycles(x, n_cycles, mode, false)?;
        Ok(out.pop().expect("run_cycles returns at least one element"))
    }

    fn run_cycles(
        &self,
        x: &Tensor<T>,
        n_cycles: usize,
        mode: GradMode,
        harvest: bool,
    ) -> Result<Vec<Tensor<T>>> {
        if n_cycles < 1 {
            return Err(Error::Graph("n_cycles must be >= 1".into()));
        }
        let _inference_guard = match mode {
            GradMode::Inference => Some(NoGrad::new()),
            _ => None,
        };
        let z = self.input_project(x)?;
        let mut r = Tensor::zeros(z.shape().to_vec());
        let mut logits = Vec::with_capacity(if harvest { n_cycles } else { 1 });
        for i in 1..=n_cycles {
            let last = i == n_cycles;
            match mode {
                GradMode::FullBptt => {
                    r = self.recycle_step(&z, &r)?;
                }
                _ => {
                    if last {
                        r = self.recycle_step(&z, &r)?;
                    } else {
                        // Intermediate cycles feed the next cycle constants
                        // only; no graph is built for them.
                        r = eng::with_no_grad(|| self.recycle_step(&z, &r))?;
                        debug_assert!(!r.has_node());
                    }
                }
            }
            if last {
                logits.push(self.output_project(&r)?);
            } else if harvest {
                logits.push(eng::with_no_grad(|| self.output_project(&r))?);
            }
        }
        Ok(logits)
    }

    /// Mean of per-cycle softmax probabilities (pure value computation).
    pub fn ensemble_cycles(per_cycle_logits: &[Tensor<T>]) -> Result<Tensor<T>> {
        if per_cycle_logits.is_empty() {
            return Err(Error::Empty("ensemble over zero cycles".into()));
        }
        let shape = per_cycle_logits[0].shape().to_vec();
        let mut acc = vec![T::zero(); per_cycle_logits[0].numel()];
        for logits in per_cycle_logits {
            if logits.shape() != shape {
                return Err(Error::Shape("ensemble over mismatched shapes".into()));
            }
            let p = eng::with_no_grad(|| eng::softmax_channels(&logits.detach()))?;
            for (a, &v) in acc.iter_mut().zip(p.data().iter()) {
                *a = *a + v;
            }
        }
        let k = T::from_f64(per_cycle_logits.len() as f64);
        for a in acc.iter_mut() {
            *a = *a / k;
        }
        Tensor::from_vec(shape, acc)
    }

    /// Visits every parameter as (name, tensor), in a fixed order.
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        let emit_stage = |prefix: &str, st: &'a Stage<T>, f: &mut dyn FnMut(String, &'a Tensor<T>)| {
            for (i, blk) in st.blocks.iter().enumerate() {
                f(format!("{prefix}.block{}.w", i + 1), &blk.w);
                f(format!("{prefix}.block{}.b", i + 1), &blk.b);
            }
        };
        emit_stage("i", &self.input_proj, f);
        for (idx, st) in self.encoder.iter().enumerate() {
            emit_stage(&format!("r.enc{}", idx + 2), st, f);
        }
        if let Some(body) = &self.body {
            emit_stage("r.body", body, f);
        }
        let s = self.config.num_stages;
        for (idx, dec) in self.decoder.iter().enumerate() {
            let target = s - 1 - idx;
            f(format!("r.dec{target}.up.w"), &dec.up.w);
            f(format!("r.dec{target}.up.b"), &dec.up.b);
            for (i, blk) in dec.blocks.iter().enumerate() {
                f(format!("r.dec{target}.block{}.w", i + 1), &blk.w);
                f(format!("r.dec{target}.block{}.b", i + 1), &blk.b);
            }
        }
        f("o.classifier.w".into(), &self.classifier.w);
        f("o.classifier.b".into(), &self.classifier.b);
    }

    /// Mutable traversal in the same order as [`visit_params`].
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        let emit_stage =
            |prefix: &str, st: &mut Stage<T>, f: &mut dyn FnMut(String, &mut Tensor<T>)| {
                for (i, blk) in st.blocks.iter_mut().enumerate() {
                    f(format!("{prefix}.block{}.w", i + 1), &mut blk.w);
                    f(format!("{prefix}.block{}.b", i + 1), &mut blk.b);
                }
            };
        emit_stage("i", &mut self.input_proj, f);
        for (idx, st) in self.encoder.iter_mut().enumerate() {
            emit_stage(&format!("r.enc{}", idx + 2), st, f);
        }
        if let Some(body) = &mut self.body {
            emit_stage("r.body", body, f);
        }
        let s = self.config.num_stages;
        for (idx, dec) in self.decoder.iter_mut().enumerate() {
            let target = s - 1 - idx;
            f(format!("r.dec{target}.up.w"), &mut dec.up.w);
            f(format!("r.dec{target}.up.b"), &mut dec.up.b);
            for (i, blk) in dec.blocks.iter_mut().enumerate() {
                f(format!("r.dec{target}.block{}.w", i + 1), &mut blk.w);
                f(format!("r.dec{target}.block{}.b", i + 1), &mut blk.b);
            }
        }
        f("o.classifier.w".into(), &mut self.classifier.w);
        f("o.classifier.b".into(), &mut self.classifier.b);
    }

    /// Named parameters in fixed order.
    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, t| out.push((name, t.clone())));
        out
    }

    /// Parameter names, grouped by partition (I, R, O).
    pub fn partition(&self) -> (Vec<String>, Vec<String>, Vec<String>) {
        let (mut i, mut r, mut o) = (Vec::new(), Vec::new(), Vec::new());
        self.visit_params(&mut |name, _| {
            if name.starts_with("i.") {
                i.push(name);
            } else if name.starts_with("r.") {
                r.push(name);
            } else {
                o.push(name);
            }
        });
        (i, r, o)
    }

    pub fn zero_grads(&self) {
        self.visit_params(&mut |_, t| t.zero_grad());
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format
//
// Layout: the magic line "RCYN1", then `meta <key> <value>` lines in
// sorted key order, then for each parameter a header line
// `param <name> <d0>x<d1>x...` followed by the raw little-endian f32
// buffer, and a final "end" line.

pub const CHECKPOINT_MAGIC: &str = "RCYN1";

/// Writes model parameters plus a metadata record.
pub fn save_checkpoint(
    model: &UNetModel<f32>,
    metadata: &BTreeMap<String, String>,
    path: &Path,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    writeln!(w, "{CHECKPOINT_MAGIC}").map_err(io_err)?;
    for (k, v) in metadata {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(Error::Checkpoint(format!("invalid metadata entry: {k}")));
        }
        writeln!(w, "meta {k} {v}").map_err(io_err)?;
    }
    let mut result = Ok(());
    model.visit_params(&mut |name, t| {
        if result.is_err() {
            return;
        }
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        result = writeln!(w, "param {name} {}", dims.join("x"))
            .and_then(|_| {
                for &v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
                Ok(())
            })
            .map_err(io_err);
    });
    result?;
    writeln!(w, "end").map_err(io_err)?;
    Ok(())
}

fn read_line(r: &mut impl BufRead, path: &Path) -> Result<String> {
    let mut line = String::new();
    let n = r
        .read_line(&mut line)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if n == 0 {
        return Err(Error::Checkpoint("unexpected end of file".into()));
    }
    Ok(line.trim_end_matches('\n').to_string())
}

/// Reads parameters into a freshly built model of the given config.
/// Shape or name mismatches against the config are errors.
pub fn load_checkpoint(
    path: &Path,
    config: &UNetConfig,
) -> Result<(UNetModel<f32>, BTreeMap<String, String>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let magic = read_line(&mut r, path)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let mut metadata = BTreeMap::new();
    let mut model = UNetModel::<f32>::new(config.clone(), 0)?;
    let mut expected: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    model.visit_params(&mut |name, t| {
        expected.insert(name, t.shape().to_vec());
    });
    let mut loaded: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    loop {
        let line = read_line(&mut r, path)?;
        if line == "end" {
            break;
        }
        if let Some(rest) = line.strip_prefix("meta ") {
            let (k, v) = rest
                .split_once(' ')
                .ok_or_else(|| Error::Checkpoint(format!("bad meta line: {line}")))?;
            metadata.insert(k.to_string(), v.to_string());
            continue;
        }
        let Some(rest) = line.strip_prefix("param ") else {
            return Err(Error::Checkpoint(format!("unexpected line: {line}")));
        };
        let (name, dims_str) = rest
            .split_once(' ')
            .ok_or_else(|| Error::Checkpoint(format!("bad param line: {line}")))?;
        let dims: Vec<usize> = dims_str
            .split('x')
            .map(|d| {
                d.parse::<usize>()
                    .map_err(|_| Error::Checkpoint(format!("bad shape in: {line}")))
            })
            .collect::<Result<_>>()?;
        let Some(want) = expected.get(name) else {
            return Err(Error::Checkpoint(format!(
                "parameter {name} not present in a model of the given config"
            )));
        };
        if want != &dims {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: checkpoint shape {dims:?}, config expects {want:?}"
            )));
        }
        let numel: usize = dims.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        loaded.insert(name.to_string(), data);
    }
    for name in expected.keys() {
        if !loaded.contains_key(name) {
            return Err(Error::Checkpoint(format!("parameter {name} missing")));
        }
    }
    model.visit_params_mut(&mut |name, t| {
        if let Some(data) = loaded.remove(&name) {
            *t.data_mut() = data;
        }
    });
    Ok((model, metadata))
}

/// Serializes a parameter snapshot for comparisons (tests, reproducibility).
pub fn parameter_bytes(model: &UNetModel<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    model.visit_params(&mut |_, t| {
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    out
}

pub type RecyclingState<T> = (Tensor<T>, Tensor<T>, usize);

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> UNetConfig {
        UNetConfig {
            in_channels: 1,
            num_classes: 3,
            base_channels: 4,
            num_stages: 2,
            leaky_slope: 0.01,
            norm_epsilon: 1e-5,
        }
    }

    fn rand_input(seed: u64, shape: Vec<usize>) -> Tensor<f32> {
        let mut rng = PortableRng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn partition_is_disjoint_and_complete() {
        let model = UNetModel::<f32>::new(UNetConfig::default(), 7).unwrap();
        let (i, r, o) = model.partition();
        let all: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
        let mut union: Vec<String> = i.iter().chain(&r).chain(&o).cloned().collect();
        union.sort();
        let mut sorted_all = all.clone();
        sorted_all.sort();
        assert_eq!(union, sorted_all);
        assert_eq!(union.len(), all.len(), "no duplicates across partitions");
        assert!(!i.is_empty() && !r.is_empty() && !o.is_empty());
    }

    #[test]
    fn forward_shapes_and_finiteness() {
        let model = UNetModel::<f32>::new(tiny_config(), 1).unwrap();
        let x = rand_input(2, vec![2, 1, 16, 16]);
        let logits = model.forward_with_cycles(&x, 3, GradMode::Inference).unwrap();
        assert_eq!(logits.len(), 3);
        for l in &logits {
            assert_eq!(l.shape(), &[2, 3, 16, 16]);
            assert!(l.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn zero_input_stays_finite() {
        let model = UNetModel::<f32>::new(tiny_config(), 3).unwrap();
        let x = Tensor::<f32>::zeros(vec![1, 1, 8, 8]);
        let z = model.input_project(&x).unwrap();
        assert!(z.data().iter().all(|v| v.is_finite()));
        assert_eq!(z.shape(), &[1, 4, 8, 8]);
    }

    #[test]
    fn single_class_config_works() {
        let mut cfg = tiny_config();
        cfg.num_classes = 1;
        let model = UNetModel::<f32>::new(cfg, 4).unwrap();
        let x = rand_input(5, vec![1, 1, 8, 8]);
        let y = model.forward_plain(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 8, 8]);
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn input_shape_validation() {
        let model = UNetModel::<f32>::new(tiny_config(), 1).unwrap();
        // Wrong channel count.
        let x = rand_input(1, vec![1, 2, 16, 16]);
        assert!(model.input_project(&x).is_err());
        // Extent not divisible by the pooling pyramid.
        let x = rand_input(1, vec![1, 1, 15, 16]);
        assert!(model.input_project(&x).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir().join("rcyn_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.rcyn");
        let model = UNetModel::<f32>::new(tiny_config(), 11).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("epoch".to_string(), "5".to_string());
        meta.insert("seed".to_string(), "11".to_string());
        save_checkpoint(&model, &meta, &path).unwrap();
        let (loaded, meta2) = load_checkpoint(&path, &tiny_config()).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(parameter_bytes(&model), parameter_bytes(&loaded));

        // Forward on the reloaded model matches the original bit for bit.
        let x = rand_input(9, vec![1, 1, 16, 16]);
        let a = model.forward_plain(&x).unwrap();
        let b = loaded.forward_plain(&x).unwrap();
        assert_eq!(a.data(), b.data());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn checkpoint_rejects_mismatched_config() {
        let dir = std::env::temp_dir().join("rcyn_ckpt_mismatch");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.rcyn");
        let model = UNetModel::<f32>::new(tiny_config(), 11).unwrap();
        save_checkpoint(&model, &BTreeMap::new(), &path).unwrap();
        let mut other = tiny_config();
        other.num_classes = 5;
        match load_checkpoint(&path, &other) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("classifier")),
            Err(other) => panic!("expected checkpoint error, got {other:?}"),
            Ok(_) => panic!("mismatched config must not load"),
        }
        std::fs::remove_file(&path).ok();
    }
}
