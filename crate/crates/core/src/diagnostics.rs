//! Runtime gradient-checking suite (64-bit): every engine op plus the
//! full U-Net loss, against central finite differences.

use std::sync::Arc;

use crate::engine::{self as eng, gradcheck, GradCheckReport, Tensor};
use crate::error::Result;
use crate::model::{GradMode, UNetConfig, UNetModel};
use crate::rng::PortableRng;
use crate::tasks::{dice_ce_loss, generate_sample, SyntheticTaskSpec};

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;

fn rand_param(rng: &mut PortableRng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(lo, hi)).collect();
    Tensor::parameter(shape, data).expect("static shapes")
}

fn rand_const(rng: &mut PortableRng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    Tensor::from_vec(shape, data).expect("static shapes")
}

fn project(out: &Tensor<f64>, probe: &Tensor<f64>) -> Result<Tensor<f64>> {
    eng::sum_all(&eng::mul(out, probe)?)
}

/// Finite-difference checks for every differentiable op.
pub fn op_gradcheck_suite(probes: usize) -> Vec<GradCheckReport> {
    let mut rng = PortableRng::seed_from_u64(2024);
    let mut reports = Vec::new();

    {
        let probe = rand_const(&mut rng, vec![2, 3, 4, 4]);
        let mut params = vec![
            rand_param(&mut rng, vec![2, 3, 4, 4], -1.0, 1.0),
            rand_param(&mut rng, vec![2, 3, 4, 4], -1.0, 1.0),
        ];
        reports.push(gradcheck(
            "add",
            &mut params,
            |p| project(&eng::add(&p[0], &p[1])?, &probe),
            probes,
            FD_STEP,
            FD_TOLERANCE,
            1,
        ));
        reports.push(gradcheck(
            "mul",
            &mut params,
            |p| project(&eng::mul(&p[0], &p[1])?, &probe),
            probes,
            FD_STEP,
            FD_TOLERANCE,
            2,
        ));
        reports.push(gradcheck(
            "sum_all",
            &mut params,
            |p| eng::sum_all(&p[0]),
            probes,
            FD_STEP,
            FD_TOLERANCE,
            3,
        ));
    }

    {
        // Inputs kept clear of the kink at zero.
        let n = 2 * 3 * 4 * 4;
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let mag = rng.uniform(0.2, 1.2);
                if rng.next_bool() {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let mut params = vec![Tensor::parameter(vec![2, 3, 4, 4], data).expect("shape")];
        let probe = rand_const(&mut rng, vec![2, 3, 4, 4]);
        reports.push(gradcheck(
            "leaky_relu",
            &mut params,
            |p| project(&eng::leaky_relu(&p[0], 0.01)?, &probe),
            probes,
            FD_STEP,
            FD_TOLERANCE,
            4,
        ));
    }

    {
        let mut params = vec![
            rand_param(&mut rng, vec![2, 3, 5, 5], -1.0, 1.0),
            rand_param(&mut rng, vec![4, 3, 3, 3], -0.5, 0.5),
            rand_param(&mut rng, vec![4], -0.5, 0.5),
        ];
        let probe = rand_const(&mut rng, vec![2, 4, 5, 5]);
        reports.push(gradcheck(
            "conv2d",
            &mut params,
            |p| project(&eng::conv2d(&p[0], &p[1], &p[2], 1, 1)?, &probe),
            probes,
            FD_STEP,
            FD_TOLERANCE,
            5,
        ));
    }

    {
        let mut params = vec![
            rand_param(&mut rng, vec![2, 3, 4, 4], -1.0, 1.0),
            rand_param(&mut rng, vec![3, 2, 2, 2], -0.5, 0.5),
            rand_param(&mut rng, vec![2], -0.5, 0.5),
        ];
        let probe = rand_const(&mut rng, vec![2, 2, 8, 8]);
        reports.push(gradcheck(
            "conv_transpose2d",
            &mut params,
            |p| project(&eng::conv_transpose2d(&p[0], &p[1], &p[2], 2)?, &probe),
            probes,
            FD_STEP,
            FD_TOLERANCE,
            6,
        ));
    }

    {
        let mut params = vec![rand_param(&mut rng, vec![2, 3, 4, 4], -1.0, 1.0)];
        let probe = rand_const(&mut rng, vec![2, 3, 4, 4]);
        reports.push(gradcheck(
            "instance_norm",
            &mut params,
            |p| project(&eng::instance_norm(&p[0], 1e-5)?, &probe),
            probes,
            FD_STEP,
            FD_TOLERANCE,
            7,
        ));
    }

    {
        // Well-separated values keep the pooling argmax stable.
        let n = 1 * 2 * 4 * 4;
        let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
        for i in 0..n {
            let j = rng.range_usize(0, n - 1);
            vals.swap(i, j);
        }
        let mut params = vec![Tensor::parameter(vec![1, 2, 4, 4], vals).expect("shape")];
        let probe = rand_const(&mut rng, vec![1, 2, 2, 2]);
        reports.push(gradcheck(
            "max_pool2d",
            &mut params,
            |p| project(&eng::max_pool2d(&p[0])?, &probe),
            probes,
            FD_STEP,
            FD_TOLERANCE,
            8,
        ));
    }

    {
        let mut params = vec![
            rand_param(&mut rng, vec![2, 2, 3, 3], -1.0, 1.0),
            rand_param(&mut rng, vec![2, 3, 3, 3], -1.0, 1.0),
        ];
        let probe = rand_const(&mut rng, vec![2, 5, 3, 3]);
        reports.push(gradcheck(
            "concat_channels",
            &mut params,
            |p| project(&eng::concat_channels(&p[0], &p[1])?, &probe),
            probes,
            FD_STEP,
            FD_TOLERANCE,
            9,
        ));
    }

    {
        let mut params = vec![rand_param(&mut rng, vec![2, 4, 3, 3], -1.5, 1.5)];
        let probe = rand_const(&mut rng, vec![2, 4, 3, 3]);
        let target: Arc<Vec<u32>> =
            Arc::new((0..2 * 3 * 3).map(|_| rng.bounded(4) as u32).collect());
        reports.push(gradcheck(
            "softmax_channels",
            &mut params,
            |p| project(&eng::softmax_channels(&p[0])?, &probe),
            probes,
            FD_STEP,
            FD_TOLERANCE,
            10,
        ));
        reports.push(gradcheck(
            "cross_entropy_with_softmax",
            &mut params,
            |p| eng::cross_entropy_with_softmax(&p[0], &target),
            probes,
            FD_STEP,
            FD_TOLERANCE,
            11,
        ));
        reports.push(gradcheck(
            "soft_dice_with_softmax",
            &mut params,
            |p| eng::soft_dice_with_softmax(&p[0], &target, crate::tasks::DICE_SMOOTH),
            probes,
            FD_STEP,
            FD_TOLERANCE,
            12,
        ));
    }

    reports
}

/// Central finite differences through the whole network: a 64-bit toy
/// U-Net's single-cycle compound loss, probed at random parameters.
pub fn unet_loss_gradcheck(probes: usize) -> Result<GradCheckReport> {
    let cfg = UNetConfig {
        in_channels: 1,
        num_classes: 3,
        base_channels: 4,
        num_stages: 2,
        leaky_slope: 0.01,
        norm_epsilon: 1e-5,
    };
    let mut model = UNetModel::<f64>::new(cfg, 77)?;
    let spec = SyntheticTaskSpec {
        image_size: 16,
        num_classes: 3,
        noise_std: 0.2,
        boundary_jitter: 0.2,
        ..Default::default()
    };
    let sample = generate_sample(&spec, 0);
    let x = sample.image_tensor::<f64>();
    let target: Arc<Vec<u32>> = Arc::new(sample.mask.clone());

    let loss_of = |model: &UNetModel<f64>| -> Result<f64> {
        let logits = model.forward_final(&x, 1, GradMode::DetachLastOnly)?;
        Ok(dice_ce_loss(&logits, &target)?.item())
    };

    model.zero_grads();
    {
        let logits = model.forward_final(&x, 1, GradMode::DetachLastOnly)?;
        let loss = dice_ce_loss(&logits, &target)?;
        loss.backward()?;
    }
    let mut names = Vec::new();
    let mut grads = Vec::new();
    let mut sizes = Vec::new();
    model.visit_params(&mut |name, t| {
        names.push(name);
        grads.push(t.grad().unwrap_or_else(|| vec![0.0; t.numel()]));
        sizes.push(t.numel());
    });
    model.zero_grads();

    fn perturb(model: &mut UNetModel<f64>, pi: usize, ei: usize, delta: f64) {
        let mut k = 0;
        model.visit_params_mut(&mut |_, t| {
            if k == pi {
                t.data_mut()[ei] += delta;
            }
            k += 1;
        });
    }

    let mut rng = PortableRng::seed_from_u64(4242);
    let mut max_rel = 0.0f64;
    let mut accepted = 0usize;
    let mut attempts = 0usize;
    // Central differences are only meaningful where the loss is smooth
    // over the bracket; probes whose two evaluations take different
    // piecewise-linear branches (a leaky-relu sign flip or a pooling
    // argmax change) are non-differentiable there and get resampled.
    while accepted < probes && attempts < probes * 20 {
        attempts += 1;
        let pi = rng.range_usize(0, sizes.len() - 1);
        let ei = rng.range_usize(0, sizes[pi] - 1);
        perturb(&mut model, pi, ei, FD_STEP);
        let (plus, trace_plus) = eng::with_kink_trace(|| loss_of(&model));
        perturb(&mut model, pi, ei, -2.0 * FD_STEP);
        let (minus, trace_minus) = eng::with_kink_trace(|| loss_of(&model));
        perturb(&mut model, pi, ei, FD_STEP);
        let (plus, minus) = (plus?, minus?);
        if trace_plus != trace_minus {
            continue;
        }
        accepted += 1;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let analytic = grads[pi][ei];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    let probes = accepted;

    Ok(GradCheckReport {
        name: "unet_dice_ce_loss".into(),
        probes,
        max_rel_err: max_rel,
        tolerance: FD_TOLERANCE,
        passed: max_rel < FD_TOLERANCE,
        error: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_network_gradient_matches_finite_differences() {
        let report = unet_loss_gradcheck(50).unwrap();
        assert!(report.passed, "{report}");
    }
}
