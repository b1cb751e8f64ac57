//! Finite-difference checks for every differentiable op (64-bit,
//! central differences, step 1e-4, >= 20 probes per op).

use std::sync::Arc;

use recyclenet::engine as eng;
use recyclenet::engine::{gradcheck, Tensor, Tensor64};
use recyclenet::rng::PortableRng;

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;
const PROBES: usize = 24;

fn rand_param(rng: &mut PortableRng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor64 {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(lo, hi)).collect();
    Tensor::parameter(shape, data).unwrap()
}

fn rand_const(rng: &mut PortableRng, shape: Vec<usize>) -> Tensor64 {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Scalarizes an output by a fixed random projection so every output
/// element influences the checked loss.
fn project(out: &Tensor64, probe: &Tensor64) -> recyclenet::Result<Tensor64> {
    eng::sum_all(&eng::mul(out, probe)?)
}

fn assert_pass(report: eng::GradCheckReport) {
    assert!(report.passed, "{report}");
}

#[test]
fn gradcheck_add_mul_sum() {
    let mut rng = PortableRng::seed_from_u64(100);
    let probe = rand_const(&mut rng, vec![2, 3, 4, 4]);
    let mut params = vec![
        rand_param(&mut rng, vec![2, 3, 4, 4], -1.0, 1.0),
        rand_param(&mut rng, vec![2, 3, 4, 4], -1.0, 1.0),
    ];
    assert_pass(gradcheck(
        "add",
        &mut params,
        |p| project(&eng::add(&p[0], &p[1])?, &probe),
        PROBES,
        STEP,
        TOL,
        1,
    ));
    assert_pass(gradcheck(
        "mul",
        &mut params,
        |p| project(&eng::mul(&p[0], &p[1])?, &probe),
        PROBES,
        STEP,
        TOL,
        2,
    ));
    assert_pass(gradcheck(
        "sum_all",
        &mut params,
        |p| eng::sum_all(&p[0]),
        PROBES,
        STEP,
        TOL,
        3,
    ));
}

#[test]
fn gradcheck_leaky_relu_away_from_kink() {
    let mut rng = PortableRng::seed_from_u64(101);
    // Magnitudes >= 0.2 keep the 1e-4 probe step clear of the kink at 0.
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
    let mut params = vec![Tensor::parameter(vec![2, 3, 4, 4], data).unwrap()];
    let probe = rand_const(&mut rng, vec![2, 3, 4, 4]);
    assert_pass(gradcheck(
        "leaky_relu",
        &mut params,
        |p| project(&eng::leaky_relu(&p[0], 0.01)?, &probe),
        PROBES,
        STEP,
        TOL,
        4,
    ));
}

#[test]
fn gradcheck_conv2d() {
    let mut rng = PortableRng::seed_from_u64(102);
    for &(stride, pad, seed) in &[(1usize, 1usize, 5u64), (2, 1, 6)] {
        let mut params = vec![
            rand_param(&mut rng, vec![2, 3, 5, 5], -1.0, 1.0),
            rand_param(&mut rng, vec![4, 3, 3, 3], -0.5, 0.5),
            rand_param(&mut rng, vec![4], -0.5, 0.5),
        ];
        let ho = (5 + 2 * pad - 3) / stride + 1;
        let probe = rand_const(&mut rng, vec![2, 4, ho, ho]);
        assert_pass(gradcheck(
            "conv2d",
            &mut params,
            |p| project(&eng::conv2d(&p[0], &p[1], &p[2], stride, pad)?, &probe),
            PROBES,
            STEP,
            TOL,
            seed,
        ));
    }
}

#[test]
fn gradcheck_conv_transpose2d() {
    let mut rng = PortableRng::seed_from_u64(103);
    let mut params = vec![
        rand_param(&mut rng, vec![2, 3, 4, 4], -1.0, 1.0),
        rand_param(&mut rng, vec![3, 2, 2, 2], -0.5, 0.5),
        rand_param(&mut rng, vec![2], -0.5, 0.5),
    ];
    let probe = rand_const(&mut rng, vec![2, 2, 8, 8]);
    assert_pass(gradcheck(
        "conv_transpose2d",
        &mut params,
        |p| project(&eng::conv_transpose2d(&p[0], &p[1], &p[2], 2)?, &probe),
        PROBES,
        STEP,
        TOL,
        7,
    ));
}

#[test]
fn gradcheck_instance_norm() {
    let mut rng = PortableRng::seed_from_u64(104);
    let mut params = vec![rand_param(&mut rng, vec![2, 3, 4, 4], -1.0, 1.0)];
    let probe = rand_const(&mut rng, vec![2, 3, 4, 4]);
    assert_pass(gradcheck(
        "instance_norm",
        &mut params,
        |p| project(&eng::instance_norm(&p[0], 1e-5)?, &probe),
        PROBES,
        STEP,
        TOL,
        8,
    ));
}

#[test]
fn gradcheck_max_pool() {
    let mut rng = PortableRng::seed_from_u64(105);
    // Well-separated values keep the argmax stable under probing.
    let n = 1 * 2 * 4 * 4;
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
    for i in 0..n {
        let j = rng.range_usize(0, n - 1);
        vals.swap(i, j);
    }
    let mut params = vec![Tensor::parameter(vec![1, 2, 4, 4], vals).unwrap()];
    let probe = rand_const(&mut rng, vec![1, 2, 2, 2]);
    assert_pass(gradcheck(
        "max_pool2d",
        &mut params,
        |p| project(&eng::max_pool2d(&p[0])?, &probe),
        PROBES,
        STEP,
        TOL,
        9,
    ));
}

#[test]
fn gradcheck_concat_channels() {
    let mut rng = PortableRng::seed_from_u64(106);
    let mut params = vec![
        rand_param(&mut rng, vec![2, 2, 3, 3], -1.0, 1.0),
        rand_param(&mut rng, vec![2, 3, 3, 3], -1.0, 1.0),
    ];
    let probe = rand_const(&mut rng, vec![2, 5, 3, 3]);
    assert_pass(gradcheck(
        "concat_channels",
        &mut params,
        |p| project(&eng::concat_channels(&p[0], &p[1])?, &probe),
        PROBES,
        STEP,
        TOL,
        10,
    ));
}

#[test]
fn gradcheck_softmax_channels() {
    let mut rng = PortableRng::seed_from_u64(107);
    let mut params = vec![rand_param(&mut rng, vec![2, 4, 3, 3], -1.5, 1.5)];
    let probe = rand_const(&mut rng, vec![2, 4, 3, 3]);
    assert_pass(gradcheck(
        "softmax_channels",
        &mut params,
        |p| project(&eng::softmax_channels(&p[0])?, &probe),
        PROBES,
        STEP,
        TOL,
        11,
    ));
}

#[test]
fn gradcheck_cross_entropy() {
    let mut rng = PortableRng::seed_from_u64(108);
    let mut params = vec![rand_param(&mut rng, vec![2, 4, 3, 3], -1.5, 1.5)];
    let target: Arc<Vec<u32>> = Arc::new((0..2 * 3 * 3).map(|_| rng.bounded(4) as u32).collect());
    assert_pass(gradcheck(
        "cross_entropy_with_softmax",
        &mut params,
        |p| eng::cross_entropy_with_softmax(&p[0], &target),
        PROBES,
        STEP,
        TOL,
        12,
    ));
}

#[test]
fn gradcheck_soft_dice() {
    let mut rng = PortableRng::seed_from_u64(109);
    let mut params = vec![rand_param(&mut rng, vec![2, 4, 3, 3], -1.5, 1.5)];
    let target: Arc<Vec<u32>> = Arc::new((0..2 * 3 * 3).map(|_| rng.bounded(4) as u32).collect());
    assert_pass(gradcheck(
        "soft_dice_with_softmax",
        &mut params,
        |p| eng::soft_dice_with_softmax(&p[0], &target, 1e-5),
        PROBES,
        STEP,
        TOL,
        13,
    ));
}

/// gradcheck reports failures instead of panicking.
#[test]
fn gradcheck_reports_builder_errors() {
    let mut params = vec![rand_param(
        &mut PortableRng::seed_from_u64(110),
        vec![2, 2],
        -1.0,
        1.0,
    )];
    let report = gradcheck(
        "broken",
        &mut params,
        |p| eng::max_pool2d(&p[0]),
        PROBES,
        STEP,
        TOL,
        14,
    );
    assert!(!report.passed);
    assert!(report.error.is_some());
}
