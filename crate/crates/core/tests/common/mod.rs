//! Finite-difference gradient checking shared by test targets.

#![allow(dead_code)]

use bdistil::findwl::{BarrierTerm, DistillObjective, IplusMask, LossMode};
use bdistil::learner::{expand_class, init_params, mlp_spec, ConnectionKind, LearnerParams, Trace};
use bdistil::rng::RngStream;
use bdistil::train::Objective;
use bdistil::Mat;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const COORDS: usize = 200;
const DENOM_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

pub fn gaussian_mat(rng: &mut RngStream, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_vec(
        rows,
        cols,
        rng.gaussian(rows * cols).into_iter().map(|v| v * scale).collect(),
    )
    .unwrap()
}

pub fn random_mask(rng: &mut RngStream, rows: usize, cols: usize) -> IplusMask {
    IplusMask::from_bits(rows, cols, (0..rows * cols).map(|_| rng.uniform() < 0.5).collect()).unwrap()
}

fn relu_pattern(trace: &Trace) -> Vec<bool> {
    trace
        .pre
        .iter()
        .flat_map(|m| m.as_slice().iter().map(|&v| v > 0.0))
        .collect()
}

struct Setup {
    x: Mat,
    tap: Option<Mat>,
    teacher: Mat,
    mask: IplusMask,
    bound: f64,
    params: LearnerParams,
}

fn setup(kind: ConnectionKind, seed: u64) -> Setup {
    let mut rng = RngStream::new(seed);
    let (n, d, labels) = (12, 5, 3);
    let base = mlp_spec(&[d, 7, 6, labels]).unwrap();
    let x = gaussian_mat(&mut rng, n, d, 1.0);
    let prev_class = expand_class(&base, ConnectionKind::None, 0, &[]).unwrap();
    let prev = init_params(&prev_class, &mut rng.split(1)).unwrap();
    let (class, tap) = if kind == ConnectionKind::None {
        (prev_class, None)
    } else {
        let class = expand_class(&base, kind, 1, std::slice::from_ref(&prev)).unwrap();
        let trace = prev.forward_with_tap(&x, None).unwrap();
        (
            class.clone(),
            Some(trace.outputs[class.connection.source_layer].clone()),
        )
    };
    let mut params = init_params(&class, &mut rng.split(2)).unwrap();
    let mut flat = params.flat();
    let bias_noise = rng.gaussian(flat.len());
    for (v, e) in flat.iter_mut().zip(bias_noise) {
        *v += 0.05 * e;
    }
    params.set_flat(&flat).unwrap();
    let logits = params.forward_with_tap(&x, tap.as_ref()).unwrap().into_logits();
    let teacher = logits.add(&gaussian_mat(&mut rng, n, labels, 0.5)).unwrap();
    let mask = random_mask(&mut rng, n, labels);
    let bound = 1.5 * teacher.max_abs().max(logits.max_abs()) + 1.0;
    Setup {
        x,
        tap,
        teacher,
        mask,
        bound,
        params,
    }
}

/// Returns the worst relative error over `COORDS` parameter coordinates.
pub fn check_network(kind: ConnectionKind, mode: LossMode, barrier: bool, seed: u64) -> f64 {
    let s = setup(kind, seed);
    let objective = DistillObjective {
        teacher: &s.teacher,
        mode,
        temperature: 2.0,
        barrier: barrier.then_some(BarrierTerm {
            mask: &s.mask,
            bound: s.bound,
            gamma: 0.5,
        }),
    };
    let rows: Vec<usize> = (0..s.x.rows()).collect();
    let trace = s.params.forward_with_tap(&s.x, s.tap.as_ref()).unwrap();
    let (_, d_logits) = objective.evaluate(&rows, trace.logits()).unwrap();
    let analytic = s.params.backprop(&trace, &d_logits).unwrap().flat();
    let base = s.params.flat();
    let pattern = relu_pattern(&trace);

    let eval_at = |values: &[f64]| -> Option<f64> {
        let mut p = s.params.clone();
        p.set_flat(values).unwrap();
        let t = p.forward_with_tap(&s.x, s.tap.as_ref()).unwrap();
        if relu_pattern(&t) != pattern {
            return None;
        }
        Some(objective.evaluate(&rows, t.logits()).unwrap().0)
    };

    let mut rng = RngStream::new(seed).split(99);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut attempts = 0;
    while checked < COORDS {
        attempts += 1;
        assert!(attempts < 20 * COORDS, "too many coordinates sit on a ReLU kink");
        let k = rng.below(base.len() as u64) as usize;
        let mut plus = base.clone();
        plus[k] += H;
        let mut minus = base.clone();
        minus[k] -= H;
        let (Some(lp), Some(lm)) = (eval_at(&plus), eval_at(&minus)) else {
            continue;
        };
        worst = worst.max(rel_err(analytic[k], (lp - lm) / (2.0 * H)));
        checked += 1;
    }
    worst
}

pub fn check_logit_gradient(f: impl Fn(&Mat) -> f64, grad: &Mat, at: &Mat) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..at.rows() {
        for j in 0..at.cols() {
            let mut p = at.clone();
            p.set(i, j, at.get(i, j) + H);
            let mut m = at.clone();
            m.set(i, j, at.get(i, j) - H);
            worst = worst.max(rel_err(grad.get(i, j), (f(&p) - f(&m)) / (2.0 * H)));
        }
    }
    worst
}

pub const KINDS: [ConnectionKind; 4] = [
    ConnectionKind::None,
    ConnectionKind::ResidualAdd,
    ConnectionKind::DenseConcat,
    ConnectionKind::Delta,
];

/// Every (connection, loss, barrier) configuration whose worst error exceeds `TOL`.
pub fn network_failures() -> (Vec<String>, f64) {
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for (i, kind) in KINDS.into_iter().enumerate() {
        for mode in [LossMode::SquaredError, LossMode::CeTemperature] {
            for barrier in [false, true] {
                let err = check_network(kind, mode, barrier, 100 + i as u64);
                worst = worst.max(err);
                if err > TOL {
                    failures.push(format!("{kind:?} {mode:?} barrier={barrier}: {err:e}"));
                }
            }
        }
    }
    (failures, worst)
}
