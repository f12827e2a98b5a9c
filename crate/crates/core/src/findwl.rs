//! Weak-learner search.
//!
//! A candidate is trained by SGD on a distillation loss plus a log-barrier
//! that rewards residuals `l = f − g` agreeing in sign with `K⁺ − K⁻`:
//!
//! ```text
//! −(1/γ) Σᵢⱼ [ I⁺ᵢⱼ·log(1 + lᵢⱼ/2B) + (1 − I⁺ᵢⱼ)·log(1 − lᵢⱼ/2B) ],   I⁺ᵢⱼ = [K⁺(i,j) > K⁻(i,j)]
//! ```
//!
//! Inside SGD the barrier is averaged over rows, like the distillation term,
//! so `γ` alone sets their relative weight.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{classify_edges, edge, CheckOutcome, WeightState};
use crate::learner::{init_params, ActivationCache, ClassSpec, LearnerParams};
use crate::rng::RngStream;
use crate::tensor::Mat;
use crate::train::{fit, full_loss, log_softmax_rows, softmax_rows, Objective, SgdConfig, TrainData};

/// Residuals are clamped to `±2B·(1 − CLAMP_MARGIN)` before entering the barrier.
pub const CLAMP_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `τ²`-scaled cross-entropy between temperature-softened teacher and student.
    CeTemperature,
    /// `½‖f − g‖²` averaged over rows.
    SquaredError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    #[default]
    He,
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FindWlConfig {
    pub barrier_gamma: f64,
    /// Restart `k` uses `barrier_gamma · barrier_decay^k`; below 1 strengthens
    /// the barrier on each retry.
    pub barrier_decay: f64,
    /// Bound `B` on logit magnitude; `None` uses 1.5 × the largest teacher logit.
    pub logit_bound: Option<f64>,
    pub temperature: f64,
    pub max_search: usize,
    pub loss_mode: LossMode,
    pub init: Init,
    pub sgd: SgdConfig,
}

impl Default for FindWlConfig {
    fn default() -> Self {
        Self {
            barrier_gamma: 1.0,
            barrier_decay: 1.0,
            logit_bound: None,
            temperature: 2.0,
            max_search: 3,
            loss_mode: LossMode::CeTemperature,
            init: Init::He,
            sgd: SgdConfig::recipe(),
        }
    }
}

impl FindWlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.barrier_gamma > 0.0) {
            return Err(Error::Config("barrier_gamma must be positive".into()));
        }
        if !(self.barrier_decay > 0.0 && self.barrier_decay <= 1.0) {
            return Err(Error::Config("barrier_decay must be in (0, 1]".into()));
        }
        if let Some(b) = self.logit_bound {
            if !(b > 0.0) {
                return Err(Error::Config("logit_bound must be positive".into()));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.max_search == 0 {
            return Err(Error::Config("max_search must be at least 1".into()));
        }
        self.sgd.validate()
    }

    /// Barrier weight used by restart `k`.
    pub fn gamma_at(&self, restart: usize) -> f64 {
        self.barrier_gamma * self.barrier_decay.powi(restart as i32)
    }

    pub fn bound_for(&self, teacher_logits: &Mat) -> f64 {
        self.logit_bound.unwrap_or_else(|| default_logit_bound(teacher_logits))
    }
}

pub fn default_logit_bound(teacher_logits: &Mat) -> f64 {
    let m = teacher_logits.max_abs();
    if m > 0.0 {
        1.5 * m
    } else {
        1.0
    }
}

/// `I[K⁺(i,j) > K⁻(i,j)]`, with entries where `K⁺ = K⁻` marked as tied.
///
/// Tied entries prefer neither sign and are left out of the barrier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IplusMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
    tied: Vec<bool>,
}

impl IplusMask {
    pub fn from_state(state: &WeightState) -> Self {
        let (rows, cols) = state.shape();
        let bits = state
            .kplus
            .as_slice()
            .iter()
            .zip(state.kminus.as_slice())
            .map(|(p, m)| p > m)
            .collect();
        let tied = state
            .kplus
            .as_slice()
            .iter()
            .zip(state.kminus.as_slice())
            .map(|(p, m)| p == m)
            .collect();
        Self { rows, cols, bits, tied }
    }

    pub fn from_bits(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::Shape {
                op: "mask",
                left: (rows, cols),
                right: (bits.len(), 1),
            });
        }
        let tied = vec![false; bits.len()];
        Ok(Self { rows, cols, bits, tied })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn is_tied(&self, i: usize, j: usize) -> bool {
        self.tied[i * self.cols + j]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut bits = Vec::with_capacity(idx.len() * self.cols);
        let mut tied = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            bits.extend_from_slice(&self.bits[i * self.cols..(i + 1) * self.cols]);
            tied.extend_from_slice(&self.tied[i * self.cols..(i + 1) * self.cols]);
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            bits,
            tied,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierValue {
    pub loss: f64,
    pub clamp_count: usize,
}

fn check_barrier_args(l: &Mat, mask: &IplusMask, bound: f64, barrier_gamma: f64) -> Result<()> {
    if !(bound > 0.0) {
        return Err(Error::Config(format!("logit bound B must be positive, got {bound}")));
    }
    if !(barrier_gamma > 0.0) {
        return Err(Error::Config(format!(
            "barrier_gamma must be positive, got {barrier_gamma}"
        )));
    }
    if l.shape() != mask.shape() {
        return Err(Error::Shape {
            op: "barrier",
            left: l.shape(),
            right: mask.shape(),
        });
    }
    Ok(())
}

#[inline]
fn clamp_residual(v: f64, bound: f64) -> (f64, bool) {
    let edge = 2.0 * bound * (1.0 - CLAMP_MARGIN);
    if v.abs() >= edge {
        (edge.copysign(v), true)
    } else {
        (v, false)
    }
}

/// The barrier summed over all untied entries.
pub fn barrier_loss(l: &Mat, mask: &IplusMask, bound: f64, barrier_gamma: f64) -> Result<BarrierValue> {
    check_barrier_args(l, mask, bound, barrier_gamma)?;
    let two_b = 2.0 * bound;
    let mut sum = 0.0;
    let mut clamp_count = 0;
    for i in 0..l.rows() {
        for j in 0..l.cols() {
            if mask.is_tied(i, j) {
                continue;
            }
            let (v, clamped) = clamp_residual(l.get(i, j), bound);
            clamp_count += clamped as usize;
            sum += if mask.get(i, j) {
                (v / two_b).ln_1p()
            } else {
                (-v / two_b).ln_1p()
            };
        }
    }
    Ok(BarrierValue {
        loss: -sum / barrier_gamma,
        clamp_count,
    })
}

/// `∂/∂l` of [`barrier_loss`]. Entries clamped on the singular side take the
/// boundary gradient; entries clamped on the favourable side take zero.
pub fn barrier_grad(l: &Mat, mask: &IplusMask, bound: f64, barrier_gamma: f64) -> Result<(Mat, usize)> {
    check_barrier_args(l, mask, bound, barrier_gamma)?;
    let two_b = 2.0 * bound;
    let mut grad = Mat::zeros(l.rows(), l.cols());
    let mut clamp_count = 0;
    for i in 0..l.rows() {
        for j in 0..l.cols() {
            if mask.is_tied(i, j) {
                continue;
            }
            let (v, clamped) = clamp_residual(l.get(i, j), bound);
            clamp_count += clamped as usize;
            let plus = mask.get(i, j);
            // Past the favourable edge the clamped loss is flat.
            let g = if clamped && (v > 0.0) == plus {
                0.0
            } else if plus {
                -1.0 / (two_b + v)
            } else {
                1.0 / (two_b - v)
            };
            grad.set(i, j, g / barrier_gamma);
        }
    }
    Ok((grad, clamp_count))
}

/// Distillation loss averaged over rows, with its gradient in `f_logits`.
pub fn distill_loss(f_logits: &Mat, g_logits: &Mat, mode: LossMode, temperature: f64) -> Result<(f64, Mat)> {
    if f_logits.shape() != g_logits.shape() {
        return Err(Error::Shape {
            op: "distill_loss",
            left: f_logits.shape(),
            right: g_logits.shape(),
        });
    }
    if !(temperature > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let n = f_logits.rows().max(1) as f64;
    match mode {
        LossMode::SquaredError => {
            let d = f_logits.sub(g_logits)?;
            let loss = 0.5 * d.as_slice().iter().map(|v| v * v).sum::<f64>() / n;
            Ok((loss, d.scale(1.0 / n)))
        }
        LossMode::CeTemperature => {
            let t = temperature;
            let p = softmax_rows(g_logits, t);
            let log_q = log_softmax_rows(f_logits, t);
            let ce: f64 = p.as_slice().iter().zip(log_q.as_slice()).map(|(a, b)| -a * b).sum();
            let q = softmax_rows(f_logits, t);
            let grad = q.sub(&p)?.scale(t / n);
            Ok((t * t * ce / n, grad))
        }
    }
}

/// Distillation toward the teacher, optionally plus the barrier.
pub struct DistillObjective<'a> {
    pub teacher: &'a Mat,
    pub mode: LossMode,
    pub temperature: f64,
    pub barrier: Option<BarrierTerm<'a>>,
}

pub struct BarrierTerm<'a> {
    pub mask: &'a IplusMask,
    pub bound: f64,
    pub gamma: f64,
}

impl Objective for DistillObjective<'_> {
    fn evaluate(&self, rows: &[usize], logits: &Mat) -> Result<(f64, Mat)> {
        let g = self.teacher.select_rows(rows);
        let (mut loss, mut grad) = distill_loss(logits, &g, self.mode, self.temperature)?;
        if let Some(b) = &self.barrier {
            let l = logits.sub(&g)?;
            let mask = b.mask.select_rows(rows);
            let scale = 1.0 / rows.len().max(1) as f64;
            loss += scale * barrier_loss(&l, &mask, b.bound, b.gamma)?.loss;
            let (bg, _) = barrier_grad(&l, &mask, b.bound, b.gamma)?;
            grad.add_assign(&bg.scale(scale))?;
        }
        Ok((loss, grad))
    }
}

/// What a search round sees: training inputs, teacher logits, and the
/// cached activations of the members trained so far.
#[derive(Debug, Clone, Copy)]
pub struct SearchInput<'a> {
    pub x: &'a Mat,
    pub teacher_logits: &'a Mat,
    pub cache: &'a ActivationCache,
}

#[derive(Debug, Clone)]
pub struct Candidate {
    pub params: LearnerParams,
    /// Logits on the training rows.
    pub logits: Mat,
    pub outcome: CheckOutcome,
    pub edge_gamma: Vec<f64>,
    /// Full-data objective (distillation + averaged barrier) after training.
    pub loss: f64,
    pub restart: usize,
    pub barrier_gamma: f64,
    pub clamp_count: usize,
}

/// Train up to `max_search` independently initialized candidates of `class`.
///
/// Restart `k` uses `rng.split(k)`. Returns the first candidate passing the
/// weak-learning check; on a degenerate state every candidate is trained and
/// the lowest-loss one is returned; otherwise `None`. Restarts whose training
/// diverges, or whose residual leaves the barrier domain `|l| < 2B`, are skipped.
pub fn find_weak_learner(
    state: &WeightState,
    class: &ClassSpec,
    input: SearchInput<'_>,
    cfg: &FindWlConfig,
    edge_tol: f64,
    rng: &RngStream,
) -> Result<Option<Candidate>> {
    cfg.validate()?;
    class.validate()?;
    let g = input.teacher_logits;
    if g.rows() != input.x.rows() || state.shape() != g.shape() {
        return Err(Error::Shape {
            op: "find_weak_learner",
            left: state.shape(),
            right: g.shape(),
        });
    }
    let tap = if class.connection.is_active() {
        Some(
            input
                .cache
                .get(class.connection.source_round, class.connection.source_layer)?,
        )
    } else {
        None
    };
    let data = TrainData::new(input.x, tap);
    let mask = IplusMask::from_state(state);
    let bound = cfg.bound_for(g);
    let degenerate = state.is_degenerate();
    let mut best: Option<Candidate> = None;
    for restart in 0..cfg.max_search {
        let barrier_gamma = cfg.gamma_at(restart);
        let objective = DistillObjective {
            teacher: g,
            mode: cfg.loss_mode,
            temperature: cfg.temperature,
            barrier: Some(BarrierTerm {
                mask: &mask,
                bound,
                gamma: barrier_gamma,
            }),
        };
        let restart_rng = rng.split(restart as u64);
        let mut params = match cfg.init {
            Init::He => init_params(class, &mut restart_rng.split(0))?,
            Init::Zeros => LearnerParams::zeros(class)?,
        };
        match fit(&mut params, data, &objective, &cfg.sgd, &restart_rng.split(1)) {
            Ok(_) => {}
            // A diverged restart counts as a failed attempt.
            Err(Error::NonFinite { .. }) => continue,
            Err(e) => return Err(e),
        }
        let (loss, logits) = full_loss(&params, data, &objective)?;
        let l = logits.sub(g)?;
        if l.max_abs() >= 2.0 * bound * (1.0 - CLAMP_MARGIN) {
            continue;
        }
        let edge_gamma = edge(state, &l)?;
        let outcome = classify_edges(state, &edge_gamma, edge_tol);
        let clamp_count = barrier_loss(&l, &mask, bound, barrier_gamma)?.clamp_count;
        let candidate = Candidate {
            params,
            logits,
            outcome,
            edge_gamma,
            loss,
            restart,
            barrier_gamma,
            clamp_count,
        };
        match outcome {
            CheckOutcome::Pass => return Ok(Some(candidate)),
            CheckOutcome::Degenerate if degenerate && best.as_ref().is_none_or(|b| candidate.loss < b.loss) => {
                best = Some(candidate);
            }
            _ => {}
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::md_update;
    use crate::learner::mlp_spec;

    fn single(v: f64) -> Mat {
        Mat::from_vec(1, 1, vec![v]).unwrap()
    }

    fn mask1(bit: bool) -> IplusMask {
        IplusMask::from_bits(1, 1, vec![bit]).unwrap()
    }

    #[test]
    fn barrier_hand_values() {
        assert_eq!(
            barrier_loss(
                &Mat::zeros(3, 2),
                &IplusMask::from_bits(3, 2, vec![true; 6]).unwrap(),
                1.0,
                1.0
            )
            .unwrap()
            .loss,
            0.0
        );
        let v = barrier_loss(&single(-1.0), &mask1(true), 1.0, 1.0).unwrap();
        assert!((v.loss - 0.5f64.ln().abs()).abs() < 1e-12);
        assert_eq!(v.clamp_count, 0);
        let v = barrier_loss(&single(1.0), &mask1(true), 1.0, 1.0).unwrap();
        assert!((v.loss + 1.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn barrier_grad_hand_values() {
        let (g, _) = barrier_grad(&single(0.0), &mask1(true), 1.0, 1.0).unwrap();
        assert_eq!(g.get(0, 0), -0.5);
        let (g, _) = barrier_grad(&single(0.0), &mask1(false), 1.0, 1.0).unwrap();
        assert_eq!(g.get(0, 0), 0.5);
    }

    #[test]
    fn barrier_clamps_at_boundary() {
        let edge = 2.0 * (1.0 - CLAMP_MARGIN);
        let l = Mat::from_vec(1, 4, vec![-edge, -5.0, 0.1, edge * 0.999]).unwrap();
        let mask = IplusMask::from_bits(1, 4, vec![true; 4]).unwrap();
        let v = barrier_loss(&l, &mask, 1.0, 1.0).unwrap();
        assert_eq!(v.clamp_count, 2);
        assert!(v.loss.is_finite());
        let (g, count) = barrier_grad(&l, &mask, 1.0, 1.0).unwrap();
        assert_eq!(count, 2);
        assert_eq!(g.get(0, 0), g.get(0, 1));
        assert!(g.is_finite());
    }

    #[test]
    fn barrier_rejects_bad_params() {
        assert!(barrier_loss(&single(0.0), &mask1(true), 0.0, 1.0).is_err());
        assert!(barrier_loss(&single(0.0), &mask1(true), 1.0, -1.0).is_err());
        assert!(barrier_grad(&single(0.0), &mask1(true), -2.0, 1.0).is_err());
    }

    #[test]
    fn distill_loss_cases() {
        let mut rng = RngStream::new(3);
        let f = Mat::from_vec(4, 3, rng.gaussian(12)).unwrap();
        let (loss, grad) = distill_loss(&f, &f, LossMode::SquaredError, 1.0).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad.max_abs(), 0.0);
        let (_, grad) = distill_loss(&f, &f, LossMode::CeTemperature, 2.0).unwrap();
        assert!(grad.max_abs() < 1e-15);

        let f = Mat::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let g = Mat::from_vec(1, 2, vec![0.0, 2.0 * 2f64.ln()]).unwrap();
        let p = softmax_rows(&g, 1.0);
        assert!((p.get(0, 0) - 0.2).abs() < 1e-15 && (p.get(0, 1) - 0.8).abs() < 1e-15);
        let (loss, _) = distill_loss(&f, &g, LossMode::CeTemperature, 1.0).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);

        assert!(distill_loss(&Mat::zeros(2, 2), &Mat::zeros(2, 3), LossMode::SquaredError, 1.0).is_err());
    }

    #[test]
    fn mask_follows_state() {
        let state = WeightState {
            kplus: Mat::from_vec(2, 1, vec![0.4, 0.1]).unwrap(),
            kminus: Mat::from_vec(2, 1, vec![0.1, 0.4]).unwrap(),
        };
        let m = IplusMask::from_state(&state);
        assert!(m.get(0, 0) && !m.get(1, 0));
        let uniform = IplusMask::from_state(&WeightState::init_uniform(3, 2).unwrap());
        assert!((0..3).all(|i| (0..2).all(|j| !uniform.get(i, j))));
    }

    fn quick_cfg() -> FindWlConfig {
        FindWlConfig {
            loss_mode: LossMode::SquaredError,
            max_search: 3,
            sgd: SgdConfig {
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 0.0,
                epochs: 30,
                batch_size: 16,
                lr_drops: vec![],
                lr_factor: 1.0,
            },
            ..FindWlConfig::default()
        }
    }

    #[test]
    fn degenerate_state_always_returns_a_candidate() {
        let mut rng = RngStream::new(1);
        let x = Mat::from_vec(32, 3, rng.gaussian(96)).unwrap();
        let g = Mat::from_vec(32, 2, rng.gaussian(64)).unwrap();
        let state = WeightState::init_uniform(32, 2).unwrap();
        let class = ClassSpec::plain(mlp_spec(&[3, 4, 2]).unwrap()).unwrap();
        let cache = ActivationCache::new();
        let input = SearchInput {
            x: &x,
            teacher_logits: &g,
            cache: &cache,
        };
        let cand = find_weak_learner(&state, &class, input, &quick_cfg(), 0.0, &RngStream::new(2))
            .unwrap()
            .expect("degenerate rounds never return None");
        assert_eq!(cand.outcome, CheckOutcome::Degenerate);
    }

    #[test]
    fn realizable_constant_residual_passes() {
        // Teacher is a constant; the state asks for residuals of one sign per label.
        let n = 24;
        let mut rng = RngStream::new(7);
        let x = Mat::from_vec(n, 2, rng.gaussian(2 * n)).unwrap();
        let g = Mat::filled(n, 2, 0.5);
        let mut kplus = Mat::filled(n, 2, 0.7 / n as f64);
        let mut kminus = Mat::filled(n, 2, 0.3 / n as f64);
        for i in 0..n {
            kplus.set(i, 1, 0.2 / n as f64);
            kminus.set(i, 1, 0.8 / n as f64);
        }
        let state = WeightState { kplus, kminus };
        let class = ClassSpec::plain(mlp_spec(&[2, 2]).unwrap()).unwrap();
        let cache = ActivationCache::new();
        let input = SearchInput {
            x: &x,
            teacher_logits: &g,
            cache: &cache,
        };
        let cfg = FindWlConfig {
            logit_bound: Some(2.0),
            ..quick_cfg()
        };
        let cand = find_weak_learner(&state, &class, input, &cfg, 0.0, &RngStream::new(9))
            .unwrap()
            .expect("a bias-capable linear class can satisfy the check");
        assert!(cand.logits.sub(&g).unwrap().max_abs() < 4.0);
        assert_eq!(cand.outcome, CheckOutcome::Pass);
        assert!(cand.edge_gamma.iter().all(|&e| e > 0.0));
        let l = cand.logits.sub(&g).unwrap();
        assert!(edge(&state, &l).unwrap().iter().all(|&e| e > 0.0));
    }

    #[test]
    fn zero_class_cannot_pass() {
        // Zero candidate has l = −g; with positive g and K⁺ > K⁻ its edge is negative.
        let n = 10;
        let mut rng = RngStream::new(5);
        let x = Mat::from_vec(n, 3, rng.gaussian(3 * n)).unwrap();
        let g = Mat::filled(n, 1, 1.0);
        let state = WeightState {
            kplus: Mat::filled(n, 1, 0.08),
            kminus: Mat::filled(n, 1, 0.02),
        };
        let class = ClassSpec::plain(mlp_spec(&[3, 1]).unwrap()).unwrap();
        let mut cfg = quick_cfg();
        cfg.init = Init::Zeros;
        cfg.sgd.lr = 0.0;
        cfg.max_search = 5;
        let cache = ActivationCache::new();
        let input = SearchInput {
            x: &x,
            teacher_logits: &g,
            cache: &cache,
        };
        assert!(find_weak_learner(&state, &class, input, &cfg, 0.0, &RngStream::new(1))
            .unwrap()
            .is_none());
    }

    #[test]
    fn diverged_restarts_are_skipped() {
        let n = 16;
        let mut rng = RngStream::new(4);
        let x = Mat::from_vec(n, 3, rng.gaussian(3 * n)).unwrap();
        let g = Mat::from_vec(n, 2, rng.gaussian(2 * n)).unwrap();
        let state = md_update(&WeightState::init_uniform(n, 2).unwrap(), &g, 0.5).unwrap().0;
        let class = ClassSpec::plain(mlp_spec(&[3, 8, 2]).unwrap()).unwrap();
        let mut cfg = quick_cfg();
        cfg.sgd.lr = 1e200;
        let cache = ActivationCache::new();
        let input = SearchInput {
            x: &x,
            teacher_logits: &g,
            cache: &cache,
        };
        assert!(find_weak_learner(&state, &class, input, &cfg, 0.0, &RngStream::new(1))
            .unwrap()
            .is_none());
    }
}
