//! Anytime curves, baselines, early exit, bound verification, and margins.

use serde::{Deserialize, Serialize};

use crate::data::{accuracy, argmax};
use crate::distill::{prefix_average, Ensemble, HistoryRow};
use crate::error::{Error, Result};
use crate::findwl::{DistillObjective, FindWlConfig, Init};
use crate::game::{md_update, residual, WeightState};
use crate::learner::{init_params, ActivationCache, ClassSpec, ConnectionKind, ConnectionSpec, LearnerParams};
use crate::rng::RngStream;
use crate::tensor::Mat;
use crate::train::{fit, TrainData};

/// Tolerance for comparing a measured error with a bound.
pub const BOUND_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub prefix_k: usize,
    /// Cumulative per-example FLOPs as a fraction of the teacher's.
    pub cum_flops_fraction: f64,
    pub accuracy: f64,
}

/// Accuracy of every prefix average of `member_logits`.
pub fn curve_from_logits(
    member_logits: &[Mat],
    member_flops: &[u64],
    labels: &[usize],
    teacher_flops: u64,
) -> Result<Vec<CurvePoint>> {
    if member_logits.is_empty() {
        return Err(Error::Config("cannot build a curve for an empty ensemble".into()));
    }
    if teacher_flops == 0 {
        return Err(Error::Config("teacher FLOPs must be positive".into()));
    }
    if member_flops.len() != member_logits.len() {
        return Err(Error::Config(format!(
            "{} FLOP counts for {} members",
            member_flops.len(),
            member_logits.len()
        )));
    }
    let mut sum = Mat::zeros(member_logits[0].rows(), member_logits[0].cols());
    let mut flops = 0u64;
    let mut out = Vec::with_capacity(member_logits.len());
    for (k, (logits, &f)) in member_logits.iter().zip(member_flops).enumerate() {
        sum.add_assign(logits)?;
        flops += f;
        let avg = sum.scale(1.0 / (k + 1) as f64);
        out.push(CurvePoint {
            prefix_k: k + 1,
            cum_flops_fraction: flops as f64 / teacher_flops as f64,
            accuracy: accuracy(&avg, labels),
        });
    }
    Ok(out)
}

/// One point per prefix of the ensemble, scored against true labels.
pub fn anytime_curve(ens: &Ensemble, x: &Mat, labels: &[usize], teacher_flops: u64) -> Result<Vec<CurvePoint>> {
    let logits = ens.member_logits(x, ens.len())?;
    let flops: Vec<u64> = ens.members.iter().map(LearnerParams::flops).collect();
    curve_from_logits(&logits, &flops, labels, teacher_flops)
}

/// `spec` with its connection removed and any concat widening undone.
pub fn plain_class(spec: &ClassSpec) -> ClassSpec {
    let mut layers = spec.layers.clone();
    let c = spec.connection;
    if c.kind == ConnectionKind::DenseConcat {
        layers[c.target_layer].in_dim -= c.width;
    }
    ClassSpec {
        layers,
        connection: ConnectionSpec::none(),
    }
}

/// Plain distillation of one connection-free model: no weight state, no barrier.
pub fn distill_single(
    class: &ClassSpec,
    x: &Mat,
    teacher_logits: &Mat,
    cfg: &FindWlConfig,
    rng: &RngStream,
) -> Result<LearnerParams> {
    if class.connection.is_active() {
        return Err(Error::Config("plain distillation takes a connection-free class".into()));
    }
    class.validate()?;
    cfg.validate()?;
    let mut params = match cfg.init {
        Init::He => init_params(class, &mut rng.split(0))?,
        Init::Zeros => LearnerParams::zeros(class)?,
    };
    let objective = DistillObjective {
        teacher: teacher_logits,
        mode: cfg.loss_mode,
        temperature: cfg.temperature,
        barrier: None,
    };
    fit(
        &mut params,
        TrainData::new(x, None),
        &objective,
        &cfg.sgd,
        &rng.split(1),
    )?;
    Ok(params)
}

/// Independently distilled models, one per spec; model `k` uses `seed` split by `k`.
pub fn baseline_resched(
    member_specs: &[ClassSpec],
    x: &Mat,
    teacher_logits: &Mat,
    cfg: &FindWlConfig,
    seed: u64,
) -> Result<Vec<LearnerParams>> {
    let root = RngStream::new(seed);
    member_specs
        .iter()
        .enumerate()
        .map(|(k, spec)| distill_single(&plain_class(spec), x, teacher_logits, cfg, &root.split(k as u64)))
        .collect()
}

/// Prefix-average curve of independently trained models.
pub fn models_curve(
    models: &[LearnerParams],
    x: &Mat,
    labels: &[usize],
    teacher_flops: u64,
) -> Result<Vec<CurvePoint>> {
    let cache = ActivationCache::new();
    let logits = models
        .iter()
        .map(|m| m.predict(x, &cache))
        .collect::<Result<Vec<_>>>()?;
    let flops: Vec<u64> = models.iter().map(LearnerParams::flops).collect();
    curve_from_logits(&logits, &flops, labels, teacher_flops)
}

/// Widest uniform-width MLP (same depth as `base`) costing at most `budget` FLOPs.
pub fn widest_within(base: &ClassSpec, budget: u64) -> Option<ClassSpec> {
    let plain = plain_class(base);
    let layers = &plain.layers;
    let input = layers[0].in_dim;
    let output = layers[layers.len() - 1].out_dim;
    let hidden = layers.len() - 1;
    let build = |w: usize| {
        let mut widths = vec![input];
        widths.extend(std::iter::repeat_n(w, hidden));
        widths.push(output);
        ClassSpec::plain(crate::learner::mlp_spec(&widths).ok()?).ok()
    };
    let mut best = None;
    let mut w = 1;
    while let Some(spec) = build(w) {
        if spec.flops() > budget {
            break;
        }
        best = Some(spec);
        w += 1;
    }
    best
}

/// At each budget, one independently distilled model as wide as fits.
///
/// Points report the budget itself; budgets below the narrowest model are skipped.
pub fn baseline_noresched(
    base: &ClassSpec,
    budgets: &[u64],
    train_x: &Mat,
    teacher_logits: &Mat,
    test_x: &Mat,
    test_labels: &[usize],
    teacher_flops: u64,
    cfg: &FindWlConfig,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    let root = RngStream::new(seed);
    let mut out = Vec::new();
    for (k, &budget) in budgets.iter().enumerate() {
        let Some(spec) = widest_within(base, budget) else {
            continue;
        };
        let model = distill_single(&spec, train_x, teacher_logits, cfg, &root.split(k as u64))?;
        let logits = model.predict(test_x, &ActivationCache::new())?;
        out.push(CurvePoint {
            prefix_k: k + 1,
            cum_flops_fraction: budget as f64 / teacher_flops as f64,
            accuracy: accuracy(&logits, test_labels),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitDecision {
    pub prediction: usize,
    pub members_evaluated: usize,
    pub flops_spent: u64,
}

fn max_probability(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = row.iter().map(|v| (v - m).exp()).sum();
    1.0 / total
}

/// Per row: evaluate members in order and stop at the first prefix whose
/// top softmax probability reaches `threshold`.
pub fn early_exit(ens: &Ensemble, x: &Mat, threshold: f64) -> Result<Vec<ExitDecision>> {
    if !(threshold >= 0.0) {
        return Err(Error::Config(format!("threshold must be >= 0, got {threshold}")));
    }
    let logits = ens.member_logits(x, ens.len())?;
    if logits.is_empty() {
        return Err(Error::Config("early exit on an empty ensemble".into()));
    }
    let cum_flops: Vec<u64> = (1..=ens.len()).map(|k| ens.prefix_flops(k)).collect();
    let labels = logits[0].cols();
    let mut out = Vec::with_capacity(x.rows());
    let mut avg = vec![0.0; labels];
    for i in 0..x.rows() {
        let mut sum = vec![0.0; labels];
        let mut decision = None;
        for (k, l) in logits.iter().enumerate() {
            for (s, v) in sum.iter_mut().zip(l.row(i)) {
                *s += v;
            }
            for (a, s) in avg.iter_mut().zip(&sum) {
                *a = s / (k + 1) as f64;
            }
            if max_probability(&avg) >= threshold || k + 1 == logits.len() {
                decision = Some(ExitDecision {
                    prediction: argmax(&avg),
                    members_evaluated: k + 1,
                    flops_spent: cum_flops[k],
                });
                break;
            }
        }
        out.push(decision.expect("the last member always decides"));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyExitSummary {
    pub threshold: f64,
    pub mean_members_evaluated: f64,
    pub mean_flops_fraction: f64,
    pub accuracy: f64,
    pub full_accuracy: f64,
}

pub fn summarize_early_exit(
    ens: &Ensemble,
    x: &Mat,
    labels: &[usize],
    threshold: f64,
    teacher_flops: u64,
) -> Result<(Vec<ExitDecision>, EarlyExitSummary)> {
    let decisions = early_exit(ens, x, threshold)?;
    let n = decisions.len().max(1) as f64;
    let hits = decisions.iter().zip(labels).filter(|(d, &y)| d.prediction == y).count();
    let full = prefix_average(&ens.member_logits(x, ens.len())?)?;
    let summary = EarlyExitSummary {
        threshold,
        mean_members_evaluated: decisions.iter().map(|d| d.members_evaluated as f64).sum::<f64>() / n,
        mean_flops_fraction: decisions.iter().map(|d| d.flops_spent as f64).sum::<f64>() / n / teacher_flops as f64,
        accuracy: hits as f64 / n,
        full_accuracy: accuracy(&full, labels),
    };
    Ok((decisions, summary))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundStatus {
    Pass,
    Violation,
    PremiseViolated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub status: BoundStatus,
    pub samples: usize,
    pub labels: usize,
    pub rounds: usize,
    pub eta: f64,
    pub g_inf: f64,
    /// `T ≥ ln 2N`.
    pub premise_rounds: bool,
    /// `η·G∞ ≤ 1`.
    pub premise_eta: bool,
    pub observed_max_residual: f64,
    /// Every residual entry of every member is within `G∞`.
    pub premise_g_inf: bool,
    /// `max |F_T − g|` from the ensemble prediction.
    pub measured_error: f64,
    /// `max |(1/T)·Σ_t l_t|` from per-member residuals.
    pub measured_error_residuals: f64,
    pub per_label_error: Vec<f64>,
    pub edge_sum: Vec<f64>,
    /// `G∞·sqrt(ln(2N)/T)`.
    pub theorem_bound: f64,
    /// Per label: `ln(2N)/(ηT) + ηG∞² − (1/T)·Σ_t γ_t`.
    pub appendix_bound: Vec<f64>,
    pub theorem_ok: bool,
    pub appendix_ok: bool,
    /// `ln z ≤ −ηγ + η²G∞²` in every recorded round and label.
    pub normalizer_ok: bool,
    /// The recorded edges and normalizers match a replay of the weight updates.
    pub history_consistent: bool,
    pub diagnostics: Vec<String>,
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Check the convergence bound for a finished run against its training data.
pub fn verify_bound(
    history: &[HistoryRow],
    ens: &Ensemble,
    x: &Mat,
    teacher_logits: &Mat,
    g_inf: f64,
) -> Result<BoundReport> {
    if !(g_inf > 0.0 && g_inf.is_finite()) {
        return Err(Error::Config(format!("g_inf must be positive, got {g_inf}")));
    }
    if ens.is_empty() {
        return Err(Error::Config("cannot verify an empty ensemble".into()));
    }
    let (n, labels) = teacher_logits.shape();
    let rounds = ens.len();
    let eta = ens.meta.eta;
    let mut diagnostics = Vec::new();

    let member_logits = ens.member_logits(x, rounds)?;
    let residuals = member_logits
        .iter()
        .map(|f| residual(f, teacher_logits))
        .collect::<Result<Vec<_>>>()?;
    let observed_max_residual = residuals.iter().map(Mat::max_abs).fold(0.0, f64::max);

    let prediction = prefix_average(&member_logits)?;
    let error = prediction.sub(teacher_logits)?;
    let measured_error = error.max_abs();
    let per_label_error: Vec<f64> = (0..labels)
        .map(|j| error.col(j).iter().map(|v| v.abs()).fold(0.0, f64::max))
        .collect();
    let mut summed = Mat::zeros(n, labels);
    for l in &residuals {
        summed.add_assign(l)?;
    }
    let measured_error_residuals = summed.max_abs() / rounds as f64;
    if !close(measured_error, measured_error_residuals) {
        diagnostics.push(format!(
            "ensemble error {measured_error} disagrees with residual average {measured_error_residuals}"
        ));
    }

    let mut by_round: Vec<Vec<Option<HistoryRow>>> = vec![vec![None; labels]; rounds];
    let mut shape_ok = true;
    for row in history {
        match by_round
            .get_mut(row.round.wrapping_sub(1))
            .and_then(|r| r.get_mut(row.label))
        {
            Some(slot) if slot.is_none() => *slot = Some(*row),
            _ => {
                shape_ok = false;
                diagnostics.push(format!(
                    "unexpected history row for round {} label {}",
                    row.round, row.label
                ));
            }
        }
    }
    if by_round.iter().flatten().any(Option::is_none) {
        shape_ok = false;
        diagnostics.push(format!("history does not cover {rounds} rounds x {labels} labels"));
    }

    let mut history_consistent = shape_ok;
    let mut normalizer_ok = shape_ok;
    let mut edge_sum = vec![0.0; labels];
    if shape_ok {
        let mut state = WeightState::init_uniform(n, labels)?;
        for (t, l) in residuals.iter().enumerate() {
            let (next, replay) = md_update(&state, l, eta)?;
            for j in 0..labels {
                let rec = by_round[t][j].expect("checked above");
                edge_sum[j] += rec.edge_gamma;
                if !close(rec.eta, eta) || !close(rec.edge_gamma, replay.edge_gamma[j]) || !close(rec.z, replay.z[j]) {
                    history_consistent = false;
                    diagnostics.push(format!(
                        "round {} label {j}: recorded (edge {}, z {}, eta {}) but replay gives (edge {}, z {}, eta {eta})",
                        t + 1,
                        rec.edge_gamma,
                        rec.z,
                        rec.eta,
                        replay.edge_gamma[j],
                        replay.z[j]
                    ));
                }
                if !(rec.z > 0.0 && rec.z.ln() <= -eta * rec.edge_gamma + eta * eta * g_inf * g_inf + BOUND_TOL) {
                    normalizer_ok = false;
                    diagnostics.push(format!(
                        "round {} label {j}: ln z = {} exceeds -eta*gamma + eta^2*G^2 = {}",
                        t + 1,
                        rec.z.ln(),
                        -eta * rec.edge_gamma + eta * eta * g_inf * g_inf
                    ));
                }
            }
            state = next;
        }
    }

    let log2n = (2.0 * n as f64).ln();
    let t = rounds as f64;
    let theorem_bound = g_inf * (log2n / t).sqrt();
    let appendix_bound: Vec<f64> = edge_sum
        .iter()
        .map(|s| log2n / (eta * t) + eta * g_inf * g_inf - s / t)
        .collect();
    let theorem_ok = measured_error <= theorem_bound + BOUND_TOL;
    let appendix_ok = per_label_error
        .iter()
        .zip(&appendix_bound)
        .all(|(e, b)| *e <= b + BOUND_TOL);
    if !theorem_ok {
        diagnostics.push(format!(
            "measured error {measured_error} exceeds theorem bound {theorem_bound}"
        ));
    }
    if !appendix_ok {
        diagnostics.push(format!(
            "per-label errors {per_label_error:?} exceed appendix bounds {appendix_bound:?}"
        ));
    }

    let premise_rounds = t >= log2n;
    let premise_eta = eta * g_inf <= 1.0 + BOUND_TOL;
    let premise_g_inf = observed_max_residual <= g_inf + BOUND_TOL;
    if !premise_rounds {
        diagnostics.push(format!("premise violated: T = {rounds} < ln 2N = {log2n}"));
    }
    if !premise_eta {
        diagnostics.push(format!("premise violated: eta * G = {} > 1", eta * g_inf));
    }
    if !premise_g_inf {
        diagnostics.push(format!(
            "premise violated: observed max |l| = {observed_max_residual} exceeds G = {g_inf}"
        ));
    }

    let status = if !(premise_rounds && premise_eta && premise_g_inf) {
        BoundStatus::PremiseViolated
    } else if history_consistent
        && normalizer_ok
        && theorem_ok
        && appendix_ok
        && close(measured_error, measured_error_residuals)
    {
        BoundStatus::Pass
    } else {
        BoundStatus::Violation
    };
    Ok(BoundReport {
        status,
        samples: n,
        labels,
        rounds,
        eta,
        g_inf,
        premise_rounds,
        premise_eta,
        observed_max_residual,
        premise_g_inf,
        measured_error,
        measured_error_residuals,
        per_label_error,
        edge_sum,
        theorem_bound,
        appendix_bound,
        theorem_ok,
        appendix_ok,
        normalizer_ok,
        history_consistent,
        diagnostics,
    })
}

/// Fraction of rows whose margin is below `epsilon`; exact ties always count.
///
/// The margin is top-1 minus top-2 logit, or `|g|` for a single output.
pub fn margin_measure(teacher_logits: &Mat, epsilon: f64) -> Result<f64> {
    if !(epsilon >= 0.0) {
        return Err(Error::Config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let n = teacher_logits.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let below = (0..n)
        .filter(|&i| {
            let row = teacher_logits.row(i);
            let margin = if row.len() == 1 {
                row[0].abs()
            } else {
                let mut sorted = row.to_vec();
                sorted.sort_by(|a, b| b.total_cmp(a));
                sorted[0] - sorted[1]
            };
            margin == 0.0 || margin < epsilon
        })
        .count();
    Ok(below as f64 / n as f64)
}
