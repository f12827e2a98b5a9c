//! The distribution player of the distillation game.
//!
//! `K⁺` weights positive residuals `f − g`, `K⁻` weights negative ones. Each
//! label column of `K⁺ + K⁻` is a probability distribution over samples.
//! After a learner with residual `l = f − g` joins the ensemble, every column
//! is updated by exponential weights and renormalized:
//!
//! ```text
//! K⁺(i,j) ← K⁺(i,j)·exp(−η·l(i,j)) / z(j)
//! K⁻(i,j) ← K⁻(i,j)·exp(+η·l(i,j)) / z(j)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Mat};

/// Largest `η·|l|` accepted by [`md_update`] before `exp` would overflow.
pub const EXP_LIMIT: f64 = 700.0;

const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightState {
    pub kplus: Mat,
    pub kminus: Mat,
}

/// Edge and normalizer of one update, per label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub round: usize,
    pub edge_gamma: Vec<f64>,
    pub z: Vec<f64>,
}

/// Parameters of a generalized weak oracle: with probability `1 − delta`
/// its output `u` satisfies `⟨u, ∇F⟩ ≥ alpha·‖u‖·‖∇F‖ − beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleParams {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            delta: 0.0,
        }
    }
}

impl OracleParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || self.beta < 0.0 || !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config(format!("invalid oracle parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckOutcome {
    /// Every label's edge exceeds the tolerance.
    Pass,
    Fail,
    /// `K⁺ == K⁻` everywhere, so every candidate has zero edge.
    Degenerate,
}

impl WeightState {
    /// Every entry of both matrices set to `1/(2N)`.
    pub fn init_uniform(n: usize, labels: usize) -> Result<Self> {
        if n == 0 || labels == 0 {
            return Err(Error::Config(format!("weight state needs N, L >= 1, got {n}x{labels}")));
        }
        let w = 1.0 / (2.0 * n as f64);
        Ok(Self {
            kplus: Mat::filled(n, labels, w),
            kminus: Mat::filled(n, labels, w),
        })
    }

    pub fn samples(&self) -> usize {
        self.kplus.rows()
    }

    pub fn labels(&self) -> usize {
        self.kplus.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.kplus.shape()
    }

    fn check_shape(&self, l: &Mat, op: &'static str) -> Result<()> {
        if l.shape() != self.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: l.shape(),
            });
        }
        Ok(())
    }

    pub fn is_degenerate(&self) -> bool {
        self.kplus == self.kminus
    }

    /// `K⁺ − K⁻`, the direction the edge is measured against.
    pub fn signed(&self) -> Mat {
        self.kplus.sub(&self.kminus).expect("K+ and K- share a shape")
    }

    /// Column sums of `K⁺ + K⁻`.
    pub fn column_mass(&self) -> Vec<f64> {
        let mut out = self.kplus.col_sums();
        for (o, m) in out.iter_mut().zip(self.kminus.col_sums()) {
            *o += m;
        }
        out
    }

    /// Largest deviation from the invariants: entries in `[0, 1]`, finite,
    /// and unit column mass. Returns the worst column-sum error.
    pub fn check_invariants(&self, tol: f64) -> Result<f64> {
        for (name, m) in [("K+", &self.kplus), ("K-", &self.kminus)] {
            if !m.is_finite() {
                return Err(Error::NonFinite { what: name.into() });
            }
            if m.as_slice().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Data(format!("{name} has an entry outside [0, 1]")));
            }
        }
        let worst = self
            .column_mass()
            .iter()
            .enumerate()
            .map(|(j, s)| (j, (s - 1.0).abs()))
            .fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
        if worst.1 > tol {
            return Err(Error::NotStochastic {
                column: worst.0,
                sum: self.column_mass()[worst.0],
            });
        }
        Ok(worst.1)
    }
}

/// `f − g`.
pub fn residual(f_logits: &Mat, g_logits: &Mat) -> Result<Mat> {
    f_logits.sub(g_logits)
}

/// Per-label edge `γ(j) = Σᵢ (K⁺(i,j) − K⁻(i,j))·l(i,j)`.
pub fn edge(state: &WeightState, l: &Mat) -> Result<Vec<f64>> {
    state.check_shape(l, "edge")?;
    let mut gamma = vec![0.0; state.labels()];
    for i in 0..state.samples() {
        let (kp, km, li) = (state.kplus.row(i), state.kminus.row(i), l.row(i));
        for j in 0..gamma.len() {
            gamma[j] += (kp[j] - km[j]) * li[j];
        }
    }
    Ok(gamma)
}

/// Weak-learning test: pass iff every label's edge is strictly above `edge_tol`.
pub fn weak_learning_check(state: &WeightState, l: &Mat, edge_tol: f64) -> Result<CheckOutcome> {
    let gamma = edge(state, l)?;
    Ok(classify_edges(state, &gamma, edge_tol))
}

/// The verdict for precomputed edges, shared with callers that already hold `γ`.
pub fn classify_edges(state: &WeightState, gamma: &[f64], edge_tol: f64) -> CheckOutcome {
    if state.is_degenerate() {
        CheckOutcome::Degenerate
    } else if gamma.iter().all(|&g| g > edge_tol) {
        CheckOutcome::Pass
    } else {
        CheckOutcome::Fail
    }
}

/// One exponential-weights step followed by per-column normalization.
pub fn md_update(state: &WeightState, l: &Mat, eta: f64) -> Result<(WeightState, EdgeRecord)> {
    state.check_shape(l, "md_update")?;
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Config(format!("eta must be positive, got {eta}")));
    }
    let worst = eta * l.max_abs();
    if worst > EXP_LIMIT || !worst.is_finite() {
        return Err(Error::Overflow {
            value: worst,
            limit: EXP_LIMIT,
        });
    }
    let edge_gamma = edge(state, l)?;
    let (n, labels) = state.shape();
    let mut kplus = Mat::zeros(n, labels);
    let mut kminus = Mat::zeros(n, labels);
    let mut z = vec![0.0; labels];
    for i in 0..n {
        for j in 0..labels {
            let e = eta * l.get(i, j);
            let p = state.kplus.get(i, j) * (-e).exp();
            let m = state.kminus.get(i, j) * e.exp();
            kplus.set(i, j, p);
            kminus.set(i, j, m);
            z[j] += p + m;
        }
    }
    normalize_columns(&mut kplus, &mut kminus, &z);
    Ok((
        WeightState { kplus, kminus },
        EdgeRecord {
            round: 0,
            edge_gamma,
            z,
        },
    ))
}

fn normalize_columns(kplus: &mut Mat, kminus: &mut Mat, z: &[f64]) {
    for i in 0..kplus.rows() {
        for (j, zj) in z.iter().enumerate() {
            kplus.set(i, j, kplus.get(i, j) / zj);
            kminus.set(i, j, kminus.get(i, j) / zj);
        }
    }
}

/// Closed-form weights after a whole history of residuals:
/// `K⁺_{T+1} = K⁺₁·exp(−Σₜ ηₜ lₜ) / ∏ₜ zₜ`, and symmetrically for `K⁻`.
///
/// The normalizer product is recovered as the column mass of the
/// unnormalized weights; exponents are shifted per column so that long
/// histories cannot overflow.
pub fn recompute_from_history(initial: &WeightState, residuals: &[Mat], etas: &[f64]) -> Result<WeightState> {
    let exponents = cumulative_exponent(initial, residuals, etas)?;
    let (n, labels) = initial.shape();
    let mut kplus = Mat::zeros(n, labels);
    let mut kminus = Mat::zeros(n, labels);
    for j in 0..labels {
        let mut shift = f64::NEG_INFINITY;
        for i in 0..n {
            let s = exponents.get(i, j);
            shift = shift.max(log_or_neg_inf(initial.kplus.get(i, j)) - s);
            shift = shift.max(log_or_neg_inf(initial.kminus.get(i, j)) + s);
        }
        for i in 0..n {
            let s = exponents.get(i, j);
            kplus.set(i, j, initial.kplus.get(i, j) * (-s - shift).exp());
            kminus.set(i, j, initial.kminus.get(i, j) * (s - shift).exp());
        }
    }
    let mut z = kplus.col_sums();
    for (a, b) in z.iter_mut().zip(kminus.col_sums()) {
        *a += b;
    }
    normalize_columns(&mut kplus, &mut kminus, &z);
    Ok(WeightState { kplus, kminus })
}

/// `log Π zₜ(j)` implied by a history, computed without the normalizers:
/// `log Σᵢ [K⁺₁ e^{−S} + K⁻₁ e^{S}]` with `S = Σₜ ηₜ lₜ`.
pub fn log_normalizer_product(initial: &WeightState, residuals: &[Mat], etas: &[f64]) -> Result<Vec<f64>> {
    let exponents = cumulative_exponent(initial, residuals, etas)?;
    let (n, labels) = initial.shape();
    let mut out = vec![0.0; labels];
    for (j, o) in out.iter_mut().enumerate() {
        let terms: Vec<f64> = (0..n)
            .flat_map(|i| {
                let s = exponents.get(i, j);
                [
                    log_or_neg_inf(initial.kplus.get(i, j)) - s,
                    log_or_neg_inf(initial.kminus.get(i, j)) + s,
                ]
            })
            .collect();
        let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        *o = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
    }
    Ok(out)
}

fn cumulative_exponent(initial: &WeightState, residuals: &[Mat], etas: &[f64]) -> Result<Mat> {
    if residuals.len() != etas.len() {
        return Err(Error::Shape {
            op: "history",
            left: (residuals.len(), 1),
            right: (etas.len(), 1),
        });
    }
    let (n, labels) = initial.shape();
    let mut s = Mat::zeros(n, labels);
    for (l, &eta) in residuals.iter().zip(etas) {
        initial.check_shape(l, "recompute_from_history")?;
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {eta}")));
        }
        let worst = eta * l.max_abs();
        if worst > EXP_LIMIT {
            return Err(Error::Overflow {
                value: worst,
                limit: EXP_LIMIT,
            });
        }
        for (acc, &v) in s.as_mut_slice().iter_mut().zip(l.as_slice()) {
            *acc += eta * v;
        }
    }
    Ok(s)
}

fn log_or_neg_inf(v: f64) -> f64 {
    if v > 0.0 {
        v.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// `(∇_f F(f, p))_j = Σᵢ p(i,j)·(f − g)(i,j)` for a column-stochastic `p`.
pub fn functional_gradient(p: &Mat, f_logits: &Mat, g_logits: &Mat) -> Result<Vec<f64>> {
    let l = residual(f_logits, g_logits)?;
    if p.shape() != l.shape() {
        return Err(Error::Shape {
            op: "functional_gradient",
            left: p.shape(),
            right: l.shape(),
        });
    }
    for (column, sum) in p.col_sums().into_iter().enumerate() {
        if (sum - 1.0).abs() > STOCHASTIC_TOL || p.col(column).iter().any(|&v| v < 0.0) {
            return Err(Error::NotStochastic { column, sum });
        }
    }
    let mut grad = vec![0.0; p.cols()];
    for i in 0..p.rows() {
        for (j, g) in grad.iter_mut().enumerate() {
            *g += p.get(i, j) * l.get(i, j);
        }
    }
    Ok(grad)
}

/// `⟨u, grad⟩ ≥ alpha·‖u‖·‖grad‖ − beta`, Euclidean norms.
pub fn gwl_check(u: &[f64], grad: &[f64], alpha: f64, beta: f64) -> Result<bool> {
    if u.len() != grad.len() {
        return Err(Error::Shape {
            op: "gwl_check",
            left: (u.len(), 1),
            right: (grad.len(), 1),
        });
    }
    Ok(dot(u, grad) >= alpha * norm(u) * norm(grad) - beta)
}
