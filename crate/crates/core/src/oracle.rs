//! A constructed weak-learner source for checking the convergence theory.
//!
//! Inputs are one-hot rows (`x = I_N`), so a single linear layer `N → L` is a
//! lookup table and can realize any logits. Each round the source returns
//! `f = g + l` with `l(i,j) = s(i,j)·G∞·u(i,j)`, where `s` is the sign of
//! `K⁺ − K⁻` (random on ties) and `u ~ U[1/4, 1]`. Every entry then satisfies
//! the hard barrier and `|l| ≤ G∞`.

use crate::distill::{run_with, DistillConfig, Ensemble, EtaMode, RoundContext, RunHistory, WeakLearnerSource};
use crate::error::{Error, Result};
use crate::findwl::Candidate;
use crate::game::{classify_edges, edge};
use crate::learner::{Activation, ConnectionKind, LayerSpec, LearnerParams};
use crate::rng::RngStream;
use crate::tensor::Mat;

/// Smallest relative residual magnitude drawn by [`SignOracle`].
pub const MIN_SCALE: f64 = 0.25;

#[derive(Debug, Clone, Copy)]
pub struct SignOracle {
    pub g_inf: f64,
}

/// A single linear layer whose row `i` output is `logits.row(i)` on one-hot input `e_i`.
pub fn lookup_learner(logits: &Mat) -> Result<LearnerParams> {
    let (n, labels) = logits.shape();
    let class = crate::learner::ClassSpec::plain(vec![LayerSpec::new(n, labels, Activation::Linear)])?;
    LearnerParams::from_parts(class, vec![logits.transpose()], vec![vec![0.0; labels]])
}

impl WeakLearnerSource for SignOracle {
    fn search(&mut self, ctx: &RoundContext<'_>) -> Result<Option<Candidate>> {
        let g = ctx.input.teacher_logits;
        let (n, labels) = g.shape();
        if ctx.input.x != &Mat::identity(n) {
            return Err(Error::Data("the sign oracle needs one-hot inputs".into()));
        }
        let mut rng = ctx.rng;
        let signed = ctx.state.signed();
        let mut l = Mat::zeros(n, labels);
        for i in 0..n {
            for j in 0..labels {
                let d = signed.get(i, j);
                let coin = rng.uniform();
                let scale = rng.uniform_in(MIN_SCALE, 1.0);
                let s = if d < 0.0 || (d == 0.0 && coin < 0.5) { -1.0 } else { 1.0 };
                l.set(i, j, s * self.g_inf * scale);
            }
        }
        let logits = g.add(&l)?;
        let params = lookup_learner(&logits)?;
        let edge_gamma = edge(ctx.state, &l)?;
        Ok(Some(Candidate {
            params,
            logits,
            outcome: classify_edges(ctx.state, &edge_gamma, ctx.edge_tol),
            edge_gamma,
            loss: 0.0,
            restart: 0,
            barrier_gamma: 0.0,
            clamp_count: 0,
        }))
    }
}

/// Teacher logits uniform in `[−2, 2]` for the constructed setting.
pub fn constructed_teacher(n: usize, labels: usize, seed: u64) -> Result<Mat> {
    let mut rng = RngStream::new(seed).split(0);
    Mat::from_vec(n, labels, (0..n * labels).map(|_| rng.uniform_in(-2.0, 2.0)).collect())
}

/// The configuration used for constructed runs: lookup class, no connections,
/// theorem step size, one class.
pub fn constructed_config(n: usize, labels: usize, rounds: usize, g_inf: f64, seed: u64) -> DistillConfig {
    let mut cfg = DistillConfig::new(vec![LayerSpec::new(n, labels, Activation::Linear)]);
    cfg.rounds = rounds;
    cfg.max_classes = 1;
    cfg.eta = EtaMode::Theorem { g_inf };
    cfg.connection = ConnectionKind::None;
    cfg.seed = seed;
    cfg
}

pub struct ConstructedRun {
    pub x: Mat,
    pub teacher_logits: Mat,
    pub ensemble: Ensemble,
    pub history: RunHistory,
}

/// Run the distillation loop with [`SignOracle`] on `n` one-hot rows.
pub fn constructed_run(n: usize, labels: usize, rounds: usize, g_inf: f64, seed: u64) -> Result<ConstructedRun> {
    let x = Mat::identity(n);
    let teacher_logits = constructed_teacher(n, labels, seed)?;
    let cfg = constructed_config(n, labels, rounds, g_inf, seed);
    let (ensemble, history) = run_with(&cfg, &x, &teacher_logits, &mut SignOracle { g_inf })?;
    Ok(ConstructedRun {
        x,
        teacher_logits,
        ensemble,
        history,
    })
}
