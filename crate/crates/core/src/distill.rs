//! The boosting loop that grows an ensemble of students around a teacher.
//!
//! Each round asks a [`WeakLearnerSource`] for a learner from the current
//! class. A hit joins the ensemble and reweights the game state with its
//! residual; a miss expands the class (new members may then tap the hidden
//! activations of the previous member). The loop ends after `rounds` members
//! or once `max_classes` classes have been exhausted.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::findwl::{find_weak_learner, Candidate, FindWlConfig, SearchInput};
use crate::game::{gwl_check, md_update, residual, CheckOutcome, OracleParams, WeightState};
use crate::learner::{expand_class, ActivationCache, ClassSpec, ConnectionKind, LayerSpec, LearnerParams};
use crate::rng::RngStream;
use crate::tensor::Mat;

/// Tolerance on column sums of `K⁺ + K⁻` enforced after every round.
pub const MASS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum EtaMode {
    /// A constant step size.
    Fixed { eta: f64 },
    /// `η = (1/G∞)·sqrt(ln(2N)/T)`.
    Theorem { g_inf: f64 },
}

impl EtaMode {
    pub fn resolve(&self, samples: usize, rounds: usize) -> Result<f64> {
        let eta = match *self {
            EtaMode::Fixed { eta } => eta,
            EtaMode::Theorem { g_inf } => {
                if !(g_inf > 0.0) {
                    return Err(Error::Config("g_inf must be positive".into()));
                }
                theorem_eta(samples, rounds, g_inf)
            }
        };
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {eta}")));
        }
        Ok(eta)
    }
}

pub fn theorem_eta(samples: usize, rounds: usize, g_inf: f64) -> f64 {
    ((2.0 * samples as f64).ln() / rounds as f64).sqrt() / g_inf
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Maximum number of ensemble members (`T`).
    pub rounds: usize,
    /// Number of classes available (`R`); class `r` is the base expanded `r` times.
    pub max_classes: usize,
    pub eta: EtaMode,
    pub edge_tol: f64,
    pub base_class: Vec<LayerSpec>,
    pub connection: ConnectionKind,
    pub findwl: FindWlConfig,
    /// Thresholds for the per-round generalized weak-oracle diagnostic.
    pub oracle: OracleParams,
    pub seed: u64,
}

impl DistillConfig {
    pub fn new(base_class: Vec<LayerSpec>) -> Self {
        Self {
            rounds: 7,
            max_classes: 2,
            eta: EtaMode::Fixed { eta: 1.0 },
            edge_tol: 0.0,
            base_class,
            connection: ConnectionKind::ResidualAdd,
            findwl: FindWlConfig::default(),
            oracle: OracleParams::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.max_classes == 0 {
            return Err(Error::Config(
                "rounds (T) and max_classes (R) must be at least 1".into(),
            ));
        }
        if !(self.edge_tol >= 0.0) {
            return Err(Error::Config("edge_tol must be >= 0".into()));
        }
        ClassSpec::plain(self.base_class.clone())?;
        self.oracle.validate()?;
        self.findwl.validate()
    }
}

/// Everything a source needs to propose the learner for one round.
pub struct RoundContext<'a> {
    /// 1-based round number.
    pub round: usize,
    pub class_r: usize,
    pub class: &'a ClassSpec,
    pub state: &'a WeightState,
    pub input: SearchInput<'a>,
    pub members: &'a [LearnerParams],
    pub edge_tol: f64,
    pub rng: RngStream,
}

/// Supplies weak learners to the loop. Must not return `None` on a degenerate state.
pub trait WeakLearnerSource {
    fn search(&mut self, ctx: &RoundContext<'_>) -> Result<Option<Candidate>>;
}

/// SGD-based search with the barrier-regularized objective.
#[derive(Debug, Clone)]
pub struct SgdSearch {
    pub cfg: FindWlConfig,
}

impl WeakLearnerSource for SgdSearch {
    fn search(&mut self, ctx: &RoundContext<'_>) -> Result<Option<Candidate>> {
        find_weak_learner(ctx.state, ctx.class, ctx.input, &self.cfg, ctx.edge_tol, &ctx.rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub class_r: usize,
    pub outcome: CheckOutcome,
    /// Edge of the accepted learner under the pre-update state.
    pub edge_gamma: Vec<f64>,
    pub z: Vec<f64>,
    pub eta: f64,
    /// Barrier weight of the restart that produced the member.
    pub barrier_gamma: f64,
    pub clamp_count: usize,
    pub train_loss: f64,
    /// `max |f_t − g|` over training rows.
    pub max_abs_residual: f64,
    /// Worst `|Σᵢ K⁺ + K⁻ − 1|` after the update.
    pub mass_error: f64,
    /// Per label: does the residual column satisfy the weak-oracle inequality against `K⁺ − K⁻`?
    pub gwl_ok: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Escalation {
    /// Round whose search failed.
    pub round: usize,
    pub from_class: usize,
    pub to_class: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub rounds: Vec<RoundRecord>,
    pub escalations: Vec<Escalation>,
    /// Set when the loop stopped because every class failed.
    pub exhausted: bool,
}

/// One `(round, label)` line of the history file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub round: usize,
    pub label: usize,
    pub edge_gamma: f64,
    pub z: f64,
    pub eta: f64,
    pub class_r: usize,
    pub clamp_count: usize,
}

impl RunHistory {
    /// Flatten to one row per round and label, rounds outermost.
    pub fn rows(&self) -> Vec<HistoryRow> {
        self.rounds
            .iter()
            .flat_map(|r| {
                (0..r.z.len()).map(move |j| HistoryRow {
                    round: r.round,
                    label: j,
                    edge_gamma: r.edge_gamma[j],
                    z: r.z[j],
                    eta: r.eta,
                    class_r: r.class_r,
                    clamp_count: r.clamp_count,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMeta {
    pub seed: u64,
    pub eta: f64,
    #[serde(rename = "T")]
    pub rounds: usize,
    #[serde(rename = "R")]
    pub max_classes: usize,
    pub teacher_hash: String,
    /// Class index each member was drawn from.
    pub class_r: Vec<usize>,
}

/// Ordered weak learners; prediction is the average of a prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ensemble {
    pub meta: EnsembleMeta,
    pub members: Vec<LearnerParams>,
}

/// SHA-256 of the teacher logits (shape then little-endian values), hex encoded.
pub fn teacher_hash(teacher_logits: &Mat) -> String {
    let mut h = Sha256::new();
    h.update((teacher_logits.rows() as u64).to_le_bytes());
    h.update((teacher_logits.cols() as u64).to_le_bytes());
    for v in teacher_logits.as_slice() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (t, m) in self.members.iter().enumerate() {
            m.validate()?;
            let c = m.connection();
            if c.is_active() {
                let Some(src) = self.members.get(c.source_round).filter(|_| c.source_round < t) else {
                    return Err(Error::Config(format!(
                        "member {t} taps round {} which is not an earlier member",
                        c.source_round
                    )));
                };
                let width = src.class.layers.get(c.source_layer).map(|l| l.out_dim);
                if width != Some(c.width) || c.source_layer + 1 >= src.class.layers.len() {
                    return Err(Error::Config(format!(
                        "member {t} taps layer {} of member {} with width {}, which does not exist",
                        c.source_layer, c.source_round, c.width
                    )));
                }
            }
        }
        Ok(())
    }

    /// Logits of the first `k` members, evaluated in order with their caches.
    pub fn member_logits(&self, x: &Mat, k: usize) -> Result<Vec<Mat>> {
        if k > self.members.len() {
            return Err(Error::Config(format!(
                "prefix {k} exceeds ensemble size {}",
                self.members.len()
            )));
        }
        let mut cache = ActivationCache::new();
        let mut out = Vec::with_capacity(k);
        for (t, m) in self.members.iter().take(k).enumerate() {
            let trace = m.forward(x, &cache)?;
            cache.record(t, &trace);
            out.push(trace.into_logits());
        }
        Ok(out)
    }

    /// Per-example FLOPs of evaluating the first `k` members, counted member by member.
    pub fn prefix_flops(&self, k: usize) -> u64 {
        self.members.iter().take(k).map(LearnerParams::flops).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("ensemble serialization is infallible")
    }

    pub fn from_json(s: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// `(1/k)·Σ_{t≤k} f_t(x)`.
pub fn ensemble_predict(ens: &Ensemble, x: &Mat, k: usize) -> Result<Mat> {
    if k == 0 || k > ens.len() {
        return Err(Error::Config(format!(
            "prefix length must be in 1..={}, got {k}",
            ens.len()
        )));
    }
    let logits = ens.member_logits(x, k)?;
    prefix_average(&logits)
}

pub(crate) fn prefix_average(logits: &[Mat]) -> Result<Mat> {
    let mut sum = logits[0].clone();
    for l in &logits[1..] {
        sum.add_assign(l)?;
    }
    Ok(sum.scale(1.0 / logits.len() as f64))
}

/// Run the loop with the SGD-based weak-learner search.
pub fn run(cfg: &DistillConfig, x: &Mat, teacher_logits: &Mat) -> Result<(Ensemble, RunHistory)> {
    let mut source = SgdSearch {
        cfg: cfg.findwl.clone(),
    };
    run_with(cfg, x, teacher_logits, &mut source)
}

/// Run the loop with any weak-learner source.
pub fn run_with(
    cfg: &DistillConfig,
    x: &Mat,
    teacher_logits: &Mat,
    source: &mut dyn WeakLearnerSource,
) -> Result<(Ensemble, RunHistory)> {
    cfg.validate()?;
    if x.rows() == 0 {
        return Err(Error::Data("empty training set".into()));
    }
    if teacher_logits.rows() != x.rows() {
        return Err(Error::Data(format!(
            "teacher logits have {} rows but the data has {}",
            teacher_logits.rows(),
            x.rows()
        )));
    }
    let (n, labels) = teacher_logits.shape();
    let eta = cfg.eta.resolve(n, cfg.rounds)?;
    let root = RngStream::new(cfg.seed);
    let mut state = WeightState::init_uniform(n, labels)?;
    let mut members: Vec<LearnerParams> = Vec::new();
    let mut class_r_of = Vec::new();
    let mut cache = ActivationCache::new();
    let mut history = RunHistory::default();
    let mut r = 0;

    while members.len() < cfg.rounds && r < cfg.max_classes {
        let round = members.len() + 1;
        let class = expand_class(&cfg.base_class, cfg.connection, r, &members)?;
        let ctx = RoundContext {
            round,
            class_r: r,
            class: &class,
            state: &state,
            input: SearchInput {
                x,
                teacher_logits,
                cache: &cache,
            },
            members: &members,
            edge_tol: cfg.edge_tol,
            rng: root.split(round as u64).split(r as u64),
        };
        let Some(candidate) = source.search(&ctx)? else {
            r += 1;
            if r < cfg.max_classes {
                history.escalations.push(Escalation {
                    round,
                    from_class: r - 1,
                    to_class: r,
                });
            } else {
                history.exhausted = true;
            }
            continue;
        };
        if candidate.outcome == CheckOutcome::Fail {
            return Err(Error::Config(format!(
                "weak-learner source returned a failing candidate in round {round}"
            )));
        }

        let params = candidate.params;
        let trace = params.forward(x, &cache)?;
        let l = residual(trace.logits(), teacher_logits)?;
        let (next, edges) = md_update(&state, &l, eta)?;
        let mass_error = next.check_invariants(MASS_TOL)?;
        let signed = state.signed();
        let gwl_ok = (0..labels)
            .map(|j| gwl_check(&l.col(j), &signed.col(j), cfg.oracle.alpha, cfg.oracle.beta))
            .collect::<Result<Vec<_>>>()?;
        history.rounds.push(RoundRecord {
            round,
            class_r: r,
            outcome: candidate.outcome,
            edge_gamma: edges.edge_gamma,
            z: edges.z,
            eta,
            barrier_gamma: candidate.barrier_gamma,
            clamp_count: candidate.clamp_count,
            train_loss: candidate.loss,
            max_abs_residual: l.max_abs(),
            mass_error,
            gwl_ok,
        });
        cache.record(members.len(), &trace);
        members.push(params);
        class_r_of.push(r);
        state = next;
    }

    let ensemble = Ensemble {
        meta: EnsembleMeta {
            seed: cfg.seed,
            eta,
            rounds: cfg.rounds,
            max_classes: cfg.max_classes,
            teacher_hash: teacher_hash(teacher_logits),
            class_r: class_r_of,
        },
        members,
    };
    Ok((ensemble, history))
}
