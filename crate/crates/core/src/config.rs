//! The JSON run configuration read by `bdistil distill`.

use serde::{Deserialize, Serialize};

use crate::distill::{DistillConfig, EtaMode};
use crate::error::{Error, Result};
use crate::findwl::{FindWlConfig, Init, LossMode};
use crate::game::OracleParams;
use crate::learner::{mlp_spec, ConnectionKind};
use crate::train::SgdConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaChoice {
    Fixed,
    Theorem,
}

/// Flat run configuration. Omitted keys take their defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(rename = "T")]
    pub rounds: usize,
    #[serde(rename = "R")]
    pub max_classes: usize,
    pub eta: f64,
    pub eta_mode: EtaChoice,
    /// Required when `eta_mode` is `theorem`.
    pub g_inf: Option<f64>,
    pub edge_tol: f64,
    /// Hidden widths of the base student; input and output widths come from the data.
    pub base_hidden: Vec<usize>,
    pub connection: ConnectionKind,
    pub seed: u64,
    pub barrier_gamma: f64,
    pub barrier_decay: f64,
    pub logit_bound: Option<f64>,
    pub temperature: f64,
    pub max_search: usize,
    pub loss_mode: LossMode,
    pub init: Init,
    pub sgd: SgdConfig,
    pub oracle: OracleParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        let f = FindWlConfig::default();
        Self {
            rounds: 7,
            max_classes: 2,
            eta: 1.0,
            eta_mode: EtaChoice::Fixed,
            g_inf: None,
            edge_tol: 0.0,
            base_hidden: vec![16, 16],
            connection: ConnectionKind::ResidualAdd,
            seed: 0,
            barrier_gamma: f.barrier_gamma,
            barrier_decay: f.barrier_decay,
            logit_bound: f.logit_bound,
            temperature: f.temperature,
            max_search: f.max_search,
            loss_mode: f.loss_mode,
            init: f.init,
            sgd: f.sgd,
            oracle: OracleParams::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.findwl().validate()?;
        cfg.eta_mode()?;
        Ok(cfg)
    }

    pub fn findwl(&self) -> FindWlConfig {
        FindWlConfig {
            barrier_gamma: self.barrier_gamma,
            barrier_decay: self.barrier_decay,
            logit_bound: self.logit_bound,
            temperature: self.temperature,
            max_search: self.max_search,
            loss_mode: self.loss_mode,
            init: self.init,
            sgd: self.sgd.clone(),
        }
    }

    pub fn eta_mode(&self) -> Result<EtaMode> {
        match self.eta_mode {
            EtaChoice::Fixed => Ok(EtaMode::Fixed { eta: self.eta }),
            EtaChoice::Theorem => match self.g_inf {
                Some(g_inf) => Ok(EtaMode::Theorem { g_inf }),
                None => Err(Error::Config("eta_mode `theorem` needs `g_inf`".into())),
            },
        }
    }

    /// The loop configuration for data with `input_dim` features and `labels` logits.
    pub fn distill_config(&self, input_dim: usize, labels: usize) -> Result<DistillConfig> {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(&self.base_hidden);
        widths.push(labels);
        let mut cfg = DistillConfig::new(mlp_spec(&widths)?);
        cfg.rounds = self.rounds;
        cfg.max_classes = self.max_classes;
        cfg.eta = self.eta_mode()?;
        cfg.edge_tol = self.edge_tol;
        cfg.connection = self.connection;
        cfg.findwl = self.findwl();
        cfg.oracle = self.oracle;
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!((cfg.rounds, cfg.max_classes, cfg.eta), (7, 2, 1.0));
        assert_eq!(cfg.sgd, SgdConfig::recipe());
        let d = cfg.distill_config(32, 2).unwrap();
        assert_eq!(d.base_class.len(), 3);
        assert_eq!(d.eta, EtaMode::Fixed { eta: 1.0 });
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_json(r#"{"T": 3, "etaa": 1}"#).unwrap_err().to_string();
        assert!(err.contains("etaa"), "{err}");
        let err = RunConfig::from_json(r#"{"sgd": {"lr": 0.1, "moment": 0.9}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("moment"), "{err}");
    }

    #[test]
    fn theorem_mode_needs_g_inf() {
        assert!(RunConfig::from_json(r#"{"eta_mode": "theorem"}"#).is_err());
        let cfg =
            RunConfig::from_json(r#"{"eta_mode": "theorem", "g_inf": 2.0, "loss_mode": "squared_error"}"#).unwrap();
        assert_eq!(cfg.eta_mode().unwrap(), EtaMode::Theorem { g_inf: 2.0 });
    }
}
