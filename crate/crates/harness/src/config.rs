//! Experiment configuration: schema, defaults, validation, and the derived
//! per-config seed.
//!
//! A config file is one JSON document. Unknown keys are errors. Every field
//! has a default, so `{}` is a complete (if heavyweight) experiment. Grid
//! fields are checked against the studied value sets unless `allow_custom`
//! is set, which keeps sweep CSVs comparable across runs.

use flaudit_core::dp::DpParams;
use flaudit_core::model::Optimizer;
use flaudit_core::rng::mix;
use flaudit_core::synth::{GenParams, SubjectSampling};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

/// How the auditor obtains per-subject samples: fresh draws from the subject
/// distributions, or the subjects' actual training records.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessMode {
    DistributionBased,
    ItemBased,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub dim: usize,
    pub sampling: SubjectSampling,
    pub users: usize,
    pub subjects_per_user: usize,
    pub items_per_user: usize,
    /// Candidate subjects per class; members emerge from assignment.
    pub pool_per_class: usize,
    pub hidden: Vec<usize>,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Fraction of users participating each round.
    pub participation: f64,
    pub optimizer: Optimizer,
    pub dp: Option<DpParams>,
    pub access_mode: AccessMode,
    /// Subjects per class whose membership the auditor knows for tuning.
    pub validation_subject_count: usize,
    pub attack_samples_per_subject: usize,
    /// Held-out labeled points for model accuracy.
    pub eval_items: usize,
    pub tune_objective: flaudit_attacks::TuneObjective,
    /// Escape hatch: skip the studied-value-set checks.
    pub allow_custom: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            seed: 1,
            dim: 1000,
            sampling: SubjectSampling::DirichletProcess { alpha: 1.0 },
            users: 10,
            subjects_per_user: 10,
            items_per_user: 10_000,
            pool_per_class: 100,
            hidden: vec![256, 64, 16, 4],
            rounds: 30,
            local_epochs: 1,
            batch_size: 512,
            participation: 1.0,
            optimizer: Optimizer::adam(1e-3),
            dp: None,
            access_mode: AccessMode::DistributionBased,
            validation_subject_count: 25,
            attack_samples_per_subject: 100,
            eval_items: 10_000,
            tune_objective: flaudit_attacks::TuneObjective::F1,
            allow_custom: false,
        }
    }
}

const DIMS: [usize; 4] = [2, 50, 250, 1000];
const USERS: [usize; 2] = [10, 100];
const SUBJECTS_PER_USER: [usize; 3] = [10, 100, 500];
const ITEMS_PER_USER: [usize; 3] = [500, 2000, 10_000];

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(bad("name must be non-empty"));
        }
        if self.dim == 0 || self.users == 0 || self.subjects_per_user == 0 {
            return Err(bad("dim, users, subjects_per_user must be positive"));
        }
        if self.items_per_user == 0 || self.pool_per_class < 2 {
            return Err(bad("items_per_user must be positive and pool_per_class at least 2"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(bad("hidden layer widths must be positive"));
        }
        if self.batch_size == 0 || self.local_epochs == 0 {
            return Err(bad("batch_size and local_epochs must be positive"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(bad("participation must be in (0, 1]"));
        }
        if self.validation_subject_count == 0 {
            return Err(bad("validation_subject_count must be at least 1 per class"));
        }
        if self.attack_samples_per_subject == 0 || self.eval_items == 0 {
            return Err(bad("attack_samples_per_subject and eval_items must be positive"));
        }
        if let SubjectSampling::DirichletProcess { alpha } = self.sampling {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(bad("dirichlet alpha must be positive and finite"));
            }
        }
        if let Some(dp) = &self.dp {
            if !dp.is_off() {
                if !(dp.clip > 0.0) {
                    return Err(bad("dp clip must be positive"));
                }
                if dp.sigma > 0.0 && !dp.clip.is_finite() {
                    return Err(bad("dp noise requires a finite clip"));
                }
                if !(dp.sigma >= 0.0 && dp.sigma.is_finite()) {
                    return Err(bad("dp sigma must be finite and non-negative"));
                }
                if !(dp.delta > 0.0 && dp.delta < 1.0) {
                    return Err(bad("dp delta must be in (0, 1)"));
                }
            }
        }
        if self.allow_custom {
            return Ok(());
        }
        if !DIMS.contains(&self.dim) {
            return Err(bad(format!("dim {} outside studied set {DIMS:?}", self.dim)));
        }
        if !USERS.contains(&self.users) {
            return Err(bad(format!("users {} outside studied set {USERS:?}", self.users)));
        }
        if !SUBJECTS_PER_USER.contains(&self.subjects_per_user) {
            return Err(bad(format!(
                "subjects_per_user {} outside studied set {SUBJECTS_PER_USER:?}",
                self.subjects_per_user
            )));
        }
        if !ITEMS_PER_USER.contains(&self.items_per_user) {
            return Err(bad(format!(
                "items_per_user {} outside studied set {ITEMS_PER_USER:?}",
                self.items_per_user
            )));
        }
        if self.rounds == 0 || self.rounds > 50 {
            return Err(bad(format!("rounds {} outside studied range 1..=50", self.rounds)));
        }
        Ok(())
    }

    /// Canonical encoding: serde JSON of the struct in declaration order.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical encoding; stable across round-trips.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Per-config seed: the master seed and the full canonical encoding are
    /// both absorbed, so grid points get independent streams.
    pub fn effective_seed(&self) -> u64 {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        let mut acc = 0u64;
        for chunk in digest.chunks(8) {
            let mut b = [0u8; 8];
            b.copy_from_slice(chunk);
            acc = mix(acc ^ u64::from_le_bytes(b));
        }
        acc
    }

    pub fn gen_params(&self) -> GenParams {
        GenParams {
            dim: self.dim,
            pool_per_class: self.pool_per_class,
            users: self.users,
            subjects_per_user: self.subjects_per_user,
            items_per_user: self.items_per_user,
            attack_samples_per_subject: self.attack_samples_per_subject,
            eval_items: self.eval_items,
            sampling: self.sampling,
            item_level_attack: self.access_mode == AccessMode::ItemBased,
        }
    }

    pub fn train_config(&self) -> flaudit_core::fed::TrainConfig {
        flaudit_core::fed::TrainConfig {
            rounds: self.rounds,
            participation: self.participation,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            dp: self.dp,
        }
    }

    pub fn mlp_spec(&self) -> flaudit_core::model::MlpSpec {
        flaudit_core::model::MlpSpec { input_dim: self.dim, hidden: self.hidden.clone() }
    }
}
