//! Run configuration: a TOML file with one table per pipeline stage.
//!
//! Every table and key is optional; missing values take the defaults of the
//! core crate. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sgt_core::eval::EvalConfig;
use sgt_core::lm::{LmConfig, PretrainConfig};
use sgt_core::losses::{Demonstrative, LossConfig, MiPairing};
use sgt_core::optim::{Decay, OptimizerKind};
use sgt_core::sgt::SgtConfig;
use sgt_core::train::TrainConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub sgt: SgtSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            sgt: SgtSection::default(),
            train: TrainSection::default(),
            loss: LossSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerKind {
    Byte,
    Whitespace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub tokenizer: TokenizerKind,
    pub context: usize,
    /// Every n-th chunk (by chunk id) is held out for evaluation.
    pub eval_every: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerKind::Byte,
            context: 32,
            eval_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 32,
            layers: 2,
            heads: 4,
            ff_mult: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerName {
    Adam,
    SgdMomentum,
}

impl OptimizerName {
    fn kind(self) -> OptimizerKind {
        match self {
            OptimizerName::Adam => OptimizerKind::default(),
            OptimizerName::SgdMomentum => OptimizerKind::SgdMomentum { momentum: 0.9 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub clip: f64,
    pub optimizer: OptimizerName,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            warmup_frac: d.warmup_frac,
            clip: d.clip,
            optimizer: OptimizerName::Adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgtSection {
    /// Trunk width; 0 picks `max(d_model, 8)`.
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub causal: bool,
    pub sigma_min_rel: f64,
    pub sigma_max_rel: f64,
    pub sigma_init_rel: f64,
    pub mean_init_std: f64,
}

impl Default for SgtSection {
    fn default() -> Self {
        let d = SgtConfig::for_embeddings(32, 1.0, 32);
        Self {
            width: 0,
            layers: d.layers,
            heads: d.heads,
            ff_mult: d.ff_mult,
            causal: d.causal,
            sigma_min_rel: d.sigma_min_rel,
            sigma_max_rel: d.sigma_max_rel,
            sigma_init_rel: d.sigma_init_rel,
            mean_init_std: d.mean_init_std,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecayName {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub decay: DecayName,
    pub min_lr_frac: f64,
    pub optimizer: OptimizerName,
    pub alpha_warmup_frac: f64,
    pub clip: f64,
    pub probe_every: usize,
    pub probe_tokens: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            steps: d.steps,
            batch_size: d.batch_size,
            lr: d.lr,
            warmup_frac: d.warmup_frac,
            decay: DecayName::Cosine,
            min_lr_frac: d.min_lr_frac,
            optimizer: OptimizerName::Adam,
            alpha_warmup_frac: d.alpha_warmup_frac,
            clip: d.clip,
            probe_every: d.probe_every,
            probe_tokens: d.probe_tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DemonstrativeName {
    Off,
    CompEntropy,
    CosSim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairingName {
    Elementwise,
    DoubleSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub alpha_mi: f64,
    pub alpha_abscos: f64,
    pub alpha_norm: f64,
    pub demonstrative: DemonstrativeName,
    pub demonstrative_weight: f64,
    pub pairing: PairingName,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossConfig::default();
        Self {
            alpha_mi: d.alpha_mi,
            alpha_abscos: d.alpha_abscos,
            alpha_norm: d.alpha_norm,
            demonstrative: DemonstrativeName::Off,
            demonstrative_weight: d.demonstrative_weight,
            pairing: PairingName::Elementwise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub tokens: usize,
    pub calibration_tokens: usize,
    pub mi_samples: usize,
    pub mi_components: usize,
    pub ttr_ks: Vec<usize>,
    pub sym_ks: Vec<usize>,
    pub pac_n: Option<u64>,
    pub dp_delta: f64,
    pub sigmas: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalConfig::default();
        Self {
            tokens: d.tokens,
            calibration_tokens: d.calibration_tokens,
            mi_samples: d.mi_samples,
            mi_components: d.mi_components,
            ttr_ks: d.ttr_ks,
            sym_ks: d.sym_ks,
            pac_n: d.pac_n,
            dp_delta: 1e-5,
            sigmas: vec![0.0, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.data.eval_every < 2 {
            return Err(CliError::Config("data.eval_every must be at least 2".into()));
        }
        if !(self.eval.dp_delta > 0.0 && self.eval.dp_delta < 1.0) {
            return Err(CliError::Config("eval.dp_delta must lie in (0, 1)".into()));
        }
        self.lm_config(2).validate()?;
        self.pretrain_config().validate()?;
        self.train_config().validate()?;
        Ok(())
    }

    pub fn lm_config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            vocab_size: vocab_size.max(1),
            d_model: self.model.d_model,
            layers: self.model.layers,
            heads: self.model.heads,
            context: self.data.context,
            ff_mult: self.model.ff_mult,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr: p.lr,
            warmup_frac: p.warmup_frac,
            clip: p.clip,
            optimizer: p.optimizer.kind(),
        }
    }

    /// Estimator shape for a target with embedding width `d_model` and
    /// median token norm `median_norm`.
    pub fn sgt_config(&self, d_model: usize, median_norm: f64, context: usize) -> SgtConfig {
        let s = &self.sgt;
        let mut c = SgtConfig::for_embeddings(d_model, median_norm, context);
        if s.width > 0 {
            c.width = s.width;
        }
        c.layers = s.layers;
        c.heads = s.heads;
        c.ff_mult = s.ff_mult;
        c.causal = s.causal;
        c.sigma_min_rel = s.sigma_min_rel;
        c.sigma_max_rel = s.sigma_max_rel;
        c.sigma_init_rel = s.sigma_init_rel;
        c.mean_init_std = s.mean_init_std;
        c
    }

    pub fn loss_config(&self) -> LossConfig {
        let l = &self.loss;
        LossConfig {
            alpha_mi: l.alpha_mi,
            alpha_abscos: l.alpha_abscos,
            alpha_norm: l.alpha_norm,
            demonstrative: match l.demonstrative {
                DemonstrativeName::Off => Demonstrative::Off,
                DemonstrativeName::CompEntropy => Demonstrative::CompEntropy,
                DemonstrativeName::CosSim => Demonstrative::CosSim,
            },
            demonstrative_weight: l.demonstrative_weight,
            pairing: match l.pairing {
                PairingName::Elementwise => MiPairing::Elementwise,
                PairingName::DoubleSum => MiPairing::DoubleSum,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            warmup_frac: t.warmup_frac,
            decay: match t.decay {
                DecayName::Constant => Decay::Constant,
                DecayName::Cosine => Decay::Cosine,
            },
            min_lr_frac: t.min_lr_frac,
            optimizer: t.optimizer.kind(),
            loss: self.loss_config(),
            alpha_warmup_frac: t.alpha_warmup_frac,
            clip: t.clip,
            probe_every: t.probe_every,
            probe_tokens: t.probe_tokens,
            seed: self.seed,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        let e = &self.eval;
        EvalConfig {
            tokens: e.tokens,
            calibration_tokens: e.calibration_tokens,
            mi_samples: e.mi_samples,
            mi_components: e.mi_components,
            ttr_ks: e.ttr_ks.clone(),
            sym_ks: e.sym_ks.clone(),
            pac_n: e.pac_n,
            ..EvalConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train_config().steps, TrainConfig::default().steps);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[train]\nstpes = 3\n").is_err());
        assert!(RunConfig::parse("[trian]\nsteps = 3\n").is_err());
        assert!(RunConfig::parse("sede = 1\n").is_err());
    }

    #[test]
    fn sections_map_onto_core_configs() {
        let c = RunConfig::parse(
            "seed = 7\n[loss]\nalpha_mi = 0.5\ndemonstrative = \"cos-sim\"\npairing = \"double-sum\"\n[train]\nsteps = 10\ndecay = \"constant\"\noptimizer = \"sgd-momentum\"\n",
        )
        .unwrap();
        let t = c.train_config();
        assert_eq!(t.seed, 7);
        assert_eq!(t.steps, 10);
        assert_eq!(t.decay, Decay::Constant);
        assert_eq!(t.loss.alpha_mi, 0.5);
        assert_eq!(t.loss.demonstrative, Demonstrative::CosSim);
        assert_eq!(t.loss.pairing, MiPairing::DoubleSum);
        assert!(matches!(t.optimizer, OptimizerKind::SgdMomentum { .. }));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(RunConfig::parse("[train]\nbatch_size = 1\n").is_err());
        assert!(RunConfig::parse("[model]\nheads = 3\n").is_err());
        assert!(RunConfig::parse("[eval]\ndp_delta = 1.5\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.seed = 3;
        c.loss.demonstrative = DemonstrativeName::CompEntropy;
        c.eval.pac_n = Some(128);
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }
}
