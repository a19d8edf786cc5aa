//! Estimator training against the frozen target model.

use alloc::vec::Vec;

use crate::array::RealArray;
use crate::corpus::{BatchSampler, Chunk, TokenSequence};
use crate::error::{invalid, Error, Result};
use crate::eval::{quick_probe, UtilityMetrics};
use crate::lm::TargetModel;
use crate::losses::{total_loss, LossBreakdown, LossConfig, ObjectiveInputs};
use crate::optim::{clip_global_norm, Decay, LrSchedule, Optimizer, OptimizerKind};
use crate::real::Real;
use crate::rng::{gaussian_draw, RngStream};
use crate::sgt::SgtEstimator;
use crate::tape::Tape;

/// Stream ids derived from the run seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const BATCH: u64 = 1;
    pub const CROSS_BATCH: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const PROBE: u64 = 4;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub decay: Decay,
    pub min_lr_frac: f64,
    pub optimizer: OptimizerKind,
    pub loss: LossConfig,
    /// Fraction of steps over which the MI weight ramps linearly from 0.
    pub alpha_warmup_frac: f64,
    pub clip: f64,
    /// Probe cadence in steps; 0 probes only at the start and the end.
    pub probe_every: usize,
    pub probe_tokens: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2_000,
            batch_size: 8,
            lr: 3e-4,
            warmup_frac: 0.0,
            decay: Decay::Cosine,
            min_lr_frac: 0.0,
            optimizer: OptimizerKind::default(),
            loss: LossConfig::default(),
            alpha_warmup_frac: 0.1,
            clip: 1.0,
            probe_every: 200,
            probe_tokens: 512,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch size must be at least 2 so a second, independent batch exists".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.clip > 0.0) {
            return Err(Error::Config("learning rate and clip norm must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || !(0.0..=1.0).contains(&self.alpha_warmup_frac) {
            return Err(Error::Config("warm-up fractions must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.min_lr_frac) {
            return Err(Error::Config("min_lr_frac must lie in [0, 1]".into()));
        }
        self.loss.validate()
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            warmup_steps: (self.steps as f64 * self.warmup_frac) as usize,
            total_steps: self.steps,
            decay: self.decay,
            min_frac: self.min_lr_frac,
        }
    }

    /// Effective MI weight at `step`.
    pub fn alpha_mi(&self, step: usize) -> f64 {
        let ramp = (self.steps as f64 * self.alpha_warmup_frac) as usize;
        if ramp == 0 {
            self.loss.alpha_mi
        } else {
            self.loss.alpha_mi * ((step + 1) as f64 / ramp as f64).min(1.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub alpha_mi: f64,
    pub grad_norm: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeLog {
    /// Number of optimizer steps taken before the probe.
    pub step: usize,
    pub nn_fr: f64,
    pub utility: UtilityMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainEvent {
    Step(StepLog),
    Probe(ProbeLog),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F = f32> {
    /// Final estimator, or the last one with finite loss and parameters
    /// when training diverged.
    pub estimator: SgtEstimator<F>,
    pub steps_completed: usize,
    pub divergence: Option<Error>,
}

fn index_sequences(n: usize) -> Result<Vec<TokenSequence>> {
    (0..n).map(|i| TokenSequence::new(alloc::vec![i], n, 1)).collect()
}

fn stacked_ids(chunks: &[Chunk], picked: &[TokenSequence]) -> Vec<usize> {
    picked
        .iter()
        .flat_map(|s| chunks[s.ids()[0]].seq.ids().iter().copied())
        .collect()
}

/// Trains `est` on `train` chunks against the frozen `target`. Every step
/// draws the main batch and the cross batch from distinct streams. Probes
/// run before the first step, every `probe_every` steps and after the last.
pub fn train_sgt<F: Real>(
    target: &TargetModel<F>,
    mut est: SgtEstimator<F>,
    train: &[Chunk],
    probe: &[Chunk],
    cfg: &TrainConfig,
    on_event: &mut dyn FnMut(TrainEvent),
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    if !target.is_frozen() {
        return Err(invalid!("target model must be frozen before estimator training"));
    }
    if train.is_empty() {
        return Err(Error::EmptyInput);
    }
    let t = train[0].seq.len();
    if train.iter().any(|c| c.seq.len() != t) {
        return Err(invalid!("training chunks must share one length"));
    }
    let table = target.embedding_table()?;
    let norm_target = table.median_norm();
    let index = index_sequences(train.len())?;
    let with_replacement = cfg.batch_size > train.len();
    let mut batches = BatchSampler::new(index.clone(), cfg.batch_size, with_replacement, RngStream::new(cfg.seed, streams::BATCH))?;
    let mut cross = BatchSampler::new(index, cfg.batch_size, with_replacement, RngStream::new(cfg.seed, streams::CROSS_BATCH))?;
    let mut noise_stream = RngStream::new(cfg.seed, streams::NOISE);
    let probe_stream = RngStream::new(cfg.seed, streams::PROBE);
    let sched = cfg.schedule();
    let mut opt = Optimizer::new(cfg.optimizer, est.params());

    let do_probe = |est: &SgtEstimator<F>, step: usize, on_event: &mut dyn FnMut(TrainEvent)| -> Result<()> {
        if probe.is_empty() || cfg.probe_tokens == 0 {
            return Ok(());
        }
        let (nn_fr, utility) = quick_probe(est, target, probe, cfg.probe_tokens, &probe_stream)?;
        on_event(TrainEvent::Probe(ProbeLog { step, nn_fr, utility }));
        Ok(())
    };
    do_probe(&est, 0, on_event)?;

    for step in 0..cfg.steps {
        let ids = stacked_ids(train, &batches.next_batch());
        let cross_ids = stacked_ids(train, &cross.next_batch());
        let clean = table.embed(&ids)?;
        let cross_clean = table.embed(&cross_ids)?;
        let noise: RealArray<F> = gaussian_draw(&mut noise_stream, clean.shape());
        let inputs = ObjectiveInputs {
            clean,
            noise,
            cross_clean,
            seq_len: t,
            norm_target,
        };
        let alpha_mi = cfg.alpha_mi(step);
        let mut tape = Tape::new();
        let vars = est.params().bind(&mut tape, true);
        let obj = total_loss(&mut tape, target, &est, &vars, &inputs, &cfg.loss, alpha_mi)?;
        if !obj.breakdown.all_finite() {
            return Ok(TrainOutcome {
                estimator: est,
                steps_completed: step,
                divergence: Some(Error::Divergence {
                    step,
                    reason: "non-finite loss".into(),
                }),
            });
        }
        let mut grads = tape.backward(obj.total);
        let mut g: Vec<Option<RealArray<F>>> = vars.iter().map(|v| grads.take(*v)).collect();
        let grad_norm = clip_global_norm(&mut g, cfg.clip);
        if !grad_norm.is_finite() {
            return Ok(TrainOutcome {
                estimator: est,
                steps_completed: step,
                divergence: Some(Error::Divergence {
                    step,
                    reason: "non-finite gradient".into(),
                }),
            });
        }
        let lr = sched.rate(step);
        let before = est.params().clone();
        opt.step(est.params_mut(), &g, lr)?;
        if !est.params().all_finite() {
            est.params_mut().assign(&before)?;
            return Ok(TrainOutcome {
                estimator: est,
                steps_completed: step,
                divergence: Some(Error::Divergence {
                    step,
                    reason: "non-finite parameters after update".into(),
                }),
            });
        }
        on_event(TrainEvent::Step(StepLog {
            step,
            lr,
            alpha_mi,
            grad_norm,
            loss: obj.breakdown,
        }));
        let done = step + 1;
        if done == cfg.steps || (cfg.probe_every > 0 && done % cfg.probe_every == 0) {
            do_probe(&est, done, on_event)?;
        }
    }
    Ok(TrainOutcome {
        estimator: est,
        steps_completed: cfg.steps,
        divergence: None,
    })
}
