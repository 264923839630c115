//! Seeded training loop: Adam with warmup and inverse-square-root decay,
//! linear KL annealing, gradient clipping, checkpoints and loss logs.

mod checkpoint;
mod log;

pub use checkpoint::{checkpoint_load, checkpoint_save, Checkpoint, CHECKPOINT_MAGIC};
pub use log::{LossLog, CSV_HEADER};

use numcore::{ParamStore, Real, Tape};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Batcher;
use crate::error::{Error, Result};
use crate::model::{Graph, Model, PairBatch};
use crate::objectives::{objective_loss, LossBreakdown, LossSettings, Objective, TranslationLanguage};
use crate::seeding::{stream_rng, Domain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub objective: Objective,
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub kl_anneal_steps: u64,
    /// Weight of the source-separation term; the objective's default when unset.
    pub lambda: Option<f64>,
    /// The objective's default when unset.
    pub dropout_rate: Option<f64>,
    /// Drops the KL terms entirely (ablation).
    pub no_kl: bool,
    pub translation_language: TranslationLanguage,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// 0 disables periodic evaluation.
    pub eval_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            objective: Objective::Vmsst,
            steps: 5_000,
            batch_size: 64,
            peak_lr: 0.001,
            warmup_steps: 4_000,
            kl_anneal_steps: 10_000,
            lambda: None,
            dropout_rate: None,
            no_kl: false,
            translation_language: TranslationLanguage::default(),
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(field, msg));
        if self.steps == 0 {
            return bad("steps", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr", format!("{} is not a positive rate", self.peak_lr));
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps", "must be at least 1".into());
        }
        if self.kl_anneal_steps == 0 {
            return bad("kl_anneal_steps", "must be at least 1".into());
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return bad("lambda", format!("{l} is negative or not finite"));
            }
        }
        if let Some(d) = self.dropout_rate {
            if !(0.0..1.0).contains(&d) {
                return bad("dropout_rate", format!("{d} outside [0, 1)"));
            }
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm", format!("{} must be positive", self.clip_norm));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(field, format!("{b} outside [0, 1)"));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps", format!("{} must be positive", self.adam_eps));
        }
        Ok(())
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(self.objective.default_lambda())
    }

    pub fn dropout(&self) -> f64 {
        self.dropout_rate.unwrap_or(self.objective.default_dropout())
    }

    /// KL weight applied at 1-based update `step`.
    pub fn kl_weight(&self, step: u64) -> f64 {
        if self.no_kl {
            0.0
        } else {
            kl_anneal(step, self.kl_anneal_steps)
        }
    }
}

/// `peak · min(step / warmup, √(warmup / step))` for 1-based `step`.
pub fn lr_schedule(step: u64, peak_lr: f64, warmup_steps: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract(
            "learning-rate schedule is 1-based; step 0 given".into(),
        ));
    }
    let (s, w) = (step as f64, warmup_steps as f64);
    Ok(peak_lr * (s / w).min((w / s).sqrt()))
}

/// `min(step / horizon, 1)`.
pub fn kl_anneal(step: u64, kl_anneal_steps: u64) -> f64 {
    if step >= kl_anneal_steps {
        1.0
    } else {
        step as f64 / kl_anneal_steps as f64
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut ParamStore<F>, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = F::from_f64_lossy(max_norm / norm);
        for (_, t) in grads.iter_mut() {
            for x in t.data_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// Adam moments, one pair of tensors per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F: Real> {
    pub m: ParamStore<F>,
    pub v: ParamStore<F>,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let zeros = |p: &ParamStore<F>| {
            let mut out = ParamStore::new();
            for (name, t) in p.iter() {
                out.insert(name.clone(), numcore::Tensor::zeros(t.shape()));
            }
            out
        };
        Adam {
            m: zeros(params),
            v: zeros(params),
        }
    }

    /// One bias-corrected update at 1-based step `t`.
    pub fn update(&mut self, params: &mut ParamStore<F>, grads: &ParamStore<F>, lr: f64, t: u64, cfg: &TrainingConfig) {
        let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.adam_eps);
        let c1 = 1.0 - b1.powf(t as f64);
        let c2 = 1.0 - b2.powf(t as f64);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("gradient for every parameter").data();
            let m = self.m.get_mut(name).expect("moment for every parameter").data_mut();
            let v = self.v.get_mut(name).expect("moment for every parameter").data_mut();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                let g = g.as_f64();
                let mi = b1 * m.as_f64() + (1.0 - b1) * g;
                let vi = b2 * v.as_f64() + (1.0 - b2) * g * g;
                *m = F::from_f64_lossy(mi);
                *v = F::from_f64_lossy(vi);
                let step = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                *p = F::from_f64_lossy(p.as_f64() - step);
            }
        }
    }
}

/// Everything needed to continue training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<F: Real> {
    pub config: TrainingConfig,
    pub model: Model<F>,
    pub adam: Adam<F>,
    /// Updates applied so far.
    pub step: u64,
}

/// One logged update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based update number.
    pub step: u64,
    pub lr: f64,
    pub kl_weight: f64,
    pub grad_norm: f64,
    pub loss: LossBreakdown,
}

impl<F: Real> TrainState<F> {
    pub fn new(config: TrainingConfig, model: Model<F>) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(model.params());
        Ok(TrainState {
            config,
            model,
            adam,
            step: 0,
        })
    }

    /// Evaluates the objective on `batch`, backpropagates and applies one
    /// update. The state is unchanged when the loss or gradient is not finite.
    pub fn train_step(&mut self, batch: &PairBatch) -> Result<StepRecord> {
        let t = self.step + 1;
        let cfg = &self.config;
        let lr = lr_schedule(t, cfg.peak_lr, cfg.warmup_steps)?;
        let kl_weight = cfg.kl_weight(t);
        let settings = LossSettings {
            lambda: cfg.lambda(),
            kl_weight,
            translation_language: cfg.translation_language,
        };
        let mut rng = stream_rng(cfg.seed, Domain::Step, t);
        let dropout_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());

        let mut tape = Tape::new();
        let mut graph = Graph::new(&self.model, &mut tape);
        let rate = cfg.dropout();
        if rate > 0.0 {
            graph = graph.with_dropout(rate, dropout_rng);
        }
        let out = objective_loss(cfg.objective, &mut graph, &mut tape, batch, &mut rng, &settings)?;
        if !out.breakdown.is_finite() {
            return Err(Error::NonFinite {
                step: t,
                breakdown: out.breakdown,
            });
        }
        let grads = tape.backward(out.total)?;
        let mut grads = graph.params().gradients(&tape, &grads);
        drop(graph);
        if !grads.all_finite() {
            return Err(Error::NonFinite {
                step: t,
                breakdown: out.breakdown,
            });
        }
        let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
        let cfg = self.config.clone();
        self.adam.update(self.model.params_mut(), &grads, lr, t, &cfg);
        self.step = t;
        Ok(StepRecord {
            step: t,
            lr,
            kl_weight,
            grad_norm,
            loss: out.breakdown,
        })
    }

    /// Trains until `config.steps` updates have been applied, reading batch
    /// `step` from `batcher` for each update. `on_step` runs after every update
    /// and may stop training early by returning `false`.
    pub fn run<C>(&mut self, batcher: &mut Batcher, mut on_step: C) -> Result<Vec<StepRecord>>
    where
        C: FnMut(&TrainState<F>, &StepRecord) -> Result<bool>,
    {
        let mut records = Vec::new();
        while self.step < self.config.steps {
            let batch = batcher.batch(self.step)?;
            let rec = self.train_step(&batch)?;
            records.push(rec);
            if !on_step(self, &rec)? {
                break;
            }
        }
        Ok(records)
    }
}

/// Smoothed loss curve: mean of `totals` over consecutive windows.
pub fn window_means(totals: &[f64], window: usize) -> Vec<f64> {
    totals
        .chunks(window.max(1))
        .filter(|c| c.len() == window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}
