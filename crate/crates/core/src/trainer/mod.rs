//! Deterministic mini-batch training with AdamW, clipping and checkpoints.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};

use std::collections::BTreeMap;
use std::fmt;
use std::ops::ControlFlow;
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_on_graph, init_params, ModelConfig, ModelParams, Vocabulary};
use crate::objective::{build_sequence, objective, token_hits, LossWeights, SequenceLayout};
use crate::seed;
use crate::taskgen::{Dataset, Image};
use crate::tensor::Graph;

/// Training variant: the full objective or one mechanism removed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Full,
    NoSubqLoss,
    NoSubaLoss,
    NoChainAugmentation,
    FinalOnly,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::Full,
        AblationMode::NoSubqLoss,
        AblationMode::NoSubaLoss,
        AblationMode::NoChainAugmentation,
        AblationMode::FinalOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoSubqLoss => "no_subq_loss",
            AblationMode::NoSubaLoss => "no_suba_loss",
            AblationMode::NoChainAugmentation => "no_chain_augmentation",
            AblationMode::FinalOnly => "final_only",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation_mode {s:?}")))
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub lambda_ans: f64,
    pub lambda_final: f64,
    pub augmentation_fraction: f64,
    pub ablation_mode: AblationMode,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Restrict each chain segment's attention to its own step.
    pub strict_conditioning: bool,
    /// Write measured step times into metrics; off keeps metrics reproducible.
    pub record_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            weight_decay: 0.01,
            batch_size: 16,
            max_steps: 3000,
            seed: 0,
            lambda_ans: 0.8,
            lambda_final: 1.0,
            augmentation_fraction: 1.0,
            ablation_mode: AblationMode::Full,
            clip_norm: 1.0,
            strict_conditioning: false,
            record_wallclock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.eps_opt.is_finite() && self.eps_opt > 0.0) {
            return bad(format!("eps_opt must be positive, got {}", self.eps_opt));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.augmentation_fraction) {
            return bad(format!(
                "augmentation_fraction must lie in [0, 1], got {}",
                self.augmentation_fraction
            ));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return bad(format!("clip_norm must be nonnegative, got {}", self.clip_norm));
        }
        self.loss_weights().validate()
    }

    /// Term weights after applying the ablation mode.
    pub fn loss_weights(&self) -> LossWeights {
        let base = LossWeights {
            lambda_sub_q: 1.0,
            lambda_ans: self.lambda_ans,
            lambda_final: self.lambda_final,
        };
        match self.ablation_mode {
            AblationMode::Full | AblationMode::NoChainAugmentation => base,
            AblationMode::NoSubqLoss => LossWeights {
                lambda_sub_q: 0.0,
                ..base
            },
            AblationMode::NoSubaLoss => LossWeights {
                lambda_ans: 0.0,
                ..base
            },
            AblationMode::FinalOnly => LossWeights {
                lambda_sub_q: 0.0,
                lambda_ans: 0.0,
                ..base
            },
        }
    }

    /// Whether example `index` keeps its chain in the training layout.
    pub fn is_augmented(&self, index: usize) -> bool {
        if self.ablation_mode == AblationMode::NoChainAugmentation {
            return false;
        }
        let u = (seed::derive_indexed(self.seed, "augment", index as u64) >> 11) as f64 / (1u64 << 53) as f64;
        u < self.augmentation_fraction
    }
}

/// AdamW moments, keyed like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> = params.iter().map(|(p, t)| (p.clone(), vec![0.0; t.numel()])).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update, in place.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    for (path, t) in params.iter() {
        let g = grads
            .get(path)
            .ok_or_else(|| Error::Validation(format!("no gradient for {path}")))?;
        if g.len() != t.numel() || state.m[path].len() != t.numel() {
            return Err(Error::Shape(format!(
                "{path}: gradient or moment size differs from parameter"
            )));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for {path}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (lr, wd, eps) = (config.learning_rate, config.weight_decay, config.eps_opt);
    for (path, tensor) in params.iter_mut() {
        let g = &grads[path];
        let m = state.m.get_mut(path).expect("checked above");
        let v = state.v.get_mut(path).expect("checked above");
        for (i, p) in tensor.values_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
        }
    }
    Ok(())
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_sub_q: f64,
    pub l_sub_ans: f64,
    pub l_final: f64,
    pub total: f64,
    pub token_acc: f64,
    pub wallclock_ms: u64,
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Example indices of batch `step`; a pure function of its arguments.
pub fn batch_indices(seed: u64, step: usize, n: usize, batch_size: usize) -> Vec<usize> {
    if batch_size >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_indexed(seed, "batch", step as u64));
    index::sample(&mut rng, n, batch_size).into_vec()
}

struct Sample {
    image: Image,
    layout: SequenceLayout,
}

struct ExampleOutcome {
    grads: Vec<Vec<f64>>,
    l_sub_q: f64,
    l_sub_ans: f64,
    l_final: f64,
    total: f64,
    hits: usize,
    count: usize,
}

/// Training state: parameters, optimizer moments, and the prepared corpus.
pub struct Trainer {
    config: TrainConfig,
    params: ModelParams,
    optimizer: OptimizerState,
    samples: Vec<Sample>,
    weights: LossWeights,
    step: usize,
    workers: usize,
    last_metrics: Option<StepMetrics>,
}

impl Trainer {
    /// Fresh parameters from `model_config`.
    pub fn new(config: TrainConfig, model_config: &ModelConfig, dataset: &Dataset, vocab: &Vocabulary) -> Result<Self> {
        let params = init_params(model_config)?;
        let optimizer = OptimizerState::new(&params);
        Self::assemble(config, params, optimizer, 0, None, dataset, vocab)
    }

    /// Continues from a checkpoint on the same dataset.
    pub fn resume(checkpoint: Checkpoint, dataset: &Dataset, vocab: &Vocabulary) -> Result<Self> {
        let Checkpoint {
            params,
            optimizer,
            train_config,
            step,
            metrics,
        } = checkpoint;
        Self::assemble(train_config, params, optimizer, step, metrics, dataset, vocab)
    }

    fn assemble(
        config: TrainConfig,
        params: ModelParams,
        optimizer: OptimizerState,
        step: usize,
        last_metrics: Option<StepMetrics>,
        dataset: &Dataset,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::Validation("training dataset is empty".into()));
        }
        let mc = params.config();
        if vocab.len() > mc.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary of {} tokens exceeds model vocab_size {}",
                vocab.len(),
                mc.vocab_size
            )));
        }
        let samples = dataset
            .examples
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let layout = build_sequence(e, vocab, mc.max_text_len(), config.is_augmented(i))?;
                Ok(Sample {
                    image: e.image.clone(),
                    layout,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let weights = config.loss_weights();
        Ok(Self {
            config,
            params,
            optimizer,
            samples,
            weights,
            step,
            workers: 1,
            last_metrics,
        })
    }

    /// Caps the number of threads computing per-example gradients.
    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    /// Completed optimizer updates.
    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn layouts(&self) -> impl Iterator<Item = &SequenceLayout> {
        self.samples.iter().map(|s| &s.layout)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            train_config: self.config.clone(),
            step: self.step,
            metrics: self.last_metrics.clone(),
        }
    }

    fn example_outcome(&self, index: usize) -> Result<ExampleOutcome> {
        let sample = &self.samples[index];
        let mut g = Graph::new();
        let vars = self.params.attach(&mut g, true)?;
        let layout = &sample.layout;
        let segments = self.config.strict_conditioning.then(|| layout.input_segments());
        let logits = forward_on_graph(
            &mut g,
            &vars,
            self.params.config(),
            &sample.image,
            layout.inputs(),
            segments,
        )?;
        let (total, b) = objective(&mut g, logits, layout, &self.weights)?;
        g.backward(total)?;
        let (hits, count) = token_hits(g.value(logits), self.params.config().vocab_size, layout, &self.weights);
        let grads = vars
            .iter()
            .map(|(_, &v)| g.grad(v).expect("trainable leaf").to_vec())
            .collect();
        Ok(ExampleOutcome {
            grads,
            l_sub_q: b.l_sub_q,
            l_sub_ans: b.l_sub_ans,
            l_final: b.l_final,
            total: b.total,
            hits,
            count,
        })
    }

    fn batch_outcomes(&self, batch: &[usize]) -> Result<Vec<ExampleOutcome>> {
        if self.workers <= 1 || batch.len() <= 1 {
            return batch.iter().map(|&i| self.example_outcome(i)).collect();
        }
        let chunk = batch.len().div_ceil(self.workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|&i| self.example_outcome(i))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut out = Vec::with_capacity(batch.len());
            for h in handles {
                out.extend(h.join().expect("worker panicked")?);
            }
            Ok(out)
        })
    }

    /// Runs one optimizer update and returns its metrics.
    ///
    /// On error the parameters and optimizer state are left untouched.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let started = Instant::now();
        let batch = batch_indices(self.config.seed, self.step, self.samples.len(), self.config.batch_size);
        let outcomes = self.batch_outcomes(&batch)?;

        let scale = 1.0 / outcomes.len() as f64;
        let mut sums = vec![Vec::new(); outcomes[0].grads.len()];
        for (k, grad) in sums.iter_mut().enumerate() {
            *grad = vec![0.0; outcomes[0].grads[k].len()];
        }
        let (mut lq, mut la, mut lf, mut total) = (0.0, 0.0, 0.0, 0.0);
        let (mut hits, mut count) = (0, 0);
        for o in &outcomes {
            for (acc, g) in sums.iter_mut().zip(&o.grads) {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
            lq += o.l_sub_q;
            la += o.l_sub_ans;
            lf += o.l_final;
            total += o.total;
            hits += o.hits;
            count += o.count;
        }
        let mut norm_sq = 0.0;
        for g in sums.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
                norm_sq += *x * *x;
            }
        }
        let grad_norm = norm_sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient norm at step {}",
                self.step
            )));
        }
        let clipped = self.config.clip_norm > 0.0 && grad_norm > self.config.clip_norm;
        if clipped {
            let c = self.config.clip_norm / grad_norm;
            for x in sums.iter_mut().flatten() {
                *x *= c;
            }
        }
        let grads: BTreeMap<String, Vec<f64>> = self.params.iter().map(|(p, _)| p.clone()).zip(sums).collect();
        adamw_step(&mut self.params, &grads, &mut self.optimizer, &self.config)?;

        let metrics = StepMetrics {
            step: self.step,
            l_sub_q: lq * scale,
            l_sub_ans: la * scale,
            l_final: lf * scale,
            total: total * scale,
            token_acc: if count == 0 { 0.0 } else { hits as f64 / count as f64 },
            wallclock_ms: if self.config.record_wallclock {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
            grad_norm,
            clipped,
        };
        self.step += 1;
        self.last_metrics = Some(metrics.clone());
        Ok(metrics)
    }

    /// Steps until `max_steps` or until `hook` breaks.
    pub fn run<F>(&mut self, mut hook: F) -> Result<()>
    where
        F: FnMut(&Trainer, &StepMetrics) -> Result<ControlFlow<()>>,
    {
        while self.step < self.config.max_steps {
            let m = self.step()?;
            if hook(self, &m)?.is_break() {
                break;
            }
        }
        Ok(())
    }

    /// Supervised-token accuracy over the whole training corpus.
    pub fn corpus_token_accuracy(&self) -> Result<f64> {
        let mut hits = 0;
        let mut count = 0;
        for s in &self.samples {
            let mut g = Graph::new();
            let vars = self.params.attach(&mut g, false)?;
            let segments = self.config.strict_conditioning.then(|| s.layout.input_segments());
            let logits = forward_on_graph(
                &mut g,
                &vars,
                self.params.config(),
                &s.image,
                s.layout.inputs(),
                segments,
            )?;
            let (h, c) = token_hits(
                g.value(logits),
                self.params.config().vocab_size,
                &s.layout,
                &self.weights,
            );
            hits += h;
            count += c;
        }
        Ok(if count == 0 { 0.0 } else { hits as f64 / count as f64 })
    }
}

/// Trains from scratch to `config.max_steps`, returning the final checkpoint and every step's metrics.
pub fn train(
    config: TrainConfig,
    dataset: &Dataset,
    model_config: &ModelConfig,
    vocab: &Vocabulary,
) -> Result<(Checkpoint, Vec<StepMetrics>)> {
    let mut trainer = Trainer::new(config, model_config, dataset, vocab)?;
    let mut stream = Vec::new();
    trainer.run(|_, m| {
        stream.push(m.clone());
        Ok(ControlFlow::Continue(()))
    })?;
    Ok((trainer.checkpoint(), stream))
}

/// Serializes a metrics record as one JSON line (without the newline).
pub fn metrics_line(m: &StepMetrics) -> String {
    serde_json::to_string(m).expect("metrics serialize")
}
