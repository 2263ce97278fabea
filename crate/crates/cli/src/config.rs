//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use selfq_core::model::ModelConfig;
use selfq_core::seed;
use selfq_core::taskgen::{DataConfig, K_MAX};
use selfq_core::trainer::{AblationMode, TrainConfig};

/// Everything a run depends on. Sub-seeds are derived from `seed` by fixed labels.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub n_train: usize,
    pub n_eval: usize,
    pub depth_mix: Vec<f64>,
    pub k_max: usize,
    pub n_seeds: usize,
    pub checkpoint_every: usize,
    pub data_dir: PathBuf,
    pub ckpt_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            n_train: 4000,
            n_eval: 1000,
            depth_mix: vec![1.0; K_MAX],
            k_max: K_MAX,
            n_seeds: 5,
            checkpoint_every: 100,
            data_dir: "data".into(),
            ckpt_dir: "checkpoints".into(),
            report_dir: "reports".into(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("{key}: cannot parse {value:?}"))
}

fn list(key: &str, value: &str) -> Result<Vec<f64>, String> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses a config file; later lines override earlier ones.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| format!("line {}: {e}", n + 1))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "seed" => self.seed = num(key, value)?,
            "d_model" => m.d_model = num(key, value)?,
            "n_layers" => m.n_layers = num(key, value)?,
            "n_heads" => m.n_heads = num(key, value)?,
            "vocab_size" => m.vocab_size = num(key, value)?,
            "image_side" => m.image_side = num(key, value)?,
            "channels" => m.channels = num(key, value)?,
            "patch_size" => m.patch_size = num(key, value)?,
            "max_seq_len" => m.max_seq_len = num(key, value)?,
            "learning_rate" => t.learning_rate = num(key, value)?,
            "beta1" => t.beta1 = num(key, value)?,
            "beta2" => t.beta2 = num(key, value)?,
            "eps_opt" => t.eps_opt = num(key, value)?,
            "weight_decay" => t.weight_decay = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "max_steps" => t.max_steps = num(key, value)?,
            "lambda_ans" => t.lambda_ans = num(key, value)?,
            "lambda_final" => t.lambda_final = num(key, value)?,
            "augmentation_fraction" => t.augmentation_fraction = num(key, value)?,
            "ablation_mode" => t.ablation_mode = AblationMode::from_name(value).map_err(|e| e.to_string())?,
            "clip_norm" => t.clip_norm = num(key, value)?,
            "strict_conditioning" => t.strict_conditioning = num(key, value)?,
            "record_wallclock" => t.record_wallclock = num(key, value)?,
            "n_train" => self.n_train = num(key, value)?,
            "n_eval" => self.n_eval = num(key, value)?,
            "depth_mix" => self.depth_mix = list(key, value)?,
            "k_max" => self.k_max = num(key, value)?,
            "n_seeds" => self.n_seeds = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "data_dir" => self.data_dir = value.into(),
            "ckpt_dir" => self.ckpt_dir = value.into(),
            "report_dir" => self.report_dir = value.into(),
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Effective configuration in the same format `parse` reads.
    pub fn render(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("d_model", m.d_model.to_string());
        kv("n_layers", m.n_layers.to_string());
        kv("n_heads", m.n_heads.to_string());
        kv("vocab_size", m.vocab_size.to_string());
        kv("image_side", m.image_side.to_string());
        kv("channels", m.channels.to_string());
        kv("patch_size", m.patch_size.to_string());
        kv("max_seq_len", m.max_seq_len.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("eps_opt", t.eps_opt.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("max_steps", t.max_steps.to_string());
        kv("lambda_ans", t.lambda_ans.to_string());
        kv("lambda_final", t.lambda_final.to_string());
        kv("augmentation_fraction", t.augmentation_fraction.to_string());
        kv("ablation_mode", t.ablation_mode.name().to_string());
        kv("clip_norm", t.clip_norm.to_string());
        kv("strict_conditioning", t.strict_conditioning.to_string());
        kv("record_wallclock", t.record_wallclock.to_string());
        kv("n_train", self.n_train.to_string());
        kv("n_eval", self.n_eval.to_string());
        kv("depth_mix", join(&self.depth_mix));
        kv("k_max", self.k_max.to_string());
        kv("n_seeds", self.n_seeds.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv("ckpt_dir", self.ckpt_dir.display().to_string());
        kv("report_dir", self.report_dir.display().to_string());
        s
    }

    /// Checks every owning module's ranges.
    pub fn validate(&self) -> selfq_core::Result<()> {
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.data_config(self.n_train, "train").validate()?;
        if self.n_train == 0 || self.n_eval == 0 || self.n_seeds == 0 || self.checkpoint_every == 0 {
            return Err(selfq_core::Error::Config(
                "n_train, n_eval, n_seeds and checkpoint_every must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: seed::derive(self.seed, "model"),
            ..self.model.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: seed::derive(self.seed, "trainer"),
            ..self.train.clone()
        }
    }

    pub fn data_config(&self, n_examples: usize, id_prefix: &str) -> DataConfig {
        DataConfig {
            n_examples,
            k_max: self.k_max,
            depth_mix: self.depth_mix.clone(),
            image_side: self.model.image_side,
            id_prefix: id_prefix.into(),
        }
    }

    /// Seed of the `split` dataset ("train-data" or "eval-data").
    pub fn data_seed(&self, split: &str) -> u64 {
        seed::derive(self.seed, split)
    }

    pub fn ablation_seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|i| self.seed + i).collect()
    }
}
