//! Multi-horizon MSE training with early stopping, and split evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Adam, AdamConfig, Graph, Tensor, Var};
use crate::data::{Dataset, Standardizer, WindowSample, HORIZONS};
use crate::error::{Result, SemfError};
use crate::metrics::MetricsReport;
use crate::model::{prepare_inputs, ModelConfig, ModelInput, SemfModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Use only the first `n` training windows.
    pub train_limit: Option<usize>,
    /// Stop as soon as validation MSE falls below this value.
    pub target_val_mse: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            batch_size: 32,
            max_epochs: 200,
            patience: 10,
            learning_rate: 1e-3,
            seed: 7,
            train_limit: None,
            target_val_mse: None,
        }
    }
}

const KEYS: [&str; 18] = [
    "seq_len",
    "n_scales",
    "patch_size",
    "image_kind",
    "exo_encoder",
    "fusion",
    "d_model",
    "n_heads",
    "n_layers",
    "dropout",
    "revin_affine",
    "batch_size",
    "max_epochs",
    "patience",
    "learning_rate",
    "seed",
    "train_limit",
    "target_val_mse",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(SemfError::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SemfError::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.train_limit == Some(0) {
            return Err(SemfError::Config("train_limit must be positive".into()));
        }
        Ok(())
    }

    /// One `key=value` line per field, in a fixed order.
    pub fn to_key_values(&self) -> String {
        let m = &self.model;
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let values = [
            m.seq_len.to_string(),
            m.n_scales.to_string(),
            m.patch_size.to_string(),
            m.image_kind.to_string(),
            m.exo_kind.as_str().to_string(),
            m.fusion_kind.as_str().to_string(),
            m.d_model.to_string(),
            m.n_heads.to_string(),
            m.n_layers.to_string(),
            m.dropout.to_string(),
            m.revin_affine.to_string(),
            self.batch_size.to_string(),
            self.max_epochs.to_string(),
            self.patience.to_string(),
            self.learning_rate.to_string(),
            self.seed.to_string(),
            opt(self.train_limit.map(|v| v.to_string())),
            opt(self.target_val_mse.map(|v| v.to_string())),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || SemfError::Config(format!("invalid value `{value}` for `{key}`"));
        let int = || value.parse::<usize>().map_err(|_| bad());
        let float = || value.parse::<f64>().map_err(|_| bad());
        let m = &mut self.model;
        match key {
            "seq_len" => m.seq_len = int()?,
            "n_scales" => m.n_scales = int()?,
            "patch_size" => m.patch_size = int()?,
            "image_kind" => m.image_kind = value.parse()?,
            "exo_encoder" => m.exo_kind = value.parse()?,
            "fusion" => m.fusion_kind = value.parse()?,
            "d_model" => m.d_model = int()?,
            "n_heads" => m.n_heads = int()?,
            "n_layers" => m.n_layers = int()?,
            "dropout" => m.dropout = float()?,
            "revin_affine" => m.revin_affine = value.parse().map_err(|_| bad())?,
            "n_exo" => m.n_exo = int()?,
            "batch_size" => self.batch_size = int()?,
            "max_epochs" => self.max_epochs = int()?,
            "patience" => self.patience = int()?,
            "learning_rate" => self.learning_rate = float()?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "train_limit" => self.train_limit = if value == "none" { None } else { Some(int()?) },
            "target_val_mse" => self.target_val_mse = if value == "none" { None } else { Some(float()?) },
            _ => return Err(SemfError::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`; blank lines and `#` comments are skipped.
    pub fn merge_key_values(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| SemfError::Parse {
                line: i as u64 + 1,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_key_values(text)?;
        Ok(cfg)
    }
}

/// Mean over rows and horizons of squared error.
pub fn mse_multi_horizon(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(SemfError::shape("mse_multi_horizon", g.shape(pred), g.shape(target)));
    }
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

pub fn mse(pred: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64> {
    if pred.len() != target.len() || pred.iter().zip(target).any(|(a, b)| a.len() != b.len()) {
        return Err(SemfError::shape("mse", &[pred.len()], &[target.len()]));
    }
    let n: usize = pred.iter().map(|r| r.len()).sum();
    if n == 0 {
        return Err(SemfError::contract("mse of an empty batch"));
    }
    let total: f64 = pred
        .iter()
        .zip(target)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
}

impl TrainingLog {
    pub fn best_val_mse(&self) -> f64 {
        self.epochs[self.best_epoch - 1].val_mse
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_mse,val_mse\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{}", e.epoch, e.train_mse, e.val_mse);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: SemfModel,
    pub log: TrainingLog,
}

fn graph_seed(seed: u64, epoch: usize, sample: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [epoch as u64, sample as u64] {
        h = (h ^ v).wrapping_mul(0x100_0000_01b3).rotate_left(29);
    }
    h
}

fn target_rows(samples: &[WindowSample]) -> Vec<Vec<f64>> {
    samples.iter().map(|s| s.targets.clone()).collect()
}

/// Standardized-scale MSE of evaluation-mode predictions.
pub fn eval_mse(model: &SemfModel, inputs: &[ModelInput], targets: &[Vec<f64>]) -> Result<f64> {
    let preds = inputs.iter().map(|x| model.predict(x)).collect::<Result<Vec<_>>>()?;
    mse(&preds, targets)
}

/// Trains on the dataset's train split, early-stopping on the validation split.
/// The test split is never read.
pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainOutcome> {
    if cfg.model.seq_len != ds.seq_len() || cfg.model.n_exo != ds.n_exogenous() {
        return Err(SemfError::Config(format!(
            "model expects seq_len {} with {} exogenous columns; dataset has {} and {}",
            cfg.model.seq_len,
            cfg.model.n_exo,
            ds.seq_len(),
            ds.n_exogenous()
        )));
    }
    fit(cfg, ds.train(), ds.val())
}

/// Training loop over explicit sample sets. `train_limit` keeps a prefix of `train`.
pub fn fit(cfg: &TrainConfig, train: &[WindowSample], val: &[WindowSample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = &train[..cfg.train_limit.unwrap_or(train.len()).min(train.len())];
    if train.is_empty() || val.is_empty() {
        return Err(SemfError::contract("training needs non-empty train and validation splits"));
    }
    let train_inputs = prepare_inputs(&cfg.model, train)?;
    let val_inputs = prepare_inputs(&cfg.model, val)?;
    let train_targets = target_rows(train);
    let val_targets = target_rows(val);

    let mut model = SemfModel::new(cfg.model, cfg.seed)?;
    let mut adam = Adam::new(
        &model.store,
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best_values = model.store.values();
    let mut best = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut epochs = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut g = Graph::training(graph_seed(cfg.seed, epoch, i));
                let pred = model.forward(&mut g, &train_inputs[i])?;
                let target = g.constant(Tensor::new(vec![1, train_targets[i].len()], train_targets[i].clone())?)?;
                let loss = mse_multi_horizon(&mut g, pred, target)?;
                total += g.value(loss).data()[0];
                let scaled = g.scale(loss, scale)?;
                g.backward(scaled)?;
                g.accumulate_param_grads(&mut model.store);
            }
            adam.step(&mut model.store)?;
        }
        let train_mse = total / train.len() as f64;
        let val_mse = eval_mse(&model, &val_inputs, &val_targets)?;
        if !train_mse.is_finite() || !val_mse.is_finite() {
            return Err(SemfError::Divergence {
                epoch,
                reason: format!("train_mse={train_mse} val_mse={val_mse}"),
            });
        }
        log::info!("epoch {epoch}: train_mse={train_mse:.6} val_mse={val_mse:.6}");
        epochs.push(EpochLog { epoch, train_mse, val_mse });
        if val_mse < best {
            best = val_mse;
            best_epoch = epoch;
            best_values = model.store.values();
            since_best = 0;
        } else {
            since_best += 1;
        }
        if cfg.target_val_mse.is_some_and(|t| val_mse < t) || since_best >= cfg.patience {
            break;
        }
    }
    model.store.load_values(best_values)?;
    Ok(TrainOutcome {
        model,
        log: TrainingLog { epochs, best_epoch },
    })
}

/// Price-scale metrics of `model` on `samples`.
pub fn evaluate(model: &SemfModel, samples: &[WindowSample], standardizer: &Standardizer) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(SemfError::contract("cannot evaluate an empty split"));
    }
    let inputs = prepare_inputs(&model.config, samples)?;
    let mut y = Vec::with_capacity(samples.len());
    let mut yhat = Vec::with_capacity(samples.len());
    for (s, x) in samples.iter().zip(&inputs) {
        yhat.push(model.predict_horizons(x, Some(standardizer))?.destandardized);
        y.push(s.raw_targets.clone());
    }
    let horizons: Vec<usize> = if model.config.n_horizons == HORIZONS.len() {
        HORIZONS.to_vec()
    } else {
        (1..=model.config.n_horizons).collect()
    };
    MetricsReport::from_predictions(&y, &yhat, &horizons)
}
