//! The assembled forecaster: image encoder, exogenous encoder, fusion, head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{checkpoint, Graph, ParamStore, Tensor, Var};
use crate::data::{Standardizer, WindowSample, HORIZONS};
use crate::encoders::{pad_to_multiple, patchify, revin_normalize, ExoConfig, ExoEncoder, ExoEncoderKind, VitConfig, VitEncoder};
use crate::error::{Result, SemfError};
use crate::fusion::{destandardize, Fusion, FusionKind, HorizonPrediction, PredictionHead};
use crate::timefreq::{render_image, ImageConfig, ImageKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub n_scales: usize,
    pub patch_size: usize,
    pub image_kind: ImageKind,
    pub exo_kind: ExoEncoderKind,
    pub fusion_kind: FusionKind,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub dropout: f64,
    pub revin_affine: bool,
    pub n_exo: usize,
    pub n_horizons: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seq_len: 120,
            n_scales: 128,
            patch_size: 8,
            image_kind: ImageKind::Morlet,
            exo_kind: ExoEncoderKind::Transformer,
            fusion_kind: FusionKind::Bi,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            dropout: 0.1,
            revin_affine: false,
            n_exo: 10,
            n_horizons: HORIZONS.len(),
        }
    }
}

const KINDS: [ImageKind; 4] = ImageKind::ALL;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("seq_len", self.seq_len),
            ("n_scales", self.n_scales),
            ("patch_size", self.patch_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_exo", self.n_exo),
            ("n_horizons", self.n_horizons),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(SemfError::Config(format!("{name} must be positive")));
        }
        if self.seq_len < 2 || self.n_scales < 2 {
            return Err(SemfError::Config("seq_len and n_scales must be at least 2".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(SemfError::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(SemfError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn image_config(&self) -> ImageConfig {
        ImageConfig::with_kind(self.image_kind, self.n_scales)
    }

    /// Image shape after zero-padding to the patch grid.
    pub fn padded_shape(&self) -> (usize, usize) {
        let p = self.patch_size;
        (self.n_scales.div_ceil(p) * p, self.seq_len.div_ceil(p) * p)
    }

    pub fn vit(&self) -> VitConfig {
        VitConfig {
            patch_size: self.patch_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            image_shape: self.padded_shape(),
            dropout: self.dropout,
        }
    }

    pub fn exo(&self) -> ExoConfig {
        ExoConfig {
            n_vars: self.n_exo,
            seq_len: self.seq_len,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            revin_affine: self.revin_affine,
            dropout: self.dropout,
        }
    }

    fn to_tensor(self) -> Tensor {
        let image = KINDS.iter().position(|k| *k == self.image_kind).expect("known kind") as f64;
        let exo = match self.exo_kind {
            ExoEncoderKind::Mlp => 0.0,
            ExoEncoderKind::Transformer => 1.0,
        };
        let fusion = match self.fusion_kind {
            FusionKind::Single => 0.0,
            FusionKind::Bi => 1.0,
        };
        let v = vec![
            self.seq_len as f64,
            self.n_scales as f64,
            self.patch_size as f64,
            image,
            exo,
            fusion,
            self.d_model as f64,
            self.n_heads as f64,
            self.n_layers as f64,
            self.dropout,
            if self.revin_affine { 1.0 } else { 0.0 },
            self.n_exo as f64,
            self.n_horizons as f64,
        ];
        Tensor::new(vec![v.len()], v).expect("1d")
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        let v = t.data();
        if v.len() != 13 {
            return Err(SemfError::Format(format!("model config has {} fields, expected 13", v.len())));
        }
        let int = |x: f64| -> Result<usize> {
            if x >= 0.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(SemfError::Format(format!("bad integer {x} in model config")))
            }
        };
        let cfg = Self {
            seq_len: int(v[0])?,
            n_scales: int(v[1])?,
            patch_size: int(v[2])?,
            image_kind: *KINDS
                .get(int(v[3])?)
                .ok_or_else(|| SemfError::Format("bad image kind".into()))?,
            exo_kind: if v[4] == 0.0 { ExoEncoderKind::Mlp } else { ExoEncoderKind::Transformer },
            fusion_kind: if v[5] == 0.0 { FusionKind::Single } else { FusionKind::Bi },
            d_model: int(v[6])?,
            n_heads: int(v[7])?,
            n_layers: int(v[8])?,
            dropout: v[9],
            revin_affine: v[10] != 0.0,
            n_exo: int(v[11])?,
            n_horizons: int(v[12])?,
        };
        cfg.validate().map_err(|e| SemfError::Format(e.to_string()))?;
        Ok(cfg)
    }
}

/// Precomputed encoder inputs for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// `[n_patches, patch^2]`.
    pub tokens: Tensor,
    /// Instance-normalized `[L, n_exo]` window.
    pub exo: Tensor,
}

pub fn prepare_input(cfg: &ModelConfig, sample: &WindowSample) -> Result<ModelInput> {
    if sample.history.len() != cfg.seq_len || sample.exo_window.shape() != [cfg.seq_len, cfg.n_exo] {
        return Err(SemfError::shape(
            "prepare_input",
            sample.exo_window.shape(),
            &[cfg.seq_len, cfg.n_exo],
        ));
    }
    let image = render_image(&sample.history, &cfg.image_config())?;
    let tokens = patchify(&pad_to_multiple(&image.values, cfg.patch_size), cfg.patch_size)?;
    let (exo, _) = revin_normalize(&sample.exo_window, None)?;
    Ok(ModelInput { tokens, exo })
}

pub fn prepare_inputs(cfg: &ModelConfig, samples: &[WindowSample]) -> Result<Vec<ModelInput>> {
    samples.iter().map(|s| prepare_input(cfg, s)).collect()
}

#[derive(Debug, Clone)]
pub struct SemfModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub vit: VitEncoder,
    pub exo: ExoEncoder,
    pub fusion: Fusion,
    pub head: PredictionHead,
}

impl SemfModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let vit = VitEncoder::new(&mut store, "vit", config.vit(), &mut rng)?;
        let exo = ExoEncoder::new(&mut store, "exo", config.exo_kind, config.exo(), &mut rng)?;
        let fusion = Fusion::new(&mut store, "fusion", config.fusion_kind, config.d_model, config.n_heads, &mut rng);
        let head = PredictionHead::new(&mut store, "head", config.d_model, config.n_horizons, config.dropout, &mut rng);
        Ok(Self {
            config,
            store,
            vit,
            exo,
            fusion,
            head,
        })
    }

    /// Standardized `[1, n_horizons]` prediction for one window.
    pub fn forward(&self, g: &mut Graph, input: &ModelInput) -> Result<Var> {
        self.forward_with(g, &self.store, input)
    }

    /// As [`forward`](Self::forward) but reading parameters from `store`.
    pub fn forward_with(&self, g: &mut Graph, store: &ParamStore, input: &ModelInput) -> Result<Var> {
        let tokens = g.input(input.tokens.clone())?;
        let exo = g.input(input.exo.clone())?;
        let (cls, patches) = self.vit.forward(g, store, tokens)?;
        let (summary, exo_tokens) = self.exo.forward(g, store, exo)?;
        let fused = self.fusion.forward(g, store, cls, patches, summary, exo_tokens)?;
        self.head.forward(g, store, fused)
    }

    /// Evaluation-mode standardized prediction.
    pub fn predict(&self, input: &ModelInput) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, input)?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn predict_horizons(&self, input: &ModelInput, standardizer: Option<&Standardizer>) -> Result<HorizonPrediction> {
        destandardize(&self.predict(input)?, standardizer)
    }

    /// Parameters, model config and target scaling as named tensors.
    pub fn checkpoint_tensors(&self, standardizer: &Standardizer) -> Vec<(String, Tensor)> {
        let mut t = vec![("model.config".to_string(), self.config.to_tensor())];
        t.extend(standardizer.to_tensors());
        t.extend(checkpoint::store_tensors(&self.store));
        t
    }

    pub fn from_checkpoint_tensors(tensors: &[(String, Tensor)]) -> Result<(Self, Standardizer)> {
        let cfg = tensors
            .iter()
            .find(|(n, _)| n == "model.config")
            .ok_or_else(|| SemfError::Format("checkpoint lacks `model.config`".into()))?;
        let config = ModelConfig::from_tensor(&cfg.1)?;
        let mut model = SemfModel::new(config, 0)?;
        let params: Vec<(String, Tensor)> = tensors
            .iter()
            .filter(|(n, _)| n != "model.config" && !n.starts_with("standardizer."))
            .cloned()
            .collect();
        checkpoint::restore_store(&mut model.store, &params)?;
        Ok((model, Standardizer::from_tensors(tensors)?))
    }

    pub fn save(&self, path: &Path, standardizer: &Standardizer) -> Result<()> {
        checkpoint::save(path, &self.checkpoint_tensors(standardizer))
    }

    pub fn load(path: &Path) -> Result<(Self, Standardizer)> {
        Self::from_checkpoint_tensors(&checkpoint::load(path)?)
    }
}
