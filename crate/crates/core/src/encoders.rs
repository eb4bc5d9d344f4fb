//! Spectrogram patch encoder and the two exogenous-series encoders.

use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::data::STD_FLOOR;
use crate::error::{Result, SemfError};
use crate::nn::{sinusoidal_positions, EncoderBlock, LayerNorm, Linear};

/// Learned per-variable scale and shift applied after instance normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RevinAffine {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

/// Per-variable statistics of one window, kept for exact inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct RevinStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub affine: Option<RevinAffine>,
}

/// Standardizes each column of an `[L, n_vars]` window over the time axis.
pub fn revin_normalize(window: &Tensor, affine: Option<&RevinAffine>) -> Result<(Tensor, RevinStats)> {
    if window.rank() != 2 || window.rows() == 0 {
        return Err(SemfError::shape("revin_normalize", window.shape(), &[0, 0]));
    }
    if !window.is_finite() {
        return Err(SemfError::NonFinite { op: "revin_normalize" });
    }
    let (l, d) = (window.shape()[0], window.shape()[1]);
    if let Some(a) = affine {
        if a.scale.len() != d || a.shift.len() != d {
            return Err(SemfError::shape("revin_affine", &[a.scale.len()], &[d]));
        }
    }
    let mut mean = vec![0.0; d];
    for r in 0..l {
        for (m, v) in mean.iter_mut().zip(window.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= l as f64);
    let mut var = vec![0.0; d];
    for r in 0..l {
        for ((s, v), m) in var.iter_mut().zip(window.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / l as f64).sqrt().max(STD_FLOOR)).collect();
    let out = Tensor::from_fn2(l, d, |r, c| {
        let z = (window.at(r, c) - mean[c]) / std[c];
        match affine {
            Some(a) => z * a.scale[c] + a.shift[c],
            None => z,
        }
    });
    Ok((
        out,
        RevinStats {
            mean,
            std,
            affine: affine.cloned(),
        },
    ))
}

pub fn revin_denormalize(window: &Tensor, stats: &RevinStats) -> Result<Tensor> {
    let d = stats.mean.len();
    if window.rank() != 2 || window.shape()[1] != d {
        return Err(SemfError::shape("revin_denormalize", window.shape(), &[window.rows(), d]));
    }
    Ok(Tensor::from_fn2(window.rows(), d, |r, c| {
        let mut z = window.at(r, c);
        if let Some(a) = &stats.affine {
            z = (z - a.shift[c]) / a.scale[c];
        }
        z * stats.std[c] + stats.mean[c]
    }))
}

/// Zero-pads an image at the bottom and right up to multiples of `patch`.
pub fn pad_to_multiple(image: &Tensor, patch: usize) -> Tensor {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let (ph, pw) = (h.div_ceil(patch) * patch, w.div_ceil(patch) * patch);
    if (ph, pw) == (h, w) {
        return image.clone();
    }
    Tensor::from_fn2(ph, pw, |r, c| if r < h && c < w { image.at(r, c) } else { 0.0 })
}

/// Splits `[H, W]` into row-major `patch x patch` blocks, each flattened row-major.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    if image.rank() != 2 || patch == 0 || !image.shape()[0].is_multiple_of(patch) || !image.shape()[1].is_multiple_of(patch) {
        return Err(SemfError::shape("patchify", image.shape(), &[patch, patch]));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let (gh, gw) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(h * w);
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..patch {
                let row = image.row(pr * patch + r);
                data.extend_from_slice(&row[pc * patch..(pc + 1) * patch]);
            }
        }
    }
    Tensor::new(vec![gh * gw, patch * patch], data)
}

pub fn unpatchify(tokens: &Tensor, height: usize, width: usize, patch: usize) -> Result<Tensor> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(SemfError::shape("unpatchify", &[height, width], &[patch, patch]));
    }
    let (gh, gw) = (height / patch, width / patch);
    if tokens.shape() != [gh * gw, patch * patch] {
        return Err(SemfError::shape("unpatchify", tokens.shape(), &[gh * gw, patch * patch]));
    }
    Ok(Tensor::from_fn2(height, width, |r, c| {
        let token = (r / patch) * gw + c / patch;
        tokens.at(token, (r % patch) * patch + c % patch)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VitConfig {
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Image shape after padding to the patch grid.
    pub image_shape: (usize, usize),
    pub dropout: f64,
}

impl VitConfig {
    pub fn n_patches(&self) -> usize {
        (self.image_shape.0 / self.patch_size) * (self.image_shape.1 / self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_shape;
        if self.patch_size == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(SemfError::Config(format!(
                "patch size {} does not divide image {h}x{w}",
                self.patch_size
            )));
        }
        check_width(self.d_model, self.n_heads)
    }
}

fn check_width(d_model: usize, n_heads: usize) -> Result<()> {
    if d_model == 0 || n_heads == 0 || !d_model.is_multiple_of(n_heads) {
        return Err(SemfError::Config(format!("d_model {d_model} not divisible by {n_heads} heads")));
    }
    Ok(())
}

/// Patch projection, learned CLS and positions, pre-norm blocks, final norm.
#[derive(Debug, Clone)]
pub struct VitEncoder {
    pub cfg: VitConfig,
    pub patch_proj: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
}

impl VitEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: VitConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let p2 = cfg.patch_size * cfg.patch_size;
        Ok(Self {
            cfg,
            patch_proj: Linear::new(store, &format!("{name}.patch_proj"), p2, d, rng),
            cls: store.add_normal(format!("{name}.cls"), vec![1, d], 0.02, rng),
            pos: store.add_normal(format!("{name}.pos"), vec![cfg.n_patches() + 1, d], 0.02, rng),
            blocks: (0..cfg.n_layers)
                .map(|i| EncoderBlock::new(store, &format!("{name}.block{i}"), d, cfg.n_heads, 2 * d, cfg.dropout, rng))
                .collect(),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
        })
    }

    /// `tokens: [n_patches, patch^2]` -> (`cls: [1, d]`, `patches: [n_patches, d]`).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<(Var, Var)> {
        let n = self.cfg.n_patches();
        let p2 = self.cfg.patch_size * self.cfg.patch_size;
        if g.shape(tokens) != [n, p2] {
            return Err(SemfError::shape("vit_encode", g.shape(tokens), &[n, p2]));
        }
        let x = self.patch_proj.forward(g, store, tokens)?;
        let cls = g.param(store, self.cls)?;
        let x = g.concat(&[cls, x], 0)?;
        let pos = g.param(store, self.pos)?;
        let mut x = g.add(x, pos)?;
        for block in &self.blocks {
            x = block.forward(g, store, x)?;
        }
        let x = self.norm.forward(g, store, x)?;
        Ok((g.narrow(x, 0, 0, 1)?, g.narrow(x, 0, 1, n)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExoEncoderKind {
    Mlp,
    Transformer,
}

impl ExoEncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExoEncoderKind::Mlp => "mlp",
            ExoEncoderKind::Transformer => "transformer",
        }
    }
}

impl FromStr for ExoEncoderKind {
    type Err = SemfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "transformer" => Ok(Self::Transformer),
            _ => Err(SemfError::Config(format!("unknown exogenous encoder `{s}` (valid: mlp, transformer)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExoConfig {
    pub n_vars: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub revin_affine: bool,
    pub dropout: f64,
}

/// Optional learned affine on the already-normalized window.
fn apply_affine(g: &mut Graph, store: &ParamStore, affine: Option<(ParamId, ParamId)>, x: Var) -> Result<Var> {
    match affine {
        Some((scale, shift)) => {
            let s = g.param(store, scale)?;
            let b = g.param(store, shift)?;
            let y = g.mul(x, s)?;
            g.add(y, b)
        }
        None => Ok(x),
    }
}

fn add_affine(store: &mut ParamStore, name: &str, cfg: &ExoConfig) -> Option<(ParamId, ParamId)> {
    cfg.revin_affine.then(|| {
        (
            store.add(format!("{name}.revin.scale"), Tensor::full(vec![cfg.n_vars], 1.0)),
            store.add(format!("{name}.revin.shift"), Tensor::zeros(vec![cfg.n_vars])),
        )
    })
}

fn check_window(g: &Graph, x: Var, cfg: &ExoConfig) -> Result<()> {
    if g.shape(x) != [cfg.seq_len, cfg.n_vars] {
        return Err(SemfError::shape("exo_encode", g.shape(x), &[cfg.seq_len, cfg.n_vars]));
    }
    Ok(())
}

/// Per-step projection, sinusoidal positions, pre-norm blocks, final norm, mean pool.
#[derive(Debug, Clone)]
pub struct ExoTransformer {
    pub cfg: ExoConfig,
    pub affine: Option<(ParamId, ParamId)>,
    pub input_proj: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
    positions: Tensor,
}

impl ExoTransformer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: ExoConfig, rng: &mut R) -> Result<Self> {
        check_width(cfg.d_model, cfg.n_heads)?;
        let d = cfg.d_model;
        Ok(Self {
            cfg,
            affine: add_affine(store, name, &cfg),
            input_proj: Linear::new(store, &format!("{name}.input_proj"), cfg.n_vars, d, rng),
            blocks: (0..cfg.n_layers)
                .map(|i| EncoderBlock::new(store, &format!("{name}.block{i}"), d, cfg.n_heads, 2 * d, cfg.dropout, rng))
                .collect(),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            positions: sinusoidal_positions(cfg.seq_len, d),
        })
    }

    /// `window: [L, n_vars]`, already instance-normalized -> (`summary: [1, d]`, `tokens: [L, d]`).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, window: Var) -> Result<(Var, Var)> {
        check_window(g, window, &self.cfg)?;
        let x = apply_affine(g, store, self.affine, window)?;
        let x = self.input_proj.forward(g, store, x)?;
        let pos = g.constant(self.positions.clone())?;
        let x = g.add(x, pos)?;
        self.encode_tokens(g, store, x)
    }

    /// Attention stack and pooling over already-embedded `[L, d]` tokens.
    pub fn encode_tokens(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<(Var, Var)> {
        for block in &self.blocks {
            x = block.forward(g, store, x)?;
        }
        let tokens = self.norm.forward(g, store, x)?;
        let summary = g.mean_axis(tokens, 0)?;
        Ok((summary, tokens))
    }
}

/// Flattened-window MLP for the summary plus a shared per-step MLP for tokens.
#[derive(Debug, Clone)]
pub struct ExoMlp {
    pub cfg: ExoConfig,
    pub affine: Option<(ParamId, ParamId)>,
    pub flat_in: Linear,
    pub flat_out: Linear,
    pub step_in: Linear,
    pub step_out: Linear,
}

impl ExoMlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: ExoConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            cfg,
            affine: add_affine(store, name, &cfg),
            flat_in: Linear::new(store, &format!("{name}.flat_in"), cfg.seq_len * cfg.n_vars, 2 * d, rng),
            flat_out: Linear::new(store, &format!("{name}.flat_out"), 2 * d, d, rng),
            step_in: Linear::new(store, &format!("{name}.step_in"), cfg.n_vars, d, rng),
            step_out: Linear::new(store, &format!("{name}.step_out"), d, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, window: Var) -> Result<(Var, Var)> {
        check_window(g, window, &self.cfg)?;
        let x = apply_affine(g, store, self.affine, window)?;
        let flat = g.reshape(x, vec![1, self.cfg.seq_len * self.cfg.n_vars])?;
        let h = self.flat_in.forward(g, store, flat)?;
        let h = g.gelu(h)?;
        let summary = self.flat_out.forward(g, store, h)?;
        let t = self.step_in.forward(g, store, x)?;
        let t = g.gelu(t)?;
        let tokens = self.step_out.forward(g, store, t)?;
        Ok((summary, tokens))
    }
}

#[derive(Debug, Clone)]
pub enum ExoEncoder {
    Mlp(ExoMlp),
    Transformer(ExoTransformer),
}

impl ExoEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, kind: ExoEncoderKind, cfg: ExoConfig, rng: &mut R) -> Result<Self> {
        Ok(match kind {
            ExoEncoderKind::Mlp => ExoEncoder::Mlp(ExoMlp::new(store, name, cfg, rng)),
            ExoEncoderKind::Transformer => ExoEncoder::Transformer(ExoTransformer::new(store, name, cfg, rng)?),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, window: Var) -> Result<(Var, Var)> {
        match self {
            ExoEncoder::Mlp(m) => m.forward(g, store, window),
            ExoEncoder::Transformer(t) => t.forward(g, store, window),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck_params;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn2(rows, cols, |_, _| rng.gen_range(-2.0..2.0))
    }

    fn col_moments(t: &Tensor, c: usize) -> (f64, f64) {
        let n = t.rows() as f64;
        let m = (0..t.rows()).map(|r| t.at(r, c)).sum::<f64>() / n;
        let v = (0..t.rows()).map(|r| (t.at(r, c) - m).powi(2)).sum::<f64>() / n;
        (m, v.sqrt())
    }

    #[test]
    fn revin_moments_and_constant_column() {
        let mut w = random_tensor(120, 4, 1);
        for r in 0..120 {
            w.data_mut()[r * 4 + 2] = 7.5;
        }
        let (z, stats) = revin_normalize(&w, None).unwrap();
        for c in [0, 1, 3] {
            let (m, s) = col_moments(&z, c);
            assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9);
        }
        assert!((0..120).all(|r| z.at(r, 2) == 0.0));
        assert_eq!(stats.std[2], STD_FLOOR);
    }

    #[test]
    fn patch_examples() {
        let img = random_tensor(128, 120, 2);
        let t = patchify(&img, 8).unwrap();
        assert_eq!(t.shape(), &[240, 64]);
        assert_eq!(t.row(1)[..8], img.row(0)[8..16]);
        assert_eq!(t.row(15)[8..16], img.row(9)[..8]);
        let small = random_tensor(8, 8, 3);
        assert_eq!(patchify(&small, 8).unwrap().data(), small.data());
        assert!(matches!(patchify(&img, 16), Err(SemfError::Shape { .. })));
        let padded = pad_to_multiple(&img, 16);
        assert_eq!(padded.shape(), &[128, 128]);
        assert_eq!(patchify(&padded, 16).unwrap().shape(), &[64, 256]);
    }

    fn vit_cfg() -> VitConfig {
        VitConfig {
            patch_size: 4,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            image_shape: (8, 12),
            dropout: 0.0,
        }
    }

    fn exo_cfg() -> ExoConfig {
        ExoConfig {
            n_vars: 3,
            seq_len: 6,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            revin_affine: false,
            dropout: 0.0,
        }
    }

    fn run_vit(vit: &VitEncoder, store: &ParamStore, tokens: &Tensor) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let x = g.input(tokens.clone()).unwrap();
        let (c, p) = vit.forward(&mut g, store, x).unwrap();
        (g.value(c).clone(), g.value(p).clone())
    }

    #[test]
    fn vit_full_size_shapes_and_attention_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let cfg = VitConfig {
            patch_size: 8,
            d_model: 16,
            n_heads: 4,
            n_layers: 2,
            image_shape: (128, 120),
            dropout: 0.1,
        };
        let vit = VitEncoder::new(&mut store, "vit", cfg, &mut rng).unwrap();
        let tokens = patchify(&random_tensor(128, 120, 5), 8).unwrap();
        let mut g = Graph::new();
        g.enable_attention_probe();
        let x = g.input(tokens).unwrap();
        let (c, p) = vit.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(c), &[1, 16]);
        assert_eq!(g.shape(p), &[240, 16]);
        let probe = g.attention_probe().unwrap();
        assert_eq!(probe.len(), 2 * 4);
        for probs in probe {
            for r in 0..probs.rows() {
                assert!((probs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn vit_with_zero_projection_ignores_patch_content() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let vit = VitEncoder::new(&mut store, "vit", vit_cfg(), &mut rng).unwrap();
        store.get_mut(vit.patch_proj.weight).value.data_mut().fill(0.0);
        let a = run_vit(&vit, &store, &random_tensor(6, 16, 7));
        let b = run_vit(&vit, &store, &random_tensor(6, 16, 8));
        assert_eq!(a, b);
    }

    #[test]
    fn vit_is_sensitive_to_patch_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let vit = VitEncoder::new(&mut store, "vit", vit_cfg(), &mut rng).unwrap();
        let tokens = random_tensor(6, 16, 10);
        let mut rows: Vec<Vec<f64>> = (0..6).map(|r| tokens.row(r).to_vec()).collect();
        rows.swap(0, 5);
        let (ca, _) = run_vit(&vit, &store, &tokens);
        let (cb, _) = run_vit(&vit, &store, &Tensor::from_rows(&rows).unwrap());
        assert!(ca.max_abs_diff(&cb) > 1e-6);
    }

    #[test]
    fn vit_rejects_wrong_token_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let vit = VitEncoder::new(&mut store, "vit", vit_cfg(), &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.input(random_tensor(5, 16, 1)).unwrap();
        assert!(matches!(vit.forward(&mut g, &store, x), Err(SemfError::Shape { .. })));
    }

    fn run_exo(enc: &ExoEncoder, store: &ParamStore, window: &Tensor) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let x = g.input(window.clone()).unwrap();
        let (s, t) = enc.forward(&mut g, store, x).unwrap();
        (g.value(s).clone(), g.value(t).clone())
    }

    #[test]
    fn exo_transformer_shapes_and_mean_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let cfg = ExoConfig {
            n_vars: 10,
            seq_len: 120,
            d_model: 16,
            n_heads: 4,
            n_layers: 2,
            revin_affine: false,
            dropout: 0.1,
        };
        let enc = ExoEncoder::new(&mut store, "exo", ExoEncoderKind::Transformer, cfg, &mut rng).unwrap();
        let (z, _) = revin_normalize(&random_tensor(120, 10, 13), None).unwrap();
        let (s, t) = run_exo(&enc, &store, &z);
        assert_eq!(t.shape(), &[120, 16]);
        assert_eq!(s.shape(), &[1, 16]);
        for c in 0..16 {
            let m = (0..120).map(|r| t.at(r, c)).sum::<f64>() / 120.0;
            assert!((s.at(0, c) - m).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_tokens_stay_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut store = ParamStore::new();
        let enc = ExoTransformer::new(&mut store, "exo", exo_cfg(), &mut rng).unwrap();
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(&vec![row; 6]).unwrap()).unwrap();
        let (s, t) = enc.encode_tokens(&mut g, &store, x).unwrap();
        let (s, t) = (g.value(s).clone(), g.value(t).clone());
        for r in 0..6 {
            for c in 0..8 {
                assert!((t.at(r, c) - t.at(0, c)).abs() < 1e-12);
                assert!((s.at(0, c) - t.at(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlp_matches_transformer_interface_and_sees_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut store = ParamStore::new();
        let mlp = ExoEncoder::new(&mut store, "mlp", ExoEncoderKind::Mlp, exo_cfg(), &mut rng).unwrap();
        let tf = ExoEncoder::new(&mut store, "tf", ExoEncoderKind::Transformer, exo_cfg(), &mut rng).unwrap();
        let w = random_tensor(6, 3, 16);
        let (ms, mt) = run_exo(&mlp, &store, &w);
        let (ts, tt) = run_exo(&tf, &store, &w);
        assert_eq!(ms.shape(), ts.shape());
        assert_eq!(mt.shape(), tt.shape());
        let mut rows: Vec<Vec<f64>> = (0..6).map(|r| w.row(r).to_vec()).collect();
        rows.swap(1, 4);
        let (ps, _) = run_exo(&mlp, &store, &Tensor::from_rows(&rows).unwrap());
        assert!(ms.max_abs_diff(&ps) > 1e-9);
    }

    #[test]
    fn changing_one_variable_moves_summary() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = ParamStore::new();
        let enc = ExoEncoder::new(&mut store, "exo", ExoEncoderKind::Transformer, exo_cfg(), &mut rng).unwrap();
        let raw = random_tensor(6, 3, 18);
        let mut other = raw.clone();
        other.data_mut()[2 * 3 + 1] += 1.5;
        let (a, _) = run_exo(&enc, &store, &revin_normalize(&raw, None).unwrap().0);
        let (b, _) = run_exo(&enc, &store, &revin_normalize(&other, None).unwrap().0);
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn encoders_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut store = ParamStore::new();
        let vit = VitEncoder::new(&mut store, "vit", vit_cfg(), &mut rng).unwrap();
        let cfg = ExoConfig { revin_affine: true, ..exo_cfg() };
        let tf = ExoEncoder::new(&mut store, "tf", ExoEncoderKind::Transformer, cfg, &mut rng).unwrap();
        let mlp = ExoEncoder::new(&mut store, "mlp", ExoEncoderKind::Mlp, exo_cfg(), &mut rng).unwrap();
        let tokens = random_tensor(6, 16, 20);
        let window = random_tensor(6, 3, 21);
        let weights = random_tensor(6, 8, 22);

        let vit_report = gradcheck_params(&store, |g, s| {
            let x = g.input(tokens.clone())?;
            let (c, p) = vit.forward(g, s, x)?;
            let w = g.constant(weights.clone())?;
            let pw = g.mul(p, w)?;
            let a = g.sum(pw)?;
            let b = g.sum(c)?;
            g.add(a, b)
        })
        .unwrap();
        assert!(vit_report.max_rel_error < 1e-3, "vit {}", vit_report.max_rel_error);

        for (enc, tol) in [(&tf, 1e-3), (&mlp, 1e-4)] {
            let report = gradcheck_params(&store, |g, s| {
                let x = g.input(window.clone())?;
                let (summary, t) = enc.forward(g, s, x)?;
                let w = g.constant(weights.clone())?;
                let tw = g.mul(t, w)?;
                let a = g.sum(tw)?;
                let sq = g.mul(summary, summary)?;
                let b = g.sum(sq)?;
                g.add(a, b)
            })
            .unwrap();
            assert!(report.max_rel_error < tol, "{}", report.max_rel_error);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn revin_round_trips(seed in 0u64..10_000, affine in proptest::bool::ANY) {
            let w = random_tensor(30, 4, seed);
            let a = affine.then(|| RevinAffine { scale: vec![1.5, 0.5, 2.0, 0.9], shift: vec![0.1, -0.2, 0.0, 3.0] });
            let (z, stats) = revin_normalize(&w, a.as_ref()).unwrap();
            prop_assert!(revin_denormalize(&z, &stats).unwrap().max_abs_diff(&w) < 1e-9);
        }

        #[test]
        fn patchify_is_a_bijection(seed in 0u64..10_000, gh in 1usize..5, gw in 1usize..5, p in 1usize..6) {
            let img = random_tensor(gh * p, gw * p, seed);
            let back = unpatchify(&patchify(&img, p).unwrap(), gh * p, gw * p, p).unwrap();
            prop_assert_eq!(back, img);
        }

        #[test]
        fn encoder_ignores_column_rescaling(seed in 0u64..10_000, col in 0usize..3, a in 0.1f64..50.0, b in -100.0f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let enc = ExoEncoder::new(&mut store, "exo", ExoEncoderKind::Transformer, exo_cfg(), &mut rng).unwrap();
            let raw = random_tensor(6, 3, seed + 1);
            let mut scaled = raw.clone();
            for r in 0..6 {
                scaled.data_mut()[r * 3 + col] = a * raw.at(r, col) + b;
            }
            let (s1, t1) = run_exo(&enc, &store, &revin_normalize(&raw, None).unwrap().0);
            let (s2, t2) = run_exo(&enc, &store, &revin_normalize(&scaled, None).unwrap().0);
            prop_assert!(s1.max_abs_diff(&s2) < 1e-6 && t1.max_abs_diff(&t2) < 1e-6);
        }
    }
}
