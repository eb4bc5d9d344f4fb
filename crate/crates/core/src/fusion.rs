//! Cross-attention fusion of the two modalities and the shared horizon head.

use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::data::Standardizer;
use crate::error::{Result, SemfError};
use crate::nn::{LayerNorm, Linear, MultiHeadAttention};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    Single,
    Bi,
}

impl FusionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::Single => "single",
            FusionKind::Bi => "bi",
        }
    }
}

impl FromStr for FusionKind {
    type Err = SemfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "bi" => Ok(Self::Bi),
            _ => Err(SemfError::Config(format!("unknown fusion `{s}` (valid: single, bi)"))),
        }
    }
}

/// `LN(query + MHA(query, sequence))` for a single `[1, d]` query.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl CrossAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_model: usize, n_heads: usize, rng: &mut R) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, n_heads, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d_model),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, query: Var, sequence: Var) -> Result<Var> {
        let a = self.attn.forward(g, store, query, sequence)?;
        let x = g.add(query, a)?;
        self.norm.forward(g, store, x)
    }
}

#[derive(Debug, Clone)]
pub struct Fusion {
    pub kind: FusionKind,
    /// Spectrogram CLS attends over exogenous tokens.
    pub spec_query: CrossAttention,
    /// Exogenous summary attends over patch tokens; absent for single fusion.
    pub exo_query: Option<CrossAttention>,
    pub proj: Linear,
}

impl Fusion {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, kind: FusionKind, d_model: usize, n_heads: usize, rng: &mut R) -> Self {
        let spec_query = CrossAttention::new(store, &format!("{name}.spec_query"), d_model, n_heads, rng);
        let exo_query = (kind == FusionKind::Bi)
            .then(|| CrossAttention::new(store, &format!("{name}.exo_query"), d_model, n_heads, rng));
        let width = if kind == FusionKind::Bi { 2 * d_model } else { d_model };
        Self {
            kind,
            spec_query,
            exo_query,
            proj: Linear::new(store, &format!("{name}.proj"), width, d_model, rng),
        }
    }

    /// All inputs `[*, d]`; returns the fused `[1, d]` representation.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cls: Var,
        patches: Var,
        summary: Var,
        exo_tokens: Var,
    ) -> Result<Var> {
        let d = g.shape(cls)[1];
        for v in [patches, summary, exo_tokens] {
            if g.shape(v).len() != 2 || g.shape(v)[1] != d {
                return Err(SemfError::shape("fusion", g.shape(cls), g.shape(v)));
            }
        }
        let a = self.spec_query.forward(g, store, cls, exo_tokens)?;
        let joined = match &self.exo_query {
            Some(ca) => {
                let b = ca.forward(g, store, summary, patches)?;
                g.concat(&[a, b], 1)?
            }
            None => a,
        };
        self.proj.forward(g, store, joined)
    }
}

/// `LN -> Linear(d, 2d) -> GELU -> Dropout -> Linear(2d, n_horizons)`.
#[derive(Debug, Clone)]
pub struct PredictionHead {
    pub norm: LayerNorm,
    pub hidden: Linear,
    pub out: Linear,
    pub dropout: f64,
}

impl PredictionHead {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_model: usize, n_horizons: usize, dropout: f64, rng: &mut R) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d_model),
            hidden: Linear::new(store, &format!("{name}.hidden"), d_model, 2 * d_model, rng),
            out: Linear::new(store, &format!("{name}.out"), 2 * d_model, n_horizons, rng),
            dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, fused: Var) -> Result<Var> {
        let x = self.norm.forward(g, store, fused)?;
        let x = self.hidden.forward(g, store, x)?;
        let x = g.gelu(x)?;
        let x = g.dropout(x, self.dropout)?;
        self.out.forward(g, store, x)
    }
}

/// Head output on both the standardized and the price scale.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonPrediction {
    pub standardized: Vec<f64>,
    pub destandardized: Vec<f64>,
}

pub fn destandardize(standardized: &[f64], standardizer: Option<&Standardizer>) -> Result<HorizonPrediction> {
    let s = standardizer.ok_or_else(|| SemfError::contract("prediction requires a fitted standardizer"))?;
    if s.mean.len() != standardized.len() {
        return Err(SemfError::shape("destandardize", &[standardized.len()], &[s.mean.len()]));
    }
    Ok(HorizonPrediction {
        standardized: standardized.to_vec(),
        destandardized: s.inverse(standardized),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck_params, Tensor};
    use crate::nn::LN_EPS;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const D: usize = 8;

    fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn2(rows, cols, |_, _| rng.gen_range(-1.5..1.5))
    }

    fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
        Tensor::from_fn2(a.rows(), b.shape()[1], |i, j| (0..a.shape()[1]).map(|k| a.at(i, k) * b.at(k, j)).sum())
    }

    fn affine(x: &Tensor, store: &ParamStore, l: &Linear) -> Tensor {
        let mut y = matmul(x, &store.get(l.weight).value);
        if let Some(b) = l.bias {
            let b = store.get(b).value.data().to_vec();
            for (i, v) in y.data_mut().iter_mut().enumerate() {
                *v += b[i % b.len()];
            }
        }
        y
    }

    fn attend(ca: &CrossAttention, store: &ParamStore, q: &Tensor, seq: &Tensor) -> (Tensor, Tensor, Vec<Tensor>) {
        let mut g = Graph::new();
        g.enable_attention_probe();
        let qv = g.input(q.clone()).unwrap();
        let sv = g.input(seq.clone()).unwrap();
        let raw = ca.attn.forward(&mut g, store, qv, sv).unwrap();
        let out = ca.forward(&mut g, store, qv, sv).unwrap();
        (g.value(raw).clone(), g.value(out).clone(), g.attention_probe().unwrap().to_vec())
    }

    fn setup(kind: FusionKind, seed: u64) -> (ParamStore, Fusion) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let f = Fusion::new(&mut store, "fusion", kind, D, 2, &mut rng);
        (store, f)
    }

    struct Inputs {
        cls: Tensor,
        patches: Tensor,
        summary: Tensor,
        exo: Tensor,
    }

    fn inputs(seed: u64) -> Inputs {
        Inputs {
            cls: random_tensor(1, D, seed),
            patches: random_tensor(5, D, seed + 1),
            summary: random_tensor(1, D, seed + 2),
            exo: random_tensor(4, D, seed + 3),
        }
    }

    fn fuse(f: &Fusion, store: &ParamStore, x: &Inputs) -> Tensor {
        let mut g = Graph::new();
        let v: Vec<Var> = [&x.cls, &x.patches, &x.summary, &x.exo]
            .iter()
            .map(|t| g.input((*t).clone()).unwrap())
            .collect();
        let out = f.forward(&mut g, store, v[0], v[1], v[2], v[3]).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn identical_tokens_give_query_independent_output() {
        let (store, f) = setup(FusionKind::Bi, 1);
        let row = random_tensor(1, D, 2).data().to_vec();
        let seq = Tensor::from_rows(&vec![row.clone(); 6]).unwrap();
        let (a, _, probs) = attend(&f.spec_query, &store, &random_tensor(1, D, 3), &seq);
        let (b, _, _) = attend(&f.spec_query, &store, &random_tensor(1, D, 4), &seq);
        assert!(a.max_abs_diff(&b) < 1e-12);
        let v = Tensor::new(vec![1, D], row).unwrap();
        let expected = affine(&affine(&v, &store, &f.spec_query.attn.value), &store, &f.spec_query.attn.output);
        assert!(a.max_abs_diff(&expected) < 1e-12);
        for p in probs {
            assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_token_matches_hand_matmul() {
        let (store, f) = setup(FusionKind::Bi, 5);
        let tok = random_tensor(1, D, 6);
        let (raw, _, _) = attend(&f.spec_query, &store, &random_tensor(1, D, 7), &tok);
        let expected = affine(&affine(&tok, &store, &f.spec_query.attn.value), &store, &f.spec_query.attn.output);
        assert!(raw.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn zero_attention_reduces_to_layer_norm_of_query() {
        let (mut store, f) = setup(FusionKind::Bi, 8);
        let o = &f.spec_query.attn.output;
        store.get_mut(o.weight).value.data_mut().fill(0.0);
        store.get_mut(o.bias.unwrap()).value.data_mut().fill(0.0);
        let q = random_tensor(1, D, 9);
        let (_, out, _) = attend(&f.spec_query, &store, &q, &random_tensor(4, D, 10));
        let m = q.data().iter().sum::<f64>() / D as f64;
        let v = q.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / D as f64;
        for (o, x) in out.data().iter().zip(q.data()) {
            assert!((o - (x - m) / (v + LN_EPS).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let (store, f) = setup(FusionKind::Bi, 11);
        let mut g = Graph::new();
        let q = g.input(random_tensor(1, D, 1)).unwrap();
        let s = g.input(Tensor::zeros(vec![0, D])).unwrap();
        assert!(matches!(f.spec_query.forward(&mut g, &store, q, s), Err(SemfError::Contract(_))));
    }

    #[test]
    fn direction_order_does_not_matter() {
        let (store, f) = setup(FusionKind::Bi, 12);
        let x = inputs(13);
        let mut g = Graph::new();
        let cls = g.input(x.cls.clone()).unwrap();
        let patches = g.input(x.patches.clone()).unwrap();
        let summary = g.input(x.summary.clone()).unwrap();
        let exo = g.input(x.exo.clone()).unwrap();
        let b = f.exo_query.as_ref().unwrap().forward(&mut g, &store, summary, patches).unwrap();
        let a = f.spec_query.forward(&mut g, &store, cls, exo).unwrap();
        let joined = g.concat(&[a, b], 1).unwrap();
        let out = f.proj.forward(&mut g, &store, joined).unwrap();
        assert_eq!(g.value(out), &fuse(&f, &store, &x));
    }

    #[test]
    fn bi_fusion_sees_both_sequences_and_single_ignores_patches() {
        let (store, bi) = setup(FusionKind::Bi, 14);
        let (sstore, single) = setup(FusionKind::Single, 14);
        let x = inputs(15);
        let mut moved_patches = inputs(15);
        moved_patches.patches = random_tensor(5, D, 99);
        let mut moved_exo = inputs(15);
        moved_exo.exo = random_tensor(4, D, 98);
        let base = fuse(&bi, &store, &x);
        assert_eq!(base.shape(), &[1, D]);
        assert!(base.max_abs_diff(&fuse(&bi, &store, &moved_patches)) > 1e-6);
        assert!(base.max_abs_diff(&fuse(&bi, &store, &moved_exo)) > 1e-6);
        let s = fuse(&single, &sstore, &x);
        assert_eq!(s.shape(), base.shape());
        assert_eq!(s, fuse(&single, &sstore, &moved_patches));
        assert!(s.max_abs_diff(&fuse(&single, &sstore, &moved_exo)) > 1e-6);
    }

    #[test]
    fn silenced_exo_query_isolates_patch_path() {
        let (mut store, f) = setup(FusionKind::Bi, 16);
        let o = &f.exo_query.as_ref().unwrap().attn.output;
        store.get_mut(o.weight).value.data_mut().fill(0.0);
        store.get_mut(o.bias.unwrap()).value.data_mut().fill(0.0);
        let x = inputs(17);
        let mut moved = inputs(17);
        moved.patches = random_tensor(5, D, 97);
        assert_eq!(fuse(&f, &store, &x), fuse(&f, &store, &moved));
        let mut moved_exo = inputs(17);
        moved_exo.exo = random_tensor(4, D, 96);
        assert!(fuse(&f, &store, &x).max_abs_diff(&fuse(&f, &store, &moved_exo)) > 1e-6);
    }

    #[test]
    fn fusion_gradcheck() {
        for kind in [FusionKind::Bi, FusionKind::Single] {
            let (store, f) = setup(kind, 18);
            let x = inputs(19);
            let w = random_tensor(1, D, 20);
            let report = gradcheck_params(&store, |g, s| {
                let v: Vec<Var> = [&x.cls, &x.patches, &x.summary, &x.exo]
                    .iter()
                    .map(|t| g.input((*t).clone()))
                    .collect::<Result<_>>()?;
                let out = f.forward(g, s, v[0], v[1], v[2], v[3])?;
                let wv = g.constant(w.clone())?;
                let y = g.mul(out, wv)?;
                g.sum(y)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-3, "{kind:?}: {}", report.max_rel_error);
        }
    }

    fn head(seed: u64) -> (ParamStore, PredictionHead) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = PredictionHead::new(&mut store, "head", D, 6, 0.1, &mut rng);
        (store, h)
    }

    fn run_head(h: &PredictionHead, store: &ParamStore, x: &Tensor) -> Vec<f64> {
        let mut g = Graph::new();
        let v = g.input(x.clone()).unwrap();
        let out = h.forward(&mut g, store, v).unwrap();
        assert_eq!(g.shape(out), &[1, 6]);
        g.value(out).data().to_vec()
    }

    #[test]
    fn zero_head_predicts_horizon_means() {
        let (mut store, h) = head(21);
        store.get_mut(h.out.weight).value.data_mut().fill(0.0);
        let pred = run_head(&h, &store, &random_tensor(1, D, 22));
        assert!(pred.iter().all(|&v| v == 0.0));
        let s = Standardizer {
            mean: vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0],
            std: vec![2.0; 6],
        };
        let p = destandardize(&pred, Some(&s)).unwrap();
        assert_eq!(p.destandardized, s.mean);
        assert!(matches!(destandardize(&pred, None), Err(SemfError::Contract(_))));
    }

    #[test]
    fn head_gradcheck_and_eval_determinism() {
        let (store, h) = head(23);
        let x = random_tensor(1, D, 24);
        assert_eq!(run_head(&h, &store, &x), run_head(&h, &store, &x));
        let w = random_tensor(1, 6, 25);
        let report = gradcheck_params(&store, |g, s| {
            let v = g.input(x.clone())?;
            let out = h.forward(g, s, v)?;
            let wv = g.constant(w.clone())?;
            let y = g.mul(out, wv)?;
            g.sum(y)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
    }
}
