//! Bias retrieval and its locality-enhanced refinements.
//!
//! Audio frames query the phrase key/value store with multi-head attention
//! to obtain `H_cb`. The LE-CB combiners then refine it with neighbourhood
//! attention (or, for the CB-C ablation, a depthwise/pointwise convolution)
//! before a zero-initialized projection adds it back onto the frames.

use std::fmt;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{ContextEncoder, EncodedContext, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{Graph, NeighbourLayout, ParamStore, Tensor, Var};
use crate::sampling::ContextBatch;
use crate::tokenizer::{SubwordVocab, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    None,
    BaselineNam,
    LecbV1,
    LecbV2,
    CbC,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::None,
        Variant::BaselineNam,
        Variant::LecbV1,
        Variant::LecbV2,
        Variant::CbC,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::BaselineNam => "baseline_nam",
            Variant::LecbV1 => "lecb_v1",
            Variant::LecbV2 => "lecb_v2",
            Variant::CbC => "cb_c",
        }
    }

    fn has_branch(self) -> bool {
        matches!(self, Variant::LecbV1 | Variant::LecbV2 | Variant::CbC)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown variant '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasConfig {
    pub variant: Variant,
    pub lambda: f64,
    /// Neighbourhood window (odd); also the CB-C kernel size.
    pub window: usize,
    pub heads: usize,
    pub d: usize,
    pub d_a: usize,
}

impl Default for BiasConfig {
    fn default() -> Self {
        BiasConfig {
            variant: Variant::LecbV2,
            lambda: 1.0,
            window: 7,
            heads: 4,
            d: 64,
            d_a: 64,
        }
    }
}

impl BiasConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::invalid(format!("window {} must be odd", self.window)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::invalid(format!(
                "d {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.d_a == 0 {
            return Err(Error::invalid("d_a must be positive"));
        }
        Ok(())
    }
}

/// Edge-clamped neighbourhood layout: each frame sees `min(k, frames)`
/// consecutive frames, and the relative bias is looked up by the offset
/// clamped to `[-(k-1)/2, (k-1)/2]`.
pub fn na_layout(frames: usize, window: usize) -> Result<NeighbourLayout> {
    if frames == 0 {
        return Err(Error::invalid("neighbourhood attention over zero frames"));
    }
    if window == 0 || window % 2 == 0 {
        return Err(Error::invalid(format!("window {window} must be odd")));
    }
    if window > 2 * frames - 1 {
        log::warn!("window {window} exceeds 2*{frames}-1; using full attention");
    }
    let width = window.min(frames);
    let half = ((window - 1) / 2) as isize;
    let mut starts = Vec::with_capacity(frames);
    let mut bias_index = Vec::with_capacity(frames * width);
    for i in 0..frames {
        let start = (i as isize - half).clamp(0, (frames - width) as isize) as usize;
        starts.push(start);
        for j in start..start + width {
            let off = (j as isize - i as isize).clamp(-half, half);
            bias_index.push((off + half) as usize);
        }
    }
    Ok(NeighbourLayout {
        frames,
        width,
        starts,
        bias_index,
    })
}

/// Multi-head scaled dot-product attention of `query` rows over `key` rows.
/// Projections carry no bias and there is no output projection, so zero
/// values give a zero result. Returns the concatenated heads and the
/// per-head weight matrices.
#[allow(clippy::too_many_arguments)]
pub fn mha_bias(
    g: &mut Graph,
    query: Var,
    key: Var,
    value: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    heads: usize,
    key_mask: &[bool],
) -> Result<(Var, Vec<Var>)> {
    let q = g.matmul(query, wq)?;
    let k = g.matmul(key, wk)?;
    let v = g.matmul(value, wv)?;
    let d = g.value(q).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(format!("{d} not divisible by {heads} heads")));
    }
    let (tau, keys) = (g.value(q).rows(), g.value(k).rows());
    if key_mask.len() != keys {
        return Err(Error::invalid("key mask length differs from key count"));
    }
    let mask: Vec<bool> = (0..tau).flat_map(|_| key_mask.iter().copied()).collect();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let s = g.matmul_t(qh, kh)?;
        let w = g.softmax_rows(s, scale, Some(&mask))?;
        outs.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    Ok((g.concat_cols(&outs)?, weights))
}

/// Multi-head neighbourhood self-attention over the rows of `h`.
/// `rel_bias` is `1 × (heads · window)`, one table of `window` entries per head.
#[allow(clippy::too_many_arguments)]
pub fn neighbourhood_attention(
    g: &mut Graph,
    h: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    rel_bias: Var,
    heads: usize,
    window: usize,
) -> Result<(Var, Vec<Var>)> {
    let layout = Rc::new(na_layout(g.value(h).rows(), window)?);
    let q = g.matmul(h, wq)?;
    let k = g.matmul(h, wk)?;
    let v = g.matmul(h, wv)?;
    let d = g.value(q).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(format!("{d} not divisible by {heads} heads")));
    }
    if g.value(rel_bias).len() != heads * window {
        return Err(Error::invalid("relative bias table size differs from heads * window"));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = g.slice_cols(q, hd * dh, dh)?;
        let kh = g.slice_cols(k, hd * dh, dh)?;
        let vh = g.slice_cols(v, hd * dh, dh)?;
        let table = g.slice_cols(rel_bias, hd * window, window)?;
        let logits = g.neighbour_logits(qh, kh, table, layout.clone())?;
        let w = g.softmax_rows(logits, scale, None)?;
        outs.push(g.neighbour_apply(w, vh, layout.clone())?);
        weights.push(w);
    }
    Ok((g.concat_cols(&outs)?, weights))
}

/// `pointwise(depthwise(u)) + u`.
pub fn conv_branch(g: &mut Graph, u: Var, depthwise: Var, pointwise: Var, bias: Var) -> Result<Var> {
    let c = g.depthwise_conv(u, depthwise)?;
    let p = g.matmul(c, pointwise)?;
    let p = g.add_row(p, bias)?;
    g.add(p, u)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub bias: BiasConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.bias.validate()?;
        if self.encoder.d_model != self.bias.d {
            return Err(Error::invalid(format!(
                "encoder width {} differs from bias width {}",
                self.encoder.d_model, self.bias.d
            )));
        }
        Ok(())
    }
}

/// Graph handles produced by one forward pass.
pub struct BiasVars {
    pub h: Var,
    pub h_cb: Option<Var>,
    pub branch: Option<Var>,
    pub mha_weights: Vec<Var>,
    pub na_weights: Vec<Var>,
    pub context: Option<EncodedContext>,
}

/// Materialized forward result.
#[derive(Debug, Clone)]
pub struct BiasOutput {
    pub h: Tensor,
    pub h_cb: Option<Tensor>,
    /// NA (or convolution) branch output before λ scaling.
    pub branch: Option<Tensor>,
    /// Per head, frames × (N·l).
    pub mha_weights: Vec<Tensor>,
    /// Per head, frames × window.
    pub na_weights: Vec<Tensor>,
    pub key_mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct LecbModel {
    pub cfg: ModelConfig,
    encoder: ContextEncoder,
}

impl LecbModel {
    pub fn new(cfg: ModelConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let encoder = ContextEncoder::new(cfg.encoder, vocab_size)?;
        Ok(LecbModel { cfg, encoder })
    }

    pub fn variant(&self) -> Variant {
        self.cfg.bias.variant
    }

    pub fn encoder(&self) -> &ContextEncoder {
        &self.encoder
    }

    /// Fresh parameters for this model; `none` has no parameters.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new(seed);
        self.register(&mut store)?;
        Ok(store)
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        let b = self.cfg.bias;
        if b.variant == Variant::None {
            return Ok(());
        }
        self.encoder.register(store)?;
        store.xavier("cb.mha.wq", b.d_a, b.d)?;
        store.xavier("cb.mha.wk", b.d, b.d)?;
        store.xavier("cb.mha.wv", b.d, b.d)?;
        let inner_in = if b.variant == Variant::LecbV1 { b.d_a } else { b.d };
        if b.variant.has_branch() {
            store.xavier("cb.ffn_in.w", inner_in, b.d)?;
            store.zeros("cb.ffn_in.b", &[1, b.d])?;
        }
        match b.variant {
            Variant::LecbV1 | Variant::LecbV2 => {
                store.xavier("cb.na.wq", b.d, b.d)?;
                store.xavier("cb.na.wk", b.d, b.d)?;
                store.xavier("cb.na.wv", b.d, b.d)?;
                store.zeros("cb.na.rel_bias", &[1, b.heads * b.window])?;
            }
            Variant::CbC => {
                store.xavier("cb.conv.dw", b.window, b.d)?;
                store.xavier("cb.conv.pw", b.d, b.d)?;
                store.zeros("cb.conv.b", &[1, b.d])?;
            }
            _ => {}
        }
        store.zeros("cb.out.w", &[b.d, b.d_a])?;
        store.zeros("cb.out.b", &[1, b.d_a])?;
        Ok(())
    }

    /// Tokenizes a context batch, truncating each phrase to `l` tokens.
    pub fn tokenize_batch(&self, vocab: &SubwordVocab, batch: &ContextBatch) -> Result<Vec<TokenSeq>> {
        let l = self.cfg.encoder.max_tokens;
        batch
            .phrases
            .iter()
            .map(|p| {
                let seq = vocab.tokenize(&p.text);
                if seq.is_empty() {
                    return Err(Error::invalid(format!("phrase '{}' has no tokens", p.text)));
                }
                Ok(seq.truncated(l))
            })
            .collect()
    }

    /// Records the forward pass of `x` (frames × d_a) biased by `phrases`.
    pub fn graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        phrases: &[TokenSeq],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<BiasVars> {
        let b = self.cfg.bias;
        let xs = g.value(x).shape().to_vec();
        if xs.len() != 2 || xs[1] != b.d_a || xs[0] == 0 {
            return Err(Error::Shape {
                op: "lecb_forward",
                lhs: xs,
                rhs: vec![0, b.d_a],
            });
        }
        if b.variant == Variant::None {
            return Ok(BiasVars {
                h: x,
                h_cb: None,
                branch: None,
                mha_weights: Vec::new(),
                na_weights: Vec::new(),
                context: None,
            });
        }
        let p = |g: &mut Graph, name: &str| g.param_by_name(store, name);
        let ctx = self.encoder.encode(g, store, phrases, dropout)?;
        let (wq, wk, wv) = (p(g, "cb.mha.wq")?, p(g, "cb.mha.wk")?, p(g, "cb.mha.wv")?);
        let (h_cb, mha_weights) =
            mha_bias(g, x, ctx.keys, ctx.values, wq, wk, wv, b.heads, &ctx.key_mask)?;

        let mut na_weights = Vec::new();
        let mut branch = None;
        let mut s = h_cb;
        if b.variant.has_branch() {
            let src = if b.variant == Variant::LecbV1 { x } else { h_cb };
            let (w, c) = (p(g, "cb.ffn_in.w")?, p(g, "cb.ffn_in.b")?);
            let u = g.matmul(src, w)?;
            let u = g.add_row(u, c)?;
            let n = if b.variant == Variant::CbC {
                let (dw, pw, pb) = (p(g, "cb.conv.dw")?, p(g, "cb.conv.pw")?, p(g, "cb.conv.b")?);
                conv_branch(g, u, dw, pw, pb)?
            } else {
                let (nq, nk, nv) = (p(g, "cb.na.wq")?, p(g, "cb.na.wk")?, p(g, "cb.na.wv")?);
                let rb = p(g, "cb.na.rel_bias")?;
                let (n, w) = neighbourhood_attention(g, u, nq, nk, nv, rb, b.heads, b.window)?;
                na_weights = w;
                n
            };
            branch = Some(n);
            let scaled = g.scale(n, b.lambda);
            s = g.add(h_cb, scaled)?;
        }
        let (ow, ob) = (p(g, "cb.out.w")?, p(g, "cb.out.b")?);
        let o = g.matmul(s, ow)?;
        let o = g.add_row(o, ob)?;
        let h = g.add(x, o)?;
        Ok(BiasVars {
            h,
            h_cb: Some(h_cb),
            branch,
            mha_weights,
            na_weights,
            context: Some(ctx),
        })
    }

    /// Inference forward pass without dropout.
    pub fn forward(&self, store: &ParamStore, x: &Tensor, phrases: &[TokenSeq]) -> Result<BiasOutput> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let vars = self.graph(&mut g, store, xv, phrases, None)?;
        let take = |v: &[Var]| v.iter().map(|&w| g.value(w).clone()).collect::<Vec<_>>();
        let out = BiasOutput {
            h: g.value(vars.h).clone(),
            h_cb: vars.h_cb.map(|v| g.value(v).clone()),
            branch: vars.branch.map(|v| g.value(v).clone()),
            mha_weights: take(&vars.mha_weights),
            na_weights: take(&vars.na_weights),
            key_mask: vars.context.map(|c| c.key_mask).unwrap_or_default(),
        };
        if out.h.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("biased representation".into()));
        }
        Ok(out)
    }
}

/// Per-utterance attention weights for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub utterance_id: String,
    pub variant: Variant,
    /// Token piece per key row; `None` marks padding.
    pub keys: Vec<Option<String>>,
    pub phrases: Vec<String>,
    /// heads × frames × keys
    pub mha: Vec<Vec<Vec<f64>>>,
    /// heads × frames × window
    pub na: Vec<Vec<Vec<f64>>>,
}

impl AttentionDump {
    pub fn new(
        utterance_id: &str,
        variant: Variant,
        vocab: &SubwordVocab,
        phrases: &[TokenSeq],
        max_tokens: usize,
        out: &BiasOutput,
    ) -> Self {
        let mut keys = Vec::with_capacity(phrases.len() * max_tokens);
        for p in phrases {
            keys.extend(p.ids.iter().map(|&i| Some(vocab.piece(i).to_string())));
            keys.extend(std::iter::repeat(None).take(max_tokens - p.len()));
        }
        let rows = |t: &Tensor| (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
        AttentionDump {
            utterance_id: utterance_id.to_string(),
            variant,
            keys,
            phrases: phrases.iter().map(|p| p.text.clone()).collect(),
            mha: out.mha_weights.iter().map(rows).collect(),
            na: out.na_weights.iter().map(rows).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_t(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    fn softmax(v: &[f64]) -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    /// Plain multi-head attention written out loop by loop.
    fn full_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Tensor {
        let (t, n, d) = (q.rows(), k.rows(), q.cols());
        let dh = d / heads;
        let mut out = Tensor::zeros(&[t, d]);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..t {
                let logits: Vec<f64> = (0..n)
                    .map(|j| {
                        cols.clone().map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let w = softmax(&logits);
                for c in cols.clone() {
                    out.set(i, c, (0..n).map(|j| w[j] * v.get(j, c)).sum());
                }
            }
        }
        out
    }

    fn seq(ids: &[u32]) -> TokenSeq {
        TokenSeq {
            ids: ids.to_vec(),
            word_start: ids.iter().enumerate().map(|(i, _)| i == 0).collect(),
            text: String::new(),
        }
    }

    fn model(variant: Variant, lambda: f64) -> LecbModel {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                layers: 2,
                d_model: 8,
                heads: 2,
                ff_dim: 16,
                max_tokens: 2,
                dropout: 0.0,
            },
            bias: BiasConfig {
                variant,
                lambda,
                window: 3,
                heads: 2,
                d: 8,
                d_a: 6,
            },
        };
        LecbModel::new(cfg, 10).unwrap()
    }

    fn randomize(store: &mut ParamStore, name: &str, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in store.get_mut(name).unwrap().data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }

    #[test]
    fn window_enumeration_is_edge_clamped() {
        let l = na_layout(5, 3).unwrap();
        let n: Vec<Vec<usize>> = (0..5).map(|i| l.neighbours(i).collect()).collect();
        assert_eq!(n[0], [0, 1, 2]);
        assert_eq!(n[2], [1, 2, 3]);
        assert_eq!(n[4], [2, 3, 4]);
        assert_eq!(&l.bias_index[0..3], &[1, 2, 2]);
        assert_eq!(&l.bias_index[6..9], &[0, 1, 2]);
        let small = na_layout(2, 7).unwrap();
        assert_eq!(small.width, 2);
        assert!(na_layout(4, 4).is_err());
        assert!(na_layout(0, 3).is_err());
    }

    #[test]
    fn na_matches_self_attention_for_wide_windows() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (t, d, heads) = (1 + seed as usize % 7, 8, 2);
            let h = rand_t(t, d, &mut rng);
            let ws: Vec<Tensor> = (0..3).map(|_| rand_t(d, d, &mut rng)).collect();
            let k = 2 * t + 1;
            let mut g = Graph::new();
            let hv = g.constant(h.clone());
            let [wq, wk, wv] = [0, 1, 2].map(|i| g.constant(ws[i].clone()));
            let rb = g.constant(Tensor::zeros(&[1, heads * k]));
            let (out, _) = neighbourhood_attention(&mut g, hv, wq, wk, wv, rb, heads, k).unwrap();
            let expected = full_attention(
                &h.matmul(&ws[0]).unwrap(),
                &h.matmul(&ws[1]).unwrap(),
                &h.matmul(&ws[2]).unwrap(),
                heads,
            );
            assert!(g.value(out).max_abs_diff(&expected).unwrap() < 1e-9);
        }
    }

    #[test]
    fn single_frame_na_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = rand_t(1, 4, &mut rng);
        let w = rand_t(4, 4, &mut rng);
        let mut g = Graph::new();
        let hv = g.constant(h.clone());
        let id = g.constant(Tensor::identity(4));
        let wv = g.constant(w.clone());
        let rb = g.constant(Tensor::zeros(&[1, 6]));
        let (out, weights) = neighbourhood_attention(&mut g, hv, id, id, wv, rb, 2, 3).unwrap();
        assert!(g.value(out).max_abs_diff(&h.matmul(&w).unwrap()).unwrap() < 1e-15);
        assert_eq!(g.value(weights[0]).data(), &[1.0]);
    }

    #[test]
    fn mha_zero_values_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.constant(rand_t(4, 6, &mut rng));
        let k = g.constant(rand_t(5, 8, &mut rng));
        let v = g.constant(Tensor::zeros(&[5, 8]));
        let wq = g.constant(rand_t(6, 8, &mut rng));
        let w = g.constant(rand_t(8, 8, &mut rng));
        let (out, weights) = mha_bias(&mut g, x, k, v, wq, w, w, 2, &[true; 5]).unwrap();
        assert!(g.value(out).data().iter().all(|v| *v == 0.0));
        for w in weights {
            for r in 0..4 {
                assert!((g.value(w).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mha_single_unmasked_key_gets_all_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let x = g.constant(rand_t(3, 4, &mut rng));
        let k = g.constant(rand_t(4, 4, &mut rng));
        let w = g.constant(rand_t(4, 4, &mut rng));
        let mask = [false, false, true, false];
        let (_, weights) = mha_bias(&mut g, x, k, k, w, w, w, 1, &mask).unwrap();
        for r in 0..3 {
            assert_eq!(g.value(weights[0]).row(r), &[0.0, 0.0, 1.0, 0.0]);
        }
        assert!(mha_bias(&mut g, x, k, k, w, w, w, 1, &[false; 4]).is_err());
    }

    #[test]
    fn mha_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q, k, v) = (rand_t(5, 6, &mut rng), rand_t(7, 6, &mut rng), rand_t(7, 6, &mut rng));
        let mut g = Graph::new();
        let [qv, kv, vv] = [&q, &k, &v].map(|t| g.constant(t.clone()));
        let id = g.constant(Tensor::identity(6));
        let (out, _) = mha_bias(&mut g, qv, kv, vv, id, id, id, 1, &[true; 7]).unwrap();
        assert!(g.value(out).max_abs_diff(&full_attention(&q, &k, &v, 1)).unwrap() < 1e-10);
    }

    #[test]
    fn identity_conv_doubles_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u = rand_t(6, 4, &mut rng);
        let mut kernel = Tensor::zeros(&[3, 4]);
        for c in 0..4 {
            kernel.set(1, c, 1.0);
        }
        let mut g = Graph::new();
        let uv = g.constant(u.clone());
        let kv = g.constant(kernel);
        let pw = g.constant(Tensor::identity(4));
        let pb = g.constant(Tensor::zeros(&[1, 4]));
        let out = conv_branch(&mut g, uv, kv, pw, pb).unwrap();
        let doubled: Vec<f64> = u.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.value(out).data(), &doubled[..]);
    }

    #[test]
    fn conv_receptive_field_is_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (t, c, k) = (9, 3, 3);
        let u = rand_t(t, c, &mut rng);
        let kernel = rand_t(k, c, &mut rng);
        let pw = rand_t(c, c, &mut rng);
        let run = |u: &Tensor| {
            let mut g = Graph::new();
            let vars = [u.clone(), kernel.clone(), pw.clone(), Tensor::zeros(&[1, c])].map(|t| g.constant(t));
            let out = conv_branch(&mut g, vars[0], vars[1], vars[2], vars[3]).unwrap();
            g.value(out).clone()
        };
        let base = run(&u);
        for j in 0..t {
            let mut p = u.clone();
            p.set(j, 0, p.get(j, 0) + 1e-3);
            let moved = run(&p);
            for i in 0..t {
                let changed = moved.row(i) != base.row(i);
                assert_eq!(changed, i.abs_diff(j) <= 1, "frame {i} perturb {j}");
            }
        }
    }

    #[test]
    fn residual_guarantee_for_every_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_t(5, 6, &mut rng);
        let phrases = [seq(&[2, 3]), seq(&[4])];
        for v in Variant::ALL {
            let m = model(v, 1.0);
            let store = m.init(11).unwrap();
            let out = m.forward(&store, &x, &phrases).unwrap();
            assert_eq!(out.h, x, "{v}");
            for w in out.mha_weights.iter().chain(&out.na_weights) {
                for r in 0..w.rows() {
                    assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn baseline_equals_v1_with_zero_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_t(4, 6, &mut rng);
        let phrases = [seq(&[2, 3]), seq(&[5, 6])];
        let base = model(Variant::BaselineNam, 1.0);
        let v1 = model(Variant::LecbV1, 0.0);
        let (mut sb, mut s1) = (base.init(1).unwrap(), v1.init(1).unwrap());
        randomize(&mut sb, "cb.out.w", 3);
        randomize(&mut s1, "cb.out.w", 3);
        let hb = base.forward(&sb, &x, &phrases).unwrap().h;
        let h1 = v1.forward(&s1, &x, &phrases).unwrap().h;
        assert_eq!(hb, h1);
        assert_ne!(hb, x);
    }

    #[test]
    fn v1_and_v2_agree_when_inner_inputs_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_t(4, 6, &mut rng);
        let phrases = [seq(&[2, 3]), seq(&[7])];
        let (m1, m2) = (model(Variant::LecbV1, 1.0), model(Variant::LecbV2, 1.0));
        let (mut s1, mut s2) = (m1.init(5).unwrap(), m2.init(5).unwrap());
        for s in [&mut s1, &mut s2] {
            s.get_mut("cb.ffn_in.w").unwrap().data_mut().fill(0.0);
            randomize(s, "cb.ffn_in.b", 12);
            randomize(s, "cb.out.w", 13);
        }
        let h1 = m1.forward(&s1, &x, &phrases).unwrap().h;
        let h2 = m2.forward(&s2, &x, &phrases).unwrap().h;
        assert_eq!(h1, h2);
    }

    #[test]
    fn lambda_scales_only_the_branch() {
        let x = rand_t(5, 8, &mut ChaCha8Rng::seed_from_u64(11));
        let phrases = [seq(&[2, 3]), seq(&[4, 8])];
        let mut outs = Vec::new();
        for lambda in [1.0, 0.5] {
            let mut cfg = model(Variant::LecbV2, lambda).cfg;
            cfg.bias.d_a = 8;
            let m = LecbModel::new(cfg, 10).unwrap();
            let mut s = m.init(2).unwrap();
            *s.get_mut("cb.out.w").unwrap() = Tensor::identity(8);
            outs.push(m.forward(&s, &x, &phrases).unwrap());
        }
        let branch = outs[0].branch.as_ref().unwrap();
        for i in 0..outs[0].h.len() {
            let diff = outs[0].h.data()[i] - outs[1].h.data()[i];
            assert!((diff - 0.5 * branch.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn relative_bias_raises_its_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = rand_t(6, 4, &mut rng);
        let w = rand_t(4, 4, &mut rng);
        let weight_of = |bias: f64| {
            let mut table = Tensor::zeros(&[1, 3]);
            table.set(0, 2, bias);
            let mut g = Graph::new();
            let [hv, wv, tv] = [h.clone(), w.clone(), table].map(|t| g.constant(t));
            let (_, ws) = neighbourhood_attention(&mut g, hv, wv, wv, wv, tv, 1, 3).unwrap();
            g.value(ws[0]).get(3, 2)
        };
        assert!(weight_of(0.5) > weight_of(0.0));
    }

    #[test]
    fn end_to_end_gradients() {
        use crate::numerics::grad_check;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_t(3, 6, &mut rng);
        let targets = [0usize, 3, 5];
        let phrases = [seq(&[2, 3]), seq(&[4])];
        for v in [Variant::LecbV1, Variant::LecbV2, Variant::CbC, Variant::BaselineNam] {
            let m = model(v, 0.5);
            let mut store = m.init(4).unwrap();
            randomize(&mut store, "cb.out.w", 21);
            randomize(&mut store, "cb.out.b", 22);
            if v != Variant::BaselineNam && v != Variant::CbC {
                randomize(&mut store, "cb.na.rel_bias", 23);
            }
            let report = grad_check(&store, 1e-5, |s, g| {
                let xv = g.constant(x.clone());
                let out = m.graph(g, s, xv, &phrases, None)?;
                g.cross_entropy(out.h, &targets)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{v}: {report:?}");
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("lecb_v3".parse::<Variant>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = BiasConfig::default();
        assert!(c.validate().is_ok());
        c.window = 4;
        assert!(c.validate().is_err());
        c.window = 3;
        c.lambda = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn attention_dump_round_trip() {
        let vocab = SubwordVocab::build(&["ab ba".to_string()], 4).unwrap();
        let m = model(Variant::LecbV2, 1.0);
        let store = m.init(3).unwrap();
        let phrases = vec![vocab.tokenize("ab"), vocab.tokenize("b")];
        let x = rand_t(4, 6, &mut ChaCha8Rng::seed_from_u64(1));
        let out = m.forward(&store, &x, &phrases).unwrap();
        let dump = AttentionDump::new("u1", Variant::LecbV2, &vocab, &phrases, 2, &out);
        assert_eq!(dump.keys.len(), 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u1.json");
        dump.save(&path).unwrap();
        assert_eq!(AttentionDump::load(&path).unwrap(), dump);
    }
}
