//! Context encoder: a bidirectional transformer over each phrase's subword
//! tokens producing the key matrix, and the left shift that derives the
//! value matrix from it.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::tokenizer::TokenSeq;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Maximum tokens per phrase (`l`).
    pub max_tokens: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 5,
            d_model: 64,
            heads: 4,
            ff_dim: 128,
            max_tokens: 8,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::invalid("encoder needs at least one layer"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.max_tokens == 0 || self.ff_dim == 0 {
            return Err(Error::invalid("max_tokens and ff_dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Placement of `N` phrases into `N` blocks of `l` rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhraseLayout {
    pub max_tokens: usize,
    pub lengths: Vec<usize>,
}

impl PhraseLayout {
    pub fn new(lengths: Vec<usize>, max_tokens: usize) -> Result<Self> {
        if let Some((i, &n)) = lengths.iter().enumerate().find(|(_, &n)| n == 0 || n > max_tokens) {
            return Err(Error::invalid(format!(
                "phrase {i} has {n} tokens; expected 1..={max_tokens}"
            )));
        }
        Ok(PhraseLayout { max_tokens, lengths })
    }

    pub fn phrases(&self) -> usize {
        self.lengths.len()
    }

    pub fn rows(&self) -> usize {
        self.lengths.len() * self.max_tokens
    }

    /// Row range owned by phrase `p` (padding included).
    pub fn block(&self, p: usize) -> std::ops::Range<usize> {
        p * self.max_tokens..(p + 1) * self.max_tokens
    }

    /// `true` for rows holding a real token.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.rows()];
        for (p, &n) in self.lengths.iter().enumerate() {
            m[p * self.max_tokens..p * self.max_tokens + n].fill(true);
        }
        m
    }

    /// Successor row of every row inside its own phrase, if any.
    pub fn successors(&self) -> Vec<Option<usize>> {
        let mut s = vec![None; self.rows()];
        for (p, &n) in self.lengths.iter().enumerate() {
            let base = p * self.max_tokens;
            for r in 0..n.saturating_sub(1) {
                s[base + r] = Some(base + r + 1);
            }
        }
        s
    }

    /// Attention admissibility: same phrase and real key.
    pub fn attention_mask(&self) -> Vec<bool> {
        let rows = self.rows();
        let real = self.mask();
        let mut m = vec![false; rows * rows];
        for i in 0..rows {
            let p = i / self.max_tokens;
            for j in self.block(p) {
                m[i * rows + j] = real[j];
            }
        }
        m
    }
}

/// Value matrix from keys: row `r` takes key row `r + 1` when both are real
/// tokens of the same phrase; phrase-final and padding rows are zero.
pub fn left_shift(keys: &Tensor, layout: &PhraseLayout) -> Result<Tensor> {
    if keys.shape().len() != 2 || keys.rows() != layout.rows() {
        return Err(Error::Shape {
            op: "left_shift",
            lhs: keys.shape().to_vec(),
            rhs: vec![layout.rows()],
        });
    }
    let d = keys.cols();
    let mut out = Tensor::zeros(&[layout.rows(), d]);
    for (r, succ) in layout.successors().into_iter().enumerate() {
        if let Some(s) = succ {
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(keys.row(s));
        }
    }
    Ok(out)
}

/// Block-diagonal mask over phrases packed back to back.
fn packed_attention_mask(lengths: &[usize]) -> Vec<bool> {
    let n: usize = lengths.iter().sum();
    let mut m = vec![false; n * n];
    let mut start = 0;
    for &len in lengths {
        for i in start..start + len {
            m[i * n + start..i * n + start + len].fill(true);
        }
        start += len;
    }
    m
}

/// Sinusoidal encoding of positions `0..len` in `d` dimensions.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, d]);
    for pos in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

/// Keys, values and layout produced for one context batch.
pub struct EncodedContext {
    pub keys: Var,
    pub values: Var,
    pub layout: PhraseLayout,
    pub key_mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ContextEncoder {
    pub cfg: EncoderConfig,
    pub vocab_size: usize,
}

impl ContextEncoder {
    pub fn new(cfg: EncoderConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        if vocab_size < 3 {
            return Err(Error::invalid("vocabulary too small"));
        }
        Ok(ContextEncoder { cfg, vocab_size })
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        let (d, ff) = (self.cfg.d_model, self.cfg.ff_dim);
        store.xavier("enc.embed", self.vocab_size, d)?;
        for l in 0..self.cfg.layers {
            let p = |s: &str| format!("enc.{l}.{s}");
            store.filled(&p("ln1.g"), &[1, d], 1.0)?;
            store.zeros(&p("ln1.b"), &[1, d])?;
            for w in ["wq", "wk", "wv", "wo"] {
                store.xavier(&p(w), d, d)?;
                store.zeros(&p(&format!("b{}", &w[1..])), &[1, d])?;
            }
            store.filled(&p("ln2.g"), &[1, d], 1.0)?;
            store.zeros(&p("ln2.b"), &[1, d])?;
            store.xavier(&p("ff1.w"), d, ff)?;
            store.zeros(&p("ff1.b"), &[1, ff])?;
            store.xavier(&p("ff2.w"), ff, d)?;
            store.zeros(&p("ff2.b"), &[1, d])?;
        }
        store.filled("enc.ln_f.g", &[1, d], 1.0)?;
        store.zeros("enc.ln_f.b", &[1, d])?;
        Ok(())
    }

    /// Encodes the phrases into `(N·l)×d` keys plus left-shifted values.
    /// Phrases attend only within themselves; padding rows are zeroed.
    /// `dropout_rng` enables dropout when the configured rate is positive.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        phrases: &[TokenSeq],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncodedContext> {
        if phrases.is_empty() {
            return Err(Error::invalid("no phrases to encode"));
        }
        let l = self.cfg.max_tokens;
        let layout = PhraseLayout::new(phrases.iter().map(|p| p.len()).collect(), l)?;
        let (d, heads) = (self.cfg.d_model, self.cfg.heads);
        let dh = d / heads;

        // only real tokens are encoded; padding rows are restored as zeros
        let mut ids = Vec::new();
        let mut pos_all = Vec::new();
        let pos = sinusoidal_positions(l, d);
        for p in phrases {
            ids.extend(p.ids.iter().map(|&i| Some(i as usize)));
            pos_all.extend_from_slice(&pos.data()[..p.len() * d]);
        }
        if ids.iter().flatten().any(|&i| i >= self.vocab_size) {
            return Err(Error::invalid("token id outside the encoder vocabulary"));
        }
        let real = ids.len();
        let param = |g: &mut Graph, name: &str| g.param_by_name(store, name);

        let embed = param(g, "enc.embed")?;
        let tok = g.gather_rows(embed, Rc::new(ids))?;
        let tok = g.scale(tok, (d as f64).sqrt());
        let pos = g.constant(Tensor::matrix(real, d, pos_all)?);
        let mut h = g.add(tok, pos)?;

        let attn_mask = packed_attention_mask(&layout.lengths);
        let scale = 1.0 / (dh as f64).sqrt();
        for layer in 0..self.cfg.layers {
            let n = |s: &str| format!("enc.{layer}.{s}");
            let (g1, b1) = (param(g, &n("ln1.g"))?, param(g, &n("ln1.b"))?);
            let a = g.layer_norm(h, g1, b1, 1e-5)?;
            let proj = |g: &mut Graph, w: &str, b: &str| -> Result<Var> {
                let (wv, bv) = (param(g, &n(w))?, param(g, &n(b))?);
                let m = g.matmul(a, wv)?;
                g.add_row(m, bv)
            };
            let q = proj(g, "wq", "bq")?;
            let k = proj(g, "wk", "bk")?;
            let v = proj(g, "wv", "bv")?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = g.slice_cols(q, hd * dh, dh)?;
                let kh = g.slice_cols(k, hd * dh, dh)?;
                let vh = g.slice_cols(v, hd * dh, dh)?;
                let s = g.matmul_t(qh, kh)?;
                let w = g.softmax_rows(s, scale, Some(&attn_mask))?;
                outs.push(g.matmul(w, vh)?);
            }
            let cat = g.concat_cols(&outs)?;
            let (wo, bo) = (param(g, &n("wo"))?, param(g, &n("bo"))?);
            let o = g.matmul(cat, wo)?;
            let o = g.add_row(o, bo)?;
            let o = self.dropout(g, o, dropout_rng.as_deref_mut())?;
            h = g.add(h, o)?;

            let (g2, b2) = (param(g, &n("ln2.g"))?, param(g, &n("ln2.b"))?);
            let f = g.layer_norm(h, g2, b2, 1e-5)?;
            let (w1, c1) = (param(g, &n("ff1.w"))?, param(g, &n("ff1.b"))?);
            let f = g.matmul(f, w1)?;
            let f = g.add_row(f, c1)?;
            let f = g.relu(f);
            let (w2, c2) = (param(g, &n("ff2.w"))?, param(g, &n("ff2.b"))?);
            let f = g.matmul(f, w2)?;
            let f = g.add_row(f, c2)?;
            let f = self.dropout(g, f, dropout_rng.as_deref_mut())?;
            h = g.add(h, f)?;
        }
        let (gf, bf) = (param(g, "enc.ln_f.g")?, param(g, "enc.ln_f.b")?);
        let out = g.layer_norm(h, gf, bf, 1e-5)?;
        let key_mask = layout.mask();
        let mut next = 0;
        let keep: Vec<Option<usize>> = key_mask
            .iter()
            .map(|&real| {
                real.then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        let keys = g.gather_rows(out, Rc::new(keep))?;
        let values = g.gather_rows(keys, Rc::new(layout.successors()))?;
        Ok(EncodedContext {
            keys,
            values,
            layout,
            key_mask,
        })
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let rate = self.cfg.dropout;
        match rng {
            Some(rng) if rate > 0.0 => {
                let shape = g.value(x).shape().to_vec();
                let n = g.value(x).len();
                let keep = 1.0 / (1.0 - rate);
                let mask = (0..n)
                    .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                    .collect();
                let m = g.constant(Tensor::new(shape, mask)?);
                g.mul(x, m)
            }
            _ => Ok(x),
        }
    }
}

/// Fresh dropout generator for one training step.
pub fn dropout_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(ids: &[u32]) -> TokenSeq {
        TokenSeq {
            ids: ids.to_vec(),
            word_start: ids.iter().enumerate().map(|(i, _)| i == 0).collect(),
            text: String::new(),
        }
    }

    fn encoder(l: usize, d: usize) -> (ContextEncoder, ParamStore) {
        let cfg = EncoderConfig {
            layers: 2,
            d_model: d,
            heads: 2,
            ff_dim: 2 * d,
            max_tokens: l,
            dropout: 0.0,
        };
        let enc = ContextEncoder::new(cfg, 12).unwrap();
        let mut store = ParamStore::new(3);
        enc.register(&mut store).unwrap();
        (enc, store)
    }

    fn rows(t: &Tensor, r: std::ops::Range<usize>) -> Vec<f64> {
        r.flat_map(|i| t.row(i).to_vec()).collect()
    }

    #[test]
    fn left_shift_definition() {
        let k = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let v = left_shift(&k, &PhraseLayout::new(vec![3], 3).unwrap()).unwrap();
        assert_eq!(v.data(), &[2.0, 3.0, 0.0]);
        let one = Tensor::from_rows(&[vec![5.0]]).unwrap();
        assert_eq!(left_shift(&one, &PhraseLayout::new(vec![1], 1).unwrap()).unwrap().data(), &[0.0]);
        let k = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap();
        let v = left_shift(&k, &PhraseLayout::new(vec![2, 2], 2).unwrap()).unwrap();
        assert_eq!(v.data(), &[2.0, 0.0, 4.0, 0.0]);
    }

    #[test]
    fn layout_rejects_bad_lengths() {
        assert!(PhraseLayout::new(vec![0], 3).is_err());
        assert!(PhraseLayout::new(vec![4], 3).is_err());
    }

    #[test]
    fn padding_rows_are_masked_and_zero() {
        let (enc, store) = encoder(4, 8);
        let mut g = Graph::new();
        let out = enc.encode(&mut g, &store, &[seq(&[5])], None).unwrap();
        assert_eq!(out.key_mask, [true, false, false, false]);
        let k = g.value(out.keys);
        assert!(rows(k, 1..4).iter().all(|v| *v == 0.0));
        assert!(rows(k, 0..1).iter().any(|v| *v != 0.0));
        assert!(g.value(out.values).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_arithmetic() {
        let cfg = EncoderConfig {
            layers: 1,
            d_model: 32,
            heads: 4,
            ff_dim: 32,
            max_tokens: 8,
            dropout: 0.0,
        };
        let enc = ContextEncoder::new(cfg, 20).unwrap();
        let mut store = ParamStore::new(0);
        enc.register(&mut store).unwrap();
        let phrases: Vec<TokenSeq> = (0..10).map(|i| seq(&[2 + (i % 7) as u32, 3])).collect();
        let mut g = Graph::new();
        let out = enc.encode(&mut g, &store, &phrases, None).unwrap();
        assert_eq!(g.value(out.keys).shape(), &[80, 32]);
        assert_eq!(g.value(out.values).shape(), &[80, 32]);
    }

    #[test]
    fn phrase_permutation_permutes_key_blocks_exactly() {
        let (enc, store) = encoder(3, 8);
        let a = [seq(&[2, 3, 4]), seq(&[5]), seq(&[6, 7])];
        let b = [a[2].clone(), a[0].clone(), a[1].clone()];
        let mut g = Graph::new();
        let ka = enc.encode(&mut g, &store, &a, None).unwrap().keys;
        let kb = enc.encode(&mut g, &store, &b, None).unwrap().keys;
        let (ka, kb) = (g.value(ka), g.value(kb));
        assert_eq!(rows(ka, 0..3), rows(kb, 3..6));
        assert_eq!(rows(ka, 3..6), rows(kb, 6..9));
        assert_eq!(rows(ka, 6..9), rows(kb, 0..3));
    }

    #[test]
    fn changing_one_phrase_leaves_others_bit_identical() {
        let (enc, store) = encoder(3, 8);
        let a = [seq(&[2, 3, 4]), seq(&[5, 9])];
        let b = [seq(&[0, 0, 0]), seq(&[5, 9])];
        let mut g = Graph::new();
        let ka = enc.encode(&mut g, &store, &a, None).unwrap().keys;
        let kb = enc.encode(&mut g, &store, &b, None).unwrap().keys;
        assert_eq!(rows(g.value(ka), 3..6), rows(g.value(kb), 3..6));
    }

    #[test]
    fn graph_values_match_left_shift() {
        let (enc, store) = encoder(3, 8);
        let phrases = [seq(&[2, 3, 4]), seq(&[5]), seq(&[6, 7])];
        let mut g = Graph::new();
        let out = enc.encode(&mut g, &store, &phrases, None).unwrap();
        let expected = left_shift(g.value(out.keys), &out.layout).unwrap();
        assert_eq!(g.value(out.values), &expected);
    }

    #[test]
    fn dropout_only_with_rng() {
        let mut cfg = EncoderConfig {
            layers: 1,
            d_model: 8,
            heads: 2,
            ff_dim: 8,
            max_tokens: 2,
            dropout: 0.5,
        };
        let enc = ContextEncoder::new(cfg, 10).unwrap();
        let mut store = ParamStore::new(1);
        enc.register(&mut store).unwrap();
        let p = [seq(&[2, 3])];
        let mut g = Graph::new();
        let a = enc.encode(&mut g, &store, &p, None).unwrap().keys;
        let b = enc.encode(&mut g, &store, &p, None).unwrap().keys;
        assert_eq!(g.value(a), g.value(b));
        let mut rng = dropout_rng(4);
        let c = enc.encode(&mut g, &store, &p, Some(&mut rng)).unwrap().keys;
        assert_ne!(g.value(a), g.value(c));
        cfg.dropout = 1.0;
        assert!(ContextEncoder::new(cfg, 10).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        cfg.heads = 4;
        cfg.layers = 0;
        assert!(cfg.validate().is_err());
    }
}
