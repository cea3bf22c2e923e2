//! Frozen toy recognizer: a fixed random temporal convolution with tanh,
//! followed by a linear frame classifier trained once on clean renderings.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::task::SyntheticTask;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Adam, Graph, ParamStore, Tensor, Var};
use crate::tokenizer::{PAD_ID, UNK_ID};

const CONV_WIDTH: usize = 3;

pub struct FrozenBackbone {
    params: ParamStore,
    pub d_a: usize,
    pub classes: usize,
    blank: usize,
    sil: usize,
}

impl FrozenBackbone {
    /// Builds the encoder from `seed` and fits the classifier.
    pub fn train(task: &SyntheticTask, d_a: usize, seed: u64) -> Result<Self> {
        let f = task.cfg.feature_dim;
        let classes = task.classes();
        let mut params = ParamStore::new(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "backbone.conv"));
        let std = (1.5 / (CONV_WIDTH * f) as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let w: Vec<f64> = (0..CONV_WIDTH * f * d_a).map(|_| normal.sample(&mut rng)).collect();
        params.insert("backbone.conv.w", Tensor::matrix(CONV_WIDTH * f, d_a, w)?)?;
        params.zeros("backbone.conv.b", &[1, d_a])?;
        params.xavier("backbone.cls.w", d_a, classes)?;
        params.zeros("backbone.cls.b", &[1, classes])?;
        let mut bb = FrozenBackbone {
            params,
            d_a,
            classes,
            blank: task.blank_class(),
            sil: task.sil_class(),
        };
        bb.fit_classifier(task, seed)?;
        Ok(bb)
    }

    /// Clean sequences of random pieces, laid out like utterances.
    fn clean_data(&self, task: &SyntheticTask, seed: u64) -> Result<(Tensor, Vec<usize>)> {
        let f = task.cfg.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "backbone.data"));
        let noise = Normal::new(0.0, task.cfg.noise).map_err(|e| Error::invalid(e.to_string()))?;
        let pieces: Vec<usize> = (0..task.vocab.len())
            .filter(|&p| p != PAD_ID as usize && p != UNK_ID as usize)
            .collect();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut nrng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "backbone.noise"));
        let (sil, blank) = (task.sil_class(), task.blank_class());
        for _ in 0..160 {
            let mut targets = vec![sil];
            let words = rng.random_range(2..=5);
            for w in 0..words {
                if w > 0 {
                    targets.push(sil);
                }
                for i in 0..rng.random_range(1..=4) {
                    if i > 0 {
                        targets.push(blank);
                    }
                    let p = *pieces.choose(&mut rng).expect("pieces");
                    targets.extend(std::iter::repeat(p).take(task.cfg.frames_per_token));
                }
            }
            targets.push(sil);
            let frames = targets
                .iter()
                .flat_map(|&class| (0..f).map(move |c| task.templates.get(class, c)))
                .map(|v| v + noise.sample(&mut nrng))
                .collect();
            let feats = Tensor::matrix(targets.len(), f, frames)?;
            xs.extend_from_slice(self.encode(&feats)?.data());
            ys.extend(targets);
        }
        let rows = ys.len();
        Ok((Tensor::matrix(rows, xs.len() / rows, xs)?, ys))
    }

    fn fit_classifier(&mut self, task: &SyntheticTask, seed: u64) -> Result<()> {
        let (x, y) = self.clean_data(task, seed)?;
        let mut cls = ParamStore::new(seed);
        cls.insert("backbone.cls.w", self.params.get("backbone.cls.w").expect("cls").clone())?;
        cls.insert("backbone.cls.b", self.params.get("backbone.cls.b").expect("cls").clone())?;
        let mut adam = Adam::new(0.05);
        for _ in 0..300 {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let w = g.param_by_name(&cls, "backbone.cls.w")?;
            let b = g.param_by_name(&cls, "backbone.cls.b")?;
            let l = g.matmul(xv, w)?;
            let l = g.add_row(l, b)?;
            let loss = g.cross_entropy(l, &y)?;
            g.backward(loss)?;
            adam.step(&mut cls, &g.param_grads());
        }
        *self.params.get_mut("backbone.cls.w").expect("cls") = cls.get("backbone.cls.w").expect("cls").clone();
        *self.params.get_mut("backbone.cls.b").expect("cls") = cls.get("backbone.cls.b").expect("cls").clone();
        Ok(())
    }

    fn encode_with(features: &Tensor, conv: &(Tensor, Tensor)) -> Result<Tensor> {
        let (w, b) = conv;
        let (t, f) = (features.rows(), features.cols());
        let half = CONV_WIDTH / 2;
        let mut stacked = vec![0.0; t * CONV_WIDTH * f];
        for i in 0..t {
            for s in 0..CONV_WIDTH {
                let src = i as isize + s as isize - half as isize;
                if src >= 0 && (src as usize) < t {
                    stacked[(i * CONV_WIDTH + s) * f..(i * CONV_WIDTH + s + 1) * f]
                        .copy_from_slice(features.row(src as usize));
                }
            }
        }
        let mut x = Tensor::matrix(t, CONV_WIDTH * f, stacked)?.matmul(w)?;
        let d = x.cols();
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = (*v + b.data()[i % d]).tanh();
        }
        Ok(x)
    }

    /// Acoustic features (frames × F) to backbone representation (frames × d_a).
    pub fn encode(&self, features: &Tensor) -> Result<Tensor> {
        let conv = (
            self.params.get("backbone.conv.w").expect("conv").clone(),
            self.params.get("backbone.conv.b").expect("conv").clone(),
        );
        Self::encode_with(features, &conv)
    }

    /// Classifier weights as graph constants: no gradient reaches them.
    pub fn classifier_graph(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let w = g.constant(self.params.get("backbone.cls.w").expect("cls").clone());
        let b = g.constant(self.params.get("backbone.cls.b").expect("cls").clone());
        let l = g.matmul(h, w)?;
        g.add_row(l, b)
    }

    pub fn logits(&self, h: &Tensor) -> Result<Tensor> {
        let mut l = h.matmul(self.params.get("backbone.cls.w").expect("cls"))?;
        let b = self.params.get("backbone.cls.b").expect("cls");
        let c = l.cols();
        for (i, v) in l.data_mut().iter_mut().enumerate() {
            *v += b.data()[i % c];
        }
        Ok(l)
    }

    /// Greedy frame decoding: argmax, collapse repeats, drop blanks, split
    /// words at silence.
    pub fn decode(&self, task: &SyntheticTask, h: &Tensor) -> Result<Vec<String>> {
        let logits = self.logits(h)?;
        let mut classes = Vec::with_capacity(logits.rows());
        for r in 0..logits.rows() {
            let row = logits.row(r);
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            classes.push(best);
        }
        classes.dedup();
        let mut words = Vec::new();
        let mut cur = String::new();
        for c in classes {
            if c == self.sil {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
            } else if c != self.blank && c != PAD_ID as usize {
                cur.push_str(if c == UNK_ID as usize { "?" } else { task.vocab.piece(c as u32) });
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
        Ok(words)
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }
}
