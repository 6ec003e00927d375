use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::plan::InterventionPlan;
use crate::actio::{read_tensors, write_tensors, Tensor, TensorFile};
use crate::linalg;
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
    /// MLP width; 0 means `4 * d`.
    pub d_ff: usize,
    pub final_norm_enabled: bool,
    pub tied_unembedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            n_layers: 4,
            n_heads: 4,
            vocab: 128,
            max_seq: 64,
            d_ff: 0,
            final_norm_enabled: true,
            tied_unembedding: false,
        }
    }
}

impl ModelConfig {
    fn resolved(mut self) -> Result<Self> {
        if self.d_ff == 0 {
            self.d_ff = 4 * self.d;
        }
        if self.d == 0 || self.n_layers == 0 || self.vocab == 0 || self.max_seq == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.n_heads == 0 || !self.d.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "n_heads = {} must divide d = {}",
                self.n_heads, self.d
            )));
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerNorm {
    gain: Vec<f32>,
    bias: Vec<f32>,
}

impl LayerNorm {
    fn identity(d: usize) -> Self {
        LayerNorm {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }

    fn apply(&self, x: &[f32]) -> Vec<f32> {
        let n = x.len() as f64;
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        x.iter()
            .zip(self.gain.iter().zip(&self.bias))
            .map(|(&v, (&g, &b))| ((v as f64 - mean) * inv * g as f64 + b as f64) as f32)
            .collect()
    }
}

/// Row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq)]
struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn random(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                (z * std) as f32
            })
            .collect();
        Matrix { rows, cols, data }
    }

    fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn matvec(&self, x: &[f32]) -> Vec<f32> {
        (0..self.rows).map(|r| dot_lanes(self.row(r), x) as f32).collect()
    }

    fn set_col(&mut self, c: usize, v: &[f32]) {
        for (r, &x) in v.iter().enumerate() {
            self.data[r * self.cols + c] = x;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1: LayerNorm,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    ln2: LayerNorm,
    w_in: Matrix,
    b_in: Vec<f32>,
    w_out: Matrix,
    b_out: Vec<f32>,
}

/// Residual snapshots and logits of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `[position][vocab]`
    pub logits: Vec<Vec<f32>>,
    /// `[layer][position][d]`, taken after that layer's interventions.
    pub snapshots: Vec<Vec<Vec<f32>>>,
}

impl ForwardOutput {
    pub fn last_snapshot(&self, layer: usize) -> &[f32] {
        self.snapshots[layer].last().expect("non-empty sequence")
    }

    pub fn last_logits(&self) -> &[f32] {
        self.logits.last().expect("non-empty sequence")
    }
}

/// A small pre-norm decoder-only transformer. Immutable once built; forward
/// passes take `&self` and may run concurrently.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformer {
    config: ModelConfig,
    tok_emb: Matrix,
    pos_emb: Matrix,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    /// `None` when tied to `tok_emb`.
    unembed: Option<Matrix>,
}

/// f64 dot product over eight independent lanes so the loop vectorizes.
fn dot_lanes(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] as f64 * y[k] as f64;
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn gelu(x: f32) -> f32 {
    let x = x as f64;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())) as f32
}

impl ToyTransformer {
    /// Seeded random initialization.
    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        let c = config.resolved()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, ff) = (c.d, c.d_ff);
        let proj = (1.0 / d as f64).sqrt();
        let out_scale = proj / (2.0 * c.n_layers as f64).sqrt();
        let tok_emb = Matrix::random(c.vocab, d, 1.0, &mut rng);
        let pos_emb = Matrix::random(c.max_seq, d, 0.1, &mut rng);
        let blocks = (0..c.n_layers)
            .map(|_| Block {
                ln1: LayerNorm::identity(d),
                wq: Matrix::random(d, d, proj, &mut rng),
                wk: Matrix::random(d, d, proj, &mut rng),
                wv: Matrix::random(d, d, proj, &mut rng),
                wo: Matrix::random(d, d, out_scale, &mut rng),
                ln2: LayerNorm::identity(d),
                w_in: Matrix::random(ff, d, proj, &mut rng),
                b_in: vec![0.0; ff],
                w_out: Matrix::random(d, ff, (1.0 / ff as f64).sqrt() / (2.0 * c.n_layers as f64).sqrt(), &mut rng),
                b_out: vec![0.0; d],
            })
            .collect();
        let unembed = (!c.tied_unembedding).then(|| Matrix::random(c.vocab, d, proj, &mut rng));
        Ok(ToyTransformer {
            config: c,
            tok_emb,
            pos_emb,
            blocks,
            ln_f: LayerNorm::identity(d),
            unembed,
        })
    }

    /// All weights zero and norms at identity: every block is a no-op and the
    /// residual stream is just the (zero) embeddings.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let c = config.resolved()?;
        let (d, ff) = (c.d, c.d_ff);
        Ok(ToyTransformer {
            config: c,
            tok_emb: Matrix::zeros(c.vocab, d),
            pos_emb: Matrix::zeros(c.max_seq, d),
            blocks: (0..c.n_layers)
                .map(|_| Block {
                    ln1: LayerNorm::identity(d),
                    wq: Matrix::zeros(d, d),
                    wk: Matrix::zeros(d, d),
                    wv: Matrix::zeros(d, d),
                    wo: Matrix::zeros(d, d),
                    ln2: LayerNorm::identity(d),
                    w_in: Matrix::zeros(ff, d),
                    b_in: vec![0.0; ff],
                    w_out: Matrix::zeros(d, ff),
                    b_out: vec![0.0; d],
                })
                .collect(),
            ln_f: LayerNorm::identity(d),
            unembed: (!c.tied_unembedding).then(|| Matrix::zeros(c.vocab, d)),
        })
    }

    /// Random model whose attention is zeroed and whose MLPs each add
    /// `gain · gelu(3 + ⟨LN(h), u⟩) · u`, so the residual component along `u`
    /// is copied forward and amplified while other directions pass through
    /// unchanged. `u` is centered and normalized first. The unembedding rows for
    /// `target` and `baseline` are set to `+u` and `−u`.
    pub fn planted_copy_path(
        config: ModelConfig,
        seed: u64,
        direction: &[f32],
        gain: f32,
        target: u32,
        baseline: u32,
    ) -> Result<(Self, Vec<f32>)> {
        let mut m = Self::seeded(config, seed)?;
        let c = m.config;
        if direction.len() != c.d {
            return Err(Error::DimensionMismatch {
                expected: c.d,
                found: direction.len(),
            });
        }
        for t in [target, baseline] {
            if t as usize >= c.vocab {
                return Err(Error::TokenOutOfRange { token: t, vocab: c.vocab });
            }
        }
        let mean = direction.iter().map(|&x| x as f64).sum::<f64>() / c.d as f64;
        let centered: Vec<f32> = direction.iter().map(|&x| (x as f64 - mean) as f32).collect();
        let u = linalg::unit(&centered)?;
        for b in &mut m.blocks {
            for w in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo] {
                *w = Matrix::zeros(c.d, c.d);
            }
            b.w_in = Matrix::zeros(c.d_ff, c.d);
            b.w_in.row_mut(0).copy_from_slice(&u);
            b.b_in = vec![0.0; c.d_ff];
            b.b_in[0] = 3.0;
            b.w_out = Matrix::zeros(c.d, c.d_ff);
            b.w_out.set_col(0, &u.iter().map(|x| gain * x).collect::<Vec<_>>());
            b.b_out = vec![0.0; c.d];
        }
        let neg: Vec<f32> = u.iter().map(|x| -x).collect();
        let un = m.unembed_mut();
        un.row_mut(target as usize).copy_from_slice(&u);
        un.row_mut(baseline as usize).copy_from_slice(&neg);
        Ok((m, u))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn unembed(&self) -> &Matrix {
        self.unembed.as_ref().unwrap_or(&self.tok_emb)
    }

    fn unembed_mut(&mut self) -> &mut Matrix {
        match &mut self.unembed {
            Some(m) => m,
            None => &mut self.tok_emb,
        }
    }

    /// Row `token` of the unembedding matrix.
    pub fn unembedding_row(&self, token: u32) -> &[f32] {
        self.unembed().row(token as usize)
    }

    /// `W_U u` for a residual-space vector.
    pub fn unembed_vector(&self, u: &[f32]) -> Vec<f32> {
        self.unembed().matvec(u)
    }

    pub fn set_token_embedding(&mut self, token: u32, v: &[f32]) -> Result<()> {
        if token as usize >= self.config.vocab || v.len() != self.config.d {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: self.config.vocab,
            });
        }
        self.tok_emb.row_mut(token as usize).copy_from_slice(v);
        Ok(())
    }

    pub fn set_final_norm(&mut self, enabled: bool) {
        self.config.final_norm_enabled = enabled;
    }

    fn attention(&self, block: &Block, xs: &[Vec<f32>]) -> Vec<Vec<f32>> {
        let c = &self.config;
        let dh = c.d / c.n_heads;
        let normed: Vec<Vec<f32>> = xs.iter().map(|x| block.ln1.apply(x)).collect();
        let q: Vec<Vec<f32>> = normed.iter().map(|a| block.wq.matvec(a)).collect();
        let k: Vec<Vec<f32>> = normed.iter().map(|a| block.wk.matvec(a)).collect();
        let v: Vec<Vec<f32>> = normed.iter().map(|a| block.wv.matvec(a)).collect();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Vec::with_capacity(xs.len());
        for t in 0..xs.len() {
            let mut mixed = vec![0.0f32; c.d];
            for h in 0..c.n_heads {
                let r = h * dh..(h + 1) * dh;
                let scores: Vec<f64> = (0..=t)
                    .map(|s| linalg::dot(&q[t][r.clone()], &k[s][r.clone()]) * scale)
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = w.iter().sum();
                for i in r.clone() {
                    let acc: f64 = (0..=t).map(|s| w[s] * v[s][i] as f64).sum();
                    mixed[i] = (acc / z) as f32;
                }
            }
            out.push(block.wo.matvec(&mixed));
        }
        out
    }

    fn mlp(&self, block: &Block, x: &[f32]) -> Vec<f32> {
        let m = block.ln2.apply(x);
        let hidden: Vec<f32> = block
            .w_in
            .matvec(&m)
            .iter()
            .zip(&block.b_in)
            .map(|(&z, &b)| gelu(z + b))
            .collect();
        block
            .w_out
            .matvec(&hidden)
            .iter()
            .zip(&block.b_out)
            .map(|(&o, &b)| o + b)
            .collect()
    }

    /// Full forward pass. `prompt_len` anchors [`super::Scope::GeneratedOnly`].
    pub fn forward(&self, tokens: &[u32], plan: &InterventionPlan, prompt_len: usize) -> Result<ForwardOutput> {
        let c = &self.config;
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if tokens.len() > c.max_seq {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max_seq: c.max_seq,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= c.vocab) {
            return Err(Error::TokenOutOfRange { token: t, vocab: c.vocab });
        }
        plan.validate(c.d, c.n_layers)?;

        let n = tokens.len();
        let mut xs: Vec<Vec<f32>> = tokens
            .iter()
            .enumerate()
            .map(|(p, &t)| {
                self.tok_emb
                    .row(t as usize)
                    .iter()
                    .zip(self.pos_emb.row(p))
                    .map(|(a, b)| a + b)
                    .collect()
            })
            .collect();
        let mut snapshots = Vec::with_capacity(c.n_layers);
        for (layer, block) in self.blocks.iter().enumerate() {
            let attn = self.attention(block, &xs);
            for (x, a) in xs.iter_mut().zip(&attn) {
                x.iter_mut().zip(a).for_each(|(x, a)| *x += a);
            }
            for x in xs.iter_mut() {
                let m = self.mlp(block, x);
                x.iter_mut().zip(&m).for_each(|(x, m)| *x += m);
            }
            for step in plan.at_layer(layer) {
                for (p, x) in xs.iter_mut().enumerate() {
                    if step.scope.contains(p, n, prompt_len) {
                        step.apply(x);
                    }
                }
            }
            snapshots.push(xs.clone());
        }
        let un = self.unembed();
        let logits = xs
            .iter()
            .map(|x| {
                if c.final_norm_enabled {
                    un.matvec(&self.ln_f.apply(x))
                } else {
                    un.matvec(x)
                }
            })
            .collect();
        Ok(ForwardOutput { logits, snapshots })
    }

    pub fn to_tensors(&self) -> TensorFile {
        let c = &self.config;
        let mut tf = TensorFile::new();
        let vecs = |v: &[f32]| Tensor {
            shape: vec![v.len()],
            data: v.to_vec(),
        };
        let mat = |m: &Matrix| Tensor {
            shape: vec![m.rows, m.cols],
            data: m.data.clone(),
        };
        tf.insert(
            "config",
            vecs(&[
                c.d as f32,
                c.n_layers as f32,
                c.n_heads as f32,
                c.vocab as f32,
                c.max_seq as f32,
                c.d_ff as f32,
                c.final_norm_enabled as u8 as f32,
                c.tied_unembedding as u8 as f32,
            ]),
        );
        tf.insert("tok_emb", mat(&self.tok_emb));
        tf.insert("pos_emb", mat(&self.pos_emb));
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            tf.insert(format!("{p}.ln1.weight"), vecs(&b.ln1.gain));
            tf.insert(format!("{p}.ln1.bias"), vecs(&b.ln1.bias));
            tf.insert(format!("{p}.attn.wq"), mat(&b.wq));
            tf.insert(format!("{p}.attn.wk"), mat(&b.wk));
            tf.insert(format!("{p}.attn.wv"), mat(&b.wv));
            tf.insert(format!("{p}.attn.wo"), mat(&b.wo));
            tf.insert(format!("{p}.ln2.weight"), vecs(&b.ln2.gain));
            tf.insert(format!("{p}.ln2.bias"), vecs(&b.ln2.bias));
            tf.insert(format!("{p}.mlp.w_in"), mat(&b.w_in));
            tf.insert(format!("{p}.mlp.b_in"), vecs(&b.b_in));
            tf.insert(format!("{p}.mlp.w_out"), mat(&b.w_out));
            tf.insert(format!("{p}.mlp.b_out"), vecs(&b.b_out));
        }
        tf.insert("ln_f.weight", vecs(&self.ln_f.gain));
        tf.insert("ln_f.bias", vecs(&self.ln_f.bias));
        if let Some(u) = &self.unembed {
            tf.insert("unembed", mat(u));
        }
        tf
    }

    pub fn from_tensors(tf: &TensorFile) -> Result<Self> {
        let cfg = &tf.require("config", &[8])?.data;
        let as_usize = |x: f32| -> Result<usize> {
            if x >= 0.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(Error::Malformed(format!("config entry {x} is not a count")))
            }
        };
        let c = ModelConfig {
            d: as_usize(cfg[0])?,
            n_layers: as_usize(cfg[1])?,
            n_heads: as_usize(cfg[2])?,
            vocab: as_usize(cfg[3])?,
            max_seq: as_usize(cfg[4])?,
            d_ff: as_usize(cfg[5])?,
            final_norm_enabled: cfg[6] != 0.0,
            tied_unembedding: cfg[7] != 0.0,
        }
        .resolved()?;
        let (d, ff) = (c.d, c.d_ff);
        let mat = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
            Ok(Matrix {
                rows,
                cols,
                data: tf.require(name, &[rows, cols])?.data.clone(),
            })
        };
        let vecs = |name: &str, n: usize| -> Result<Vec<f32>> { Ok(tf.require(name, &[n])?.data.clone()) };
        let ln = |p: &str| -> Result<LayerNorm> {
            Ok(LayerNorm {
                gain: vecs(&format!("{p}.weight"), d)?,
                bias: vecs(&format!("{p}.bias"), d)?,
            })
        };
        let blocks = (0..c.n_layers)
            .map(|i| {
                let p = format!("blocks.{i}");
                Ok(Block {
                    ln1: ln(&format!("{p}.ln1"))?,
                    wq: mat(&format!("{p}.attn.wq"), d, d)?,
                    wk: mat(&format!("{p}.attn.wk"), d, d)?,
                    wv: mat(&format!("{p}.attn.wv"), d, d)?,
                    wo: mat(&format!("{p}.attn.wo"), d, d)?,
                    ln2: ln(&format!("{p}.ln2"))?,
                    w_in: mat(&format!("{p}.mlp.w_in"), ff, d)?,
                    b_in: vecs(&format!("{p}.mlp.b_in"), ff)?,
                    w_out: mat(&format!("{p}.mlp.w_out"), d, ff)?,
                    b_out: vecs(&format!("{p}.mlp.b_out"), d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ToyTransformer {
            config: c,
            tok_emb: mat("tok_emb", c.vocab, d)?,
            pos_emb: mat("pos_emb", c.max_seq, d)?,
            blocks,
            ln_f: ln("ln_f")?,
            unembed: if c.tied_unembedding {
                None
            } else {
                Some(mat("unembed", c.vocab, d)?)
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<u64> {
        write_tensors(&self.to_tensors(), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensors(&read_tensors(path)?)
    }
}
