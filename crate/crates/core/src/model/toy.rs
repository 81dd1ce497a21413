use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    check_hooked_weights, AttentionHook, DiffusionModel, ForwardTrace, ModelConfig, ModelError,
    SequenceView,
};
use crate::cache::CacheView;
use crate::numerics::{layer_norm_into, softmax_into, vec_matmul_into, Matrix};

struct Block {
    ln1_gain: Vec<f64>,
    ln1_bias: Vec<f64>,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    ln2_gain: Vec<f64>,
    ln2_bias: Vec<f64>,
    w_in: Matrix,
    b_in: Vec<f64>,
    w_out: Matrix,
    b_out: Vec<f64>,
}

/// Seeded, untrained pre-norm transformer with bidirectional attention.
///
/// Weights are drawn from ChaCha8 seeded with `config.seed`, in a fixed
/// order: token embeddings, position embeddings, then per block
/// `wq, wk, wv, wo, w_in, w_out`, then the unembedding. Matrices use
/// N(0, 1/fan_in); embeddings N(0, 1). Norm gains start at 1 and all
/// biases at 0.
pub struct ToyModel {
    config: ModelConfig,
    token_embedding: Matrix,
    position_embedding: Matrix,
    blocks: Vec<Block>,
    final_gain: Vec<f64>,
    final_bias: Vec<f64>,
    unembedding: Matrix,
    unembedding_bias: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

impl ToyModel {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.model_dim;
        let ff = config.ffn_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let token_embedding = gaussian(&mut rng, config.vocab_size, d, 1.0);
        let position_embedding = gaussian(&mut rng, config.max_seq_len, d, 1.0);
        let proj_std = 1.0 / (d as f64).sqrt();
        let blocks = (0..config.layers)
            .map(|_| Block {
                ln1_gain: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                wq: gaussian(&mut rng, d, d, proj_std),
                wk: gaussian(&mut rng, d, d, proj_std),
                wv: gaussian(&mut rng, d, d, proj_std),
                wo: gaussian(&mut rng, d, d, proj_std),
                ln2_gain: vec![1.0; d],
                ln2_bias: vec![0.0; d],
                w_in: gaussian(&mut rng, d, ff, proj_std),
                b_in: vec![0.0; ff],
                w_out: gaussian(&mut rng, ff, d, 1.0 / (ff as f64).sqrt()),
                b_out: vec![0.0; d],
            })
            .collect();
        let unembedding = gaussian(&mut rng, d, config.vocab_size, proj_std);
        Ok(Self {
            token_embedding,
            position_embedding,
            blocks,
            final_gain: vec![1.0; d],
            final_bias: vec![0.0; d],
            unembedding,
            unembedding_bias: vec![0.0; config.vocab_size],
            config,
        })
    }

    pub fn with_unembedding_bias(mut self, bias: Vec<f64>) -> Result<Self, ModelError> {
        if bias.len() != self.config.vocab_size {
            return Err(ModelError::DimensionMismatch {
                expected: format!("{} bias entries", self.config.vocab_size),
                got: bias.len().to_string(),
            });
        }
        self.unembedding_bias = bias;
        Ok(self)
    }

    pub fn final_norm(&self) -> (&[f64], &[f64]) {
        (&self.final_gain, &self.final_bias)
    }

    pub fn unembedding(&self) -> (&Matrix, &[f64]) {
        (&self.unembedding, &self.unembedding_bias)
    }

    /// Projects one layer's hidden rows through the final norm and unembedding.
    pub fn logit_lens(&self, hidden: &Matrix) -> Result<Matrix, ModelError> {
        let d = self.config.model_dim;
        if hidden.cols() != d {
            return Err(ModelError::DimensionMismatch {
                expected: format!("{d} hidden columns"),
                got: hidden.cols().to_string(),
            });
        }
        let v = self.config.vocab_size;
        let mut out = Matrix::zeros(hidden.rows(), v);
        let mut normed = vec![0.0; d];
        for i in 0..hidden.rows() {
            layer_norm_into(
                hidden.row(i),
                &self.final_gain,
                &self.final_bias,
                &mut normed,
            );
            let row = out.row_mut(i);
            vec_matmul_into(&normed, &self.unembedding, row);
            for (o, b) in row.iter_mut().zip(&self.unembedding_bias) {
                *o += b;
            }
        }
        Ok(out)
    }

    fn embed(&self, seq: &SequenceView<'_>) -> Matrix {
        let d = self.config.model_dim;
        let mut x = Matrix::zeros(seq.len(), d);
        for (p, &tok) in seq.tokens.iter().enumerate() {
            let te = self.token_embedding.row(tok as usize);
            let pe = self.position_embedding.row(p);
            for ((o, a), b) in x.row_mut(p).iter_mut().zip(te).zip(pe) {
                *o = a + b;
            }
        }
        x
    }

    fn block_forward(
        &self,
        layer: usize,
        x: &Matrix,
        hook: Option<&dyn AttentionHook>,
    ) -> Result<(Matrix, Vec<Matrix>), ModelError> {
        let block = &self.blocks[layer];
        let n = x.rows();
        let d = self.config.model_dim;
        let heads = self.config.heads;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        let mut normed = Matrix::zeros(n, d);
        for i in 0..n {
            layer_norm_into(
                x.row(i),
                &block.ln1_gain,
                &block.ln1_bias,
                normed.row_mut(i),
            );
        }
        let mut q = Matrix::zeros(n, d);
        let mut k = Matrix::zeros(n, d);
        let mut v = Matrix::zeros(n, d);
        for i in 0..n {
            vec_matmul_into(normed.row(i), &block.wq, q.row_mut(i));
            vec_matmul_into(normed.row(i), &block.wk, k.row_mut(i));
            vec_matmul_into(normed.row(i), &block.wv, v.row_mut(i));
        }

        let mut mixed = Matrix::zeros(n, d);
        let mut weights_per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let mut scores = Matrix::zeros(n, n);
            for i in 0..n {
                let qi = &q.row(i)[cols.clone()];
                for j in 0..n {
                    let kj = &k.row(j)[cols.clone()];
                    let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    scores.set(i, j, dot * scale);
                }
            }
            if let Some(hook) = hook {
                hook.bias_scores(layer, h, &mut scores);
            }
            let mut weights = Matrix::zeros(n, n);
            for i in 0..n {
                softmax_into(scores.row(i), weights.row_mut(i));
            }
            if let Some(hook) = hook {
                hook.transform_weights(layer, h, &mut weights);
                check_hooked_weights(layer, h, &weights)?;
            }
            for i in 0..n {
                let out = &mut mixed.row_mut(i)[cols.clone()];
                for j in 0..n {
                    let w = weights.get(i, j);
                    if w == 0.0 {
                        continue;
                    }
                    for (o, vv) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *o += w * vv;
                    }
                }
            }
            weights_per_head.push(weights);
        }

        let ff = self.config.ffn_dim();
        let mut out = Matrix::zeros(n, d);
        let mut attn_out = vec![0.0; d];
        let mut y = vec![0.0; d];
        let mut y_norm = vec![0.0; d];
        let mut inner = vec![0.0; ff];
        let mut ffn = vec![0.0; d];
        for i in 0..n {
            vec_matmul_into(mixed.row(i), &block.wo, &mut attn_out);
            for ((yy, a), b) in y.iter_mut().zip(x.row(i)).zip(&attn_out) {
                *yy = a + b;
            }
            layer_norm_into(&y, &block.ln2_gain, &block.ln2_bias, &mut y_norm);
            vec_matmul_into(&y_norm, &block.w_in, &mut inner);
            for (u, b) in inner.iter_mut().zip(&block.b_in) {
                *u = gelu(*u + b);
            }
            vec_matmul_into(&inner, &block.w_out, &mut ffn);
            for (((o, yy), f), b) in out
                .row_mut(i)
                .iter_mut()
                .zip(&y)
                .zip(&ffn)
                .zip(&block.b_out)
            {
                *o = yy + f + b;
            }
        }
        Ok((out, weights_per_head))
    }
}

impl DiffusionModel for ToyModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn forward(
        &self,
        seq: &SequenceView<'_>,
        hook: Option<&dyn AttentionHook>,
        cache: Option<&CacheView<'_>>,
    ) -> Result<ForwardTrace, ModelError> {
        seq.check(&self.config)?;
        let n = seq.len();
        let mut x = self.embed(seq);
        let mut hidden = Vec::with_capacity(self.config.layers);
        let mut attention = Vec::with_capacity(self.config.layers);
        for layer in 0..self.config.layers {
            let (mut out, mut weights) = self.block_forward(layer, &x, hook)?;
            if let Some(view) = cache {
                // reused rows feed the next layer's keys and values
                for p in (0..n).filter(|&p| view.is_reused(p)) {
                    out.row_mut(p)
                        .copy_from_slice(view.state.hidden_row(layer, p)?);
                    for (h, w) in weights.iter_mut().enumerate() {
                        w.row_mut(p)
                            .copy_from_slice(view.state.attention_row(layer, h, p)?);
                    }
                }
            }
            x = out.clone();
            hidden.push(out);
            attention.push(weights);
        }
        let lens_logits = hidden
            .iter()
            .map(|h| self.logit_lens(h))
            .collect::<Result<Vec<_>, _>>()?;
        let final_logits = lens_logits.last().expect("at least one layer").clone();
        let recomputed = match cache {
            Some(view) => view.plan.recompute.clone(),
            None => vec![true; n],
        };
        Ok(ForwardTrace {
            attention,
            hidden,
            lens_logits,
            final_logits,
            recomputed,
        })
    }

    fn probe_features(&self, seq: &SequenceView<'_>) -> Result<Matrix, ModelError> {
        let trace = self.forward(seq, None, None)?;
        Ok(trace.hidden.last().expect("at least one layer").clone())
    }
}
