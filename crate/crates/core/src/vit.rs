//! Transformer regressor over patchified concentration grids.
//!
//! A grid is zero-padded to patch multiples, flattened into per-patch tokens
//! (value channel + 0/1 validity channel), linearly embedded with learned
//! positional encodings, run through encoder blocks of multi-head
//! self-attention and GELU MLPs, and projected back to per-cell values by a
//! per-token linear head.
//!
//! The backward pass is written by hand, block by block, and verified against
//! central finite differences in the test suites.

use crate::grid::{Field, GridError, GridSpec};
use crate::nn::{self, LayerNormCache, NnError, Parameter, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VitError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Model hyperparameters. Defaults are the full-size configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    pub channels: usize,
    /// Pre-norm residual encoder when on; plain alternation of attention and
    /// MLP when off.
    pub use_norm_residual: bool,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 64,
            heads: 8,
            blocks: 12,
            mlp_hidden: 256,
            channels: 2,
            use_norm_residual: true,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<(), VitError> {
        if self.patch_size == 0
            || self.embed_dim == 0
            || self.heads == 0
            || self.blocks == 0
            || self.mlp_hidden == 0
            || self.channels == 0
        {
            return Err(VitError::Config("all dimension counts must be >= 1".into()));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(VitError::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Length of one flattened patch vector (p^2 * channels).
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Token count for a grid of the given dimensions after padding.
    pub fn tokens_for(&self, rows: usize, cols: usize) -> usize {
        let p = self.patch_size;
        rows.div_ceil(p) * cols.div_ceil(p)
    }
}

/// Original and padded grid dimensions for one patchify call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadInfo {
    pub orig_rows: usize,
    pub orig_cols: usize,
    pub padded_rows: usize,
    pub padded_cols: usize,
    pub patch: usize,
}

impl PadInfo {
    pub fn tokens(&self) -> usize {
        (self.padded_rows / self.patch) * (self.padded_cols / self.patch)
    }

    fn patches_per_row(&self) -> usize {
        self.padded_cols / self.patch
    }
}

/// Flattens a field into n x (p^2 c) patch rows. The grid is zero-padded on
/// the high edges to multiples of `p`; invalid and padded cells contribute
/// value 0, and when `with_mask_channel` is set a second channel carries cell
/// validity as 0/1. Patch layout is channel-major, then row-major in-patch.
pub fn patchify(field: &Field, p: usize, with_mask_channel: bool) -> (Tensor, PadInfo) {
    let (rows, cols) = (field.rows(), field.cols());
    let pad = PadInfo {
        orig_rows: rows,
        orig_cols: cols,
        padded_rows: rows.div_ceil(p) * p,
        padded_cols: cols.div_ceil(p) * p,
        patch: p,
    };
    let channels = if with_mask_channel { 2 } else { 1 };
    let n = pad.tokens();
    let plen = p * p * channels;
    let mut out = Tensor::zeros(&[n, plen]);
    let od = out.data_mut();
    let ppr = pad.patches_per_row();
    for t in 0..n {
        let pr = t / ppr;
        let pc = t % ppr;
        let base = t * plen;
        for dr in 0..p {
            let r = pr * p + dr;
            if r >= rows {
                continue;
            }
            for dc in 0..p {
                let c = pc * p + dc;
                if c >= cols {
                    continue;
                }
                if let Some(v) = field.try_get(r, c) {
                    od[base + dr * p + dc] = v;
                    if with_mask_channel {
                        od[base + p * p + dr * p + dc] = 1.0;
                    }
                }
            }
        }
    }
    (out, pad)
}

/// Inverse of `patchify` for single-channel token outputs: scatters n x p^2
/// rows back onto the original grid extent. The result is valid everywhere.
pub fn unpatchify(tokens: &Tensor, pad: &PadInfo, spec: &GridSpec) -> Result<Field, VitError> {
    let p = pad.patch;
    let n = pad.tokens();
    if tokens.rows() != n || tokens.cols() != p * p {
        return Err(VitError::Config(format!(
            "unpatchify expects {n} x {} tokens, got {:?}",
            p * p,
            tokens.shape()
        )));
    }
    let mut values = vec![0.0; pad.orig_rows * pad.orig_cols];
    let ppr = pad.patches_per_row();
    let td = tokens.data();
    for t in 0..n {
        let pr = t / ppr;
        let pc = t % ppr;
        for dr in 0..p {
            let r = pr * p + dr;
            if r >= pad.orig_rows {
                continue;
            }
            for dc in 0..p {
                let c = pc * p + dc;
                if c >= pad.orig_cols {
                    continue;
                }
                values[r * pad.orig_cols + c] = td[t * p * p + dr * p + dc];
            }
        }
    }
    let mask = vec![true; values.len()];
    Ok(Field::from_parts(spec, values, mask)?)
}

/// Patch projection weights plus the learned positional table.
#[derive(Debug, Clone)]
pub struct PatchEmbedding {
    /// d x (p^2 c), applied per patch vector.
    pub weight: Parameter,
    /// Length d.
    pub bias: Parameter,
    /// n_max x d learned positional encodings.
    pub positional: Parameter,
}

/// E = patches . W^T + b + positional[0..n].
pub fn embed(patches: &Tensor, pe: &PatchEmbedding) -> Result<Tensor, VitError> {
    let n = patches.rows();
    let n_max = pe.positional.tensor.rows();
    if n > n_max {
        return Err(VitError::Config(format!(
            "{n} tokens exceed positional table length {n_max}"
        )));
    }
    let mut e = nn::add_bias(&nn::matmul_nt(patches, &pe.weight.tensor)?, &pe.bias.tensor)?;
    let d = e.cols();
    let pos = pe.positional.tensor.data();
    for (i, row) in e.data_mut().chunks_exact_mut(d).enumerate() {
        for (v, &p) in row.iter_mut().zip(&pos[i * d..(i + 1) * d]) {
            *v += p;
        }
    }
    Ok(e)
}

/// One encoder block: per-head Q/K/V projections, output projection, and a
/// two-layer GELU MLP, with pre-norm gains/biases.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub wq: Vec<Parameter>,
    pub wk: Vec<Parameter>,
    pub wv: Vec<Parameter>,
    /// (h * d_k) x d output projection.
    pub wo: Parameter,
    /// d x d_ff.
    pub w1: Parameter,
    /// d_ff x d.
    pub w2: Parameter,
    pub ln1_gain: Parameter,
    pub ln1_bias: Parameter,
    pub ln2_gain: Parameter,
    pub ln2_bias: Parameter,
}

/// Scaled dot-product attention for one head: softmax(Q K^T / sqrt(d_k)) V.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor, VitError> {
    let d_k = q.cols();
    let scores = nn::scale(&nn::matmul_nt(q, k)?, 1.0 / (d_k as f64).sqrt());
    let probs = nn::softmax_rows(&scores)?;
    Ok(nn::matmul(&probs, v)?)
}

/// Multi-head self-attention: per-head projections of `x`, concatenation, and
/// the output projection. No residual or normalization here.
pub fn multi_head(x: &Tensor, block: &EncoderBlock) -> Result<Tensor, VitError> {
    let mut heads = Vec::with_capacity(block.wq.len());
    for ((wq, wk), wv) in block.wq.iter().zip(&block.wk).zip(&block.wv) {
        let q = nn::matmul(x, &wq.tensor)?;
        let k = nn::matmul(x, &wk.tensor)?;
        let v = nn::matmul(x, &wv.tensor)?;
        heads.push(attention(&q, &k, &v)?);
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    let m = nn::concat_last_axis(&refs)?;
    Ok(nn::matmul(&m, &block.wo.tensor)?)
}

/// Saved activations for one block's backward pass.
#[derive(Debug, Clone)]
pub struct BlockCache {
    pub x_in: Tensor,
    pub ln1: Option<LayerNormCache>,
    pub x1: Tensor,
    pub q: Vec<Tensor>,
    pub k: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Per-head attention probabilities, each n x n with unit row sums.
    pub att: Vec<Tensor>,
    pub concat: Tensor,
    pub x2: Tensor,
    pub ln2: Option<LayerNormCache>,
    pub x3: Tensor,
    pub g1: Tensor,
    pub g2: Tensor,
}

/// Full forward state of one sample, consumed by `ViTRegressor::backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub pad: PadInfo,
    pub patches: Tensor,
    pub emb: Tensor,
    pub blocks: Vec<BlockCache>,
    pub tokens_final: Tensor,
}

/// Per-parameter gradients in the model's canonical parameter order.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub grads: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn accumulate(&mut self, other: &ParamGrads) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// The full regressor: embedding, encoder blocks, and the per-token output
/// head projecting back to p^2 cell values.
#[derive(Debug, Clone)]
pub struct ViTRegressor {
    pub config: ViTConfig,
    pub n_max: usize,
    pub embedding: PatchEmbedding,
    pub blocks: Vec<EncoderBlock>,
    pub head_weight: Parameter,
    pub head_bias: Parameter,
}

fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_vec(data, shape)
}

impl ViTRegressor {
    /// Seeded initialization: uniform +/- sqrt(6/(fan_in+fan_out)) weights,
    /// zero biases, unit norm gains.
    pub fn init(config: ViTConfig, n_max: usize, seed: u64) -> Result<Self, VitError> {
        config.validate()?;
        if n_max == 0 {
            return Err(VitError::Config(
                "positional table must hold >= 1 token".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let dk = config.head_dim();
        let plen = config.patch_len();
        let p2 = config.patch_size * config.patch_size;

        // the positional table is not a fan-in/fan-out weight; give it enough
        // magnitude that tokens are positionally distinguishable from step one
        let pos_limit = 3.0;
        let pos_data: Vec<f64> = (0..n_max * d)
            .map(|_| rng.gen_range(-pos_limit..pos_limit))
            .collect();
        let embedding = PatchEmbedding {
            weight: Parameter::new("embed.weight", uniform_init(&mut rng, &[d, plen], plen, d)),
            bias: Parameter::new("embed.bias", Tensor::zeros(&[d])),
            positional: Parameter::new(
                "embed.pos",
                Tensor::from_vec(pos_data, &[n_max, d]),
            ),
        };

        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let mk_heads = |rng: &mut ChaCha8Rng, tag: &str| -> Vec<Parameter> {
                (0..config.heads)
                    .map(|h| {
                        Parameter::new(
                            format!("block{b}.{tag}{h}"),
                            uniform_init(rng, &[d, dk], d, dk),
                        )
                    })
                    .collect()
            };
            let wq = mk_heads(&mut rng, "q");
            let wk = mk_heads(&mut rng, "k");
            let wv = mk_heads(&mut rng, "v");
            blocks.push(EncoderBlock {
                wq,
                wk,
                wv,
                wo: Parameter::new(
                    format!("block{b}.wo"),
                    uniform_init(&mut rng, &[config.heads * dk, d], config.heads * dk, d),
                ),
                w1: Parameter::new(
                    format!("block{b}.mlp1"),
                    uniform_init(&mut rng, &[d, config.mlp_hidden], d, config.mlp_hidden),
                ),
                w2: Parameter::new(
                    format!("block{b}.mlp2"),
                    uniform_init(&mut rng, &[config.mlp_hidden, d], config.mlp_hidden, d),
                ),
                ln1_gain: Parameter::new(
                    format!("block{b}.ln1.gain"),
                    Tensor::from_vec(vec![1.0; d], &[d]),
                ),
                ln1_bias: Parameter::new(format!("block{b}.ln1.bias"), Tensor::zeros(&[d])),
                ln2_gain: Parameter::new(
                    format!("block{b}.ln2.gain"),
                    Tensor::from_vec(vec![1.0; d], &[d]),
                ),
                ln2_bias: Parameter::new(format!("block{b}.ln2.bias"), Tensor::zeros(&[d])),
            });
        }

        Ok(Self {
            config,
            n_max,
            embedding,
            blocks,
            head_weight: Parameter::new("head.weight", uniform_init(&mut rng, &[d, p2], d, p2)),
            head_bias: Parameter::new("head.bias", Tensor::zeros(&[p2])),
        })
    }

    /// Parameters in canonical (checkpoint and gradient-buffer) order.
    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = vec![
            &self.embedding.weight,
            &self.embedding.bias,
            &self.embedding.positional,
        ];
        for b in &self.blocks {
            out.extend(b.wq.iter());
            out.extend(b.wk.iter());
            out.extend(b.wv.iter());
            out.push(&b.wo);
            out.push(&b.w1);
            out.push(&b.w2);
            out.push(&b.ln1_gain);
            out.push(&b.ln1_bias);
            out.push(&b.ln2_gain);
            out.push(&b.ln2_bias);
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = vec![
            &mut self.embedding.weight,
            &mut self.embedding.bias,
            &mut self.embedding.positional,
        ];
        for b in &mut self.blocks {
            out.extend(b.wq.iter_mut());
            out.extend(b.wk.iter_mut());
            out.extend(b.wv.iter_mut());
            out.push(&mut b.wo);
            out.push(&mut b.w1);
            out.push(&mut b.w2);
            out.push(&mut b.ln1_gain);
            out.push(&mut b.ln1_bias);
            out.push(&mut b.ln2_gain);
            out.push(&mut b.ln2_bias);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.parameters_mut() {
            p.tensor.zero_grad();
        }
    }

    pub fn empty_grads(&self) -> ParamGrads {
        ParamGrads {
            grads: self
                .parameters()
                .iter()
                .map(|p| vec![0.0; p.tensor.len()])
                .collect(),
        }
    }

    /// Adds a gradient buffer into each parameter's grad slot.
    pub fn accumulate_into_params(&mut self, grads: &ParamGrads) {
        let mut params = self.parameters_mut();
        assert_eq!(params.len(), grads.grads.len(), "gradient buffer mismatch");
        for (p, g) in params.iter_mut().zip(&grads.grads) {
            p.accumulate_grad(g);
        }
    }

    pub fn forward(&self, field: &Field) -> Result<Field, VitError> {
        self.forward_cached(field).map(|(f, _)| f)
    }

    /// Forward pass retaining every activation needed by `backward`.
    pub fn forward_cached(&self, field: &Field) -> Result<(Field, ForwardCache), VitError> {
        let with_mask = self.config.channels == 2;
        let (patches, pad) = patchify(field, self.config.patch_size, with_mask);
        let emb = embed(&patches, &self.embedding)?;
        let mut x = emb.clone();
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (x_out, cache) = self.block_forward(block, x)?;
            block_caches.push(cache);
            x = x_out;
        }
        let out_tokens = nn::add_bias(
            &nn::matmul(&x, &self.head_weight.tensor)?,
            &self.head_bias.tensor,
        )?;
        let pred = unpatchify(&out_tokens, &pad, field.spec())?;
        Ok((
            pred,
            ForwardCache {
                pad,
                patches,
                emb,
                blocks: block_caches,
                tokens_final: x,
            },
        ))
    }

    fn block_forward(
        &self,
        block: &EncoderBlock,
        x: Tensor,
    ) -> Result<(Tensor, BlockCache), VitError> {
        let norm_res = self.config.use_norm_residual;
        let (x1, ln1) = if norm_res {
            let (t, c) = nn::layer_norm(&x, &block.ln1_gain.tensor, &block.ln1_bias.tensor)?;
            (t, Some(c))
        } else {
            (x.clone(), None)
        };
        let h = self.config.heads;
        let inv_sqrt_dk = 1.0 / (self.config.head_dim() as f64).sqrt();
        let mut q = Vec::with_capacity(h);
        let mut k = Vec::with_capacity(h);
        let mut v = Vec::with_capacity(h);
        let mut att = Vec::with_capacity(h);
        let mut outs = Vec::with_capacity(h);
        for i in 0..h {
            let qi = nn::matmul(&x1, &block.wq[i].tensor)?;
            let ki = nn::matmul(&x1, &block.wk[i].tensor)?;
            let vi = nn::matmul(&x1, &block.wv[i].tensor)?;
            let scores = nn::scale(&nn::matmul_nt(&qi, &ki)?, inv_sqrt_dk);
            let probs = nn::softmax_rows(&scores)?;
            outs.push(nn::matmul(&probs, &vi)?);
            q.push(qi);
            k.push(ki);
            v.push(vi);
            att.push(probs);
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        let concat = nn::concat_last_axis(&refs)?;
        let att_out = nn::matmul(&concat, &block.wo.tensor)?;
        let x2 = if norm_res {
            nn::add(&x, &att_out)?
        } else {
            att_out
        };
        let (x3, ln2) = if norm_res {
            let (t, c) = nn::layer_norm(&x2, &block.ln2_gain.tensor, &block.ln2_bias.tensor)?;
            (t, Some(c))
        } else {
            (x2.clone(), None)
        };
        let g1 = nn::matmul(&x3, &block.w1.tensor)?;
        let g2 = nn::gelu(&g1);
        let mlp = nn::matmul(&g2, &block.w2.tensor)?;
        let x_out = if norm_res { nn::add(&x2, &mlp)? } else { mlp };
        Ok((
            x_out,
            BlockCache {
                x_in: x,
                ln1,
                x1,
                q,
                k,
                v,
                att,
                concat,
                x2,
                ln2,
                x3,
                g1,
                g2,
            },
        ))
    }

    /// Backpropagates a gradient on the predicted grid (row-major, original
    /// extent) into per-parameter gradients. Does not mutate the model, so
    /// samples of a batch can run concurrently.
    pub fn backward(&self, cache: &ForwardCache, d_pred_grid: &[f64]) -> ParamGrads {
        let pad = &cache.pad;
        assert_eq!(
            d_pred_grid.len(),
            pad.orig_rows * pad.orig_cols,
            "prediction gradient must cover the original grid"
        );
        let p = pad.patch;
        let n = pad.tokens();
        // adjoint of unpatchify: scatter grid gradient into token rows
        let mut d_tokens_out = Tensor::zeros(&[n, p * p]);
        {
            let dt = d_tokens_out.data_mut();
            let ppr = pad.patches_per_row();
            for (i, &g) in d_pred_grid.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let r = i / pad.orig_cols;
                let c = i % pad.orig_cols;
                let t = (r / p) * ppr + c / p;
                dt[t * p * p + (r % p) * p + (c % p)] = g;
            }
        }

        let mut grads = self.empty_grads();
        // canonical layout: 3 embedding tensors, then per block, then head
        let per_block = 3 * self.config.heads + 7;
        let head_w_idx = 3 + self.blocks.len() * per_block;

        // head: out = tokens_final . W + b
        let d_head_w = nn::matmul_tn(&cache.tokens_final, &d_tokens_out).unwrap();
        let d_head_b = nn::add_bias_backward(&d_tokens_out);
        grads.grads[head_w_idx].copy_from_slice(d_head_w.data());
        grads.grads[head_w_idx + 1].copy_from_slice(d_head_b.data());
        let mut d_x = nn::matmul_nt(&d_tokens_out, &self.head_weight.tensor).unwrap();

        for (bi, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let base = 3 + bi * per_block;
            d_x = self.block_backward(block, bc, d_x, &mut grads.grads[base..base + per_block]);
        }

        // embedding: E = patches . W^T + b + pos[0..n]
        let d_emb = d_x;
        let d_w = nn::matmul_tn(&d_emb, &cache.patches).unwrap();
        let d_b = nn::add_bias_backward(&d_emb);
        grads.grads[0].copy_from_slice(d_w.data());
        grads.grads[1].copy_from_slice(d_b.data());
        let d = self.config.embed_dim;
        grads.grads[2][..n * d].copy_from_slice(d_emb.data());
        grads
    }

    fn block_backward(
        &self,
        block: &EncoderBlock,
        bc: &BlockCache,
        d_out: Tensor,
        g: &mut [Vec<f64>],
    ) -> Tensor {
        let norm_res = self.config.use_norm_residual;
        let h = self.config.heads;
        let dk = self.config.head_dim();
        let inv_sqrt_dk = 1.0 / (dk as f64).sqrt();
        // slot offsets within this block's gradient slice
        let (qo, ko, vo) = (0, h, 2 * h);
        let wo_i = 3 * h;
        let (w1_i, w2_i) = (3 * h + 1, 3 * h + 2);
        let (ln1g_i, ln1b_i, ln2g_i, ln2b_i) = (3 * h + 3, 3 * h + 4, 3 * h + 5, 3 * h + 6);

        // x_out = x2 + mlp | mlp;  mlp = gelu(x3 . w1) . w2
        let d_mlp = &d_out;
        let d_g2 = nn::matmul_nt(d_mlp, &block.w2.tensor).unwrap();
        let d_w2 = nn::matmul_tn(&bc.g2, d_mlp).unwrap();
        g[w2_i].copy_from_slice(d_w2.data());
        let d_g1 = nn::gelu_backward(&bc.g1, &d_g2);
        let d_x3 = nn::matmul_nt(&d_g1, &block.w1.tensor).unwrap();
        let d_w1 = nn::matmul_tn(&bc.x3, &d_g1).unwrap();
        g[w1_i].copy_from_slice(d_w1.data());

        let d_x2 = if norm_res {
            let (d_from_ln, d_g_ln, d_b_ln) =
                nn::layer_norm_backward(bc.ln2.as_ref().unwrap(), &block.ln2_gain.tensor, &d_x3);
            g[ln2g_i].copy_from_slice(d_g_ln.data());
            g[ln2b_i].copy_from_slice(d_b_ln.data());
            nn::add(&d_out, &d_from_ln).unwrap()
        } else {
            d_x3
        };

        // x2 = x + att | att;  att = concat(heads) . wo
        let d_att = &d_x2;
        let d_concat = nn::matmul_nt(d_att, &block.wo.tensor).unwrap();
        let d_wo = nn::matmul_tn(&bc.concat, d_att).unwrap();
        g[wo_i].copy_from_slice(d_wo.data());

        let d_heads = nn::split_last_axis(&d_concat, &vec![dk; h]).unwrap();
        let mut d_x1 = Tensor::zeros(bc.x1.shape());
        for i in 0..h {
            let d_h = &d_heads[i];
            // head = att_probs . v
            let d_a = nn::matmul_nt(d_h, &bc.v[i]).unwrap();
            let d_v = nn::matmul_tn(&bc.att[i], d_h).unwrap();
            let d_s = nn::softmax_rows_backward(&bc.att[i], &d_a);
            // s = (q . k^T) / sqrt(dk)
            let d_q = nn::scale(&nn::matmul(&d_s, &bc.k[i]).unwrap(), inv_sqrt_dk);
            let d_k = nn::scale(&nn::matmul_tn(&d_s, &bc.q[i]).unwrap(), inv_sqrt_dk);

            g[qo + i].copy_from_slice(nn::matmul_tn(&bc.x1, &d_q).unwrap().data());
            g[ko + i].copy_from_slice(nn::matmul_tn(&bc.x1, &d_k).unwrap().data());
            g[vo + i].copy_from_slice(nn::matmul_tn(&bc.x1, &d_v).unwrap().data());

            let mut acc = nn::matmul_nt(&d_q, &block.wq[i].tensor).unwrap();
            acc = nn::add(&acc, &nn::matmul_nt(&d_k, &block.wk[i].tensor).unwrap()).unwrap();
            acc = nn::add(&acc, &nn::matmul_nt(&d_v, &block.wv[i].tensor).unwrap()).unwrap();
            d_x1 = nn::add(&d_x1, &acc).unwrap();
        }

        if norm_res {
            let (d_from_ln, d_g_ln, d_b_ln) =
                nn::layer_norm_backward(bc.ln1.as_ref().unwrap(), &block.ln1_gain.tensor, &d_x1);
            g[ln1g_i].copy_from_slice(d_g_ln.data());
            g[ln1b_i].copy_from_slice(d_b_ln.data());
            nn::add(&d_x2, &d_from_ln).unwrap()
        } else {
            d_x1
        }
    }

    /// Encoder stack applied to already-embedded tokens. Exposed so the
    /// permutation-equivariance property can be tested directly.
    pub fn encode_tokens(&self, emb: &Tensor) -> Result<Tensor, VitError> {
        let mut x = emb.clone();
        for block in &self.blocks {
            let (x_out, _) = self.block_forward(block, x)?;
            x = x_out;
        }
        Ok(x)
    }
}
