//! Dual unimodal encoders mapping a pose sequence or a token sequence to
//! a unit-norm embedding in the shared space.
//!
//! Both branches share one pipeline shape: embed each sequence element,
//! add a sinusoidal positional encoding, aggregate over the sequence with
//! a learnable-query attention pool, project into the joint space, and
//! l2-normalize. The motion branch embeds frames with a linear layer; the
//! text branch looks rows up in a trainable token table. Backward passes
//! are exact, including the softmax and normalization Jacobians.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, l2_normalize, norm, Matrix};
use crate::rng::Rng;

/// Dimensions shared by both branches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Per-frame pose feature width (D_p).
    pub pose_dim: usize,
    /// Motion branch hidden width (D_l). Must be even for the positional
    /// encoding.
    pub latent_dim: usize,
    /// Text branch hidden width (D_w). Must be even.
    pub word_dim: usize,
    /// Joint embedding space width (D).
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub max_frames: usize,
    pub max_tokens: usize,
}

impl EncoderConfig {
    /// Desk-scale dimensions around a corpus-determined pose width and
    /// vocabulary.
    pub fn defaults_for(pose_dim: usize, vocab_size: usize) -> Self {
        EncoderConfig {
            pose_dim,
            latent_dim: 32,
            word_dim: 32,
            embed_dim: 32,
            vocab_size,
            max_frames: 1000,
            max_tokens: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("pose_dim", self.pose_dim),
            ("latent_dim", self.latent_dim),
            ("word_dim", self.word_dim),
            ("embed_dim", self.embed_dim),
            ("vocab_size", self.vocab_size),
            ("max_frames", self.max_frames),
            ("max_tokens", self.max_tokens),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.latent_dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "latent_dim must be even for the positional encoding, got {}",
                self.latent_dim
            )));
        }
        if self.word_dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "word_dim must be even for the positional encoding, got {}",
                self.word_dim
            )));
        }
        Ok(())
    }
}

/// Variable-length motion sample: an F x pose_dim matrix, one row per
/// frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSequence {
    values: Matrix,
}

impl PoseSequence {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 {
            return Err(Error::InvalidBatch("pose sequence has no frames".into()));
        }
        Ok(PoseSequence { values })
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }
}

/// Variable-length text sample as token ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidBatch("token sequence is empty".into()));
        }
        Ok(TokenSequence { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }
}

/// Unit-norm vector in the joint space. Only produced by the encoders,
/// so the norm invariant holds by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct JointEmbedding(Vec<f64>);

impl JointEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Motion branch parameters: linear frame embedding, pooling query,
/// joint-space projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    /// pose_dim x latent_dim
    pub embed: Matrix,
    pub embed_bias: Vec<f64>,
    pub pool_query: Vec<f64>,
    /// latent_dim x embed_dim
    pub proj: Matrix,
    pub proj_bias: Vec<f64>,
}

/// Text branch parameters: token table, pooling query, projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextParams {
    /// vocab_size x word_dim
    pub table: Matrix,
    pub pool_query: Vec<f64>,
    /// word_dim x embed_dim
    pub proj: Matrix,
    pub proj_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub motion: MotionParams,
    pub text: TextParams,
}

/// Gradients in parameter-shaped containers, same layout as
/// `EncoderParams`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub motion: MotionParams,
    pub text: TextParams,
}

/// Fixed tensor visit order used by the optimizer and the checkpoint
/// writer. Order: motion embed, motion embed bias, motion pool query,
/// motion proj, motion proj bias, text table, text pool query, text
/// proj, text proj bias.
macro_rules! impl_tensor_views {
    ($name:ident) => {
        impl $name {
            pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
                vec![
                    ("motion.embed", self.motion.embed.data()),
                    ("motion.embed_bias", self.motion.embed_bias.as_slice()),
                    ("motion.pool_query", self.motion.pool_query.as_slice()),
                    ("motion.proj", self.motion.proj.data()),
                    ("motion.proj_bias", self.motion.proj_bias.as_slice()),
                    ("text.table", self.text.table.data()),
                    ("text.pool_query", self.text.pool_query.as_slice()),
                    ("text.proj", self.text.proj.data()),
                    ("text.proj_bias", self.text.proj_bias.as_slice()),
                ]
            }

            pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
                vec![
                    ("motion.embed", self.motion.embed.data_mut()),
                    ("motion.embed_bias", self.motion.embed_bias.as_mut_slice()),
                    ("motion.pool_query", self.motion.pool_query.as_mut_slice()),
                    ("motion.proj", self.motion.proj.data_mut()),
                    ("motion.proj_bias", self.motion.proj_bias.as_mut_slice()),
                    ("text.table", self.text.table.data_mut()),
                    ("text.pool_query", self.text.pool_query.as_mut_slice()),
                    ("text.proj", self.text.proj.data_mut()),
                    ("text.proj_bias", self.text.proj_bias.as_mut_slice()),
                ]
            }
        }
    };
}

impl_tensor_views!(EncoderParams);
impl_tensor_views!(ParamGrads);

impl EncoderParams {
    /// All-zero parameters with the configured shapes.
    pub fn zeros(config: &EncoderConfig) -> Self {
        let shapes = ParamGrads::zeros(config);
        EncoderParams {
            config: config.clone(),
            motion: shapes.motion,
            text: shapes.text,
        }
    }
}

impl ParamGrads {
    pub fn zeros(config: &EncoderConfig) -> Self {
        ParamGrads {
            motion: MotionParams {
                embed: Matrix::zeros(config.pose_dim, config.latent_dim),
                embed_bias: vec![0.0; config.latent_dim],
                pool_query: vec![0.0; config.latent_dim],
                proj: Matrix::zeros(config.latent_dim, config.embed_dim),
                proj_bias: vec![0.0; config.embed_dim],
            },
            text: TextParams {
                table: Matrix::zeros(config.vocab_size, config.word_dim),
                pool_query: vec![0.0; config.word_dim],
                proj: Matrix::zeros(config.word_dim, config.embed_dim),
                proj_bias: vec![0.0; config.embed_dim],
            },
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += *s;
            }
        }
    }

    /// Euclidean norm over all gradient entries.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for (_, t) in self.tensors() {
            for v in t {
                acc += v * v;
            }
        }
        acc.sqrt()
    }
}

/// Sinusoidal positional encoding: entry 2k is
/// `sin(position / 10000^(2k/dim))`, entry 2k+1 the matching cosine.
pub fn positional_encoding(position: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::OddDimension(dim));
    }
    let pos = position as f64;
    let mut out = vec![0.0; dim];
    for k in 0..dim / 2 {
        let angle = pos / 10000f64.powf(2.0 * k as f64 / dim as f64);
        out[2 * k] = angle.sin();
        out[2 * k + 1] = angle.cos();
    }
    Ok(out)
}

/// Draws fresh parameters: every weight tensor uniform in
/// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` where fan_in is the width of the
/// vector the tensor consumes (the row width for the token table),
/// pooling queries drawn like a weight row, biases zero. Deterministic
/// per seed.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let draw = |rows: usize, cols: usize, fan_in: usize, rng: &mut Rng| {
        let a = 1.0 / (fan_in as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.uniform(-a, a).expect("valid bound"))
            .collect();
        Matrix::from_vec(rows, cols, data).expect("finite init")
    };
    let motion = MotionParams {
        embed: draw(config.pose_dim, config.latent_dim, config.pose_dim, &mut rng),
        embed_bias: vec![0.0; config.latent_dim],
        pool_query: draw(1, config.latent_dim, config.latent_dim, &mut rng)
            .data()
            .to_vec(),
        proj: draw(config.latent_dim, config.embed_dim, config.latent_dim, &mut rng),
        proj_bias: vec![0.0; config.embed_dim],
    };
    let text = TextParams {
        table: draw(config.vocab_size, config.word_dim, config.word_dim, &mut rng),
        pool_query: draw(1, config.word_dim, config.word_dim, &mut rng)
            .data()
            .to_vec(),
        proj: draw(config.word_dim, config.embed_dim, config.word_dim, &mut rng),
        proj_bias: vec![0.0; config.embed_dim],
    };
    Ok(EncoderParams {
        config: config.clone(),
        motion,
        text,
    })
}

/// Intermediates of one forward pass, kept for the exact backward.
#[derive(Debug, Clone)]
pub struct PipelineCache {
    /// Embedded sequence (with positional encodings), one row per element.
    hidden: Matrix,
    /// Attention-pool weights; nonnegative, summing to 1.
    attn: Vec<f64>,
    pooled: Vec<f64>,
    z_norm: f64,
    embedding: Vec<f64>,
}

impl PipelineCache {
    pub fn attention_weights(&self) -> &[f64] {
        &self.attn
    }
}

#[derive(Debug, Clone)]
pub enum ForwardCache {
    Motion {
        frames: Matrix,
        pipeline: PipelineCache,
    },
    Text {
        ids: Vec<usize>,
        pipeline: PipelineCache,
    },
}

impl ForwardCache {
    pub fn pipeline(&self) -> &PipelineCache {
        match self {
            ForwardCache::Motion { pipeline, .. } => pipeline,
            ForwardCache::Text { pipeline, .. } => pipeline,
        }
    }
}

/// Attention-pool the hidden rows with query `q` (scores scaled by
/// 1/sqrt(hidden width), softmax with max subtraction), then project and
/// normalize.
fn pool_and_project(
    hidden: Matrix,
    q: &[f64],
    proj: &Matrix,
    proj_bias: &[f64],
) -> Result<(JointEmbedding, PipelineCache)> {
    let n = hidden.rows();
    let width = hidden.cols();
    let scale = (width as f64).sqrt();

    let scores: Vec<f64> = (0..n).map(|i| dot(q, hidden.row(i)) / scale).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let attn: Vec<f64> = exps.iter().map(|e| e / sum).collect();

    let mut pooled = vec![0.0; width];
    for (i, a) in attn.iter().enumerate() {
        let row = hidden.row(i);
        for l in 0..width {
            pooled[l] += a * row[l];
        }
    }

    let out_dim = proj.cols();
    let mut z = proj_bias.to_vec();
    for l in 0..width {
        let w_row = proj.row(l);
        for d in 0..out_dim {
            z[d] += w_row[d] * pooled[l];
        }
    }

    let z_norm = norm(&z);
    let embedding = l2_normalize(&z)?;
    Ok((
        JointEmbedding(embedding.clone()),
        PipelineCache {
            hidden,
            attn,
            pooled,
            z_norm,
            embedding,
        },
    ))
}

/// Encodes a pose sequence: per-frame linear embedding plus positional
/// encoding, attention pooling, projection, normalization.
pub fn encode_motion(
    params: &EncoderParams,
    pose: &PoseSequence,
) -> Result<(JointEmbedding, ForwardCache)> {
    let cfg = &params.config;
    if pose.feature_dim() != cfg.pose_dim {
        return Err(Error::DimensionMismatch {
            context: "pose feature width",
            expected: cfg.pose_dim,
            got: pose.feature_dim(),
        });
    }
    if pose.frames() > cfg.max_frames {
        return Err(Error::InvalidBatch(format!(
            "pose sequence has {} frames, max_frames is {}",
            pose.frames(),
            cfg.max_frames
        )));
    }

    let mut hidden = Matrix::zeros(pose.frames(), cfg.latent_dim);
    for f in 0..pose.frames() {
        let frame = pose.values().row(f);
        let pe = positional_encoding(f, cfg.latent_dim)?;
        let out = hidden.row_mut(f);
        for (l, o) in out.iter_mut().enumerate() {
            let mut acc = params.motion.embed_bias[l] + pe[l];
            for (p, x) in frame.iter().enumerate() {
                acc += params.motion.embed.get(p, l) * x;
            }
            *o = acc;
        }
    }

    let (embedding, pipeline) = pool_and_project(
        hidden,
        &params.motion.pool_query,
        &params.motion.proj,
        &params.motion.proj_bias,
    )?;
    Ok((
        embedding,
        ForwardCache::Motion {
            frames: pose.values().clone(),
            pipeline,
        },
    ))
}

/// Encodes a token sequence: table lookup plus positional encoding, then
/// the same pooling/projection pipeline as the motion branch.
pub fn encode_text(
    params: &EncoderParams,
    tokens: &TokenSequence,
) -> Result<(JointEmbedding, ForwardCache)> {
    let cfg = &params.config;
    if tokens.len() > cfg.max_tokens {
        return Err(Error::InvalidBatch(format!(
            "token sequence has {} tokens, max_tokens is {}",
            tokens.len(),
            cfg.max_tokens
        )));
    }

    let mut hidden = Matrix::zeros(tokens.len(), cfg.word_dim);
    for (i, &id) in tokens.ids().iter().enumerate() {
        if id >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
        let pe = positional_encoding(i, cfg.word_dim)?;
        let row = params.text.table.row(id);
        let out = hidden.row_mut(i);
        for l in 0..cfg.word_dim {
            out[l] = row[l] + pe[l];
        }
    }

    let (embedding, pipeline) = pool_and_project(
        hidden,
        &params.text.pool_query,
        &params.text.proj,
        &params.text.proj_bias,
    )?;
    Ok((
        embedding,
        ForwardCache::Text {
            ids: tokens.ids().to_vec(),
            pipeline,
        },
    ))
}

/// Backward through pooling, projection and normalization. Returns the
/// gradient with respect to the hidden rows and fills the query,
/// projection and projection-bias gradients.
fn pipeline_backward(
    cache: &PipelineCache,
    q: &[f64],
    proj: &Matrix,
    grad_out: &[f64],
    grad_q: &mut [f64],
    grad_proj: &mut Matrix,
    grad_proj_bias: &mut [f64],
) -> Matrix {
    let n = cache.hidden.rows();
    let width = cache.hidden.cols();
    let out_dim = proj.cols();
    let scale = (width as f64).sqrt();

    // Normalization Jacobian: dz = (g - (g . e) e) / |z|.
    let gdot = dot(grad_out, &cache.embedding);
    let gz: Vec<f64> = (0..out_dim)
        .map(|d| (grad_out[d] - gdot * cache.embedding[d]) / cache.z_norm)
        .collect();

    for d in 0..out_dim {
        grad_proj_bias[d] += gz[d];
    }
    let mut grad_pooled = vec![0.0; width];
    for l in 0..width {
        let w_row = proj.row(l);
        let g_row = grad_proj.row_mut(l);
        let mut acc = 0.0;
        for d in 0..out_dim {
            g_row[d] += cache.pooled[l] * gz[d];
            acc += w_row[d] * gz[d];
        }
        grad_pooled[l] = acc;
    }

    // pooled = sum_i attn_i * hidden_i
    let grad_attn: Vec<f64> = (0..n)
        .map(|i| dot(cache.hidden.row(i), &grad_pooled))
        .collect();
    let mut grad_hidden = Matrix::zeros(n, width);
    for i in 0..n {
        let a = cache.attn[i];
        let gh = grad_hidden.row_mut(i);
        for l in 0..width {
            gh[l] = a * grad_pooled[l];
        }
    }

    // Softmax Jacobian: ds_i = a_i (ga_i - sum_j a_j ga_j).
    let mut asum = 0.0;
    for i in 0..n {
        asum += cache.attn[i] * grad_attn[i];
    }
    for i in 0..n {
        let gs = cache.attn[i] * (grad_attn[i] - asum);
        let h_row = cache.hidden.row(i);
        let gh = grad_hidden.row_mut(i);
        for l in 0..width {
            grad_q[l] += gs * h_row[l] / scale;
            gh[l] += gs * q[l] / scale;
        }
    }
    grad_hidden
}

/// Exact gradients of the full encoding pipeline with respect to the
/// parameters, given the upstream gradient on the unit-norm embedding.
pub fn encoder_backward(
    params: &EncoderParams,
    cache: &ForwardCache,
    grad_embedding: &[f64],
) -> Result<ParamGrads> {
    let mut grads = ParamGrads::zeros(&params.config);
    encoder_backward_into(params, cache, grad_embedding, &mut grads)?;
    Ok(grads)
}

/// Like [`encoder_backward`] but accumulating into an existing gradient
/// container.
pub fn encoder_backward_into(
    params: &EncoderParams,
    cache: &ForwardCache,
    grad_embedding: &[f64],
    grads: &mut ParamGrads,
) -> Result<()> {
    let cfg = &params.config;
    if grad_embedding.len() != cfg.embed_dim {
        return Err(Error::DimensionMismatch {
            context: "embedding gradient width",
            expected: cfg.embed_dim,
            got: grad_embedding.len(),
        });
    }
    match cache {
        ForwardCache::Motion { frames, pipeline } => {
            if pipeline.hidden.cols() != cfg.latent_dim || frames.cols() != cfg.pose_dim {
                return Err(Error::StaleCache(
                    "motion cache dimensions do not match params".into(),
                ));
            }
            let grad_hidden = pipeline_backward(
                pipeline,
                &params.motion.pool_query,
                &params.motion.proj,
                grad_embedding,
                &mut grads.motion.pool_query,
                &mut grads.motion.proj,
                &mut grads.motion.proj_bias,
            );
            for f in 0..frames.rows() {
                let frame = frames.row(f);
                let gh = grad_hidden.row(f);
                for l in 0..cfg.latent_dim {
                    grads.motion.embed_bias[l] += gh[l];
                }
                for (p, x) in frame.iter().enumerate() {
                    let row = grads.motion.embed.row_mut(p);
                    for l in 0..cfg.latent_dim {
                        row[l] += x * gh[l];
                    }
                }
            }
        }
        ForwardCache::Text { ids, pipeline } => {
            if pipeline.hidden.cols() != cfg.word_dim
                || ids.iter().any(|&id| id >= cfg.vocab_size)
            {
                return Err(Error::StaleCache(
                    "text cache dimensions do not match params".into(),
                ));
            }
            let grad_hidden = pipeline_backward(
                pipeline,
                &params.text.pool_query,
                &params.text.proj,
                grad_embedding,
                &mut grads.text.pool_query,
                &mut grads.text.proj,
                &mut grads.text.proj_bias,
            );
            for (i, &id) in ids.iter().enumerate() {
                let gh = grad_hidden.row(i);
                let row = grads.text.table.row_mut(id);
                for l in 0..cfg.word_dim {
                    row[l] += gh[l];
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            pose_dim: 2,
            latent_dim: 2,
            word_dim: 2,
            embed_dim: 2,
            vocab_size: 5,
            max_frames: 100,
            max_tokens: 100,
        }
    }

    fn test_config() -> EncoderConfig {
        EncoderConfig {
            pose_dim: 3,
            latent_dim: 4,
            word_dim: 4,
            embed_dim: 4,
            vocab_size: 7,
            max_frames: 100,
            max_tokens: 100,
        }
    }

    #[test]
    fn positional_encoding_at_zero() {
        assert_eq!(
            positional_encoding(0, 4).unwrap(),
            vec![0.0, 1.0, 0.0, 1.0]
        );
    }

    #[test]
    fn positional_encoding_matches_scalar_math() {
        let pe = positional_encoding(1, 2).unwrap();
        assert!((pe[0] - 1f64.sin()).abs() < 1e-15);
        assert!((pe[1] - 1f64.cos()).abs() < 1e-15);
        assert!((pe[0] - 0.84147).abs() < 1e-5);
        assert!((pe[1] - 0.54030).abs() < 1e-5);
    }

    #[test]
    fn positional_encoding_distinct_positions_differ() {
        let a = positional_encoding(2, 8).unwrap();
        let b = positional_encoding(5, 8).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
    }

    #[test]
    fn positional_encoding_rejects_odd_dim() {
        assert!(matches!(
            positional_encoding(1, 3),
            Err(Error::OddDimension(3))
        ));
    }

    #[test]
    fn single_frame_attention_weight_is_one() {
        let params = init_params(&test_config(), 17).unwrap();
        let pose = PoseSequence::new(
            Matrix::from_vec(1, 3, vec![0.4, -0.2, 1.1]).unwrap(),
        )
        .unwrap();
        let (emb, cache) = encode_motion(&params, &pose).unwrap();
        assert_eq!(cache.pipeline().attention_weights(), &[1.0]);

        // With one frame the output reduces to
        // normalize(proj^T (embed^T f + bias + pe_0) + proj_bias).
        let cfg = &params.config;
        let pe = positional_encoding(0, cfg.latent_dim).unwrap();
        let mut h = vec![0.0; cfg.latent_dim];
        for l in 0..cfg.latent_dim {
            let mut acc = params.motion.embed_bias[l] + pe[l];
            for p in 0..cfg.pose_dim {
                acc += params.motion.embed.get(p, l) * pose.values().get(0, p);
            }
            h[l] = acc;
        }
        let mut z = params.motion.proj_bias.clone();
        for l in 0..cfg.latent_dim {
            for d in 0..cfg.embed_dim {
                z[d] += params.motion.proj.get(l, d) * h[l];
            }
        }
        let expect = l2_normalize(&z).unwrap();
        for (a, b) in emb.as_slice().iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    // Independent scalar reimplementation of the whole motion pipeline
    // with hand-chosen constants, written step by step without any of the
    // module's helpers.
    #[test]
    fn motion_forward_matches_scalar_pipeline_oracle() {
        let cfg = small_config();
        let params = EncoderParams {
            config: cfg,
            motion: MotionParams {
                embed: Matrix::from_vec(2, 2, vec![0.5, -0.3, 0.2, 0.7]).unwrap(),
                embed_bias: vec![0.1, -0.2],
                pool_query: vec![0.6, 0.4],
                proj: Matrix::from_vec(2, 2, vec![0.9, 0.1, -0.5, 0.8]).unwrap(),
                proj_bias: vec![0.05, -0.05],
            },
            text: TextParams {
                table: Matrix::zeros(5, 2),
                pool_query: vec![0.0, 0.0],
                proj: Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                proj_bias: vec![0.0, 0.0],
            },
        };
        let frames = [[1.0f64, 2.0], [-1.0, 0.5]];
        let pose = PoseSequence::new(
            Matrix::from_vec(2, 2, frames.iter().flatten().copied().collect()).unwrap(),
        )
        .unwrap();
        let (emb, _) = encode_motion(&params, &pose).unwrap();

        // h_f[l] = sum_p W[p][l] f[p] + b[l] + pe(f)[l]
        let w = [[0.5, -0.3], [0.2, 0.7]];
        let b = [0.1, -0.2];
        let mut h = [[0.0f64; 2]; 2];
        for f in 0..2 {
            let pe = [(f as f64).sin(), (f as f64).cos()];
            for l in 0..2 {
                h[f][l] = w[0][l] * frames[f][0] + w[1][l] * frames[f][1] + b[l] + pe[l];
            }
        }
        // scores and softmax
        let q = [0.6, 0.4];
        let scale = 2f64.sqrt();
        let s0 = (q[0] * h[0][0] + q[1] * h[0][1]) / scale;
        let s1 = (q[0] * h[1][0] + q[1] * h[1][1]) / scale;
        let m = s0.max(s1);
        let e0 = (s0 - m).exp();
        let e1 = (s1 - m).exp();
        let a0 = e0 / (e0 + e1);
        let a1 = e1 / (e0 + e1);
        let pooled = [
            a0 * h[0][0] + a1 * h[1][0],
            a0 * h[0][1] + a1 * h[1][1],
        ];
        // projection
        let wp = [[0.9, 0.1], [-0.5, 0.8]];
        let bp = [0.05, -0.05];
        let z = [
            wp[0][0] * pooled[0] + wp[1][0] * pooled[1] + bp[0],
            wp[0][1] * pooled[0] + wp[1][1] * pooled[1] + bp[1],
        ];
        let zn = (z[0] * z[0] + z[1] * z[1]).sqrt();
        let expect = [z[0] / zn, z[1] / zn];
        for (a, b) in emb.as_slice().iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn reversed_frame_order_changes_embedding() {
        let params = init_params(&test_config(), 5).unwrap();
        let fwd = Matrix::from_vec(
            3,
            3,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let rev = Matrix::from_vec(
            3,
            3,
            vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0],
        )
        .unwrap();
        let (a, _) = encode_motion(&params, &PoseSequence::new(fwd).unwrap()).unwrap();
        let (b, _) = encode_motion(&params, &PoseSequence::new(rev).unwrap()).unwrap();
        assert_ne!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn text_single_token_and_identity() {
        let params = init_params(&test_config(), 9).unwrap();
        let t = TokenSequence::new(vec![3]).unwrap();
        let (emb, cache) = encode_text(&params, &t).unwrap();
        assert_eq!(cache.pipeline().attention_weights(), &[1.0]);
        assert!((norm(emb.as_slice()) - 1.0).abs() <= 1e-9);

        let t2 = TokenSequence::new(vec![1, 4, 2]).unwrap();
        let (a, _) = encode_text(&params, &t2).unwrap();
        let (b, _) = encode_text(&params, &t2).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert!((dot(a.as_slice(), b.as_slice()) - 1.0).abs() <= 1e-12);
    }

    // Scalar oracle for the text pipeline with two tokens.
    #[test]
    fn text_forward_matches_scalar_pipeline_oracle() {
        let cfg = small_config();
        let params = EncoderParams {
            config: cfg,
            motion: MotionParams {
                embed: Matrix::zeros(2, 2),
                embed_bias: vec![0.0; 2],
                pool_query: vec![0.0; 2],
                proj: Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                proj_bias: vec![0.0; 2],
            },
            text: TextParams {
                table: Matrix::from_vec(
                    5,
                    2,
                    vec![0.1, 0.2, -0.4, 0.5, 0.8, -0.1, 0.3, 0.3, -0.2, 0.6],
                )
                .unwrap(),
                pool_query: vec![-0.3, 0.9],
                proj: Matrix::from_vec(2, 2, vec![0.7, -0.2, 0.4, 0.6]).unwrap(),
                proj_bias: vec![0.0, 0.1],
            },
        };
        let (emb, _) =
            encode_text(&params, &TokenSequence::new(vec![2, 4]).unwrap()).unwrap();

        let table = [[0.1, 0.2], [-0.4, 0.5], [0.8, -0.1], [0.3, 0.3], [-0.2, 0.6]];
        let mut h = [[0.0f64; 2]; 2];
        for (i, &id) in [2usize, 4].iter().enumerate() {
            let pe = [(i as f64).sin(), (i as f64).cos()];
            for l in 0..2 {
                h[i][l] = table[id][l] + pe[l];
            }
        }
        let q = [-0.3, 0.9];
        let scale = 2f64.sqrt();
        let s0 = (q[0] * h[0][0] + q[1] * h[0][1]) / scale;
        let s1 = (q[0] * h[1][0] + q[1] * h[1][1]) / scale;
        let m = s0.max(s1);
        let e0 = (s0 - m).exp();
        let e1 = (s1 - m).exp();
        let a0 = e0 / (e0 + e1);
        let a1 = e1 / (e0 + e1);
        let pooled = [
            a0 * h[0][0] + a1 * h[1][0],
            a0 * h[0][1] + a1 * h[1][1],
        ];
        let wp = [[0.7, -0.2], [0.4, 0.6]];
        let z = [
            wp[0][0] * pooled[0] + wp[1][0] * pooled[1],
            wp[0][1] * pooled[0] + wp[1][1] * pooled[1] + 0.1,
        ];
        let zn = (z[0] * z[0] + z[1] * z[1]).sqrt();
        for (a, b) in emb.as_slice().iter().zip(&[z[0] / zn, z[1] / zn]) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn token_out_of_range() {
        let params = init_params(&test_config(), 9).unwrap();
        let t = TokenSequence::new(vec![7]).unwrap();
        assert!(matches!(
            encode_text(&params, &t),
            Err(Error::TokenOutOfRange { id: 7, vocab_size: 7 })
        ));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_param_grads() {
        let params = init_params(&test_config(), 21).unwrap();
        let pose = PoseSequence::new(
            Matrix::from_vec(2, 3, vec![0.1, 0.2, 0.3, -0.1, 0.4, 0.0]).unwrap(),
        )
        .unwrap();
        let (_, cache) = encode_motion(&params, &pose).unwrap();
        let grads = encoder_backward(&params, &cache, &[0.0; 4]).unwrap();
        for (_, t) in grads.tensors() {
            assert!(t.iter().all(|&v| v == 0.0));
        }
    }

    // The normalization output is tangent to itself: pushing the loss
    // along the embedding direction produces no gradient through z, so
    // the projection-bias gradient (which equals dL/dz) is orthogonal to
    // the embedding.
    #[test]
    fn normalization_gradient_is_tangent() {
        let params = init_params(&test_config(), 33).unwrap();
        let pose = PoseSequence::new(
            Matrix::from_vec(3, 3, vec![0.5, 0.1, -0.3, 0.2, 0.9, 0.4, -0.6, 0.3, 0.8])
                .unwrap(),
        )
        .unwrap();
        let (emb, cache) = encode_motion(&params, &pose).unwrap();
        let grads = encoder_backward(&params, &cache, emb.as_slice()).unwrap();
        let proj_onto_dir = dot(&grads.motion.proj_bias, emb.as_slice());
        assert!(proj_onto_dir.abs() <= 1e-10);
        // dL/dz itself is the zero vector up to rounding.
        assert!(grads.motion.proj_bias.iter().all(|v| v.abs() <= 1e-10));
    }

    #[test]
    fn stale_cache_is_detected() {
        let params = init_params(&test_config(), 3).unwrap();
        let pose = PoseSequence::new(
            Matrix::from_vec(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap(),
        )
        .unwrap();
        let (_, cache) = encode_motion(&params, &pose).unwrap();

        let mut other_cfg = test_config();
        other_cfg.latent_dim = 6;
        other_cfg.embed_dim = 4;
        let other = init_params(&other_cfg, 3).unwrap();
        assert!(matches!(
            encoder_backward(&other, &cache, &[0.0; 4]),
            Err(Error::StaleCache(_))
        ));
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = test_config();
        let a = init_params(&cfg, 123).unwrap();
        let b = init_params(&cfg, 123).unwrap();
        assert_eq!(a, b);
        assert!(a.motion.embed_bias.iter().all(|&v| v == 0.0));
        assert!(a.motion.proj_bias.iter().all(|&v| v == 0.0));
        assert!(a.text.proj_bias.iter().all(|&v| v == 0.0));
        let c = init_params(&cfg, 124).unwrap();
        assert_ne!(a, c);
    }

    // Uniform-distribution moment oracle: std of U[-a, a] is 2a/sqrt(12).
    #[test]
    fn init_weight_spread_matches_uniform_moments() {
        let cfg = EncoderConfig {
            pose_dim: 64,
            latent_dim: 158,
            word_dim: 2,
            embed_dim: 2,
            vocab_size: 2,
            max_frames: 10,
            max_tokens: 10,
        };
        let params = init_params(&cfg, 7).unwrap();
        let data = params.motion.embed.data();
        assert!(data.len() >= 10_000);
        let mean: f64 = data.iter().sum::<f64>() / data.len() as f64;
        let var: f64 =
            data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / data.len() as f64;
        let std = var.sqrt();
        let expected = (2.0 / 64f64.sqrt()) / 12f64.sqrt();
        assert!(
            (std - expected).abs() / expected < 0.10,
            "std {std}, expected {expected}"
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = test_config();
        cfg.latent_dim = 5;
        assert!(matches!(
            init_params(&cfg, 1),
            Err(Error::InvalidConfig(_))
        ));
        let mut cfg = test_config();
        cfg.vocab_size = 0;
        assert!(init_params(&cfg, 1).is_err());
    }

    #[test]
    fn attention_weights_are_a_distribution() {
        let params = init_params(&test_config(), 55).unwrap();
        let mut rng = Rng::new(99);
        for frames in [1usize, 2, 5, 9] {
            let data: Vec<f64> = (0..frames * 3)
                .map(|_| rng.uniform(-2.0, 2.0).unwrap())
                .collect();
            let pose =
                PoseSequence::new(Matrix::from_vec(frames, 3, data).unwrap()).unwrap();
            let (_, cache) = encode_motion(&params, &pose).unwrap();
            let attn = cache.pipeline().attention_weights();
            assert!(attn.iter().all(|&a| a >= 0.0));
            let sum: f64 = attn.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    // Central finite differences over every parameter of both branches
    // for a probe functional L = c . embedding. The full multi-seed suite
    // lives in the gradcheck module; this pins the module-level contract.
    #[test]
    fn backward_matches_finite_differences() {
        let cfg = test_config();
        let params = init_params(&cfg, 77).unwrap();
        let mut rng = Rng::new(123);
        let pose_data: Vec<f64> = (0..3 * 3).map(|_| rng.uniform(-1.0, 1.0).unwrap()).collect();
        let pose = PoseSequence::new(Matrix::from_vec(3, 3, pose_data).unwrap()).unwrap();
        let probe: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0).unwrap()).collect();

        let (_, cache) = encode_motion(&params, &pose).unwrap();
        let analytic = encoder_backward(&params, &cache, &probe).unwrap();

        let eps = 1e-5;
        let loss = |p: &EncoderParams| {
            let (e, _) = encode_motion(p, &pose).unwrap();
            dot(e.as_slice(), &probe)
        };
        let flat_analytic: Vec<f64> = analytic
            .tensors()
            .iter()
            .filter(|(name, _)| name.starts_with("motion."))
            .flat_map(|(_, t)| t.iter().copied())
            .collect();
        let mut flat_numeric = Vec::new();
        for tensor_idx in 0..5 {
            let len = params.tensors()[tensor_idx].1.len();
            for k in 0..len {
                let mut plus = params.clone();
                plus.tensors_mut()[tensor_idx].1[k] += eps;
                let mut minus = params.clone();
                minus.tensors_mut()[tensor_idx].1[k] -= eps;
                flat_numeric.push((loss(&plus) - loss(&minus)) / (2.0 * eps));
            }
        }
        assert_eq!(flat_analytic.len(), flat_numeric.len());
        for (a, n) in flat_analytic.iter().zip(&flat_numeric) {
            let denom = (a.abs() + n.abs()).max(1e-8);
            assert!(
                (a - n).abs() / denom <= 1e-4,
                "analytic {a} vs numeric {n}"
            );
        }
    }
}
