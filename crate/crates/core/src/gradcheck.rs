//! End-to-end gradient verification: both encoders composed with each
//! loss, checked against central finite differences over every
//! parameter.
//!
//! The numeric side only ever calls the public forward path, so it stays
//! independent of the analytic backward it is checking.

use crate::encoder::{
    encode_motion, encode_text, encoder_backward_into, init_params, EncoderConfig,
    EncoderParams, ParamGrads, PoseSequence, TokenSequence,
};
use crate::error::Result;
use crate::loss::{compute_loss, BatchEmbeddings, LossConfig, LossKind};
use crate::numeric::Matrix;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckSizes {
    /// Pairs per batch.
    pub pairs: usize,
    /// Maximum frames per pose sequence.
    pub max_frames: usize,
    /// Maximum tokens per text.
    pub max_tokens: usize,
    pub pose_dim: usize,
    pub latent_dim: usize,
    pub word_dim: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
}

impl Default for GradCheckSizes {
    fn default() -> Self {
        GradCheckSizes {
            pairs: 3,
            max_frames: 4,
            max_tokens: 4,
            pose_dim: 3,
            latent_dim: 4,
            word_dim: 4,
            embed_dim: 4,
            vocab_size: 12,
        }
    }
}

impl GradCheckSizes {
    fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            pose_dim: self.pose_dim,
            latent_dim: self.latent_dim,
            word_dim: self.word_dim,
            embed_dim: self.embed_dim,
            vocab_size: self.vocab_size,
            max_frames: self.max_frames,
            max_tokens: self.max_tokens,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ComponentReport {
    pub loss: LossKind,
    pub tensor: &'static str,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub components: Vec<ComponentReport>,
    pub instances: usize,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err() <= tolerance
    }

    pub fn worst(&self) -> Option<&ComponentReport> {
        self.components
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

struct Instance {
    params: EncoderParams,
    poses: Vec<PoseSequence>,
    texts: Vec<TokenSequence>,
}

fn build_instance(sizes: &GradCheckSizes, seed: u64) -> Result<Instance> {
    let cfg = sizes.encoder_config();
    let mut rng = Rng::derive(seed, 101);
    let params = init_params(&cfg, rng.next_u64())?;
    let mut poses = Vec::with_capacity(sizes.pairs);
    let mut texts = Vec::with_capacity(sizes.pairs);
    for _ in 0..sizes.pairs {
        let frames = 1 + rng.below(sizes.max_frames);
        let data: Vec<f64> = (0..frames * sizes.pose_dim)
            .map(|_| rng.uniform(-1.5, 1.5).expect("valid range"))
            .collect();
        poses.push(PoseSequence::new(Matrix::from_vec(
            frames,
            sizes.pose_dim,
            data,
        )?)?);
        let len = 1 + rng.below(sizes.max_tokens);
        let ids: Vec<usize> = (0..len).map(|_| rng.below(sizes.vocab_size)).collect();
        texts.push(TokenSequence::new(ids)?);
    }
    Ok(Instance {
        params,
        poses,
        texts,
    })
}

fn end_to_end_loss(
    kind: LossKind,
    params: &EncoderParams,
    instance: &Instance,
    loss_cfg: &LossConfig,
) -> Result<f64> {
    let mut motion_emb = Vec::with_capacity(instance.poses.len());
    let mut text_emb = Vec::with_capacity(instance.texts.len());
    for (pose, text) in instance.poses.iter().zip(&instance.texts) {
        motion_emb.push(encode_motion(params, pose)?.0);
        text_emb.push(encode_text(params, text)?.0);
    }
    let batch = BatchEmbeddings::from_embeddings(&motion_emb, &text_emb)?;
    Ok(compute_loss(kind, &batch, loss_cfg)?.value)
}

fn analytic_gradients(
    kind: LossKind,
    instance: &Instance,
    loss_cfg: &LossConfig,
) -> Result<ParamGrads> {
    let params = &instance.params;
    let mut motion_emb = Vec::with_capacity(instance.poses.len());
    let mut text_emb = Vec::with_capacity(instance.texts.len());
    let mut motion_caches = Vec::with_capacity(instance.poses.len());
    let mut text_caches = Vec::with_capacity(instance.texts.len());
    for (pose, text) in instance.poses.iter().zip(&instance.texts) {
        let (em, cm) = encode_motion(params, pose)?;
        let (et, ct) = encode_text(params, text)?;
        motion_emb.push(em);
        text_emb.push(et);
        motion_caches.push(cm);
        text_caches.push(ct);
    }
    let batch = BatchEmbeddings::from_embeddings(&motion_emb, &text_emb)?;
    let result = compute_loss(kind, &batch, loss_cfg)?;
    let mut grads = ParamGrads::zeros(&params.config);
    for i in 0..instance.poses.len() {
        encoder_backward_into(params, &motion_caches[i], result.grad_m.row(i), &mut grads)?;
        encoder_backward_into(params, &text_caches[i], result.grad_t.row(i), &mut grads)?;
    }
    Ok(grads)
}

/// Runs the finite-difference suite over `instances` seeded instances.
/// `perturb` is a self-test hook: it is added to the first analytic
/// gradient entry of every component, so any nonzero value must fail the
/// check.
pub fn run_gradcheck(
    sizes: &GradCheckSizes,
    seed: u64,
    instances: usize,
    perturb: f64,
) -> Result<GradCheckReport> {
    let loss_cfg = LossConfig::default();
    let eps = 1e-5;
    let kinds = [LossKind::Sh, LossKind::Mh, LossKind::DropTriple];
    let mut components: Vec<ComponentReport> = Vec::new();

    for inst_idx in 0..instances {
        let instance = build_instance(sizes, seed.wrapping_add(inst_idx as u64))?;
        for kind in kinds {
            let mut analytic = analytic_gradients(kind, &instance, &loss_cfg)?;
            if perturb != 0.0 {
                analytic.tensors_mut()[0].1[0] += perturb;
            }
            for (tensor_idx, (name, a)) in analytic.tensors().into_iter().enumerate() {
                let mut worst = 0.0f64;
                for k in 0..a.len() {
                    let mut plus = instance.params.clone();
                    plus.tensors_mut()[tensor_idx].1[k] += eps;
                    let lp = end_to_end_loss(
                        kind,
                        &plus,
                        &instance,
                        &loss_cfg,
                    )?;
                    let mut minus = instance.params.clone();
                    minus.tensors_mut()[tensor_idx].1[k] -= eps;
                    let lm = end_to_end_loss(kind, &minus, &instance, &loss_cfg)?;
                    let numeric = (lp - lm) / (2.0 * eps);
                    worst = worst.max(relative_error(a[k], numeric));
                }
                match components
                    .iter_mut()
                    .find(|c| c.loss == kind && c.tensor == name)
                {
                    Some(c) => c.max_rel_err = c.max_rel_err.max(worst),
                    None => components.push(ComponentReport {
                        loss: kind,
                        tensor: name,
                        max_rel_err: worst,
                    }),
                }
            }
        }
    }
    Ok(GradCheckReport {
        components,
        instances,
    })
}
