//! Triplet losses over a batch of aligned motion/text embeddings.
//!
//! Three objectives share one similarity matrix S with S[i][j] the cosine
//! between motion i and text j (row i of each matrix is the positive of
//! the other):
//!
//! * sum-of-hinges: every negative contributes a hinge term;
//! * max-of-hinges: only the hardest negative per anchor and direction;
//! * drop-triplet: max-of-hinges after pruning false negatives, where a
//!   negative is considered false when its intra-modal similarity to the
//!   positive exceeds a threshold (`delta_hetero` for the retrieved
//!   modality, `delta_homo` for the anchor modality, strict inequality).
//!
//! Mask construction is non-differentiable: no gradient flows through
//! the intra-modal similarity matrices used to prune. Hinge subgradient
//! at the kink is 0, and argmax ties break toward the smallest index so
//! results are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::encoder::JointEmbedding;
use crate::error::{Error, Result};
use crate::numeric::{cosine_sim_matrix, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Sh,
    Mh,
    #[serde(rename = "droptriple")]
    DropTriple,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossKind::Sh => write!(f, "sh"),
            LossKind::Mh => write!(f, "mh"),
            LossKind::DropTriple => write!(f, "droptriple"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Hinge margin.
    pub alpha: f64,
    /// False-negative threshold on similarity in the retrieved modality.
    pub delta_hetero: f64,
    /// False-negative threshold on similarity in the anchor modality.
    pub delta_homo: f64,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        for (name, v) in [
            ("delta_hetero", self.delta_hetero),
            ("delta_homo", self.delta_homo),
        ] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be in [-1, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.2,
            delta_hetero: 0.7,
            delta_homo: 0.9,
        }
    }
}

/// Aligned batch: row i of the motion matrix is the positive pair of row
/// i of the text matrix. Rows are unit norm.
#[derive(Debug, Clone)]
pub struct BatchEmbeddings {
    motion: Matrix,
    text: Matrix,
}

impl BatchEmbeddings {
    pub fn new(motion: Matrix, text: Matrix) -> Result<Self> {
        if motion.rows() == 0 {
            return Err(Error::InvalidBatch("batch has no pairs".into()));
        }
        if motion.rows() != text.rows() {
            return Err(Error::InvalidBatch(format!(
                "motion rows {} != text rows {}",
                motion.rows(),
                text.rows()
            )));
        }
        if motion.cols() != text.cols() {
            return Err(Error::InvalidBatch(format!(
                "motion dim {} != text dim {}",
                motion.cols(),
                text.cols()
            )));
        }
        for (name, m) in [("motion", &motion), ("text", &text)] {
            for i in 0..m.rows() {
                let n = crate::numeric::norm(m.row(i));
                if (n - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidBatch(format!(
                        "{name} row {i} has norm {n}, expected unit"
                    )));
                }
            }
        }
        Ok(BatchEmbeddings { motion, text })
    }

    pub fn from_embeddings(
        motion: &[JointEmbedding],
        text: &[JointEmbedding],
    ) -> Result<Self> {
        let m_rows: Vec<Vec<f64>> = motion.iter().map(|e| e.as_slice().to_vec()).collect();
        let t_rows: Vec<Vec<f64>> = text.iter().map(|e| e.as_slice().to_vec()).collect();
        BatchEmbeddings::new(Matrix::from_rows(&m_rows)?, Matrix::from_rows(&t_rows)?)
    }

    pub fn len(&self) -> usize {
        self.motion.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.motion.rows() == 0
    }

    pub fn motion(&self) -> &Matrix {
        &self.motion
    }

    pub fn text(&self) -> &Matrix {
        &self.text
    }

    /// Cross-modal similarity matrix S with S[i][j] = motion_i . text_j.
    pub fn similarity(&self) -> Result<Matrix> {
        cosine_sim_matrix(&self.motion, &self.text)
    }
}

/// Per-anchor pruning masks. `y_m[i][j]` marks motion j a false negative
/// for anchor i (text retrieval side is `y_t`). Diagonals are stored
/// false: the positive is never a negative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FalseNegMasks {
    n: usize,
    y_m: Vec<bool>,
    y_t: Vec<bool>,
}

impl FalseNegMasks {
    /// All-false masks (nothing pruned).
    pub fn none(n: usize) -> Self {
        FalseNegMasks {
            n,
            y_m: vec![false; n * n],
            y_t: vec![false; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn motion_pruned(&self, anchor: usize, j: usize) -> bool {
        self.y_m[anchor * self.n + j]
    }

    pub fn text_pruned(&self, anchor: usize, j: usize) -> bool {
        self.y_t[anchor * self.n + j]
    }

    /// Total number of pruned motion negatives over all anchors.
    pub fn dropped_motion(&self) -> usize {
        self.y_m.iter().filter(|&&b| b).count()
    }

    pub fn dropped_text(&self) -> usize {
        self.y_t.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossDiagnostics {
    /// Negatives pruned from the motion galleries (sum over anchors).
    pub dropped_count_m: usize,
    /// Negatives pruned from the text galleries.
    pub dropped_count_t: usize,
    /// Anchor-direction slots whose pruned negative set was empty.
    pub empty_negset_anchors: usize,
}

/// Loss value with gradients. `grad_sim` is dL/dS; `grad_m` and `grad_t`
/// are the chain-ruled gradients with respect to the embedding matrices.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub grad_sim: Matrix,
    pub grad_m: Matrix,
    pub grad_t: Matrix,
    pub diagnostics: LossDiagnostics,
}

/// Similarity-level loss output, before the chain rule to embeddings.
#[derive(Debug, Clone)]
pub struct SimLoss {
    pub value: f64,
    pub grad_sim: Matrix,
    pub diagnostics: LossDiagnostics,
}

/// Sum-of-hinges over every negative, both directions.
pub fn sh_from_similarity(s: &Matrix, cfg: &LossConfig) -> Result<SimLoss> {
    cfg.validate()?;
    let n = square(s)?;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, n);
    for i in 0..n {
        let s_ii = s.get(i, i);
        for j in 0..n {
            if j == i {
                continue;
            }
            let h = cfg.alpha - s_ii + s.get(i, j);
            if h > 0.0 {
                value += h;
                grad.set(i, i, grad.get(i, i) - 1.0);
                grad.set(i, j, grad.get(i, j) + 1.0);
            }
        }
    }
    for i in 0..n {
        let s_ii = s.get(i, i);
        for j in 0..n {
            if j == i {
                continue;
            }
            let h = cfg.alpha - s_ii + s.get(j, i);
            if h > 0.0 {
                value += h;
                grad.set(i, i, grad.get(i, i) - 1.0);
                grad.set(j, i, grad.get(j, i) + 1.0);
            }
        }
    }
    Ok(SimLoss {
        value,
        grad_sim: grad,
        diagnostics: LossDiagnostics::default(),
    })
}

/// Hardest negative in `0..n` excluding the diagonal and masked entries.
/// Ties break toward the smallest index.
fn hardest(n: usize, anchor: usize, sim: impl Fn(usize) -> f64, pruned: impl Fn(usize) -> bool) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for j in 0..n {
        if j == anchor || pruned(j) {
            continue;
        }
        let v = sim(j);
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((j, v)),
        }
    }
    best
}

/// Max-of-hinges: one hinge per anchor per direction, on the hardest
/// negative.
pub fn mh_from_similarity(s: &Matrix, cfg: &LossConfig) -> Result<SimLoss> {
    cfg.validate()?;
    let n = square(s)?;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, n);
    let mut empty = 0usize;
    hinge_on_hardest(s, cfg.alpha, n, &FalseNegMasks::none(n), false, &mut value, &mut grad, &mut empty);
    Ok(SimLoss {
        value,
        grad_sim: grad,
        diagnostics: LossDiagnostics::default(),
    })
}

/// Max-of-hinges over the pruned negative sets. Anchors whose pruned set
/// is empty contribute zero for that direction and are counted in the
/// diagnostics.
pub fn droptriple_from_similarity(
    s: &Matrix,
    masks: &FalseNegMasks,
    cfg: &LossConfig,
) -> Result<SimLoss> {
    cfg.validate()?;
    let n = square(s)?;
    if masks.len() != n {
        return Err(Error::InvalidBatch(format!(
            "masks for {} pairs, similarity is {n}x{n}",
            masks.len()
        )));
    }
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, n);
    let mut empty = 0usize;
    hinge_on_hardest(s, cfg.alpha, n, masks, true, &mut value, &mut grad, &mut empty);
    Ok(SimLoss {
        value,
        grad_sim: grad,
        diagnostics: LossDiagnostics {
            dropped_count_m: masks.dropped_motion(),
            dropped_count_t: masks.dropped_text(),
            empty_negset_anchors: empty,
        },
    })
}

/// Shared hardest-negative hinge accumulation for the max-style losses.
/// Text retrieval direction first (negatives are texts, row `i` of S),
/// then motion retrieval (negatives are motions, column `i`).
#[allow(clippy::too_many_arguments)]
fn hinge_on_hardest(
    s: &Matrix,
    alpha: f64,
    n: usize,
    masks: &FalseNegMasks,
    count_empty: bool,
    value: &mut f64,
    grad: &mut Matrix,
    empty: &mut usize,
) {
    for i in 0..n {
        let s_ii = s.get(i, i);
        match hardest(n, i, |j| s.get(i, j), |j| masks.text_pruned(i, j)) {
            Some((j, v)) => {
                let h = alpha - s_ii + v;
                if h > 0.0 {
                    *value += h;
                    grad.set(i, i, grad.get(i, i) - 1.0);
                    grad.set(i, j, grad.get(i, j) + 1.0);
                }
            }
            None => {
                if count_empty {
                    *empty += 1;
                }
            }
        }
    }
    for i in 0..n {
        let s_ii = s.get(i, i);
        match hardest(n, i, |j| s.get(j, i), |j| masks.motion_pruned(i, j)) {
            Some((j, v)) => {
                let h = alpha - s_ii + v;
                if h > 0.0 {
                    *value += h;
                    grad.set(i, i, grad.get(i, i) - 1.0);
                    grad.set(j, i, grad.get(j, i) + 1.0);
                }
            }
            None => {
                if count_empty {
                    *empty += 1;
                }
            }
        }
    }
}

fn square(s: &Matrix) -> Result<usize> {
    if s.rows() != s.cols() {
        return Err(Error::InvalidBatch(format!(
            "similarity matrix must be square, got {}x{}",
            s.rows(),
            s.cols()
        )));
    }
    if s.rows() == 0 {
        return Err(Error::InvalidBatch("empty similarity matrix".into()));
    }
    Ok(s.rows())
}

/// Builds the pruning masks from intra-modal similarities computed on
/// the current embeddings. For an anchor retrieving motions, motion j is
/// pruned when `S_mm[i][j] > delta_hetero` or `S_tt[i][j] > delta_homo`
/// (strict); the text mask swaps the modality roles.
pub fn false_negative_masks(
    motion: &Matrix,
    text: &Matrix,
    cfg: &LossConfig,
) -> Result<FalseNegMasks> {
    cfg.validate()?;
    if motion.rows() != text.rows() {
        return Err(Error::InvalidBatch(format!(
            "motion rows {} != text rows {}",
            motion.rows(),
            text.rows()
        )));
    }
    let s_mm = cosine_sim_matrix(motion, motion)?;
    let s_tt = cosine_sim_matrix(text, text)?;
    Ok(masks_from_similarities(&s_mm, &s_tt, cfg))
}

/// Mask construction from precomputed intra-modal similarity matrices.
pub fn masks_from_similarities(s_mm: &Matrix, s_tt: &Matrix, cfg: &LossConfig) -> FalseNegMasks {
    let n = s_mm.rows();
    let mut masks = FalseNegMasks::none(n);
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            masks.y_m[i * n + j] =
                s_mm.get(i, j) > cfg.delta_hetero || s_tt.get(i, j) > cfg.delta_homo;
            masks.y_t[i * n + j] =
                s_tt.get(i, j) > cfg.delta_hetero || s_mm.get(i, j) > cfg.delta_homo;
        }
    }
    masks
}

/// Chain rule from dL/dS to the embedding matrices:
/// grad_m[i] = sum_j dL/dS[i][j] * t_j and grad_t[j] = sum_i dL/dS[i][j] * m_i.
pub fn loss_backward_to_embeddings(
    result: &LossResult,
    batch: &BatchEmbeddings,
) -> (Matrix, Matrix) {
    grads_to_embeddings(&result.grad_sim, batch)
}

fn grads_to_embeddings(grad_sim: &Matrix, batch: &BatchEmbeddings) -> (Matrix, Matrix) {
    let n = batch.len();
    let d = batch.motion().cols();
    let mut grad_m = Matrix::zeros(n, d);
    let mut grad_t = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..n {
            let g = grad_sim.get(i, j);
            if g == 0.0 {
                continue;
            }
            let t_row = batch.text().row(j);
            let gm = grad_m.row_mut(i);
            for k in 0..d {
                gm[k] += g * t_row[k];
            }
            let m_row = batch.motion().row(i);
            let gt = grad_t.row_mut(j);
            for k in 0..d {
                gt[k] += g * m_row[k];
            }
        }
    }
    (grad_m, grad_t)
}

fn finish(sim: SimLoss, batch: &BatchEmbeddings) -> LossResult {
    let (grad_m, grad_t) = grads_to_embeddings(&sim.grad_sim, batch);
    LossResult {
        value: sim.value,
        grad_sim: sim.grad_sim,
        grad_m,
        grad_t,
        diagnostics: sim.diagnostics,
    }
}

pub fn sh_loss(batch: &BatchEmbeddings, cfg: &LossConfig) -> Result<LossResult> {
    let s = batch.similarity()?;
    Ok(finish(sh_from_similarity(&s, cfg)?, batch))
}

pub fn mh_loss(batch: &BatchEmbeddings, cfg: &LossConfig) -> Result<LossResult> {
    let s = batch.similarity()?;
    Ok(finish(mh_from_similarity(&s, cfg)?, batch))
}

pub fn droptriple_loss(batch: &BatchEmbeddings, cfg: &LossConfig) -> Result<LossResult> {
    let s = batch.similarity()?;
    let masks = false_negative_masks(batch.motion(), batch.text(), cfg)?;
    Ok(finish(droptriple_from_similarity(&s, &masks, cfg)?, batch))
}

/// Dispatch on the configured loss kind.
pub fn compute_loss(
    kind: LossKind,
    batch: &BatchEmbeddings,
    cfg: &LossConfig,
) -> Result<LossResult> {
    match kind {
        LossKind::Sh => sh_loss(batch, cfg),
        LossKind::Mh => mh_loss(batch, cfg),
        LossKind::DropTriple => droptriple_loss(batch, cfg),
    }
}
