//! Retrieval protocol and metrics.
//!
//! Queries rank a gallery by cosine similarity (descending, ties broken
//! by ascending gallery index); a query's rank is the 1-based position
//! of its best-ranked relevant item. Recall@K is the percentage of
//! queries with rank <= K, the median rank averages the two central
//! order statistics for even counts, and R-sum adds the six recalls
//! (K in {1,5,10}, both retrieval directions).
//!
//! Two relevance modes: `ExactPair` counts only the query's own sample
//! as correct (the standard protocol); `Semantic` counts the whole
//! ground-truth equivalence class, which only the synthetic corpus can
//! provide.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::corpus::{format_f64, Corpus, CorpusSample};
use crate::encoder::{encode_motion, encode_text, EncoderParams};
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::numeric::{cosine_sim_matrix, Matrix};
use crate::trainer::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    ExactPair,
    Semantic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Text queries over the motion gallery.
    MotionRetrieval,
    /// Motion queries over the text gallery.
    TextRetrieval,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Direction::MotionRetrieval => write!(f, "motion_retrieval"),
            Direction::TextRetrieval => write!(f, "text_retrieval"),
        }
    }
}

/// Per-query sets of gallery ids counted as correct.
#[derive(Debug, Clone)]
pub struct RelevanceMap {
    sets: Vec<BTreeSet<usize>>,
}

impl RelevanceMap {
    pub fn new(sets: Vec<BTreeSet<usize>>, gallery_size: usize) -> Result<Self> {
        for (query, set) in sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::MissingRelevance { query });
            }
            if set.iter().any(|&id| id >= gallery_size) {
                return Err(Error::InvalidBatch(format!(
                    "query {query} lists a relevant id outside the gallery (size {gallery_size})"
                )));
            }
        }
        Ok(RelevanceMap { sets })
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn relevant(&self, query: usize) -> &BTreeSet<usize> {
        &self.sets[query]
    }
}

/// Ranks every query row of `s` against the gallery columns. Returns the
/// 1-based rank of the best-ranked relevant item per query.
pub fn rank_queries(s: &Matrix, relevance: &RelevanceMap) -> Result<Vec<usize>> {
    if relevance.len() != s.rows() {
        return Err(Error::InvalidBatch(format!(
            "{} relevance sets for {} queries",
            relevance.len(),
            s.rows()
        )));
    }
    let gallery = s.cols();
    let mut ranks = Vec::with_capacity(s.rows());
    for q in 0..s.rows() {
        let row = s.row(q);
        let mut order: Vec<usize> = (0..gallery).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let relevant = relevance.relevant(q);
        let pos = order
            .iter()
            .position(|g| relevant.contains(g))
            .ok_or(Error::MissingRelevance { query: q })?;
        ranks.push(pos + 1);
    }
    Ok(ranks)
}

/// Percentage of queries whose rank is at most `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptyRanks);
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(100.0 * hits as f64 / ranks.len() as f64)
}

/// Middle order statistic; the mean of the two central values for even
/// counts.
pub fn median_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptyRanks);
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    })
}

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone)]
pub struct RetrievalReport {
    pub direction: Direction,
    /// Recall percentages for K in {1, 5, 10}, aligned with RECALL_KS.
    pub r_at: [f64; 3],
    pub med_r: f64,
    pub ranks: Vec<usize>,
}

impl RetrievalReport {
    pub fn from_ranks(direction: Direction, ranks: Vec<usize>) -> Result<Self> {
        let mut r_at = [0.0; 3];
        for (slot, k) in r_at.iter_mut().zip(RECALL_KS) {
            *slot = recall_at_k(&ranks, k)?;
        }
        let med_r = median_rank(&ranks)?;
        Ok(RetrievalReport {
            direction,
            r_at,
            med_r,
            ranks,
        })
    }

    pub fn recall(&self, k: usize) -> Result<f64> {
        RECALL_KS
            .iter()
            .position(|&kk| kk == k)
            .map(|i| self.r_at[i])
            .ok_or(Error::MissingK(k))
    }
}

/// Six-way recall sum over both directions.
pub fn r_sum(motion_report: &RetrievalReport, text_report: &RetrievalReport) -> Result<f64> {
    let mut total = 0.0;
    for k in RECALL_KS {
        total += motion_report.recall(k)?;
    }
    for k in RECALL_KS {
        total += text_report.recall(k)?;
    }
    Ok(total)
}

/// Embeds every motion and every text of the split and runs both
/// retrieval directions. Pure in (params, split, mode).
pub fn evaluate_split(
    params: &EncoderParams,
    split: &[&CorpusSample],
    mode: EvalMode,
) -> Result<(RetrievalReport, RetrievalReport)> {
    if split.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut motion_rows = Vec::with_capacity(split.len());
    let mut text_rows = Vec::new();
    // owner[i] = split position of the sample whose text produced row i
    let mut owner = Vec::new();
    for (pos, sample) in split.iter().enumerate() {
        let (emb, _) = encode_motion(params, &sample.motion)?;
        motion_rows.push(emb.into_vec());
        for text in &sample.texts {
            let (emb, _) = encode_text(params, text)?;
            text_rows.push(emb.into_vec());
            owner.push(pos);
        }
    }
    let motions = Matrix::from_rows(&motion_rows)?;
    let texts = Matrix::from_rows(&text_rows)?;

    let same_class = |a: usize, b: usize| match mode {
        EvalMode::ExactPair => a == b,
        EvalMode::Semantic => {
            split[a].equivalence_class_id == split[b].equivalence_class_id
        }
    };

    // motion retrieval: text queries over the motion gallery
    let sims = cosine_sim_matrix(&texts, &motions)?;
    let sets: Vec<BTreeSet<usize>> = owner
        .iter()
        .map(|&o| {
            (0..split.len())
                .filter(|&g| same_class(o, g))
                .collect::<BTreeSet<usize>>()
        })
        .collect();
    let relevance = RelevanceMap::new(sets, split.len())?;
    let motion_report = RetrievalReport::from_ranks(
        Direction::MotionRetrieval,
        rank_queries(&sims, &relevance)?,
    )?;

    // text retrieval: motion queries over the text gallery
    let sims = cosine_sim_matrix(&motions, &texts)?;
    let sets: Vec<BTreeSet<usize>> = (0..split.len())
        .map(|q| {
            owner
                .iter()
                .enumerate()
                .filter(|&(_, &o)| same_class(q, o))
                .map(|(g, _)| g)
                .collect::<BTreeSet<usize>>()
        })
        .collect();
    let relevance = RelevanceMap::new(sets, owner.len())?;
    let text_report = RetrievalReport::from_ranks(
        Direction::TextRetrieval,
        rank_queries(&sims, &relevance)?,
    )?;

    Ok((motion_report, text_report))
}

/// Writes the intra-modal similarity matrices of one batch as CSV with
/// an epoch-tagged header. The batch is given as (sample, text index)
/// pairs.
pub fn export_similarity_snapshot(
    params: &EncoderParams,
    batch: &[(&CorpusSample, usize)],
    epoch: usize,
    path: &Path,
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidBatch("snapshot of an empty batch".into()));
    }
    let mut motion_rows = Vec::with_capacity(batch.len());
    let mut text_rows = Vec::with_capacity(batch.len());
    for &(sample, tid) in batch {
        let (em, _) = encode_motion(params, &sample.motion)?;
        motion_rows.push(em.into_vec());
        let (et, _) = encode_text(params, &sample.texts[tid])?;
        text_rows.push(et.into_vec());
    }
    let motions = Matrix::from_rows(&motion_rows)?;
    let texts = Matrix::from_rows(&text_rows)?;
    let s_mm = cosine_sim_matrix(&motions, &motions)?;
    let s_tt = cosine_sim_matrix(&texts, &texts)?;

    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# similarity snapshot epoch={epoch}")?;
    for (name, m) in [("s_mm", &s_mm), ("s_tt", &s_tt)] {
        writeln!(w, "# matrix={name} rows={} cols={}", m.rows(), m.cols())?;
        for i in 0..m.rows() {
            let line: Vec<String> = m.row(i).iter().map(|&v| format_f64(v)).collect();
            writeln!(w, "{}", line.join(","))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parses a snapshot file back into (epoch, s_mm, s_tt).
pub fn parse_similarity_snapshot(path: &Path) -> Result<(usize, Matrix, Matrix)> {
    let file = std::fs::File::open(path)?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()?;
    let corrupt = |reason: &str| Error::CorruptRecord {
        index: 0,
        reason: reason.to_string(),
    };

    let epoch: usize = lines
        .first()
        .and_then(|l| l.strip_prefix("# similarity snapshot epoch="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| corrupt("missing epoch header"))?;

    let mut matrices = Vec::new();
    let mut i = 1;
    while i < lines.len() {
        let header = &lines[i];
        let rows: usize = header
            .split("rows=")
            .nth(1)
            .and_then(|s| s.split_whitespace().next())
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("bad matrix header"))?;
        let mut data = Vec::new();
        for r in 0..rows {
            let line = lines
                .get(i + 1 + r)
                .ok_or_else(|| corrupt("matrix rows truncated"))?;
            for cell in line.split(',') {
                data.push(
                    cell.parse::<f64>()
                        .map_err(|e| corrupt(&format!("bad cell {cell:?}: {e}")))?,
                );
            }
        }
        let cols = if rows == 0 { 0 } else { data.len() / rows };
        matrices.push(Matrix::from_vec(rows, cols, data)?);
        i += 1 + rows;
    }
    if matrices.len() != 2 {
        return Err(corrupt("expected two matrices"));
    }
    let s_tt = matrices.pop().expect("two matrices");
    let s_mm = matrices.pop().expect("two matrices");
    Ok((epoch, s_mm, s_tt))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub delta_hetero: f64,
    pub delta_homo: f64,
    pub r_sum: f64,
    pub final_mean_loss: f64,
    /// The (1.0, 1.0) cell: pruning disabled, identical to max-of-hinges
    /// training.
    pub mh_equivalent: bool,
}

/// One full drop-triplet training run per threshold pair, all with the
/// same seed, each evaluated on the test split.
pub fn threshold_sweep(
    config: &TrainConfig,
    corpus: &Corpus,
    grid: &[(f64, f64)],
    mode: EvalMode,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("threshold grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &(delta_hetero, delta_homo) in grid {
        let mut point_config = config.clone();
        point_config.loss = LossKind::DropTriple;
        point_config.delta_hetero = delta_hetero;
        point_config.delta_homo = delta_homo;
        let state = train(point_config, corpus)?;
        let test = corpus.test_samples();
        let (motion_report, text_report) = evaluate_split(&state.params, &test, mode)?;
        rows.push(SweepRow {
            delta_hetero,
            delta_homo,
            r_sum: r_sum(&motion_report, &text_report)?,
            final_mean_loss: state.history.last().map_or(0.0, |r| r.mean_loss),
            mh_equivalent: delta_hetero == 1.0 && delta_homo == 1.0,
        });
    }
    Ok(rows)
}
