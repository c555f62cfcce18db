//! Synthetic atomic-action corpus.
//!
//! Each sample combines 1-3 distinct atomic actions. The motion is the
//! concatenation of per-action prototype segments (sums of three
//! action-seeded sinusoids per feature dimension) plus Gaussian noise;
//! every text spells the actions' word tokens in the motion's action
//! order with a few filler tokens interleaved. Samples with the same
//! action set form one semantic equivalence class, so false negatives
//! exist by construction. A configurable fraction of samples reuses an
//! earlier sample's action set to guarantee nontrivial classes.
//!
//! File format (line-delimited JSON, one record per line): the first
//! line is a manifest object tagged `"record":"manifest"` carrying the
//! format version, generation config, seed, vocab size and the
//! train/test id split; each following line is one sample tagged
//! `"record":"sample"`. Motion matrices are stored row-major as decimal
//! strings with 17 significant digits so 64-bit values round-trip
//! exactly. See the README for the documented key set.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{PoseSequence, TokenSequence};
use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::rng::Rng;

pub const CORPUS_FORMAT_VERSION: u32 = 1;

/// Sub-stream ids under the corpus seed.
const STREAM_VOCAB: u64 = 1;
const STREAM_SAMPLES: u64 = 2;
const STREAM_SPLIT: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    /// Number of atomic actions (V).
    pub num_actions: usize,
    /// Pose feature width (D_p).
    pub feature_dim: usize,
    /// Inclusive frame-count range of one action segment.
    pub frames_per_segment: (usize, usize),
    pub noise_sigma: f64,
    /// Inclusive range of texts generated per motion.
    pub texts_per_motion: (usize, usize),
    pub train_samples: usize,
    pub test_samples: usize,
    /// Fraction of samples that reuse an earlier sample's action set.
    pub duplicate_rate: f64,
    /// Number of filler tokens in the vocabulary.
    pub filler_tokens: usize,
    /// Relative weights for drawing 1, 2 or 3 actions per sample.
    pub action_count_weights: [f64; 3],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_actions: 12,
            feature_dim: 6,
            frames_per_segment: (6, 12),
            noise_sigma: 3.0,
            texts_per_motion: (1, 3),
            train_samples: 600,
            test_samples: 100,
            duplicate_rate: 0.3,
            filler_tokens: 6,
            action_count_weights: [0.5, 0.5, 0.0],
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_actions < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_actions must be >= 2, got {}",
                self.num_actions
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidConfig("feature_dim must be >= 1".into()));
        }
        if self.train_samples == 0 {
            return Err(Error::InvalidConfig("train_samples must be >= 1".into()));
        }
        if self.train_samples + self.test_samples < 2 {
            return Err(Error::InvalidConfig(
                "train_samples + test_samples must be >= 2".into(),
            ));
        }
        let (flo, fhi) = self.frames_per_segment;
        if flo == 0 || flo > fhi {
            return Err(Error::InvalidConfig(format!(
                "frames_per_segment range ({flo}, {fhi}) is invalid"
            )));
        }
        let (tlo, thi) = self.texts_per_motion;
        if tlo == 0 || tlo > thi {
            return Err(Error::InvalidConfig(format!(
                "texts_per_motion range ({tlo}, {thi}) is invalid"
            )));
        }
        if !(0.0..=1.0).contains(&self.duplicate_rate) {
            return Err(Error::InvalidConfig(format!(
                "duplicate_rate must be in [0, 1], got {}",
                self.duplicate_rate
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.action_count_weights.iter().any(|&w| w < 0.0)
            || self.action_count_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::InvalidConfig(format!(
                "action_count_weights must be nonnegative with positive sum, got {:?}",
                self.action_count_weights
            )));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.train_samples + self.test_samples
    }
}

/// One atomic action: its word tokens and the seed of its prototype
/// trajectory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionSpec {
    pub tokens: Vec<usize>,
    pub proto_seed: u64,
}

/// Action vocabulary: token ids `0..filler_tokens` are fillers, action
/// word tokens follow consecutively, so the two sets are disjoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionVocabulary {
    pub actions: Vec<ActionSpec>,
    pub filler_tokens: Vec<usize>,
    pub vocab_size: usize,
}

pub fn build_vocabulary(config: &CorpusConfig, seed: u64) -> ActionVocabulary {
    let mut rng = Rng::derive(seed, STREAM_VOCAB);
    let filler_tokens: Vec<usize> = (0..config.filler_tokens).collect();
    let mut next_id = config.filler_tokens;
    let mut actions = Vec::with_capacity(config.num_actions);
    for _ in 0..config.num_actions {
        let count = 1 + rng.below(3);
        let tokens: Vec<usize> = (0..count)
            .map(|_| {
                let id = next_id;
                next_id += 1;
                id
            })
            .collect();
        actions.push(ActionSpec {
            tokens,
            proto_seed: rng.next_u64(),
        });
    }
    ActionVocabulary {
        actions,
        filler_tokens,
        vocab_size: next_id,
    }
}

/// Prototype trajectory of one action: per feature dimension the sum of
/// three sinusoids with action-seeded amplitudes, frequencies and
/// phases, evaluated at the local frame index.
pub fn prototype_segment(spec: &ActionSpec, feature_dim: usize, frames: usize) -> Matrix {
    let mut rng = Rng::new(spec.proto_seed);
    let mut waves = Vec::with_capacity(feature_dim * 3);
    for _ in 0..feature_dim * 3 {
        let amp = rng.uniform(0.3, 1.0).expect("valid range");
        let freq = rng.uniform(0.05, 0.6).expect("valid range");
        let phase = rng.uniform(0.0, std::f64::consts::TAU).expect("valid range");
        waves.push((amp, freq, phase));
    }
    let mut out = Matrix::zeros(frames, feature_dim);
    for f in 0..frames {
        let t = f as f64;
        let row = out.row_mut(f);
        for (d, v) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..3 {
                let (amp, freq, phase) = waves[d * 3 + k];
                acc += amp * (freq * t + phase).sin();
            }
            *v = acc;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSample {
    pub sample_id: usize,
    pub motion: PoseSequence,
    pub texts: Vec<TokenSequence>,
    /// Sorted distinct action ids.
    pub action_set: Vec<usize>,
    /// Identical action sets share one id; distinct sets never do.
    pub equivalence_class_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub config: CorpusConfig,
    pub seed: u64,
    pub vocab_size: usize,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub samples: Vec<CorpusSample>,
}

impl Corpus {
    pub fn train_samples(&self) -> Vec<&CorpusSample> {
        self.manifest
            .train_ids
            .iter()
            .map(|&id| &self.samples[id])
            .collect()
    }

    pub fn test_samples(&self) -> Vec<&CorpusSample> {
        self.manifest
            .test_ids
            .iter()
            .map(|&id| &self.samples[id])
            .collect()
    }
}

/// Generates a corpus. Deterministic: the same config and seed always
/// produce bit-identical output.
pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let vocab = build_vocabulary(config, seed);
    let mut rng = Rng::derive(seed, STREAM_SAMPLES);
    let total = config.total_samples();
    let max_actions = config.num_actions.min(3);

    let mut samples: Vec<CorpusSample> = Vec::with_capacity(total);
    let mut class_ids: HashMap<Vec<usize>, usize> = HashMap::new();

    for sample_id in 0..total {
        let action_set: Vec<usize> = if sample_id > 0 && rng.next_f64() < config.duplicate_rate
        {
            samples[rng.below(sample_id)].action_set.clone()
        } else {
            let weights = &config.action_count_weights[..max_actions];
            let total: f64 = weights.iter().sum();
            let mut u = rng.next_f64() * total;
            let mut k = max_actions;
            for (i, &w) in weights.iter().enumerate() {
                if u < w {
                    k = i + 1;
                    break;
                }
                u -= w;
            }
            let mut pool: Vec<usize> = (0..config.num_actions).collect();
            for i in 0..k {
                let j = i + rng.below(config.num_actions - i);
                pool.swap(i, j);
            }
            let mut set: Vec<usize> = pool[..k].to_vec();
            set.sort_unstable();
            set
        };

        let seg_frames: Vec<usize> = action_set
            .iter()
            .map(|_| {
                let (lo, hi) = config.frames_per_segment;
                lo + rng.below(hi - lo + 1)
            })
            .collect();
        let total_frames: usize = seg_frames.iter().sum();
        let mut motion = Matrix::zeros(total_frames, config.feature_dim);
        let mut offset = 0;
        for (&action, &frames) in action_set.iter().zip(&seg_frames) {
            let proto = prototype_segment(&vocab.actions[action], config.feature_dim, frames);
            for f in 0..frames {
                let src = proto.row(f);
                let dst = motion.row_mut(offset + f);
                for d in 0..config.feature_dim {
                    dst[d] = src[d] + rng.gaussian(0.0, config.noise_sigma)?;
                }
            }
            offset += frames;
        }

        let (tlo, thi) = config.texts_per_motion;
        let n_texts = tlo + rng.below(thi - tlo + 1);
        let mut texts = Vec::with_capacity(n_texts);
        for _ in 0..n_texts {
            let mut ids = Vec::new();
            for &action in &action_set {
                if config.filler_tokens > 0 {
                    for _ in 0..rng.below(3) {
                        ids.push(vocab.filler_tokens[rng.below(config.filler_tokens)]);
                    }
                }
                ids.extend_from_slice(&vocab.actions[action].tokens);
            }
            if config.filler_tokens > 0 {
                for _ in 0..rng.below(3) {
                    ids.push(vocab.filler_tokens[rng.below(config.filler_tokens)]);
                }
            }
            texts.push(TokenSequence::new(ids)?);
        }

        let next_class = class_ids.len();
        let equivalence_class_id = *class_ids.entry(action_set.clone()).or_insert(next_class);

        samples.push(CorpusSample {
            sample_id,
            motion: PoseSequence::new(motion)?,
            texts,
            action_set,
            equivalence_class_id,
        });
    }

    let (train_ids, test_ids) = split_by_class(config, seed, &samples);
    let manifest = CorpusManifest {
        format_version: CORPUS_FORMAT_VERSION,
        config: config.clone(),
        seed,
        vocab_size: vocab.vocab_size,
        train_ids,
        test_ids,
    };
    Ok(Corpus { manifest, samples })
}

/// Splits by equivalence class so class mates stay on the same side:
/// the test gallery keeps its semantic structure and no action set leaks
/// from train into test. Multi-member classes are assigned to the test
/// bucket first (in a seeded random order, singletons after) until it
/// holds exactly `test_samples` ids; at most the boundary class
/// straddles the two splits.
fn split_by_class(
    config: &CorpusConfig,
    seed: u64,
    samples: &[CorpusSample],
) -> (Vec<usize>, Vec<usize>) {
    let num_classes = samples
        .iter()
        .map(|s| s.equivalence_class_id + 1)
        .max()
        .unwrap_or(0);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for s in samples {
        members[s.equivalence_class_id].push(s.sample_id);
    }
    let mut order: Vec<usize> = (0..num_classes).collect();
    Rng::derive(seed, STREAM_SPLIT).shuffle(&mut order);
    order.sort_by_key(|&c| usize::from(members[c].len() < 2));

    let mut test_ids = Vec::with_capacity(config.test_samples);
    let mut train_ids = Vec::with_capacity(config.train_samples);
    for class in order {
        for &id in &members[class] {
            if test_ids.len() < config.test_samples {
                test_ids.push(id);
            } else {
                train_ids.push(id);
            }
        }
    }
    train_ids.sort_unstable();
    test_ids.sort_unstable();
    (train_ids, test_ids)
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    record: String,
    #[serde(flatten)]
    manifest: CorpusManifest,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    record: String,
    sample_id: usize,
    action_set: Vec<usize>,
    equivalence_class_id: usize,
    motion_frames: usize,
    motion_dim: usize,
    /// Row-major, 17 significant digits each.
    motion_values: Vec<String>,
    texts: Vec<Vec<usize>>,
}

/// 17-significant-digit decimal, enough to round-trip any f64 exactly.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    let manifest_line = serde_json::to_string(&ManifestRecord {
        record: "manifest".into(),
        manifest: corpus.manifest.clone(),
    })
    .expect("manifest serializes");
    writeln!(w, "{manifest_line}")?;
    for sample in &corpus.samples {
        let rec = SampleRecord {
            record: "sample".into(),
            sample_id: sample.sample_id,
            action_set: sample.action_set.clone(),
            equivalence_class_id: sample.equivalence_class_id,
            motion_frames: sample.motion.frames(),
            motion_dim: sample.motion.feature_dim(),
            motion_values: sample
                .motion
                .values()
                .data()
                .iter()
                .map(|&v| format_f64(v))
                .collect(),
            texts: sample.texts.iter().map(|t| t.ids().to_vec()).collect(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("sample serializes"))?;
    }
    w.flush()?;
    Ok(())
}

fn corrupt(index: usize, reason: impl Into<String>) -> Error {
    Error::CorruptRecord {
        index,
        reason: reason.into(),
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();

    let manifest_line = lines
        .next()
        .ok_or_else(|| corrupt(0, "file is empty"))?
        .map_err(Error::Io)?;
    let manifest_rec: ManifestRecord = serde_json::from_str(&manifest_line)
        .map_err(|e| corrupt(0, format!("manifest does not parse: {e}")))?;
    if manifest_rec.record != "manifest" {
        return Err(corrupt(0, "first record is not a manifest"));
    }
    let manifest = manifest_rec.manifest;
    if manifest.format_version != CORPUS_FORMAT_VERSION {
        return Err(Error::FormatVersionMismatch {
            expected: CORPUS_FORMAT_VERSION,
            found: manifest.format_version,
        });
    }

    let total = manifest.config.total_samples();
    let mut samples = Vec::with_capacity(total);
    for (pos, line) in lines.enumerate() {
        let index = pos + 1;
        let line = line.map_err(Error::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| corrupt(index, format!("sample does not parse: {e}")))?;
        if rec.record != "sample" {
            return Err(corrupt(index, format!("unexpected record tag {:?}", rec.record)));
        }
        if rec.motion_values.len() != rec.motion_frames * rec.motion_dim {
            return Err(corrupt(
                index,
                format!(
                    "motion_values has {} entries, expected {}",
                    rec.motion_values.len(),
                    rec.motion_frames * rec.motion_dim
                ),
            ));
        }
        let mut data = Vec::with_capacity(rec.motion_values.len());
        for s in &rec.motion_values {
            let v: f64 = s
                .parse()
                .map_err(|e| corrupt(index, format!("bad float {s:?}: {e}")))?;
            data.push(v);
        }
        let motion = Matrix::from_vec(rec.motion_frames, rec.motion_dim, data)
            .map_err(|e| corrupt(index, e.to_string()))?;
        let mut texts = Vec::with_capacity(rec.texts.len());
        for ids in rec.texts {
            texts.push(
                TokenSequence::new(ids).map_err(|e| corrupt(index, e.to_string()))?,
            );
        }
        samples.push(CorpusSample {
            sample_id: rec.sample_id,
            motion: PoseSequence::new(motion).map_err(|e| corrupt(index, e.to_string()))?,
            texts,
            action_set: rec.action_set,
            equivalence_class_id: rec.equivalence_class_id,
        });
    }
    if samples.len() != total {
        return Err(corrupt(
            samples.len() + 1,
            format!("expected {total} samples, file ends after {}", samples.len()),
        ));
    }
    Ok(Corpus { manifest, samples })
}
