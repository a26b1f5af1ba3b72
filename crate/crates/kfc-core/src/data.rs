//! Synthetic speech-like dataset: random prototype patterns separated by
//! near-silent gaps, a portable binary format, batching, and splits.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc::LabelSeq;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"KFC1";

/// Parameters of the synthetic task. Vocab includes blank id 0.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub pattern_len: usize,
    pub silence_min: usize,
    pub silence_max: usize,
    pub label_len_min: usize,
    pub label_len_max: usize,
    pub noise_sigma: f64,
    pub num_utterances: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            vocab_size: 9,
            feat_dim: 16,
            pattern_len: 4,
            silence_min: 2,
            silence_max: 10,
            label_len_min: 3,
            label_len_max: 10,
            noise_sigma: 0.1,
            num_utterances: 2200,
            seed: 1234,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.vocab_size < 3 {
            return Err(format!("vocab_size must be >= 3, got {}", self.vocab_size));
        }
        if self.silence_min < 1 {
            return Err("silence_min must be >= 1 (gaps guarantee droppable frames)".into());
        }
        if self.silence_max < self.silence_min {
            return Err("silence_max must be >= silence_min".into());
        }
        if self.label_len_min < 1 {
            return Err("label_len_min must be >= 1".into());
        }
        if self.label_len_max < self.label_len_min {
            return Err("label_len_max must be >= label_len_min".into());
        }
        if self.feat_dim == 0 || self.pattern_len == 0 {
            return Err("feat_dim and pattern_len must be positive".into());
        }
        if self.num_utterances == 0 {
            return Err("num_utterances must be positive".into());
        }
        Ok(())
    }
}

/// One utterance: features are T₀×F row-major, stored at f32 precision so
/// the binary format round-trips bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Vec<f32>,
    pub t0: usize,
    pub labels: LabelSeq,
}

impl Utterance {
    pub fn feature_tensor(&self, feat_dim: usize) -> Tensor {
        Tensor::from_vec(
            &[self.t0, feat_dim],
            self.features.iter().map(|&v| v as f64).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feat_dim: usize,
    pub vocab_size: usize,
    pub utterances: Vec<Utterance>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per sample keeps the stream deterministic.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Deterministic synthetic dataset: V−1 fixed prototype patterns; each
/// utterance alternates noisy silence gaps with noisy prototype renderings.
pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Dataset {
    spec.validate().expect("invalid synthetic task spec");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let f = spec.feat_dim;
    let n_symbols = spec.vocab_size - 1;
    let proto_len = spec.pattern_len * f;
    let prototypes: Vec<Vec<f64>> = (0..n_symbols)
        .map(|_| (0..proto_len).map(|_| gaussian(&mut rng)).collect())
        .collect();

    let mut utterances = Vec::with_capacity(spec.num_utterances);
    for idx in 0..spec.num_utterances {
        let u = rng.gen_range(spec.label_len_min..=spec.label_len_max);
        let ids: Vec<usize> = (0..u).map(|_| rng.gen_range(1..spec.vocab_size)).collect();
        let mut feats: Vec<f32> = Vec::new();
        let push_silence = |rng: &mut ChaCha8Rng, feats: &mut Vec<f32>| {
            let g = rng.gen_range(spec.silence_min..=spec.silence_max);
            for _ in 0..g * f {
                feats.push((spec.noise_sigma * gaussian(rng)) as f32);
            }
        };
        push_silence(&mut rng, &mut feats);
        for &id in &ids {
            let proto = &prototypes[id - 1];
            for &p in proto {
                feats.push((p + spec.noise_sigma * gaussian(&mut rng)) as f32);
            }
            push_silence(&mut rng, &mut feats);
        }
        let t0 = feats.len() / f;
        utterances.push(Utterance {
            id: format!("utt_{idx:05}"),
            features: feats,
            t0,
            labels: LabelSeq::new(ids, spec.vocab_size),
        });
    }
    Dataset {
        feat_dim: f,
        vocab_size: spec.vocab_size,
        utterances,
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}", expected = DATASET_MAGIC)]
    BadMagic { found: [u8; 4] },
    #[error("truncated dataset file: {context}")]
    Truncated { context: String },
    #[error("feature dim mismatch: file declares {file}, expected {expected}")]
    DimMismatch { file: usize, expected: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Writes the dataset: magic, u32 count, u32 feat_dim, then per utterance
/// u32 T₀, u32 U, T₀·F f32 features, U u32 label ids. All little-endian.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&(dataset.utterances.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dataset.feat_dim as u32).to_le_bytes());
    for utt in &dataset.utterances {
        buf.extend_from_slice(&(utt.t0 as u32).to_le_bytes());
        buf.extend_from_slice(&(utt.labels.len() as u32).to_le_bytes());
        for &v in &utt.features {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &id in &utt.labels.ids {
            buf.extend_from_slice(&(id as u32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], DatasetError> {
        if self.pos + n > self.bytes.len() {
            return Err(DatasetError::Truncated {
                context: format!(
                    "{context}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, context: &str) -> Result<u32, DatasetError> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Loads a dataset file; `expected_feat_dim`, when given, must match the
/// header. Vocab size is recovered as max label id + 1 (at least 2).
pub fn load_dataset(path: &Path, expected_feat_dim: Option<usize>) -> Result<Dataset, DatasetError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(DatasetError::BadMagic {
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let count = cur.u32("utterance count")? as usize;
    let feat_dim = cur.u32("feat dim")? as usize;
    if let Some(expected) = expected_feat_dim {
        if feat_dim != expected {
            return Err(DatasetError::DimMismatch {
                file: feat_dim,
                expected,
            });
        }
    }
    let mut utterances = Vec::with_capacity(count);
    let mut max_id = 1;
    for idx in 0..count {
        let t0 = cur.u32(&format!("utterance {idx} length"))? as usize;
        let u = cur.u32(&format!("utterance {idx} label count"))? as usize;
        let fbytes = cur.take(t0 * feat_dim * 4, &format!("utterance {idx} features"))?;
        let features: Vec<f32> = fbytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut ids = Vec::with_capacity(u);
        for _ in 0..u {
            let id = cur.u32(&format!("utterance {idx} labels"))? as usize;
            max_id = max_id.max(id);
            ids.push(id);
        }
        utterances.push(Utterance {
            id: format!("utt_{idx:05}"),
            features,
            t0,
            labels: LabelSeq { ids },
        });
    }
    Ok(Dataset {
        feat_dim,
        vocab_size: max_id + 1,
        utterances,
    })
}

/// One padded batch in stable dataset order.
pub struct Batch {
    /// B×Tmax×F, zero-padded past each utterance's true length.
    pub features: Tensor,
    pub lengths: Vec<usize>,
    pub labels: Vec<LabelSeq>,
    pub ids: Vec<String>,
    pub t_max: usize,
    pub feat_dim: usize,
}

impl Batch {
    /// Unpadded T×F feature tensor for utterance `i` of the batch.
    pub fn utterance_features(&self, i: usize) -> Tensor {
        let t = self.lengths[i];
        let f = self.feat_dim;
        let data = self.features.data();
        let base = i * self.t_max * f;
        Tensor::from_vec(&[t, f], data[base..base + t * f].to_vec())
    }
}

/// Chunks utterances into padded batches of at most `max_batch`, preserving
/// order. Padding rows are exactly zero.
pub fn batch(utterances: &[Utterance], feat_dim: usize, max_batch: usize) -> Vec<Batch> {
    assert!(!utterances.is_empty(), "batch() over empty utterance list");
    assert!(max_batch >= 1, "max_batch must be >= 1");
    utterances
        .chunks(max_batch)
        .map(|chunk| {
            let t_max = chunk.iter().map(|u| u.t0).max().unwrap();
            let b = chunk.len();
            let mut data = vec![0.0f64; b * t_max * feat_dim];
            for (i, utt) in chunk.iter().enumerate() {
                for (j, &v) in utt.features.iter().enumerate() {
                    data[i * t_max * feat_dim + j] = v as f64;
                }
            }
            Batch {
                features: Tensor::from_vec(&[b, t_max, feat_dim], data),
                lengths: chunk.iter().map(|u| u.t0).collect(),
                labels: chunk.iter().map(|u| u.labels.clone()).collect(),
                ids: chunk.iter().map(|u| u.id.clone()).collect(),
                t_max,
                feat_dim,
            }
        })
        .collect()
}

/// Deterministic shuffled split into (train, heldout).
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> (Dataset, Dataset) {
    assert!(
        train_fraction > 0.0 && train_fraction < 1.0,
        "train_fraction must be in (0, 1), got {train_fraction}"
    );
    let n = dataset.utterances.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let pick = |idx: &[usize]| Dataset {
        feat_dim: dataset.feat_dim,
        vocab_size: dataset.vocab_size,
        utterances: idx.iter().map(|&i| dataset.utterances[i].clone()).collect(),
    };
    (pick(&order[..n_train]), pick(&order[n_train..]))
}
