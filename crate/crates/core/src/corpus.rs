//! Deterministic two-domain synthetic speech with exact alignments.
//!
//! Every label owns a fixed 8-dim signature. A token lasts 3–8 encoder frames
//! (60 ms each, six 10 ms feature frames per encoder frame); its feature frames
//! are the signature plus Gaussian noise. Trailing silence uses the zero
//! signature.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::DomainId;
use crate::error::{Error, Result};
use crate::lattice::Alignment;
use crate::tensor::Tensor;

/// Labels are `1..=NUM_LABELS`; 0 is blank.
pub const NUM_LABELS: usize = 16;
pub const FEATURE_DIM: usize = 8;
/// 10 ms feature frames per 60 ms encoder frame.
pub const RAW_PER_FRAME: usize = 6;
pub const FRAME_MS: f64 = 60.0;
pub const NOISE_SIGMA: f64 = 0.1;
const SIGNATURE_SEED: u64 = 0x5167_a11e;

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub domain: DomainId,
    pub tokens: Vec<usize>,
    /// `frames × FEATURE_DIM` at 10 ms.
    pub features: Tensor,
    /// Last 60 ms frame of each token.
    pub alignment: Alignment,
    pub speech_end_ms: f64,
}

impl Utterance {
    /// Encoder frames (60 ms) covered by the features.
    pub fn frames(&self) -> usize {
        self.features.rows().div_ceil(RAW_PER_FRAME)
    }

    pub fn audio_ms(&self) -> f64 {
        self.features.rows() as f64 * FRAME_MS / RAW_PER_FRAME as f64
    }

    /// Reference end time of token `u` in ms.
    pub fn token_end_ms(&self, u: usize) -> f64 {
        (self.alignment.frames[u] + 1) as f64 * FRAME_MS
    }
}

/// Fixed per-label signatures; row 0 (blank/silence) is zero.
pub fn signatures() -> Vec<[f64; FEATURE_DIM]> {
    let mut rng = ChaCha8Rng::seed_from_u64(SIGNATURE_SEED);
    let normal = Normal::new(0.0, 1.0).expect("valid sigma");
    let mut out = vec![[0.0; FEATURE_DIM]];
    for _ in 0..NUM_LABELS {
        let mut s = [0.0; FEATURE_DIM];
        s.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        out.push(s);
    }
    out
}

pub fn generate_utterance(domain: DomainId, seed: u64) -> Utterance {
    generate_utterance_with_noise(domain, seed, NOISE_SIGMA)
}

pub fn generate_utterance_with_noise(domain: DomainId, seed: u64, sigma: f64) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = match domain {
        DomainId::VCmd => rng.gen_range(2..=6),
        DomainId::Dictation => rng.gen_range(10..=40),
    };
    let mut tokens: Vec<usize> = Vec::with_capacity(count);
    for _ in 0..count {
        // Adjacent repeats would be indistinguishable from one long token.
        let prev = tokens.last().copied();
        let mut t = rng.gen_range(1..=NUM_LABELS - usize::from(prev.is_some()));
        if let Some(p) = prev {
            if t >= p {
                t += 1;
            }
        }
        tokens.push(t);
    }
    let mut frame_labels = Vec::new();
    let mut ends = Vec::with_capacity(count);
    for &t in &tokens {
        let dur = rng.gen_range(3..=8);
        frame_labels.extend(std::iter::repeat_n(t, dur));
        ends.push(frame_labels.len() - 1);
    }
    let speech_frames = frame_labels.len();
    let silence = rng.gen_range(5..=15);
    frame_labels.extend(std::iter::repeat_n(0, silence));

    let sigs = signatures();
    let mut data = Vec::with_capacity(frame_labels.len() * RAW_PER_FRAME * FEATURE_DIM);
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("non-negative sigma");
    for &label in &frame_labels {
        for _ in 0..RAW_PER_FRAME {
            for &s in &sigs[label] {
                let n = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push(s + n);
            }
        }
    }
    let rows = frame_labels.len() * RAW_PER_FRAME;
    Utterance {
        id: format!("{domain}-{seed:016x}"),
        domain,
        tokens,
        features: Tensor::matrix(rows, FEATURE_DIM, data).expect("sized"),
        alignment: Alignment {
            frames: ends,
            end_frame: speech_frames - 1,
        },
        speech_end_ms: speech_frames as f64 * FRAME_MS,
    }
}

/// Per-utterance seed derived from the corpus seed, domain and index.
pub fn utterance_seed(seed: u64, domain: DomainId, index: usize) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((domain.index() as u64) << 40)
        .wrapping_add(index as u64);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `per_domain` VCmd utterances followed by `per_domain` Dictation utterances.
pub fn generate_corpus(per_domain: usize, seed: u64) -> Vec<Utterance> {
    DomainId::ALL
        .iter()
        .flat_map(|&d| (0..per_domain).map(move |i| generate_utterance(d, utterance_seed(seed, d, i))))
        .collect()
}

/// Domain-pure group of utterances, zero-padded to the longest member.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub domain: DomainId,
    /// Indices into the corpus.
    pub members: Vec<usize>,
    pub max_frames: usize,
    /// `members.len() × max_frames` (10 ms frames); false on padding.
    pub mask: Vec<bool>,
}

impl Batch {
    /// Features of every member padded with zero frames to `max_frames`.
    pub fn padded_features(&self, corpus: &[Utterance]) -> Vec<Tensor> {
        self.members
            .iter()
            .map(|&i| {
                let f = &corpus[i].features;
                let mut data = f.data().to_vec();
                data.resize(self.max_frames * FEATURE_DIM, 0.0);
                Tensor::matrix(self.max_frames, FEATURE_DIM, data).expect("sized")
            })
            .collect()
    }
}

/// Shuffle each domain, cut into batches of at most `batch_size`, then shuffle
/// batch order. Each domain's final batch may be short.
pub fn make_batches(corpus: &[Utterance], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be at least 1".into()));
    }
    if corpus.is_empty() {
        return Err(Error::InvalidInput("cannot batch an empty corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = Vec::new();
    for domain in DomainId::ALL {
        let mut idx: Vec<usize> = (0..corpus.len()).filter(|&i| corpus[i].domain == domain).collect();
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(batch_size) {
            let max_frames = chunk.iter().map(|&i| corpus[i].features.rows()).max().unwrap_or(0);
            let mask = chunk
                .iter()
                .flat_map(|&i| (0..max_frames).map(move |f| f < corpus[i].features.rows()))
                .collect();
            batches.push(Batch {
                domain,
                members: chunk.to_vec(),
                max_frames,
                mask,
            });
        }
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

pub const INDEX_FILE: &str = "corpus.jsonl";
pub const FEATURE_FILE: &str = "features.bin";

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    domain: DomainId,
    tokens: Vec<usize>,
    alignment: Vec<usize>,
    speech_end_ms: f64,
    /// Offset of the first value in `features.bin`, counted in f64 values.
    feature_offset: u64,
    feature_frames: usize,
}

/// Write `corpus.jsonl` and `features.bin` (little-endian f64) into `dir`.
pub fn export_corpus(corpus: &[Utterance], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut index = BufWriter::new(File::create(dir.join(INDEX_FILE))?);
    let mut blob = BufWriter::new(File::create(dir.join(FEATURE_FILE))?);
    let mut offset = 0u64;
    for u in corpus {
        let rec = Record {
            id: u.id.clone(),
            domain: u.domain,
            tokens: u.tokens.clone(),
            alignment: u.alignment.frames.clone(),
            speech_end_ms: u.speech_end_ms,
            feature_offset: offset,
            feature_frames: u.features.rows(),
        };
        serde_json::to_writer(&mut index, &rec)?;
        index.write_all(b"\n")?;
        for v in u.features.data() {
            blob.write_all(&v.to_le_bytes())?;
        }
        offset += u.features.len() as u64;
    }
    index.flush()?;
    blob.flush()?;
    Ok(())
}

pub fn import_corpus(dir: &Path) -> Result<Vec<Utterance>> {
    let mut raw = Vec::new();
    File::open(dir.join(FEATURE_FILE))?.read_to_end(&mut raw)?;
    if raw.len() % 8 != 0 {
        return Err(Error::InvalidInput(format!("{FEATURE_FILE} is not a whole number of f64 values")));
    }
    let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut out = Vec::new();
    for (n, line) in BufReader::new(File::open(dir.join(INDEX_FILE))?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        let start = rec.feature_offset as usize;
        let end = start + rec.feature_frames * FEATURE_DIM;
        if end > values.len() || rec.alignment.len() != rec.tokens.len() || rec.tokens.is_empty() {
            return Err(Error::InvalidInput(format!("{INDEX_FILE} line {}: inconsistent record", n + 1)));
        }
        let last = *rec.alignment.last().expect("non-empty");
        out.push(Utterance {
            id: rec.id,
            domain: rec.domain,
            tokens: rec.tokens,
            features: Tensor::matrix(rec.feature_frames, FEATURE_DIM, values[start..end].to_vec())?,
            alignment: Alignment::new(rec.alignment, last)?,
            speech_end_ms: rec.speech_end_ms,
        });
    }
    Ok(out)
}
