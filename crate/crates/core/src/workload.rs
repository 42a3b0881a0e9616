//! Synthetic dataset generation and the timed AI stages of each tier.
//!
//! Accuracy is not modeled: detection passes the ground truth through,
//! identification is a cosine nearest match over embeddings, and the
//! cloud recognizer injects false positives at a configured rate.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::domain::{
    DomainError, EmbeddingVec, FaceDatabase, ImageFormat, ImageRecord, PersonId, StageDurations,
    EMBEDDING_DIM,
};
use crate::netsim::SimCore;

/// Half-width of the per-coordinate noise added to a gallery embedding
/// to produce a probe of the same person (cosine ≈ 0.84 on average).
pub const PROBE_NOISE: f64 = 0.1;

/// Number of distinct labels the cloud recognizer can hallucinate.
pub const CELEBRITY_COUNT: u64 = 100;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64: fully determined by its 64-bit state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prng {
    state: u64,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// An independent generator for `(seed, stream, index)`.
    pub fn stream(seed: u64, stream: u64, index: u64) -> Self {
        let mut mixer = Prng::new(seed ^ stream.wrapping_mul(GOLDEN_GAMMA));
        let base = mixer.next_u64();
        let mut mixer = Prng::new(base ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        Prng::new(mixer.next_u64())
    }
}

/// Stream tags; one per independent consumer of randomness.
pub mod streams {
    pub const FACE_DB: u64 = 1;
    pub const IDENTITY: u64 = 2;
    pub const PAYLOAD: u64 = 3;
    pub const CLOUD: u64 = 4;
    pub const FAR_JITTER: u64 = 5;
    pub const EDGE_JITTER: u64 = 6;
    pub const CLOUD_LATENCY: u64 = 7;
    pub const TOKENS: u64 = 8;
}

/// FNV-1a, used to key per-image random streams by image id.
pub fn id_hash(id: &str) -> u64 {
    id.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01B3)
    })
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("face database is empty")]
    EmptyDatabase,
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("dataset directory: {0}")]
    Io(#[from] std::io::Error),
    #[error("ground truth file: {0}")]
    GroundTruth(String),
}

fn random_unit(rng: &mut Prng) -> EmbeddingVec {
    loop {
        let v: Vec<f64> = (0..EMBEDDING_DIM)
            .map(|_| 2.0 * rng.next_f64() - 1.0)
            .collect();
        if let Ok(e) = EmbeddingVec::normalized(v) {
            return e;
        }
    }
}

fn perturbed(base: &EmbeddingVec, rng: &mut Prng) -> EmbeddingVec {
    let v = base
        .values()
        .iter()
        .map(|x| x + PROBE_NOISE * (2.0 * rng.next_f64() - 1.0))
        .collect();
    EmbeddingVec::normalized(v).unwrap_or_else(|_| base.clone())
}

/// A seeded gallery of `size` people labelled "Person <id>".
pub fn generate_face_db(seed: u64, size: usize) -> FaceDatabase {
    let mut rng = Prng::stream(seed, streams::FACE_DB, 0);
    let entries = (0..size as u32)
        .map(|id| {
            (
                PersonId::new(id, format!("Person {id}")),
                random_unit(&mut rng),
            )
        })
        .collect();
    FaceDatabase::new(entries).expect("sequential ids are distinct")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetParams {
    pub n: usize,
    pub face_prob: f64,
    pub known_prob: f64,
    pub payload_bytes: usize,
    pub width_px: u32,
    pub height_px: u32,
}

/// Identity of one synthetic image without its payload bytes. Payloads
/// are regenerated on demand so large datasets stay cheap to hold.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSpec {
    pub index: usize,
    pub id: String,
    pub has_face: bool,
    pub ground_truth: Option<PersonId>,
    pub embedding: Option<EmbeddingVec>,
    payload: PayloadSource,
}

#[derive(Debug, Clone, PartialEq)]
enum PayloadSource {
    Seeded { seed: u64, len: usize },
    Bytes(std::sync::Arc<Vec<u8>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageSpec>,
    pub width_px: u32,
    pub height_px: u32,
    pub format: ImageFormat,
}

pub fn image_id(index: usize) -> String {
    format!("seed{}", 107_500 + index)
}

fn seeded_payload(seed: u64, index: usize, len: usize) -> Vec<u8> {
    let mut rng = Prng::stream(seed, streams::PAYLOAD, index as u64);
    let mut out = Vec::with_capacity(len + 8);
    while out.len() < len {
        out.extend_from_slice(&rng.next_u64().to_le_bytes());
    }
    out.truncate(len);
    out
}

impl ImageSpec {
    pub fn payload(&self) -> Vec<u8> {
        match &self.payload {
            PayloadSource::Seeded { seed, len } => seeded_payload(*seed, self.index, *len),
            PayloadSource::Bytes(b) => b.as_ref().clone(),
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn record(&self, index: usize) -> ImageRecord {
        let s = &self.images[index];
        ImageRecord::new(
            s.id.clone(),
            s.payload(),
            self.width_px,
            self.height_px,
            self.format,
            s.has_face,
            s.ground_truth.clone(),
            s.embedding.clone(),
        )
        .expect("dataset specs satisfy record invariants")
    }

    pub fn records(&self) -> Vec<ImageRecord> {
        (0..self.len()).map(|i| self.record(i)).collect()
    }
}

fn check_prob(p: f64) -> Result<(), WorkloadError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(WorkloadError::InvalidProbability(p))
    }
}

pub fn plan_dataset(
    seed: u64,
    params: &DatasetParams,
    db: &FaceDatabase,
) -> Result<Dataset, WorkloadError> {
    check_prob(params.face_prob)?;
    check_prob(params.known_prob)?;
    if params.known_prob > 0.0 && db.is_empty() {
        return Err(WorkloadError::EmptyDatabase);
    }
    let images = (0..params.n)
        .map(|index| {
            let mut rng = Prng::stream(seed, streams::IDENTITY, index as u64);
            let has_face = rng.next_f64() < params.face_prob;
            let (ground_truth, embedding) = if !has_face {
                (None, None)
            } else if rng.next_f64() < params.known_prob {
                let pick = (rng.next_f64() * db.len() as f64) as usize;
                let (person, base) = &db.entries()[pick.min(db.len() - 1)];
                (Some(person.clone()), Some(perturbed(base, &mut rng)))
            } else {
                (None, Some(random_unit(&mut rng)))
            };
            ImageSpec {
                index,
                id: image_id(index),
                has_face,
                ground_truth,
                embedding,
                payload: PayloadSource::Seeded {
                    seed,
                    len: params.payload_bytes,
                },
            }
        })
        .collect();
    Ok(Dataset {
        images,
        width_px: params.width_px,
        height_px: params.height_px,
        format: ImageFormat::Png,
    })
}

/// `n` seeded records: faces with probability `face_prob`, each a noisy
/// copy of a gallery person with probability `known_prob`.
pub fn generate_dataset(
    seed: u64,
    params: &DatasetParams,
    db: &FaceDatabase,
) -> Result<Vec<ImageRecord>, WorkloadError> {
    Ok(plan_dataset(seed, params, db)?.records())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruthEntry {
    has_face: bool,
    person_id: Option<u32>,
}

/// Loads real files as opaque payloads. `ground_truth.json` in the same
/// directory maps each file name to `{"has_face": bool, "person_id": u32|null}`.
pub fn load_dataset_dir(
    dir: &Path,
    seed: u64,
    db: &FaceDatabase,
    width_px: u32,
    height_px: u32,
) -> Result<Dataset, WorkloadError> {
    let sidecar = std::fs::read_to_string(dir.join("ground_truth.json"))?;
    let truth: BTreeMap<String, GroundTruthEntry> =
        serde_json::from_str(&sidecar).map_err(|e| WorkloadError::GroundTruth(e.to_string()))?;
    let mut format = ImageFormat::Raw;
    let mut images = Vec::new();
    for (index, (name, entry)) in truth.iter().enumerate() {
        let bytes = std::fs::read(dir.join(name))?;
        if bytes.is_empty() {
            return Err(WorkloadError::GroundTruth(format!("{name} is empty")));
        }
        if name.to_ascii_lowercase().ends_with(".png") {
            format = ImageFormat::Png;
        }
        let mut rng = Prng::stream(seed, streams::IDENTITY, index as u64);
        let (ground_truth, embedding) = match (entry.has_face, entry.person_id) {
            (false, Some(_)) => {
                return Err(WorkloadError::GroundTruth(format!(
                    "{name}: person without a face"
                )))
            }
            (false, None) => (None, None),
            (true, None) => (None, Some(random_unit(&mut rng))),
            (true, Some(pid)) => {
                let (person, base) = db.get(pid).ok_or_else(|| {
                    WorkloadError::GroundTruth(format!("{name}: person {pid} not in database"))
                })?;
                (Some(person.clone()), Some(perturbed(base, &mut rng)))
            }
        };
        let id = Path::new(name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| name.clone());
        images.push(ImageSpec {
            index,
            id,
            has_face: entry.has_face,
            ground_truth,
            embedding,
            payload: PayloadSource::Bytes(std::sync::Arc::new(bytes)),
        });
    }
    Ok(Dataset {
        images,
        width_px,
        height_px,
        format,
    })
}

/// Multiplicative stage-time factor in `[1 - jitter, 1 + jitter]`.
pub fn jitter_factor(seed: u64, stream: u64, index: u64, jitter: f64) -> f64 {
    if jitter == 0.0 {
        return 1.0;
    }
    let u = Prng::stream(seed, stream, index).next_f64();
    1.0 + jitter * (2.0 * u - 1.0)
}

pub fn scaled(d: &StageDurations, factor: f64) -> StageDurations {
    StageDurations {
        t_read_decode: d.t_read_decode * factor,
        t_quality: d.t_quality * factor,
        t_infer1: d.t_infer1 * factor,
        t_infer2: d.t_infer2 * factor,
        t_identify: d.t_identify * factor,
        ..*d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub image_id: String,
    pub face_found: bool,
    pub t_quality: f64,
    pub t_infer1: f64,
    pub t_infer2: f64,
    pub started_at: f64,
    pub finished_at: f64,
}

impl DetectionResult {
    pub fn total(&self) -> f64 {
        self.t_quality + self.t_infer1 + self.t_infer2
    }
}

/// Quality check then two inference passes on `core`.
pub fn detect(
    image_id: &str,
    has_face: bool,
    durations: &StageDurations,
    core: &mut SimCore,
    now: f64,
) -> DetectionResult {
    let start = now.max(core.free_at());
    let (_, after_quality) = core.execute(start, durations.t_quality);
    let (_, after_infer1) = core.execute(after_quality, durations.t_infer1);
    let (_, finished_at) = core.execute(after_infer1, durations.t_infer2);
    let started_at = start;
    DetectionResult {
        image_id: image_id.to_string(),
        face_found: has_face,
        t_quality: durations.t_quality,
        t_infer1: durations.t_infer1,
        t_infer2: durations.t_infer2,
        started_at,
        finished_at: finished_at.max(now),
    }
}

pub fn cosine(a: &EmbeddingVec, b: &EmbeddingVec) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum()
}

/// Highest score wins; equal scores go to the lower person id.
pub fn best_match<'a>(
    scores: impl IntoIterator<Item = (&'a PersonId, f64)>,
) -> Option<(&'a PersonId, f64)> {
    scores
        .into_iter()
        .fold(None, |best, (person, score)| match best {
            Some((bp, bs)) if bs > score || (bs == score && bp.id < person.id) => Some((bp, bs)),
            _ => Some((person, score)),
        })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentifyResult {
    pub best_person: PersonId,
    pub best_similarity: f64,
    pub recognized: bool,
    pub t_identify: f64,
    pub finished_at: f64,
}

/// Scores every gallery entry, occupying `core` for `t_identify`.
pub fn identify(
    embedding: &EmbeddingVec,
    db: &FaceDatabase,
    threshold: f64,
    core: &mut SimCore,
    t_identify: f64,
    now: f64,
) -> Result<IdentifyResult, WorkloadError> {
    let (person, score) = best_match(db.entries().iter().map(|(p, e)| (p, cosine(embedding, e))))
        .ok_or(WorkloadError::EmptyDatabase)?;
    let (_, finished_at) = core.execute(now, t_identify);
    Ok(IdentifyResult {
        best_person: person.clone(),
        best_similarity: score,
        recognized: score >= threshold,
        t_identify,
        finished_at,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CloudOutcome {
    Match(String),
    NoMatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudResult {
    pub image_id: String,
    pub outcome: CloudOutcome,
    pub is_false_positive: bool,
    pub t_cloud: f64,
}

pub fn celebrity_label(index: u64) -> String {
    format!("Celebrity {index:02}")
}

/// Known faces come back with their label. Unknown faces draw exactly
/// one sample: below `fp_rate` it is a false match whose label is picked
/// from the same draw, otherwise no match.
pub fn cloud_recognize(
    image_id: &str,
    ground_truth: Option<&PersonId>,
    fp_rate: f64,
    rng: &mut Prng,
    latency: f64,
) -> CloudResult {
    let (outcome, is_false_positive) = match ground_truth {
        Some(person) => (CloudOutcome::Match(person.label.clone()), false),
        None => {
            let u = rng.next_f64();
            if u < fp_rate {
                let pick = ((u / fp_rate) * CELEBRITY_COUNT as f64) as u64;
                (
                    CloudOutcome::Match(celebrity_label(pick.min(CELEBRITY_COUNT - 1))),
                    true,
                )
            } else {
                (CloudOutcome::NoMatch, false)
            }
        }
    };
    CloudResult {
        image_id: image_id.to_string(),
        outcome,
        is_false_positive,
        t_cloud: latency,
    }
}

/// Per-image cloud generator so results do not depend on request order.
pub fn cloud_rng(seed: u64, image_id: &str) -> Prng {
    Prng::stream(seed, streams::CLOUD, id_hash(image_id))
}
