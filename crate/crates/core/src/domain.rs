//! Shared data types for the continuum: images, embeddings, the face
//! database and the scenario configuration with its validation rules.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration;

/// Face embeddings are fixed at 128 dimensions.
pub const EMBEDDING_DIM: usize = 128;

const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("embedding must have {EMBEDDING_DIM} values, got {0}")]
    EmbeddingDimension(usize),
    #[error("embedding contains a non-finite value")]
    EmbeddingNotFinite,
    #[error("embedding norm {0} is not 1 within {NORM_TOLERANCE}")]
    EmbeddingNotUnit(f64),
    #[error("embedding has zero norm and cannot be normalized")]
    EmbeddingZero,
    #[error("invalid image record {id}: {reason}")]
    InvalidImage { id: String, reason: &'static str },
    #[error("duplicate person id {0} in face database")]
    DuplicatePersonId(u32),
}

/// A unit-norm face embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVec(Vec<f64>);

impl EmbeddingVec {
    /// Accepts values that are already unit norm.
    pub fn new(values: Vec<f64>) -> Result<Self, DomainError> {
        Self::check_shape(&values)?;
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(DomainError::EmbeddingNotUnit(norm));
        }
        Ok(Self(values))
    }

    /// Scales arbitrary finite values onto the unit sphere.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self, DomainError> {
        Self::check_shape(&values)?;
        let norm = l2_norm(&values);
        if norm == 0.0 {
            return Err(DomainError::EmbeddingZero);
        }
        for v in &mut values {
            *v /= norm;
        }
        Ok(Self(values))
    }

    fn check_shape(values: &[f64]) -> Result<(), DomainError> {
        if values.len() != EMBEDDING_DIM {
            return Err(DomainError::EmbeddingDimension(values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DomainError::EmbeddingNotFinite);
        }
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }
}

fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PersonId {
    pub id: u32,
    pub label: String,
}

impl PersonId {
    pub fn new(id: u32, label: impl Into<String>) -> Self {
        Self {
            id,
            label: label.into(),
        }
    }
}

/// The edge's local gallery of known people.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceDatabase {
    entries: Vec<(PersonId, EmbeddingVec)>,
}

impl FaceDatabase {
    pub fn new(entries: Vec<(PersonId, EmbeddingVec)>) -> Result<Self, DomainError> {
        let mut seen = BTreeSet::new();
        for (person, _) in &entries {
            if !seen.insert(person.id) {
                return Err(DomainError::DuplicatePersonId(person.id));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(PersonId, EmbeddingVec)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&(PersonId, EmbeddingVec)> {
        self.entries.iter().find(|(p, _)| p.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ImageFormat {
    Png,
    Raw,
}

impl ImageFormat {
    pub fn tag(self) -> &'static str {
        match self {
            ImageFormat::Png => "PNG",
            ImageFormat::Raw => "RAW",
        }
    }
}

/// One dataset item. Payload bytes are opaque; the face fields are the
/// synthetic ground truth that stands in for real model outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    id: String,
    payload: Vec<u8>,
    width_px: u32,
    height_px: u32,
    format: ImageFormat,
    has_face: bool,
    ground_truth: Option<PersonId>,
    embedding: Option<EmbeddingVec>,
}

impl ImageRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        payload: Vec<u8>,
        width_px: u32,
        height_px: u32,
        format: ImageFormat,
        has_face: bool,
        ground_truth: Option<PersonId>,
        embedding: Option<EmbeddingVec>,
    ) -> Result<Self, DomainError> {
        let id = id.into();
        let invalid = |reason| DomainError::InvalidImage {
            id: id.clone(),
            reason,
        };
        if payload.is_empty() {
            return Err(invalid("payload is empty"));
        }
        if width_px == 0 || height_px == 0 {
            return Err(invalid("dimensions must be positive"));
        }
        if !has_face && (ground_truth.is_some() || embedding.is_some()) {
            return Err(invalid("image without a face cannot carry identity data"));
        }
        if has_face && embedding.is_none() {
            return Err(invalid("image with a face needs an embedding"));
        }
        Ok(Self {
            id,
            payload,
            width_px,
            height_px,
            format,
            has_face,
            ground_truth,
            embedding,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }
    pub fn payload(&self) -> &[u8] {
        &self.payload
    }
    pub fn width_px(&self) -> u32 {
        self.width_px
    }
    pub fn height_px(&self) -> u32 {
        self.height_px
    }
    pub fn format(&self) -> ImageFormat {
        self.format
    }
    pub fn has_face(&self) -> bool {
        self.has_face
    }
    pub fn ground_truth(&self) -> Option<&PersonId> {
        self.ground_truth.as_ref()
    }
    pub fn embedding(&self) -> Option<&EmbeddingVec> {
        self.embedding.as_ref()
    }
}

/// Per-stage costs in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageDurations {
    pub t_read_decode: f64,
    pub t_quality: f64,
    pub t_infer1: f64,
    pub t_infer2: f64,
    pub t_identify: f64,
    pub cloud_latency_mean: f64,
    pub cloud_latency_jitter: f64,
    /// Extra I/O-core work per image when the far-edge pipeline is split
    /// across cores (frame hand-off into the inter-core queue).
    #[serde(default)]
    pub t_pipeline_io: f64,
    /// Wake-up delay of the AI stage after it takes a frame from the
    /// inter-core queue. Parallel mode only; the core is idle meanwhile.
    #[serde(default)]
    pub t_pipeline_sync: f64,
}

impl StageDurations {
    pub fn detection_total(&self) -> f64 {
        self.t_quality + self.t_infer1 + self.t_infer2
    }

    pub const fn zero() -> Self {
        Self {
            t_read_decode: 0.0,
            t_quality: 0.0,
            t_infer1: 0.0,
            t_infer2: 0.0,
            t_identify: 0.0,
            cloud_latency_mean: 0.0,
            cloud_latency_jitter: 0.0,
            t_pipeline_io: 0.0,
            t_pipeline_sync: 0.0,
        }
    }

    fn fields(&self) -> [(&'static str, f64); 9] {
        [
            ("t_read_decode", self.t_read_decode),
            ("t_quality", self.t_quality),
            ("t_infer1", self.t_infer1),
            ("t_infer2", self.t_infer2),
            ("t_identify", self.t_identify),
            ("cloud_latency_mean", self.cloud_latency_mean),
            ("cloud_latency_jitter", self.cloud_latency_jitter),
            ("t_pipeline_io", self.t_pipeline_io),
            ("t_pipeline_sync", self.t_pipeline_sync),
        ]
    }
}

impl Default for StageDurations {
    fn default() -> Self {
        calibration::CALIBRATED_STAGES
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkParams {
    /// One-way propagation latency in seconds.
    pub latency: f64,
    /// Bytes per second.
    pub bandwidth: f64,
}

impl LinkParams {
    pub const fn new(latency: f64, bandwidth: f64) -> Self {
        Self { latency, bandwidth }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TransportKind {
    BlockingSession,
    Pubsub,
}

impl TransportKind {
    pub fn name(self) -> &'static str {
        match self {
            TransportKind::BlockingSession => "BLOCKING_SESSION",
            TransportKind::Pubsub => "PUBSUB",
        }
    }
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TimeMode {
    Virtual,
    WallclockTcp,
}

/// Full description of one experiment run.
///
/// The JSON form uses these field names verbatim and rejects unknown keys.
/// Fields after `queue_capacity` carry defaults so minimal files stay short.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub transport: TransportKind,
    pub parallelism: bool,
    pub cloud_enabled: bool,
    pub dataset_size: usize,
    #[serde(default = "defaults::chunk_size_bytes")]
    pub chunk_size_bytes: usize,
    pub stage_durations: StageDurations,
    pub link_far_to_edge: LinkParams,
    pub link_edge_to_cloud: LinkParams,
    pub similarity_threshold: f64,
    #[serde(default = "defaults::fp_rate")]
    pub fp_rate: f64,
    pub rng_seed: u64,
    pub time_mode: TimeMode,
    pub queue_capacity: usize,

    #[serde(default = "defaults::face_prob")]
    pub face_prob: f64,
    #[serde(default = "defaults::known_prob")]
    pub known_prob: f64,
    #[serde(default = "defaults::payload_bytes")]
    pub payload_bytes: usize,
    #[serde(default = "defaults::width_px")]
    pub width_px: u32,
    #[serde(default = "defaults::height_px")]
    pub height_px: u32,
    #[serde(default = "defaults::db_size")]
    pub db_size: usize,
    /// Relative half-width of the per-image stage-time jitter; 0 disables it.
    #[serde(default)]
    pub stage_jitter: f64,
    #[serde(default = "defaults::session_timeout")]
    pub session_timeout: f64,
    #[serde(default = "defaults::result_timeout")]
    pub result_timeout: f64,
    #[serde(default = "defaults::cloud_timeout")]
    pub cloud_timeout: f64,
    #[serde(default = "defaults::grant_ttl")]
    pub grant_ttl: f64,
    #[serde(default = "defaults::time_scale")]
    pub time_scale: f64,
    #[serde(default)]
    pub tcp_port_edge: u16,
    #[serde(default)]
    pub tcp_port_cloud: u16,
    #[serde(default)]
    pub dataset_dir: Option<String>,
}

mod defaults {
    pub fn chunk_size_bytes() -> usize {
        1024
    }
    pub fn fp_rate() -> f64 {
        0.627
    }
    pub fn face_prob() -> f64 {
        1.0
    }
    pub fn known_prob() -> f64 {
        0.5
    }
    pub fn payload_bytes() -> usize {
        // 160x320 RGB565 frame
        102_400
    }
    pub fn width_px() -> u32 {
        160
    }
    pub fn height_px() -> u32 {
        320
    }
    pub fn db_size() -> usize {
        4
    }
    pub fn session_timeout() -> f64 {
        30.0
    }
    pub fn result_timeout() -> f64 {
        600.0
    }
    pub fn cloud_timeout() -> f64 {
        120.0
    }
    pub fn grant_ttl() -> f64 {
        60.0
    }
    pub fn time_scale() -> f64 {
        0.01
    }
}

impl Default for ScenarioConfig {
    /// The 47-image field scenario: pub/sub, parallel pipeline, cloud on.
    fn default() -> Self {
        Self {
            transport: TransportKind::Pubsub,
            parallelism: true,
            cloud_enabled: true,
            dataset_size: 47,
            chunk_size_bytes: defaults::chunk_size_bytes(),
            stage_durations: StageDurations::default(),
            link_far_to_edge: calibration::FIELD_FAR_TO_EDGE,
            link_edge_to_cloud: calibration::EDGE_TO_CLOUD,
            similarity_threshold: 0.5,
            fp_rate: defaults::fp_rate(),
            rng_seed: 42,
            time_mode: TimeMode::Virtual,
            queue_capacity: 4,
            face_prob: defaults::face_prob(),
            known_prob: defaults::known_prob(),
            payload_bytes: defaults::payload_bytes(),
            width_px: defaults::width_px(),
            height_px: defaults::height_px(),
            db_size: defaults::db_size(),
            stage_jitter: 0.0,
            session_timeout: defaults::session_timeout(),
            result_timeout: defaults::result_timeout(),
            cloud_timeout: defaults::cloud_timeout(),
            grant_ttl: defaults::grant_ttl(),
            time_scale: defaults::time_scale(),
            tcp_port_edge: 0,
            tcp_port_cloud: 0,
            dataset_dir: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config io error: {0}")]
    Io(#[from] std::io::Error),
}

impl ScenarioConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_json_string() + "\n")?;
        Ok(())
    }
}

/// One violated constraint, printed as the rule that failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation(pub String);

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub type ValidationResult = Result<(), Vec<Violation>>;

/// Checks every cross-field rule. `Ok` means no consumer needs to re-check.
pub fn validate_config(cfg: &ScenarioConfig) -> ValidationResult {
    let mut out = Vec::new();
    let mut check = |ok: bool, rule: &str| {
        if !ok {
            out.push(Violation(rule.to_string()));
        }
    };
    let non_negative = |v: f64| v.is_finite() && v >= 0.0;
    let unit = |v: f64| (0.0..=1.0).contains(&v);

    check(cfg.dataset_size >= 1, "dataset_size ≥ 1");
    check(cfg.chunk_size_bytes >= 64, "chunk_size_bytes ≥ 64");
    check(cfg.queue_capacity >= 1, "queue_capacity ≥ 1");
    check(unit(cfg.fp_rate), "fp_rate in [0,1]");
    check(
        cfg.similarity_threshold > 0.0 && cfg.similarity_threshold < 1.0,
        "similarity_threshold in (0,1)",
    );
    for (name, value) in cfg.stage_durations.fields() {
        check(non_negative(value), &format!("stage_durations.{name} ≥ 0"));
    }
    for (name, link) in [
        ("link_far_to_edge", cfg.link_far_to_edge),
        ("link_edge_to_cloud", cfg.link_edge_to_cloud),
    ] {
        check(non_negative(link.latency), &format!("{name}.latency ≥ 0"));
        check(
            link.bandwidth.is_finite() && link.bandwidth > 0.0,
            &format!("{name}.bandwidth > 0"),
        );
    }
    check(unit(cfg.face_prob), "face_prob in [0,1]");
    check(unit(cfg.known_prob), "known_prob in [0,1]");
    check(cfg.payload_bytes >= 1, "payload_bytes ≥ 1");
    check(
        cfg.width_px >= 1 && cfg.height_px >= 1,
        "width_px, height_px ≥ 1",
    );
    check(cfg.db_size >= 1, "db_size ≥ 1");
    check(
        cfg.stage_jitter.is_finite() && (0.0..1.0).contains(&cfg.stage_jitter),
        "stage_jitter in [0,1)",
    );
    for (name, value) in [
        ("session_timeout", cfg.session_timeout),
        ("result_timeout", cfg.result_timeout),
        ("cloud_timeout", cfg.cloud_timeout),
        ("grant_ttl", cfg.grant_ttl),
        ("time_scale", cfg.time_scale),
    ] {
        check(value.is_finite() && value > 0.0, &format!("{name} > 0"));
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}
