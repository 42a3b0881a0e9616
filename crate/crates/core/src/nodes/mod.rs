//! The three tiers and the messages they exchange.
//!
//! [`EdgeService`] and [`CloudService`] are transport-free state machines;
//! [`sim`] drives them over the discrete-event engine and [`tcp`] over
//! loopback sockets.

mod cloud;
mod edge;
pub mod sim;
pub mod tcp;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunkwire::FragmentError;
use crate::metrics::{MetricsRecord, Origin};
use crate::workload::WorkloadError;

pub use cloud::{cloud_serve, CloudError, CloudReply, CloudService};
pub use edge::{edge_serve, Decision, EdgeService, Ingest};
pub use sim::{far_edge_run, run_scenario, Faults, RunOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResultOrigin {
    Edge,
    Cloud,
}

impl From<ResultOrigin> for Origin {
    fn from(o: ResultOrigin) -> Self {
        match o {
            ResultOrigin::Edge => Origin::Edge,
            ResultOrigin::Cloud => Origin::Cloud,
        }
    }
}

/// Identification outcome delivered to the far edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultMessage {
    pub image_id: String,
    pub origin: ResultOrigin,
    pub recognized: bool,
    pub label: Option<String>,
    pub is_false_positive: bool,
}

/// Single-use authorization for one upload to the cloud store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresignedGrant {
    pub upload_token: String,
    pub image_id: String,
    pub expires_at: f64,
}

/// Every non-chunk message, tagged by `msg_type`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "msg_type", rename_all = "snake_case")]
pub enum ControlMessage {
    Result(ResultMessage),
    GrantRequest {
        image_id: String,
    },
    Grant(PresignedGrant),
    Upload {
        image_id: String,
        upload_token: String,
        payload: String,
    },
}

impl ControlMessage {
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("control messages serialize")
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }
}

impl ResultMessage {
    pub fn encode(&self) -> Vec<u8> {
        ControlMessage::Result(self.clone()).encode()
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        match ControlMessage::decode(bytes) {
            Ok(ControlMessage::Result(r)) => Some(r),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Fragment(#[from] FragmentError),
    #[error("transport failure: {reason}")]
    TransportFailure {
        reason: String,
        partial: Vec<MetricsRecord>,
    },
    #[error("record for `{0}` is incomplete")]
    IncompleteRecord(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Timestamps collected for one image over a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageTrace {
    pub image_id: String,
    pub has_face: bool,
    pub t_read_decode: f64,
    pub t_quality: f64,
    pub t_infer1: f64,
    pub t_infer2: f64,
    pub detected_at: Option<f64>,
    /// First byte of the first frame leaves the far edge.
    pub upload_start: Option<f64>,
    /// Last frame delivered (pub/sub) or acknowledged (blocking session).
    pub upload_end: Option<f64>,
    pub t_identify: Option<f64>,
    pub result: Option<ResultMessage>,
    pub result_at: Option<f64>,
    pub timed_out_at: Option<f64>,
}

impl ImageTrace {
    pub fn completed_at(&self) -> Option<f64> {
        if !self.has_face {
            return self.detected_at;
        }
        self.result_at.or(self.timed_out_at)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Rtts {
    pub edge_rtt: Option<f64>,
    pub cloud_rtt: Option<f64>,
}

/// Upload start to result arrival, filed under the result's origin.
/// Images without a face (or whose result timed out) have neither.
pub fn compute_rtts(traces: &[ImageTrace]) -> Result<Vec<Rtts>, NodeError> {
    traces
        .iter()
        .map(|t| {
            if t.completed_at().is_none() {
                return Err(NodeError::IncompleteRecord(t.image_id.clone()));
            }
            let (Some(result), Some(at)) = (&t.result, t.result_at) else {
                return Ok(Rtts::default());
            };
            let start = t
                .upload_start
                .ok_or_else(|| NodeError::IncompleteRecord(t.image_id.clone()))?;
            let rtt = Some(at - start);
            Ok(match result.origin {
                ResultOrigin::Edge => Rtts {
                    edge_rtt: rtt,
                    cloud_rtt: None,
                },
                ResultOrigin::Cloud => Rtts {
                    edge_rtt: None,
                    cloud_rtt: rtt,
                },
            })
        })
        .collect()
}

pub fn build_records(traces: &[ImageTrace]) -> Result<Vec<MetricsRecord>, NodeError> {
    let rtts = compute_rtts(traces)?;
    let mut records: Vec<MetricsRecord> = traces
        .iter()
        .zip(rtts)
        .map(|(t, rtt)| {
            let result = t.result.as_ref();
            MetricsRecord {
                image_id: t.image_id.clone(),
                t_read_decode: t.t_read_decode,
                t_quality: t.t_quality,
                t_infer1: t.t_infer1,
                t_infer2: t.t_infer2,
                t_detect_total: t.t_quality + t.t_infer1 + t.t_infer2,
                t_upload: t.upload_start.zip(t.upload_end).map(|(s, e)| e - s),
                t_identify: t.t_identify,
                edge_rtt: rtt.edge_rtt,
                cloud_rtt: rtt.cloud_rtt,
                origin: result.map_or(Origin::None, |r| r.origin.into()),
                recognized: result.is_some_and(|r| r.recognized),
                label: result.and_then(|r| r.label.clone()),
                is_false_positive: result.is_some_and(|r| r.is_false_positive),
                completed_at: t.completed_at().unwrap_or(0.0),
            }
        })
        .collect();
    crate::metrics::sort_records(&mut records);
    Ok(records)
}
