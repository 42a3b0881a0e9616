use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use thiserror::Error;

use crate::domain::{PersonId, ScenarioConfig};
use crate::workload::{cloud_recognize, cloud_rng, id_hash, streams, CloudOutcome, Prng};

use super::{ControlMessage, PresignedGrant, ResultMessage, ResultOrigin};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CloudError {
    #[error("unknown or already used upload token")]
    InvalidGrant,
    #[error("upload token expired")]
    ExpiredGrant,
    #[error("malformed request")]
    Malformed,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CloudReply {
    /// Encoded grant, sent straight back to the requester.
    Grant(Vec<u8>),
    /// Encoded result, to publish on the image's cloud result key
    /// once `delay` seconds of recognition have passed.
    Result {
        image_id: String,
        bytes: Vec<u8>,
        delay: f64,
    },
    Rejected(CloudError),
}

/// Cloud tier: grant issuing, upload validation and recognition.
pub struct CloudService {
    seed: u64,
    fp_rate: f64,
    latency_mean: f64,
    latency_jitter: f64,
    grant_ttl: f64,
    grants: BTreeMap<String, PresignedGrant>,
    issued: u64,
    truth: BTreeMap<String, Option<PersonId>>,
}

/// `truth` maps image ids to the person actually shown (if known to
/// the recognizer).
pub fn cloud_serve(
    cfg: &ScenarioConfig,
    truth: BTreeMap<String, Option<PersonId>>,
) -> CloudService {
    CloudService {
        seed: cfg.rng_seed,
        fp_rate: cfg.fp_rate,
        latency_mean: cfg.stage_durations.cloud_latency_mean,
        latency_jitter: cfg.stage_durations.cloud_latency_jitter,
        grant_ttl: cfg.grant_ttl,
        grants: BTreeMap::new(),
        issued: 0,
        truth,
    }
}

impl CloudService {
    pub fn issue_grant(&mut self, image_id: &str, now: f64) -> PresignedGrant {
        let token = Prng::stream(self.seed, streams::TOKENS, self.issued).next_u64();
        self.issued += 1;
        let grant = PresignedGrant {
            upload_token: format!("{token:016x}{:04x}", self.issued & 0xffff),
            image_id: image_id.to_string(),
            expires_at: now + self.grant_ttl,
        };
        self.grants
            .insert(grant.upload_token.clone(), grant.clone());
        grant
    }

    /// Consumes `token`; any later use of it is rejected.
    pub fn accept_upload(
        &mut self,
        token: &str,
        image_id: &str,
        now: f64,
    ) -> Result<(), CloudError> {
        let grant = self.grants.remove(token).ok_or(CloudError::InvalidGrant)?;
        if grant.image_id != image_id {
            return Err(CloudError::InvalidGrant);
        }
        if now > grant.expires_at {
            return Err(CloudError::ExpiredGrant);
        }
        Ok(())
    }

    pub fn latency(&self, image_id: &str) -> f64 {
        let u = Prng::stream(self.seed, streams::CLOUD_LATENCY, id_hash(image_id)).next_f64();
        (self.latency_mean + self.latency_jitter * (2.0 * u - 1.0)).max(0.0)
    }

    pub fn recognize(&self, image_id: &str) -> (ResultMessage, f64) {
        let truth = self.truth.get(image_id).and_then(Option::as_ref);
        let mut rng = cloud_rng(self.seed, image_id);
        let latency = self.latency(image_id);
        let r = cloud_recognize(image_id, truth, self.fp_rate, &mut rng, latency);
        let (recognized, label) = match r.outcome {
            CloudOutcome::Match(label) => (true, Some(label)),
            CloudOutcome::NoMatch => (false, None),
        };
        let msg = ResultMessage {
            image_id: r.image_id,
            origin: ResultOrigin::Cloud,
            recognized,
            label,
            is_false_positive: r.is_false_positive,
        };
        (msg, r.t_cloud)
    }

    pub fn handle(&mut self, now: f64, bytes: &[u8]) -> CloudReply {
        match ControlMessage::decode(bytes) {
            Ok(ControlMessage::GrantRequest { image_id }) => {
                CloudReply::Grant(ControlMessage::Grant(self.issue_grant(&image_id, now)).encode())
            }
            Ok(ControlMessage::Upload {
                image_id,
                upload_token,
                payload,
            }) => {
                if STANDARD
                    .decode(payload.as_bytes())
                    .map_or(true, |p| p.is_empty())
                {
                    return CloudReply::Rejected(CloudError::Malformed);
                }
                if let Err(e) = self.accept_upload(&upload_token, &image_id, now) {
                    return CloudReply::Rejected(e);
                }
                let (msg, delay) = self.recognize(&image_id);
                CloudReply::Result {
                    image_id,
                    bytes: msg.encode(),
                    delay,
                }
            }
            _ => CloudReply::Rejected(CloudError::Malformed),
        }
    }
}
