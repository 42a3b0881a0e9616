use std::collections::{BTreeMap, BTreeSet};

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;

use crate::chunkwire::{decode_message, ReassemblySession, ReassemblyStatus, TransferMessage};
use crate::domain::{EmbeddingVec, FaceDatabase, ScenarioConfig};
use crate::netsim::SimCore;
use crate::workload::{identify, IdentifyResult, WorkloadError};

use super::{ControlMessage, ResultMessage, ResultOrigin};

/// What one incoming frame did to the edge's reassembly state.
#[derive(Debug, Clone, PartialEq)]
pub enum Ingest {
    Progress,
    /// Duplicate, late or unparseable frame; nothing changed.
    Ignored,
    Complete {
        image_id: String,
        payload: Vec<u8>,
    },
    /// The transfer for `image_id` can no longer complete.
    Failed {
        image_id: String,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Reply(ResultMessage),
    /// Not recognized locally; ask the cloud for a grant.
    Escalate {
        request: Vec<u8>,
    },
}

/// Edge tier: reassembles transfers, identifies against the local
/// gallery and escalates unknown faces to the cloud.
pub struct EdgeService {
    db: FaceDatabase,
    threshold: f64,
    cloud_enabled: bool,
    features: BTreeMap<String, EmbeddingVec>,
    sessions: BTreeMap<String, ReassemblySession>,
    closed: BTreeSet<String>,
    pending_cloud: BTreeMap<String, Vec<u8>>,
    answered: BTreeSet<String>,
}

/// `features` maps image ids to the embedding the face model would
/// extract from them.
pub fn edge_serve(
    cfg: &ScenarioConfig,
    db: FaceDatabase,
    features: BTreeMap<String, EmbeddingVec>,
) -> EdgeService {
    EdgeService {
        db,
        threshold: cfg.similarity_threshold,
        cloud_enabled: cfg.cloud_enabled,
        features,
        sessions: BTreeMap::new(),
        closed: BTreeSet::new(),
        pending_cloud: BTreeMap::new(),
        answered: BTreeSet::new(),
    }
}

impl EdgeService {
    pub fn on_frame(&mut self, bytes: &[u8]) -> Ingest {
        let Ok(message) = decode_message(bytes) else {
            return Ingest::Ignored;
        };
        match message {
            TransferMessage::Meta(meta) => {
                let id = meta.image_id.clone();
                if self.closed.contains(&id) || self.sessions.contains_key(&id) {
                    return Ingest::Ignored;
                }
                match ReassemblySession::new(meta) {
                    Ok(session) => {
                        self.sessions.insert(id, session);
                        Ingest::Progress
                    }
                    Err(e) => self.fail(id, e.to_string()),
                }
            }
            TransferMessage::Chunk(env) => {
                if self.closed.contains(&env.image_id) {
                    return Ingest::Ignored;
                }
                let Some(session) = self.sessions.get_mut(&env.image_id) else {
                    return Ingest::Ignored;
                };
                match session.accept(&env) {
                    Ok(ReassemblyStatus::Complete(payload)) => {
                        self.sessions.remove(&env.image_id);
                        self.closed.insert(env.image_id.clone());
                        Ingest::Complete {
                            image_id: env.image_id,
                            payload,
                        }
                    }
                    Ok(ReassemblyStatus::Duplicate) => Ingest::Ignored,
                    Ok(ReassemblyStatus::Incomplete { .. }) => Ingest::Progress,
                    Err(e) => self.fail(env.image_id, e.to_string()),
                }
            }
        }
    }

    fn fail(&mut self, image_id: String, reason: String) -> Ingest {
        self.sessions.remove(&image_id);
        self.closed.insert(image_id.clone());
        Ingest::Failed { image_id, reason }
    }

    pub fn active_sessions(&self) -> usize {
        self.sessions.len()
    }

    pub fn identify(
        &self,
        image_id: &str,
        core: &mut SimCore,
        t_identify: f64,
        now: f64,
    ) -> Result<IdentifyResult, WorkloadError> {
        let embedding = self.features.get(image_id).ok_or_else(|| {
            WorkloadError::GroundTruth(format!("no face features for `{image_id}`"))
        })?;
        identify(embedding, &self.db, self.threshold, core, t_identify, now)
    }

    pub fn has_features(&self, image_id: &str) -> bool {
        self.features.contains_key(image_id)
    }

    /// Marks `image_id` answered; false if a result was already sent.
    fn answer(&mut self, image_id: &str) -> bool {
        self.answered.insert(image_id.to_string())
    }

    fn reply(&mut self, msg: ResultMessage) -> Option<ResultMessage> {
        self.answer(&msg.image_id).then_some(msg)
    }

    /// Result for a transfer that failed reassembly.
    pub fn negative(&mut self, image_id: &str) -> Option<ResultMessage> {
        self.reply(ResultMessage {
            image_id: image_id.to_string(),
            origin: ResultOrigin::Edge,
            recognized: false,
            label: None,
            is_false_positive: false,
        })
    }

    pub fn decide(
        &mut self,
        image_id: &str,
        ident: Option<&IdentifyResult>,
        payload: Vec<u8>,
    ) -> Option<Decision> {
        if let Some(r) = ident.filter(|r| r.recognized) {
            return self
                .reply(ResultMessage {
                    image_id: image_id.to_string(),
                    origin: ResultOrigin::Edge,
                    recognized: true,
                    label: Some(r.best_person.label.clone()),
                    is_false_positive: false,
                })
                .map(Decision::Reply);
        }
        if !self.cloud_enabled || self.answered.contains(image_id) {
            return self.negative(image_id).map(Decision::Reply);
        }
        self.pending_cloud.insert(image_id.to_string(), payload);
        let request = ControlMessage::GrantRequest {
            image_id: image_id.to_string(),
        }
        .encode();
        Some(Decision::Escalate { request })
    }

    pub fn awaiting_cloud(&self) -> usize {
        self.pending_cloud.len()
    }

    /// Turns a grant into the upload message for its image.
    pub fn on_grant(&mut self, bytes: &[u8]) -> Option<Vec<u8>> {
        let Ok(ControlMessage::Grant(grant)) = ControlMessage::decode(bytes) else {
            return None;
        };
        let payload = self.pending_cloud.get(&grant.image_id)?;
        Some(
            ControlMessage::Upload {
                image_id: grant.image_id,
                upload_token: grant.upload_token,
                payload: STANDARD.encode(payload),
            }
            .encode(),
        )
    }

    /// A cloud result to forward verbatim, at most once per image.
    pub fn on_cloud_result(&mut self, bytes: &[u8]) -> Option<(String, Vec<u8>)> {
        let msg = ResultMessage::decode(bytes)?;
        self.pending_cloud.remove(&msg.image_id)?;
        self.answer(&msg.image_id)
            .then(|| (msg.image_id, bytes.to_vec()))
    }

    /// Gives up on the cloud for `image_id` if it is still pending.
    pub fn cloud_timeout(&mut self, image_id: &str) -> Option<ResultMessage> {
        self.pending_cloud.remove(image_id)?;
        self.reply(ResultMessage {
            image_id: image_id.to_string(),
            origin: ResultOrigin::Cloud,
            recognized: false,
            label: None,
            is_false_positive: false,
        })
    }
}
