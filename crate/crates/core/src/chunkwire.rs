//! Application-level fragmentation of an image into fixed-size chunks,
//! each wrapped in a JSON envelope with a CRC-32, plus the receiver-side
//! reassembly state machine.
//!
//! A transfer is one `meta` message followed by `total_chunks` `chunk`
//! messages. Payload bytes travel base64 encoded (standard alphabet,
//! padded) and checksums are CRC-32/ISO-HDLC written as unsigned decimals.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

pub const MIN_CHUNK_SIZE: usize = 64;

/// CRC-32/ISO-HDLC (the zlib / Ethernet CRC).
pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferMetadata {
    pub image_id: String,
    pub total_bytes: u64,
    pub total_chunks: u32,
    pub chunk_size_bytes: u32,
    pub crc32_full: u32,
    pub width_px: u32,
    pub height_px: u32,
    pub format: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkEnvelope {
    pub image_id: String,
    pub seq: u32,
    pub total_chunks: u32,
    /// Raw chunk bytes; base64 only exists on the wire.
    pub payload: Vec<u8>,
    pub crc32_chunk: u32,
}

impl ChunkEnvelope {
    pub fn payload_len(&self) -> u32 {
        self.payload.len() as u32
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FragmentError {
    #[error("payload is empty")]
    EmptyPayload,
    #[error("chunk size {0} is below the minimum of {MIN_CHUNK_SIZE} bytes")]
    ChunkSizeTooSmall(usize),
}

/// Splits `payload` into envelopes of at most `chunk_size` bytes.
pub fn fragment(
    payload: &[u8],
    image_id: &str,
    chunk_size: usize,
    image_dims: (u32, u32),
    format: &str,
) -> Result<(TransferMetadata, Vec<ChunkEnvelope>), FragmentError> {
    if payload.is_empty() {
        return Err(FragmentError::EmptyPayload);
    }
    if chunk_size < MIN_CHUNK_SIZE {
        return Err(FragmentError::ChunkSizeTooSmall(chunk_size));
    }
    let total_chunks = payload.len().div_ceil(chunk_size) as u32;
    let meta = TransferMetadata {
        image_id: image_id.to_string(),
        total_bytes: payload.len() as u64,
        total_chunks,
        chunk_size_bytes: chunk_size as u32,
        crc32_full: crc32(payload),
        width_px: image_dims.0,
        height_px: image_dims.1,
        format: format.to_string(),
    };
    let chunks = payload
        .chunks(chunk_size)
        .enumerate()
        .map(|(seq, bytes)| ChunkEnvelope {
            image_id: image_id.to_string(),
            seq: seq as u32,
            total_chunks,
            payload: bytes.to_vec(),
            crc32_chunk: crc32(bytes),
        })
        .collect();
    Ok((meta, chunks))
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("malformed json: {0}")]
    MalformedJson(String),
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("field `{0}` has the wrong type or range")]
    InvalidField(&'static str),
    #[error("unexpected msg_type `{0}`")]
    WrongMessageType(String),
    #[error("base64 error: {0}")]
    Base64Error(String),
    #[error("payload_len {declared} does not match decoded length {actual}")]
    LengthMismatch { declared: u32, actual: usize },
}

#[derive(Serialize)]
struct ChunkWire<'a> {
    msg_type: &'static str,
    image_id: &'a str,
    seq: u32,
    total_chunks: u32,
    payload_len: u32,
    payload_b64: String,
    crc32_chunk: u32,
}

#[derive(Serialize)]
struct MetaWire<'a> {
    msg_type: &'static str,
    image_id: &'a str,
    total_bytes: u64,
    total_chunks: u32,
    chunk_size_bytes: u32,
    crc32_full: u32,
    width_px: u32,
    height_px: u32,
    format: &'a str,
}

pub fn encode_envelope(env: &ChunkEnvelope) -> Vec<u8> {
    serde_json::to_vec(&ChunkWire {
        msg_type: "chunk",
        image_id: &env.image_id,
        seq: env.seq,
        total_chunks: env.total_chunks,
        payload_len: env.payload_len(),
        payload_b64: B64.encode(&env.payload),
        crc32_chunk: env.crc32_chunk,
    })
    .expect("chunk serializes")
}

pub fn encode_metadata(meta: &TransferMetadata) -> Vec<u8> {
    serde_json::to_vec(&MetaWire {
        msg_type: "meta",
        image_id: &meta.image_id,
        total_bytes: meta.total_bytes,
        total_chunks: meta.total_chunks,
        chunk_size_bytes: meta.chunk_size_bytes,
        crc32_full: meta.crc32_full,
        width_px: meta.width_px,
        height_px: meta.height_px,
        format: &meta.format,
    })
    .expect("metadata serializes")
}

/// Either half of a transfer as it arrives off the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransferMessage {
    Meta(TransferMetadata),
    Chunk(ChunkEnvelope),
}

/// Field-by-field reader over a JSON object; schema errors name the key.
struct Fields {
    map: Map<String, Value>,
}

impl Fields {
    fn parse(bytes: &[u8]) -> Result<Self, WireError> {
        match serde_json::from_slice::<Value>(bytes) {
            Ok(Value::Object(map)) => Ok(Self { map }),
            Ok(_) => Err(WireError::MalformedJson("expected a JSON object".into())),
            Err(e) => Err(WireError::MalformedJson(e.to_string())),
        }
    }

    fn take(&mut self, name: &'static str) -> Result<Value, WireError> {
        self.map.remove(name).ok_or(WireError::MissingField(name))
    }

    fn string(&mut self, name: &'static str) -> Result<String, WireError> {
        match self.take(name)? {
            Value::String(s) => Ok(s),
            _ => Err(WireError::InvalidField(name)),
        }
    }

    fn u64(&mut self, name: &'static str) -> Result<u64, WireError> {
        self.take(name)?
            .as_u64()
            .ok_or(WireError::InvalidField(name))
    }

    fn u32(&mut self, name: &'static str) -> Result<u32, WireError> {
        u32::try_from(self.u64(name)?).map_err(|_| WireError::InvalidField(name))
    }

    fn finish(self) -> Result<(), WireError> {
        match self.map.into_iter().next() {
            Some((key, _)) => Err(WireError::UnknownField(key)),
            None => Ok(()),
        }
    }
}

pub fn decode_envelope(bytes: &[u8]) -> Result<ChunkEnvelope, WireError> {
    match decode_message(bytes)? {
        TransferMessage::Chunk(env) => Ok(env),
        TransferMessage::Meta(_) => Err(WireError::WrongMessageType("meta".into())),
    }
}

pub fn decode_metadata(bytes: &[u8]) -> Result<TransferMetadata, WireError> {
    match decode_message(bytes)? {
        TransferMessage::Meta(meta) => Ok(meta),
        TransferMessage::Chunk(_) => Err(WireError::WrongMessageType("chunk".into())),
    }
}

pub fn decode_message(bytes: &[u8]) -> Result<TransferMessage, WireError> {
    let mut f = Fields::parse(bytes)?;
    let msg_type = f.string("msg_type")?;
    match msg_type.as_str() {
        "chunk" => {
            let image_id = f.string("image_id")?;
            let seq = f.u32("seq")?;
            let total_chunks = f.u32("total_chunks")?;
            let payload_len = f.u32("payload_len")?;
            let payload_b64 = f.string("payload_b64")?;
            let crc32_chunk = f.u32("crc32_chunk")?;
            f.finish()?;
            let payload = B64
                .decode(payload_b64)
                .map_err(|e| WireError::Base64Error(e.to_string()))?;
            if payload.len() != payload_len as usize {
                return Err(WireError::LengthMismatch {
                    declared: payload_len,
                    actual: payload.len(),
                });
            }
            Ok(TransferMessage::Chunk(ChunkEnvelope {
                image_id,
                seq,
                total_chunks,
                payload,
                crc32_chunk,
            }))
        }
        "meta" => {
            let meta = TransferMetadata {
                image_id: f.string("image_id")?,
                total_bytes: f.u64("total_bytes")?,
                total_chunks: f.u32("total_chunks")?,
                chunk_size_bytes: f.u32("chunk_size_bytes")?,
                crc32_full: f.u32("crc32_full")?,
                width_px: f.u32("width_px")?,
                height_px: f.u32("height_px")?,
                format: f.string("format")?,
            };
            f.finish()?;
            Ok(TransferMessage::Meta(meta))
        }
        other => Err(WireError::WrongMessageType(other.to_string())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Awaiting,
    Incomplete,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReassemblyStatus {
    /// Chunk stored; `received` of `total` distinct chunks present.
    Incomplete { received: u32, total: u32 },
    /// Chunk already present (or transfer already complete); nothing changed.
    Duplicate,
    /// Every chunk arrived and the full-payload CRC matched.
    Complete(Vec<u8>),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReassemblyError {
    #[error("metadata is inconsistent: {0}")]
    InvalidMetadata(&'static str),
    #[error("chunk for `{got}` delivered to session `{expected}`")]
    IdMismatch { expected: String, got: String },
    #[error("seq {seq} out of range for {total} chunks")]
    SeqOutOfRange { seq: u32, total: u32 },
    #[error("chunk declares {got} total chunks, metadata says {expected}")]
    TotalChunksMismatch { expected: u32, got: u32 },
    #[error("chunk {seq} has length {got}, expected {expected}")]
    ChunkLengthMismatch {
        seq: u32,
        expected: usize,
        got: usize,
    },
    #[error("chunk {0} failed its CRC check and was discarded")]
    ChunkCrcMismatch(u32),
    #[error("reassembled payload failed the full CRC check")]
    FullCrcMismatch,
    #[error("session already failed")]
    SessionFailed,
}

/// Receiver state for one image. Single owner; not meant to be fed
/// from more than one activity.
#[derive(Debug, Clone)]
pub struct ReassemblySession {
    metadata: TransferMetadata,
    received: Vec<bool>,
    received_count: u32,
    buffer: Vec<u8>,
    state: SessionState,
}

impl ReassemblySession {
    pub fn new(metadata: TransferMetadata) -> Result<Self, ReassemblyError> {
        if metadata.total_bytes == 0 {
            return Err(ReassemblyError::InvalidMetadata("total_bytes must be ≥ 1"));
        }
        if (metadata.chunk_size_bytes as usize) < MIN_CHUNK_SIZE {
            return Err(ReassemblyError::InvalidMetadata(
                "chunk_size_bytes below minimum",
            ));
        }
        if metadata
            .total_bytes
            .div_ceil(metadata.chunk_size_bytes as u64)
            != metadata.total_chunks as u64
        {
            return Err(ReassemblyError::InvalidMetadata(
                "total_chunks ≠ ceil(total_bytes / chunk_size_bytes)",
            ));
        }
        Ok(Self {
            received: vec![false; metadata.total_chunks as usize],
            received_count: 0,
            buffer: vec![0; metadata.total_bytes as usize],
            state: SessionState::Awaiting,
            metadata,
        })
    }

    pub fn metadata(&self) -> &TransferMetadata {
        &self.metadata
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn received_count(&self) -> u32 {
        self.received_count
    }

    /// The reassembled bytes, once complete.
    pub fn payload(&self) -> Option<&[u8]> {
        (self.state == SessionState::Complete).then_some(self.buffer.as_slice())
    }

    fn expected_len(&self, seq: u32) -> usize {
        let chunk = self.metadata.chunk_size_bytes as usize;
        let start = seq as usize * chunk;
        chunk.min(self.metadata.total_bytes as usize - start)
    }

    pub fn accept(&mut self, env: &ChunkEnvelope) -> Result<ReassemblyStatus, ReassemblyError> {
        match self.state {
            SessionState::Failed => return Err(ReassemblyError::SessionFailed),
            SessionState::Complete => return Ok(ReassemblyStatus::Duplicate),
            _ => {}
        }
        let total = self.metadata.total_chunks;
        if env.image_id != self.metadata.image_id {
            return Err(ReassemblyError::IdMismatch {
                expected: self.metadata.image_id.clone(),
                got: env.image_id.clone(),
            });
        }
        if env.seq >= total {
            return Err(ReassemblyError::SeqOutOfRange {
                seq: env.seq,
                total,
            });
        }
        if env.total_chunks != total {
            return Err(ReassemblyError::TotalChunksMismatch {
                expected: total,
                got: env.total_chunks,
            });
        }
        if self.received[env.seq as usize] {
            return Ok(ReassemblyStatus::Duplicate);
        }
        let expected = self.expected_len(env.seq);
        if env.payload.len() != expected {
            return Err(ReassemblyError::ChunkLengthMismatch {
                seq: env.seq,
                expected,
                got: env.payload.len(),
            });
        }
        if crc32(&env.payload) != env.crc32_chunk {
            self.state = SessionState::Incomplete;
            return Err(ReassemblyError::ChunkCrcMismatch(env.seq));
        }

        let start = env.seq as usize * self.metadata.chunk_size_bytes as usize;
        self.buffer[start..start + expected].copy_from_slice(&env.payload);
        self.received[env.seq as usize] = true;
        self.received_count += 1;

        if self.received_count < total {
            self.state = SessionState::Incomplete;
            return Ok(ReassemblyStatus::Incomplete {
                received: self.received_count,
                total,
            });
        }
        if crc32(&self.buffer) != self.metadata.crc32_full {
            self.state = SessionState::Failed;
            return Err(ReassemblyError::FullCrcMismatch);
        }
        self.state = SessionState::Complete;
        Ok(ReassemblyStatus::Complete(self.buffer.clone()))
    }
}

/// Encoded wire frames for a full transfer: the `meta` message then every chunk.
pub fn encode_transfer(meta: &TransferMetadata, chunks: &[ChunkEnvelope]) -> Vec<Vec<u8>> {
    std::iter::once(encode_metadata(meta))
        .chain(chunks.iter().map(encode_envelope))
        .collect()
}
