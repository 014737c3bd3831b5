//! JSON encoding with a header/body split and length-prefixed framing.
//!
//! A message on the byte stream is a 4-byte big-endian length followed by
//! that many bytes of UTF-8 JSON:
//!
//! ```text
//! { "header": { "promise": {...}, "environment": {...} },
//!   "body":   { "action": {...}, "action-result": {...}, "fault": {...} } }
//! ```
//!
//! Absent parts are omitted. Unknown fields are rejected.

use std::io::{self, Read, Write};

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{ActionMsg, ActionResultMsg, EnvironmentMsg, Envelope, Fault, PromisePart};

/// Frames larger than this are refused without being read.
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    MalformedMessage(String),
    #[error("envelope invariant violated: {0}")]
    InvariantViolation(String),
    #[error("frame of {0} bytes exceeds the limit")]
    FrameTooLarge(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct Header {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    promise: Option<PromisePart>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    environment: Option<EnvironmentMsg>,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct Body {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action: Option<ActionMsg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action_result: Option<ActionResultMsg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fault: Option<Fault>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireEnvelope {
    #[serde(default)]
    header: Header,
    #[serde(default)]
    body: Body,
}

/// Present-but-null stays `Some(Value::Null)`; only a missing field is `None`.
pub(super) fn present<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Value>, D::Error> {
    Value::deserialize(d).map(Some)
}

pub fn encode(envelope: &Envelope) -> Result<Vec<u8>, ProtocolError> {
    envelope
        .validate()
        .map_err(ProtocolError::InvariantViolation)?;
    let wire = WireEnvelope {
        header: Header {
            promise: envelope.promise.clone(),
            environment: envelope.environment.clone(),
        },
        body: Body {
            action: envelope.action.clone(),
            action_result: envelope.action_result.clone(),
            fault: envelope.fault.clone(),
        },
    };
    serde_json::to_vec(&wire).map_err(|e| ProtocolError::InvariantViolation(e.to_string()))
}

pub fn decode(bytes: &[u8]) -> Result<Envelope, ProtocolError> {
    let wire: WireEnvelope = serde_json::from_slice(bytes)
        .map_err(|e| ProtocolError::MalformedMessage(e.to_string()))?;
    let envelope = Envelope {
        promise: wire.header.promise,
        environment: wire.header.environment,
        action: wire.body.action,
        action_result: wire.body.action_result,
        fault: wire.body.fault,
    };
    envelope
        .validate()
        .map_err(ProtocolError::MalformedMessage)?;
    Ok(envelope)
}

pub fn write_frame<W: Write>(w: &mut W, bytes: &[u8]) -> Result<(), ProtocolError> {
    if bytes.len() > MAX_FRAME_LEN {
        return Err(ProtocolError::FrameTooLarge(bytes.len()));
    }
    w.write_all(&(bytes.len() as u32).to_be_bytes())?;
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. `Ok(None)` on a clean end of stream before a header.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>, ProtocolError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(ProtocolError::FrameTooLarge(len));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

#[cfg(test)]
mod tests;
