//! Length-prefixed JSON frames: a 4-byte big-endian body length followed by
//! one UTF-8 JSON object.

use std::io::{self, Read, Write};

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const MAX_FRAME: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame of {0} bytes exceeds the 16 MiB limit")]
    Oversized(usize),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl FrameError {
    /// A malformed body leaves the stream aligned on the next frame; the
    /// other errors do not.
    pub fn is_recoverable(&self) -> bool {
        matches!(self, FrameError::Malformed(_))
    }
}

fn nullable_f64s<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
    let raw: Vec<Option<f64>> = Vec::deserialize(d)?;
    Ok(raw.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect())
}

/// Every message on the wire. Replies reuse the request type: the broker
/// acknowledges a PUBLISH with a PUBLISH carrying the same id, and answers
/// a FETCH with a FETCH holding either `payload` or `empty: true`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Message {
    Publish {
        id: String,
        topic: String,
        #[serde(default)]
        payload: Value,
    },
    Fetch {
        id: String,
        topic: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timeout_ms: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        payload: Option<Value>,
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        empty: bool,
    },
    ForecastReq {
        id: String,
        model: String,
        horizon: usize,
        /// Non-finite values travel as `null`.
        #[serde(deserialize_with = "nullable_f64s")]
        history: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reply_topic: Option<String>,
    },
    ForecastResp {
        id: String,
        forecast: Vec<f64>,
        model_version: String,
    },
    Error {
        id: String,
        code: String,
        message: String,
    },
}

impl Message {
    pub fn id(&self) -> &str {
        match self {
            Message::Publish { id, .. }
            | Message::Fetch { id, .. }
            | Message::ForecastReq { id, .. }
            | Message::ForecastResp { id, .. }
            | Message::Error { id, .. } => id,
        }
    }

    pub fn error(id: impl Into<String>, code: &str, message: impl Into<String>) -> Message {
        Message::Error {
            id: id.into(),
            code: code.to_string(),
            message: message.into(),
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("messages always serialize")
    }

    pub fn from_value(v: Value) -> Result<Message, FrameError> {
        if !v.is_object() {
            return Err(FrameError::Malformed("body is not a JSON object".into()));
        }
        serde_json::from_value(v).map_err(|e| FrameError::Malformed(e.to_string()))
    }
}

pub fn write_frame<W: Write>(out: &mut W, msg: &Message) -> Result<(), FrameError> {
    let body = serde_json::to_vec(msg).map_err(|e| FrameError::Malformed(e.to_string()))?;
    write_raw(out, &body)
}

pub fn write_raw<W: Write>(out: &mut W, body: &[u8]) -> Result<(), FrameError> {
    if body.len() > MAX_FRAME {
        return Err(FrameError::Oversized(body.len()));
    }
    let mut buf = Vec::with_capacity(4 + body.len());
    buf.extend_from_slice(&(body.len() as u32).to_be_bytes());
    buf.extend_from_slice(body);
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

/// Reads one frame body. `Ok(None)` on a clean end of stream. An oversized
/// prefix is reported without consuming the body.
pub fn read_raw<R: Read>(input: &mut R) -> Result<Option<Vec<u8>>, FrameError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match input.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(FrameError::Oversized(len));
    }
    let mut body = vec![0u8; len];
    input.read_exact(&mut body)?;
    Ok(Some(body))
}

/// Parse a frame body. Also returns the `id` field when it can be found so
/// errors can be correlated.
pub fn decode(body: &[u8]) -> Result<Message, (Option<String>, FrameError)> {
    let value: Value = serde_json::from_slice(body).map_err(|e| (None, FrameError::Malformed(e.to_string())))?;
    let id = value.get("id").and_then(Value::as_str).map(str::to_string);
    Message::from_value(value).map_err(|e| (id, e))
}

pub fn read_frame<R: Read>(input: &mut R) -> Result<Option<Message>, FrameError> {
    match read_raw(input)? {
        None => Ok(None),
        Some(body) => decode(&body).map(Some).map_err(|(_, e)| e),
    }
}
