//! Newline-delimited JSON messages exchanged between clients and the service.
//!
//! Every line is one object with a `type`, a client-chosen `request_id` and a
//! `payload` object. Top-level keys other than those three are folded into
//! the payload on decode, so nothing a client sends is silently dropped.

use std::fmt;
use std::str::FromStr;

use serde_json::{Map, Value};

/// Longest accepted line, excluding the terminating LF.
pub const MAX_LINE: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MsgType {
    Submit,
    Status,
    Cancel,
    ListJobs,
    Clusters,
    Agents,
    Offers,
    Metrics,
    Ok,
    Error,
}

impl MsgType {
    pub const ALL: [MsgType; 10] = [
        MsgType::Submit,
        MsgType::Status,
        MsgType::Cancel,
        MsgType::ListJobs,
        MsgType::Clusters,
        MsgType::Agents,
        MsgType::Offers,
        MsgType::Metrics,
        MsgType::Ok,
        MsgType::Error,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MsgType::Submit => "submit",
            MsgType::Status => "status",
            MsgType::Cancel => "cancel",
            MsgType::ListJobs => "list_jobs",
            MsgType::Clusters => "clusters",
            MsgType::Agents => "agents",
            MsgType::Offers => "offers",
            MsgType::Metrics => "metrics",
            MsgType::Ok => "ok",
            MsgType::Error => "error",
        }
    }

    /// Replies travel server to client; everything else is a request.
    pub fn is_reply(self) -> bool {
        matches!(self, MsgType::Ok | MsgType::Error)
    }
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MsgType {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MsgType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| WireError::UnknownType(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub kind: MsgType,
    pub request_id: String,
    pub payload: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("line of {len} bytes exceeds the {MAX_LINE} byte limit")]
    OversizeLine { len: usize },
    #[error("malformed message: {0}")]
    MalformedJson(String),
    #[error("unknown message type {0:?}")]
    UnknownType(String),
}

impl WireMessage {
    pub fn new(kind: MsgType, request_id: impl Into<String>, payload: Map<String, Value>) -> Self {
        WireMessage {
            kind,
            request_id: request_id.into(),
            payload,
        }
    }

    pub fn ok(request_id: &str, payload: Value) -> Self {
        let payload = match payload {
            Value::Object(map) => map,
            Value::Null => Map::new(),
            other => Map::from_iter([("result".to_string(), other)]),
        };
        WireMessage::new(MsgType::Ok, request_id, payload)
    }

    pub fn error(request_id: &str, code: &str, message: impl fmt::Display) -> Self {
        let mut payload = Map::new();
        payload.insert("code".into(), Value::from(code));
        payload.insert("message".into(), Value::from(message.to_string()));
        WireMessage::new(MsgType::Error, request_id, payload)
    }

    /// The `code` of an error reply.
    pub fn error_code(&self) -> Option<&str> {
        (self.kind == MsgType::Error)
            .then(|| self.payload.get("code").and_then(Value::as_str))
            .flatten()
    }
}

/// One JSON object followed by LF.
pub fn encode_message(msg: &WireMessage) -> Vec<u8> {
    let mut obj = Map::new();
    obj.insert("type".into(), Value::from(msg.kind.as_str()));
    obj.insert("request_id".into(), Value::from(msg.request_id.clone()));
    obj.insert("payload".into(), Value::Object(msg.payload.clone()));
    let mut out = serde_json::to_vec(&Value::Object(obj)).expect("JSON values always serialize");
    out.push(b'\n');
    out
}

/// Decodes one line, with or without its terminator.
pub fn decode_message(line: &[u8]) -> Result<WireMessage, WireError> {
    let line = line.strip_suffix(b"\n").unwrap_or(line);
    let line = line.strip_suffix(b"\r").unwrap_or(line);
    if line.len() > MAX_LINE {
        return Err(WireError::OversizeLine { len: line.len() });
    }
    let malformed = |m: &str| WireError::MalformedJson(m.to_string());
    let value: Value =
        serde_json::from_slice(line).map_err(|e| WireError::MalformedJson(e.to_string()))?;
    let Value::Object(mut obj) = value else {
        return Err(malformed("expected a JSON object"));
    };
    let kind = match obj.remove("type") {
        Some(Value::String(s)) => s.parse()?,
        Some(_) => return Err(malformed("`type` must be a string")),
        None => return Err(malformed("missing `type`")),
    };
    let request_id = match obj.remove("request_id") {
        Some(Value::String(s)) => s,
        None | Some(Value::Null) => String::new(),
        Some(_) => return Err(malformed("`request_id` must be a string")),
    };
    let mut payload = match obj.remove("payload") {
        Some(Value::Object(map)) => map,
        None | Some(Value::Null) => Map::new(),
        Some(_) => return Err(malformed("`payload` must be an object")),
    };
    for (k, v) in obj {
        payload.entry(k).or_insert(v);
    }
    Ok(WireMessage {
        kind,
        request_id,
        payload,
    })
}

/// Best-effort `request_id` from a line that failed to decode, so the error
/// reply can still be matched by the client.
pub fn salvage_request_id(line: &[u8]) -> String {
    if line.len() > MAX_LINE + 2 {
        return String::new();
    }
    serde_json::from_slice::<Value>(line)
        .ok()
        .and_then(|v| v.get("request_id")?.as_str().map(str::to_string))
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn obj(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn round_trip_submit() {
        let msg = WireMessage::new(
            MsgType::Submit,
            "r1",
            obj(json!({"tenant_id": "ultrascan", "request": {"cpus": 1, "mem_mb": 1024, "disk_mb": 0}})),
        );
        let bytes = encode_message(&msg);
        assert_eq!(*bytes.last().unwrap(), b'\n');
        assert_eq!(decode_message(&bytes).unwrap(), msg);
    }

    #[test]
    fn stray_fields_land_in_payload() {
        let m = decode_message(br#"{"type":"status","request_id":"x","job_id":"job-00000001","payload":{"a":1}}"#)
            .unwrap();
        assert_eq!(m.payload, obj(json!({"a": 1, "job_id": "job-00000001"})));
    }

    #[test]
    fn errors() {
        assert_eq!(
            decode_message(br#"{"type":"frobnicate"}"#),
            Err(WireError::UnknownType("frobnicate".into()))
        );
        assert!(matches!(decode_message(b"{nope"), Err(WireError::MalformedJson(_))));
        assert!(matches!(decode_message(b"[1]"), Err(WireError::MalformedJson(_))));
        assert!(matches!(decode_message(br#"{"request_id":"a"}"#), Err(WireError::MalformedJson(_))));
        let big = vec![b' '; 2 << 20];
        assert_eq!(decode_message(&big), Err(WireError::OversizeLine { len: 2 << 20 }));
    }

    #[test]
    fn salvage() {
        assert_eq!(salvage_request_id(br#"{"type":"zzz","request_id":"q"}"#), "q");
        assert_eq!(salvage_request_id(b"garbage"), "");
    }
}
