//! Daemon/client message schema and framing.
//!
//! Every message is a JSON object whose `type` field names the variant. On
//! TCP each payload is preceded by its length as a big-endian `u32`; the
//! WebSocket listener carries the same payloads, one per text frame.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::breakdown::{BreakdownTree, InlineMarker, NodeKind, NodePath, SortKey};

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_FRAME_BYTES: usize = 16 * 1024 * 1024;
pub const DEFAULT_TCP_PORT: u16 = 60120;
pub const DEFAULT_WS_PORT: u16 = 60121;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalyzeTrigger {
    Save,
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunTimeCoefficients {
    pub a_ms: f64,
    pub b_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryCoefficients {
    pub c_bytes: f64,
    pub d_bytes: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpan {
    pub line: u32,
    pub byte_start: usize,
    pub byte_end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyMetricsPayload {
    pub batch_size: u32,
    pub throughput_samples_per_s: f64,
    pub max_throughput_samples_per_s: f64,
    pub peak_memory_bytes: u64,
    pub capacity_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_time_model: Option<RunTimeCoefficients>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_model: Option<MemoryCoefficients>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_span: Option<BatchSpan>,
    /// Largest batch size predicted to fit in device memory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_batch_size: Option<u32>,
    /// Why dragging is disabled, when it is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction_disabled: Option<String>,
}

/// One breakdown node as sent to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireNode {
    pub path: NodePath,
    pub kind: NodeKind,
    pub display_name: String,
    pub file: String,
    pub line: u32,
    pub run_time_ms: f64,
    pub weight_bytes: u64,
    pub activation_bytes: u64,
    pub leaf_count: usize,
    pub child_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMarker {
    pub file: String,
    pub line: u32,
    pub run_time_ms: f64,
    pub weight_bytes: u64,
    pub activation_bytes: u64,
    pub scoped: bool,
}

impl From<&InlineMarker> for WireMarker {
    fn from(m: &InlineMarker) -> Self {
        WireMarker {
            file: m.frame.file_path.clone(),
            line: m.frame.line_number,
            run_time_ms: m.run_time_ms,
            weight_bytes: m.weight_bytes,
            activation_bytes: m.activation_bytes,
            scoped: m.scoped,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    // client -> daemon
    Hello {
        protocol_version: u32,
    },
    Analyze {
        trigger: AnalyzeTrigger,
    },
    SetBatchSize {
        batch_size: u32,
    },
    GetBreakdown {
        #[serde(default)]
        path: NodePath,
        #[serde(default)]
        sort_key: SortKey,
    },
    // daemon -> client
    Session {
        session_id: String,
        entry_file: String,
        capabilities: Vec<String>,
    },
    AnalysisBegin {},
    KeyMetrics(KeyMetricsPayload),
    Breakdown {
        path: NodePath,
        sort_key: SortKey,
        untracked_run_time_ms: f64,
        untracked_memory_bytes: u64,
        nodes: Vec<WireNode>,
    },
    InlineMarkers {
        scope: NodePath,
        markers: Vec<WireMarker>,
    },
    SourceMutated {
        new_batch_size: u32,
        line: u32,
    },
    AnalysisError {
        code: String,
        message: String,
    },
}

pub const MESSAGE_TYPES: &[&str] = &[
    "hello",
    "analyze",
    "set_batch_size",
    "get_breakdown",
    "session",
    "analysis_begin",
    "key_metrics",
    "breakdown",
    "inline_markers",
    "source_mutated",
    "analysis_error",
];

impl Message {
    pub fn type_name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "hello",
            Message::Analyze { .. } => "analyze",
            Message::SetBatchSize { .. } => "set_batch_size",
            Message::GetBreakdown { .. } => "get_breakdown",
            Message::Session { .. } => "session",
            Message::AnalysisBegin {} => "analysis_begin",
            Message::KeyMetrics(_) => "key_metrics",
            Message::Breakdown { .. } => "breakdown",
            Message::InlineMarkers { .. } => "inline_markers",
            Message::SourceMutated { .. } => "source_mutated",
            Message::AnalysisError { .. } => "analysis_error",
        }
    }

    pub fn error(code: impl Into<String>, message: impl Into<String>) -> Message {
        Message::AnalysisError {
            code: code.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_BYTES} byte limit")]
    Oversized(usize),
    #[error("payload is not valid JSON: {0}")]
    InvalidJson(String),
    #[error("message has no `type` field")]
    MissingType,
    #[error("unknown message type `{0}`")]
    UnknownType(String),
    #[error("invalid `{kind}` message: {reason}")]
    Schema { kind: String, reason: String },
}

/// Serializes `message` to its JSON payload.
pub fn encode_payload(message: &Message) -> Vec<u8> {
    serde_json::to_vec(message).expect("messages always serialize")
}

/// Parses one JSON payload, separating unknown types from schema errors.
pub fn decode_payload(payload: &[u8]) -> Result<Message, ProtocolError> {
    let value: Value = serde_json::from_slice(payload).map_err(|e| ProtocolError::InvalidJson(e.to_string()))?;
    let kind = match value.get("type") {
        Some(Value::String(kind)) => kind.clone(),
        _ => return Err(ProtocolError::MissingType),
    };
    if !MESSAGE_TYPES.contains(&kind.as_str()) {
        return Err(ProtocolError::UnknownType(kind));
    }
    serde_json::from_value(value).map_err(|e| ProtocolError::Schema {
        kind,
        reason: e.to_string(),
    })
}

/// Length-prefixed frame for `message`.
pub fn encode_frame(message: &Message) -> Result<Vec<u8>, ProtocolError> {
    let payload = encode_payload(message);
    if payload.len() > MAX_FRAME_BYTES {
        return Err(ProtocolError::Oversized(payload.len()));
    }
    let mut frame = Vec::with_capacity(payload.len() + 4);
    frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    frame.extend_from_slice(&payload);
    Ok(frame)
}

/// Decodes the first frame in `buf`.
///
/// Returns `Ok(None)` while `buf` holds less than one complete frame, and
/// otherwise the message and the number of bytes it consumed.
pub fn decode_frame(buf: &[u8]) -> Result<Option<(Message, usize)>, ProtocolError> {
    let Some(header) = buf.get(..4) else {
        return Ok(None);
    };
    let len = u32::from_be_bytes(header.try_into().unwrap()) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(ProtocolError::Oversized(len));
    }
    let Some(payload) = buf.get(4..4 + len) else {
        return Ok(None);
    };
    Ok(Some((decode_payload(payload)?, 4 + len)))
}

/// Incremental decoder for a byte stream of frames.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete message, if one is buffered.
    pub fn next_message(&mut self) -> Result<Option<Message>, ProtocolError> {
        match decode_frame(&self.buf) {
            Ok(Some((message, used))) => {
                self.buf.drain(..used);
                Ok(Some(message))
            }
            Ok(None) => Ok(None),
            Err(e) => {
                // Skip the bad frame so the stream stays aligned.
                if let Some(header) = self.buf.get(..4) {
                    let len = u32::from_be_bytes(header.try_into().unwrap()) as usize;
                    if !matches!(e, ProtocolError::Oversized(_)) && self.buf.len() >= 4 + len {
                        self.buf.drain(..4 + len);
                    }
                }
                Err(e)
            }
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

/// Outcome of the first message on a connection.
#[derive(Debug, Clone, PartialEq)]
pub enum Handshake {
    Accepted,
    /// Send the error, then close the connection.
    Rejected(Message),
}

pub fn handshake(first: &Message, daemon_version: u32) -> Handshake {
    match first {
        Message::Hello { protocol_version } if *protocol_version == daemon_version => Handshake::Accepted,
        Message::Hello { protocol_version } => Handshake::Rejected(Message::error(
            "version",
            format!("client speaks protocol {protocol_version}, daemon speaks {daemon_version}"),
        )),
        other => Handshake::Rejected(Message::error(
            "handshake",
            format!("expected hello as the first message, got {}", other.type_name()),
        )),
    }
}

/// Flattens the subtree at `path` into pre-order with children sorted by
/// `sort_key`. Paths always refer to the tree's stored order.
pub fn breakdown_nodes(
    tree: &BreakdownTree,
    path: &NodePath,
    sort_key: SortKey,
) -> Result<Vec<WireNode>, crate::breakdown::BreakdownError> {
    fn push(tree: &BreakdownTree, path: NodePath, key: SortKey, out: &mut Vec<WireNode>) {
        let node = tree.node(&path).expect("path produced from the tree");
        out.push(WireNode {
            path: path.clone(),
            kind: node.kind,
            display_name: node.display_name.clone(),
            file: node.frame.file_path.clone(),
            line: node.frame.line_number,
            run_time_ms: node.run_time_ms,
            weight_bytes: node.weight_bytes,
            activation_bytes: node.activation_bytes,
            leaf_count: node.leaf_count,
            child_count: node.children.len(),
        });
        let children = tree.children_with_paths(&path, key).expect("valid path");
        for (child_path, _) in children {
            push(tree, child_path, key, out);
        }
    }
    tree.node(path)?;
    let mut out = Vec::new();
    push(tree, path.clone(), sort_key, &mut out);
    Ok(out)
}
