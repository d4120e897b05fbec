//! Session wire protocol: one JSON object per line, each carrying the schema
//! version `v` and a `type` tag.
//!
//! Frames travel as base64 of little-endian `f32` intensities, row-major.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::synth::Frame;

use super::gate::GateLevel;
use super::prompt::PromptCause;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OperatorAction {
    /// Multiply probe speed by `factor` (0 < factor <= 1).
    SlowDown { factor: f64 },
    /// Restore acoustic contact.
    Press {
        #[serde(default = "one")]
        gain: f64,
    },
    /// Step back `frames` accepted positions and sweep again.
    Rescan {
        side: Side,
        #[serde(default = "default_rescan")]
        frames: usize,
    },
    /// Return the probe to the last accepted position.
    Reacquire,
}

fn one() -> f64 {
    1.0
}

fn default_rescan() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePayload {
    pub index: usize,
    pub width: usize,
    pub height: usize,
    pub timestamp: f64,
    /// Base64 of `f32` little-endian intensities.
    pub data: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    /// Opens a session; ids are unique across live connections.
    Hello {
        session: String,
        /// Seed of the server-side simulated sweep.
        #[serde(default)]
        seed: Option<u64>,
    },
    /// A frame supplied by the client.
    FrameMeta(FramePayload),
    /// Ask the server to acquire `count` frames from its simulated sweep.
    Advance {
        #[serde(default = "one_frame")]
        count: usize,
    },
    OperatorAction(OperatorAction),
    End,
}

fn one_frame() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    FrameMeta {
        index: usize,
        width: usize,
        height: usize,
        timestamp: f64,
        /// Base64 `f32` intensities, sent for frames the server acquired itself.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        data: Option<String>,
    },
    PoseEstimate {
        index: usize,
        /// `tx ty tz rx ry rz` of the absolute pose (mm, degrees).
        pose: [f64; 6],
        accepted: bool,
    },
    UncertaintyReport {
        index: usize,
        mean: [f64; 6],
        sigma2: f64,
        passes: usize,
        gate: GateLevel,
    },
    SaliencyPng {
        index: usize,
        /// `saliency` or `uncertainty`.
        map: String,
        png: String,
    },
    Prompt {
        index: usize,
        cause: PromptCause,
        message: String,
    },
    SessionSummary {
        session: String,
        frames_scored: usize,
        frames_accepted: usize,
        prompts: usize,
        trajectory: Vec<[f64; 6]>,
    },
    Error {
        message: String,
    },
}

/// A message with its schema version.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub v: u32,
    #[serde(flatten)]
    pub body: T,
}

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unsupported protocol version {0}")]
    Version(u32),
    #[error("bad frame payload: {0}")]
    Frame(String),
}

pub fn encode<T: Serialize>(body: T) -> String {
    serde_json::to_string(&Envelope {
        v: PROTOCOL_VERSION,
        body,
    })
    .expect("message serialises")
}

pub fn decode_client(line: &str) -> Result<ClientMessage, ProtocolError> {
    let raw: serde_json::Value = serde_json::from_str(line).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    let v = raw
        .get("v")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| ProtocolError::Malformed("missing version field v".into()))?;
    if v != PROTOCOL_VERSION as u64 {
        return Err(ProtocolError::Version(v as u32));
    }
    let env: Envelope<ClientMessage> =
        serde_json::from_value(raw).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    Ok(env.body)
}

pub fn decode_server(line: &str) -> Result<ServerMessage, ProtocolError> {
    let env: Envelope<ServerMessage> = serde_json::from_str(line).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    if env.v != PROTOCOL_VERSION {
        return Err(ProtocolError::Version(env.v));
    }
    Ok(env.body)
}

pub fn frame_payload(index: usize, frame: &Frame) -> FramePayload {
    let bytes: Vec<u8> = frame.intensities.iter().flat_map(|v| v.to_le_bytes()).collect();
    FramePayload {
        index,
        width: frame.width,
        height: frame.height,
        timestamp: frame.timestamp,
        data: STANDARD.encode(bytes),
    }
}

pub fn payload_frame(p: &FramePayload) -> Result<Frame, ProtocolError> {
    let bytes = STANDARD.decode(&p.data).map_err(|e| ProtocolError::Frame(e.to_string()))?;
    if bytes.len() != p.width * p.height * 4 {
        return Err(ProtocolError::Frame(format!(
            "{} bytes for a {}x{} frame",
            bytes.len(),
            p.width,
            p.height
        )));
    }
    let px: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if px.iter().any(|v| !v.is_finite()) {
        return Err(ProtocolError::Frame("non-finite intensity".into()));
    }
    Ok(Frame::new(p.width, p.height, px, p.timestamp))
}

pub fn png_base64(png: &[u8]) -> String {
    STANDARD.encode(png)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn client_messages_round_trip() {
        let f = Frame::new(2, 2, vec![0.0, 0.25, 0.5, 1.0], 0.1);
        let msgs = vec![
            ClientMessage::Hello {
                session: "s1".into(),
                seed: Some(3),
            },
            ClientMessage::FrameMeta(frame_payload(4, &f)),
            ClientMessage::Advance { count: 3 },
            ClientMessage::OperatorAction(OperatorAction::SlowDown { factor: 0.5 }),
            ClientMessage::OperatorAction(OperatorAction::Rescan {
                side: Side::Left,
                frames: 2,
            }),
            ClientMessage::OperatorAction(OperatorAction::Reacquire),
            ClientMessage::End,
        ];
        for m in msgs {
            let line = encode(m.clone());
            assert!(!line.contains('\n'));
            assert_eq!(decode_client(&line).unwrap(), m);
        }
        let ClientMessage::FrameMeta(p) = decode_client(&encode(ClientMessage::FrameMeta(frame_payload(0, &f)))).unwrap()
        else {
            panic!("frame expected");
        };
        assert_eq!(payload_frame(&p).unwrap(), f);
    }

    #[test]
    fn wire_shapes() {
        let line = encode(ClientMessage::OperatorAction(OperatorAction::SlowDown { factor: 0.5 }));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["v"], 1);
        assert_eq!(v["type"], "operator_action");
        assert_eq!(v["kind"], "slow-down");
        assert_eq!(v["factor"], 0.5);
        let press = decode_client(r#"{"v":1,"type":"operator_action","kind":"press"}"#).unwrap();
        assert_eq!(press, ClientMessage::OperatorAction(OperatorAction::Press { gain: 1.0 }));
        let s = encode(ServerMessage::UncertaintyReport {
            index: 3,
            mean: [0.0; 6],
            sigma2: 0.5,
            passes: 16,
            gate: GateLevel::Caution,
        });
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!((v["type"].as_str(), v["gate"].as_str()), (Some("uncertainty_report"), Some("caution")));
        assert!(matches!(decode_server(&s).unwrap(), ServerMessage::UncertaintyReport { index: 3, .. }));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(decode_client("{not json"), Err(ProtocolError::Malformed(_))));
        assert!(matches!(decode_client(r#"{"type":"end"}"#), Err(ProtocolError::Malformed(_))));
        assert!(matches!(decode_client(r#"{"v":9,"type":"end"}"#), Err(ProtocolError::Version(9))));
        assert!(matches!(decode_client(r#"{"v":1,"type":"warp"}"#), Err(ProtocolError::Malformed(_))));
        let bad = FramePayload {
            index: 0,
            width: 4,
            height: 4,
            timestamp: 0.0,
            data: STANDARD.encode([0u8; 8]),
        };
        assert!(payload_frame(&bad).is_err());
    }
}
