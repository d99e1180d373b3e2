//! Remote backend protocol.
//!
//! One TCP stream carries frames of a 4-byte little-endian length followed by
//! a UTF-8 JSON body. The client opens with `{"hello": "fasb-bridge/1"}` and
//! the server echoes it. After that every request is
//! `{"id": n, "method": m, "params": {...}}` and is answered by exactly one
//! `{"id": n, "result": ...}` or `{"id": n, "error": {"code", "message"}}`.
//!
//! Float tensors travel as `{"shape": [...], "data": base64(f32 LE)}`.
//!
//! | method       | params                                   | result                          |
//! |--------------|------------------------------------------|---------------------------------|
//! | `model_info` |                                          | `config`, `fingerprint`, `tokenizer` |
//! | `tokenize`   | `text`                                   | `ids`                           |
//! | `detokenize` | `ids`                                    | `text`                          |
//! | `prime`      | `text` or `ids`, `taps`                  | `session`, `ids`, `output`      |
//! | `step`       | `session`, `token`, `steering`           | `output`                        |
//! | `rollback`   | `session`, `keep_len`                    | `ok`                            |
//! | `close`      | `session`                                | `ok`                            |

mod client;
mod server;

pub use client::{BridgeBackend, BridgeSession};
pub use server::{BridgeServer, ServerHandle};

use std::collections::BTreeMap;
use std::io::{Read, Write};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{HeadId, SteeringEntry, SteeringSpec, StepOutput};

pub const PROTOCOL_VERSION: &str = "fasb-bridge/1";
pub const MAX_FRAME_BYTES: usize = 64 << 20;

pub mod codes {
    pub const BAD_FRAME: &str = "bad_frame";
    pub const BAD_REQUEST: &str = "bad_request";
    pub const UNKNOWN_METHOD: &str = "unknown_method";
    pub const UNKNOWN_SESSION: &str = "unknown_session";
    pub const VERSION_MISMATCH: &str = "version_mismatch";
    pub const UNSUPPORTED: &str = "unsupported";
    pub const MODEL_ERROR: &str = "model_error";
}

pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> Result<()> {
    if body.len() > MAX_FRAME_BYTES {
        return Err(Error::bridge(codes::BAD_FRAME, "frame too large"));
    }
    w.write_all(&(body.len() as u32).to_le_bytes())?;
    w.write_all(body)?;
    w.flush()?;
    Ok(())
}

/// Next frame body, or `None` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(Error::bridge(
            codes::BAD_FRAME,
            format!("frame of {len} bytes exceeds the limit"),
        ));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

pub fn write_json<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<()> {
    write_frame(w, &serde_json::to_vec(value)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: String,
}

impl Tensor {
    pub fn encode(shape: Vec<usize>, values: &[f32]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            shape,
            data: STANDARD.encode(bytes),
        }
    }

    pub fn vector(values: &[f32]) -> Self {
        Self::encode(vec![values.len()], values)
    }

    pub fn decode(&self) -> Result<Vec<f32>> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::bridge(codes::BAD_REQUEST, format!("tensor payload: {e}")))?;
        let n: usize = self.shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(Error::bridge(
                codes::BAD_REQUEST,
                format!(
                    "tensor of shape {:?} carries {} bytes",
                    self.shape,
                    bytes.len()
                ),
            ));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub hello: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub method: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireHead {
    pub layer: usize,
    pub head: usize,
}

impl From<HeadId> for WireHead {
    fn from(h: HeadId) -> Self {
        Self {
            layer: h.layer,
            head: h.head,
        }
    }
}

impl From<&WireHead> for HeadId {
    fn from(h: &WireHead) -> Self {
        HeadId::new(h.layer, h.head)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireSteering {
    pub layer: usize,
    pub head: usize,
    pub strength: f32,
    pub direction: Tensor,
}

pub fn steering_to_wire(spec: &SteeringSpec) -> Vec<WireSteering> {
    spec.entries()
        .iter()
        .map(|e| WireSteering {
            layer: e.head.layer,
            head: e.head.head,
            strength: e.strength,
            direction: Tensor::vector(&e.direction),
        })
        .collect()
}

pub fn steering_from_wire(wire: &[WireSteering]) -> Result<SteeringSpec> {
    SteeringSpec::new(
        wire.iter()
            .map(|w| {
                Ok(SteeringEntry {
                    head: HeadId::new(w.layer, w.head),
                    direction: w.direction.decode()?,
                    strength: w.strength,
                })
            })
            .collect::<Result<_>>()?,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireActivation {
    pub layer: usize,
    pub head: usize,
    pub activation: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireOutput {
    pub logits: Tensor,
    pub heads: Vec<WireActivation>,
}

impl WireOutput {
    pub fn encode(out: &StepOutput) -> Self {
        Self {
            logits: Tensor::vector(&out.logits),
            heads: out
                .head_activations
                .iter()
                .map(|(h, a)| WireActivation {
                    layer: h.layer,
                    head: h.head,
                    activation: Tensor::vector(a),
                })
                .collect(),
        }
    }

    pub fn decode(&self) -> Result<StepOutput> {
        let mut head_activations = BTreeMap::new();
        for a in &self.heads {
            head_activations.insert(HeadId::new(a.layer, a.head), a.activation.decode()?);
        }
        Ok(StepOutput {
            logits: self.logits.decode()?,
            head_activations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_roundtrip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"{\"a\":1}").unwrap();
        write_frame(&mut buf, b"").unwrap();
        assert_eq!(&buf[..4], &[7, 0, 0, 0]);
        let mut r = &buf[..];
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"{\"a\":1}");
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"");
        assert!(read_frame(&mut r).unwrap().is_none());
    }

    #[test]
    fn tensor_shape_must_match_payload() {
        let t = Tensor::encode(vec![2, 2], &[1.0, -2.5, 3.25, f32::MIN_POSITIVE]);
        assert_eq!(
            t.decode().unwrap(),
            vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]
        );
        let bad = Tensor {
            shape: vec![3],
            data: t.data.clone(),
        };
        assert!(bad.decode().is_err());
    }

    #[test]
    fn steering_roundtrip() {
        let spec = SteeringSpec::new(vec![SteeringEntry {
            head: HeadId::new(1, 2),
            direction: vec![0.5, -0.25],
            strength: 3.0,
        }])
        .unwrap();
        assert_eq!(steering_from_wire(&steering_to_wire(&spec)).unwrap(), spec);
    }
}
