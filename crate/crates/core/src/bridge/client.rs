//! [`Backend`] implementation that forwards to a bridge server.

use std::io::{BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    codes, read_frame, steering_to_wire, write_json, Hello, Request, Response, WireHead,
    WireOutput, PROTOCOL_VERSION,
};
use crate::error::{Error, Result};
use crate::model::{Backend, HeadId, ModelConfig, Session, SteeringSpec, StepOutput, TokenId};
use crate::vocab::Tokenizer;

struct Conn {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    next_id: u64,
}

struct Shared {
    conn: Mutex<Conn>,
}

impl Shared {
    fn call<T: DeserializeOwned>(&self, method: &str, params: Value) -> Result<T> {
        let mut conn = self
            .conn
            .lock()
            .map_err(|_| Error::bridge(codes::MODEL_ERROR, "connection lock poisoned"))?;
        conn.next_id += 1;
        let id = conn.next_id;
        write_json(
            &mut conn.writer,
            &Request {
                id,
                method: method.into(),
                params,
            },
        )?;
        let body = read_frame(&mut conn.reader)?
            .ok_or_else(|| Error::bridge(codes::BAD_FRAME, "server closed the connection"))?;
        let resp: Response = serde_json::from_slice(&body)
            .map_err(|e| Error::bridge(codes::BAD_FRAME, format!("unreadable response: {e}")))?;
        if let Some(err) = resp.error {
            return Err(Error::bridge(err.code, err.message));
        }
        if resp.id != Some(id) {
            return Err(Error::bridge(
                codes::BAD_FRAME,
                format!("response id {:?} does not match request {id}", resp.id),
            ));
        }
        let result = resp.result.ok_or_else(|| {
            Error::bridge(codes::BAD_FRAME, "response has neither result nor error")
        })?;
        serde_json::from_value(result)
            .map_err(|e| Error::bridge(codes::BAD_FRAME, format!("unexpected result: {e}")))
    }
}

#[derive(Deserialize)]
struct ModelInfo {
    config: ModelConfig,
    fingerprint: String,
}

#[derive(Deserialize)]
struct Primed {
    session: u64,
    ids: Vec<TokenId>,
    output: WireOutput,
}

#[derive(Deserialize)]
struct Stepped {
    output: WireOutput,
}

#[derive(Clone)]
pub struct BridgeBackend {
    shared: Arc<Shared>,
    config: ModelConfig,
    fingerprint: String,
}

impl BridgeBackend {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut writer = BufWriter::new(stream);
        write_json(
            &mut writer,
            &Hello {
                hello: PROTOCOL_VERSION.into(),
            },
        )?;
        let body = read_frame(&mut reader)?
            .ok_or_else(|| Error::bridge(codes::BAD_FRAME, "server closed during handshake"))?;
        match serde_json::from_slice::<Hello>(&body) {
            Ok(h) if h.hello == PROTOCOL_VERSION => {}
            _ => {
                let message = serde_json::from_slice::<Response>(&body)
                    .ok()
                    .and_then(|r| r.error)
                    .map(|e| e.message)
                    .unwrap_or_else(|| String::from_utf8_lossy(&body).into_owned());
                return Err(Error::bridge(codes::VERSION_MISMATCH, message));
            }
        }
        let shared = Arc::new(Shared {
            conn: Mutex::new(Conn {
                reader,
                writer,
                next_id: 0,
            }),
        });
        let info: ModelInfo = shared.call("model_info", json!({}))?;
        info.config.validate()?;
        Ok(Self {
            shared,
            config: info.config,
            fingerprint: info.fingerprint,
        })
    }

    /// Prime from text tokenized by the server.
    pub fn prime_text(
        &self,
        text: &str,
        taps: &[HeadId],
    ) -> Result<(BridgeSession, Vec<TokenId>, StepOutput)> {
        let taps: Vec<WireHead> = taps.iter().copied().map(WireHead::from).collect();
        let p: Primed = self
            .shared
            .call("prime", json!({ "text": text, "taps": taps }))?;
        let out = p.output.decode()?;
        Ok((self.session(p.session, p.ids.clone()), p.ids, out))
    }

    fn session(&self, id: u64, tokens: Vec<TokenId>) -> BridgeSession {
        BridgeSession {
            shared: Arc::clone(&self.shared),
            id,
            tokens,
        }
    }
}

impl Backend for BridgeBackend {
    type Session = BridgeSession;

    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn prime(&self, prompt: &[TokenId], taps: &[HeadId]) -> Result<(BridgeSession, StepOutput)> {
        let taps: Vec<WireHead> = taps.iter().copied().map(WireHead::from).collect();
        let p: Primed = self
            .shared
            .call("prime", json!({ "ids": prompt, "taps": taps }))?;
        let out = p.output.decode()?;
        Ok((self.session(p.session, p.ids), out))
    }
}

impl Tokenizer for BridgeBackend {
    fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        #[derive(Deserialize)]
        struct Ids {
            ids: Vec<TokenId>,
        }
        Ok(self
            .shared
            .call::<Ids>("tokenize", json!({ "text": text }))?
            .ids)
    }

    fn decode(&self, ids: &[TokenId]) -> Result<String> {
        #[derive(Deserialize)]
        struct Text {
            text: String,
        }
        Ok(self
            .shared
            .call::<Text>("detokenize", json!({ "ids": ids }))?
            .text)
    }
}

/// Remote session; closed on drop.
pub struct BridgeSession {
    shared: Arc<Shared>,
    id: u64,
    tokens: Vec<TokenId>,
}

impl BridgeSession {
    pub fn id(&self) -> u64 {
        self.id
    }
}

impl Session for BridgeSession {
    fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    fn step(&mut self, token: TokenId, steering: &SteeringSpec) -> Result<StepOutput> {
        let s: Stepped = self.shared.call(
            "step",
            json!({
                "session": self.id,
                "token": token,
                "steering": steering_to_wire(steering),
            }),
        )?;
        let out = s.output.decode()?;
        self.tokens.push(token);
        Ok(out)
    }

    fn truncate(&mut self, len: usize) -> Result<()> {
        if len > self.tokens.len() {
            return Err(Error::Precondition(format!(
                "cannot truncate {} tokens to {len}",
                self.tokens.len()
            )));
        }
        let _: Value = self
            .shared
            .call("rollback", json!({ "session": self.id, "keep_len": len }))?;
        self.tokens.truncate(len);
        Ok(())
    }
}

impl Drop for BridgeSession {
    fn drop(&mut self) {
        let _ = self
            .shared
            .call::<Value>("close", json!({ "session": self.id }));
    }
}
