//! Loopback server exposing any [`Backend`] over the bridge protocol.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    codes, read_frame, steering_from_wire, write_json, ErrorBody, Hello, Request, Response,
    WireHead, WireOutput, WireSteering, PROTOCOL_VERSION,
};
use crate::error::{Error, Result};
use crate::model::{Backend, HeadId, Session, TokenId};
use crate::vocab::Tokenizer;

type SharedTokenizer = Arc<dyn Tokenizer + Send + Sync>;

pub struct BridgeServer<B> {
    listener: TcpListener,
    backend: Arc<B>,
    tokenizer: Option<SharedTokenizer>,
}

pub struct ServerHandle {
    addr: SocketAddr,
    _thread: JoinHandle<()>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl<B> BridgeServer<B>
where
    B: Backend + Send + Sync + 'static,
{
    pub fn bind(addr: impl ToSocketAddrs, backend: B) -> Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            backend: Arc::new(backend),
            tokenizer: None,
        })
    }

    pub fn with_tokenizer(mut self, tokenizer: impl Tokenizer + Send + Sync + 'static) -> Self {
        self.tokenizer = Some(Arc::new(tokenizer));
        self
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Accept connections until the listener fails, one thread each.
    pub fn serve(self) -> Result<()> {
        for stream in self.listener.incoming() {
            let stream = stream?;
            let backend = Arc::clone(&self.backend);
            let tokenizer = self.tokenizer.clone();
            thread::spawn(move || {
                let _ = Connection::new(backend, tokenizer).run(stream);
            });
        }
        Ok(())
    }

    pub fn spawn(self) -> Result<ServerHandle> {
        let addr = self.local_addr()?;
        let thread = thread::spawn(move || {
            let _ = self.serve();
        });
        Ok(ServerHandle {
            addr,
            _thread: thread,
        })
    }
}

struct Connection<B: Backend> {
    backend: Arc<B>,
    tokenizer: Option<SharedTokenizer>,
    sessions: HashMap<u64, B::Session>,
    next_session: u64,
}

#[derive(Deserialize)]
struct PrimeParams {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    ids: Option<Vec<TokenId>>,
    #[serde(default)]
    taps: Vec<WireHead>,
}

#[derive(Deserialize)]
struct StepParams {
    session: u64,
    token: TokenId,
    #[serde(default)]
    steering: Vec<WireSteering>,
}

#[derive(Deserialize)]
struct RollbackParams {
    session: u64,
    keep_len: usize,
}

#[derive(Deserialize)]
struct SessionParams {
    session: u64,
}

#[derive(Deserialize)]
struct TextParams {
    text: String,
}

#[derive(Deserialize)]
struct IdsParams {
    ids: Vec<TokenId>,
}

fn params<T: DeserializeOwned>(v: Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::bridge(codes::BAD_REQUEST, e.to_string()))
}

fn error_body(e: Error) -> ErrorBody {
    match e {
        Error::Bridge { code, message } => ErrorBody { code, message },
        other => ErrorBody {
            code: codes::MODEL_ERROR.into(),
            message: other.to_string(),
        },
    }
}

impl<B: Backend> Connection<B> {
    fn new(backend: Arc<B>, tokenizer: Option<SharedTokenizer>) -> Self {
        Self {
            backend,
            tokenizer,
            sessions: HashMap::new(),
            next_session: 1,
        }
    }

    fn run(mut self, stream: TcpStream) -> Result<()> {
        stream.set_nodelay(true)?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut writer = BufWriter::new(stream);

        let Some(first) = read_frame(&mut reader)? else {
            return Ok(());
        };
        match serde_json::from_slice::<Hello>(&first) {
            Ok(h) if h.hello == PROTOCOL_VERSION => write_json(
                &mut writer,
                &Hello {
                    hello: PROTOCOL_VERSION.into(),
                },
            )?,
            Ok(h) => {
                return write_json(
                    &mut writer,
                    &Response {
                        id: None,
                        result: None,
                        error: Some(ErrorBody {
                            code: codes::VERSION_MISMATCH.into(),
                            message: format!(
                                "server speaks {PROTOCOL_VERSION}, client sent {}",
                                h.hello
                            ),
                        }),
                    },
                );
            }
            Err(e) => {
                return write_json(
                    &mut writer,
                    &Response {
                        id: None,
                        result: None,
                        error: Some(ErrorBody {
                            code: codes::BAD_FRAME.into(),
                            message: format!("expected handshake: {e}"),
                        }),
                    },
                );
            }
        }

        loop {
            let body = match read_frame(&mut reader) {
                Ok(Some(body)) => body,
                Ok(None) => return Ok(()),
                Err(Error::Bridge { code, message }) => {
                    // the stream position is lost after an oversized prefix
                    let _ = write_json(
                        &mut writer,
                        &Response {
                            id: None,
                            result: None,
                            error: Some(ErrorBody { code, message }),
                        },
                    );
                    return Ok(());
                }
                Err(e) => return Err(e),
            };
            let response = match serde_json::from_slice::<Request>(&body) {
                Ok(req) => {
                    let id = req.id;
                    match self.dispatch(req) {
                        Ok(result) => Response {
                            id: Some(id),
                            result: Some(result),
                            error: None,
                        },
                        Err(e) => Response {
                            id: Some(id),
                            result: None,
                            error: Some(error_body(e)),
                        },
                    }
                }
                Err(e) => Response {
                    id: serde_json::from_slice::<Value>(&body)
                        .ok()
                        .and_then(|v| v.get("id").and_then(Value::as_u64)),
                    result: None,
                    error: Some(ErrorBody {
                        code: codes::BAD_FRAME.into(),
                        message: e.to_string(),
                    }),
                },
            };
            write_json(&mut writer, &response)?;
        }
    }

    fn tokenizer(&self) -> Result<&SharedTokenizer> {
        self.tokenizer
            .as_ref()
            .ok_or_else(|| Error::bridge(codes::UNSUPPORTED, "server has no tokenizer"))
    }

    fn session(&mut self, id: u64) -> Result<&mut B::Session> {
        self.sessions
            .get_mut(&id)
            .ok_or_else(|| Error::bridge(codes::UNKNOWN_SESSION, format!("no session {id}")))
    }

    fn dispatch(&mut self, req: Request) -> Result<Value> {
        match req.method.as_str() {
            "model_info" => Ok(json!({
                "config": self.backend.config(),
                "fingerprint": self.backend.fingerprint(),
                "tokenizer": {
                    "kind": if self.tokenizer.is_some() { "word" } else { "none" },
                    "vocab_size": self.backend.config().vocab_size,
                },
            })),
            "tokenize" => {
                let p: TextParams = params(req.params)?;
                Ok(json!({ "ids": self.tokenizer()?.encode(&p.text)? }))
            }
            "detokenize" => {
                let p: IdsParams = params(req.params)?;
                Ok(json!({ "text": self.tokenizer()?.decode(&p.ids)? }))
            }
            "prime" => {
                let p: PrimeParams = params(req.params)?;
                let ids = match (p.ids, p.text) {
                    (Some(ids), None) => ids,
                    (None, Some(text)) => self.tokenizer()?.encode(&text)?,
                    _ => {
                        return Err(Error::bridge(
                            codes::BAD_REQUEST,
                            "prime takes exactly one of text or ids",
                        ))
                    }
                };
                let taps: Vec<HeadId> = p.taps.iter().map(HeadId::from).collect();
                let (session, out) = self.backend.prime(&ids, &taps)?;
                let id = self.next_session;
                self.next_session += 1;
                self.sessions.insert(id, session);
                Ok(json!({
                    "session": id,
                    "ids": ids,
                    "output": WireOutput::encode(&out),
                }))
            }
            "step" => {
                let p: StepParams = params(req.params)?;
                let steering = steering_from_wire(&p.steering)?;
                let out = self.session(p.session)?.step(p.token, &steering)?;
                Ok(json!({ "output": WireOutput::encode(&out) }))
            }
            "rollback" => {
                let p: RollbackParams = params(req.params)?;
                self.session(p.session)?.truncate(p.keep_len)?;
                Ok(json!({ "ok": true }))
            }
            "close" => {
                let p: SessionParams = params(req.params)?;
                self.sessions.remove(&p.session).ok_or_else(|| {
                    Error::bridge(codes::UNKNOWN_SESSION, format!("no session {}", p.session))
                })?;
                Ok(json!({ "ok": true }))
            }
            other => Err(Error::bridge(
                codes::UNKNOWN_METHOD,
                format!("unknown method {other:?}"),
            )),
        }
    }
}
