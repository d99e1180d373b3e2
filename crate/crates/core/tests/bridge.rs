mod common;

use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpStream};
use std::sync::OnceLock;

use common::{config, drift, fixture, steady};
use fasb_core::bridge::{
    codes, read_frame, write_frame, write_json, BridgeBackend, BridgeServer, Hello, Request,
    Response, PROTOCOL_VERSION,
};
use fasb_core::controller::{generate, Mode};
use fasb_core::eval::score_items;
use fasb_core::model::{Backend, GenerationSession, SteeringSpec, StepOutput};
use fasb_core::synthetic::synthetic_mc_items;
use fasb_core::vocab::Tokenizer;
use fasb_core::Error;
use proptest::prelude::*;
use serde_json::json;

const TOL: f32 = 1e-4;

fn server() -> SocketAddr {
    static ADDR: OnceLock<SocketAddr> = OnceLock::new();
    *ADDR.get_or_init(|| {
        let f = fixture();
        BridgeServer::bind("127.0.0.1:0", f.backend.clone())
            .unwrap()
            .with_tokenizer(f.planted.vocab.clone())
            .spawn()
            .unwrap()
            .addr()
    })
}

fn remote() -> BridgeBackend {
    BridgeBackend::connect(server()).unwrap()
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

fn close(a: &StepOutput, b: &StepOutput) -> bool {
    max_diff(&a.logits, &b.logits) <= TOL
        && a.head_activations.len() == b.head_activations.len()
        && a.head_activations
            .iter()
            .zip(&b.head_activations)
            .all(|((h1, x), (h2, y))| h1 == h2 && max_diff(x, y) <= TOL)
}

struct Raw {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Raw {
    fn connect(version: &str) -> (Self, Vec<u8>) {
        let stream = TcpStream::connect(server()).unwrap();
        let mut raw = Raw {
            reader: BufReader::new(stream.try_clone().unwrap()),
            writer: BufWriter::new(stream),
        };
        write_json(
            &mut raw.writer,
            &Hello {
                hello: version.into(),
            },
        )
        .unwrap();
        let reply = read_frame(&mut raw.reader).unwrap().unwrap();
        (raw, reply)
    }

    fn send(&mut self, body: &[u8]) -> Response {
        write_frame(&mut self.writer, body).unwrap();
        let reply = read_frame(&mut self.reader).unwrap().unwrap();
        serde_json::from_slice(&reply).unwrap()
    }

    fn call(&mut self, id: u64, method: &str, params: serde_json::Value) -> Response {
        let req = Request {
            id,
            method: method.into(),
            params,
        };
        self.send(&serde_json::to_vec(&req).unwrap())
    }
}

fn code(r: &Response) -> &str {
    &r.error.as_ref().expect("error response").code
}

#[test]
fn model_info_matches_the_local_backend() {
    let b = remote();
    let f = fixture();
    assert_eq!(b.config(), f.backend.config());
    assert_eq!(b.fingerprint(), f.backend.fingerprint());
}

#[test]
fn tokenizer_round_trips_over_the_wire() {
    let b = remote();
    let v = &fixture().planted.vocab;
    let text = "<pos> true yes";
    let ids = b.encode(text).unwrap();
    assert_eq!(ids, v.encode(text));
    assert_eq!(b.decode(&ids).unwrap(), text);

    let taps = fixture().probe.head_ids();
    let (_, prime_ids, out) = b.prime_text(text, &taps).unwrap();
    assert_eq!(prime_ids, ids);
    let (_, local) = fixture().backend.prime(&ids, &taps).unwrap();
    assert!(close(&out, &local));
}

#[test]
fn identical_sessions_agree() {
    let b = remote();
    let taps = fixture().probe.head_ids();
    for prompt in drift(5, 41) {
        let mut s1 = GenerationSession::prime(&b, &prompt, &taps).unwrap();
        let mut s2 = GenerationSession::prime(&b, &prompt, &taps).unwrap();
        for t in [7, 12, 9] {
            let a = s1.step(t, &SteeringSpec::none()).unwrap().clone();
            let c = s2.step(t, &SteeringSpec::none()).unwrap().clone();
            assert!(close(&a, &c));
        }
    }
}

#[test]
fn malformed_frames_leave_the_connection_usable() {
    let (mut raw, hello) = Raw::connect(PROTOCOL_VERSION);
    let hello: Hello = serde_json::from_slice(&hello).unwrap();
    assert_eq!(hello.hello, PROTOCOL_VERSION);

    let r = raw.send(b"{not json");
    assert_eq!(code(&r), codes::BAD_FRAME);
    assert_eq!(r.id, None);

    let r = raw.send(b"{\"id\": 4, \"params\": 1}");
    assert_eq!(code(&r), codes::BAD_FRAME);
    assert_eq!(r.id, Some(4));

    let r = raw.call(5, "model_info", json!({}));
    assert_eq!(r.id, Some(5));
    assert!(r.result.is_some());
}

#[test]
fn structured_errors_carry_the_request_id() {
    let (mut raw, _) = Raw::connect(PROTOCOL_VERSION);
    let r = raw.call(1, "teleport", json!({}));
    assert_eq!((r.id, code(&r)), (Some(1), codes::UNKNOWN_METHOD));

    let r = raw.call(
        2,
        "step",
        json!({"session": 999, "token": 1, "steering": []}),
    );
    assert_eq!((r.id, code(&r)), (Some(2), codes::UNKNOWN_SESSION));

    let r = raw.call(3, "prime", json!({"ids": [1, 100000], "taps": []}));
    assert_eq!(r.id, Some(3));
    assert!(r.error.is_some());

    let r = raw.call(4, "prime", json!({"ids": [2, 5], "taps": []}));
    let session = r.result.unwrap()["session"].as_u64().unwrap();
    let r = raw.call(5, "close", json!({ "session": session }));
    assert!(r.result.is_some());
    let r = raw.call(6, "rollback", json!({"session": session, "keep_len": 1}));
    assert_eq!(code(&r), codes::UNKNOWN_SESSION);
}

#[test]
fn version_mismatch_is_refused() {
    let (_, reply) = Raw::connect("fasb-bridge/0");
    let r: Response = serde_json::from_slice(&reply).unwrap();
    assert_eq!(code(&r), codes::VERSION_MISMATCH);
}

#[test]
fn remote_overflow_surfaces_as_an_error() {
    let b = remote();
    let long = vec![5; b.config().max_seq_len + 1];
    assert!(matches!(b.prime(&long, &[]), Err(Error::Bridge { .. })));
}

#[test]
fn controller_runs_identically_over_the_bridge() {
    let f = fixture();
    let b = remote();
    let prompts: Vec<_> = drift(6, 42).into_iter().chain(steady(4, 42)).collect();
    for mode in Mode::ALL {
        let cfg = config(mode);
        for p in &prompts {
            let local = generate(&f.backend, &f.probe, &cfg, p).unwrap();
            let wire = generate(&b, &f.probe, &cfg, p).unwrap();
            assert_eq!(local.tokens, wire.tokens, "mode {mode}");
            assert_eq!(
                local.trace.trigger.as_ref().map(|t| t.index),
                wire.trace.trigger.as_ref().map(|t| t.index)
            );
            assert_eq!(local.regenerated_tokens, wire.regenerated_tokens);
            for (x, y) in local
                .trace
                .probabilities
                .iter()
                .zip(&wire.trace.probabilities)
            {
                assert!((x - y).abs() <= 1e-4);
            }
        }
    }
}

#[test]
fn multiple_choice_scores_match_over_the_bridge() {
    let f = fixture();
    let b = remote();
    let items = synthetic_mc_items(&f.planted, 8, 43);
    let cfg = config(Mode::QuestionGate);
    let local = score_items(&f.backend, &f.probe, &cfg, &f.planted.vocab, &items).unwrap();
    let wire = score_items(&b, &f.probe, &cfg, &b, &items).unwrap();
    for (l, w) in local.iter().zip(&wire) {
        for (x, y) in l.scores.iter().zip(&w.scores) {
            assert!((x - y).abs() <= 1e-4);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rollback_matches_a_fresh_prime(
        seed in 0u64..500,
        extra in prop::collection::vec(4u32..40, 1..10),
        keep_frac in 0.0f64..1.0,
        r in 0.0f32..10.0,
    ) {
        let f = fixture();
        let b = remote();
        let prompt = &drift(1, seed)[0];
        let taps = f.probe.head_ids();
        let spec = f.probe.steering(r).unwrap();
        let mut s = GenerationSession::prime(&b, prompt, &taps).unwrap();
        for &t in &extra {
            s.step(t, &spec).unwrap();
        }
        let keep = ((extra.len() - 1) as f64 * keep_frac) as usize + 1;
        s.rollback(keep - 1).unwrap();
        let out = s.step(extra[keep - 1], &spec).unwrap().clone();

        let mut fresh = GenerationSession::prime(&f.backend, prompt, &taps).unwrap();
        for &t in &extra[..keep] {
            fresh.step(t, &spec).unwrap();
        }
        prop_assert!(close(&out, fresh.last_output().unwrap()));
    }
}
