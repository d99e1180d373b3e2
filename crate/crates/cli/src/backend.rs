use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use fasb_core::bridge::{BridgeBackend, BridgeSession};
use fasb_core::model::{
    Backend, HeadId, LocalBackend, LocalSession, Model, ModelConfig, Session, SteeringSpec,
    StepOutput, TokenId,
};
use fasb_core::synthetic::{GroundTruth, VocabPartition, GROUND_TRUTH_FILE};
use fasb_core::vocab::{Tokenizer, Vocab, VOCAB_FILE};

use crate::BackendArgs;

pub enum AnyBackend {
    Local(LocalBackend),
    Bridge(BridgeBackend),
}

pub enum AnySession {
    Local(LocalSession),
    Bridge(BridgeSession),
}

pub enum AnyTokenizer {
    Vocab(Vocab),
    Bridge(BridgeBackend),
}

/// Everything a command needs to talk to a model.
pub struct Target {
    pub backend: AnyBackend,
    pub tokenizer: AnyTokenizer,
    pub partition: Option<VocabPartition>,
}

pub fn load_model(dir: &Path) -> Result<(LocalBackend, Vocab)> {
    let model =
        Model::load(dir).with_context(|| format!("loading model from {}", dir.display()))?;
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    Ok((LocalBackend::new(Arc::new(model)), vocab))
}

impl Target {
    pub fn open(args: &BackendArgs) -> Result<Self> {
        let truth_path = args
            .ground_truth
            .clone()
            .or_else(|| args.model.as_ref().map(|m| m.join(GROUND_TRUTH_FILE)));
        let partition = match truth_path {
            Some(p) if p.exists() => Some(GroundTruth::load(&p)?.partition),
            _ => None,
        };
        let (backend, tokenizer) = match args.backend.as_str() {
            "local" => {
                let Some(dir) = &args.model else {
                    bail!("--backend local needs --model DIR");
                };
                let (b, v) = load_model(dir)?;
                (AnyBackend::Local(b), AnyTokenizer::Vocab(v))
            }
            "bridge" => {
                let Some(addr) = &args.bridge_addr else {
                    bail!("--backend bridge needs --bridge-addr HOST:PORT");
                };
                let b = BridgeBackend::connect(addr.as_str())
                    .with_context(|| format!("connecting to bridge at {addr}"))?;
                (AnyBackend::Bridge(b.clone()), AnyTokenizer::Bridge(b))
            }
            other => bail!("unknown backend {other:?}; expected local or bridge"),
        };
        Ok(Self {
            backend,
            tokenizer,
            partition,
        })
    }
}

impl Backend for AnyBackend {
    type Session = AnySession;

    fn config(&self) -> &ModelConfig {
        match self {
            Self::Local(b) => b.config(),
            Self::Bridge(b) => b.config(),
        }
    }

    fn fingerprint(&self) -> String {
        match self {
            Self::Local(b) => b.fingerprint(),
            Self::Bridge(b) => b.fingerprint(),
        }
    }

    fn prime(
        &self,
        prompt: &[TokenId],
        taps: &[HeadId],
    ) -> fasb_core::Result<(AnySession, StepOutput)> {
        Ok(match self {
            Self::Local(b) => {
                let (s, o) = b.prime(prompt, taps)?;
                (AnySession::Local(s), o)
            }
            Self::Bridge(b) => {
                let (s, o) = b.prime(prompt, taps)?;
                (AnySession::Bridge(s), o)
            }
        })
    }
}

impl Session for AnySession {
    fn tokens(&self) -> &[TokenId] {
        match self {
            Self::Local(s) => s.tokens(),
            Self::Bridge(s) => s.tokens(),
        }
    }

    fn step(&mut self, token: TokenId, steering: &SteeringSpec) -> fasb_core::Result<StepOutput> {
        match self {
            Self::Local(s) => s.step(token, steering),
            Self::Bridge(s) => s.step(token, steering),
        }
    }

    fn truncate(&mut self, len: usize) -> fasb_core::Result<()> {
        match self {
            Self::Local(s) => s.truncate(len),
            Self::Bridge(s) => s.truncate(len),
        }
    }
}

impl Tokenizer for AnyTokenizer {
    fn encode(&self, text: &str) -> fasb_core::Result<Vec<TokenId>> {
        match self {
            Self::Vocab(v) => Tokenizer::encode(v, text),
            Self::Bridge(b) => b.encode(text),
        }
    }

    fn decode(&self, ids: &[TokenId]) -> fasb_core::Result<String> {
        match self {
            Self::Vocab(v) => Tokenizer::decode(v, ids),
            Self::Bridge(b) => b.decode(ids),
        }
    }
}
