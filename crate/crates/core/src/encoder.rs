//! Text-to-embedding encoders.
//!
//! Three implementations sit behind [`Encoder`]: signed feature hashing
//! (the default, no model files needed), lookup in a precomputed embedding
//! file, and a client for an external embedding service speaking
//! `POST {"texts": [...]}` -> `{"embeddings": [[...], ...]}`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::Embedding;

pub trait Encoder: Send + Sync {
    fn dimension(&self) -> usize;

    fn encode(&self, text: &str) -> Result<Embedding>;

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        texts.iter().map(|t| self.encode(t)).collect()
    }

    fn spec(&self) -> EncoderSpec;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EncoderSpec {
    Hash {
        dimension: usize,
        seed: u64,
    },
    File {
        dimension: usize,
        path: PathBuf,
    },
    Remote {
        dimension: usize,
        endpoint: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        /// Name of the environment variable holding a bearer token; `null`
        /// disables authentication.
        #[serde(default = "default_token_env")]
        auth_token_env: Option<String>,
        #[serde(default = "default_max_in_flight")]
        max_in_flight: usize,
        #[serde(default = "default_attempts")]
        attempts: u32,
        #[serde(default = "default_backoff_ms")]
        initial_backoff_ms: u64,
    },
}

fn default_timeout_ms() -> u64 {
    5_000
}
pub const DEFAULT_TOKEN_ENV: &str = "NEURORAG_ENCODER_TOKEN";

fn default_token_env() -> Option<String> {
    Some(DEFAULT_TOKEN_ENV.to_string())
}
fn default_max_in_flight() -> usize {
    4
}
fn default_attempts() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    250
}

impl EncoderSpec {
    pub fn dimension(&self) -> usize {
        match self {
            EncoderSpec::Hash { dimension, .. }
            | EncoderSpec::File { dimension, .. }
            | EncoderSpec::Remote { dimension, .. } => *dimension,
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Encoder>> {
        Ok(match self {
            EncoderSpec::Hash { dimension, seed } => Arc::new(HashEncoder::new(*dimension, *seed)?),
            EncoderSpec::File { dimension, path } => Arc::new(FileEncoder::load(path, *dimension)?),
            EncoderSpec::Remote { .. } => Arc::new(RemoteEncoder::new(self.clone())?),
        })
    }
}

fn require_text(text: &str) -> Result<()> {
    if text.trim().is_empty() {
        return Err(Error::usage("cannot encode empty text"));
    }
    Ok(())
}

/// Lowercased alphanumeric word tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Signed feature hashing of word tokens into `dimension` buckets, L2
/// normalized. A pure function of (text, seed, dimension).
#[derive(Debug, Clone)]
pub struct HashEncoder {
    dimension: usize,
    seed: u64,
}

impl HashEncoder {
    pub fn new(dimension: usize, seed: u64) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::usage("encoder dimension must be positive"));
        }
        Ok(HashEncoder { dimension, seed })
    }

    fn bucket(&self, token: &str) -> (usize, f64) {
        let digest = Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(token.as_bytes())
            .finalize();
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        let idx = (u64::from_le_bytes(head) % self.dimension as u64) as usize;
        let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        (idx, sign)
    }
}

impl Encoder for HashEncoder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn encode(&self, text: &str) -> Result<Embedding> {
        require_text(text)?;
        let mut v = vec![0.0; self.dimension];
        for tok in tokenize(text) {
            let (i, s) = self.bucket(&tok);
            v[i] += s;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Embedding::new(v)
    }

    fn spec(&self) -> EncoderSpec {
        EncoderSpec::Hash {
            dimension: self.dimension,
            seed: self.seed,
        }
    }
}

pub fn text_sha256(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub text_sha256: String,
    pub embedding: Vec<f64>,
}

/// Exact-key lookup of precomputed embeddings, keyed by the SHA-256 of the
/// text.
#[derive(Debug, Clone)]
pub struct FileEncoder {
    dimension: usize,
    path: PathBuf,
    table: HashMap<String, Embedding>,
}

impl FileEncoder {
    pub fn load(path: impl AsRef<Path>, dimension: usize) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&raw, dimension, path.to_path_buf())
    }

    pub fn from_jsonl(raw: &str, dimension: usize, path: PathBuf) -> Result<Self> {
        let mut table = HashMap::new();
        for (n, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: EmbeddingRecord = serde_json::from_str(line)
                .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), n + 1)))?;
            if rec.embedding.len() != dimension {
                return Err(Error::data(format!(
                    "{}:{}: embedding has dimension {}, expected {dimension}",
                    path.display(),
                    n + 1,
                    rec.embedding.len()
                )));
            }
            table.insert(rec.text_sha256, Embedding::new(rec.embedding)?);
        }
        Ok(FileEncoder {
            dimension,
            path,
            table,
        })
    }
}

impl Encoder for FileEncoder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn encode(&self, text: &str) -> Result<Embedding> {
        require_text(text)?;
        self.table
            .get(&text_sha256(text))
            .cloned()
            .ok_or_else(|| Error::data(format!("no precomputed embedding for text {text:?}")))
    }

    fn spec(&self) -> EncoderSpec {
        EncoderSpec::File {
            dimension: self.dimension,
            path: self.path.clone(),
        }
    }
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct RemoteResponse {
    embeddings: Vec<Vec<f64>>,
}

/// Counting semaphore bounding concurrent requests.
struct InFlight {
    limit: usize,
    count: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut c = self.count.lock().expect("in-flight lock");
        while *c >= self.limit {
            c = self.freed.wait(c).expect("in-flight lock");
        }
        *c += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut c = self.0.count.lock().expect("in-flight lock");
        *c -= 1;
        self.0.freed.notify_one();
    }
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

/// Client for an external embedding service.
pub struct RemoteEncoder {
    spec: EncoderSpec,
    dimension: usize,
    endpoint: String,
    token: Option<String>,
    attempts: u32,
    initial_backoff: Duration,
    agent: ureq::Agent,
    in_flight: InFlight,
}

impl RemoteEncoder {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        let EncoderSpec::Remote {
            dimension,
            endpoint,
            timeout_ms,
            auth_token_env,
            max_in_flight,
            attempts,
            initial_backoff_ms,
        } = &spec
        else {
            return Err(Error::usage("remote encoder needs a remote spec"));
        };
        if *dimension == 0 || *max_in_flight == 0 || *attempts == 0 {
            return Err(Error::usage(
                "remote encoder dimension, max_in_flight and attempts must be positive",
            ));
        }
        let token = auth_token_env.as_ref().and_then(|var| std::env::var(var).ok());
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(*timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(RemoteEncoder {
            dimension: *dimension,
            endpoint: endpoint.clone(),
            token,
            attempts: *attempts,
            initial_backoff: Duration::from_millis(*initial_backoff_ms),
            agent,
            in_flight: InFlight {
                limit: *max_in_flight,
                count: Mutex::new(0),
                freed: Condvar::new(),
            },
            spec,
        })
    }

    fn attempt(&self, texts: &[&str]) -> std::result::Result<Vec<Vec<f64>>, Attempt> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req
            .send_json(RemoteRequest { texts })
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(format!("service answered {status}")));
        }
        if !(200..300).contains(&status) {
            return Err(Attempt::Fatal(Error::Transport {
                message: format!("service answered {status}"),
                retries_exhausted: false,
            }));
        }
        let body: RemoteResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Attempt::Fatal(Error::Contract(format!("malformed response: {e}"))))?;
        Ok(body.embeddings)
    }
}

impl Encoder for RemoteEncoder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn encode(&self, text: &str) -> Result<Embedding> {
        let mut out = self.encode_batch(&[text])?;
        Ok(out.remove(0))
    }

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        for t in texts {
            require_text(t)?;
        }
        let _slot = self.in_flight.acquire();
        let mut backoff = self.initial_backoff;
        let mut last = String::new();
        for attempt in 0..self.attempts {
            if attempt > 0 {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
            match self.attempt(texts) {
                Ok(vectors) => {
                    if vectors.len() != texts.len() {
                        return Err(Error::Contract(format!(
                            "sent {} texts, received {} embeddings",
                            texts.len(),
                            vectors.len()
                        )));
                    }
                    return vectors
                        .into_iter()
                        .map(|v| {
                            if v.len() != self.dimension {
                                Err(Error::Contract(format!(
                                    "embedding has dimension {}, expected {}",
                                    v.len(),
                                    self.dimension
                                )))
                            } else {
                                Embedding::new(v).map_err(|e| Error::Contract(e.to_string()))
                            }
                        })
                        .collect();
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(Error::Transport {
            message: format!("{} after {} attempts", last, self.attempts),
            retries_exhausted: true,
        })
    }

    fn spec(&self) -> EncoderSpec {
        self.spec.clone()
    }
}
