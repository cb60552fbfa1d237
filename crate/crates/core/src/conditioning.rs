//! Projection of reference embeddings into the generator's token space and
//! packaging of bimodal prompts for an external generation backend.

use std::fs;
use std::io;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::SelectionResult;
use crate::store::{dot_f64, EmbeddingStore};

pub const DEFAULT_INSTRUCTION: &str = "with age, gender and skin tone of:";
pub const DEFAULT_NEGATIVE_PROMPT: &str =
    "bad, disfigured, cropped, bad anatomy, poorly drawn hands, poorly drawn fingers";

pub const WEIGHTS_MAGIC: &[u8; 4] = b"FRGW";
pub const WEIGHTS_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4;

#[derive(Debug, Error)]
pub enum ConditioningError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in input")]
    NonFiniteInput,
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("no embedding for reference {0:?}")]
    MissingEmbedding(String),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    VersionMismatch(u16),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: u64, found: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Affine map `token = W v + b` with `W` of shape `d_token x d_visual`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorWeights {
    d_visual: usize,
    d_token: usize,
    w: Vec<f32>,
    b: Vec<f32>,
}

impl ProjectorWeights {
    pub fn new(
        d_visual: usize,
        d_token: usize,
        w: Vec<f32>,
        b: Vec<f32>,
    ) -> Result<Self, ConditioningError> {
        if d_visual == 0 || d_token == 0 {
            return Err(ConditioningError::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        if w.len() != d_token * d_visual {
            return Err(ConditioningError::DimensionMismatch {
                expected: d_token * d_visual,
                got: w.len(),
            });
        }
        if b.len() != d_token {
            return Err(ConditioningError::DimensionMismatch {
                expected: d_token,
                got: b.len(),
            });
        }
        if !w.iter().chain(&b).all(|x| x.is_finite()) {
            return Err(ConditioningError::NonFiniteInput);
        }
        Ok(Self {
            d_visual,
            d_token,
            w,
            b,
        })
    }

    pub fn identity(d: usize) -> Self {
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        Self::new(d, d, w, vec![0.0; d]).expect("identity is well formed")
    }

    pub fn d_visual(&self) -> usize {
        self.d_visual
    }

    pub fn d_token(&self) -> usize {
        self.d_token
    }

    pub fn bias(&self) -> &[f32] {
        &self.b
    }

    /// `W v + b`, accumulated in f64.
    pub fn apply(&self, v: &[f32]) -> Result<Vec<f32>, ConditioningError> {
        if v.len() != self.d_visual {
            return Err(ConditioningError::DimensionMismatch {
                expected: self.d_visual,
                got: v.len(),
            });
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(ConditioningError::NonFiniteInput);
        }
        Ok(self
            .w
            .chunks_exact(self.d_visual)
            .zip(&self.b)
            .map(|(row, &bias)| (dot_f64(row, v) + bias as f64) as f32)
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + 4 * (self.w.len() + self.b.len()));
        buf.extend_from_slice(WEIGHTS_MAGIC);
        buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.d_visual as u32).to_le_bytes());
        buf.extend_from_slice(&(self.d_token as u32).to_le_bytes());
        for x in self.w.iter().chain(&self.b) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ConditioningError> {
        if bytes.len() < 4 {
            return Err(ConditioningError::TruncatedFile {
                expected: HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != WEIGHTS_MAGIC {
            return Err(ConditioningError::BadMagic(magic));
        }
        if bytes.len() < HEADER_LEN {
            return Err(ConditioningError::TruncatedFile {
                expected: HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != WEIGHTS_VERSION {
            return Err(ConditioningError::VersionMismatch(version));
        }
        let d_visual = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let d_token = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let floats = d_token as u64 * d_visual as u64 + d_token as u64;
        let expected = HEADER_LEN as u64 + floats * 4;
        if bytes.len() as u64 != expected {
            return Err(ConditioningError::TruncatedFile {
                expected,
                found: bytes.len() as u64,
            });
        }
        let mut vals: Vec<f32> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let b = vals.split_off(d_token * d_visual);
        Self::new(d_visual, d_token, vals, b)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ConditioningError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConditioningError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn apply_projector(
    weights: &ProjectorWeights,
    v: &[f32],
) -> Result<Vec<f32>, ConditioningError> {
    weights.apply(v)
}

/// Prompt words, transfer instruction and the projected reference token,
/// which is always the last conditioning element.
#[derive(Debug, Clone, PartialEq)]
pub struct BimodalPrompt {
    pub prompt: String,
    pub instruction: String,
    pub reference_token: Vec<f32>,
}

impl BimodalPrompt {
    /// Text part of the conditioning: `"<prompt>, <instruction>"`, or just
    /// the prompt when the instruction is empty.
    pub fn full_text(&self) -> String {
        if self.instruction.is_empty() {
            self.prompt.clone()
        } else {
            format!("{}, {}", self.prompt, self.instruction)
        }
    }

    pub fn text_tokens(&self) -> Vec<&str> {
        self.prompt
            .split_whitespace()
            .chain(self.instruction.split_whitespace())
            .collect()
    }
}

pub fn make_bimodal_prompt(
    prompt: &str,
    token: Vec<f32>,
    instruction: &str,
) -> Result<BimodalPrompt, ConditioningError> {
    if prompt.trim().is_empty() {
        return Err(ConditioningError::EmptyPrompt);
    }
    Ok(BimodalPrompt {
        prompt: prompt.to_string(),
        instruction: instruction.to_string(),
        reference_token: token,
    })
}

/// Everything a generation backend needs for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningBundle {
    pub prompt: String,
    pub full_text: String,
    pub negative_prompt: Option<String>,
    pub reference_id: String,
    pub token: Vec<f32>,
    pub selection_seed: u64,
}

impl ConditioningBundle {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleOptions {
    pub instruction: String,
    pub negative_prompt: Option<String>,
}

impl Default for BundleOptions {
    fn default() -> Self {
        Self {
            instruction: DEFAULT_INSTRUCTION.to_string(),
            negative_prompt: Some(DEFAULT_NEGATIVE_PROMPT.to_string()),
        }
    }
}

/// One bundle per chosen reference, in selection order.
pub fn export_bundles(
    prompt: &str,
    selection: &SelectionResult,
    store: &EmbeddingStore,
    weights: &ProjectorWeights,
    options: &BundleOptions,
) -> Result<Vec<ConditioningBundle>, ConditioningError> {
    if prompt.trim().is_empty() {
        return Err(ConditioningError::EmptyPrompt);
    }
    selection
        .chosen
        .iter()
        .map(|c| {
            let v = store
                .embedding(&c.id)
                .ok_or_else(|| ConditioningError::MissingEmbedding(c.id.clone()))?;
            let bp = make_bimodal_prompt(prompt, weights.apply(v)?, &options.instruction)?;
            Ok(ConditioningBundle {
                prompt: prompt.to_string(),
                full_text: bp.full_text(),
                negative_prompt: options.negative_prompt.clone(),
                reference_id: c.id.clone(),
                token: bp.reference_token,
                selection_seed: selection.seed,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub image_id: String,
    pub status: String,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempt(s): {last}")]
    Unavailable { attempts: u32, last: String },
    #[error("backend rejected request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    BadResponse(String),
}

/// Anything that turns a bundle into an image.
pub trait GenerationBackend {
    fn generate(&self, bundle: &ConditioningBundle) -> Result<GenerateResponse, BackendError>;
}

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub timeout: Duration,
    pub retries: u32,
    pub retry_backoff: Duration,
}

impl HttpBackendConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            timeout: Duration::from_secs(60),
            retries: 2,
            retry_backoff: Duration::from_millis(250),
        }
    }
}

/// Client for `POST {base_url}/generate`. Connection failures and 5xx
/// responses are retried; 4xx responses are not.
pub struct HttpBackend {
    config: HttpBackendConfig,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        Self { config, agent }
    }
}

impl GenerationBackend for HttpBackend {
    fn generate(&self, bundle: &ConditioningBundle) -> Result<GenerateResponse, BackendError> {
        let url = format!("{}/generate", self.config.base_url.trim_end_matches('/'));
        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.config.retry_backoff);
            }
            match self.agent.post(&url).send_json(bundle) {
                Ok(resp) => {
                    return resp
                        .into_json::<GenerateResponse>()
                        .map_err(|e| BackendError::BadResponse(e.to_string()))
                }
                Err(ureq::Error::Status(status, resp)) if status < 500 => {
                    return Err(BackendError::Rejected {
                        status,
                        body: resp.into_string().unwrap_or_default(),
                    })
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(BackendError::Unavailable { attempts, last })
    }
}
