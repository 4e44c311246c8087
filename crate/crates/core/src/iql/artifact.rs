//! Serialized policy: JSON header, flat little-endian f64 weights and a
//! SHA-256 trailer over everything before it.
//!
//! ```text
//! b"RGVLMPOL" | header_len: u64 | header JSON | n_weights: u64 | weights: n x f64 | sha256: 32 bytes
//! ```

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::features::GridEncoder;
use super::losses::Params;
use super::mlp::{Mlp, MlpShape};
use super::{greedy_action, sample_action, ActMode, Hyper};
use crate::dataset::{FeatureEncoder, Instruction, LabelSource};
use crate::env::{Action, GridState};

const MAGIC: &[u8; 8] = b"RGVLMPOL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a policy artifact (bad magic bytes)")]
    Magic,
    #[error("artifact checksum mismatch: the file is corrupted or truncated")]
    Checksum,
    #[error("malformed artifact: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub hidden: [usize; 2],
    pub activation: String,
    /// Order in which the networks' weights appear in the weight array.
    pub nets: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub state: usize,
    pub instruction: usize,
    pub actions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderGeometry {
    pub width: i32,
    pub height: i32,
    pub max_clauses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub format_version: u32,
    pub arch: Arch,
    pub dims: Dims,
    pub vocab: Vec<String>,
    pub encoder: EncoderGeometry,
    pub hyper: Hyper,
    pub seed: u64,
    pub label_source: Option<LabelSource>,
    pub updates: usize,
}

/// A trained (or freshly initialized) policy with everything needed to act.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyArtifact {
    pub header: ArtifactHeader,
    pub encoder: GridEncoder,
    pub params: Params<f32>,
}

impl PolicyArtifact {
    pub fn new(
        encoder: GridEncoder,
        hyper: Hyper,
        label_source: Option<LabelSource>,
        updates: usize,
        params: Params<f32>,
    ) -> Self {
        let header = ArtifactHeader {
            format_version: FORMAT_VERSION,
            arch: Arch {
                hidden: hyper.hidden,
                activation: "tanh".into(),
                nets: ["v", "q", "q_target", "policy"].map(String::from).to_vec(),
            },
            dims: Dims {
                state: encoder.state_dim(),
                instruction: encoder.instruction_dim(),
                actions: Action::COUNT,
            },
            vocab: encoder.vocab.clone(),
            encoder: EncoderGeometry {
                width: encoder.width,
                height: encoder.height,
                max_clauses: encoder.max_clauses,
            },
            seed: hyper.seed,
            hyper,
            label_source,
            updates,
        };
        PolicyArtifact { header, encoder, params }
    }

    fn nets(&self) -> [&Mlp<f32>; 4] {
        [&self.params.v, &self.params.q, &self.params.q_target, &self.params.policy]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let n: usize = self.nets().iter().map(|m| m.params.len()).sum();
        let mut out = Vec::with_capacity(8 + 8 + header.len() + 8 + n * 8 + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for net in self.nets() {
            for &w in &net.params {
                out.extend_from_slice(&(w as f64).to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArtifactError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(ArtifactError::Magic);
        }
        if bytes.len() < MAGIC.len() + 8 + 8 + 32 {
            return Err(ArtifactError::Checksum);
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(ArtifactError::Checksum);
        }
        let malformed = |m: &str| ArtifactError::Malformed(m.to_string());
        let mut pos = MAGIC.len();
        let read_u64 = |pos: &mut usize| -> Result<u64, ArtifactError> {
            let s = body.get(*pos..*pos + 8).ok_or_else(|| malformed("truncated length field"))?;
            *pos += 8;
            Ok(u64::from_le_bytes(s.try_into().expect("8 bytes")))
        };
        let hlen = read_u64(&mut pos)? as usize;
        let hbytes = body.get(pos..pos + hlen).ok_or_else(|| malformed("truncated header"))?;
        pos += hlen;
        let header: ArtifactHeader =
            serde_json::from_slice(hbytes).map_err(|e| ArtifactError::Malformed(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(ArtifactError::Malformed(format!(
                "format version {} (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let n = read_u64(&mut pos)? as usize;
        let wbytes = body.get(pos..).ok_or_else(|| malformed("truncated weights"))?;
        if wbytes.len() != n * 8 {
            return Err(malformed("weight count does not match payload"));
        }
        let weights: Vec<f32> = wbytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32)
            .collect();

        let encoder = GridEncoder {
            width: header.encoder.width,
            height: header.encoder.height,
            vocab: header.vocab.clone(),
            max_clauses: header.encoder.max_clauses,
        };
        if encoder.state_dim() != header.dims.state || encoder.instruction_dim() != header.dims.instruction {
            return Err(malformed("encoder dimensions disagree with header dims"));
        }
        let input = header.dims.state + header.dims.instruction;
        let shape = |output| MlpShape { input, hidden: header.arch.hidden, output };
        let shapes = [shape(1), shape(Action::COUNT), shape(Action::COUNT), shape(Action::COUNT)];
        if shapes.iter().map(|s| s.param_count()).sum::<usize>() != n {
            return Err(malformed("weight count does not match architecture"));
        }
        let mut off = 0;
        let mut take = |s: MlpShape| {
            let m = Mlp { shape: s, params: weights[off..off + s.param_count()].to_vec() };
            off += s.param_count();
            m
        };
        let params = Params { v: take(shapes[0]), q: take(shapes[1]), q_target: take(shapes[2]), policy: take(shapes[3]) };
        Ok(PolicyArtifact { header, encoder, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), ArtifactError> {
        let io = |source| ArtifactError::Io { path: path.display().to_string(), source };
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, ArtifactError> {
        let bytes = fs::read(path).map_err(|source| ArtifactError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }

    /// Policy logits for one state and instruction.
    pub fn logits(&self, state: &GridState, instruction: &Instruction) -> Vec<f32> {
        let mut x = Vec::with_capacity(self.header.dims.state + self.header.dims.instruction);
        self.encoder.encode_state(state, &instruction.text, &mut x);
        self.encoder.encode_instruction(&instruction.text, &mut x);
        self.params.policy.forward(&x, 1).out
    }

    pub fn act<R: Rng + ?Sized>(
        &self,
        state: &GridState,
        instruction: &Instruction,
        mode: ActMode,
        rng: &mut R,
    ) -> Action {
        let logits = self.logits(state, instruction);
        let id = match mode {
            ActMode::Greedy => greedy_action(&logits),
            ActMode::Sample => sample_action(&logits, rng),
        };
        Action::from_id(id).expect("policy has one logit per action")
    }
}
