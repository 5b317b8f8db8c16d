//! Checkpoint directory: `manifest.json`, `weights.bin` (little-endian f32
//! blobs, concatenated in canonical parameter order) and `vocab.txt`.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::Stage;
use crate::error::{Error, Result};
use crate::fsutil::{sha256_hex, write_atomic};
use crate::model::{ModelConfig, VlmModel};
use crate::tensor::Tensor;
use crate::tokenizer::Vocabulary;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";
pub const VOCAB: &str = "vocab.txt";

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte key.
    pub seed: String,
    pub stream: u64,
    /// Decimal; JSON numbers cannot hold a u128 portably.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::CorruptManifest(format!("rng state: bad {what}"));
        let key: [u8; 32] = hex::decode(&self.seed)
            .ok()
            .and_then(|k| k.try_into().ok())
            .ok_or_else(|| bad("seed"))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("word_pos"))?;
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: VlmModel<f32>,
    pub vocab: Vocabulary,
    /// `None` for a freshly initialized model.
    pub stage: Option<Stage>,
    pub step: u64,
    pub seed: u64,
    pub rng: Option<RngState>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    stage: Option<Stage>,
    step: u64,
    seed: u64,
    rng: Option<RngState>,
    vocab_sha256: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    let mut weights = Vec::with_capacity(ckpt.model.num_scalars() * 4);
    let mut tensors = Vec::new();
    for (name, p) in ckpt.model.names().iter().zip(ckpt.model.params()) {
        let start = weights.len();
        for v in p.data() {
            weights.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: p.shape().to_vec(),
            offset: start as u64,
            length: (weights.len() - start) as u64,
            sha256: sha256_hex(&weights[start..]),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        stage: ckpt.stage,
        step: ckpt.step,
        seed: ckpt.seed,
        rng: ckpt.rng.clone(),
        vocab_sha256: ckpt.vocab.hash(),
        config: ckpt.model.config().clone(),
        tensors,
    };
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(WEIGHTS), &weights)?;
    write_atomic(&dir.join(VOCAB), ckpt.vocab.to_file_string().as_bytes())?;
    // manifest last, so a complete manifest implies complete blobs
    write_atomic(&dir.join(MANIFEST), &json)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let raw = read(MANIFEST)?;
    let value: Value =
        serde_json::from_slice(&raw).map_err(|e| Error::CorruptManifest(format!("{MANIFEST}: {e}")))?;
    let version = value
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::CorruptManifest("missing format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::VersionMismatch {
            found: version.try_into().unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest =
        serde_json::from_value(value).map_err(|e| Error::CorruptManifest(format!("{MANIFEST}: {e}")))?;

    let vocab_text = read(VOCAB)?;
    if sha256_hex(&vocab_text) != manifest.vocab_sha256 {
        return Err(Error::CorruptManifest("vocabulary hash mismatch".into()));
    }
    let vocab_text = String::from_utf8(vocab_text).map_err(|_| Error::CorruptManifest("vocab.txt is not UTF-8".into()))?;
    let vocab = Vocabulary::parse(&vocab_text).map_err(|e| Error::CorruptManifest(format!("{VOCAB}: {e}")))?;

    let weights = read(WEIGHTS)?;
    let mut expected_offset = 0u64;
    let mut names = Vec::with_capacity(manifest.tensors.len());
    let mut params = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let n: usize = t.shape.iter().product();
        if t.offset != expected_offset || t.length != 4 * n as u64 {
            return Err(Error::CorruptManifest(format!("tensor {} has inconsistent offset/length", t.name)));
        }
        let end = t.offset + t.length;
        if end > weights.len() as u64 {
            return Err(Error::CorruptManifest(format!(
                "{WEIGHTS} is truncated ({} bytes, tensor {} ends at {end})",
                weights.len(),
                t.name
            )));
        }
        let blob = &weights[t.offset as usize..end as usize];
        if sha256_hex(blob) != t.sha256 {
            return Err(Error::CorruptManifest(format!("checksum mismatch for tensor {}", t.name)));
        }
        let data = blob
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
            .collect();
        let tensor = Tensor::new(t.shape.clone(), data).map_err(|e| Error::CorruptManifest(e.to_string()))?;
        names.push(t.name.clone());
        params.push(tensor);
        expected_offset = end;
    }
    if expected_offset != weights.len() as u64 {
        return Err(Error::CorruptManifest(format!("{WEIGHTS} has trailing bytes")));
    }
    if vocab.len() != manifest.config.vocab_size {
        return Err(Error::CorruptManifest(format!(
            "vocabulary has {} tokens, config says {}",
            vocab.len(),
            manifest.config.vocab_size
        )));
    }
    if let Some(rng) = &manifest.rng {
        rng.restore()?;
    }
    let model = VlmModel::from_parts(manifest.config, names, params).map_err(|e| match e {
        Error::BadConfig(m) => Error::CorruptManifest(m),
        other => other,
    })?;
    Ok(Checkpoint {
        model,
        vocab,
        stage: manifest.stage,
        step: manifest.step,
        seed: manifest.seed,
        rng: manifest.rng,
    })
}
