//! Model persistence and single-word inference over a loaded model.
//!
//! Checkpoint layout: an 8-byte magic, a little-endian u32 header length, a
//! JSON header (version, config, vocabulary, lexicon format, seed,
//! metadata, and per-tensor byte offsets), then one raw blob of
//! little-endian f64 parameter values in the fixed tensor order. The header
//! carries a CRC-32 of the blob; loading verifies it and never coerces a
//! version mismatch.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::{decode_boundaries, LexiconFormat, PhoneTokenization, PhoneVocabulary};
use crate::network::{ModelConfig, ModelParameters, NetworkError};
use crate::tensor::{Rng, Tensor};
use crate::training::predict_labels;
use crate::{network, Real};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SYLCKPT\0";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("blob checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("bad header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("bad vocabulary: {0}")]
    Vocabulary(#[from] crate::lexicon::LexiconError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A trained model with everything needed to run it: config, vocabulary,
/// phone tokenization, parameters (CRF included), and provenance.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub vocabulary: PhoneVocabulary,
    pub lexicon_format: LexiconFormat,
    pub parameters: ModelParameters,
    pub training_seed: u64,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct TensorDesc {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    vocabulary: Vec<String>,
    lexicon_format: LexiconFormat,
    training_seed: u64,
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorDesc>,
    blob_len: u64,
    blob_crc32: u32,
}

/// Writes a checkpoint. Parameters are stored as f64 regardless of the
/// build's precision, so files are portable across builds.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let tensors = ckpt.parameters.tensors();
    let names = ModelParameters::tensor_names(ckpt.config.conv_blocks);
    debug_assert_eq!(tensors.len(), names.len());

    let mut blob = Vec::new();
    let mut descs = Vec::with_capacity(tensors.len());
    for (tensor, name) in tensors.iter().zip(names) {
        let offset = blob.len() as u64;
        for &v in tensor.data() {
            // widening no-op in f64 builds, a real conversion under
            // single-precision
            #[allow(clippy::unnecessary_cast)]
            blob.extend_from_slice(&(v as f64).to_le_bytes());
        }
        descs.push(TensorDesc {
            name,
            shape: tensor.shape().to_vec(),
            offset,
            byte_len: blob.len() as u64 - offset,
        });
    }
    let header = Header {
        format_version: ckpt.format_version,
        config: ckpt.config.clone(),
        vocabulary: ckpt.vocabulary.tokens().to_vec(),
        lexicon_format: ckpt.lexicon_format,
        training_seed: ckpt.training_seed,
        metadata: ckpt.metadata.clone(),
        tensors: descs,
        blob_len: blob.len() as u64,
        blob_crc32: crc32fast::hash(&blob),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    file.write_all(&blob)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAGIC.len() + 4 {
        return Err(CheckpointError::Truncated);
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let header_len =
        u32::from_le_bytes(bytes[MAGIC.len()..MAGIC.len() + 4].try_into().unwrap()) as usize;
    let header_start = MAGIC.len() + 4;
    let blob_start = header_start + header_len;
    if bytes.len() < blob_start {
        return Err(CheckpointError::Truncated);
    }
    let header: Header = serde_json::from_slice(&bytes[header_start..blob_start])?;
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: header.format_version,
            supported: FORMAT_VERSION,
        });
    }
    let blob = &bytes[blob_start..];
    if blob.len() as u64 != header.blob_len {
        return Err(CheckpointError::Truncated);
    }
    let computed = crc32fast::hash(blob);
    if computed != header.blob_crc32 {
        return Err(CheckpointError::ChecksumMismatch {
            stored: header.blob_crc32,
            computed,
        });
    }

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for desc in &header.tensors {
        let start = desc.offset as usize;
        let end = start + desc.byte_len as usize;
        if end > blob.len() || desc.byte_len % 8 != 0 {
            return Err(CheckpointError::Truncated);
        }
        let values: Vec<Real> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect();
        tensors.push(Tensor::from_vec(&desc.shape, values).map_err(NetworkError::Tensor)?);
    }
    let vocabulary = PhoneVocabulary::from_tokens(header.vocabulary)?;
    let parameters = ModelParameters::from_tensors(&header.config, vocabulary.size(), tensors)?;
    Ok(Checkpoint {
        format_version: header.format_version,
        config: header.config,
        vocabulary,
        lexicon_format: header.lexicon_format,
        parameters,
        training_seed: header.training_seed,
        metadata: header.metadata,
    })
}

/// One syllabified input line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyllabifiedLine {
    pub text: String,
    /// Phones that were not in the training vocabulary (fed to the model
    /// as UNK, echoed unchanged in the output).
    pub unknown_phones: Vec<String>,
    /// The decoder emitted a boundary after the final phone; rendered as
    /// no delimiter.
    pub trailing_boundary: bool,
}

impl Checkpoint {
    /// Splits a raw line into phones per this checkpoint's tokenization.
    /// Returns `None` for lines with no phones.
    pub fn tokenize_line(&self, line: &str) -> Option<Vec<String>> {
        let phones: Vec<String> = match self.lexicon_format.tokenization {
            PhoneTokenization::Char => line
                .trim()
                .chars()
                .map(|c| c.to_string())
                .collect(),
            PhoneTokenization::Whitespace => line
                .split_whitespace()
                .map(str::to_string)
                .collect(),
        };
        (!phones.is_empty()).then_some(phones)
    }

    /// Syllabifies one line of phones with this model. Unknown phones map
    /// to UNK for the network but keep their surface form in the output.
    pub fn syllabify_line(&self, line: &str) -> Result<Option<SyllabifiedLine>, NetworkError> {
        let Some(phones) = self.tokenize_line(line) else {
            return Ok(None);
        };
        let labels = self.predict_boundaries(&phones)?;
        let decoded = decode_boundaries(&phones, &labels, &self.lexicon_format);
        let unknown_phones = phones
            .iter()
            .filter(|p| self.vocabulary.index_of(p).is_none())
            .cloned()
            .collect();
        Ok(Some(SyllabifiedLine {
            text: decoded.text,
            unknown_phones,
            trailing_boundary: decoded.trailing_boundary,
        }))
    }

    /// Predicted boundary labels for a phone sequence.
    pub fn predict_boundaries(&self, phones: &[String]) -> Result<Vec<u8>, NetworkError> {
        let indices: Vec<usize> = phones.iter().map(|p| self.vocabulary.lookup(p)).collect();
        let true_len = indices.len();
        let mut rng = Rng::from_seed(0); // eval mode draws nothing
        let emissions = network::encode(
            &indices,
            true_len,
            &self.parameters,
            &self.config,
            network::Mode::Eval,
            &mut rng,
        )?;
        Ok(predict_labels(
            &emissions,
            &self.parameters.crf,
            self.config.output_head,
            true_len,
        ))
    }

    /// Eval-mode emissions for a probe index sequence; used by round-trip
    /// tests.
    pub fn probe_emissions(&self, indices: &[usize]) -> Result<Tensor, NetworkError> {
        let mut rng = Rng::from_seed(0);
        network::encode(
            indices,
            indices.len(),
            &self.parameters,
            &self.config,
            network::Mode::Eval,
            &mut rng,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::OutputHead;

    fn toy_checkpoint() -> Checkpoint {
        let config = ModelConfig {
            embedding_dim: 4,
            lstm_dim: 3,
            conv_blocks: 2,
            conv_filters: 3,
            conv_width: 2,
            pool_size: 2,
            dropout_rate: 0.25,
            output_head: OutputHead::Crf,
            batch_size: 8,
            max_epochs: 5,
            patience: 2,
            clip_threshold: 1.0,
        };
        let vocabulary = PhoneVocabulary::from_tokens(vec![
            "<pad>".into(),
            "<unk>".into(),
            "t".into(),
            "a".into(),
            "k".into(),
        ])
        .unwrap();
        let mut rng = Rng::from_seed(99);
        let parameters = ModelParameters::init(&config, vocabulary.size(), &mut rng);
        let mut metadata = BTreeMap::new();
        metadata.insert("preset".to_string(), "none".to_string());
        Checkpoint {
            format_version: FORMAT_VERSION,
            config,
            vocabulary,
            lexicon_format: LexiconFormat::default(),
            parameters,
            training_seed: 7,
            metadata,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = toy_checkpoint();
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.parameters, ckpt.parameters);
        assert_eq!(loaded.config, ckpt.config);
        assert_eq!(loaded.vocabulary, ckpt.vocabulary);
        assert_eq!(loaded.lexicon_format, ckpt.lexicon_format);
        assert_eq!(loaded.training_seed, ckpt.training_seed);
        assert_eq!(loaded.metadata, ckpt.metadata);
        // saving the loaded checkpoint reproduces identical bytes
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn roundtrip_preserves_probe_emissions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = toy_checkpoint();
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let probe = [2usize, 3, 4, 3];
        assert_eq!(
            ckpt.probe_emissions(&probe).unwrap(),
            loaded.probe_emissions(&probe).unwrap()
        );
    }

    #[test]
    fn corrupted_blob_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&toy_checkpoint(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xFF;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn version_bump_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut ckpt = toy_checkpoint();
        ckpt.format_version = FORMAT_VERSION + 1;
        save_checkpoint(&ckpt, &path).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::UnsupportedVersion { found, .. }) if found == FORMAT_VERSION + 1
        ));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&toy_checkpoint(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Truncated)
        ));
    }

    #[test]
    fn non_checkpoint_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not-a-model");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn syllabify_line_reports_unknown_phones() {
        let ckpt = toy_checkpoint();
        let result = ckpt.syllabify_line("taq").unwrap().unwrap();
        assert_eq!(result.unknown_phones, vec!["q".to_string()]);
        // the surface form survives even though the model saw UNK
        assert_eq!(result.text.replace('-', ""), "taq");
    }

    #[test]
    fn syllabify_line_skips_empty_input() {
        let ckpt = toy_checkpoint();
        assert_eq!(ckpt.syllabify_line("   ").unwrap(), None);
        assert_eq!(ckpt.syllabify_line("").unwrap(), None);
    }

    #[test]
    fn single_phone_word_is_echoed_unchanged() {
        let ckpt = toy_checkpoint();
        let result = ckpt.syllabify_line("a").unwrap().unwrap();
        assert_eq!(result.text, "a");
    }
}
