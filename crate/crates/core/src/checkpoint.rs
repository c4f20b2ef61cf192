//! Binary checkpoints.
//!
//! ```text
//! "PLNS" | u32 version | u64 header length | JSON header
//!        | f64 blocks in declared order
//!        | u64 trailer length | JSON trailer (alignment log, history)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentLog;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Architecture, Model, Parameters, BLOCK_NAMES};
use crate::trainer::History;

pub const MAGIC: &[u8; 4] = b"PLNS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    architecture: Architecture,
    config: TrainConfig,
    blocks: Vec<BlockInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Trailer {
    alignment: Option<AlignmentLog>,
    history: History,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub config: TrainConfig,
    pub history: History,
}

pub fn to_bytes(model: &Model, config: &TrainConfig, history: &History) -> Result<Vec<u8>> {
    let header = Header {
        version: FORMAT_VERSION,
        architecture: model.arch.clone(),
        config: config.clone(),
        blocks: model
            .params
            .blocks()
            .iter()
            .map(|(name, b)| BlockInfo {
                name: name.to_string(),
                len: b.len(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let trailer = serde_json::to_vec(&Trailer {
        alignment: model.alignment.clone(),
        history: history.clone(),
    })?;

    let mut out = Vec::with_capacity(32 + header.len() + 8 * model.params.num_scalars() + trailer.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, block) in model.params.blocks() {
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(trailer.len() as u64).to_le_bytes());
    out.extend_from_slice(&trailer);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} length overflows")))
    }

    fn json<T: for<'de> Deserialize<'de>>(&mut self, what: &str) -> Result<T> {
        let len = self.u64(what)?;
        serde_json::from_slice(self.take(len, what)?)
            .map_err(|e| Error::Checkpoint(format!("corrupt {what}: {e}")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header: Header = r.json("header")?;
    if header.version != version {
        return Err(Error::Checkpoint("header version disagrees with preamble".into()));
    }
    header
        .architecture
        .validate()
        .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;

    let mut params = Parameters::zeros(&header.architecture);
    let expected: Vec<(&str, usize)> = params.blocks().iter().map(|(n, b)| (*n, b.len())).collect();
    let declared: Vec<(&str, usize)> = header.blocks.iter().map(|b| (b.name.as_str(), b.len)).collect();
    if declared != expected {
        return Err(Error::Checkpoint(format!(
            "block table does not match the architecture (expected {} blocks starting {:?})",
            BLOCK_NAMES.len(),
            BLOCK_NAMES[0]
        )));
    }
    for (name, block) in params.blocks_mut() {
        let raw = r.take(8 * block.len(), name)?;
        for (v, chunk) in block.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    let trailer: Trailer = r.json("trailer")?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the trailer",
            bytes.len() - r.pos
        )));
    }

    Ok(Checkpoint {
        model: Model {
            arch: header.architecture,
            params,
            alignment: trailer.alignment,
            cache: None,
        },
        config: header.config,
        history: trailer.history,
    })
}

pub fn save(path: impl AsRef<Path>, model: &Model, config: &TrainConfig, history: &History) -> Result<()> {
    fs::write(path, to_bytes(model, config, history)?)?;
    Ok(())
}

/// Load a checkpoint, re-attaching the embedding cache named in its config.
pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut ckpt = from_bytes(&fs::read(path)?)?;
    if let Some(cache) = &ckpt.config.embedding_cache {
        ckpt.model = ckpt.model.with_cache(crate::encoder::load_cache(cache)?)?;
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::trainer::train;

    fn trained() -> (Model, TrainConfig, History) {
        let corpus = generate_synthetic(&SyntheticSpec::two_class(24, 4, 9)).unwrap();
        let cfg = TrainConfig {
            num_prototypes: 2,
            n_gram: 2,
            embed_dim: 4,
            hash_dim: 32,
            t_max: 40,
            mlp_hidden: 3,
            epochs: 1,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &corpus.train, None).unwrap();
        (out.model, cfg, out.history)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, cfg, history) = trained();
        let bytes = to_bytes(&model, &cfg, &history).unwrap();
        assert_eq!(&bytes[..4], b"PLNS");
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.model.params, model.params);
        assert_eq!(back.model.alignment, model.alignment);
        assert_eq!(back.config, cfg);
        assert_eq!(back.history, history);
        assert_eq!(to_bytes(&back.model, &back.config, &back.history).unwrap(), bytes);
    }

    #[test]
    fn truncation_is_detected_everywhere() {
        let (model, cfg, history) = trained();
        let bytes = to_bytes(&model, &cfg, &history).unwrap();
        for cut in [0, 3, 4, 7, 12, 20, bytes.len() / 2, bytes.len() - 9, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut at {cut}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let (model, cfg, history) = trained();
        let mut bytes = to_bytes(&model, &cfg, &history).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::Version { found: 99, expected: 1 })
        ));
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn corrupt_header_is_rejected() {
        let (model, cfg, history) = trained();
        let mut bytes = to_bytes(&model, &cfg, &history).unwrap();
        bytes[16] = b'!';
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }
}
