//! Binary checkpoints:
//!
//! ```text
//! magic "DSTKCKPT" | version u32 | sha256(config.canonical()) [32] | count u64 | count × f64
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::{Architecture, ModelParameters};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSTKCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 32 + 8;

fn fingerprint(arch: &Architecture) -> [u8; 32] {
    Sha256::digest(arch.config().canonical().as_bytes()).into()
}

pub fn save(params: &ModelParameters, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * params.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&fingerprint(params.arch()));
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads a checkpoint written for `arch`; any other architecture is rejected.
pub fn load(path: &Path, arch: &Arc<Architecture>) -> Result<ModelParameters> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let parse = |message: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: message.to_string(),
    };
    if bytes.len() < HEADER_LEN {
        return Err(parse("truncated checkpoint header"));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(parse("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    if bytes[12..44] != fingerprint(arch) {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{} was written for a different architecture than `{}`",
            path.display(),
            arch.config().canonical()
        )));
    }
    let count = u64::from_le_bytes(bytes[44..52].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    if count != arch.num_params() || body.len() != 8 * count {
        return Err(parse("parameter count does not match file size or architecture"));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ModelParameters::from_values(arch, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::student::ModelConfig;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let arch = Architecture::new(ModelConfig::default()).unwrap();
        let p = ModelParameters::init(&arch, 9);
        save(&p, &path).unwrap();
        assert_eq!(load(&path, &arch).unwrap(), p);
    }

    #[test]
    fn rejects_other_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let arch = Architecture::new(ModelConfig::default()).unwrap();
        save(&ModelParameters::init(&arch, 1), &path).unwrap();
        let other = Architecture::new(ModelConfig {
            hidden_size: 32,
            ..ModelConfig::default()
        })
        .unwrap();
        assert!(matches!(load(&path, &other), Err(Error::IncompatibleCheckpoint(_))));
    }

    #[test]
    fn empty_and_garbage_files_are_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let arch = Architecture::new(ModelConfig::tiny()).unwrap();
        let empty = dir.path().join("empty");
        std::fs::write(&empty, b"").unwrap();
        assert!(matches!(load(&empty, &arch), Err(Error::Parse { .. })));
        let junk = dir.path().join("junk");
        std::fs::write(&junk, vec![7u8; 100]).unwrap();
        assert!(matches!(load(&junk, &arch), Err(Error::Parse { .. })));
    }
}
