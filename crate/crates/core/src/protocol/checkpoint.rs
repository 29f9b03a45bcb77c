use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nets::{ArchDescriptor, ParamVector};
use crate::rng::StreamState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// First 8 bytes (little-endian) of the SHA-256 of a canonical config text.
pub fn config_hash(canonical: &str) -> u64 {
    let digest = Sha256::digest(canonical.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Trunk state at an epoch boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamVector,
    pub momentum: Vec<f32>,
    pub step: u64,
    pub data_rng: StreamState,
    pub augment_rng: StreamState,
    pub config_hash: u64,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let arch = self.params.arch().to_string();
        let values = self.params.values();
        let aux = self.params.aux();
        let mut out = Vec::with_capacity(64 + arch.len() + 4 * (2 * values.len() + aux.len()));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
        out.extend_from_slice(arch.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        self.momentum.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        out.extend_from_slice(&(aux.len() as u64).to_le_bytes());
        aux.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        for s in [self.data_rng, self.augment_rng] {
            s.iter().for_each(|w| out.extend_from_slice(&w.to_le_bytes()));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                what: "bad checkpoint magic".into(),
            });
        }
        let at = r.pos as u64;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: at,
                what: format!("unsupported checkpoint version {version}"),
            });
        }
        let config_hash = r.u64("config hash")?;
        let arch_len = r.u32("arch length")? as usize;
        let at = r.pos as u64;
        let arch_text = std::str::from_utf8(r.take(arch_len, "arch descriptor")?).map_err(|_| Error::Format {
            offset: at,
            what: "arch descriptor is not UTF-8".into(),
        })?;
        let arch: ArchDescriptor = arch_text.parse().map_err(|_| Error::Format {
            offset: at,
            what: format!("invalid arch descriptor `{arch_text}`"),
        })?;
        let step = r.u64("step")?;
        let at = r.pos as u64;
        let count = r.u64("parameter count")? as usize;
        if count != arch.param_count() {
            return Err(Error::Format {
                offset: at,
                what: format!("parameter count {count} does not match `{arch}`"),
            });
        }
        let values = r.f32s(count, "parameters")?;
        let momentum = r.f32s(count, "momentum")?;
        let aux_count = r.u64("statistics count")? as usize;
        let aux = r.f32s(aux_count, "statistics")?;
        let mut states = [[0u64; 4]; 2];
        for s in &mut states {
            for w in s.iter_mut() {
                *w = r.u64("rng state")?;
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                what: "trailing bytes after checkpoint".into(),
            });
        }
        Ok(Self {
            params: ParamVector::new(arch, values, aux)?,
            momentum,
            step,
            data_rng: states[0],
            augment_rng: states[1],
            config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            what: format!("truncated {what}"),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            what: format!("{what} count overflows"),
        })?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
