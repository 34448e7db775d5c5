//! Versioned little-endian weight files.
//!
//! Layout: magic `MBOXCKPT`, `u32` version, length-prefixed network kind and
//! configuration JSON, `u32` layer count, then per layer a length-prefixed name,
//! `u32` rank and `u64` dims, then `u64` value count followed by raw `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::classifier::{ContextConfig, ContextNet, PostClassifierConfig, PostClassifierNet};
use super::params::{ParamEntry, ParamStore};
use super::proposer::{ProposerConfig, ProposerNet};
use crate::error::{Error, Result};
use crate::priors::{PriorOrigin, PriorSet};

pub const MAGIC: &[u8; 8] = b"MBOXCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config_json: String,
    pub params: ParamStore,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.config_json);
        out.extend_from_slice(&(self.params.layout.len() as u32).to_le_bytes());
        for e in &self.params.layout {
            put_str(&mut out, &e.name);
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.params.values.len() as u64).to_le_bytes());
        for v in &self.params.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let kind = r.string()?;
        let config_json = r.string()?;
        let layers = r.u32()? as usize;
        let mut params = ParamStore::default();
        for _ in 0..layers {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            params.alloc(&name, &shape);
        }
        let count = r.u64()? as usize;
        if count != params.len() {
            return Err(Error::Format(format!("layer table describes {} values, body has {count}", params.len())));
        }
        for v in params.values.iter_mut() {
            *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint body".into()));
        }
        Ok(Checkpoint { kind, config_json, params })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("checkpoint holds a {} network, expected {kind}", self.kind)));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
    }
}

/// Copies checkpoint weights into a freshly built network after checking that
/// the layer tables agree.
fn install(target: &mut ParamStore, loaded: ParamStore) -> Result<()> {
    let strip = |l: &[ParamEntry]| l.iter().map(|e| (e.name.clone(), e.shape.clone())).collect::<Vec<_>>();
    if strip(&target.layout) != strip(&loaded.layout) {
        return Err(Error::Format("checkpoint layer table does not match its configuration".into()));
    }
    target.values = loaded.values;
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProposerMeta {
    net: ProposerConfig,
    priors: PriorOrigin,
}

impl ProposerNet {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = ProposerMeta { net: self.config.clone(), priors: self.prior_origin.clone() };
        Checkpoint {
            kind: "proposer".into(),
            config_json: serde_json::to_string(&meta).expect("config serializes"),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<(Self, PriorSet)> {
        ck.expect_kind("proposer")?;
        let meta: ProposerMeta = serde_json::from_str(&ck.config_json)?;
        let priors = PriorSet::rebuild(&meta.priors)?;
        let mut net = ProposerNet::new(meta.net, &priors)?;
        install(&mut net.params, ck.params)?;
        Ok((net, priors))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: &Path) -> Result<(Self, PriorSet)> {
        ProposerNet::from_checkpoint(Checkpoint::read(path)?)
    }
}

impl PostClassifierNet {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: "postclassifier".into(),
            config_json: serde_json::to_string(&self.config).expect("config serializes"),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.expect_kind("postclassifier")?;
        let config: PostClassifierConfig = serde_json::from_str(&ck.config_json)?;
        let mut net = PostClassifierNet::new(config)?;
        install(&mut net.params, ck.params)?;
        Ok(net)
    }
}

impl ContextNet {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: "context".into(),
            config_json: serde_json::to_string(&self.config).expect("config serializes"),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.expect_kind("context")?;
        let config: ContextConfig = serde_json::from_str(&ck.config_json)?;
        let mut net = ContextNet::new(config)?;
        install(&mut net.params, ck.params)?;
        Ok(net)
    }
}

/// A post-classifier bundled with the context network whose features it consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierBundle {
    pub classifier: PostClassifierNet,
    pub context: ContextNet,
}

impl ClassifierBundle {
    /// Both networks in one file: the two checkpoints back to back, each length-prefixed.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for part in [self.classifier.to_checkpoint().to_bytes(), self.context.to_checkpoint().to_bytes()] {
            out.extend_from_slice(&(part.len() as u64).to_le_bytes());
            out.extend_from_slice(&part);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let n = r.u64()? as usize;
        let classifier = PostClassifierNet::from_checkpoint(Checkpoint::from_bytes(r.take(n)?)?)?;
        let n = r.u64()? as usize;
        let context = ContextNet::from_checkpoint(Checkpoint::from_bytes(r.take(n)?)?)?;
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after classifier bundle".into()));
        }
        Ok(ClassifierBundle { classifier, context })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        ClassifierBundle::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::{build_grid_priors, GridSpec};

    fn small() -> (ProposerNet, PriorSet) {
        let priors = build_grid_priors(&[GridSpec::with_default_templates(2).unwrap()], true).unwrap();
        let cfg = ProposerConfig { input_size: 16, block_channels: [2, 2, 2, 3], reduce_channels: [1, 1, 1], taper_channels: 2, ..Default::default() };
        (ProposerNet::new(cfg, &priors).unwrap(), priors)
    }

    #[test]
    fn proposer_round_trip() {
        let (net, priors) = small();
        let bytes = net.to_checkpoint().to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let (back, p2) = ProposerNet::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, net);
        assert_eq!(p2, priors);
        assert_eq!(back.to_checkpoint().to_bytes(), bytes);
    }

    #[test]
    fn value_bytes_are_little_endian_f64() {
        let (net, _) = small();
        let bytes = net.to_checkpoint().to_bytes();
        let body = &bytes[bytes.len() - 8 * net.params.len()..];
        for (chunk, v) in body.chunks_exact(8).zip(&net.params.values) {
            assert_eq!(f64::from_le_bytes(chunk.try_into().unwrap()).to_bits(), v.to_bits());
        }
    }

    #[test]
    fn rejects_corruption() {
        let (net, _) = small();
        let bytes = net.to_checkpoint().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().is_format());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err().is_format());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(Checkpoint::from_bytes(&v2).is_err());
        let ck = PostClassifierNet::new(PostClassifierConfig::default()).unwrap().to_checkpoint();
        assert!(ProposerNet::from_checkpoint(ck).is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let b = ClassifierBundle {
            classifier: PostClassifierNet::new(PostClassifierConfig::default()).unwrap(),
            context: ContextNet::new(ContextConfig::default()).unwrap(),
        };
        assert_eq!(ClassifierBundle::from_bytes(&b.to_bytes()).unwrap(), b);
    }
}
