//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "SFADACKP"
//! version      u32
//! kind         u8       0 = network, 1 = gatn
//! num_classes  u32      0 for gatn checkpoints
//! config_hash  32 bytes SHA-256 of the producing configuration
//! count        u32
//! count times: name_len u32, name (utf-8), ndim u32, dims u64 * ndim, data f64 * numel
//! ```
//!
//! Encoding is a pure function of the contents, so save, load and save
//! again yields identical bytes.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use sfada_core::gatn::{Gatn, TauInit};
use sfada_core::model::{Conv2d, Linear, NetworkSplit};
use sfada_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SFADACKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Network,
    Gatn,
}

impl CheckpointKind {
    fn tag(self) -> u8 {
        match self {
            Self::Network => 0,
            Self::Gatn => 1,
        }
    }
}

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub num_classes: usize,
    pub config_hash: [u8; 32],
    pub parameters: Vec<(String, Tensor)>,
}

/// SHA-256 of arbitrary configuration bytes.
pub fn hash_bytes(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

impl Checkpoint {
    pub fn from_network(net: &NetworkSplit, config_hash: [u8; 32]) -> Self {
        Self {
            kind: CheckpointKind::Network,
            num_classes: net.num_classes(),
            config_hash,
            parameters: net.named_parameters().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        }
    }

    pub fn from_gatn(gatn: &Gatn, config_hash: [u8; 32]) -> Self {
        Self {
            kind: CheckpointKind::Gatn,
            num_classes: 0,
            config_hash,
            parameters: Gatn::parameter_names().into_iter().zip(gatn.parameters().into_iter().cloned()).collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.kind.tag());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.parameters.len() as u32).to_le_bytes());
        for (name, t) in &self.parameters {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// `path` only labels error messages.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported format version {version}")));
        }
        let kind = match r.take(1)?[0] {
            0 => CheckpointKind::Network,
            1 => CheckpointKind::Gatn,
            k => return Err(Error::format(path, format!("unknown checkpoint kind {k}"))),
        };
        let num_classes = r.u32()? as usize;
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u32()? as usize;
        let mut parameters = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(path, "parameter name is not utf-8"))?
                .to_owned();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.filter(|&n| n.saturating_mul(8) <= bytes.len()).ok_or_else(|| Error::format(path, "tensor too large"))?;
            let data = r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            parameters.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last parameter"));
        }
        Ok(Self { kind, num_classes, config_hash, parameters })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    fn take_param(&self, name: &str) -> Result<Tensor> {
        self.parameters
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Consistency(format!("checkpoint lacks parameter {name}")))
    }

    pub fn to_network(&self) -> Result<NetworkSplit> {
        if self.kind != CheckpointKind::Network {
            return Err(Error::Consistency("expected a network checkpoint, found a GATN checkpoint".into()));
        }
        let blocks = self.parameters.iter().filter(|(n, _)| n.starts_with("encoder.") && n.ends_with(".weight")).count();
        let mut encoder = Vec::with_capacity(blocks);
        for i in 0..blocks {
            let weight = self.take_param(&format!("encoder.block{i}.weight"))?;
            let bias = self.take_param(&format!("encoder.block{i}.bias"))?;
            if weight.ndim() != 4 || bias.shape() != [weight.shape()[0]] {
                return Err(Error::Consistency(format!("malformed encoder block {i}")));
            }
            let padding = weight.shape()[2] / 2;
            encoder.push(Conv2d { weight, bias, padding });
        }
        let weight = self.take_param("head.weight")?;
        let bias = self.take_param("head.bias")?;
        if weight.ndim() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::Consistency("malformed head".into()));
        }
        let net = NetworkSplit::from_parts(encoder, Linear { weight, bias })?;
        if net.num_classes() != self.num_classes {
            return Err(Error::Consistency(format!(
                "header declares {} classes, head has {}",
                self.num_classes,
                net.num_classes()
            )));
        }
        Ok(net)
    }

    pub fn to_gatn(&self) -> Result<Gatn> {
        if self.kind != CheckpointKind::Gatn {
            return Err(Error::Consistency("expected a GATN checkpoint, found a network checkpoint".into()));
        }
        let channels = self.take_param("gatn.tau.layer0.weight")?.shape().first().copied().unwrap_or(0);
        let mut gatn = Gatn::new(channels, TauInit::Identity, 0)?;
        let names = Gatn::parameter_names();
        for (name, slot) in names.iter().zip(gatn.parameters_mut()) {
            let t = self.take_param(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Consistency(format!("{name} has shape {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        Ok(gatn)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_network(net: &NetworkSplit, config_hash: [u8; 32], path: &Path) -> Result<()> {
    Checkpoint::from_network(net, config_hash).save(path)
}

pub fn load_network(path: &Path) -> Result<NetworkSplit> {
    Checkpoint::load(path)?.to_network()
}

pub fn save_gatn(gatn: &Gatn, config_hash: [u8; 32], path: &Path) -> Result<()> {
    Checkpoint::from_gatn(gatn, config_hash).save(path)
}

pub fn load_gatn(path: &Path) -> Result<Gatn> {
    Checkpoint::load(path)?.to_gatn()
}
