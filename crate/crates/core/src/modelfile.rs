//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "NFAD1"                  5-byte magic
//! u32 version              currently 1
//! u8  kind                 0 = flow, 1 = classifier
//! u32 n + n bytes          JSON architecture descriptor
//! u32 d + 2·d f64          standardizer means, then stds
//! u64 m + m f64            flat parameters
//! u32 crc32                over every preceding byte
//! ```
//!
//! The checksum is verified before anything else is parsed, so a truncated
//! or corrupted file reports [`Error::Checksum`].

use std::path::Path;

use crate::classifier::MlpClassifier;
use crate::dataeval::Standardizer;
use crate::flows::{FlowStack, StackDescriptor};
use crate::gradnet::LayerShape;
use crate::{Error, Result};

pub const MAGIC: &[u8; 5] = b"NFAD1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Flow(FlowStack),
    Classifier(MlpClassifier),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Flow(_) => "flow",
            Model::Classifier(_) => "classifier",
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Model::Flow(_) => 0,
            Model::Classifier(_) => 1,
        }
    }

    fn dim(&self) -> usize {
        match self {
            Model::Flow(f) => f.dim(),
            Model::Classifier(c) => c.dim(),
        }
    }
}

fn kind_name(tag: u8) -> &'static str {
    match tag {
        0 => "flow",
        1 => "classifier",
        _ => "unknown",
    }
}

/// A model plus the standardizer its inputs must go through.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub model: Model,
    pub standardizer: Standardizer,
}

impl ModelFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.standardizer.dim() != self.model.dim() {
            return Err(Error::Shape(format!(
                "standardizer has {} features, model expects {}",
                self.standardizer.dim(),
                self.model.dim()
            )));
        }
        let (descriptor, params) = match &self.model {
            Model::Flow(f) => (serde_json::to_vec(&f.descriptor()), f.params()),
            Model::Classifier(c) => (serde_json::to_vec(c.net().layers()), c.params().to_vec()),
        };
        let descriptor = descriptor.map_err(|e| Error::ModelFormat(e.to_string()))?;
        let mut out = Vec::with_capacity(64 + descriptor.len() + 8 * params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.model.tag());
        out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
        out.extend_from_slice(&descriptor);
        out.extend_from_slice(&(self.standardizer.dim() as u32).to_le_bytes());
        for v in self.standardizer.mean.iter().chain(&self.standardizer.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for v in &params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Checksum);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(Error::Checksum);
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(5)? != MAGIC {
            return Err(Error::ModelFormat("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let tag = r.u8()?;
        let desc_len = r.u32()? as usize;
        let desc = r.take(desc_len)?;
        let d = r.u32()? as usize;
        let mean = r.f64s(d)?;
        let std = r.f64s(d)?;
        let m = usize::try_from(r.u64()?).map_err(|_| Error::ModelFormat("parameter count overflow".into()))?;
        let params = r.f64s(m)?;
        if r.pos != body.len() {
            return Err(Error::ModelFormat(format!("{} trailing bytes", body.len() - r.pos)));
        }
        let bad_json = |e: serde_json::Error| Error::ModelFormat(format!("descriptor: {e}"));
        let model = match tag {
            0 => {
                let desc: StackDescriptor = serde_json::from_slice(desc).map_err(bad_json)?;
                Model::Flow(FlowStack::from_descriptor(&desc, &params)?)
            }
            1 => {
                let layers: Vec<LayerShape> = serde_json::from_slice(desc).map_err(bad_json)?;
                Model::Classifier(MlpClassifier::from_parts(layers, params)?)
            }
            t => return Err(Error::ModelFormat(format!("unknown kind tag {t}"))),
        };
        let standardizer = Standardizer { mean, std };
        if standardizer.dim() != model.dim() {
            return Err(Error::ModelFormat("standardizer and model dims differ".into()));
        }
        Ok(Self { model, standardizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Load and require a flow.
    pub fn load_flow(path: &Path) -> Result<(FlowStack, Standardizer)> {
        let f = Self::load(path)?;
        match f.model {
            Model::Flow(s) => Ok((s, f.standardizer)),
            other => Err(Error::KindMismatch { expected: "flow", found: other.kind() }),
        }
    }

    /// Load and require a classifier.
    pub fn load_classifier(path: &Path) -> Result<(MlpClassifier, Standardizer)> {
        let f = Self::load(path)?;
        match f.model {
            Model::Classifier(c) => Ok((c, f.standardizer)),
            other => Err(Error::KindMismatch { expected: "classifier", found: other.kind() }),
        }
    }
}

/// Kind tag stored in a file, without decoding the rest.
pub fn peek_kind(bytes: &[u8]) -> Option<&'static str> {
    (bytes.len() > 9 && &bytes[..5] == MAGIC).then(|| kind_name(bytes[9]))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::ModelFormat("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::ModelFormat("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}
