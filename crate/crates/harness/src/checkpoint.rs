//! The `WSNN` checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "WSNN" | version u32 | entry* | crc32 u32
//! entry = name_len u32 | name utf-8 | dtype u8 | rank u8 | dims u32[rank] | data
//! ```
//!
//! The CRC covers every byte before it. Checkpoints use the entry name prefixes
//! `meta.`, `param.`, `buffer.` and `optim.`; generated datasets use `data.`.

use std::path::Path;

use wsnn_core::nn::Layer;
use wsnn_core::optim::Optimizer;
use wsnn_core::tensor::{DType, Element};
use wsnn_core::Tensor;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 4] = b"WSNN";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;
const DTYPE_U8: u8 = 3;
const DTYPE_U64: u8 = 4;

/// One stored array.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
    U64 { shape: Vec<usize>, data: Vec<u64> },
}

impl Payload {
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => Self::F32(t.cast()),
            DType::F64 => Self::F64(t.cast()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Self::F32(t) => t.shape(),
            Self::F64(t) => t.shape(),
            Self::U8 { shape, .. } | Self::U64 { shape, .. } => shape,
        }
    }

    /// The tensor converted to `T` (exact when the stored dtype is `T`).
    pub fn to_tensor<T: Element>(&self) -> Option<Tensor<T>> {
        match self {
            Self::F32(t) => Some(t.cast()),
            Self::F64(t) => Some(t.cast()),
            _ => None,
        }
    }

    fn scalar_u64(v: u64) -> Self {
        Self::U64 {
            shape: vec![1],
            data: vec![v],
        }
    }

    fn text(s: &str) -> Self {
        Self::U8 {
            shape: vec![s.len()],
            data: s.as_bytes().to_vec(),
        }
    }
}

/// An ordered list of named arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub entries: Vec<(String, Payload)>,
}

impl Container {
    pub fn push(&mut self, name: impl Into<String>, payload: Payload) {
        self.entries.push((name.into(), payload));
    }

    pub fn get(&self, name: &str) -> Option<&Payload> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for (name, payload) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let code = match payload {
                Payload::F32(_) => DTYPE_F32,
                Payload::F64(_) => DTYPE_F64,
                Payload::U8 { .. } => DTYPE_U8,
                Payload::U64 { .. } => DTYPE_U64,
            };
            out.push(code);
            let shape = payload.shape();
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match payload {
                Payload::F32(t) => t
                    .as_slice()
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Payload::F64(t) => t
                    .as_slice()
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Payload::U8 { data, .. } => out.extend_from_slice(data),
                Payload::U64 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses container bytes. Magic, version and CRC are checked, in that
    /// order, before any entry is decoded.
    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let format = |reason: &str| HarnessError::CheckpointFormat {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(HarnessError::CheckpointMagic {
                path: path.to_path_buf(),
            });
        }
        if bytes.len() < 12 {
            return Err(format("file too short"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(HarnessError::CheckpointVersion {
                path: path.to_path_buf(),
                found: version,
                expected: VERSION,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(HarnessError::CheckpointCrc {
                path: path.to_path_buf(),
                stored,
                computed,
            });
        }

        let mut r = Reader { buf: body, pos: 8 };
        let mut entries = Vec::new();
        while r.pos < body.len() {
            let len = r.u32().ok_or_else(|| format("truncated entry name length"))? as usize;
            let name = r.take(len).ok_or_else(|| format("truncated entry name"))?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| format("entry name is not utf-8"))?;
            let code = r.take(1).ok_or_else(|| format("missing dtype"))?[0];
            let rank = r.take(1).ok_or_else(|| format("missing rank"))?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32().ok_or_else(|| format("truncated dims"))? as usize);
            }
            let n: usize = shape.iter().product();
            let width = match code {
                DTYPE_F32 => 4,
                DTYPE_F64 => 8,
                DTYPE_U8 => 1,
                DTYPE_U64 => 8,
                _ => return Err(format(&format!("entry '{name}' has unknown dtype code {code}"))),
            };
            let raw = n
                .checked_mul(width)
                .and_then(|b| r.take(b))
                .ok_or_else(|| format(&format!("entry '{name}' is truncated")))?;
            let payload = match code {
                DTYPE_F32 => Payload::F32(Tensor::from_vec(
                    &shape,
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )?),
                DTYPE_F64 => Payload::F64(Tensor::from_vec(
                    &shape,
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )?),
                DTYPE_U8 => Payload::U8 {
                    shape,
                    data: raw.to_vec(),
                },
                _ => Payload::U64 {
                    shape,
                    data: raw
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                },
            };
            entries.push((name, payload));
        }
        Ok(Self { entries })
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("wsnn.tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| HarnessError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::decode(path, &bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Model weights plus the training context they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: String,
    pub config_text: String,
    pub config_hash: u64,
    pub epoch: u64,
    pub best_metric: f64,
    /// `param.*`, `buffer.*` and `optim.*` entries.
    pub tensors: Vec<(String, Payload)>,
}

impl Checkpoint {
    /// Snapshot of `model` (and optionally its optimizer).
    pub fn capture<T: Element>(
        cfg: &ExperimentConfig,
        model: &dyn Layer<T>,
        optimizer: Option<&Optimizer<T>>,
        epoch: u64,
        best_metric: f64,
    ) -> Self {
        let mut tensors = Vec::new();
        for (n, p) in model.params() {
            tensors.push((format!("param.{n}"), Payload::from_tensor(&p.value)));
        }
        for (n, b) in model.buffers() {
            tensors.push((format!("buffer.{n}"), Payload::from_tensor(b)));
        }
        if let Some(opt) = optimizer {
            tensors.push(("optim.step".into(), Payload::scalar_u64(opt.steps())));
            for (n, t) in opt.state_tensors() {
                tensors.push((format!("optim.{n}"), Payload::from_tensor(&t)));
            }
        }
        Self {
            model: cfg.model.name().to_string(),
            config_text: cfg.to_text(),
            config_hash: cfg.hash(),
            epoch,
            best_metric,
            tensors,
        }
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::from_text(&self.config_text)
    }

    fn find(&self, name: &str) -> Option<&Payload> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    /// Copies every parameter and buffer into `model`; all must be present
    /// with matching shapes.
    pub fn restore<T: Element>(&self, model: &mut dyn Layer<T>) -> Result<()> {
        let mut missing = Vec::new();
        let check = |kind: &str, name: &str, shape: &[usize], missing: &mut Vec<String>| -> Option<Tensor<T>> {
            match self.find(&format!("{kind}.{name}")).and_then(|p| p.to_tensor::<T>()) {
                Some(t) if t.shape() == shape => Some(t),
                _ => {
                    missing.push(format!("{kind}.{name} {shape:?}"));
                    None
                }
            }
        };
        let mut params = Vec::new();
        for (n, p) in model.params() {
            params.push(check("param", &n, p.value.shape(), &mut missing));
        }
        let mut buffers = Vec::new();
        for (n, b) in model.buffers() {
            buffers.push(check("buffer", &n, b.shape(), &mut missing));
        }
        if !missing.is_empty() {
            return Err(HarnessError::CheckpointMismatch(format!(
                "{} checkpoint lacks {}",
                self.model,
                missing.join(", ")
            )));
        }
        for ((_, p), t) in model.params_mut().into_iter().zip(params) {
            p.value = t.expect("checked above");
        }
        for ((_, b), t) in model.buffers_mut().into_iter().zip(buffers) {
            *b = t.expect("checked above");
        }
        Ok(())
    }

    /// Copies the parameters and buffers whose name and shape match; returns
    /// the names that were loaded.
    pub fn load_matching<T: Element>(&self, model: &mut dyn Layer<T>) -> Result<Vec<String>> {
        let mut loaded = Vec::new();
        for (n, p) in model.params_mut() {
            if let Some(t) = self.find(&format!("param.{n}")).and_then(|p| p.to_tensor::<T>()) {
                if t.shape() == p.value.shape() {
                    p.value = t;
                    loaded.push(n);
                }
            }
        }
        for (n, b) in model.buffers_mut() {
            if let Some(t) = self.find(&format!("buffer.{n}")).and_then(|p| p.to_tensor::<T>()) {
                if t.shape() == b.shape() {
                    *b = t;
                    loaded.push(n);
                }
            }
        }
        if loaded.is_empty() {
            return Err(HarnessError::CheckpointMismatch(format!(
                "no tensor of the {} checkpoint fits the model",
                self.model
            )));
        }
        Ok(loaded)
    }

    /// Restores optimizer state saved by [`Checkpoint::capture`].
    pub fn restore_optimizer<T: Element>(&self, opt: &mut Optimizer<T>) -> Result<()> {
        let step = match self.find("optim.step") {
            Some(Payload::U64 { data, .. }) if data.len() == 1 => data[0],
            _ => return Err(HarnessError::CheckpointMismatch("no optimizer state".into())),
        };
        let state = self
            .tensors
            .iter()
            .filter_map(|(n, p)| {
                let key = n.strip_prefix("optim.")?;
                (key != "step").then(|| p.to_tensor::<T>().map(|t| (key.to_string(), t)))?
            })
            .collect();
        opt.load_state(step, state)?;
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.push("meta.model", Payload::text(&self.model));
        c.push("meta.config", Payload::text(&self.config_text));
        c.push("meta.config_hash", Payload::scalar_u64(self.config_hash));
        c.push("meta.epoch", Payload::scalar_u64(self.epoch));
        c.push(
            "meta.best_metric",
            Payload::F64(Tensor::from_vec(&[1], vec![self.best_metric]).expect("one element")),
        );
        c.entries.extend(self.tensors.iter().cloned());
        c
    }

    pub fn from_container(path: &Path, c: Container) -> Result<Self> {
        let format = |reason: String| HarnessError::CheckpointFormat {
            path: path.to_path_buf(),
            reason,
        };
        let text = |name: &str| match c.get(name) {
            Some(Payload::U8 { data, .. }) => {
                String::from_utf8(data.clone()).map_err(|_| format(format!("{name} is not utf-8")))
            }
            _ => Err(format(format!("missing {name}"))),
        };
        let int = |name: &str| match c.get(name) {
            Some(Payload::U64 { data, .. }) if data.len() == 1 => Ok(data[0]),
            _ => Err(format(format!("missing {name}"))),
        };
        let best_metric = match c.get("meta.best_metric") {
            Some(Payload::F64(t)) if t.len() == 1 => t.as_slice()[0],
            _ => return Err(format("missing meta.best_metric".into())),
        };
        Ok(Self {
            model: text("meta.model")?,
            config_text: text("meta.config")?,
            config_hash: int("meta.config_hash")?,
            epoch: int("meta.epoch")?,
            best_metric,
            tensors: c.entries.into_iter().filter(|(n, _)| !n.starts_with("meta.")).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(path, Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::default();
        c.push(
            "a",
            Payload::F32(Tensor::from_vec(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap()),
        );
        c.push(
            "b",
            Payload::F64(Tensor::from_vec(&[3], vec![0.1, 1e-300, -2.0]).unwrap()),
        );
        c.push(
            "c",
            Payload::U8 {
                shape: vec![2, 1],
                data: vec![0, 255],
            },
        );
        c.push(
            "d",
            Payload::U64 {
                shape: vec![1],
                data: vec![u64::MAX],
            },
        );
        c
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let c = sample();
        let bytes = c.encode();
        let back = Container::decode(Path::new("x"), &bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        match back.get("a").unwrap() {
            Payload::F32(t) => assert_eq!(t.as_slice()[1].to_bits(), (-0.0f32).to_bits()),
            _ => panic!("wrong dtype"),
        }
    }

    #[test]
    fn corruption_errors_are_distinct() {
        let p = Path::new("x");
        let bytes = sample().encode();

        let mut crc = bytes.clone();
        *crc.last_mut().unwrap() ^= 0x01;
        assert!(matches!(
            Container::decode(p, &crc),
            Err(HarnessError::CheckpointCrc { .. })
        ));

        let mut body = bytes.clone();
        body[20] ^= 0x80;
        assert!(matches!(
            Container::decode(p, &body),
            Err(HarnessError::CheckpointCrc { .. })
        ));

        let mut ver = bytes.clone();
        ver[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
        assert!(matches!(
            Container::decode(p, &ver),
            Err(HarnessError::CheckpointVersion { found, .. }) if found == VERSION + 1
        ));

        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(
            Container::decode(p, &magic),
            Err(HarnessError::CheckpointMagic { .. })
        ));
    }

    #[test]
    fn truncated_entry_is_a_format_error() {
        let mut c = Container::default();
        c.push(
            "x",
            Payload::U8 {
                shape: vec![4],
                data: vec![1, 2, 3, 4],
            },
        );
        let mut bytes = c.encode();
        bytes.truncate(bytes.len() - 6);
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            Container::decode(Path::new("x"), &bytes),
            Err(HarnessError::CheckpointFormat { .. })
        ));
    }
}
