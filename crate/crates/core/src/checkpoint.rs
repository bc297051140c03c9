//! Model checkpoint container.
//!
//! A checkpoint starts with one text line,
//! `# ccmplus checkpoint v1 config-hash=<sha256 hex>\n`, followed by a
//! little-endian binary body:
//!
//! ```text
//! magic     8 bytes  "CCMPCKPT"
//! version   u32      1
//! model     u32 count, then count x (str key, str value)
//! echo      str      resolved run configuration, verbatim
//! services  u32 count, then count x str
//! params    u32 count, then count x array
//! adam      u64 step, u32 count, then count x (array first, array second)
//! causal    u8 present; if 1: u64 iteration, f64 momentum, array
//!
//! str   = u32 byte length + UTF-8 bytes
//! array = str name, u32 rank, rank x u64 extent, extent-product x f64
//! ```
//!
//! Adam moments are unnamed; they follow the parameter order.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::ccmplus::CausalMatrix;
use crate::error::{Error, Result};
use crate::forecaster::{ModelConfig, ModelParams};
use crate::numeric::{AdamMoments, DenseArray};

const MAGIC: &[u8; 8] = b"CCMPCKPT";
const VERSION: u32 = 1;
const HEADER_PREFIX: &str = "# ccmplus checkpoint v1 config-hash=";

/// Lowercase hex SHA-256 of `text`.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub service_ids: Vec<String>,
    pub config_echo: String,
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        config_hash(&self.config_echo)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes.extend_from_slice(HEADER_PREFIX.as_bytes());
        w.bytes.extend_from_slice(self.config_hash().as_bytes());
        w.bytes.push(b'\n');
        w.bytes.extend_from_slice(MAGIC);
        w.u32(VERSION);

        let pairs = self.params.config.to_pairs();
        w.u32(pairs.len() as u32);
        for (k, v) in &pairs {
            w.str(k);
            w.str(v);
        }
        w.str(&self.config_echo);
        w.u32(self.service_ids.len() as u32);
        for s in &self.service_ids {
            w.str(s);
        }

        let named = self.params.named_params();
        w.u32(named.len() as u32);
        for (name, a) in &named {
            w.array(name, a);
        }
        w.u64(self.params.optimizer.step);
        w.u32(self.params.optimizer.moments.len() as u32);
        for ((name, _), m) in named.iter().zip(&self.params.optimizer.moments) {
            w.array(&format!("{name}.first"), &m.first);
            w.array(&format!("{name}.second"), &m.second);
        }
        match &self.params.causal {
            None => w.bytes.push(0),
            Some(c) => {
                w.bytes.push(1);
                w.u64(c.iteration);
                w.f64(c.momentum);
                w.array("causal", &c.raw);
            }
        }
        w.bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..newline])
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let declared_hash = header
            .strip_prefix(HEADER_PREFIX)
            .ok_or_else(|| Error::Checkpoint(format!("unrecognized header {header:?}")))?
            .to_string();
        let mut r = Reader {
            bytes: &bytes[newline + 1..],
            pos: 0,
        };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n_pairs = r.u32()? as usize;
        let pairs = (0..n_pairs)
            .map(|_| Ok((r.str()?, r.str()?)))
            .collect::<Result<Vec<_>>>()?;
        let config = ModelConfig::from_pairs(&pairs)?;
        let config_echo = r.str()?;
        if config_hash(&config_echo) != declared_hash {
            return Err(Error::Checkpoint("config hash does not match the stored configuration".into()));
        }
        let n_services = r.u32()? as usize;
        let service_ids = (0..n_services).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        if service_ids.len() != config.n_services {
            return Err(Error::Checkpoint("service list disagrees with the model config".into()));
        }

        let mut params = ModelParams::init(config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = params
            .named_params()
            .iter()
            .map(|(n, a)| (n.clone(), a.shape().to_vec()))
            .collect();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {count}",
                expected.len()
            )));
        }
        let mut loaded = Vec::with_capacity(count);
        for (name, shape) in &expected {
            let (got_name, array) = r.array()?;
            check_array(name, shape, &got_name, &array)?;
            loaded.push(array);
        }
        for (slot, array) in params.params_mut().into_iter().zip(loaded) {
            *slot = array;
        }

        params.optimizer.step = r.u64()?;
        let n_moments = r.u32()? as usize;
        if n_moments != expected.len() {
            return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
        }
        let mut moments = Vec::with_capacity(n_moments);
        for (name, shape) in &expected {
            let (n1, first) = r.array()?;
            check_array(&format!("{name}.first"), shape, &n1, &first)?;
            let (n2, second) = r.array()?;
            check_array(&format!("{name}.second"), shape, &n2, &second)?;
            moments.push(AdamMoments { first, second });
        }
        params.optimizer.moments = moments;

        params.causal = match r.take(1)?[0] {
            0 => None,
            1 => {
                let iteration = r.u64()?;
                let momentum = r.f64()?;
                let (name, raw) = r.array()?;
                let n = params.config.n_services;
                check_array("causal", &[n, n], &name, &raw)?;
                Some(CausalMatrix {
                    raw,
                    iteration,
                    momentum,
                })
            }
            other => return Err(Error::Checkpoint(format!("bad causal flag {other}"))),
        };
        if r.pos != r.bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            params,
            service_ids,
            config_echo,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn check_array(name: &str, shape: &[usize], got_name: &str, array: &DenseArray) -> Result<()> {
    if got_name != name {
        return Err(Error::Checkpoint(format!("expected array {name}, found {got_name}")));
    }
    if array.shape() != shape {
        return Err(Error::Checkpoint(format!(
            "array {name} has shape {:?}, expected {shape:?}",
            array.shape()
        )));
    }
    Ok(())
}

#[derive(Default)]
struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes.extend_from_slice(s.as_bytes());
    }

    fn array(&mut self, name: &str, a: &DenseArray) {
        self.str(name);
        self.u32(a.rank() as u32);
        for &d in a.shape() {
            self.u64(d as u64);
        }
        for &v in a.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }

    fn array(&mut self) -> Result<(String, DenseArray)> {
        let name = self.str()?;
        let rank = self.u32()? as usize;
        if !(1..=4).contains(&rank) {
            return Err(Error::Checkpoint(format!("array {name} has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| Ok(self.u64()? as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&l| l.checked_mul(8).is_some_and(|b| b <= self.bytes.len() - self.pos))
            .ok_or_else(|| Error::Checkpoint(format!("array {name} overruns the file")))?;
        let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        let array = DenseArray::new(&shape, data).map_err(|e| Error::Checkpoint(format!("array {name}: {e}")))?;
        Ok((name, array))
    }
}
