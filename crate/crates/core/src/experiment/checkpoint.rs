//! Little-endian binary checkpoints written through a temporary file and an
//! atomic rename.
//!
//! Layout: magic `PCGDCKPT`, format version (u32), player count (u32) and
//! block sizes (u64 each), architecture and method strings (u32 length +
//! UTF-8), master seed and step (u64), then three f64 arrays (u64 length +
//! values): parameters, the previous inner-solve solution and baseline state,
//! followed by the sampling-pass counter (u64) and an FNV-1a checksum (u64)
//! of everything before it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PCGDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dims: Vec<usize>,
    /// Game or policy-network descriptor the parameters belong to.
    pub architecture: String,
    pub method: String,
    pub seed: u64,
    /// Optimizer steps completed.
    pub step: u64,
    pub params: Vec<f64>,
    /// Warm-start vector of the inner solve.
    pub previous_solution: Vec<f64>,
    pub baseline_state: Vec<f64>,
    pub sampling_passes: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    out.extend((v.len() as u64).to_le_bytes());
    for x in v {
        out.extend(x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
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

    fn len(&mut self, width: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.saturating_mul(width) > self.bytes.len() - self.pos {
            return Err(Error::Checkpoint("length field exceeds the file".into()));
        }
        Ok(n)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * (self.params.len() + self.previous_solution.len()));
        out.extend(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend((self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend((*d as u64).to_le_bytes());
        }
        put_str(&mut out, &self.architecture);
        put_str(&mut out, &self.method);
        out.extend(self.seed.to_le_bytes());
        out.extend(self.step.to_le_bytes());
        put_f64s(&mut out, &self.params);
        put_f64s(&mut out, &self.previous_solution);
        put_f64s(&mut out, &self.baseline_state);
        out.extend(self.sampling_passes.to_le_bytes());
        let sum = fnv1a(&out);
        out.extend(sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if fnv1a(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
            return Err(Error::Checkpoint("checksum mismatch (corrupt or truncated file)".into()));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let players = r.u32()? as usize;
        let dims = (0..players).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let architecture = r.string()?;
        let method = r.string()?;
        let seed = r.u64()?;
        let step = r.u64()?;
        let params = r.f64s()?;
        let previous_solution = r.f64s()?;
        let baseline_state = r.f64s()?;
        let sampling_passes = r.u64()?;
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        if dims.iter().sum::<usize>() != params.len() {
            return Err(Error::Checkpoint("block sizes do not add up to the parameter count".into()));
        }
        Ok(Self {
            dims,
            architecture,
            method,
            seed,
            step,
            params,
            previous_solution,
            baseline_state,
            sampling_passes,
        })
    }

    /// Write atomically: the bytes go to a sibling temporary file which is
    /// synced and then renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes(), None)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Error unless this checkpoint was written for `architecture` with
    /// blocks `dims`.
    pub fn check_compatible(&self, dims: &[usize], architecture: &str) -> Result<()> {
        if self.dims != dims || self.architecture != architecture {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} {:?}, expected {} {:?}",
                self.architecture, self.dims, architecture, dims
            )));
        }
        Ok(())
    }
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// `fail_after`: simulate a crash after that many bytes reached the
/// temporary file (fault-injection hook for tests).
pub(crate) fn write_atomic(path: &Path, bytes: &[u8], fail_after: Option<usize>) -> Result<()> {
    let tmp = temp_path(path);
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    if let Some(n) = fail_after {
        file.write_all(&bytes[..n.min(bytes.len())]).map_err(|e| Error::io(&tmp, e))?;
        return Err(Error::io(
            &tmp,
            std::io::Error::new(std::io::ErrorKind::Interrupted, "injected crash during checkpoint write"),
        ));
    }
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
