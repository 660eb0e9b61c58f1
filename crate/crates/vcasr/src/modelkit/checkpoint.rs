//! Model checkpoints: magic "VCKP", format version, a length-prefixed flat
//! configuration text, then named tensors (name, rank, dims, row-major
//! little-endian f32 payload). Save -> load -> save round-trips bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::modelkit::params::Params;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(config_text: impl Into<String>) -> Self {
        Checkpoint { config_text: config_text.into(), tensors: Vec::new() }
    }

    /// Append every tensor of `params`, each name prefixed with `prefix`.
    pub fn push_params(&mut self, prefix: &str, params: &Params) {
        for (_, name, t) in params.iter() {
            self.tensors.push((format!("{prefix}{name}"), t.clone()));
        }
    }

    /// The checkpoint as it reads back after saving: every value rounded to
    /// storage precision. Pipelines that decode right after training go
    /// through this so in-memory results match the artifact on disk exactly.
    pub fn storage_rounded(&self) -> Checkpoint {
        Checkpoint {
            config_text: self.config_text.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| {
                    (name.clone(), Tensor::from_fn(t.rows(), t.cols(), |r, c| t.get(r, c) as f32 as f64))
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config_text.as_bytes();
        buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        buf.extend_from_slice(cfg);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.extend_from_slice(&2u32.to_le_bytes());
            buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, pos: 0, what: "checkpoint" };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(cfg_len)?.to_vec())
            .map_err(|_| Error::Format("checkpoint config text is not UTF-8".into()))?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u32()?;
            if rank != 2 {
                return Err(Error::Format(format!("tensor {name}: unsupported rank {rank}")));
            }
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let b = r.take(4)?;
                data.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
            }
            tensors.push((name, Tensor::from_vec(rows, cols, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint payload".into()));
        }
        Ok(Checkpoint { config_text, tensors })
    }

    /// Copy tensors with the given prefix into `params` (prefix stripped).
    /// Every parameter must be present with a matching shape.
    pub fn apply_to(&self, prefix: &str, params: &mut Params) -> Result<()> {
        let mut applied = 0usize;
        for (name, t) in &self.tensors {
            if let Some(bare) = name.strip_prefix(prefix) {
                if prefix.is_empty() && bare.contains("first.") {
                    continue;
                }
                params.load_tensor(bare, t.clone())?;
                applied += 1;
            }
        }
        if applied != params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {applied} of {} parameters with prefix '{prefix}'",
                params.len()
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("truncated {}", self.what)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelkit::params::xavier;
    use crate::seeds;

    #[test]
    fn save_load_save_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = seeds::rng(1, "ckpt");
        let mut ck = Checkpoint::new("model = test\nhidden = 4\n");
        ck.tensors.push(("a.w".into(), xavier(3, 5, &mut rng)));
        ck.tensors.push(("a.b".into(), Tensor::zeros(1, 5)));
        let p1 = dir.path().join("one.ckpt");
        let p2 = dir.path().join("two.ckpt");
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        assert_eq!(loaded.config_text, ck.config_text);
        loaded.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn apply_restores_values_to_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = seeds::rng(2, "ckpt");
        let mut p = Params::new();
        let id = p.add("w", xavier(2, 2, &mut rng));
        let mut ck = Checkpoint::new("x = 1\n");
        ck.push_params("", &p);
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();

        let orig = p.get(id).clone();
        p.get_mut(id).fill(0.0);
        Checkpoint::load(&path).unwrap().apply_to("", &mut p).unwrap();
        for (a, b) in p.get(id).iter().zip(orig.iter()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"NOPE123456").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Params::new();
        p.add("w", Tensor::zeros(2, 2));
        let mut ck = Checkpoint::new("");
        ck.tensors.push(("w".into(), Tensor::zeros(3, 3)));
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert!(loaded.apply_to("", &mut p).is_err());
    }
}
