//! Versioned binary checkpoint container.
//!
//! ```text
//! magic      "FOCUSCKP"
//! version    u32
//! iteration  u64
//! config     u32 length + UTF-8 text
//! sections   u32 count, then per section:
//!              name     u16 length + UTF-8
//!              entries  u32 count, then per entry:
//!                         name    u16 length + UTF-8
//!                         tensor  (tensor wire format)
//! ```
//!
//! Model parameters are grouped into sections by the first component of
//! their dotted name; optimizer state lives in the `optimizer` section.

use std::io::{Read, Write};
use std::path::Path;

use focus_tensor::Tensor;

use crate::error::{Error, Result};
use crate::io::atomic_write;

pub const MAGIC: &[u8; 8] = b"FOCUSCKP";
pub const VERSION: u32 = 1;
pub const OPTIMIZER_SECTION: &str = "optimizer";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub config: String,
    /// Model parameters in store order.
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Vec<(String, Tensor)>,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn section_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

fn write_str16(w: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| ck(format!("name too long: {s}")))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|_| ck("truncated file"))?;
    Ok(b)
}

fn read_string(r: &mut &[u8], len: usize) -> Result<String> {
    if r.len() < len {
        return Err(ck("truncated file"));
    }
    let (head, tail) = r.split_at(len);
    *r = tail;
    String::from_utf8(head.to_vec()).map_err(|_| ck("invalid UTF-8"))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sections: Vec<(&str, Vec<&(String, Tensor)>)> = Vec::new();
        for entry in &self.params {
            let sec = section_of(&entry.0);
            if sec == OPTIMIZER_SECTION {
                return Err(ck(format!("parameter {} uses the reserved section name", entry.0)));
            }
            match sections.iter_mut().find(|(n, _)| *n == sec) {
                Some((_, v)) => v.push(entry),
                None => sections.push((sec, vec![entry])),
            }
        }
        sections.push((OPTIMIZER_SECTION, self.optimizer.iter().collect()));

        let mut out = Vec::new();
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&self.iteration.to_le_bytes())?;
        out.write_all(&(self.config.len() as u32).to_le_bytes())?;
        out.write_all(self.config.as_bytes())?;
        out.write_all(&(sections.len() as u32).to_le_bytes())?;
        for (name, entries) in sections {
            write_str16(&mut out, name)?;
            out.write_all(&(entries.len() as u32).to_le_bytes())?;
            for (n, t) in entries {
                write_str16(&mut out, n)?;
                t.write_to(&mut out)?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        if read_exact::<8>(&mut r)? != *MAGIC {
            return Err(ck("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(read_exact(&mut r)?);
        if version != VERSION {
            return Err(ck(format!("unsupported version {version}")));
        }
        let iteration = u64::from_le_bytes(read_exact(&mut r)?);
        let clen = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let config = read_string(&mut r, clen)?;
        let nsec = u32::from_le_bytes(read_exact(&mut r)?);
        let mut params = Vec::new();
        let mut optimizer = None;
        for _ in 0..nsec {
            let nlen = u16::from_le_bytes(read_exact(&mut r)?) as usize;
            let sec = read_string(&mut r, nlen)?;
            let count = u32::from_le_bytes(read_exact(&mut r)?);
            let mut entries = Vec::with_capacity(count as usize);
            for _ in 0..count {
                let nlen = u16::from_le_bytes(read_exact(&mut r)?) as usize;
                let name = read_string(&mut r, nlen)?;
                let t = Tensor::read_from(&mut r)?;
                entries.push((name, t));
            }
            if sec == OPTIMIZER_SECTION {
                if optimizer.replace(entries).is_some() {
                    return Err(ck("duplicate optimizer section"));
                }
            } else {
                if let Some((n, _)) = entries.iter().find(|(n, _)| section_of(n) != sec) {
                    return Err(ck(format!("entry {n} filed under section {sec}")));
                }
                params.extend(entries);
            }
        }
        if !r.is_empty() {
            return Err(ck(format!("{} trailing bytes", r.len())));
        }
        Ok(Self {
            iteration,
            config,
            params,
            optimizer: optimizer.ok_or_else(|| ck("missing optimizer section"))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| ck(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Section names in file order, optimizer last.
    pub fn sections(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (n, _) in &self.params {
            let s = section_of(n);
            if !out.iter().any(|o| o == s) {
                out.push(s.to_string());
            }
        }
        out.push(OPTIMIZER_SECTION.to_string());
        out
    }
}
