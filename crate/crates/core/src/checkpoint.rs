//! `FSLW1` weight container.
//!
//! Layout (little-endian): the 5-byte magic `FSLW1`, then entries until EOF,
//! each `u32 name_len | name bytes (UTF-8) | u32 rank | u64 dims[rank] |
//! f64 data[product(dims)]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"FSLW1";

/// Ordered, name-indexed collection of float arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: &Tensor) {
        let name = name.into();
        let t = tensor.detached();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, value: f64) {
        self.insert(name, &Tensor::scalar(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::data(format!("checkpoint entry '{name}' missing")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.require(name)?;
        if t.numel() != 1 {
            return Err(Error::data(format!("checkpoint entry '{name}' is not a scalar")));
        }
        Ok(t.item())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)
            .map_err(|_| Error::data("checkpoint too short for FSLW1 magic"))?;
        if &magic != MAGIC {
            return Err(Error::data("bad checkpoint magic (expected FSLW1)"));
        }
        let mut ckpt = Checkpoint::new();
        loop {
            let mut len = [0u8; 4];
            match r.read_exact(&mut len) {
                Ok(()) => {}
                Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let name_len = u32::from_le_bytes(len) as usize;
            let mut name = vec![0u8; name_len];
            read_entry(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::data("checkpoint name is not UTF-8"))?;
            let mut rank = [0u8; 4];
            read_entry(&mut r, &mut rank)?;
            let rank = u32::from_le_bytes(rank) as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut d = [0u8; 8];
                read_entry(&mut r, &mut d)?;
                dims.push(u64::from_le_bytes(d) as usize);
            }
            let numel: usize = dims.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                read_entry(&mut r, &mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            let t = Tensor::new(dims, data)
                .map_err(|e| Error::data(format!("checkpoint entry '{name}': {e}")))?;
            ckpt.entries.push((name, t));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        Self::read_from(BufReader::new(f))
    }
}

fn read_entry<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::data("truncated checkpoint entry"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let mut c = Checkpoint::new();
        c.insert("w", &Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap());
        let mut bytes = Vec::new();
        c.write_to(&mut bytes).unwrap();
        let mut expect = b"FSLW1".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(b"w");
        expect.extend(2u32.to_le_bytes());
        expect.extend(1u64.to_le_bytes());
        expect.extend(2u64.to_le_bytes());
        expect.extend(1f64.to_le_bytes());
        expect.extend((-2f64).to_le_bytes());
        assert_eq!(bytes, expect);
        assert_eq!(Checkpoint::read_from(&bytes[..]).unwrap(), c);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Checkpoint::read_from(&b"FSLW2"[..]).is_err());
        let mut c = Checkpoint::new();
        c.insert_scalar("a", 1.0);
        let mut bytes = Vec::new();
        c.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::read_from(&bytes[..]).is_err());
    }
}
