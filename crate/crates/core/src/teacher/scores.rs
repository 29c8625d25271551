use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CKDS";
const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 8 + 8;

/// Precomputed raw teacher logits, one row per user over the target catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    num_users: usize,
    num_items: usize,
    data: Vec<f32>,
}

impl ScoreMatrix {
    pub fn new(num_users: usize, num_items: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != num_users * num_items {
            return Err(Error::Shape(format!(
                "score matrix {num_users}x{num_items} needs {} values, got {}",
                num_users * num_items,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("score matrix entry {i}")));
        }
        Ok(ScoreMatrix { num_users, num_items, data })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn row(&self, user: usize) -> Result<&[f32]> {
        if user >= self.num_users {
            return Err(Error::invalid(format!(
                "unknown user {user}: score matrix has {} users",
                self.num_users
            )));
        }
        Ok(&self.data[user * self.num_items..(user + 1) * self.num_items])
    }

    /// Raw scores of `user` for `candidates`, in candidate order.
    pub fn lookup(&self, user: usize, candidates: &[usize]) -> Result<Vec<f64>> {
        let row = self.row(user)?;
        candidates
            .iter()
            .map(|&j| {
                row.get(j).map(|&v| v as f64).ok_or_else(|| {
                    Error::invalid(format!("item {j} outside score matrix of {} items", self.num_items))
                })
            })
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::with_capacity(HEADER + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_users as u64).to_le_bytes());
        out.extend_from_slice(&(self.num_items as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::format(path, "bad magic"));
        }
        if bytes.len() < HEADER {
            return Err(Error::format(path, "truncated header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let num_users = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let num_items = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
        let expected = num_users
            .checked_mul(num_items)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(path, "header dimensions overflow"))?;
        let payload = &bytes[HEADER..];
        if payload.len() < expected {
            return Err(Error::format(path, "truncated payload"));
        }
        if payload.len() > expected {
            return Err(Error::format(path, "trailing bytes after payload"));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        ScoreMatrix::new(num_users, num_items, data).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_follows_candidate_order() {
        let m = ScoreMatrix::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.lookup(0, &[2, 0]).unwrap(), vec![3.0, 1.0]);
        assert!(m.lookup(1, &[0]).is_err());
        assert!(m.lookup(0, &[3]).is_err());
    }

    #[test]
    fn file_roundtrip_and_defects() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let m = ScoreMatrix::new(2, 3, vec![0.5, -1.0, 2.0, 3.25, 0.0, -7.5]).unwrap();
        m.write(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &3u64.to_le_bytes());
        assert_eq!(ScoreMatrix::open(&path).unwrap(), m);

        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        let err = ScoreMatrix::open(&path).unwrap_err().to_string();
        assert!(err.contains("truncated payload"), "{err}");

        let mut bad = bytes.clone();
        bad[3] = b'M';
        fs::write(&path, &bad).unwrap();
        assert!(ScoreMatrix::open(&path).unwrap_err().to_string().contains("bad magic"));
    }
}
