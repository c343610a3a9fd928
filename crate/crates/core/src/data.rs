//! Pre-tokenized document files.
//!
//! Layout, all little-endian: magic `NCTK`, `u32` version, `u64` document
//! count, then for each document a `u64` length followed by that many `u32`
//! token ids.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const TOKEN_MAGIC: &[u8; 4] = b"NCTK";
pub const TOKEN_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStreamFile {
    pub documents: Vec<Vec<u32>>,
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Corrupt {
        kind: "token stream",
        detail: detail.into(),
    }
}

fn read_u64<R: Read>(input: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    input
        .read_exact(&mut b)
        .map_err(|_| corrupt(format!("truncated while reading {what}")))?;
    Ok(u64::from_le_bytes(b))
}

impl TokenStreamFile {
    pub fn new(documents: Vec<Vec<u32>>) -> Self {
        Self { documents }
    }

    /// At least one document, and every id below `vocab_size`.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.documents.is_empty() {
            return Err(corrupt("no documents"));
        }
        for doc in &self.documents {
            if doc.is_empty() {
                return Err(Error::EmptyDocument);
            }
            if let Some(&id) = doc.iter().find(|&&id| id as usize >= vocab_size) {
                return Err(Error::TokenOutOfRange { id, vocab_size });
            }
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(TOKEN_MAGIC)?;
        out.write_all(&TOKEN_VERSION.to_le_bytes())?;
        out.write_all(&(self.documents.len() as u64).to_le_bytes())?;
        for doc in &self.documents {
            out.write_all(&(doc.len() as u64).to_le_bytes())?;
            for id in doc {
                out.write_all(&id.to_le_bytes())?;
            }
        }
        out.flush()
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut head = [0u8; 8];
        input
            .read_exact(&mut head)
            .map_err(|_| corrupt("truncated header"))?;
        if &head[..4] != TOKEN_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(head[4..].try_into().expect("4 bytes"));
        if version != TOKEN_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let count = read_u64(&mut input, "document count")?;
        let mut documents = Vec::new();
        for i in 0..count {
            let len = read_u64(&mut input, "document length")? as usize;
            let mut bytes = Vec::new();
            let got = input
                .by_ref()
                .take(len as u64 * 4)
                .read_to_end(&mut bytes)
                .map_err(|e| corrupt(e.to_string()))?;
            if got != len * 4 {
                return Err(corrupt(format!("document {i} truncated")));
            }
            documents.push(
                bytes
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            );
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest).map_err(|e| corrupt(e.to_string()))? != 0 {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { documents })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(file))
    }
}
