//! Small helpers shared by the tab-separated file formats.

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Row counters kept by every line-oriented parser.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RowCounts {
    pub parsed: usize,
    pub skipped: usize,
}

impl RowCounts {
    pub fn total(&self) -> usize {
        self.parsed + self.skipped
    }
}

/// Items produced by a lenient parser together with its counters.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    pub items: Vec<T>,
    pub counts: RowCounts,
}

impl<T> Default for Parsed<T> {
    fn default() -> Self {
        Parsed {
            items: Vec::new(),
            counts: RowCounts::default(),
        }
    }
}

/// Replace characters that would break a TSV row.
pub fn clean_field(s: &str) -> String {
    s.chars()
        .map(|c| {
            if matches!(c, '\t' | '\n' | '\r') {
                ' '
            } else {
                c
            }
        })
        .collect()
}

/// Iterate the lines of a reader with their 1-based numbers, stripping the trailing `\r`.
pub fn numbered_lines<R: Read>(
    reader: R,
) -> impl Iterator<Item = (usize, std::io::Result<String>)> {
    BufReader::new(reader).lines().enumerate().map(|(i, line)| {
        (
            i + 1,
            line.map(|mut l| {
                if l.ends_with('\r') {
                    l.pop();
                }
                l
            }),
        )
    })
}

pub fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| Error::file(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::file(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Deterministic 64-bit value derived from a string, used to split seeds per stream.
pub fn stable_hash64(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}
