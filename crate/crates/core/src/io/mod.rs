//! On-disk formats: the HSI container and model checkpoints.
//!
//! Both start with a text header of lowercase `key=value` lines ended by an
//! empty line, followed by little-endian binary data.

mod checkpoint;
mod hsi;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use hsi::{load_hsi, save_hsi, Dtype, HsiFile, HsiMeta, HSI_MAGIC};

use std::path::Path;

use crate::error::{Error, Result};

type Pairs = Vec<(String, String)>;

/// Splits `bytes` into the magic line, header pairs and the payload.
fn split_header<'a>(bytes: &'a [u8], magic: &str) -> Result<(Pairs, &'a [u8])> {
    let end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::format("header", "no blank line terminating the header"))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::format("header", "not valid UTF-8"))?;
    let mut lines = text.split('\n');
    let first = lines.next().unwrap_or("");
    if first != magic {
        return Err(Error::format("magic", format!("expected `{magic}`, found `{first}`")));
    }
    let mut pairs = Vec::new();
    for line in lines {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format("header", format!("expected `key=value`, found `{line}`")))?;
        if k.is_empty() || k.chars().any(|c| c.is_ascii_uppercase() || c.is_whitespace()) {
            return Err(Error::format(k, "header keys must be lowercase without spaces"));
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok((pairs, &bytes[end + 2..]))
}

fn header_text(magic: &str, pairs: &[(String, String)]) -> String {
    let mut s = format!("{magic}\n");
    for (k, v) in pairs {
        s.push_str(k);
        s.push('=');
        s.push_str(v);
        s.push('\n');
    }
    s.push('\n');
    s
}

fn lookup<'a>(pairs: &'a [(String, String)], key: &str) -> Option<&'a str> {
    pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

fn required<'a>(pairs: &'a [(String, String)], key: &str) -> Result<&'a str> {
    lookup(pairs, key).ok_or_else(|| Error::format(key, "missing"))
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::format(key, format!("cannot parse `{value}`")))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
