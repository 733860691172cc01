//! A versioned binary container: a JSON header followed by named blocks
//! of 64-bit little-endian floats.
//!
//! Checkpoints and calibration tables both use this format. Values are
//! written bit-for-bit, so round trips are exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MPROBEC1";
const MAX_NAME_LEN: usize = 4096;

pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

pub fn write(
    path: &Path,
    kind: &str,
    header: &serde_json::Value,
    blocks: &[Block],
) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    write_bytes(&mut w, kind.as_bytes())?;
    let header_bytes =
        serde_json::to_vec(header).map_err(|e| Error::Format(format!("header encode: {e}")))?;
    write_bytes(&mut w, &header_bytes)?;
    w.write_all(&(blocks.len() as u64).to_le_bytes())?;
    for block in blocks {
        if block.data.len() != block.rows * block.cols {
            return Err(Error::ShapeMismatch(format!(
                "block {} data length {} does not match {}x{}",
                block.name,
                block.data.len(),
                block.rows,
                block.cols
            )));
        }
        write_bytes(&mut w, block.name.as_bytes())?;
        w.write_all(&(block.rows as u64).to_le_bytes())?;
        w.write_all(&(block.cols as u64).to_le_bytes())?;
        for v in &block.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read(path: &Path, expected_kind: &str) -> Result<(serde_json::Value, Vec<Block>)> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: not a maskprobe container",
            path.display()
        )));
    }
    let kind = String::from_utf8(read_bytes(&mut r)?)
        .map_err(|_| Error::Format("container kind is not utf-8".into()))?;
    if kind != expected_kind {
        return Err(Error::Format(format!(
            "{}: container holds '{kind}', expected '{expected_kind}'",
            path.display()
        )));
    }
    let header: serde_json::Value = serde_json::from_slice(&read_bytes(&mut r)?)
        .map_err(|e| Error::Format(format!("header decode: {e}")))?;
    let mut count_buf = [0u8; 8];
    r.read_exact(&mut count_buf)?;
    let count = u64::from_le_bytes(count_buf) as usize;
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|_| Error::Format("block name is not utf-8".into()))?;
        let mut dims = [0u8; 16];
        r.read_exact(&mut dims)?;
        let rows = u64::from_le_bytes(dims[..8].try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(dims[8..].try_into().unwrap()) as usize;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format("block dimensions overflow".into()))?;
        let mut raw = vec![0u8; len * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blocks.push(Block {
            name,
            rows,
            cols,
            data,
        });
    }
    Ok((header, blocks))
}

fn write_bytes(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let mut len_buf = [0u8; 4];
    r.read_exact(&mut len_buf)?;
    let len = u32::from_le_bytes(len_buf) as usize;
    if len > MAX_NAME_LEN.max(1 << 20) {
        return Err(Error::Format("unreasonable field length".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}
