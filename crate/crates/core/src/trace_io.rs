//! Attention-trace serialization: a directory of binary matrix files plus a
//! JSON manifest.
//!
//! Matrix files are raw little-endian `f64`, row-major, preceded by two
//! little-endian `u64` dimensions. The manifest lists one entry per record:
//! `{step, layer, head, rows, cols, dtype, file}`.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{AttentionRecord, AttentionTrace};
use crate::error::{Error, Result};
use crate::mat::Mat;

pub const TRACE_MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub file: String,
}

/// Write `data` to `path` atomically (write temp, rename).
pub fn atomic_write(path: &Path, data: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, data)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Write one matrix in the raw dimensioned format.
pub fn write_matrix(path: &Path, matrix: &Mat) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(&(matrix.rows() as u64).to_le_bytes())?;
        w.write_all(&(matrix.cols() as u64).to_le_bytes())?;
        for v in matrix.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Read one matrix in the raw dimensioned format.
pub fn read_matrix(path: &Path) -> Result<Mat> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(Error::Malformed {
            kind: "matrix file",
            context: format!("{} is too short for the dimension header", path.display()),
        });
    }
    let rows = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let expected = 16 + rows * cols * 8;
    if bytes.len() != expected {
        return Err(Error::Malformed {
            kind: "matrix file",
            context: format!(
                "{} holds {} bytes, {rows}x{cols} needs {expected}",
                path.display(),
                bytes.len()
            ),
        });
    }
    let data = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Mat::from_vec(rows, cols, data))
}

fn record_file_name(record: &AttentionRecord) -> String {
    format!(
        "attn_s{:04}_l{:02}_h{:02}.mat",
        record.step, record.layer, record.head
    )
}

/// Serialize a trace into `dir`; returns the manifest path.
pub fn write_trace(dir: &Path, trace: &AttentionTrace) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(trace.len());
    for record in trace.records() {
        let file = record_file_name(record);
        write_matrix(&dir.join(&file), &record.matrix)?;
        entries.push(TraceEntry {
            step: record.step,
            layer: record.layer,
            head: record.head,
            rows: record.matrix.rows(),
            cols: record.matrix.cols(),
            dtype: "f64".to_string(),
            file,
        });
    }
    let manifest_path = dir.join(TRACE_MANIFEST_NAME);
    atomic_write(
        &manifest_path,
        serde_json::to_string_pretty(&entries)?.as_bytes(),
    )?;
    Ok(manifest_path)
}

/// Load a trace previously written by [`write_trace`].
pub fn read_trace(dir: &Path) -> Result<AttentionTrace> {
    let manifest_path = dir.join(TRACE_MANIFEST_NAME);
    let entries: Vec<TraceEntry> = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let mut trace = AttentionTrace::new();
    for entry in entries {
        if entry.dtype != "f64" {
            return Err(Error::Malformed {
                kind: "trace manifest",
                context: format!("unsupported dtype {}", entry.dtype),
            });
        }
        let matrix = read_matrix(&dir.join(&entry.file))?;
        if matrix.rows() != entry.rows || matrix.cols() != entry.cols {
            return Err(Error::Malformed {
                kind: "trace manifest",
                context: format!(
                    "{} declares {}x{}, file holds {}x{}",
                    entry.file,
                    entry.rows,
                    entry.cols,
                    matrix.rows(),
                    matrix.cols()
                ),
            });
        }
        trace.push(AttentionRecord {
            step: entry.step,
            layer: entry.layer,
            head: entry.head,
            matrix,
        });
    }
    Ok(trace)
}
