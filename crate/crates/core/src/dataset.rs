//! Task datasets and their binary file format.
//!
//! ```text
//! magic    4 bytes "ICON"
//! version  u32     1
//! n        u32     rows
//! K        u32     observation columns
//! N        u32     latent columns (0 when no latents are stored)
//! flags    u32     bit 0: latents present, bit 1: labels present, bit 2: test split
//! X        n × K   f32, row-major
//! Z        n × N   f32, row-major (if bit 0)
//! labels   n       u32 (if bit 1)
//! ```
//!
//! All fields are little-endian. Values are held as `f64` in memory and
//! rounded to `f32` on write.

use std::io::Write;
use std::path::Path;

use crate::error::{contract, IconError, Result};
use crate::numerics::Matrix;

const MAGIC: &[u8; 4] = b"ICON";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;
const FLAG_LATENTS: u32 = 1;
const FLAG_LABELS: u32 = 2;
const FLAG_TEST: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Observations of one task, with optional ground-truth latents and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    /// 1-based task index.
    pub task_id: usize,
    pub x: Matrix,
    pub z_true: Option<Matrix>,
    pub labels: Option<Vec<usize>>,
    pub split: Split,
}

impl TaskDataset {
    pub fn new(
        task_id: usize,
        x: Matrix,
        z_true: Option<Matrix>,
        labels: Option<Vec<usize>>,
        split: Split,
    ) -> Result<TaskDataset> {
        if task_id == 0 {
            return contract("task ids start at 1");
        }
        if x.rows() == 0 {
            return contract(format!("task {task_id} has no samples"));
        }
        x.ensure_finite("observations")?;
        if let Some(z) = &z_true {
            if z.rows() != x.rows() {
                return contract("latents and observations differ in row count");
            }
            z.ensure_finite("latents")?;
        }
        if let Some(l) = &labels {
            if l.len() != x.rows() {
                return contract("one label per observation required");
            }
        }
        Ok(TaskDataset {
            task_id,
            x,
            z_true,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    /// Rows `indices` as a new dataset (same task and split).
    pub fn subset(&self, indices: &[usize]) -> TaskDataset {
        TaskDataset {
            task_id: self.task_id,
            x: self.x.select_rows(indices),
            z_true: self.z_true.as_ref().map(|z| z.select_rows(indices)),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            split: self.split,
        }
    }
}

/// The dataset for `task` within `data`, or a contract error naming it.
pub fn find_task(data: &[TaskDataset], task: usize) -> Result<&TaskDataset> {
    data.iter()
        .find(|d| d.task_id == task)
        .ok_or_else(|| IconError::Contract(format!("no data for task {task}")))
}

pub fn write_dataset(d: &TaskDataset, path: &Path) -> Result<()> {
    let (n, k) = d.x.shape();
    let latent_cols = d.z_true.as_ref().map_or(0, |z| z.cols());
    let mut flags = 0;
    if d.z_true.is_some() {
        flags |= FLAG_LATENTS;
    }
    if d.labels.is_some() {
        flags |= FLAG_LABELS;
    }
    if d.split == Split::Test {
        flags |= FLAG_TEST;
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * n * (k + latent_cols + 1));
    buf.extend_from_slice(MAGIC);
    for v in [VERSION, n as u32, k as u32, latent_cols as u32, flags] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut put = |m: &Matrix| {
        for v in m.as_slice() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    };
    put(&d.x);
    if let Some(z) = &d.z_true {
        put(z);
    }
    if let Some(l) = &d.labels {
        for &v in l {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Reads a dataset file, tagging it with `task_id`.
pub fn read_dataset(path: &Path, task_id: usize) -> Result<TaskDataset> {
    let bytes = std::fs::read(path)?;
    let bad = |message: String| IconError::Ingestion {
        record: path.display().to_string(),
        message,
    };
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(bad("missing ICON header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (version, n, k, latent_cols, flags) =
        (word(0), word(1) as usize, word(2) as usize, word(3) as usize, word(4));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    if flags & !(FLAG_LATENTS | FLAG_LABELS | FLAG_TEST) != 0 {
        return Err(bad(format!("unknown flag bits {flags:#x}")));
    }
    let has_z = flags & FLAG_LATENTS != 0;
    if has_z != (latent_cols > 0) {
        return Err(bad("latent flag disagrees with latent column count".into()));
    }
    let has_labels = flags & FLAG_LABELS != 0;
    let expected = (n as u64) * 4 * (k as u64 + latent_cols as u64 + u64::from(has_labels));
    if HEADER_LEN as u64 + expected != bytes.len() as u64 {
        return Err(bad(format!(
            "header announces {n} × {k} rows but the file holds {} bytes",
            bytes.len()
        )));
    }
    let mut pos = HEADER_LEN;
    let mut take = |rows: usize, cols: usize, what: &str| -> Result<Matrix> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows * cols {
            let v = f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(bad(format!("non-finite {what} value at row {}", r / cols.max(1))));
            }
            data.push(f64::from(v));
            pos += 4;
        }
        Matrix::from_vec(rows, cols, data)
    };
    let x = take(n, k, "observation")?;
    let z_true = if has_z { Some(take(n, latent_cols, "latent")?) } else { None };
    let labels = has_labels.then(|| {
        (0..n)
            .map(|i| {
                let o = pos + 4 * i;
                u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
            })
            .collect()
    });
    let split = if flags & FLAG_TEST != 0 { Split::Test } else { Split::Train };
    TaskDataset::new(task_id, x, z_true, labels, split).map_err(|e| bad(e.to_string()))
}
