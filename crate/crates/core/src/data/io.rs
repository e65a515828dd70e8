//! Dataset files.
//!
//! Binary layout (all little-endian):
//!
//! ```text
//! "CMSF"            4 bytes magic
//! version   u32     = 1
//! N         u64     samples
//! D         u32     dimension
//! classes   u32
//! has_coarse u8     0 or 1
//! samples   N·D f32 row-major
//! labels    N u32   (u32::MAX = unlabeled)
//! coarse    N u32   only when has_coarse = 1
//! ```
//!
//! CSV: a header `f0,...,f{D-1},label` (optionally followed by `coarse`), one
//! row per sample, `-1` marking unlabeled samples.

use std::fs;
use std::path::Path;

use super::{Dataset, UNLABELED};
use crate::codec::{Reader, Writer};
use crate::error::{CmsfError, Result};
use crate::numeric::Matrix;

pub const DATASET_MAGIC: [u8; 4] = *b"CMSF";
pub const DATASET_VERSION: u32 = 1;

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn encode_dataset(d: &Dataset) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(&DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.u64(d.len() as u64);
    w.u32(d.dim() as u32);
    w.u32(d.num_classes());
    w.u8(u8::from(d.coarse_labels().is_some()));
    for &v in d.samples().as_slice() {
        w.f32(v as f32);
    }
    for &l in d.labels() {
        w.u32(l);
    }
    if let Some(coarse) = d.coarse_labels() {
        for &c in coarse {
            w.u32(c);
        }
    }
    w.into_inner()
}

pub fn decode_dataset(bytes: &[u8], name: &str) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(CmsfError::VersionUnsupported(version));
    }
    let n = r.u64("sample count")? as usize;
    let d = r.u32("dimension")? as usize;
    let classes = r.u32("class count")?;
    let has_coarse = match r.u8("coarse flag")? {
        0 => false,
        1 => true,
        other => return Err(r.error(format!("coarse flag must be 0 or 1, got {other}"))),
    };
    let expected = n
        .checked_mul(d)
        .and_then(|nd| nd.checked_mul(4))
        .and_then(|b| b.checked_add(n * 4 * (1 + usize::from(has_coarse))))
        .ok_or_else(|| r.error("size overflow"))?;
    if (bytes.len() as u64) < r.offset() + expected as u64 {
        return Err(CmsfError::Parse {
            offset: bytes.len() as u64,
            message: format!("truncated: header promises {expected} payload bytes"),
        });
    }
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        data.push(r.f32("sample")? as f64);
    }
    let labels = (0..n).map(|_| r.u32("label")).collect::<Result<Vec<_>>>()?;
    let coarse = if has_coarse { Some((0..n).map(|_| r.u32("coarse label")).collect::<Result<Vec<_>>>()?) } else { None };
    r.finish()?;
    let samples = Matrix::from_vec(n, d, data).map_err(|e| r.error(e.to_string()))?;
    Dataset::new(samples, labels, coarse, classes, name)
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(d))?;
    Ok(())
}

/// Loads a binary dataset, or a CSV file when the extension is `.csv`.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        return load_csv(path);
    }
    let bytes = fs::read(path)?;
    decode_dataset(&bytes, &stem(path))
}

pub fn save_csv(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    let mut header: Vec<String> = (0..d.dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    if d.coarse_labels().is_some() {
        header.push("coarse".into());
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..d.len() {
        let mut fields: Vec<String> = d.sample(i).iter().map(|&v| format!("{}", v as f32)).collect();
        fields.push(match d.label(i) {
            Some(l) => l.to_string(),
            None => "-1".into(),
        });
        if let Some(c) = d.coarse_labels() {
            fields.push(c[i].to_string());
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_csv(&text, &stem(path))
}

fn parse_csv(text: &str, name: &str) -> Result<Dataset> {
    let mut offset = 0u64;
    let mut lines = text.split_inclusive('\n');
    let header_line = lines.next().ok_or(CmsfError::Parse { offset: 0, message: "empty CSV".into() })?;
    let header: Vec<&str> = header_line.trim_end().split(',').map(str::trim).collect();
    let label_col = header
        .iter()
        .position(|h| *h == "label")
        .ok_or(CmsfError::Parse { offset: 0, message: "missing `label` column".into() })?;
    for (j, h) in header[..label_col].iter().enumerate() {
        if *h != format!("f{j}") {
            return Err(CmsfError::Parse { offset: 0, message: format!("expected column f{j}, found {h:?}") });
        }
    }
    let has_coarse = match &header[label_col + 1..] {
        [] => false,
        ["coarse"] => true,
        rest => return Err(CmsfError::Parse { offset: 0, message: format!("unexpected columns {rest:?}") }),
    };
    let dim = label_col;
    offset += header_line.len() as u64;

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut coarse = Vec::new();
    for line in lines {
        let here = offset;
        offset += line.len() as u64;
        let row = line.trim_end();
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != header.len() {
            return Err(CmsfError::Parse {
                offset: here,
                message: format!("expected {} fields, found {}", header.len(), fields.len()),
            });
        }
        for f in &fields[..dim] {
            let v: f32 = f.parse().map_err(|_| CmsfError::Parse { offset: here, message: format!("bad float {f:?}") })?;
            data.push(v as f64);
        }
        let label: i64 = fields[dim]
            .parse()
            .map_err(|_| CmsfError::Parse { offset: here, message: format!("bad label {:?}", fields[dim]) })?;
        labels.push(match label {
            -1 => UNLABELED,
            l if (0..UNLABELED as i64).contains(&l) => l as u32,
            l => return Err(CmsfError::Parse { offset: here, message: format!("label {l} out of range") }),
        });
        if has_coarse {
            let c: u32 = fields[dim + 1]
                .parse()
                .map_err(|_| CmsfError::Parse { offset: here, message: format!("bad coarse label {:?}", fields[dim + 1]) })?;
            coarse.push(c);
        }
    }
    if labels.is_empty() {
        return Err(CmsfError::Parse { offset, message: "no data rows".into() });
    }
    let classes = labels.iter().filter(|&&l| l != UNLABELED).max().map_or(0, |m| m + 1);
    let samples = Matrix::from_vec(labels.len(), dim, data)?;
    Dataset::new(samples, labels, has_coarse.then_some(coarse), classes, name)
}
