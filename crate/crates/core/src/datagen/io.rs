//! Dataset files.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! "LMDS" | u32 version=1 | u32 N | u32 C₀ | u32 K
//! N × ( C₀ × f32 | u16 label )
//! u32 CRC32 of every preceding byte
//! ```
//!
//! CSV has a `f0,…,f{C₀−1},label` header and floats with nine significant
//! digits, enough to round-trip `f32`.

use std::fs;
use std::path::Path;

use super::{Dataset, SplitTag};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LMDS";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub fn encode_binary(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.num_classes > u16::MAX as usize + 1 {
        return Err(Error::Validation(format!(
            "{} classes do not fit a u16 label",
            ds.num_classes
        )));
    }
    let n = ds.len();
    let mut out = Vec::with_capacity(HEADER_LEN + n * (4 * ds.dim + 2) + 4);
    out.extend_from_slice(MAGIC);
    for v in [VERSION, n as u32, ds.dim as u32, ds.num_classes as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for i in 0..n {
        for v in ds.row(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(ds.labels[i] as u16).to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn u32_at(bytes: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap())
}

pub fn decode_binary(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!(
                "truncated header: expected {HEADER_LEN} bytes, found {}",
                bytes.len()
            ),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {:?}, expected \"LMDS\"", &bytes[..4]),
        });
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let n = u32_at(bytes, 8) as usize;
    let dim = u32_at(bytes, 12) as usize;
    let k = u32_at(bytes, 16) as usize;
    let record = 4 * dim + 2;
    let expected = HEADER_LEN + n * record + 4;
    if bytes.len() != expected {
        let offset = bytes.len().min(expected) as u64;
        let what = if bytes.len() < expected { "truncated" } else { "trailing bytes" };
        return Err(Error::Format {
            offset,
            message: format!("{what}: expected {expected} bytes, found {}", bytes.len()),
        });
    }
    let body_end = expected - 4;
    let stored = u32_at(bytes, body_end);
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Crc {
            offset: body_end as u64,
            region: "dataset header and records".into(),
            stored,
            computed,
        });
    }
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let mut off = HEADER_LEN;
    for _ in 0..n {
        for _ in 0..dim {
            features.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
            off += 4;
        }
        let label = u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap()) as usize;
        if label >= k {
            return Err(Error::Format {
                offset: off as u64,
                message: format!("label {label} outside [0, {k})"),
            });
        }
        labels.push(label);
        off += 2;
    }
    Dataset::new(features, dim, labels, k, SplitTag::Train)
}

pub fn encode_csv(ds: &Dataset) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..ds.dim).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.row(i).iter().map(|v| format!("{v:.8e}")).collect();
        rec.push(ds.labels[i].to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| Error::Validation(format!("csv flush: {e}")))
}

fn csv_err(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    Error::Format {
        offset,
        message: format!("csv: {e}"),
    }
}

/// Parses CSV. `num_classes` defaults to `max(label) + 1`.
pub fn decode_csv(bytes: &[u8], num_classes: Option<usize>) -> Result<Dataset> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers().map_err(csv_err)?.clone();
    let dim = header.len().saturating_sub(1);
    if dim == 0 || header.get(dim) != Some("label") {
        return Err(Error::Format {
            offset: 0,
            message: "csv header must be f0,...,label".into(),
        });
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let bad = |what: &str| Error::Format {
            offset,
            message: format!("csv: cannot parse {what}"),
        };
        for j in 0..dim {
            features.push(rec[j].trim().parse::<f32>().map_err(|_| bad(&format!("f{j}")))?);
        }
        labels.push(rec[dim].trim().parse::<usize>().map_err(|_| bad("label"))?);
    }
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(features, dim, labels, k, SplitTag::Train)
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Writes `.csv` as CSV and anything else as the binary format, via a
/// temporary file and rename.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = if is_csv(path) { encode_csv(ds)? } else { encode_binary(ds)? };
    write_atomic(path, &bytes)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if is_csv(path) {
        decode_csv(&bytes, None)
    } else {
        decode_binary(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
