//! On-disk dataset format (version 1).
//!
//! ```text
//! <dir>/spec.json         {"version":1,"num_classes":K,"spec":{..}|null,"meta":{..}}
//! <dir>/manifest.ndjson   header line, then one JSON record per example
//! <dir>/<split>.bin       "BSWPBLOB" + u32 version + little-endian f32 pixels
//! ```
//!
//! Each record carries the example's metadata, the blob file (relative to the
//! manifest directory), a float offset, the HWC shape, and the SHA-256 of the
//! pixel bytes.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BiasedDatasetSpec, Dataset, Image, LabeledExample, Provenance};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.ndjson";
pub const SPEC_FILE: &str = "spec.json";
const BLOB_MAGIC: &[u8; 8] = b"BSWPBLOB";
const BLOB_HEADER: u64 = 12;

#[derive(Debug, Serialize, Deserialize)]
struct SpecFile {
    version: u32,
    num_classes: usize,
    spec: Option<BiasedDatasetSpec>,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

/// One line of `manifest.ndjson`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub example_id: String,
    pub split: String,
    pub target: usize,
    pub gt_bias_flag: Option<bool>,
    pub pseudo_bias_label: Option<u8>,
    pub bias_attribute: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    pub shape: [usize; 3],
    pub blob: String,
    pub offset: u64,
    pub checksum: String,
}

pub fn pixel_checksum(image: &Image) -> String {
    let mut h = Sha256::new();
    for v in &image.data {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn blob_name(split: &str) -> String {
    format!("{split}.bin")
}

/// Writes blobs, manifest and spec file into `dir` (created if needed).
pub fn write_manifest(dataset: &Dataset, dir: &Path) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("refusing to write an empty dataset".into()));
    }
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(dataset.len());
    for (split, examples) in &dataset.splits {
        let name = blob_name(split);
        let mut blob = BufWriter::new(File::create(dir.join(&name))?);
        blob.write_all(BLOB_MAGIC)?;
        blob.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let mut offset = 0u64;
        for e in examples {
            for v in &e.image.data {
                blob.write_all(&v.to_le_bytes())?;
            }
            records.push(record_for(e, split, &name, offset));
            offset += e.image.data.len() as u64;
        }
        blob.flush()?;
    }
    write_records(dir, &records)?;
    let spec = SpecFile {
        version: FORMAT_VERSION,
        num_classes: dataset.num_classes,
        spec: dataset.spec.clone(),
        meta: dataset.meta.clone(),
    };
    fs::write(dir.join(SPEC_FILE), serde_json::to_vec_pretty(&spec)?)?;
    Ok(())
}

fn record_for(e: &LabeledExample, split: &str, blob: &str, offset: u64) -> Record {
    Record {
        example_id: e.example_id.clone(),
        split: split.to_string(),
        target: e.target,
        gt_bias_flag: e.gt_bias_flag,
        pseudo_bias_label: e.pseudo_bias_label,
        bias_attribute: e.bias_attribute,
        provenance: e.provenance.clone(),
        shape: e.image.shape(),
        blob: blob.to_string(),
        offset,
        checksum: pixel_checksum(&e.image),
    }
}

fn write_records(dir: &Path, records: &[Record]) -> Result<()> {
    let mut out = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    let header = Header { format: "biaswap-manifest".into(), version: FORMAT_VERSION };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records(dir: &Path) -> Result<Vec<Record>> {
    let file = File::open(dir.join(MANIFEST_FILE))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines.next().ok_or_else(|| Error::Manifest {
        record: "header".into(),
        reason: "empty manifest".into(),
    })??;
    let header: Header = serde_json::from_str(&header_line).map_err(|e| Error::Manifest {
        record: "header".into(),
        reason: e.to_string(),
    })?;
    if header.format != "biaswap-manifest" || header.version != FORMAT_VERSION {
        return Err(Error::Manifest {
            record: "header".into(),
            reason: format!("unsupported format {} v{}", header.format, header.version),
        });
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            record: format!("line {}", i + 2),
            reason: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}

pub fn load_manifest(dir: &Path) -> Result<Dataset> {
    let spec: SpecFile = serde_json::from_slice(&fs::read(dir.join(SPEC_FILE))?)?;
    if spec.version != FORMAT_VERSION {
        return Err(Error::Manifest { record: SPEC_FILE.into(), reason: format!("version {}", spec.version) });
    }
    let records = read_records(dir)?;
    let mut blobs: HashMap<String, Vec<u8>> = HashMap::new();
    let mut ds = Dataset { spec: spec.spec, num_classes: spec.num_classes, meta: spec.meta, ..Default::default() };
    for rec in records {
        if !blobs.contains_key(&rec.blob) {
            let bytes = read_blob(&dir.join(&rec.blob), &rec.example_id)?;
            blobs.insert(rec.blob.clone(), bytes);
        }
        let bytes = &blobs[&rec.blob];
        let n: usize = rec.shape.iter().product();
        let start = (BLOB_HEADER + rec.offset * 4) as usize;
        let end = start + n * 4;
        if end > bytes.len() {
            return Err(Error::Manifest { record: rec.example_id, reason: "blob truncated".into() });
        }
        let data: Vec<f32> =
            bytes[start..end].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let image = Image::new(rec.shape[0], rec.shape[1], rec.shape[2], data);
        if pixel_checksum(&image) != rec.checksum {
            return Err(Error::Checksum(rec.example_id));
        }
        if rec.target >= ds.num_classes {
            return Err(Error::Manifest { record: rec.example_id, reason: format!("target {} out of range", rec.target) });
        }
        ds.split_mut(&rec.split).push(LabeledExample {
            example_id: rec.example_id,
            image,
            target: rec.target,
            gt_bias_flag: rec.gt_bias_flag,
            pseudo_bias_label: rec.pseudo_bias_label,
            bias_attribute: rec.bias_attribute,
            provenance: rec.provenance,
        });
    }
    Ok(ds)
}

fn read_blob(path: &Path, first_record: &str) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::Manifest {
        record: first_record.to_string(),
        reason: format!("{}: {e}", path.display()),
    })?;
    if bytes.len() < BLOB_HEADER as usize || &bytes[..8] != BLOB_MAGIC {
        return Err(Error::Manifest { record: first_record.to_string(), reason: format!("{} is not a blob", path.display()) });
    }
    Ok(bytes)
}

/// Writes a manifest into `dst` that reuses the blobs of `src` and overrides
/// pseudo-bias labels. `blob_prefix` is the path from `dst` to `src`.
pub fn relabel_manifest(
    src: &Path,
    dst: &Path,
    blob_prefix: &str,
    labels: &HashMap<String, u8>,
) -> Result<()> {
    fs::create_dir_all(dst)?;
    let mut records = read_records(src)?;
    for r in &mut records {
        if let Some(l) = labels.get(&r.example_id) {
            r.pseudo_bias_label = Some(*l);
        }
        r.blob = PathBuf::from(blob_prefix).join(&r.blob).to_string_lossy().into_owned();
    }
    write_records(dst, &records)?;
    fs::copy(src.join(SPEC_FILE), dst.join(SPEC_FILE))?;
    Ok(())
}
