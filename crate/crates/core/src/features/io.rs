//! `APLF` binary feature files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "APLF" | version u32 | N u32 | C u32 | M u32 | record_count u32
//!        | class_count u32 | known_class_count u32
//! per record:
//!   image_id u32 | view_id u32 | is_labeled u8 | label i32 (-1 if absent)
//!   patch_features N*C f32 | cls_feature C f32 | head_attention M*N f32
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Dims, FeatureError, FeatureRecord};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"APLF";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 7;

/// Human-readable copy of the header, written next to the binary file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub magic: String,
    pub version: u32,
    pub patches: u32,
    pub channels: u32,
    pub heads: u32,
    pub record_count: u32,
    pub class_count: u32,
    pub known_class_count: u32,
}

impl Manifest {
    pub fn path_for(data_path: &Path) -> PathBuf {
        data_path.with_extension("manifest.toml")
    }
}

fn manifest_of(ds: &Dataset) -> Manifest {
    Manifest {
        magic: String::from_utf8_lossy(MAGIC).into_owned(),
        version: VERSION,
        patches: ds.dims.patches as u32,
        channels: ds.dims.channels as u32,
        heads: ds.dims.heads as u32,
        record_count: ds.records.len() as u32,
        class_count: ds.class_count as u32,
        known_class_count: ds.known_class_count as u32,
    }
}

pub fn write_dataset<W: Write>(mut w: W, ds: &Dataset) -> Result<(), FeatureError> {
    let mut buf = Vec::with_capacity(HEADER_LEN);
    buf.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        ds.dims.patches as u32,
        ds.dims.channels as u32,
        ds.dims.heads as u32,
        ds.records.len() as u32,
        ds.class_count as u32,
        ds.known_class_count as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    for r in &ds.records {
        buf.clear();
        buf.extend_from_slice(&r.image_id.to_le_bytes());
        buf.extend_from_slice(&r.view_id.to_le_bytes());
        buf.push(r.is_labeled as u8);
        let label = r.label.map_or(-1i32, |l| l as i32);
        buf.extend_from_slice(&label.to_le_bytes());
        for t in [&r.patch_features, &r.cls_feature, &r.head_attention] {
            for &x in t.data() {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Writes the binary file and its `.manifest.toml` sidecar.
pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<(), FeatureError> {
    let mut bytes = Vec::new();
    write_dataset(&mut bytes, ds)?;
    fs::write(path, bytes)?;
    let manifest =
        toml::to_string(&manifest_of(ds)).map_err(|e| FeatureError::Manifest(e.to_string()))?;
    fs::write(Manifest::path_for(path), manifest)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, FeatureError> {
    read_dataset(&fs::read(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FeatureError> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(FeatureError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FeatureError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32, FeatureError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, rows: usize, cols: usize) -> Result<Tensor, FeatureError> {
        let raw = self.take(rows * cols * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Ok(Tensor::matrix(rows, cols, data)?)
    }
}

pub fn read_dataset(bytes: &[u8]) -> Result<Dataset, FeatureError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(FeatureError::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(FeatureError::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let n = cur.u32()? as usize;
    let c = cur.u32()? as usize;
    let m = cur.u32()? as usize;
    let count = cur.u32()? as usize;
    let class_count = cur.u32()? as usize;
    let known_class_count = cur.u32()? as usize;
    if known_class_count >= class_count {
        return Err(FeatureError::Inconsistent {
            record: 0,
            offset: HEADER_LEN,
            reason: format!(
                "known class count {known_class_count} not below class count {class_count}"
            ),
        });
    }
    let dims = Dims {
        patches: n,
        channels: c,
        heads: m,
    };

    let mut records = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let offset = cur.pos;
        let bad = |reason: String| FeatureError::Inconsistent {
            record: i,
            offset,
            reason,
        };
        let image_id = cur.u32()?;
        let view_id = cur.u32()?;
        let is_labeled = match cur.take(1)?[0] {
            0 => false,
            1 => true,
            other => return Err(bad(format!("is_labeled byte {other} is not 0 or 1"))),
        };
        let label = match cur.i32()? {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(bad(format!("label {l} is negative"))),
        };
        let patch_features = cur.f32s(n, c)?;
        let cls_feature = cur.f32s(1, c)?;
        let head_attention = cur.f32s(m, n)?;
        let rec = FeatureRecord {
            image_id,
            view_id,
            patch_features,
            cls_feature,
            head_attention,
            label,
            is_labeled,
        };
        rec.check(dims, class_count).map_err(bad)?;
        records.push(rec);
    }
    if cur.pos != bytes.len() {
        return Err(FeatureError::Inconsistent {
            record: count,
            offset: cur.pos,
            reason: format!("{} trailing bytes after last record", bytes.len() - cur.pos),
        });
    }
    Ok(Dataset {
        dims,
        class_count,
        known_class_count,
        records,
    })
}
