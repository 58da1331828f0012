//! Versioned binary checkpoints.
//!
//! Layout: magic bytes `EBLL`, format version as u16, array count as u32,
//! then per array: name length as u16 + UTF-8 name bytes, rank as u8, dims
//! as u32s, payload as little-endian 64-bit reals. All integer fields are
//! little-endian. Loading is the bit-exact inverse of saving.
//!
//! Sample-id arrays pack 64-bit ids through their raw bit patterns
//! (`f64::from_bits`); they are storage, never arithmetic.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autoencoder::Autoencoder;
use crate::data::{SampleId, TaskId};
use crate::error::{Error, Result};
use crate::lifelong::{TaskMemory, TaskMemoryEntry};
use crate::model::{Activation, ArchSpec, FrozenStack, TaskModel};
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"EBLL";
const VERSION: u16 = 1;

pub fn write_archive(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointTruncated {
                context: context.to_string(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, context: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, context)?.try_into().unwrap()))
    }

    fn u32(&mut self, context: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }
}

pub fn read_archive(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::CheckpointMagic {
            found: magic.try_into().unwrap(),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            supported: VERSION,
        });
    }
    let count = r.u32("array count")? as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let ctx = format!("array {i} header");
        let name_len = r.u16(&ctx)? as usize;
        let name = String::from_utf8(r.take(name_len, &ctx)?.to_vec())
            .map_err(|_| Error::CheckpointTruncated {
                context: format!("array {i} name is not utf-8"),
            })?;
        let rank = r.take(1, &ctx)?[0] as usize;
        if rank == 0 || rank > 2 {
            return Err(Error::CheckpointTruncated {
                context: format!("array {name} has unsupported rank {rank}"),
            });
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32(&format!("array {name} dims"))? as usize);
        }
        let n: usize = dims.iter().product();
        let payload = r.take(n * 8, &format!("array {name} payload"))?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name.clone(), Tensor::new(dims, data).map_err(|_| {
            Error::CheckpointTruncated {
                context: format!("array {name} has invalid dims"),
            }
        })?));
    }
    Ok(out)
}

fn to_map(entries: Vec<(String, Tensor)>) -> BTreeMap<String, Tensor> {
    entries.into_iter().collect()
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingCheckpoint(path.display().to_string()))
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

pub fn save_model(model: &TaskModel, path: &Path) -> Result<()> {
    write_archive(path, &model.export_arrays())
}

/// Rebuilds a model from its arrays. Widths come from the array shapes; the
/// activation convention (hidden layers rectified, final head layer linear)
/// matches construction.
pub fn load_model(path: &Path) -> Result<TaskModel> {
    require_file(path)?;
    let arrays = to_map(read_archive(path)?);

    let stack_widths = |prefix: &str| -> Vec<usize> {
        let mut widths = Vec::new();
        let mut i = 0;
        while let Some(w) = arrays.get(&format!("{prefix}.{i}.w")) {
            widths.push(w.rows());
            i += 1;
        }
        widths
    };

    let feature_widths = stack_widths("feature");
    if feature_widths.is_empty() {
        return Err(Error::CheckpointTruncated {
            context: "model archive has no feature layers".into(),
        });
    }
    let input_dim = arrays["feature.0.w"].cols();
    let shared_widths = stack_widths("shared");

    // heads: head{t}.{i}.w
    let mut head_tasks: Vec<u32> = arrays
        .keys()
        .filter_map(|k| {
            k.strip_prefix("head")
                .and_then(|rest| rest.split('.').next())
                .and_then(|t| t.parse::<u32>().ok())
        })
        .collect();
    head_tasks.sort_unstable();
    head_tasks.dedup();

    let mut head_hidden = Vec::new();
    let mut head_classes = Vec::new();
    for &t in &head_tasks {
        let widths = stack_widths(&format!("head{t}"));
        if widths.is_empty() {
            return Err(Error::CheckpointTruncated {
                context: format!("head{t} has no layers"),
            });
        }
        head_classes.push((t, *widths.last().unwrap()));
        head_hidden = widths[..widths.len() - 1].to_vec();
    }

    let arch = ArchSpec {
        input_dim,
        feature_widths,
        shared_widths,
        head_hidden,
    };
    let mut model = TaskModel::new(&arch, 0)?;
    for (t, classes) in head_classes {
        model.add_head(TaskId(t), classes, 0)?;
    }
    model.import_arrays(&arrays)?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Autoencoder
// ---------------------------------------------------------------------------

pub fn save_autoencoder(ae: &Autoencoder, path: &Path) -> Result<()> {
    write_archive(path, &ae.export_arrays("ae"))
}

pub fn load_autoencoder(path: &Path) -> Result<Autoencoder> {
    require_file(path)?;
    let arrays = to_map(read_archive(path)?);
    Autoencoder::from_arrays("ae", &arrays)
}

// ---------------------------------------------------------------------------
// Task memory
// ---------------------------------------------------------------------------

pub fn save_memory(memory: &TaskMemory, path: &Path) -> Result<()> {
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    if !memory.entries().is_empty() {
        entries.push((
            "memory.task_order".into(),
            Tensor::vector(memory.entries().iter().map(|e| e.task.0 as f64).collect()),
        ));
    }
    for e in memory.entries() {
        let p = format!("task{}", e.task.0);
        entries.push((format!("{p}.alpha"), Tensor::vector(vec![e.alpha])));
        entries.push((
            format!("{p}.class_count"),
            Tensor::vector(vec![e.class_count as f64]),
        ));
        entries.extend(e.head_star.export_arrays(&format!("{p}.head")));
        if let Some(ae) = &e.encoder {
            entries.extend(ae.export_arrays(&format!("{p}.ae")));
        }
        if !e.recorded_targets.is_empty() {
            let ids: Vec<f64> = e
                .recorded_targets
                .keys()
                .map(|id| f64::from_bits(id.0))
                .collect();
            let k = e.class_count;
            let mut rows = Vec::with_capacity(ids.len() * k);
            for t in e.recorded_targets.values() {
                rows.extend_from_slice(t.data());
            }
            entries.push((format!("{p}.sample_ids"), Tensor::vector(ids)));
            entries.push((
                format!("{p}.targets"),
                Tensor::matrix(e.recorded_targets.len(), k, rows)?,
            ));
        }
        if !e.recorded_codes.is_empty() {
            let c = e
                .recorded_codes
                .values()
                .next()
                .map(|t| t.len())
                .unwrap_or(1);
            let mut rows = Vec::with_capacity(e.recorded_codes.len() * c);
            for t in e.recorded_codes.values() {
                rows.extend_from_slice(t.data());
            }
            entries.push((
                format!("{p}.codes"),
                Tensor::matrix(e.recorded_codes.len(), c, rows)?,
            ));
        }
    }
    write_archive(path, &entries)
}

pub fn load_memory(path: &Path) -> Result<TaskMemory> {
    require_file(path)?;
    let arrays = to_map(read_archive(path)?);
    let mut memory = TaskMemory::new();
    let Some(order) = arrays.get("memory.task_order") else {
        return Ok(memory);
    };
    for &task_bits in order.data() {
        let t = task_bits as u32;
        let p = format!("task{t}");
        let alpha = arrays
            .get(&format!("{p}.alpha"))
            .ok_or_else(|| Error::CheckpointTruncated {
                context: format!("{p}.alpha missing"),
            })?
            .data()[0];
        let class_count = arrays
            .get(&format!("{p}.class_count"))
            .ok_or_else(|| Error::CheckpointTruncated {
                context: format!("{p}.class_count missing"),
            })?
            .data()[0] as usize;
        let head_star =
            FrozenStack::from_arrays(&format!("{p}.head"), &arrays, Activation::Identity)?;
        let encoder = if arrays.contains_key(&format!("{p}.ae.enc.w")) {
            Some(Autoencoder::from_arrays(&format!("{p}.ae"), &arrays)?)
        } else {
            None
        };
        let mut recorded_targets = BTreeMap::new();
        let mut recorded_codes = BTreeMap::new();
        if let (Some(ids), Some(targets)) = (
            arrays.get(&format!("{p}.sample_ids")),
            arrays.get(&format!("{p}.targets")),
        ) {
            let k = targets.cols();
            for (i, idbits) in ids.data().iter().enumerate() {
                let id = SampleId(idbits.to_bits());
                let row = targets.data()[i * k..(i + 1) * k].to_vec();
                recorded_targets.insert(id, Tensor::vector(row));
            }
            if let Some(codes) = arrays.get(&format!("{p}.codes")) {
                let c = codes.cols();
                for (i, idbits) in ids.data().iter().enumerate() {
                    let id = SampleId(idbits.to_bits());
                    let row = codes.data()[i * c..(i + 1) * c].to_vec();
                    recorded_codes.insert(id, Tensor::vector(row));
                }
            }
        }
        memory.push_entry(TaskMemoryEntry {
            task: TaskId(t),
            class_count,
            head_star,
            encoder,
            alpha,
            recorded_targets,
            recorded_codes,
        });
    }
    Ok(memory)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn archive_roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.ebll");
        let entries = vec![
            ("alpha".to_string(), Tensor::vector(vec![1.5, -2.25, 1e-300])),
            (
                "w".to_string(),
                Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.4, f64::MIN_POSITIVE, 9.9]).unwrap(),
            ),
        ];
        write_archive(&path, &entries).unwrap();
        let back = read_archive(&path).unwrap();
        assert_eq!(back.len(), entries.len());
        for ((n1, t1), (n2, t2)) in entries.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(t1.bits_checksum(), t2.bits_checksum());
        }
    }

    #[test]
    fn wrong_magic_is_distinct_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ebll");
        std::fs::write(&path, b"XBLL\x01\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(
            read_archive(&path).unwrap_err(),
            Error::CheckpointMagic { .. }
        ));
    }

    #[test]
    fn wrong_version_is_distinct_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v9.ebll");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"EBLL");
        bytes.extend_from_slice(&9u16.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_archive(&path).unwrap_err(),
            Error::CheckpointVersion { found: 9, .. }
        ));
    }

    #[test]
    fn truncated_payload_is_distinct_error_not_crash() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.ebll");
        let entries = vec![("x".to_string(), Tensor::vector(vec![1.0; 16]))];
        write_archive(&path, &entries).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 9]).unwrap();
        assert!(matches!(
            read_archive(&path).unwrap_err(),
            Error::CheckpointTruncated { .. }
        ));
    }

    #[test]
    fn missing_file_is_missing_checkpoint() {
        let dir = tempdir().unwrap();
        let err = load_model(&dir.path().join("absent.ebll")).unwrap_err();
        assert!(matches!(err, Error::MissingCheckpoint(_)));
        assert_eq!(err.exit_code(), 4);
    }
}
