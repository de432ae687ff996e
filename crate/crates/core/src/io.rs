//! Binary dataset and checkpoint files, atomic writes and key=value records.
//!
//! Dataset layout (little-endian): `"RDS1"`, version `u16`, `n`, `m`, `k`
//! (`u32` each), range flag `u8`, `lo` and `hi` (`f64`), then `n·m` features
//! (`f64`, row-major), `n` labels (`i32`), and a `u32`-length-prefixed JSON
//! provenance block. Checkpoints (`"RDM1"`) hold the layer sizes, the
//! parameters in declaration order and the same trailing JSON block.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::Value;

use crate::data::{Dataset, ValueRange};
use crate::error::{Error, Result};
use crate::models::{Architecture, Model};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"RDS1";
pub const MODEL_MAGIC: &[u8; 4] = b"RDM1";
pub const FORMAT_VERSION: u16 = 1;
/// Bytes before the feature payload.
pub const DATASET_HEADER_LEN: usize = 4 + 2 + 4 * 3 + 1 + 8 * 2;

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::param(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn u32_len(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::param(format!("{what} {v} exceeds u32")))
}

fn metadata_bytes(meta: &Value) -> Result<Vec<u8>> {
    serde_json::to_vec(meta).map_err(|e| Error::Config(format!("provenance: {e}")))
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let (n, m) = (ds.len(), ds.width());
    let meta = metadata_bytes(ds.provenance())?;
    let mut out = Vec::with_capacity(DATASET_HEADER_LEN + n * m * 8 + n * 4 + 4 + meta.len());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_len(n, "row count")?.to_le_bytes());
    out.extend_from_slice(&u32_len(m, "width")?.to_le_bytes());
    out.extend_from_slice(&u32_len(ds.num_classes(), "class count")?.to_le_bytes());
    let (flag, lo, hi) = match ds.range() {
        Some(r) => (1u8, r.lo, r.hi),
        None => (0u8, 0.0, 0.0),
    };
    out.push(flag);
    out.extend_from_slice(&lo.to_le_bytes());
    out.extend_from_slice(&hi.to_le_bytes());
    for v in ds.features().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for y in ds.labels() {
        out.extend_from_slice(&y.to_le_bytes());
    }
    out.extend_from_slice(&u32_len(meta.len(), "metadata length")?.to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(
                self.pos,
                format!("truncated {what}: need {len} bytes, {} left", self.buf.len() - self.pos),
            )),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = count
            .checked_mul(8)
            .ok_or_else(|| self.fail(self.pos, format!("{what} size overflows")))?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(self.fail(0, format!("bad magic {got:?}, expected {:?}", std::str::from_utf8(expected).unwrap())));
        }
        let at = self.pos;
        let version = self.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(self.fail(at, format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn metadata(&mut self) -> Result<Value> {
        let len = self.u32("metadata length")? as usize;
        let at = self.pos;
        let raw = self.take(len, "metadata")?;
        let meta = serde_json::from_slice(raw).map_err(|e| self.fail(at, format!("metadata JSON: {e}")))?;
        if self.pos != self.buf.len() {
            return Err(self.fail(self.pos, format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(meta)
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut c = Cursor { buf, pos: 0 };
    c.magic(DATASET_MAGIC)?;
    let n = c.u32("row count")? as usize;
    let m = c.u32("width")? as usize;
    let k_at = c.pos;
    let k = c.u32("class count")? as usize;
    let flag_at = c.pos;
    let flag = c.u8("range flag")?;
    let lo = c.f64s(1, "range")?[0];
    let hi = c.f64s(1, "range")?[0];
    let range = match flag {
        0 => None,
        1 => Some(ValueRange::new(lo, hi).map_err(|e| c.fail(flag_at + 1, e.to_string()))?),
        f => return Err(c.fail(flag_at, format!("range flag {f} is not 0 or 1"))),
    };
    let feat_at = c.pos;
    let count = n
        .checked_mul(m)
        .ok_or_else(|| c.fail(4 + 2, "declared size overflows"))?;
    let features = c.f64s(count, "features")?;
    let labels: Vec<i32> = c
        .take(n * 4, "labels")?
        .chunks_exact(4)
        .map(|b| i32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let meta = c.metadata()?;
    let tensor = Tensor::matrix(n, m, features).map_err(|e| c.fail(feat_at, e.to_string()))?;
    let ds = Dataset::new(tensor, labels, range).map_err(|e| c.fail(feat_at, e.to_string()))?;
    if ds.num_classes() != k {
        return Err(c.fail(k_at, format!("declared {k} classes, labels have {}", ds.num_classes())));
    }
    Ok(ds.with_provenance(meta))
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_atomic(path, &encode_dataset(ds)?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&buf).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn encode_model(model: &Model, meta: &Value) -> Result<Vec<u8>> {
    let sizes = model.architecture().layer_sizes();
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_len(sizes.len(), "layer count")?.to_le_bytes());
    for s in &sizes {
        out.extend_from_slice(&u32_len(*s, "layer size")?.to_le_bytes());
    }
    for p in model.params() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = metadata_bytes(meta)?;
    out.extend_from_slice(&u32_len(meta.len(), "metadata length")?.to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

pub fn decode_model(buf: &[u8]) -> Result<(Model, Value)> {
    let mut c = Cursor { buf, pos: 0 };
    c.magic(MODEL_MAGIC)?;
    let sizes_at = c.pos;
    let count = c.u32("layer count")? as usize;
    if count > 1024 {
        return Err(c.fail(sizes_at, format!("implausible layer count {count}")));
    }
    let sizes = (0..count)
        .map(|_| c.u32("layer size").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let arch = Architecture::from_layer_sizes(&sizes).map_err(|e| c.fail(sizes_at, e.to_string()))?;
    let mut params = Vec::new();
    for shape in arch.param_shapes() {
        let at = c.pos;
        let data = c.f64s(shape.iter().product(), "parameters")?;
        params.push(Tensor::new(shape, data).map_err(|e| c.fail(at, e.to_string()))?);
    }
    let meta = c.metadata()?;
    Ok((Model::new(arch, params)?, meta))
}

pub fn write_model(path: &Path, model: &Model, meta: &Value) -> Result<()> {
    write_atomic(path, &encode_model(model, meta)?)
}

pub fn read_model(path: &Path) -> Result<(Model, Value)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&buf)
}

/// Flattens a JSON document into `dotted.key=value` lines, arrays indexed
/// by position.
pub fn records(value: &Value) -> Vec<String> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
        let join = |k: &str| {
            if prefix.is_empty() {
                k.to_string()
            } else {
                format!("{prefix}.{k}")
            }
        };
        match v {
            Value::Object(map) => {
                for (k, v) in map {
                    walk(&join(k), v, out);
                }
            }
            Value::Array(items) => {
                for (i, v) in items.iter().enumerate() {
                    walk(&join(&i.to_string()), v, out);
                }
            }
            Value::String(s) => out.push(format!("{prefix}={s}")),
            other => out.push(format!("{prefix}={other}")),
        }
    }
    let mut out = Vec::new();
    walk("", value, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Architecture;
    use crate::rng::RngStream;
    use proptest::prelude::*;
    use serde_json::json;

    fn small() -> Dataset {
        Dataset::new(Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 3.25, 1e-300, -0.0]).unwrap(), vec![1, -1, 1], None)
            .unwrap()
            .with_provenance(json!({"generator": "test", "seed": 7}))
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = small();
        let bytes = encode_dataset(&ds).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(encode_dataset(&back).unwrap(), bytes);
    }

    #[test]
    fn single_row_size() {
        let ds = Dataset::new(Tensor::matrix(1, 1, vec![1.0]).unwrap(), vec![0], None).unwrap();
        let meta = serde_json::to_vec(ds.provenance()).unwrap().len();
        assert_eq!(encode_dataset(&ds).unwrap().len(), DATASET_HEADER_LEN + 8 + 4 + 4 + meta);
        assert_eq!(DATASET_HEADER_LEN, 35);
    }

    #[test]
    fn corrupted_magic_names_offset_zero() {
        let mut bytes = encode_dataset(&small()).unwrap();
        bytes[0] = b'X';
        match decode_dataset(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_and_version_errors() {
        let bytes = encode_dataset(&small()).unwrap();
        for cut in [3, 10, DATASET_HEADER_LEN + 5, bytes.len() - 1] {
            assert!(matches!(decode_dataset(&bytes[..cut]), Err(Error::Format { .. })), "{cut}");
        }
        let mut v = bytes.clone();
        v[4] = 9;
        match decode_dataset(&v) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_dataset(&extra).is_err());
    }

    #[test]
    fn range_survives() {
        let r = ValueRange::new(0.0, 1.0).unwrap();
        let ds = Dataset::new(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap(), vec![0, 1], Some(r)).unwrap();
        assert_eq!(decode_dataset(&encode_dataset(&ds).unwrap()).unwrap().range(), Some(r));
    }

    #[test]
    fn files_and_models() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("d.rds");
        write_dataset(&p, &small()).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), small());
        let missing = read_dataset(&dir.path().join("nope.rds")).unwrap_err();
        assert!(missing.to_string().contains("nope.rds"));

        let model = Architecture::mlp(3, &[4], 2).init(&mut RngStream::new(1));
        let mp = dir.path().join("m.rdm");
        write_model(&mp, &model, &json!({"k": 1})).unwrap();
        let (back, meta) = read_model(&mp).unwrap();
        assert_eq!(back, model);
        assert_eq!(meta, json!({"k": 1}));
    }

    #[test]
    fn records_flatten() {
        let r = records(&json!({"a": {"b": 1, "c": [true, "x"]}}));
        assert_eq!(r, vec!["a.b=1", "a.c.0=true", "a.c.1=x"]);
    }

    proptest! {
        #[test]
        fn arbitrary_round_trip(
            n in 1usize..6,
            m in 1usize..5,
            seed in any::<u64>(),
            labels in proptest::collection::vec(-3i32..3, 6),
        ) {
            let mut rng = RngStream::new(seed);
            let x = rng.sample_gaussian(0.0, 100.0, &[n, m]).unwrap();
            let ds = Dataset::new(x, labels[..n].to_vec(), None).unwrap()
                .with_provenance(json!({"seed": seed}));
            let bytes = encode_dataset(&ds).unwrap();
            let back = decode_dataset(&bytes).unwrap();
            prop_assert_eq!(&back, &ds);
            prop_assert_eq!(encode_dataset(&back).unwrap(), bytes);
        }
    }
}
