//! On-disk formats: the `OTNN` embedding file, its JSONL alternative and the
//! `OTNM` model file.
//!
//! All binary integers and floats are little-endian. Embedding components
//! are stored as 32-bit floats, so a dataset normalized in memory is only
//! unit-norm within f32 precision after a roundtrip; consumers re-normalize
//! on ingestion.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabeledInstance, Role};
use crate::error::{Error, Result};
use crate::model::ModelParams;

pub const DATASET_MAGIC: &[u8; 4] = b"OTNN";
pub const DATASET_VERSION: u32 = 1;
pub const MODEL_MAGIC: &[u8; 4] = b"OTNM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Binary,
    Jsonl,
}

impl DataFormat {
    /// `.jsonl` / `.json` means JSONL, anything else binary.
    pub fn from_path(path: &Path) -> DataFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => DataFormat::Jsonl,
            _ => DataFormat::Binary,
        }
    }
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" | "bin" => Ok(DataFormat::Binary),
            "jsonl" => Ok(DataFormat::Jsonl),
            other => Err(Error::Config(format!("unknown data format '{other}'"))),
        }
    }
}

pub fn load_dataset(path: &Path, format: DataFormat, role: Role) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    match format {
        DataFormat::Binary => read_binary(reader, role),
        DataFormat::Jsonl => read_jsonl(reader, role),
    }
}

pub fn save_dataset(d: &Dataset, path: &Path, format: DataFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    match format {
        DataFormat::Binary => write_binary(d, &mut w),
        DataFormat::Jsonl => write_jsonl(d, &mut w),
    }
    .map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_binary<W: Write>(d: &Dataset, w: &mut W) -> std::io::Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(d.len() as u64).to_le_bytes())?;
    w.write_all(&(d.dim() as u32).to_le_bytes())?;
    for inst in d.instances() {
        w.write_all(&inst.id.to_le_bytes())?;
        w.write_all(&[inst.label])?;
        for &x in &inst.embedding {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated {what}: {e}")))
}

pub fn read_binary<R: Read>(mut r: R, role: Role) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    match r.read(&mut magic) {
        Ok(0) => return Err(Error::EmptyDataset),
        Ok(n) if n < 4 => read_exact_or(&mut r, &mut magic[n..], "header")?,
        Ok(_) => {}
        Err(e) => return Err(Error::Format(format!("unreadable header: {e}"))),
    }
    if &magic != DATASET_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"OTNN\"")));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    read_exact_or(&mut r, &mut b4, "header")?;
    let version = u32::from_le_bytes(b4);
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    read_exact_or(&mut r, &mut b8, "header")?;
    let count = u64::from_le_bytes(b8);
    read_exact_or(&mut r, &mut b4, "header")?;
    let dim = u32::from_le_bytes(b4) as usize;
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    if dim == 0 {
        return Err(Error::Format("header declares dimension 0".into()));
    }

    let mut instances = Vec::new();
    let mut payload = vec![0u8; dim * 4];
    for _ in 0..count {
        read_exact_or(&mut r, &mut b8, "record")?;
        let id = u64::from_le_bytes(b8);
        let mut label = [0u8; 1];
        read_exact_or(&mut r, &mut label, "record")?;
        r.read_exact(&mut payload).map_err(|_| Error::Integrity {
            id,
            reason: format!("record shorter than the declared dimension {dim}"),
        })?;
        let embedding = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        instances.push(LabeledInstance {
            id,
            label: label[0],
            embedding,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::Format(e.to_string()))? != 0 {
        return Err(Error::Format(format!("trailing bytes after {count} records")));
    }
    Dataset::new(instances, dim, role)
}

pub fn write_jsonl<W: Write>(d: &Dataset, w: &mut W) -> std::io::Result<()> {
    for inst in d.instances() {
        serde_json::to_writer(&mut *w, inst)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R, role: Role) -> Result<Dataset> {
    let mut instances: Vec<LabeledInstance> = Vec::new();
    let mut dim = None;
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: LabeledInstance =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        match dim {
            None => dim = Some(inst.embedding.len()),
            Some(d) if d != inst.embedding.len() => {
                return Err(Error::Integrity {
                    id: inst.id,
                    reason: format!("embedding has dimension {}, expected {d}", inst.embedding.len()),
                })
            }
            _ => {}
        }
        instances.push(inst);
    }
    let dim = dim.ok_or(Error::EmptyDataset)?;
    Dataset::new(instances, dim, role)
}

pub fn write_model<W: Write>(p: &ModelParams, w: &mut W) -> std::io::Result<()> {
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    for n in [p.input_dim(), p.hidden_dim(), p.num_classes()] {
        w.write_all(&(n as u32).to_le_bytes())?;
    }
    for x in p.to_flat() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_model<R: Read>(mut r: R) -> Result<ModelParams> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "model header")?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"OTNM\"")));
    }
    let mut b4 = [0u8; 4];
    read_exact_or(&mut r, &mut b4, "model header")?;
    let version = u32::from_le_bytes(b4);
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        read_exact_or(&mut r, &mut b4, "model header")?;
        *d = u32::from_le_bytes(b4) as usize;
    }
    let [input, hidden, classes] = dims;
    let mut p = ModelParams {
        enc_w: Array2::zeros((hidden, input)),
        enc_b: Array1::zeros(hidden),
        cls_w: Array2::zeros((classes, hidden)),
        cls_b: Array1::zeros(classes),
    };
    let mut flat = vec![0.0; p.num_params()];
    let mut b8 = [0u8; 8];
    for x in flat.iter_mut() {
        read_exact_or(&mut r, &mut b8, "model parameters")?;
        *x = f64::from_le_bytes(b8);
    }
    p.set_from_flat(&flat);
    Ok(p)
}

pub fn save_model(p: &ModelParams, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_model(p, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn small() -> Dataset {
        let instances = (0..3)
            .map(|i| LabeledInstance {
                id: 10 + i,
                label: (i % 2) as u8,
                embedding: vec![0.5 * i as f64, -1.25, 3.0, 0.1f32 as f64],
            })
            .collect();
        Dataset::new(instances, 4, Role::Source).unwrap()
    }

    #[test]
    fn binary_roundtrip_is_exact_for_f32_values() {
        let d = small();
        let mut buf = Vec::new();
        write_binary(&d, &mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 8 + 4 + 3 * (8 + 1 + 16));
        let back = read_binary(Cursor::new(buf), Role::Source).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn binary_header_layout() {
        let mut buf = Vec::new();
        write_binary(&small(), &mut buf).unwrap();
        assert_eq!(&buf[0..4], b"OTNN");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 4);
        assert_eq!(u64::from_le_bytes(buf[20..28].try_into().unwrap()), 10);
        assert_eq!(buf[28], 0);
    }

    #[test]
    fn jsonl_single_line() {
        let line = r#"{"id":7,"label":1,"embedding":[0.0,1.0]}"#;
        let d = read_jsonl(Cursor::new(line), Role::TargetTrain).unwrap();
        assert_eq!(d.dim(), 2);
        assert_eq!(d.instances()[0].id, 7);
        assert_eq!(d.instances()[0].label, crate::data::HATE);
    }

    #[test]
    fn jsonl_dimension_mismatch_names_the_id() {
        let text = "{\"id\":1,\"label\":0,\"embedding\":[1,2,3,4]}\n{\"id\":2,\"label\":1,\"embedding\":[1,2,3,4,5]}\n";
        match read_jsonl(Cursor::new(text), Role::Source) {
            Err(Error::Integrity { id, .. }) => assert_eq!(id, 2),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(
            read_binary(Cursor::new(Vec::new()), Role::Source),
            Err(Error::EmptyDataset)
        ));
        assert!(matches!(
            read_jsonl(Cursor::new(""), Role::Source),
            Err(Error::EmptyDataset)
        ));
        assert!(matches!(
            read_binary(Cursor::new(b"NOPE0000".to_vec()), Role::Source),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            read_jsonl(Cursor::new("{not json"), Role::Source),
            Err(Error::Format(_))
        ));

        let mut buf = Vec::new();
        write_binary(&small(), &mut buf).unwrap();
        let mut truncated = buf.clone();
        truncated.truncate(buf.len() - 3);
        assert!(matches!(
            read_binary(Cursor::new(truncated), Role::Source),
            Err(Error::Integrity { id: 12, .. })
        ));
        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(matches!(
            read_binary(Cursor::new(trailing), Role::Source),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn model_roundtrip_is_bit_exact() {
        let p = ModelParams::init(5, 3, 2, 42);
        let mut buf = Vec::new();
        write_model(&p, &mut buf).unwrap();
        assert_eq!(&buf[0..4], b"OTNM");
        let back = read_model(Cursor::new(buf)).unwrap();
        assert_eq!(back, p);
    }
}
