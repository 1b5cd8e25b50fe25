//! On-disk formats.
//!
//! * datasets: binary `JDCE` container plus a JSON manifest `<file>.json`;
//! * matrices: binary `JDCM` container;
//! * dictionaries, networks and tuned hyperparameters: JSON records, with
//!   large matrices stored next to them in `JDCM` files.
//!
//! Integers are little-endian `u32`, floats little-endian IEEE-754 `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{Dataset, SceneConfig};
use crate::dictionary::{AnalyticDictionary, DictionarySource};
use crate::error::{Error, Result};
use crate::linalg::{frobenius, lift_dictionary, CMatrix, Dims, RMatrix, RealizedSystem};
use crate::unfolded::{NetworkRecord, UnfoldedNetwork};

pub const DATASET_MAGIC: &[u8; 4] = b"JDCE";
pub const MATRIX_MAGIC: &[u8; 4] = b"JDCM";
pub const FORMAT_VERSION: u32 = 1;

/// Opens a file, reporting a missing one as a configuration error.
pub fn open_artifact(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Config(format!("missing file {}", path.display())),
        _ => Error::Io(e),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let r = BufReader::new(open_artifact(path)?);
    serde_json::from_reader(r).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// `<path>.json`
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub dims: Dims,
    pub count: usize,
    pub config: SceneConfig,
    pub master_seed: u64,
}

impl DatasetManifest {
    pub fn of(data: &Dataset) -> Self {
        Self {
            format: "JDCE".into(),
            version: FORMAT_VERSION,
            dims: Dims { l: data.config.pilot_len, n: data.config.n_devices, m: data.config.n_antennas },
            count: data.count(),
            config: data.config.clone(),
            master_seed: data.master_seed,
        }
    }

    /// SHA-256 of the compact manifest JSON.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("manifest serializes");
        format!("{:x}", Sha256::digest(json))
    }
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s<'a>(w: &mut impl Write, vals: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_f64s(r: &mut impl Read, count: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

fn truncated(e: std::io::Error) -> Error {
    match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("file is truncated".into()),
        _ => Error::Io(e),
    }
}

fn check_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(truncated)?;
    if &m != magic {
        return Err(Error::Format(format!("bad magic {:?}, expected {:?}", m, std::str::from_utf8(magic).unwrap_or("?"))));
    }
    let version = get_u32(r)? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    Ok(())
}

/// Writes the `JDCE` container and its manifest.
pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let manifest = DatasetManifest::of(data);
    let Dims { l, n, m } = manifest.dims;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    put_u32(&mut w, FORMAT_VERSION as usize)?;
    for v in [l, n, m, data.count()] {
        put_u32(&mut w, v)?;
    }
    for sys in &data.systems {
        put_f64s(&mut w, sys.x_star_tilde.as_standard_layout().iter())?;
        put_f64s(&mut w, sys.y_tilde.as_standard_layout().iter())?;
    }
    for z in data.pilot.iter() {
        put_f64s(&mut w, [z.re, z.im].iter())?;
    }
    w.flush()?;
    write_json(&manifest_path(path), &manifest)
}

/// Reads a dataset written by [`write_dataset`]. `‖Z̃‖_F` is recomputed
/// from `Ỹ - S̃X̃*`.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = read_json(&manifest_path(path))?;
    let mut r = BufReader::new(open_artifact(path)?);
    check_magic(&mut r, DATASET_MAGIC)?;
    let (l, n, m, count) = (get_u32(&mut r)?, get_u32(&mut r)?, get_u32(&mut r)?, get_u32(&mut r)?);
    if (Dims { l, n, m }) != manifest.dims || count != manifest.count {
        return Err(Error::Format(format!("{}: header disagrees with its manifest", path.display())));
    }
    let mut raw = Vec::with_capacity(count);
    for _ in 0..count {
        let x = get_f64s(&mut r, 2 * n * m)?;
        let y = get_f64s(&mut r, 2 * l * m)?;
        raw.push((x, y));
    }
    let p = get_f64s(&mut r, 2 * l * n)?;
    let pilot = CMatrix::from_shape_vec((l, n), p.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect())
        .map_err(|e| Error::Format(e.to_string()))?;
    let s_tilde = Arc::new(lift_dictionary(&pilot));
    let systems = raw
        .into_iter()
        .map(|(x, y)| {
            let x = RMatrix::from_shape_vec((2 * n, m), x).map_err(|e| Error::Format(e.to_string()))?;
            let y = RMatrix::from_shape_vec((2 * l, m), y).map_err(|e| Error::Format(e.to_string()))?;
            let noise = frobenius(&(&y - &s_tilde.dot(&x)));
            RealizedSystem::new(s_tilde.clone(), y, x, noise)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { systems, config: manifest.config, pilot, master_seed: manifest.master_seed })
}

pub fn write_matrix(path: &Path, a: &RMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MATRIX_MAGIC)?;
    put_u32(&mut w, FORMAT_VERSION as usize)?;
    put_u32(&mut w, a.nrows())?;
    put_u32(&mut w, a.ncols())?;
    put_f64s(&mut w, a.as_standard_layout().iter())?;
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<RMatrix> {
    let mut r = BufReader::new(open_artifact(path)?);
    check_magic(&mut r, MATRIX_MAGIC)?;
    let (rows, cols) = (get_u32(&mut r)?, get_u32(&mut r)?);
    RMatrix::from_shape_vec((rows, cols), get_f64s(&mut r, rows * cols)?).map_err(|e| Error::Format(e.to_string()))
}

/// Dictionary metadata; the matrix lives in the `JDCM` file `matrix`,
/// relative to the record.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DictionaryRecord {
    source: DictionarySource,
    final_objective: f64,
    max_constraint_residual: f64,
    objective_trace: Vec<f64>,
    matrix: String,
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().map(|p| p.join(name)).unwrap_or_else(|| PathBuf::from(name))
}

fn file_stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("matrix").to_string()
}

/// Writes `<stem>.json` and `<stem>.jdcm`.
pub fn save_dictionary(path: &Path, dict: &AnalyticDictionary) -> Result<()> {
    let matrix = format!("{}.jdcm", file_stem(path));
    write_matrix(&sibling(path, &matrix), &dict.b)?;
    let rec = DictionaryRecord {
        source: dict.source,
        final_objective: dict.final_objective,
        max_constraint_residual: dict.max_constraint_residual,
        objective_trace: dict.objective_trace.clone(),
        matrix,
    };
    write_json(path, &rec)
}

pub fn load_dictionary(path: &Path) -> Result<AnalyticDictionary> {
    let rec: DictionaryRecord = read_json(path)?;
    Ok(AnalyticDictionary {
        b: read_matrix(&sibling(path, &rec.matrix))?,
        source: rec.source,
        final_objective: rec.final_objective,
        max_constraint_residual: rec.max_constraint_residual,
        objective_trace: rec.objective_trace,
    })
}

/// Writes a network record; `dictionary_file` is relative to `path`.
pub fn save_network(path: &Path, net: &UnfoldedNetwork, dictionary_file: Option<&str>) -> Result<()> {
    write_json(path, &NetworkRecord::from_network(net, dictionary_file.map(str::to_string)))
}

/// Reads a network record and the dictionary it references.
pub fn load_network(path: &Path) -> Result<UnfoldedNetwork> {
    let rec: NetworkRecord = read_json(path)?;
    let dict = match &rec.dictionary {
        Some(name) => Some(Arc::new(load_dictionary(&sibling(path, name))?)),
        None => None,
    };
    rec.into_network(dict)
}
