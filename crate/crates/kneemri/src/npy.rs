//! NPY volume files: `s x height x width` arrays of `|u1`, `<f4` or `<f8`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use kneemri_core::{MriVolume, Plane};
use npyz::{DType, NpyFile, Order};

use crate::error::{IoContext, PipelineError, Result};

/// Raw array contents after the header checks.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyVolume {
    pub shape: [usize; 3],
    /// Intensities in `[0, 1]`, C order.
    pub data: Vec<f64>,
}

enum Element {
    U8,
    F32,
    F64,
}

fn open(path: &Path) -> Result<NpyFile<BufReader<File>>> {
    let file = File::open(path).at(path)?;
    NpyFile::new(BufReader::new(file)).map_err(|e| PipelineError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn check_header<R: std::io::Read>(path: &Path, npy: &NpyFile<R>) -> Result<(Element, [usize; 3])> {
    let shape_err = |reason: String| PipelineError::Shape {
        path: path.to_path_buf(),
        reason,
    };
    if npy.order() == Order::Fortran {
        return Err(shape_err("Fortran order".into()));
    }
    let shape = npy.shape();
    if shape.len() != 3 {
        return Err(shape_err(format!("expected 3 dimensions, got {shape:?}")));
    }
    let descr = match npy.dtype() {
        DType::Plain(ty) => ty.to_string(),
        other => other.descr(),
    };
    let element = match descr.as_str() {
        "|u1" => Element::U8,
        "<f4" => Element::F32,
        "<f8" => Element::F64,
        _ => {
            return Err(PipelineError::DType {
                path: path.to_path_buf(),
                descr,
            })
        }
    };
    Ok((element, [shape[0] as usize, shape[1] as usize, shape[2] as usize]))
}

/// Shape of a volume file, read from the header alone.
pub fn read_npy_shape(path: &Path) -> Result<[usize; 3]> {
    let npy = open(path)?;
    Ok(check_header(path, &npy)?.1)
}

/// Reads a volume file and rescales it to `[0, 1]`: bytes are divided by
/// 255, floats are clipped.
pub fn read_npy(path: &Path) -> Result<NpyVolume> {
    let npy = open(path)?;
    let (element, shape) = check_header(path, &npy)?;
    let truncated = |e: std::io::Error| PipelineError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let data: Vec<f64> = match element {
        Element::U8 => npy
            .into_vec::<u8>()
            .map_err(truncated)?
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect(),
        Element::F32 => npy
            .into_vec::<f32>()
            .map_err(truncated)?
            .into_iter()
            .map(|v| clip(v as f64))
            .collect(),
        Element::F64 => npy.into_vec::<f64>().map_err(truncated)?.into_iter().map(clip).collect(),
    };
    Ok(NpyVolume { shape, data })
}

// NaN maps to 0 so the volume invariant holds.
fn clip(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

pub fn load_volume(path: &Path, case_id: &str, plane: Plane) -> Result<MriVolume> {
    let NpyVolume { shape, data } = read_npy(path)?;
    MriVolume::new(case_id, plane, shape[0], shape[1], shape[2], data).map_err(|e| PipelineError::Shape {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes a `|u1` array with the header padded to a multiple of 64 bytes,
/// as numpy does.
pub fn write_npy_u8(path: &Path, shape: [usize; 3], data: &[u8]) -> Result<()> {
    assert_eq!(shape.iter().product::<usize>(), data.len(), "shape does not match data");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(path)?;
    }
    let mut header = format!(
        "{{'descr': '|u1', 'fortran_order': False, 'shape': ({}, {}, {}), }}",
        shape[0], shape[1], shape[2]
    );
    // magic (6) + version (2) + length (2) + text + newline
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');

    let mut out = BufWriter::new(File::create(path).at(path)?);
    out.write_all(b"\x93NUMPY\x01\x00").at(path)?;
    out.write_all(&(header.len() as u16).to_le_bytes()).at(path)?;
    out.write_all(header.as_bytes()).at(path)?;
    out.write_all(data).at(path)?;
    out.flush().at(path)
}

/// Quantizes a volume to bytes (`round(255 * v)`) and writes it.
pub fn save_volume(path: &Path, vol: &MriVolume) -> Result<()> {
    let bytes: Vec<u8> = vol.data().iter().map(|&v| quantize(v)).collect();
    write_npy_u8(path, [vol.slices(), vol.height(), vol.width()], &bytes)
}

pub fn quantize(v: f64) -> u8 {
    (255.0 * v).round().clamp(0.0, 255.0) as u8
}
