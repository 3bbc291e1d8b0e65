//! Minimal npy (format version 1.0) reader and writer for little-endian
//! f64 arrays in C order. Covers what this crate stores on disk
//! (importance maps, human participant maps) and what numpy writes by
//! default for such arrays.

use std::path::Path;

use ndarray::ArrayD;

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";

fn header_dict(shape: &[usize]) -> String {
    let shape_txt = match shape.len() {
        0 => "()".to_string(),
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape_txt}, }}")
}

/// Writes `array` as an npy v1.0 file. Elements are emitted in logical
/// (row-major) order regardless of the in-memory layout.
pub fn write_npy(path: &Path, array: &ArrayD<f64>) -> Result<()> {
    let mut dict = header_dict(array.shape());
    // Total header (magic + version + length field + dict + newline) pads
    // to a multiple of 64, newline last, as the format prescribes.
    let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    dict.push_str(&" ".repeat(pad));
    dict.push('\n');

    let mut out = Vec::with_capacity(MAGIC.len() + 4 + dict.len() + array.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1u8, 0u8]);
    let header_len = u16::try_from(dict.len())
        .map_err(|_| Error::Validation("npy header too long".into()))?;
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    for v in array.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn dict_value<'a>(dict: &'a str, key: &str, path: &Path) -> Result<&'a str> {
    let pattern = format!("'{key}':");
    let start = dict
        .find(&pattern)
        .ok_or_else(|| Error::parse(path, format!("npy header missing key {key}")))?
        + pattern.len();
    Ok(dict[start..].trim_start())
}

/// Reads an npy file written by [`write_npy`] or by numpy. Only
/// little-endian f64 C-order arrays are accepted.
pub fn read_npy(path: &Path) -> Result<ArrayD<f64>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() < 10 || &raw[..6] != MAGIC {
        return Err(Error::parse(path, "not an npy file"));
    }
    let (major, minor) = (raw[6], raw[7]);
    if major != 1 || minor != 0 {
        return Err(Error::parse(
            path,
            format!("unsupported npy version {major}.{minor}"),
        ));
    }
    let header_len = u16::from_le_bytes([raw[8], raw[9]]) as usize;
    let data_start = 10 + header_len;
    if raw.len() < data_start {
        return Err(Error::parse(path, "npy header truncated"));
    }
    let dict = std::str::from_utf8(&raw[10..data_start])
        .map_err(|_| Error::parse(path, "npy header is not ASCII"))?;

    let descr = dict_value(dict, "descr", path)?;
    if !descr.starts_with("'<f8'") {
        return Err(Error::parse(
            path,
            format!("unsupported npy dtype, need '<f8': {descr}"),
        ));
    }
    let order = dict_value(dict, "fortran_order", path)?;
    if !order.starts_with("False") {
        return Err(Error::parse(path, "fortran-order npy files are not supported"));
    }
    let shape_txt = dict_value(dict, "shape", path)?;
    let open = shape_txt
        .find('(')
        .ok_or_else(|| Error::parse(path, "npy shape is not a tuple"))?;
    let close = shape_txt
        .find(')')
        .ok_or_else(|| Error::parse(path, "npy shape is not a tuple"))?;
    let mut shape = Vec::new();
    for tok in shape_txt[open + 1..close].split(',') {
        let tok = tok.trim();
        if tok.is_empty() {
            continue;
        }
        shape.push(
            tok.parse::<usize>()
                .map_err(|_| Error::parse(path, format!("bad npy dimension `{tok}`")))?,
        );
    }

    let count: usize = shape.iter().product();
    if raw.len() != data_start + count * 8 {
        return Err(Error::parse(
            path,
            format!(
                "npy payload is {} bytes, shape {:?} needs {}",
                raw.len() - data_start,
                shape,
                count * 8
            ),
        ));
    }
    let values: Vec<f64> = raw[data_start..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    ArrayD::from_shape_vec(shape, values)
        .map_err(|e| Error::parse(path, format!("npy shape mismatch: {e}")))
}
