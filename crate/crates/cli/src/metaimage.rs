//! MetaImage reader and writer (`.mha` with inline data, `.mhd` + raw file).
//!
//! Axis convention: MetaImage lists the fastest-varying axis first, so
//! `DimSize = D W H` and `ElementSpacing = sd sw sh` for our `(h, w, d)`
//! grids with `d` fastest. The payload order then matches memory order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mcbo_core::volgrid::{DisplacementField, Grid, Vec3, Volume3};

use crate::error::CliError;

pub const FIELD_COMMENT: &str =
    "displacement (dh,dw,dd) in voxel units of this grid; v maps to v+phi(v) in moving coordinates";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementType {
    Float,
    Short,
    UChar,
}

impl ElementType {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "MET_FLOAT" => Some(Self::Float),
            "MET_SHORT" => Some(Self::Short),
            "MET_UCHAR" => Some(Self::UChar),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            Self::Float => 4,
            Self::Short => 2,
            Self::UChar => 1,
        }
    }
}

/// Decoded image: grid, channel count and samples as `f64`, channels
/// interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaImage {
    pub grid: Grid,
    pub channels: usize,
    pub data: Vec<f64>,
}

struct Header {
    dims: [usize; 3],
    spacing: [f64; 3],
    channels: usize,
    element: ElementType,
    big_endian: bool,
    header_size: Option<i64>,
    data_file: String,
}

fn format_err(path: &Path, msg: impl Into<String>) -> CliError {
    CliError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn parse_numbers<T: std::str::FromStr>(
    path: &Path,
    key: &str,
    value: &str,
) -> Result<Vec<T>, CliError> {
    value
        .split_whitespace()
        .map(|t| {
            t.parse::<T>()
                .map_err(|_| format_err(path, format!("bad {key} value '{value}'")))
        })
        .collect()
}

fn parse_bool(path: &Path, key: &str, value: &str) -> Result<bool, CliError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(format_err(path, format!("bad {key} value '{value}'"))),
    }
}

/// Parse the text header. Returns it and the byte offset just past the
/// `ElementDataFile` line.
fn parse_header(path: &Path, bytes: &[u8]) -> Result<(Header, usize), CliError> {
    let mut dims = None;
    let mut spacing = [1.0; 3];
    let mut explicit_spacing = false;
    let mut channels = 1;
    let mut element = None;
    let mut big_endian = false;
    let mut header_size = None;
    let mut ndims = 3;
    let mut pos = 0;
    loop {
        if pos >= bytes.len() {
            return Err(format_err(path, "header ended without ElementDataFile"));
        }
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map_or(bytes.len(), |i| pos + i);
        let line = std::str::from_utf8(&bytes[pos..end])
            .map_err(|_| format_err(path, "header is not valid text"))?;
        pos = (end + 1).min(bytes.len());
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format_err(path, format!("malformed header line '{line}'")));
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "NDims" => {
                ndims = parse_numbers::<usize>(path, key, value)?
                    .first()
                    .copied()
                    .unwrap_or(0)
            }
            "DimSize" => {
                let v = parse_numbers::<usize>(path, key, value)?;
                if v.len() != 3 {
                    return Err(format_err(
                        path,
                        format!("expected 3 DimSize entries, got {}", v.len()),
                    ));
                }
                dims = Some([v[2], v[1], v[0]]);
            }
            "ElementSpacing" | "ElementSize" => {
                let v = parse_numbers::<f64>(path, key, value)?;
                if v.len() != 3 {
                    return Err(format_err(
                        path,
                        format!("expected 3 {key} entries, got {}", v.len()),
                    ));
                }
                // ElementSpacing wins over ElementSize
                if key == "ElementSpacing" || !explicit_spacing {
                    spacing = [v[2], v[1], v[0]];
                }
                explicit_spacing |= key == "ElementSpacing";
            }
            "ElementNumberOfChannels" => {
                channels = parse_numbers::<usize>(path, key, value)?
                    .first()
                    .copied()
                    .unwrap_or(0);
            }
            "ElementType" => {
                element =
                    Some(ElementType::parse(value).ok_or_else(|| {
                        format_err(path, format!("unsupported ElementType {value}"))
                    })?);
            }
            "BinaryDataByteOrderMSB" | "ElementByteOrderMSB" => {
                big_endian = parse_bool(path, key, value)?
            }
            "CompressedData" => {
                if parse_bool(path, key, value)? {
                    return Err(format_err(path, "compressed data is not supported"));
                }
            }
            "BinaryData" => {
                if !parse_bool(path, key, value)? {
                    return Err(format_err(path, "ASCII data is not supported"));
                }
            }
            "HeaderSize" => header_size = parse_numbers::<i64>(path, key, value)?.first().copied(),
            "ElementDataFile" => {
                if ndims != 3 {
                    return Err(format_err(
                        path,
                        format!("only 3D images are supported, NDims = {ndims}"),
                    ));
                }
                let dims = dims.ok_or_else(|| format_err(path, "missing DimSize"))?;
                let element = element.ok_or_else(|| format_err(path, "missing ElementType"))?;
                if channels == 0 {
                    return Err(format_err(path, "ElementNumberOfChannels must be positive"));
                }
                let header = Header {
                    dims,
                    spacing,
                    channels,
                    element,
                    big_endian,
                    header_size,
                    data_file: value.to_string(),
                };
                return Ok((header, pos));
            }
            _ => {}
        }
    }
}

fn decode(path: &Path, h: &Header, raw: &[u8]) -> Result<Vec<f64>, CliError> {
    let n = h.dims.iter().product::<usize>() * h.channels;
    let size = h.element.size();
    if raw.len() < n * size {
        return Err(format_err(
            path,
            format!("expected {} bytes of data, found {}", n * size, raw.len()),
        ));
    }
    let raw = &raw[..n * size];
    let out: Vec<f64> = match h.element {
        ElementType::Float => raw
            .chunks_exact(4)
            .map(|c| {
                let b = [c[0], c[1], c[2], c[3]];
                f64::from(if h.big_endian {
                    f32::from_be_bytes(b)
                } else {
                    f32::from_le_bytes(b)
                })
            })
            .collect(),
        ElementType::Short => raw
            .chunks_exact(2)
            .map(|c| {
                let b = [c[0], c[1]];
                f64::from(if h.big_endian {
                    i16::from_be_bytes(b)
                } else {
                    i16::from_le_bytes(b)
                })
            })
            .collect(),
        ElementType::UChar => raw.iter().map(|&b| f64::from(b)).collect(),
    };
    if out.iter().any(|x| !x.is_finite()) {
        return Err(format_err(path, "image contains non-finite samples"));
    }
    Ok(out)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read(path: &Path) -> Result<MetaImage, CliError> {
    let bytes = read_bytes(path)?;
    let (header, offset) = parse_header(path, &bytes)?;
    let expected = header.dims.iter().product::<usize>() * header.channels * header.element.size();
    let (payload_path, payload) = if header.data_file.eq_ignore_ascii_case("LOCAL") {
        (path.to_path_buf(), bytes[offset..].to_vec())
    } else {
        let p = path
            .parent()
            .unwrap_or(Path::new("."))
            .join(&header.data_file);
        let b = read_bytes(&p)?;
        (p, b)
    };
    let payload = match header.header_size {
        Some(-1) if payload.len() >= expected => &payload[payload.len() - expected..],
        Some(skip) if skip > 0 => payload.get(skip as usize..).unwrap_or(&[]),
        _ => &payload[..],
    };
    let data = decode(&payload_path, &header, payload)?;
    let grid =
        Grid::new(header.dims, header.spacing).map_err(|e| format_err(path, e.to_string()))?;
    Ok(MetaImage {
        grid,
        channels: header.channels,
        data,
    })
}

pub fn read_volume(path: &Path) -> Result<Volume3, CliError> {
    let img = read(path)?;
    if img.channels != 1 {
        return Err(format_err(
            path,
            format!("expected a scalar image, found {} channels", img.channels),
        ));
    }
    Volume3::new(img.grid, img.data).map_err(|e| format_err(path, e.to_string()))
}

pub fn read_field(path: &Path) -> Result<DisplacementField, CliError> {
    let img = read(path)?;
    if img.channels != 3 {
        return Err(format_err(
            path,
            format!(
                "expected a 3-channel displacement field, found {} channels",
                img.channels
            ),
        ));
    }
    let vectors: Vec<Vec3> = img
        .data
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    DisplacementField::new(img.grid, vectors).map_err(|e| format_err(path, e.to_string()))
}

fn header_text(grid: &Grid, channels: usize, comment: Option<&str>, data_file: &str) -> String {
    let [h, w, d] = grid.dims();
    let [sh, sw, sd] = grid.spacing();
    let mut s = String::from("ObjectType = Image\nNDims = 3\n");
    if let Some(c) = comment {
        s += &format!("Comment = {c}\n");
    }
    s += "BinaryData = True\nBinaryDataByteOrderMSB = False\nCompressedData = False\n";
    s += "Offset = 0 0 0\nTransformMatrix = 1 0 0 0 1 0 0 0 1\n";
    s += &format!("ElementSpacing = {sd} {sw} {sh}\nDimSize = {d} {w} {h}\n");
    if channels != 1 {
        s += &format!("ElementNumberOfChannels = {channels}\n");
    }
    s += &format!("ElementType = MET_FLOAT\nElementDataFile = {data_file}\n");
    s
}

fn payload(data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for &x in data {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut f = fs::File::create(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    f.write_all(bytes).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn is_mhd(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("mhd"))
}

/// Write `MET_FLOAT` little-endian samples. A `.mhd` path gets a sibling
/// `.raw` payload; anything else is written as a single `.mha`.
pub fn write(
    path: &Path,
    grid: &Grid,
    channels: usize,
    data: &[f64],
    comment: Option<&str>,
) -> Result<(), CliError> {
    if is_mhd(path) {
        let raw: PathBuf = path.with_extension("raw");
        let name = raw
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        write_file(&raw, &payload(data))?;
        write_file(path, header_text(grid, channels, comment, &name).as_bytes())
    } else {
        let mut bytes = header_text(grid, channels, comment, "LOCAL").into_bytes();
        bytes.extend_from_slice(&payload(data));
        write_file(path, &bytes)
    }
}

pub fn write_volume(path: &Path, vol: &Volume3) -> Result<(), CliError> {
    write(path, vol.grid(), 1, vol.data(), None)
}

pub fn write_field(path: &Path, field: &DisplacementField) -> Result<(), CliError> {
    write(
        path,
        field.grid(),
        3,
        field.vectors().as_flattened(),
        Some(FIELD_COMMENT),
    )
}
