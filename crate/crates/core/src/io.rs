//! Volume (MetaImage subset), deformation and landmark files.
//!
//! All binary payloads are little-endian regardless of host. Orientation
//! matrices and origins in MetaImage headers are ignored.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::curvature::DeformationField;
use crate::grid::{GridDesc, GridKind};
use crate::image::Volume;
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ElementType {
    Short,
    UShort,
    Float,
    Double,
}

impl ElementType {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "MET_SHORT" => Self::Short,
            "MET_USHORT" => Self::UShort,
            "MET_FLOAT" => Self::Float,
            "MET_DOUBLE" => Self::Double,
            other => return Err(Error::UnknownElementType(other.to_string())),
        })
    }

    fn size(self) -> usize {
        match self {
            Self::Short | Self::UShort => 2,
            Self::Float => 4,
            Self::Double => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::Short => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::UShort => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::Float => f32::from_le_bytes(b.try_into().unwrap()) as f64,
            Self::Double => f64::from_le_bytes(b.try_into().unwrap()),
        }
    }
}

fn parse_list<T: std::str::FromStr>(path: &Path, line: usize, key: &str, v: &str, n: usize) -> Result<Vec<T>> {
    let items: Vec<T> = v
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Parse {
            path: path.into(),
            line,
            msg: format!("cannot parse `{key}` value `{v}`"),
        })?;
    if items.len() != n {
        return Err(Error::Parse {
            path: path.into(),
            line,
            msg: format!("`{key}` needs {n} values, found {}", items.len()),
        });
    }
    Ok(items)
}

/// Reads a `.mhd` header with its raw payload (or a `LOCAL` payload
/// following the header) into a cell-centered volume.
pub fn read_volume<S: Real>(path: impl AsRef<Path>) -> Result<Volume<S>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut header: HashMap<String, (usize, String)> = HashMap::new();
    let mut offset = 0;
    let mut line_no = 0;
    while offset < bytes.len() {
        let end = bytes[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .map_or(bytes.len(), |p| offset + p);
        line_no += 1;
        let line = String::from_utf8_lossy(&bytes[offset..end]).trim().to_string();
        offset = (end + 1).min(bytes.len());
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: path.into(),
                line: line_no,
                msg: format!("expected `key = value`, found `{line}`"),
            });
        };
        let key = k.trim().to_string();
        let last = key == "ElementDataFile";
        header.insert(key, (line_no, v.trim().to_string()));
        if last {
            break;
        }
    }
    let get = |k: &str| header.get(k).ok_or_else(|| Error::MissingKey(k.to_string()));

    let (ln, ndims) = get("NDims")?;
    let ndims: usize = parse_list(path, *ln, "NDims", ndims, 1)?[0];
    if ndims != 3 {
        return Err(Error::UnsupportedDimension(ndims));
    }
    let (ln, v) = get("DimSize")?;
    let dims: Vec<usize> = parse_list(path, *ln, "DimSize", v, 3)?;
    let (ln, v) = get("ElementSpacing")?;
    let spacing: Vec<f64> = parse_list(path, *ln, "ElementSpacing", v, 3)?;
    let ty = ElementType::parse(&get("ElementType")?.1)?;
    let data_file = get("ElementDataFile")?.1.clone();
    for flag in ["BinaryDataByteOrderMSB", "ElementByteOrderMSB", "CompressedData"] {
        if let Some((_, v)) = header.get(flag) {
            if v.eq_ignore_ascii_case("true") {
                return Err(Error::Unsupported(format!("{flag} = True is not supported")));
            }
        }
    }

    let payload_owned;
    let payload: &[u8] = if data_file == "LOCAL" {
        &bytes[offset..]
    } else {
        let raw = path.parent().unwrap_or(Path::new(".")).join(&data_file);
        payload_owned = fs::read(&raw).map_err(|e| Error::io(raw, e))?;
        &payload_owned
    };
    let m = [dims[0], dims[1], dims[2]];
    let n: usize = m.iter().product();
    let expected = n * ty.size();
    if payload.len() != expected {
        return Err(Error::PayloadSize {
            expected,
            actual: payload.len(),
        });
    }
    let grid = GridDesc::cell_centered(m, [0, 1, 2].map(|k| S::lit(spacing[k])))?;
    let data = payload.chunks_exact(ty.size()).map(|b| S::lit(ty.decode(b))).collect();
    Volume::new(grid, data)
}

/// Writes `<path>` (header) and a sibling `.raw` payload as `MET_DOUBLE`.
pub fn write_volume<S: Real>(path: impl AsRef<Path>, v: &Volume<S>) -> Result<()> {
    let path = path.as_ref();
    let raw = path.with_extension("raw");
    let raw_name = raw
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Unsupported(format!("bad output path {}", path.display())))?;
    let g = v.grid();
    let h = g.h.map(|x| x.to_f64_lossy());
    let header = format!(
        "ObjectType = Image\nNDims = 3\nBinaryData = True\nBinaryDataByteOrderMSB = False\n\
         DimSize = {} {} {}\nElementSpacing = {} {} {}\nElementType = MET_DOUBLE\nElementDataFile = {raw_name}\n",
        g.m[0], g.m[1], g.m[2], h[0], h[1], h[2]
    );
    let payload: Vec<u8> = v.data().iter().flat_map(|x| x.to_f64_lossy().to_le_bytes()).collect();
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))?;
    fs::write(path, header).map_err(|e| Error::io(path, e))
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".grid");
    PathBuf::from(s)
}

/// Raw little-endian `f64` values of `y` (component-major) plus a
/// `<path>.grid` key=value sidecar with points, spacing and extent.
pub fn write_deformation<S: Real>(path: impl AsRef<Path>, y: &DeformationField<S>) -> Result<()> {
    let path = path.as_ref();
    let g = y.grid();
    let h = g.h.map(|x| x.to_f64_lossy());
    let e = g.extent().map(|x| x.to_f64_lossy());
    let side = format!(
        "kind = nodal\npoints = {} {} {}\nspacing = {} {} {}\nextent = {} {} {}\nlayout = component-major f64 le\n",
        g.m[0], g.m[1], g.m[2], h[0], h[1], h[2], e[0], e[1], e[2]
    );
    let payload: Vec<u8> = y.y().iter().flat_map(|x| x.to_f64_lossy().to_le_bytes()).collect();
    fs::write(path, payload).map_err(|e| Error::io(path, e))?;
    let sp = sidecar_path(path);
    fs::write(&sp, side).map_err(|e| Error::io(&sp, e))
}

/// Inverse of [`write_deformation`]. With `expected`, the sidecar grid must
/// match it.
pub fn read_deformation<S: Real>(
    path: impl AsRef<Path>,
    expected: Option<&GridDesc<S>>,
) -> Result<DeformationField<S>> {
    let path = path.as_ref();
    let sp = sidecar_path(path);
    let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let mut kv = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: sp.clone(),
            line: i + 1,
            msg: format!("expected `key = value`, found `{line}`"),
        })?;
        kv.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
    }
    let get = |k: &str| kv.get(k).ok_or_else(|| Error::MissingKey(k.to_string()));
    let (ln, v) = get("points")?;
    let pts: Vec<usize> = parse_list(&sp, *ln, "points", v, 3)?;
    let (ln, v) = get("spacing")?;
    let h: Vec<f64> = parse_list(&sp, *ln, "spacing", v, 3)?;
    let grid = GridDesc::new([pts[0], pts[1], pts[2]], [0, 1, 2].map(|k| S::lit(h[k])), GridKind::Nodal)?;
    if let Some(want) = expected {
        let same_h = (0..3).all(|k| (want.h[k] - grid.h[k]).abs() <= S::lit(1e-12) * want.h[k]);
        if want.m != grid.m || !same_h || want.kind != GridKind::Nodal {
            return Err(Error::SidecarMismatch(format!(
                "file has {:?} points with spacing {:?}, expected {:?} with {:?}",
                grid.m, h, want.m, want.h
            )));
        }
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected_len = 3 * grid.len() * 8;
    if bytes.len() != expected_len {
        return Err(Error::PayloadSize {
            expected: expected_len,
            actual: bytes.len(),
        });
    }
    let y = bytes
        .chunks_exact(8)
        .map(|b| S::lit(f64::from_le_bytes(b.try_into().unwrap())))
        .collect();
    DeformationField::new(grid, y)
}

/// Whitespace-separated voxel-index triples, one per line (blank lines and
/// `#` comments skipped), converted to physical cell-center positions.
pub fn read_landmarks(path: impl AsRef<Path>, spacing: [f64; 3]) -> Result<Vec<[f64; 3]>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let idx: Vec<f64> = parse_list(path, i + 1, "landmark", line, 3)?;
        out.push([0, 1, 2].map(|k| (idx[k] + 0.5) * spacing[k]));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkStats {
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation (`n - 1` denominator).
    pub stddev: f64,
    pub max: f64,
}

/// Statistics of `|phi(p_fixed) - p_moving|` over landmark pairs, with `phi`
/// the trilinear interpolation of `y`.
pub fn landmark_error(
    fixed: &[[f64; 3]],
    moving: &[[f64; 3]],
    y: &DeformationField<f64>,
) -> Result<LandmarkStats> {
    landmark_stats(fixed, moving, |p| y.evaluate(p))
}

/// As [`landmark_error`] for an arbitrary map `phi`.
pub fn landmark_stats(
    fixed: &[[f64; 3]],
    moving: &[[f64; 3]],
    phi: impl Fn([f64; 3]) -> [f64; 3],
) -> Result<LandmarkStats> {
    if fixed.len() != moving.len() {
        return Err(Error::LandmarkCount {
            fixed: fixed.len(),
            moving: moving.len(),
        });
    }
    let errs: Vec<f64> = fixed
        .iter()
        .zip(moving)
        .map(|(&p, q)| {
            let m = phi(p);
            ((m[0] - q[0]).powi(2) + (m[1] - q[1]).powi(2) + (m[2] - q[2]).powi(2)).sqrt()
        })
        .collect();
    let n = errs.len();
    let mean = if n == 0 { 0.0 } else { errs.iter().sum::<f64>() / n as f64 };
    let stddev = if n < 2 {
        0.0
    } else {
        (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(LandmarkStats {
        count: n,
        mean,
        stddev,
        max: errs.iter().copied().fold(0.0, f64::max),
    })
}
