//! Volume and landmark containers plus their on-disk formats.
//!
//! Volume files (`.pinv`): magic `PINV1\0`, three `u32` LE dims, three `f32` LE
//! spacings (mm/voxel), then `f32` LE intensities with x varying fastest.
//! Landmark files are CSV with header `id,x,y,z` in continuous voxel coordinates.

use std::fs;
use std::io::Write;
use std::path::Path;

pub const VOLUME_MAGIC: &[u8; 6] = b"PINV1\0";
const HEADER_LEN: usize = 6 + 12 + 12;

#[derive(Debug, thiserror::Error)]
pub enum VolumeError {
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad magic in volume file")]
    BadMagic,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("non-positive dimension in {0:?}")]
    BadDims([u32; 3]),
    #[error("spacing must be positive and finite, got {0:?}")]
    BadSpacing([f32; 3]),
    #[error("intensities must be finite")]
    NonFinite,
    #[error("volume has {dims:?} = {expected} voxels but {found} intensities")]
    LengthMismatch { dims: [usize; 3], expected: usize, found: usize },
    #[error("landmark file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("no landmarks")]
    NoLandmarks,
    #[error("flattened landmark vector length {0} is not a multiple of 3")]
    FlatLength(usize),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io { path: path.display().to_string(), source }
}

/// Scalar 3D image with physical voxel spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    intensities: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], intensities: Vec<f32>) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
            return Err(VolumeError::BadDims(dims.map(|d| d as u32)));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(VolumeError::BadSpacing(spacing));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if intensities.len() != expected {
            return Err(VolumeError::LengthMismatch { dims, expected, found: intensities.len() });
        }
        if intensities.iter().any(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite);
        }
        Ok(Self { dims, spacing, intensities })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn intensities(&self) -> &[f32] {
        &self.intensities
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.intensities[self.index(x, y, z)]
    }

    /// Intensity at integer coordinates, zero outside the grid.
    #[inline]
    pub fn get_or_zero(&self, x: i64, y: i64, z: i64) -> f32 {
        let [nx, ny, nz] = self.dims;
        if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
            0.0
        } else {
            self.get(x as usize, y as usize, z as usize)
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.intensities.len());
        out.extend_from_slice(VOLUME_MAGIC);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for v in &self.intensities {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, VolumeError> {
        if bytes.len() < 6 || &bytes[..6] != VOLUME_MAGIC {
            return Err(VolumeError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(VolumeError::Truncated { expected: HEADER_LEN, found: bytes.len() });
        }
        let word = |i: usize| <[u8; 4]>::try_from(&bytes[6 + 4 * i..10 + 4 * i]).expect("4 bytes");
        let raw_dims = [0, 1, 2].map(|i| u32::from_le_bytes(word(i)));
        if raw_dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::BadDims(raw_dims));
        }
        let spacing = [3, 4, 5].map(|i| f32::from_le_bytes(word(i)));
        let dims = raw_dims.map(|d| d as usize);
        let count = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or(VolumeError::BadDims(raw_dims))?;
        let expected = HEADER_LEN + 4 * count;
        if bytes.len() != expected {
            return Err(VolumeError::Truncated { expected, found: bytes.len() });
        }
        let intensities = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(dims, spacing, intensities)
    }
}

pub fn write_volume(volume: &Volume, path: &Path) -> Result<(), VolumeError> {
    fs::write(path, volume.to_bytes()).map_err(io_err(path))
}

pub fn read_volume(path: &Path) -> Result<Volume, VolumeError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Volume::from_bytes(&bytes)
}

pub fn voxel_to_mm(point: [f64; 3], spacing: [f32; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| point[i] * spacing[i] as f64)
}

/// Ordered landmarks in continuous voxel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    points: Vec<[f64; 3]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self, VolumeError> {
        if points.is_empty() {
            return Err(VolumeError::NoLandmarks);
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite);
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `(x1, y1, z1, ..., xn, yn, zn)`.
    pub fn flatten(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self, VolumeError> {
        if flat.len() % 3 != 0 {
            return Err(VolumeError::FlatLength(flat.len()));
        }
        Self::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,x,y,z\n");
        for (i, p) in self.points.iter().enumerate() {
            out.push_str(&format!("{i},{},{},{}\n", p[0], p[1], p[2]));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, VolumeError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            None => return Err(VolumeError::NoLandmarks),
            Some((i, header)) => {
                if header.trim() != "id,x,y,z" {
                    return Err(VolumeError::Parse { line: i + 1, msg: format!("expected header `id,x,y,z`, got `{header}`") });
                }
            }
        }
        let mut points = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(VolumeError::Parse { line: line_no, msg: format!("expected 4 fields, got {}", fields.len()) });
            }
            let id: usize = fields[0]
                .parse()
                .map_err(|_| VolumeError::Parse { line: line_no, msg: format!("non-numeric id `{}`", fields[0]) })?;
            if id < points.len() {
                return Err(VolumeError::Parse { line: line_no, msg: format!("duplicate id {id}") });
            }
            if id > points.len() {
                return Err(VolumeError::Parse { line: line_no, msg: format!("missing id {} (found {id})", points.len()) });
            }
            let mut p = [0.0f64; 3];
            for (k, f) in fields[1..].iter().enumerate() {
                p[k] = f
                    .parse()
                    .map_err(|_| VolumeError::Parse { line: line_no, msg: format!("non-numeric coordinate `{f}`") })?;
                if !p[k].is_finite() {
                    return Err(VolumeError::Parse { line: line_no, msg: format!("non-finite coordinate `{f}`") });
                }
            }
            points.push(p);
        }
        Self::new(points)
    }
}

pub fn write_landmarks(set: &LandmarkSet, path: &Path) -> Result<(), VolumeError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(set.to_csv().as_bytes()).map_err(io_err(path))
}

pub fn read_landmarks(path: &Path) -> Result<LandmarkSet, VolumeError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    LandmarkSet::from_csv(&text)
}
