//! Hierarchical discrete-global-grid cells and the 2Lt3C label encoding.
//!
//! The grid is a spherical cube: six faces, each subdivided as a quadtree.
//! A point maps to the face whose axis dominates its unit vector, then to
//! face-local (u, v) coordinates, which a quadratic stretch maps to (s, t)
//! in the unit square. The stretch keeps cell areas within a factor ~2 of
//! the global mean, which is all the downstream geocoding task needs; the
//! cells are not bit-compatible with any external grid library.
//!
//! Every two quadtree levels are encoded into three base-3 characters
//! (`encode_2lt3c`), so a level-18 cell yields a 27-character label and a
//! level-22 cell a 33-character one.
//!
//! ```
//! use addrgraph::geocode::{cell_from_latlon, encode_2lt3c, decode_2lt3c};
//!
//! let cell = cell_from_latlon(30.25, 120.15, 18).unwrap();
//! let label = encode_2lt3c(&cell);
//! assert_eq!(label.chars.len(), 27);
//! assert_eq!(decode_2lt3c(&label, cell.face).unwrap(), cell);
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Maximum quadtree depth supported by [`CellId`].
pub const MAX_LEVEL: u8 = 22;

#[derive(Debug, Error, PartialEq)]
pub enum GeoError {
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("format error: {0}")]
    FormatError(String),
}

/// A cell of the hierarchical grid: cube face, depth, and quadrant path.
///
/// `path[i]` is the quadrant digit at depth `i + 1`; bit 0 selects the
/// s-axis half, bit 1 the t-axis half.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellId {
    pub face: u8,
    pub level: u8,
    pub path: Vec<u8>,
}

impl CellId {
    /// Parent cell one level up, or `None` at level 1.
    pub fn parent(&self) -> Option<CellId> {
        if self.level <= 1 {
            return None;
        }
        Some(CellId {
            face: self.face,
            level: self.level - 1,
            path: self.path[..self.path.len() - 1].to_vec(),
        })
    }
}

/// The base-3 character label of a cell: 3 characters per two levels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelChars {
    /// Grid level this label encodes; needed to disambiguate odd levels.
    pub level: u8,
    /// Digits in 0..=2, most significant first within each 3-char group.
    pub chars: Vec<u8>,
}

impl LabelChars {
    pub fn to_string_label(&self) -> String {
        self.chars.iter().map(|d| (b'0' + d) as char).collect()
    }

    pub fn from_string_label(s: &str, level: u8) -> Result<LabelChars, GeoError> {
        let mut chars = Vec::with_capacity(s.len());
        for c in s.chars() {
            match c {
                '0' | '1' | '2' => chars.push(c as u8 - b'0'),
                other => {
                    return Err(GeoError::FormatError(format!(
                        "label char '{other}' outside alphabet {{0,1,2}}"
                    )))
                }
            }
        }
        let expected = label_len(level);
        if chars.len() != expected {
            return Err(GeoError::FormatError(format!(
                "label length {} does not match level {level} (expected {expected})",
                chars.len()
            )));
        }
        Ok(LabelChars { level, chars })
    }
}

/// Label length for a given level: three characters per two levels.
pub fn label_len(level: u8) -> usize {
    3 * ((level as usize + 1) / 2)
}

fn unit_vector(lat_deg: f64, lon_deg: f64) -> [f64; 3] {
    let lat = lat_deg.to_radians();
    let lon = lon_deg.to_radians();
    [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
}

/// Face of the dominant axis: 0..=2 for +x,+y,+z and 3..=5 for -x,-y,-z.
fn face_of(p: [f64; 3]) -> u8 {
    let abs = [p[0].abs(), p[1].abs(), p[2].abs()];
    let mut axis = 0;
    if abs[1] > abs[axis] {
        axis = 1;
    }
    if abs[2] > abs[axis] {
        axis = 2;
    }
    if p[axis] >= 0.0 {
        axis as u8
    } else {
        axis as u8 + 3
    }
}

/// Face-local coordinates. `u = p/d`, `v = q/d` where `d` is the signed
/// dominant component and (p, q) are the remaining components in axis order.
fn face_uv(face: u8, p: [f64; 3]) -> (f64, f64) {
    let (d, a, b) = match face % 3 {
        0 => (p[0], p[1], p[2]),
        1 => (p[1], p[0], p[2]),
        _ => (p[2], p[0], p[1]),
    };
    (a / d, b / d)
}

/// Inverse of [`face_uv`]: an (unnormalized) direction for face-local (u, v).
fn face_direction(face: u8, u: f64, v: f64) -> [f64; 3] {
    let sign = if face < 3 { 1.0 } else { -1.0 };
    match face % 3 {
        0 => [sign, sign * u, sign * v],
        1 => [sign * u, sign, sign * v],
        _ => [sign * u, sign * v, sign],
    }
}

/// Quadratic stretch from [-1, 1] to [0, 1]; equalizes cell areas to
/// within a factor ~2 across a face.
fn uv_to_st(u: f64) -> f64 {
    if u >= 0.0 {
        0.5 * (1.0 + 3.0 * u).sqrt()
    } else {
        1.0 - 0.5 * (1.0 - 3.0 * u).sqrt()
    }
}

fn st_to_uv(s: f64) -> f64 {
    if s >= 0.5 {
        (4.0 * s * s - 1.0) / 3.0
    } else {
        (1.0 - 4.0 * (1.0 - s) * (1.0 - s)) / 3.0
    }
}

/// Map a point to its grid cell at the given level.
///
/// Hierarchical by construction: the level-(L-1) cell path is a prefix of
/// the level-L path for the same point.
pub fn cell_from_latlon(lat: f64, lon: f64, level: u8) -> Result<CellId, GeoError> {
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(GeoError::DomainError(format!(
            "coordinates ({lat}, {lon}) out of range"
        )));
    }
    if level < 1 || level > MAX_LEVEL {
        return Err(GeoError::DomainError(format!(
            "level {level} outside 1..={MAX_LEVEL}"
        )));
    }
    let p = unit_vector(lat, lon);
    let face = face_of(p);
    let (u, v) = face_uv(face, p);
    let s = uv_to_st(u);
    let t = uv_to_st(v);
    let n = 1u64 << level;
    let i = ((s * n as f64) as u64).min(n - 1);
    let j = ((t * n as f64) as u64).min(n - 1);
    let mut path = Vec::with_capacity(level as usize);
    for depth in 1..=level {
        let shift = level - depth;
        let si = (i >> shift) & 1;
        let tj = (j >> shift) & 1;
        path.push((tj as u8) << 1 | si as u8);
    }
    Ok(CellId { face, level, path })
}

/// Center point of a cell, in degrees. The center always maps back to the
/// same cell: `cell_from_latlon(center, level) == cell`.
pub fn cell_center(cell: &CellId) -> (f64, f64) {
    let n = 1u64 << cell.level;
    let mut i = 0u64;
    let mut j = 0u64;
    for &d in &cell.path {
        i = i << 1 | (d & 1) as u64;
        j = j << 1 | (d >> 1) as u64;
    }
    let s = (i as f64 + 0.5) / n as f64;
    let t = (j as f64 + 0.5) / n as f64;
    let dir = face_direction(cell.face, st_to_uv(s), st_to_uv(t));
    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    let z = dir[2] / norm;
    let lat = z.asin().to_degrees();
    let lon = dir[1].atan2(dir[0]).to_degrees();
    (lat, lon)
}

/// Encode a cell path as base-3 characters: each level pair (d1, d2) becomes
/// the value 4*d1 + d2 written as exactly three base-3 digits; an unpaired
/// final level contributes its digit value the same way.
pub fn encode_2lt3c(cell: &CellId) -> LabelChars {
    let mut chars = Vec::with_capacity(label_len(cell.level));
    let mut k = 0;
    while k < cell.path.len() {
        let value = if k + 1 < cell.path.len() {
            4 * cell.path[k] + cell.path[k + 1]
        } else {
            cell.path[k]
        };
        chars.push(value / 9);
        chars.push(value / 3 % 3);
        chars.push(value % 3);
        k += 2;
    }
    LabelChars {
        level: cell.level,
        chars,
    }
}

/// Decode a 2Lt3C label back to the cell it encodes on the given face.
/// Inverse of [`encode_2lt3c`]: `decode_2lt3c(&encode_2lt3c(&c), c.face) == c`.
pub fn decode_2lt3c(label: &LabelChars, face: u8) -> Result<CellId, GeoError> {
    if face > 5 {
        return Err(GeoError::DomainError(format!("face {face} outside 0..=5")));
    }
    if label.level < 1 || label.level > MAX_LEVEL {
        return Err(GeoError::DomainError(format!(
            "level {} outside 1..={MAX_LEVEL}",
            label.level
        )));
    }
    if label.chars.len() != label_len(label.level) {
        return Err(GeoError::FormatError(format!(
            "label length {} does not match level {}",
            label.chars.len(),
            label.level
        )));
    }
    let mut path = Vec::with_capacity(label.level as usize);
    for (g, group) in label.chars.chunks(3).enumerate() {
        for &c in group {
            if c > 2 {
                return Err(GeoError::FormatError(format!(
                    "label char {c} outside alphabet {{0,1,2}}"
                )));
            }
        }
        let value = group[0] * 9 + group[1] * 3 + group[2];
        let is_final_single = label.level % 2 == 1 && g == label.chars.len() / 3 - 1;
        if is_final_single {
            if value > 3 {
                return Err(GeoError::FormatError(format!(
                    "group value {value} exceeds single-level maximum 3"
                )));
            }
            path.push(value);
        } else {
            if value > 15 {
                return Err(GeoError::FormatError(format!(
                    "group value {value} exceeds level-pair maximum 15"
                )));
            }
            path.push(value / 4);
            path.push(value % 4);
        }
    }
    Ok(CellId {
        face,
        level: label.level,
        path,
    })
}

/// Great-circle distance between two (lat, lon) points in kilometers.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}
