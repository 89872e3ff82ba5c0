//! Scalar volumes with physical geometry, FVOL file I/O, center-of-mass,
//! nearest-neighbor resampling and center-based translation alignment.
//!
//! Voxel `(i, j, k)` has its physical center at `origin + (index + 0.5) * spacing`
//! on every axis. Data is stored x-fastest.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const MAGIC: &str = "FVOL1";

/// Grid description of a volume.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub dims: [usize; 3],
    /// mm per voxel
    pub spacing: [f64; 3],
    /// mm
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let g = Geometry {
            dims,
            spacing,
            origin,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGeometry(format!(
                "dims must be >= 1, got {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidGeometry(format!(
                "spacing must be finite and > 0, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "origin must be finite, got {:?}",
                self.origin
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Physical center of voxel `idx` along `axis`.
    #[inline]
    pub fn center_along(&self, axis: usize, idx: usize) -> f64 {
        self.origin[axis] + (idx as f64 + 0.5) * self.spacing[axis]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> PointMM {
        PointMM {
            x: self.center_along(0, i),
            y: self.center_along(1, j),
            z: self.center_along(2, k),
        }
    }

    /// Uniform per-slice z centers.
    pub fn slice_positions(&self) -> Vec<f64> {
        (0..self.dims[2]).map(|k| self.center_along(2, k)).collect()
    }
}

/// A point in the physical frame, mm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointMM {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl PointMM {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        PointMM { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Scalar voxel grid with physical geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    geom: Geometry,
    data: Vec<f64>,
}

impl Volume3D {
    pub fn new(geom: Geometry, data: Vec<f64>) -> Result<Self> {
        geom.validate()?;
        if data.len() != geom.len() {
            return Err(Error::InvalidGeometry(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geom.dims
            )));
        }
        Ok(Volume3D { geom, data })
    }

    pub fn zeros(geom: Geometry) -> Result<Self> {
        geom.validate()?;
        Ok(Volume3D {
            data: vec![0.0; geom.len()],
            geom,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geom.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.geom.origin
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.geom.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f64) {
        let idx = self.geom.index(i, j, k);
        self.data[idx] = value;
    }

    /// One z-slice, x-fastest.
    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.geom.dims[0] * self.geom.dims[1];
        &self.data[k * n..(k + 1) * n]
    }

    /// True when every value is exactly 0.0 or 1.0.
    pub fn is_mask(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn same_geometry(&self, other: &Volume3D) -> bool {
        self.geom == other.geom
    }

    /// Same voxel data under a new origin.
    pub fn with_origin(mut self, origin: [f64; 3]) -> Result<Self> {
        self.geom.origin = origin;
        self.geom.validate()?;
        Ok(self)
    }
}

/// Reads an FVOL file.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);

    let mut line = String::new();
    let mut next_line = |reader: &mut BufReader<File>| -> Result<String> {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::header(path, "unexpected end of header"));
        }
        Ok(line.trim_end_matches(['\n', '\r']).to_string())
    };

    let magic = next_line(&mut reader)?;
    if magic != MAGIC {
        return Err(Error::header(path, format!("bad magic `{magic}`")));
    }
    let dims: [usize; 3] = parse_triple(path, &next_line(&mut reader)?, "dims")?;
    let spacing: [f64; 3] = parse_triple(path, &next_line(&mut reader)?, "spacing")?;
    let origin: [f64; 3] = parse_triple(path, &next_line(&mut reader)?, "origin")?;
    let dtype = next_line(&mut reader)?;
    if dtype != "dtype f64" {
        return Err(Error::header(path, format!("unsupported `{dtype}`")));
    }
    if !next_line(&mut reader)?.is_empty() {
        return Err(Error::header(path, "missing blank line after header"));
    }
    let geom = Geometry {
        dims,
        spacing,
        origin,
    };
    geom.validate()
        .map_err(|e| Error::header(path, e.to_string()))?;

    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let expected = geom.len();
    if bytes.len() != expected * 8 {
        return Err(Error::DataLength {
            path: path.to_path_buf(),
            expected,
            found: bytes.len() / 8,
        });
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume3D::new(geom, data)
}

fn parse_triple<T: std::str::FromStr>(path: &Path, line: &str, key: &str) -> Result<[T; 3]> {
    let mut parts = line.split_ascii_whitespace();
    if parts.next() != Some(key) {
        return Err(Error::header(path, format!("expected `{key}` line, got `{line}`")));
    }
    let values: Vec<T> = parts
        .map(|p| p.parse::<T>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::header(path, format!("unparsable `{key}` line `{line}`")))?;
    values
        .try_into()
        .map_err(|_| Error::header(path, format!("`{key}` needs three values")))
}

/// Writes an FVOL file. Floats in the header use the shortest representation
/// that parses back to the same bits.
pub fn save_volume(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let g = &v.geom;
    let header = format!(
        "{MAGIC}\ndims {} {} {}\nspacing {} {} {}\norigin {} {} {}\ndtype f64\n\n",
        g.dims[0],
        g.dims[1],
        g.dims[2],
        g.spacing[0],
        g.spacing[1],
        g.spacing[2],
        g.origin[0],
        g.origin[1],
        g.origin[2]
    );
    w.write_all(header.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    for value in &v.data {
        w.write_all(&value.to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Path of the `.zpos` sidecar belonging to an FVOL file.
pub fn zpos_path(volume_path: &Path) -> PathBuf {
    volume_path.with_extension("zpos")
}

/// Per-slice z positions: the `.zpos` sidecar when present, uniform centers otherwise.
pub fn load_slice_positions(volume_path: impl AsRef<Path>, geom: &Geometry) -> Result<Vec<f64>> {
    let side = zpos_path(volume_path.as_ref());
    if !side.exists() {
        return Ok(geom.slice_positions());
    }
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let z: Vec<f64> = text
        .split_ascii_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::header(&side, "unparsable z position"))?;
    if z.len() != geom.dims[2] {
        return Err(Error::DataLength {
            path: side,
            expected: geom.dims[2],
            found: z.len(),
        });
    }
    Ok(z)
}

pub fn save_slice_positions(volume_path: impl AsRef<Path>, z: &[f64]) -> Result<()> {
    let side = zpos_path(volume_path.as_ref());
    let text: String = z.iter().map(|v| format!("{v}\n")).collect();
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

/// Intensity-weighted mean of voxel centers.
pub fn center_of_mass(mask: &Volume3D) -> Result<PointMM> {
    let g = mask.geometry();
    let [nx, ny, nz] = g.dims;
    let (mut w, mut sx, mut sy, mut sz) = (0.0, 0.0, 0.0, 0.0);
    for k in 0..nz {
        let z = g.center_along(2, k);
        for j in 0..ny {
            let y = g.center_along(1, j);
            for i in 0..nx {
                let v = mask.get(i, j, k);
                if v != 0.0 {
                    w += v;
                    sx += v * g.center_along(0, i);
                    sy += v * y;
                    sz += v * z;
                }
            }
        }
    }
    if w <= 0.0 {
        return Err(Error::EmptyMask);
    }
    Ok(PointMM::new(sx / w, sy / w, sz / w))
}

/// In-plane center of mass of slice `k`, as `(x, y)` in mm.
pub fn slice_center_of_mass(mask: &Volume3D, k: usize) -> Result<(f64, f64)> {
    let g = mask.geometry();
    let [nx, ny, _] = g.dims;
    let s = mask.slice(k);
    let (mut w, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for j in 0..ny {
        let y = g.center_along(1, j);
        for i in 0..nx {
            let v = s[i + nx * j];
            if v != 0.0 {
                w += v;
                sx += v * g.center_along(0, i);
                sy += v * y;
            }
        }
    }
    if w <= 0.0 {
        return Err(Error::EmptyMask);
    }
    Ok((sx / w, sy / w))
}

/// Index of the source voxel nearest to physical coordinate `p` along `axis`,
/// or `None` when `p` lies outside the source extent. Ties go to the lower index.
fn nearest_along(src: &Geometry, axis: usize, p: f64) -> Option<usize> {
    let n = src.dims[axis];
    let s = src.spacing[axis];
    let guess = ((p - src.origin[axis]) / s).floor();
    if !guess.is_finite() {
        return None;
    }
    let lo = (guess as i64 - 1).max(0);
    let hi = (guess as i64 + 1).min(n as i64 - 1);
    let mut best: Option<(usize, f64)> = None;
    for c in lo..=hi {
        let c = c as usize;
        let d = (src.center_along(axis, c) - p).abs();
        match best {
            Some((_, bd)) if d >= bd => {}
            _ => best = Some((c, d)),
        }
    }
    let (idx, d) = best?;
    (d <= 0.5 * s).then_some(idx)
}

/// Nearest-neighbor resampling onto `target`. Target voxels whose center falls
/// outside the source extent are 0.0.
pub fn resample_nearest(src: &Volume3D, target: &Geometry) -> Result<Volume3D> {
    target.validate()?;
    let sg = src.geometry();
    let [nx, ny, nz] = target.dims;
    let map_axis = |axis: usize, n: usize| -> Vec<Option<usize>> {
        (0..n)
            .map(|t| nearest_along(sg, axis, target.center_along(axis, t)))
            .collect()
    };
    let mx = map_axis(0, nx);
    let my = map_axis(1, ny);
    let mz = map_axis(2, nz);

    let mut out = Volume3D::zeros(*target)?;
    for (k, sk) in mz.iter().enumerate() {
        let Some(sk) = *sk else { continue };
        for (j, sj) in my.iter().enumerate() {
            let Some(sj) = *sj else { continue };
            for (i, si) in mx.iter().enumerate() {
                if let Some(si) = *si {
                    out.set(i, j, k, src.get(si, sj, sk));
                }
            }
        }
    }
    Ok(out)
}

/// Rigid translation that brings `moving_center` onto `fixed_center`.
/// Only the origin changes.
pub fn align_by_centers(
    moving: &Volume3D,
    moving_center: PointMM,
    fixed_center: PointMM,
) -> Result<Volume3D> {
    if !moving_center.is_finite() || !fixed_center.is_finite() {
        return Err(Error::InvalidParameter("centers must be finite".into()));
    }
    let o = moving.origin();
    moving.clone().with_origin([
        o[0] + (fixed_center.x - moving_center.x),
        o[1] + (fixed_center.y - moving_center.y),
        o[2] + (fixed_center.z - moving_center.z),
    ])
}

/// For each `dst` slice, the index of the `src` slice with the closest z.
/// Ties go to the lower index.
pub fn nearest_slice_map(src_z: &[f64], dst_z: &[f64]) -> Result<Vec<usize>> {
    if src_z.is_empty() {
        return Err(Error::EmptyList("source slice positions"));
    }
    if dst_z.is_empty() {
        return Err(Error::EmptyList("destination slice positions"));
    }
    if !src_z.windows(2).all(|w| w[0] <= w[1]) {
        return Err(Error::NotSorted("source slice positions"));
    }
    if !dst_z.windows(2).all(|w| w[0] <= w[1]) {
        return Err(Error::NotSorted("destination slice positions"));
    }
    Ok(dst_z
        .iter()
        .map(|&z| {
            // first index with src_z >= z
            let hi = src_z.partition_point(|&s| s < z);
            if hi == 0 {
                0
            } else if hi == src_z.len() {
                src_z.len() - 1
            } else {
                let lo = hi - 1;
                if (z - src_z[lo]).abs() <= (src_z[hi] - z).abs() {
                    lo
                } else {
                    hi
                }
            }
        })
        .collect())
}
