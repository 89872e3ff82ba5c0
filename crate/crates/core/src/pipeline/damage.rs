use std::io::Write;
use std::path::{Path, PathBuf};

use super::PatchClassifier;
use crate::error::{Error, Result};
use crate::imgvol::{save_volume, Volume3D};
use crate::patches::extract_windows;

/// Probability at or above which a patch counts as lesion, and above which a
/// subject's mean damage counts as lesion present.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Per-voxel lesion probability over the myocardium.
#[derive(Clone, Debug, PartialEq)]
pub struct DamageMap {
    /// Values in `[0, 1]`, exactly 0 outside the myocardium.
    pub map: Volume3D,
    /// Mean over myocardial voxels.
    pub mean_score: f64,
    pub decision: bool,
    pub threshold: f64,
}

pub fn subject_decision(map: &DamageMap) -> bool {
    map.mean_score > map.threshold
}

/// Dense stride-1 map. Each myocardial voxel gets the mean probability of the
/// windows covering it; uncovered myocardial voxels copy the nearest covered
/// voxel in the same slice (0 if the slice has none).
pub fn infer_damage_map<C: PatchClassifier + ?Sized>(
    model: &C,
    cine: &Volume3D,
    myo: &Volume3D,
    threshold: f64,
) -> Result<DamageMap> {
    let p = model.patch_size();
    let windows = extract_windows(cine, myo, p, 1)?;
    let norm = model.norm_stats();
    let normalized: Vec<Vec<f64>> = match norm {
        Some(n) => windows
            .iter()
            .map(|w| w.pixels.iter().map(|&x| n.apply(x)).collect())
            .collect(),
        None => Vec::new(),
    };
    let items: Vec<(&[f64], [f64; 3])> = windows
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let px = if norm.is_some() {
                normalized[i].as_slice()
            } else {
                w.pixels.as_slice()
            };
            (px, w.position_features())
        })
        .collect();
    let probs = model.predict_batch(&items)?;

    let g = *myo.geometry();
    let [nx, ny, nz] = g.dims;
    let h = p / 2;
    // running means stay exact when every covering window agrees
    let mut values = vec![0.0; g.len()];
    let mut count = vec![0u32; g.len()];
    for (w, &prob) in windows.iter().zip(&probs) {
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::InvalidParameter(format!(
                "classifier returned {prob}, outside [0, 1]"
            )));
        }
        let [ci, cj] = w.center_index;
        let k = w.slice_index;
        for j in cj - h..=cj + h {
            for i in ci - h..=ci + h {
                let idx = g.index(i, j, k);
                if myo.data()[idx] > 0.5 {
                    count[idx] += 1;
                    values[idx] += (prob - values[idx]) / f64::from(count[idx]);
                }
            }
        }
    }

    let [sx, sy, _] = g.spacing;
    for k in 0..nz {
        let base = k * nx * ny;
        let covered: Vec<usize> = (0..nx * ny).filter(|&o| count[base + o] > 0).collect();
        if covered.is_empty() {
            continue;
        }
        for o in 0..nx * ny {
            let idx = base + o;
            if count[idx] > 0 || myo.data()[idx] <= 0.5 {
                continue;
            }
            let (i, j) = ((o % nx) as f64, (o / nx) as f64);
            let mut best = (f64::INFINITY, 0);
            for &c in &covered {
                let di = ((c % nx) as f64 - i) * sx;
                let dj = ((c / nx) as f64 - j) * sy;
                let d = di * di + dj * dj;
                if d < best.0 {
                    best = (d, c);
                }
            }
            values[idx] = values[base + best.1];
        }
    }

    let (mut total, mut n) = (0.0, 0usize);
    for (v, m) in values.iter().zip(myo.data()) {
        if *m > 0.5 {
            total += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let mean_score = total / n as f64;
    Ok(DamageMap {
        map: Volume3D::new(g, values)?,
        mean_score,
        decision: mean_score > threshold,
        threshold,
    })
}

/// Writes `<stem>_zNNN.pgm` for each slice: binary P5, value `round(prob * 255)`
/// with halves rounded up, row `j = 0` first.
pub fn write_pgm_slices(map: &Volume3D, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let [nx, ny, nz] = map.dims();
    let mut paths = Vec::with_capacity(nz);
    for k in 0..nz {
        let path = dir.join(format!("{stem}_z{k:03}.pgm"));
        let mut bytes = format!("P5\n{nx} {ny}\n255\n").into_bytes();
        bytes.extend(
            map.slice(k)
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8),
        );
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

/// FVOL of the map plus per-slice PGM renderings.
pub fn save_damage_map(map: &DamageMap, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let path = dir.join(format!("{stem}.fvol"));
    save_volume(&map.map, &path)?;
    write_pgm_slices(&map.map, dir, stem)?;
    Ok(path)
}
