#![allow(dead_code)]

use fibromap::imgvol::{Geometry, Volume3D};
use fibromap::nn::{loss_bce, CnnModel, ModelSpec, Sample};
use fibromap::patches::{extract_windows, Window};
use fibromap::pipeline::PatchClassifier;
use fibromap::Result;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Nearest source index along one axis by scanning every candidate.
/// Lower index wins ties; points farther than half a voxel from every center map to nothing.
fn brute_nearest(g: &Geometry, axis: usize, p: f64) -> Option<usize> {
    let s = g.spacing[axis];
    let mut best: Option<(usize, f64)> = None;
    for c in 0..g.dims[axis] {
        let d = (g.origin[axis] + (c as f64 + 0.5) * s - p).abs();
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((c, d));
        }
    }
    best.filter(|(_, d)| *d <= 0.5 * s).map(|(c, _)| c)
}

pub fn brute_resample(src: &Volume3D, target: &Geometry) -> Vec<f64> {
    let [nx, ny, nz] = target.dims;
    let sg = src.geometry();
    let mut out = Vec::with_capacity(nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let c = target.voxel_center(i, j, k);
                let hit = (
                    brute_nearest(sg, 0, c.x),
                    brute_nearest(sg, 1, c.y),
                    brute_nearest(sg, 2, c.z),
                );
                out.push(match hit {
                    (Some(a), Some(b), Some(d)) => src.get(a, b, d),
                    _ => 0.0,
                });
            }
        }
    }
    out
}

/// Random small resampling case with spacings and origins on a quarter-millimetre grid,
/// so that ties between neighbours actually occur.
pub fn random_resample_case(r: &mut impl Rng) -> (Volume3D, Geometry) {
    let mut dims = [0; 3];
    let mut spacing = [0.0; 3];
    let mut origin = [0.0; 3];
    let mut tdims = [0; 3];
    let mut tspacing = [0.0; 3];
    let mut torigin = [0.0; 3];
    for a in 0..3 {
        dims[a] = r.random_range(1..=7);
        spacing[a] = 0.25 * r.random_range(1..=8) as f64;
        origin[a] = 0.25 * r.random_range(-8..=8) as f64;
        tdims[a] = r.random_range(1..=9);
        tspacing[a] = 0.25 * r.random_range(1..=8) as f64;
        torigin[a] = 0.25 * r.random_range(-10..=10) as f64;
    }
    let g = Geometry::new(dims, spacing, origin).unwrap();
    let data = (0..g.len()).map(|_| r.random_range(-100.0..100.0)).collect();
    let t = Geometry::new(tdims, tspacing, torigin).unwrap();
    (Volume3D::new(g, data).unwrap(), t)
}

/// The 512 x 512 @ 0.625 mm to 256 x 256 @ 1.25 mm down-sampling with a few slices.
pub fn half_resolution_case() -> (Volume3D, Geometry) {
    let g = Geometry::new([512, 512, 2], [0.625, 0.625, 8.0], [0.0; 3]).unwrap();
    let data = (0..g.len()).map(|n| ((n * 7919) % 1000) as f64).collect();
    let t = Geometry::new([256, 256, 2], [1.25, 1.25, 8.0], [0.0; 3]).unwrap();
    (Volume3D::new(g, data).unwrap(), t)
}

pub struct GradCheck {
    pub checked: usize,
    pub worst: f64,
    pub failures: usize,
}

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-6;

pub fn reduced_model(seed: u64) -> (CnnModel, Vec<(Vec<f64>, [f64; 3], u8)>) {
    let spec = ModelSpec {
        patch_size: 5,
        channels: [3, 4],
        hidden: 6,
        position_features: true,
    };
    let mut model = CnnModel::init(spec, seed).unwrap();
    let mut r = rng(seed);
    for t in model.params.iter_mut() {
        for w in t.data.iter_mut() {
            *w += r.random_range(-0.05..0.05);
        }
    }
    let batch = (0..4)
        .map(|n| {
            let px: Vec<f64> = (0..25).map(|_| r.random_range(0.0..1.0)).collect();
            let pos = [
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
                r.random_range(0.0..1.0),
            ];
            (px, pos, (n % 2) as u8)
        })
        .collect();
    (model, batch)
}

fn samples(batch: &[(Vec<f64>, [f64; 3], u8)]) -> Vec<Sample<'_>> {
    batch
        .iter()
        .map(|(px, pos, y)| Sample {
            pixels: px,
            pos: *pos,
            label: *y,
        })
        .collect()
}

fn mean_loss(model: &CnnModel, batch: &[(Vec<f64>, [f64; 3], u8)]) -> f64 {
    let total: f64 = batch
        .iter()
        .map(|(px, pos, y)| loss_bce(model.forward(px, *pos).unwrap(), *y))
        .sum();
    total / batch.len() as f64
}

/// Central differences against the analytic gradient for every parameter.
pub fn gradient_check(seed: u64) -> GradCheck {
    let (mut model, batch) = reduced_model(seed);
    let (_, grads) = model.backward(&samples(&batch)).unwrap();
    let mut out = GradCheck {
        checked: 0,
        worst: 0.0,
        failures: 0,
    };
    for t in 0..model.params.len() {
        for e in 0..model.params[t].data.len() {
            let w = model.params[t].data[e];
            model.params[t].data[e] = w + FD_STEP;
            let up = mean_loss(&model, &batch);
            model.params[t].data[e] = w - FD_STEP;
            let down = mean_loss(&model, &batch);
            model.params[t].data[e] = w;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads[t].data[e];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(FD_FLOOR);
            out.checked += 1;
            out.worst = out.worst.max(rel);
            if rel > FD_TOL {
                out.failures += 1;
            }
        }
    }
    out
}

/// Deterministic classifier that varies with both texture and position.
pub struct ProbeClassifier {
    pub p: usize,
}

impl PatchClassifier for ProbeClassifier {
    fn patch_size(&self) -> usize {
        self.p
    }

    fn norm_stats(&self) -> Option<fibromap::patches::NormStats> {
        None
    }

    fn predict(&self, pixels: &[f64], pos: [f64; 3]) -> Result<f64> {
        let m = pixels.iter().sum::<f64>() / pixels.len() as f64;
        Ok(1.0 / (1.0 + (-(0.03 * (m - 100.0) + pos[0] - 0.5 * pos[2])).exp()))
    }
}

/// Per-voxel mean over every covering window, computed voxel by voxel.
/// Uncovered voxels are reported as `None`.
pub fn brute_damage(
    model: &dyn PatchClassifier,
    cine: &Volume3D,
    myo: &Volume3D,
) -> Vec<Option<f64>> {
    let p = model.patch_size();
    let h = (p / 2) as i64;
    let windows: Vec<Window> = extract_windows(cine, myo, p, 1).unwrap();
    let norm = model.norm_stats();
    let probs: Vec<f64> = windows
        .iter()
        .map(|w| {
            let px: Vec<f64> = match norm {
                Some(n) => w.pixels.iter().map(|&x| n.apply(x)).collect(),
                None => w.pixels.clone(),
            };
            model.predict(&px, w.position_features()).unwrap()
        })
        .collect();
    let g = myo.geometry();
    let [nx, ny, nz] = g.dims;
    let mut out = vec![None; g.len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if myo.get(i, j, k) <= 0.5 {
                    continue;
                }
                let covering: Vec<f64> = windows
                    .iter()
                    .zip(&probs)
                    .filter(|(w, _)| {
                        w.slice_index == k
                            && (w.center_index[0] as i64 - i as i64).abs() <= h
                            && (w.center_index[1] as i64 - j as i64).abs() <= h
                    })
                    .map(|(_, q)| *q)
                    .collect();
                if !covering.is_empty() {
                    out[g.index(i, j, k)] = Some(covering.iter().sum::<f64>() / covering.len() as f64);
                }
            }
        }
    }
    out
}

/// Slab of myocardium-like ring on a small grid with a textured cine.
pub fn ring_case(seed: u64, n: usize) -> (Volume3D, Volume3D) {
    let g = Geometry::new([n, n, 2], [1.0, 1.0, 5.0], [0.0; 3]).unwrap();
    let mut r = rng(seed);
    let mut myo = Volume3D::zeros(g).unwrap();
    let cine = Volume3D::new(g, (0..g.len()).map(|_| r.random_range(60.0..140.0)).collect()).unwrap();
    let c = n as f64 / 2.0;
    let (r_in, r_out) = (n as f64 * 0.2, n as f64 * 0.4);
    for k in 0..2 {
        for j in 0..n {
            for i in 0..n {
                let d = (i as f64 + 0.5 - c).hypot(j as f64 + 0.5 - c);
                if d >= r_in && d <= r_out {
                    myo.set(i, j, k, 1.0);
                }
            }
        }
    }
    (cine, myo)
}

fn matmul(a: [[i64; 2]; 2], b: [[i64; 2]; 2]) -> [[i64; 2]; 2] {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}

/// Patch whose pixels are all distinct, so no non-trivial symmetry fixes it.
pub fn asymmetric_patch(p: usize) -> fibromap::patches::LabeledPatch {
    fibromap::patches::LabeledPatch {
        pixels: (0..p * p).map(|n| (n * n % 97) as f64 + n as f64 * 1e-3).collect(),
        size: p,
        pos_offset: [3.0, -1.5],
        pos_dist: 3.0f64.hypot(1.5),
        pos_scale: 40.0,
        label: 1,
        subject_id: "s001".into(),
        slice_index: 2,
        center_index: [40, 41],
    }
}

/// Enumerates the group table of the eight dihedral transforms and checks
/// their action on an asymmetric patch.
pub fn d4_suite() -> std::result::Result<(), String> {
    use fibromap::patches::{augment, d4_matrix, transform_pixels};
    const E: [[i64; 2]; 2] = [[1, 0], [0, 1]];
    let m: Vec<_> = (0..8).map(d4_matrix).collect();
    let patch = asymmetric_patch(7);
    let images: Vec<Vec<f64>> = (0..8).map(|g| transform_pixels(&patch.pixels, 7, g)).collect();
    for a in 0..8 {
        for b in 0..a {
            if images[a] == images[b] {
                return Err(format!("transforms {a} and {b} coincide"));
            }
        }
    }
    if m[0] != E {
        return Err("element 0 is not the identity".into());
    }
    let r = m[1];
    let r4 = matmul(matmul(r, r), matmul(r, r));
    if r4 != E || matmul(r, r) == E {
        return Err("quarter turn does not have order 4".into());
    }
    let f = m[4];
    if matmul(f, f) != E || f == E {
        return Err("flip does not have order 2".into());
    }
    for a in 0..8 {
        if !(0..8).any(|b| matmul(m[a], m[b]) == E) {
            return Err(format!("element {a} has no inverse"));
        }
        for b in 0..8 {
            let ab = matmul(m[a], m[b]);
            let Some(c) = (0..8).find(|&c| m[c] == ab) else {
                return Err(format!("product {a} * {b} leaves the group"));
            };
            let composed = transform_pixels(&images[b], 7, a);
            if composed != images[c] {
                return Err(format!("pixel action of {a} * {b} differs from {c}"));
            }
        }
        let aug = augment(&patch, a).map_err(|e| e.to_string())?;
        let moved = aug.pos_offset[0].hypot(aug.pos_offset[1]);
        if aug.label != patch.label || aug.pos_dist != patch.pos_dist || (moved - patch.pos_dist).abs() > 1e-12 {
            return Err(format!("element {a} changes label or distance"));
        }
    }
    Ok(())
}

pub fn largest_remainder(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| n as f64 * f).collect();
    let mut out = [0usize; 3];
    for k in 0..3 {
        out[k] = quotas[k].floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let short = n - out.iter().sum::<usize>();
    for &k in order.iter().take(short) {
        out[k] += 1;
    }
    out
}

/// Split shape, stratification and leakage for one seed.
pub fn check_split(
    subjects: &[(String, bool)],
    fractions: [f64; 3],
    seed: u64,
) -> std::result::Result<[usize; 3], String> {
    use fibromap::patches::{split_subjects, Split};
    let a = split_subjects(subjects, fractions, seed).map_err(|e| e.to_string())?;
    if a.assignment.len() != subjects.len() {
        return Err(format!("{} of {} subjects assigned", a.assignment.len(), subjects.len()));
    }
    let counts = a.counts();
    if counts != largest_remainder(subjects.len(), fractions) {
        return Err(format!("split sizes {counts:?}"));
    }
    let n_les = subjects.iter().filter(|s| s.1).count();
    for (k, split) in Split::ALL.iter().enumerate() {
        let ids = a.subjects_in(*split);
        let les = ids
            .iter()
            .filter(|id| subjects.iter().any(|s| s.0 == **id && s.1))
            .count();
        let want = n_les as f64 * fractions[k];
        if (les as f64 - want).abs() > 1.0 + 1e-9 {
            return Err(format!("{split}: {les} lesioned, expected about {want}"));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for split in Split::ALL {
        for id in a.subjects_in(split) {
            if !seen.insert(id.to_string()) {
                return Err(format!("{id} appears in two splits"));
            }
        }
    }
    Ok(counts)
}

pub fn cohort(n: usize, n_les: usize) -> Vec<(String, bool)> {
    (0..n)
        .map(|i| (format!("s{:03}", i + 1), (i + 1) * n_les / n > i * n_les / n))
        .collect()
}

/// Largest gap between the dense map and the brute-force mean over covered
/// voxels, and whether every value lies in [0, 1] with zeros off the mask.
pub fn damage_oracle(model: &dyn PatchClassifier, cine: &Volume3D, myo: &Volume3D) -> (f64, bool, usize) {
    let map = fibromap::pipeline::infer_damage_map(model, cine, myo, 0.5).unwrap();
    let want = brute_damage(model, cine, myo);
    let mut worst: f64 = 0.0;
    let mut covered = 0;
    let mut in_range = true;
    for ((v, w), m) in map.map.data().iter().zip(&want).zip(myo.data()) {
        in_range &= (0.0..=1.0).contains(v) && (*m > 0.5 || *v == 0.0);
        if let Some(w) = w {
            worst = worst.max((v - w).abs());
            covered += 1;
        }
    }
    (worst, in_range, covered)
}

/// Default phantom on a reduced grid, for quick end-to-end runs.
pub fn small_params(seed: u64) -> fibromap::phantom::PhantomParams {
    fibromap::phantom::PhantomParams {
        dims: [96, 96, 2],
        seed,
        ..fibromap::phantom::PhantomParams::default()
    }
}

pub fn quick_config(seed: u64) -> fibromap::pipeline::TrainConfig {
    fibromap::pipeline::TrainConfig {
        max_epochs: 3,
        patience: 3,
        batch_size: 32,
        stride: Some(3),
        fractions: [0.5, 0.25, 0.25],
        seed,
        ..fibromap::pipeline::TrainConfig::default()
    }
}

pub struct CliRun {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl CliRun {
    /// Value of a `key=value` stdout line.
    pub fn value(&self, key: &str) -> Option<&str> {
        self.stdout
            .lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
    }
}

pub fn cli<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> CliRun {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_fibromap"))
        .args(args)
        .output()
        .expect("binary runs");
    CliRun {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn sha256_file(path: &std::path::Path) -> String {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hashes of every file in `dir`, by file name.
pub fn dir_hashes(dir: &std::path::Path) -> std::collections::BTreeMap<String, String> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), sha256_file(&p)))
        .collect()
}

/// A small corpus on disk for command-line runs.
pub fn cli_corpus(dir: &std::path::Path, subjects: usize, lesioned: usize) {
    let d = dir.to_str().unwrap();
    let run = cli(&[
        "phantom-gen",
        "--out",
        d,
        "--subjects",
        &subjects.to_string(),
        "--lesioned",
        &lesioned.to_string(),
        "--slices",
        "1",
    ]);
    assert_eq!(run.code, 0, "{}", run.stderr);
}

pub const QUICK_TRAIN: [&str; 8] = [
    "--stride",
    "3",
    "--max-epochs",
    "2",
    "--fractions",
    "0.5,0.25,0.25",
    "--batch-size",
    "32",
];
