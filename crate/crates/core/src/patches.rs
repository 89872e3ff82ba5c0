//! Myocardial patch extraction, class balancing, stratified subject splits,
//! dihedral augmentation and intensity normalization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};

use crate::error::{Error, Result};
use crate::imgvol::{slice_center_of_mass, Volume3D};
use crate::seeds;

pub const DEFAULT_PATCH_SIZE: usize = 11;

/// A p x p cine window around a myocardial center, with its position relative
/// to the slice's LV center of mass and its lesion label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPatch {
    /// Row-major `[v][u]`, `u` along x and `v` along y.
    pub pixels: Vec<f64>,
    pub size: usize,
    /// Patch center minus LV center of mass, mm.
    pub pos_offset: [f64; 2],
    pub pos_dist: f64,
    /// Largest in-plane myocardial distance from the center of mass in this subject, mm.
    pub pos_scale: f64,
    pub label: u8,
    pub subject_id: String,
    pub slice_index: usize,
    pub center_index: [usize; 2],
}

impl LabeledPatch {
    /// `(dx, dy, dist) / pos_scale`, the head's position input.
    pub fn position_features(&self) -> [f64; 3] {
        let s = self.pos_scale;
        [
            self.pos_offset[0] / s,
            self.pos_offset[1] / s,
            self.pos_dist / s,
        ]
    }
}

/// An unlabeled window, as used for dense inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub slice_index: usize,
    pub center_index: [usize; 2],
    pub pixels: Vec<f64>,
    pub pos_offset: [f64; 2],
    pub pos_dist: f64,
    pub pos_scale: f64,
}

impl Window {
    pub fn position_features(&self) -> [f64; 3] {
        let s = self.pos_scale;
        [
            self.pos_offset[0] / s,
            self.pos_offset[1] / s,
            self.pos_dist / s,
        ]
    }
}

/// Summed-area table of one mask slice.
struct Integral {
    nx: usize,
    sums: Vec<u32>,
}

impl Integral {
    fn new(slice: &[f64], nx: usize, ny: usize) -> Self {
        let w = nx + 1;
        let mut sums = vec![0u32; w * (ny + 1)];
        for j in 0..ny {
            let mut row = 0u32;
            for i in 0..nx {
                row += u32::from(slice[i + nx * j] > 0.5);
                sums[(j + 1) * w + i + 1] = sums[j * w + i + 1] + row;
            }
        }
        Integral { nx, sums }
    }

    /// Count over the square of half-width `h` centered at `(i, j)`; the square must be inside.
    fn window(&self, i: usize, j: usize, h: usize) -> u32 {
        let w = self.nx + 1;
        let (x0, x1, y0, y1) = (i - h, i + h + 1, j - h, j + h + 1);
        self.sums[y1 * w + x1] + self.sums[y0 * w + x0] - self.sums[y0 * w + x1] - self.sums[y1 * w + x0]
    }
}

fn check_extraction_inputs(cine: &Volume3D, myo: &Volume3D, p: usize, stride: usize) -> Result<()> {
    if p % 2 == 0 {
        return Err(Error::EvenPatchSize(p));
    }
    if stride == 0 {
        return Err(Error::InvalidParameter("stride must be >= 1".into()));
    }
    if !cine.same_geometry(myo) {
        return Err(Error::GeometryMismatch(
            "cine and myocardium volumes differ in geometry".into(),
        ));
    }
    Ok(())
}

/// Largest in-plane distance of any myocardial voxel from its slice's center of mass.
fn myocardial_radius(myo: &Volume3D, centers: &[Option<(f64, f64)>]) -> f64 {
    let g = myo.geometry();
    let [nx, ny, _] = g.dims;
    let mut r_max: f64 = 0.0;
    for (k, c) in centers.iter().enumerate() {
        let Some((cx, cy)) = *c else { continue };
        let s = myo.slice(k);
        for j in 0..ny {
            for i in 0..nx {
                if s[i + nx * j] > 0.5 {
                    let d = (g.center_along(0, i) - cx).hypot(g.center_along(1, j) - cy);
                    r_max = r_max.max(d);
                }
            }
        }
    }
    r_max
}

/// Visits every lattice center whose window is at least half myocardium.
/// The callback receives `(slice, i, j, myo_count)`.
fn scan_centers(
    myo: &Volume3D,
    p: usize,
    stride: usize,
    mut visit: impl FnMut(usize, usize, usize, u32),
) {
    let [nx, ny, nz] = myo.dims();
    let h = p / 2;
    if nx < p || ny < p {
        return;
    }
    let area = (p * p) as u32;
    for k in 0..nz {
        let integral = Integral::new(myo.slice(k), nx, ny);
        for j in (h..ny - h).step_by(stride) {
            for i in (h..nx - h).step_by(stride) {
                let count = integral.window(i, j, h);
                if 2 * count >= area {
                    visit(k, i, j, count);
                }
            }
        }
    }
}

fn copy_window(cine: &Volume3D, k: usize, i: usize, j: usize, p: usize) -> Vec<f64> {
    let nx = cine.dims()[0];
    let h = p / 2;
    let s = cine.slice(k);
    let mut out = Vec::with_capacity(p * p);
    for v in 0..p {
        let row = (j + v - h) * nx;
        out.extend_from_slice(&s[row + i - h..row + i - h + p]);
    }
    out
}

fn slice_centers(myo: &Volume3D) -> Vec<Option<(f64, f64)>> {
    (0..myo.dims()[2])
        .map(|k| slice_center_of_mass(myo, k).ok())
        .collect()
}

/// Unlabeled windows at every qualifying lattice center.
pub fn extract_windows(cine: &Volume3D, myo: &Volume3D, p: usize, stride: usize) -> Result<Vec<Window>> {
    check_extraction_inputs(cine, myo, p, stride)?;
    let centers = slice_centers(myo);
    if centers.iter().all(Option::is_none) {
        return Err(Error::EmptyMask);
    }
    let scale = myocardial_radius(myo, &centers);
    let g = *cine.geometry();
    let mut out = Vec::new();
    scan_centers(myo, p, stride, |k, i, j, _| {
        // a qualifying window implies myocardium in this slice
        let (cx, cy) = centers[k].expect("slice has myocardium");
        let dx = g.center_along(0, i) - cx;
        let dy = g.center_along(1, j) - cy;
        out.push(Window {
            slice_index: k,
            center_index: [i, j],
            pixels: copy_window(cine, k, i, j, p),
            pos_offset: [dx, dy],
            pos_dist: dx.hypot(dy),
            pos_scale: scale,
        });
    });
    Ok(out)
}

/// Labeled patches at lattice centers `h + m * stride` with at least half
/// myocardium coverage. A patch is positive when lesion pixels make up at least
/// half of the myocardial pixels in its window.
pub fn extract_patches(
    subject_id: &str,
    cine: &Volume3D,
    myo: &Volume3D,
    lesion: &Volume3D,
    p: usize,
    stride: usize,
) -> Result<Vec<LabeledPatch>> {
    check_extraction_inputs(cine, myo, p, stride)?;
    if !cine.same_geometry(lesion) {
        return Err(Error::GeometryMismatch(
            "cine and lesion volumes differ in geometry".into(),
        ));
    }
    let centers = slice_centers(myo);
    if centers.iter().all(Option::is_none) {
        return Ok(Vec::new());
    }
    let scale = myocardial_radius(myo, &centers);
    let g = *cine.geometry();
    let [nx, ny, _] = g.dims;
    let h = p / 2;
    let mut lesion_integrals: Vec<Option<Integral>> = (0..g.dims[2]).map(|_| None).collect();
    let mut out = Vec::new();
    scan_centers(myo, p, stride, |k, i, j, myo_count| {
        let integral =
            lesion_integrals[k].get_or_insert_with(|| Integral::new(lesion.slice(k), nx, ny));
        let lesion_count = integral.window(i, j, h);
        let (cx, cy) = centers[k].expect("slice has myocardium");
        let dx = g.center_along(0, i) - cx;
        let dy = g.center_along(1, j) - cy;
        out.push(LabeledPatch {
            pixels: copy_window(cine, k, i, j, p),
            size: p,
            pos_offset: [dx, dy],
            pos_dist: dx.hypot(dy),
            pos_scale: scale,
            label: u8::from(2 * lesion_count >= myo_count),
            subject_id: subject_id.to_string(),
            slice_index: k,
            center_index: [i, j],
        });
    });
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidParameter(format!("unknown split `{other}`"))),
        }
    }
}

/// Intensity window `[lo, hi]` mapped linearly onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub lo: f64,
    pub hi: f64,
}

impl NormStats {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::DegenerateStats(format!("window [{lo}, {hi}]")));
        }
        Ok(NormStats { lo, hi })
    }

    /// Average of per-subject 1st and 99th percentiles over the training patches.
    pub fn from_training(ds: &PatchDataset) -> Result<Self> {
        if ds.norm.is_some() {
            return Err(Error::InvalidParameter(
                "statistics must come from raw intensities".into(),
            ));
        }
        let mut by_subject: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for p in &ds.patches {
            by_subject
                .entry(p.subject_id.as_str())
                .or_default()
                .extend_from_slice(&p.pixels);
        }
        if by_subject.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (mut lo, mut hi) = (0.0, 0.0);
        for (id, values) in by_subject.iter_mut() {
            values.sort_by(f64::total_cmp);
            let p1 = percentile_sorted(values, 0.01);
            let p99 = percentile_sorted(values, 0.99);
            if p1 >= p99 {
                return Err(Error::DegenerateStats(format!(
                    "subject {id} has 1st percentile {p1} >= 99th percentile {p99}"
                )));
            }
            lo += p1;
            hi += p99;
        }
        let n = by_subject.len() as f64;
        NormStats::new(lo / n, hi / n)
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        (x.clamp(self.lo, self.hi) - self.lo) / (self.hi - self.lo)
    }

    #[inline]
    pub fn invert(&self, y: f64) -> f64 {
        self.lo + y * (self.hi - self.lo)
    }
}

/// Linear-interpolation percentile of sorted values, `q` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    sorted[lo] + t * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchDataset {
    pub patches: Vec<LabeledPatch>,
    pub split: Split,
    pub patch_size: usize,
    /// `[negatives, positives]`
    pub class_counts: [usize; 2],
    pub norm: Option<NormStats>,
}

impl PatchDataset {
    pub fn new(patches: Vec<LabeledPatch>, split: Split, patch_size: usize) -> Result<Self> {
        if let Some(p) = patches.iter().find(|p| p.size != patch_size) {
            return Err(Error::ShapeMismatch(format!(
                "patch of size {} in a dataset of size {patch_size}",
                p.size
            )));
        }
        let mut class_counts = [0; 2];
        for p in &patches {
            class_counts[usize::from(p.label)] += 1;
        }
        Ok(PatchDataset {
            patches,
            split,
            patch_size,
            class_counts,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn subjects(&self) -> BTreeSet<&str> {
        self.patches.iter().map(|p| p.subject_id.as_str()).collect()
    }
}

/// Undersamples the majority class to the minority count and shuffles.
pub fn balance_dataset(patches: Vec<LabeledPatch>, split: Split, seed: u64) -> Result<PatchDataset> {
    let patch_size = patches.first().map_or(DEFAULT_PATCH_SIZE, |p| p.size);
    let (pos, neg): (Vec<_>, Vec<_>) = patches.into_iter().partition(|p| p.label == 1);
    if neg.is_empty() {
        return Err(Error::EmptyClass(0));
    }
    if pos.is_empty() {
        return Err(Error::EmptyClass(1));
    }
    let mut rng = seeds::rng(seed);
    let n = pos.len().min(neg.len());
    let keep = |v: Vec<LabeledPatch>, rng: &mut rand_xoshiro::SplitMix64| {
        if v.len() == n {
            return v;
        }
        let mut chosen = index::sample(rng, v.len(), n).into_vec();
        chosen.sort_unstable();
        let mut slots: Vec<Option<LabeledPatch>> = v.into_iter().map(Some).collect();
        chosen
            .into_iter()
            .map(|i| slots[i].take().expect("indices are distinct"))
            .collect::<Vec<_>>()
    };
    let mut all = keep(neg, &mut rng);
    all.extend(keep(pos, &mut rng));
    all.shuffle(&mut rng);
    PatchDataset::new(all, split, patch_size)
}

/// Subject-to-split map from a stratified split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Split>,
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl SplitAssignment {
    pub fn split_of(&self, subject_id: &str) -> Option<Split> {
        self.assignment.get(subject_id).copied()
    }

    pub fn subjects_in(&self, split: Split) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in self.assignment.values() {
            c[*s as usize] += 1;
        }
        c
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("subject_id,split\n");
        for (id, split) in &self.assignment {
            s.push_str(&format!("{id},{split}\n"));
        }
        s
    }

    pub fn from_csv(text: &str, fractions: [f64; 3], seed: u64) -> Result<Self> {
        let mut assignment = BTreeMap::new();
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let (id, split) = line
                .split_once(',')
                .ok_or_else(|| Error::InvalidParameter(format!("bad split line `{line}`")))?;
            assignment.insert(id.to_string(), split.trim().parse()?);
        }
        Ok(SplitAssignment {
            assignment,
            fractions,
            seed,
        })
    }
}

/// Hamilton apportionment of `n` items; ties favor the earlier split.
fn largest_remainder(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = q.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// Stratified split by lesion status.
///
/// Split totals follow largest-remainder rounding of the whole cohort; each
/// stratum then receives its proportional share, with the leftover units
/// placed where the fractional remainders are largest while keeping both
/// the stratum sizes and the split totals exact.
pub fn split_subjects(subjects: &[(String, bool)], fractions: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if subjects.is_empty() {
        return Err(Error::EmptyList("subjects"));
    }
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let ids: BTreeSet<&str> = subjects.iter().map(|(id, _)| id.as_str()).collect();
    if ids.len() != subjects.len() {
        return Err(Error::InvalidParameter("duplicate subject ids".into()));
    }

    let mut rng = seeds::rng(seed);
    let mut strata: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    for (id, lesion) in subjects {
        strata[usize::from(*lesion)].push(id);
    }
    strata[0].shuffle(&mut rng);
    strata[1].shuffle(&mut rng);

    let totals = largest_remainder(subjects.len(), &fractions);
    let mut alloc = [[0usize; 3]; 2];
    let mut remainders = [[0f64; 3]; 2];
    for s in 0..2 {
        for k in 0..3 {
            let q = strata[s].len() as f64 * fractions[k];
            alloc[s][k] = q.floor() as usize;
            remainders[s][k] = q - q.floor();
        }
    }
    loop {
        let row_def: Vec<usize> = (0..2)
            .map(|s| strata[s].len() - alloc[s].iter().sum::<usize>())
            .collect();
        let col_def: Vec<usize> = (0..3)
            .map(|k| totals[k] - alloc[0][k] - alloc[1][k])
            .collect();
        if row_def.iter().all(|&d| d == 0) {
            break;
        }
        let mut best: Option<(usize, usize)> = None;
        for s in 0..2 {
            for k in 0..3 {
                if row_def[s] == 0 || col_def[k] == 0 {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bs, bk)) => remainders[s][k] > remainders[bs][bk],
                };
                if better {
                    best = Some((s, k));
                }
            }
        }
        let (s, k) = best.expect("row and column deficits balance");
        alloc[s][k] += 1;
        remainders[s][k] -= 1.0;
    }

    let mut assignment = BTreeMap::new();
    for s in 0..2 {
        let mut it = strata[s].iter();
        for (k, split) in Split::ALL.iter().enumerate() {
            for id in it.by_ref().take(alloc[s][k]) {
                assignment.insert(id.to_string(), *split);
            }
        }
    }
    Ok(SplitAssignment {
        assignment,
        fractions,
        seed,
    })
}

/// Integer matrix of D4 element `g`: `r^(g mod 4)`, preceded by a horizontal
/// flip when `g >= 4`. `r` is a quarter turn `(u, v) -> (-v, u)`.
pub fn d4_matrix(g: usize) -> [[i64; 2]; 2] {
    let rot = [[1, 0], [0, 1]];
    let r = [[0, -1], [1, 0]];
    let mut m = rot;
    for _ in 0..g % 4 {
        m = mat_mul(&r, &m);
    }
    if g >= 4 {
        m = mat_mul(&m, &[[-1, 0], [0, 1]]);
    }
    m
}

pub(crate) fn mat_mul(a: &[[i64; 2]; 2], b: &[[i64; 2]; 2]) -> [[i64; 2]; 2] {
    let mut c = [[0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

/// Applies `g` to the pixel grid (about the center) and to the position offset.
pub fn transform_pixels(pixels: &[f64], p: usize, g: usize) -> Vec<f64> {
    let m = d4_matrix(g);
    let h = (p / 2) as i64;
    let mut out = vec![0.0; p * p];
    for v in -h..=h {
        for u in -h..=h {
            let nu = m[0][0] * u + m[0][1] * v;
            let nv = m[1][0] * u + m[1][1] * v;
            out[((nv + h) as usize) * p + (nu + h) as usize] = pixels[((v + h) as usize) * p + (u + h) as usize];
        }
    }
    out
}

pub fn augment(patch: &LabeledPatch, g: usize) -> Result<LabeledPatch> {
    if g >= 8 {
        return Err(Error::InvalidParameter(format!(
            "dihedral element {g} out of range 0..8"
        )));
    }
    let m = d4_matrix(g);
    let [dx, dy] = patch.pos_offset;
    let mut out = patch.clone();
    out.pixels = transform_pixels(&patch.pixels, patch.size, g);
    out.pos_offset = [
        m[0][0] as f64 * dx + m[0][1] as f64 * dy,
        m[1][0] as f64 * dx + m[1][1] as f64 * dy,
    ];
    Ok(out)
}

/// Clips and rescales every pixel with `stats`.
pub fn normalize_intensities(mut ds: PatchDataset, stats: &NormStats) -> Result<PatchDataset> {
    if ds.norm.is_some() {
        return Err(Error::InvalidParameter("dataset is already normalized".into()));
    }
    let stats = NormStats::new(stats.lo, stats.hi)?;
    for p in &mut ds.patches {
        p.pixels.iter_mut().for_each(|x| *x = stats.apply(*x));
    }
    ds.norm = Some(stats);
    Ok(ds)
}

const PATCH_MAGIC: &str = "FPATCH1";

/// Writes a `patches.bin` container: ASCII header then fixed-size
/// little-endian records `(subject u32, slice u32, i u32, j u32, label u8,
/// dx f64, dy f64, dist f64, scale f64, pixels f64 x p^2)`.
pub fn save_patches(ds: &PatchDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let subjects: Vec<&str> = ds.subjects().into_iter().collect();
    let lookup: BTreeMap<&str, u32> = subjects
        .iter()
        .enumerate()
        .map(|(i, s)| (*s, i as u32))
        .collect();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = format!(
        "{PATCH_MAGIC}\ncount {}\npatch_size {}\nfeatures dx,dy,dist,scale\nsplit {}\n",
        ds.len(),
        ds.patch_size,
        ds.split
    );
    match ds.norm {
        Some(n) => header.push_str(&format!("norm {} {}\n", n.lo, n.hi)),
        None => header.push_str("norm none\n"),
    }
    header.push_str(&format!("subjects {}\n", subjects.len()));
    for s in &subjects {
        header.push_str(s);
        header.push('\n');
    }
    header.push('\n');
    let io = |e| Error::io(path, e);
    w.write_all(header.as_bytes()).map_err(io)?;
    for p in &ds.patches {
        let mut rec = Vec::with_capacity(17 + 8 * (4 + p.pixels.len()));
        rec.extend_from_slice(&lookup[p.subject_id.as_str()].to_le_bytes());
        rec.extend_from_slice(&(p.slice_index as u32).to_le_bytes());
        rec.extend_from_slice(&(p.center_index[0] as u32).to_le_bytes());
        rec.extend_from_slice(&(p.center_index[1] as u32).to_le_bytes());
        rec.push(p.label);
        for v in [p.pos_offset[0], p.pos_offset[1], p.pos_dist, p.pos_scale]
            .iter()
            .chain(&p.pixels)
        {
            rec.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&rec).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_patches(path: impl AsRef<Path>) -> Result<PatchDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let read_line = |r: &mut BufReader<std::fs::File>| -> Result<String> {
        let mut l = String::new();
        if r.read_line(&mut l).map_err(|e| Error::io(path, e))? == 0 {
            return Err(Error::header(path, "unexpected end of header"));
        }
        Ok(l.trim_end_matches(['\n', '\r']).to_string())
    };
    let field = |line: String, key: &str| -> Result<String> {
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| Error::header(path, format!("expected `{key}`, got `{line}`")))
    };
    let parse_usize = |s: String| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::header(path, format!("bad integer `{s}`")))
    };
    if read_line(&mut r)? != PATCH_MAGIC {
        return Err(Error::header(path, "bad magic"));
    }
    let count = parse_usize(field(read_line(&mut r)?, "count")?)?;
    let p = parse_usize(field(read_line(&mut r)?, "patch_size")?)?;
    if field(read_line(&mut r)?, "features")? != "dx,dy,dist,scale" {
        return Err(Error::header(path, "unsupported feature layout"));
    }
    let split: Split = field(read_line(&mut r)?, "split")?.parse()?;
    let norm_text = field(read_line(&mut r)?, "norm")?;
    let norm = if norm_text == "none" {
        None
    } else {
        let v: Vec<f64> = norm_text
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::header(path, "bad norm line"))?;
        if v.len() != 2 {
            return Err(Error::header(path, "bad norm line"));
        }
        Some(NormStats::new(v[0], v[1])?)
    };
    let n_subjects = parse_usize(field(read_line(&mut r)?, "subjects")?)?;
    let subjects: Vec<String> = (0..n_subjects)
        .map(|_| read_line(&mut r))
        .collect::<Result<_>>()?;
    if !read_line(&mut r)?.is_empty() {
        return Err(Error::header(path, "missing blank line after header"));
    }
    let rec_len = 17 + 8 * (4 + p * p);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != count * rec_len {
        return Err(Error::DataLength {
            path: path.to_path_buf(),
            expected: count,
            found: bytes.len() / rec_len,
        });
    }
    let u32_at = |b: &[u8], o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
    let f64_at = |b: &[u8], o: usize| f64::from_le_bytes(b[o..o + 8].try_into().unwrap());
    let mut patches = Vec::with_capacity(count);
    for rec in bytes.chunks_exact(rec_len) {
        let sid = u32_at(rec, 0) as usize;
        let subject_id = subjects
            .get(sid)
            .ok_or_else(|| Error::header(path, "subject index out of range"))?
            .clone();
        let label = rec[16];
        if label > 1 {
            return Err(Error::header(path, "label out of range"));
        }
        let floats: Vec<f64> = (0..4 + p * p).map(|t| f64_at(rec, 17 + 8 * t)).collect();
        patches.push(LabeledPatch {
            pixels: floats[4..].to_vec(),
            size: p,
            pos_offset: [floats[0], floats[1]],
            pos_dist: floats[2],
            pos_scale: floats[3],
            label,
            subject_id,
            slice_index: u32_at(rec, 4) as usize,
            center_index: [u32_at(rec, 8) as usize, u32_at(rec, 12) as usize],
        });
    }
    let mut ds = PatchDataset::new(patches, split, p)?;
    ds.norm = norm;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgvol::Geometry;

    fn geom(n: usize) -> Geometry {
        Geometry::new([n, n, 1], [1.0, 1.0, 10.0], [0.0; 3]).unwrap()
    }

    fn filled(n: usize, value: f64) -> Volume3D {
        Volume3D::new(geom(n), vec![value; n * n]).unwrap()
    }

    fn patch(label: u8, id: &str) -> LabeledPatch {
        LabeledPatch {
            pixels: (0..9).map(f64::from).collect(),
            size: 3,
            pos_offset: [3.0, -4.0],
            pos_dist: 5.0,
            pos_scale: 10.0,
            label,
            subject_id: id.into(),
            slice_index: 0,
            center_index: [1, 1],
        }
    }

    #[test]
    fn full_lesion_window_is_positive() {
        let cine = filled(5, 2.0);
        let myo = filled(5, 1.0);
        let p = extract_patches("a", &cine, &myo, &filled(5, 1.0), 5, 1).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].label, 1);
        assert_eq!(p[0].pixels, vec![2.0; 25]);
        assert_eq!(p[0].pos_dist, 0.0);
    }

    #[test]
    fn label_threshold_boundary() {
        // 10 x 10 window of myocardium, lesion covering 49 or 50 of the 100 pixels
        let n = 11;
        let myo = {
            let mut v = filled(n, 0.0);
            for j in 0..10 {
                for i in 0..10 {
                    v.set(i, j, 0, 1.0);
                }
            }
            v
        };
        let with_lesion = |count: usize| {
            let mut v = filled(n, 0.0);
            for t in 0..count {
                v.set(t % 10, t / 10, 0, 1.0);
            }
            v
        };
        let cine = filled(n, 0.0);
        // the single 11x11 window sees all 100 myocardial pixels
        let neg = extract_patches("a", &cine, &myo, &with_lesion(49), 11, 1).unwrap();
        let pos = extract_patches("a", &cine, &myo, &with_lesion(50), 11, 1).unwrap();
        assert_eq!((neg.len(), pos.len()), (1, 1));
        assert_eq!(neg[0].label, 0);
        assert_eq!(pos[0].label, 1);
    }

    #[test]
    fn rejects_even_size_and_mismatched_geometry() {
        let v = filled(7, 1.0);
        assert!(matches!(
            extract_patches("a", &v, &v, &v, 4, 1),
            Err(Error::EvenPatchSize(4))
        ));
        let other = filled(8, 1.0);
        assert!(matches!(
            extract_patches("a", &v, &other, &v, 3, 1),
            Err(Error::GeometryMismatch(_))
        ));
    }

    #[test]
    fn balance_equalizes_classes() {
        let mut v: Vec<LabeledPatch> = (0..7).map(|_| patch(0, "a")).collect();
        v.extend((0..3).map(|_| patch(1, "a")));
        let ds = balance_dataset(v, Split::Train, 1).unwrap();
        assert_eq!(ds.class_counts, [3, 3]);
        assert!(matches!(
            balance_dataset(vec![patch(0, "a")], Split::Train, 1),
            Err(Error::EmptyClass(1))
        ));
    }

    #[test]
    fn split_fraction_validation() {
        let s = vec![("a".to_string(), true)];
        assert!(split_subjects(&s, [0.5, 0.5, 0.5], 0).is_err());
        assert!(split_subjects(&[], [1.0, 0.0, 0.0], 0).is_err());
        let all = split_subjects(&s, [1.0, 0.0, 0.0], 0).unwrap();
        assert_eq!(all.counts(), [1, 0, 0]);
    }

    #[test]
    fn largest_remainder_ties_favor_earlier() {
        assert_eq!(largest_remainder(73, &[0.72, 0.14, 0.14]), [53, 10, 10]);
        assert_eq!(largest_remainder(75, &[0.72, 0.14, 0.14]), [54, 11, 10]);
    }

    #[test]
    fn augment_rejects_out_of_range() {
        assert!(augment(&patch(0, "a"), 8).is_err());
    }

    #[test]
    fn percentiles_interpolate() {
        let v: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(percentile_sorted(&v, 0.01), 1.0);
        assert_eq!(percentile_sorted(&v, 0.99), 99.0);
        assert_eq!(percentile_sorted(&[0.0, 1.0], 0.25), 0.25);
    }

    #[test]
    fn degenerate_stats() {
        let mut p = patch(0, "a");
        p.pixels = vec![4.0; 9];
        let ds = PatchDataset::new(vec![p], Split::Train, 3).unwrap();
        assert!(matches!(
            NormStats::from_training(&ds),
            Err(Error::DegenerateStats(_))
        ));
        assert!(NormStats::new(1.0, 1.0).is_err());
    }
}
