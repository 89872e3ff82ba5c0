//! Synthetic cine-like cohort with annular myocardium and texture-only lesions.
//!
//! Each slice is built from independent Gaussian-filtered white-noise fields:
//! healthy tissue uses the base correlation length, lesions a shorter one with
//! a different variance, and the blood pool carries a flow-artifact texture
//! that also fills a trabeculated band of healthy myocardium at the endocardium.
//! All regions are shifted to the same mean, so lesions differ from healthy
//! myocardium only in second-order statistics.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::imgvol::{save_volume, Geometry, Volume3D};
use crate::seeds;

/// Maximum regenerations when a subject fails the mean-camouflage check.
pub const MAX_CAMOUFLAGE_RETRIES: u32 = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomParams {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Endocardial radius, mm.
    pub inner_radius: f64,
    /// Epicardial radius, mm.
    pub outer_radius: f64,
    /// Uniform jitter of the LV center in-plane, mm.
    pub center_jitter: f64,
    pub base_mean: f64,
    /// Standard deviation of the healthy texture field.
    pub base_std: f64,
    /// Gaussian sigma of healthy texture, voxels.
    pub base_corr_len: f64,
    /// Gaussian sigma of lesion texture, voxels.
    pub lesion_corr_len: f64,
    /// Lesion texture variance relative to healthy texture.
    pub lesion_variance_ratio: f64,
    /// Gaussian sigma of the blood-pool flow texture, voxels.
    pub pool_corr_len: f64,
    pub pool_variance_ratio: f64,
    /// Angular extent of the lesion sector, radians.
    pub lesion_extent: f64,
    /// Relative per-subject variation of the extent inside a corpus.
    pub lesion_extent_jitter: f64,
    /// Fraction of the wall, from the endocardium outwards, covered by a lesion.
    pub transmurality: f64,
    /// Fraction of the wall, from the endocardium, lesioned around the whole
    /// circumference outside the sector (subendocardial border zone; 0 disables).
    pub rim_transmurality: f64,
    /// Fraction of the wall next to the endocardium whose healthy tissue
    /// carries the blood-pool texture.
    pub trabecular_fraction: f64,
    /// Standard deviation of unfiltered white noise added everywhere.
    pub noise_floor: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            dims: [256, 256, 4],
            spacing: [1.25, 1.25, 10.0],
            inner_radius: 22.0,
            outer_radius: 36.0,
            center_jitter: 2.5,
            base_mean: 100.0,
            base_std: 20.0,
            base_corr_len: 1.6,
            lesion_corr_len: 0.9,
            lesion_variance_ratio: 1.3,
            pool_corr_len: 0.9,
            pool_variance_ratio: 1.3,
            lesion_extent: 1.5 * PI,
            lesion_extent_jitter: 0.15,
            transmurality: 1.0,
            rim_transmurality: 0.0,
            trabecular_fraction: 0.3,
            noise_floor: 4.0,
            seed: 1,
        }
    }
}

impl PhantomParams {
    /// Defaults with the corpus stream of `master` as the generator seed.
    pub fn for_master_seed(master: u64) -> Self {
        PhantomParams {
            seed: seeds::derive(master, seeds::Stream::Corpus),
            ..PhantomParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        Geometry::new(self.dims, self.spacing, [0.0; 3])?;
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.to_string()));
        if !(self.inner_radius >= 0.0 && self.inner_radius < self.outer_radius) {
            return bad("inner radius must be >= 0 and < outer radius");
        }
        if !(self.lesion_variance_ratio > 0.0 && self.pool_variance_ratio > 0.0) {
            return bad("variance ratios must be > 0");
        }
        if !(self.lesion_extent > 0.0 && self.lesion_extent <= TAU) {
            return bad("lesion extent must lie in (0, 2pi]");
        }
        if !(self.transmurality > 0.0 && self.transmurality <= 1.0) {
            return bad("transmurality must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.rim_transmurality) {
            return bad("rim transmurality must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.trabecular_fraction) {
            return bad("trabecular fraction must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.lesion_extent_jitter) {
            return bad("lesion extent jitter must lie in [0, 1)");
        }
        let nonneg = [
            self.center_jitter,
            self.base_std,
            self.base_corr_len,
            self.lesion_corr_len,
            self.pool_corr_len,
            self.noise_floor,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || !self.base_mean.is_finite() {
            return bad("texture parameters must be finite and non-negative");
        }
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            dims: self.dims,
            spacing: self.spacing,
            origin: [0.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSubject {
    pub subject_id: String,
    pub cine: Volume3D,
    pub myo_mask: Volume3D,
    pub lesion_mask: Volume3D,
    pub has_lesion: bool,
    /// Seed actually used, after camouflage retries.
    pub seed: u64,
}

/// Generates one subject from `params.seed`.
pub fn generate_subject(params: &PhantomParams, with_lesion: bool) -> Result<PhantomSubject> {
    params.validate()?;
    let mut seed = params.seed;
    for attempt in 0..=MAX_CAMOUFLAGE_RETRIES {
        let subject = build_subject(params, seed, with_lesion)?;
        if camouflage_holds(&subject) {
            return Ok(subject);
        }
        seed = seeds::nth(params.seed, u64::from(attempt) + 1);
    }
    Err(Error::InvalidParameter(format!(
        "lesion mean differs from healthy myocardium after {MAX_CAMOUFLAGE_RETRIES} retries"
    )))
}

/// |mean(lesion) - mean(healthy myocardium)| < 0.05 * std(myocardium).
pub fn camouflage_holds(s: &PhantomSubject) -> bool {
    let (mut les, mut hea, mut myo) = (Stats::default(), Stats::default(), Stats::default());
    for ((&c, &m), &l) in s
        .cine
        .data()
        .iter()
        .zip(s.myo_mask.data())
        .zip(s.lesion_mask.data())
    {
        if m == 1.0 {
            myo.push(c);
            if l == 1.0 {
                les.push(c);
            } else {
                hea.push(c);
            }
        }
    }
    if les.n == 0 || hea.n == 0 {
        return true;
    }
    (les.mean() - hea.mean()).abs() < 0.05 * myo.std()
}

#[derive(Default)]
struct Stats {
    n: usize,
    sum: f64,
    sum_sq: f64,
}

impl Stats {
    fn push(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }
    fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }
    fn std(&self) -> f64 {
        let m = self.mean();
        (self.sum_sq / self.n as f64 - m * m).max(0.0).sqrt()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Region {
    Background,
    Pool,
    Healthy,
    Trabecular,
    Lesion,
}

fn build_subject(params: &PhantomParams, seed: u64, with_lesion: bool) -> Result<PhantomSubject> {
    let geom = params.geometry();
    let [nx, ny, nz] = geom.dims;
    let [sx, sy, _] = geom.spacing;
    let mut rng = seeds::rng(seed);

    let jitter = |rng: &mut rand_xoshiro::SplitMix64| {
        if params.center_jitter > 0.0 {
            rng.random_range(-params.center_jitter..=params.center_jitter)
        } else {
            0.0
        }
    };
    let cx = nx as f64 * sx / 2.0 + jitter(&mut rng);
    let cy = ny as f64 * sy / 2.0 + jitter(&mut rng);
    let sector_start: f64 = rng.random_range(0.0..TAU);
    let wall = params.outer_radius - params.inner_radius;
    let lesion_outer = params.inner_radius + params.transmurality * wall;
    let trabecular_outer = params.inner_radius + params.trabecular_fraction * wall;
    let rim_outer = params.inner_radius + params.rim_transmurality * wall;

    let mut myo = Volume3D::zeros(geom)?;
    let mut lesion = Volume3D::zeros(geom)?;
    let mut regions = vec![Region::Background; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let dx = geom.center_along(0, i) - cx;
            let dy = geom.center_along(1, j) - cy;
            let r = dx.hypot(dy);
            let region = if r < params.inner_radius {
                Region::Pool
            } else if r <= params.outer_radius {
                let theta = (dy.atan2(dx) - sector_start).rem_euclid(TAU);
                let in_core = theta < params.lesion_extent && r <= lesion_outer;
                let in_rim = params.rim_transmurality > 0.0 && r <= rim_outer;
                if with_lesion && (in_core || in_rim) {
                    Region::Lesion
                } else if r < trabecular_outer {
                    Region::Trabecular
                } else {
                    Region::Healthy
                }
            } else {
                Region::Background
            };
            regions[i + nx * j] = region;
        }
    }
    for k in 0..nz {
        for (idx, region) in regions.iter().enumerate() {
            let at = idx + nx * ny * k;
            if matches!(region, Region::Healthy | Region::Trabecular | Region::Lesion) {
                myo.data_mut()[at] = 1.0;
            }
            if *region == Region::Lesion {
                lesion.data_mut()[at] = 1.0;
            }
        }
    }

    let base_amp = params.base_std;
    let lesion_amp = params.base_std * params.lesion_variance_ratio.sqrt();
    let pool_amp = params.base_std * params.pool_variance_ratio.sqrt();
    let mut cine = Volume3D::zeros(geom)?;
    for k in 0..nz {
        let base = unit_field(&mut rng, nx, ny, params.base_corr_len);
        let les = if with_lesion {
            unit_field(&mut rng, nx, ny, params.lesion_corr_len)
        } else {
            vec![0.0; nx * ny]
        };
        let pool = unit_field(&mut rng, nx, ny, params.pool_corr_len);
        let slice = &mut cine.data_mut()[k * nx * ny..(k + 1) * nx * ny];
        for (idx, v) in slice.iter_mut().enumerate() {
            let white: f64 = rng.sample(StandardNormal);
            let texture = match regions[idx] {
                Region::Lesion => lesion_amp * les[idx],
                Region::Pool | Region::Trabecular => pool_amp * pool[idx],
                Region::Healthy | Region::Background => base_amp * base[idx],
            };
            *v = params.base_mean + texture + params.noise_floor * white;
        }
    }
    match_region_means(&mut cine, &regions);

    Ok(PhantomSubject {
        subject_id: String::new(),
        cine,
        myo_mask: myo,
        lesion_mask: lesion,
        has_lesion: with_lesion && lesion_count(&regions) > 0,
        seed,
    })
}

fn lesion_count(regions: &[Region]) -> usize {
    regions.iter().filter(|r| **r == Region::Lesion).count()
}

/// Shifts lesion, pool and trabecular intensities so their means equal the
/// compact healthy myocardium mean.
fn match_region_means(cine: &mut Volume3D, regions: &[Region]) {
    let plane = regions.len();
    let mean_of = |cine: &Volume3D, target: Region| {
        let (mut s, mut n) = (0.0, 0usize);
        for (idx, v) in cine.data().iter().enumerate() {
            if regions[idx % plane] == target {
                s += v;
                n += 1;
            }
        }
        (n > 0).then(|| s / n as f64)
    };
    let Some(healthy) = mean_of(cine, Region::Healthy) else {
        return;
    };
    for region in [Region::Lesion, Region::Pool, Region::Trabecular] {
        if let Some(m) = mean_of(cine, region) {
            let shift = healthy - m;
            for (idx, v) in cine.data_mut().iter_mut().enumerate() {
                if regions[idx % plane] == region {
                    *v += shift;
                }
            }
        }
    }
}

/// Zero-mean, unit-variance Gaussian-filtered white noise on an `nx` x `ny` plane.
///
/// Noise is drawn on a padded plane and filtered without boundary handling, so
/// the output is stationary up to the edges.
fn unit_field(rng: &mut impl Rng, nx: usize, ny: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let r = kernel.len() / 2;
    let (px, py) = (nx + 2 * r, ny + 2 * r);
    let noise: Vec<f64> = (0..px * py).map(|_| rng.sample(StandardNormal)).collect();
    if r == 0 {
        return noise;
    }
    // rows: padded ny + 2r lines of nx outputs
    let mut tmp = vec![0.0; nx * py];
    for j in 0..py {
        let row = &noise[j * px..(j + 1) * px];
        for i in 0..nx {
            tmp[j * nx + i] = kernel
                .iter()
                .zip(&row[i..i + kernel.len()])
                .map(|(k, v)| k * v)
                .sum();
        }
    }
    let mut out = vec![0.0; nx * ny];
    for j in 0..ny {
        for (t, k) in kernel.iter().enumerate() {
            let src = &tmp[(j + t) * nx..(j + t + 1) * nx];
            for (o, v) in out[j * nx..(j + 1) * nx].iter_mut().zip(src) {
                *o += k * v;
            }
        }
    }
    // variance of separable filtered unit noise is (sum k^2)^2
    let norm = kernel.iter().map(|k| k * k).sum::<f64>();
    out.iter_mut().for_each(|v| *v /= norm);
    out
}

/// Normalized 1D Gaussian with radius ceil(3 sigma); sigma below 1e-3 is the identity.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma < 1e-3 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// One subject's slot in a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectPlan {
    pub subject_id: String,
    pub index: usize,
    pub has_lesion: bool,
    pub params: PhantomParams,
}

impl SubjectPlan {
    pub fn realize(&self) -> Result<PhantomSubject> {
        let mut s = generate_subject(&self.params, self.has_lesion)?;
        s.subject_id = self.subject_id.clone();
        Ok(s)
    }
}

/// The recipe for a corpus without materializing any volume.
///
/// Subject `i` draws its seed from the `i+1`-th SplitMix64 output of
/// `params.seed`, so growing the corpus leaves earlier subjects untouched.
/// Lesioned subjects are spread evenly over the index range.
pub fn plan_corpus(n_subjects: usize, n_lesioned: usize, params: &PhantomParams) -> Result<Vec<SubjectPlan>> {
    params.validate()?;
    if n_subjects == 0 {
        return Err(Error::InvalidParameter("corpus needs at least one subject".into()));
    }
    if n_lesioned > n_subjects {
        return Err(Error::InvalidParameter(format!(
            "{n_lesioned} lesioned subjects requested out of {n_subjects}"
        )));
    }
    let width = n_subjects.to_string().len().max(3);
    let mut stream = seeds::rng(params.seed);
    Ok((0..n_subjects)
        .map(|i| {
            let seed = rand::RngCore::next_u64(&mut stream);
            let has_lesion = (i + 1) * n_lesioned / n_subjects > i * n_lesioned / n_subjects;
            let mut p = params.clone();
            p.seed = seed;
            if has_lesion && params.lesion_extent_jitter > 0.0 {
                // extent draw comes from its own stream so texture draws stay aligned
                let mut r = seeds::rng(seeds::nth(seed, 1));
                let f: f64 = r.random_range(
                    1.0 - params.lesion_extent_jitter..=1.0 + params.lesion_extent_jitter,
                );
                p.lesion_extent = (params.lesion_extent * f).min(TAU);
            }
            SubjectPlan {
                subject_id: format!("s{:0width$}", i + 1),
                index: i,
                has_lesion,
                params: p,
            }
        })
        .collect())
}

pub fn generate_corpus(n_subjects: usize, n_lesioned: usize, params: &PhantomParams) -> Result<Vec<PhantomSubject>> {
    plan_corpus(n_subjects, n_lesioned, params)?
        .iter()
        .map(SubjectPlan::realize)
        .collect()
}

/// Writes `<id>_cine.fvol`, `<id>_myo.fvol`, `<id>_lesion.fvol` for every
/// subject plus `manifest.csv`. Subjects are generated one at a time.
pub fn write_corpus(plans: &[SubjectPlan], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("subject_id,has_lesion,seed\n");
    for plan in plans {
        let s = plan.realize()?;
        save_volume(&s.cine, dir.join(format!("{}_cine.fvol", s.subject_id)))?;
        save_volume(&s.myo_mask, dir.join(format!("{}_myo.fvol", s.subject_id)))?;
        save_volume(&s.lesion_mask, dir.join(format!("{}_lesion.fvol", s.subject_id)))?;
        let _ = writeln!(manifest, "{},{},{}", s.subject_id, u8::from(s.has_lesion), s.seed);
    }
    let path = dir.join("manifest.csv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}
