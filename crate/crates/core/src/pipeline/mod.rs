//! Training with ablations, evaluation, the patch-size sweep and dense damage maps.

mod damage;
mod source;
mod sweep;

pub use damage::{
    infer_damage_map, save_damage_map, subject_decision, write_pgm_slices, DamageMap,
    DEFAULT_THRESHOLD,
};
pub use source::{CorpusDir, PhantomCorpus, SubjectInfo, SubjectSource, SubjectVolumes};
pub use sweep::{sweep_patch_size, SweepResult, SweepRow, DEFAULT_SWEEP_SIZES};

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{adam_step, loss_bce, CnnModel, ModelSpec, Sample, Tensor, Workspace};
use crate::patches::{
    balance_dataset, d4_matrix, extract_patches, normalize_intensities, split_subjects,
    transform_pixels, LabeledPatch, NormStats, PatchDataset, Split, SplitAssignment,
    DEFAULT_PATCH_SIZE,
};
use crate::seeds::{self, Stream};

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.72, 0.14, 0.14];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub patch_size: usize,
    /// Training lattice stride; `None` tiles at the patch size.
    pub stride: Option<usize>,
    pub fractions: [f64; 3],
    pub channels: [usize; 2],
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub augment: bool,
    pub position_features: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size: DEFAULT_PATCH_SIZE,
            stride: None,
            fractions: DEFAULT_FRACTIONS,
            channels: [8, 16],
            hidden: 32,
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 100,
            patience: 20,
            augment: true,
            position_features: true,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model_spec().validate()?;
        if self.stride == Some(0) {
            return Err(Error::InvalidParameter("stride must be >= 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidParameter(
                "batch size and epoch count must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter("learning rate must be > 0".into()));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.patch_size)
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            patch_size: self.patch_size,
            channels: self.channels,
            hidden: self.hidden,
            position_features: self.position_features,
        }
    }
}

/// Anything that maps a normalized patch and its position to a lesion probability.
pub trait PatchClassifier: Sync {
    fn patch_size(&self) -> usize;

    /// Intensity window to apply to raw cine values before `predict`.
    fn norm_stats(&self) -> Option<NormStats>;

    fn predict(&self, pixels: &[f64], pos: [f64; 3]) -> Result<f64>;

    fn predict_batch(&self, items: &[(&[f64], [f64; 3])]) -> Result<Vec<f64>> {
        items.par_iter().map(|(px, pos)| self.predict(px, *pos)).collect()
    }
}

impl PatchClassifier for CnnModel {
    fn patch_size(&self) -> usize {
        self.spec.patch_size
    }

    fn norm_stats(&self) -> Option<NormStats> {
        self.norm
    }

    fn predict(&self, pixels: &[f64], pos: [f64; 3]) -> Result<f64> {
        self.forward(pixels, pos)
    }

    fn predict_batch(&self, items: &[(&[f64], [f64; 3])]) -> Result<Vec<f64>> {
        items
            .par_chunks(256)
            .map_init(
                || Workspace::new(&self.spec),
                |ws, chunk| {
                    chunk
                        .iter()
                        .map(|(px, pos)| self.forward_with(ws, px, *pos))
                        .collect::<Result<Vec<_>>>()
                },
            )
            .collect::<Result<Vec<_>>>()
            .map(|v| v.concat())
    }
}

/// Classifier with a fixed output, for wiring checks.
#[derive(Clone, Copy, Debug)]
pub struct ConstantClassifier {
    pub patch_size: usize,
    pub prob: f64,
}

impl PatchClassifier for ConstantClassifier {
    fn patch_size(&self) -> usize {
        self.patch_size
    }

    fn norm_stats(&self) -> Option<NormStats> {
        None
    }

    fn predict(&self, _pixels: &[f64], _pos: [f64; 3]) -> Result<f64> {
        Ok(self.prob)
    }
}

/// Patch-level classification results on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub split: Split,
    pub n: usize,
    pub true_pos: usize,
    pub true_neg: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub accuracy: f64,
    /// `[negatives, positives]`; `None` when the class is absent.
    pub class_accuracy: [Option<f64>; 2],
    pub loss: f64,
}

impl Metrics {
    pub fn from_predictions(split: Split, probs: &[f64], labels: &[u8]) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if probs.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} predictions for {} labels",
                probs.len(),
                labels.len()
            )));
        }
        let (mut tp, mut tn, mut fp, mut fneg) = (0, 0, 0, 0);
        let mut loss = 0.0;
        for (&p, &y) in probs.iter().zip(labels) {
            loss += loss_bce(p, y);
            match (p >= DEFAULT_THRESHOLD, y == 1) {
                (true, true) => tp += 1,
                (false, false) => tn += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
            }
        }
        let n = probs.len();
        let frac = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
        Ok(Metrics {
            split,
            n,
            true_pos: tp,
            true_neg: tn,
            false_pos: fp,
            false_neg: fneg,
            accuracy: (tp + tn) as f64 / n as f64,
            class_accuracy: [frac(tn, fp), frac(tp, fneg)],
            loss: loss / n as f64,
        })
    }
}

/// Thresholds `model` at 0.5 over a normalized dataset.
pub fn evaluate<C: PatchClassifier + ?Sized>(model: &C, ds: &PatchDataset) -> Result<Metrics> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if ds.patch_size != model.patch_size() {
        return Err(Error::ShapeMismatch(format!(
            "model patch size {} vs dataset {}",
            model.patch_size(),
            ds.patch_size
        )));
    }
    let items: Vec<(&[f64], [f64; 3])> = ds
        .patches
        .iter()
        .map(|p| (p.pixels.as_slice(), p.position_features()))
        .collect();
    let probs = model.predict_batch(&items)?;
    let labels: Vec<u8> = ds.patches.iter().map(|p| p.label).collect();
    Metrics::from_predictions(ds.split, &probs, &labels)
}

/// Patches of every subject in a cohort at one patch size and stride.
#[derive(Clone, Debug)]
pub struct ExtractedCorpus {
    pub patch_size: usize,
    pub stride: usize,
    pub subjects: Vec<SubjectInfo>,
    pub patches: Vec<Vec<LabeledPatch>>,
}

impl ExtractedCorpus {
    pub fn total(&self) -> usize {
        self.patches.iter().map(Vec::len).sum()
    }
}

pub fn extract_corpus<S: SubjectSource + ?Sized>(
    source: &S,
    patch_size: usize,
    stride: usize,
) -> Result<ExtractedCorpus> {
    extract_corpus_multi(source, &[patch_size], stride_fn(stride))
        .map(|mut v| v.pop().expect("one size"))
}

fn stride_fn(stride: usize) -> impl Fn(usize) -> usize {
    move |_| stride
}

/// Extracts several patch sizes while loading each subject once.
pub(crate) fn extract_corpus_multi<S: SubjectSource + ?Sized>(
    source: &S,
    sizes: &[usize],
    stride_for: impl Fn(usize) -> usize,
) -> Result<Vec<ExtractedCorpus>> {
    let subjects = source.subjects();
    if subjects.is_empty() {
        return Err(Error::EmptyList("subjects"));
    }
    let mut out: Vec<ExtractedCorpus> = sizes
        .iter()
        .map(|&p| ExtractedCorpus {
            patch_size: p,
            stride: stride_for(p),
            subjects: subjects.clone(),
            patches: Vec::with_capacity(subjects.len()),
        })
        .collect();
    for idx in 0..subjects.len() {
        let vols = source.load(idx)?;
        for c in &mut out {
            c.patches.push(extract_patches(
                &vols.info.subject_id,
                &vols.cine,
                &vols.myo,
                &vols.lesion,
                c.patch_size,
                c.stride,
            )?);
        }
    }
    Ok(out)
}

/// Balanced, normalized datasets for the three splits.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub assignment: SplitAssignment,
    pub norm: NormStats,
    pub train: PatchDataset,
    pub val: PatchDataset,
    pub test: PatchDataset,
}

impl Datasets {
    pub fn get(&self, split: Split) -> &PatchDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn assign_splits(subjects: &[SubjectInfo], fractions: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    let pairs: Vec<(String, bool)> = subjects
        .iter()
        .map(|s| (s.subject_id.clone(), s.has_lesion))
        .collect();
    split_subjects(&pairs, fractions, seeds::derive(seed, Stream::Split))
}

/// Groups patches by split, balances each split, and normalizes all three with
/// statistics from the balanced training set.
pub fn build_datasets(corpus: &ExtractedCorpus, assignment: &SplitAssignment, seed: u64) -> Result<Datasets> {
    let mut grouped: [Vec<LabeledPatch>; 3] = Default::default();
    for (info, patches) in corpus.subjects.iter().zip(&corpus.patches) {
        let split = assignment.split_of(&info.subject_id).ok_or_else(|| {
            Error::InvalidParameter(format!("subject {} has no split", info.subject_id))
        })?;
        grouped[split as usize].extend(patches.iter().cloned());
    }
    let balance_seed = seeds::derive(seed, Stream::Balance);
    let mut balanced = Vec::with_capacity(3);
    for (n, (split, patches)) in [Split::Train, Split::Val, Split::Test]
        .into_iter()
        .zip(grouped)
        .enumerate()
    {
        if patches.is_empty() {
            return Err(Error::EmptySplit(split.to_string()));
        }
        balanced.push(balance_dataset(
            patches,
            split,
            seeds::nth(balance_seed, n as u64 + 1),
        )?);
    }
    let test = balanced.pop().expect("three splits");
    let val = balanced.pop().expect("three splits");
    let train = balanced.pop().expect("three splits");
    let norm = NormStats::from_training(&train)?;
    Ok(Datasets {
        assignment: assignment.clone(),
        norm,
        train: normalize_intensities(train, &norm)?,
        val: normalize_intensities(val, &norm)?,
        test: normalize_intensities(test, &norm)?,
    })
}

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub model: CnnModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: Metrics,
    pub epochs_run: usize,
}

pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,split,accuracy,loss\n");
    for r in history {
        let _ = writeln!(out, "{},{},{},{}", r.epoch, r.split, r.accuracy, r.loss);
    }
    out
}

/// Mini-batch Adam on `ds.train`, early stopping on validation accuracy.
///
/// Epoch 0 records the untrained model. Each later epoch visits the training
/// set in a fresh order; with augmentation on, every visit draws one of the
/// eight dihedral transforms for its patch.
pub fn train_model(ds: &Datasets, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.train.patch_size != cfg.patch_size {
        return Err(Error::ShapeMismatch(format!(
            "config patch size {} vs dataset {}",
            cfg.patch_size, ds.train.patch_size
        )));
    }
    if ds.train.is_empty() {
        return Err(Error::EmptySplit(Split::Train.to_string()));
    }
    if ds.val.is_empty() {
        return Err(Error::EmptySplit(Split::Val.to_string()));
    }
    let mut model = CnnModel::init(cfg.model_spec(), seeds::derive(cfg.seed, Stream::Init))?;
    model.norm = Some(ds.norm);
    let mut order_rng = seeds::rng(seeds::derive(cfg.seed, Stream::Order));
    let mut aug_rng = seeds::rng(seeds::derive(cfg.seed, Stream::Augment));

    let mut history = Vec::new();
    let train0 = evaluate(&model, &ds.train)?;
    let val0 = evaluate(&model, &ds.val)?;
    history.push(record(0, &train0));
    history.push(record(0, &val0));
    let mut best = (model.clone(), val0, 0usize);
    let mut stale = 0;

    let p = cfg.patch_size;
    let n = ds.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut ws = Workspace::new(&model.spec);
    let mut grads: Vec<Tensor> = model
        .spec
        .param_shapes()
        .iter()
        .map(|s| Tensor::zeros(s))
        .collect();
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let mut pixels: Vec<Vec<f64>> = Vec::with_capacity(chunk.len());
            let mut meta = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let patch = &ds.train.patches[i];
                let mut pos = patch.position_features();
                if cfg.augment {
                    let g = aug_rng.random_range(0..8usize);
                    pixels.push(transform_pixels(&patch.pixels, p, g));
                    let m = d4_matrix(g);
                    let (dx, dy) = (pos[0], pos[1]);
                    pos[0] = m[0][0] as f64 * dx + m[0][1] as f64 * dy;
                    pos[1] = m[1][0] as f64 * dx + m[1][1] as f64 * dy;
                } else {
                    pixels.push(patch.pixels.clone());
                }
                meta.push((pos, patch.label));
            }
            let batch: Vec<Sample<'_>> = pixels
                .iter()
                .zip(&meta)
                .map(|(px, &(pos, label))| Sample {
                    pixels: px,
                    pos,
                    label,
                })
                .collect();
            grads.iter_mut().for_each(|g| g.data.fill(0.0));
            let (loss, ok) = model.accumulate_gradients(&mut ws, &batch, &mut grads)?;
            loss_sum += loss * batch.len() as f64;
            correct += ok;
            let CnnModel { params, adam, .. } = &mut model;
            adam_step(params, &grads, adam, cfg.learning_rate)?;
        }
        epochs_run = epoch;
        history.push(EpochRecord {
            epoch,
            split: Split::Train,
            accuracy: correct as f64 / n as f64,
            loss: loss_sum / n as f64,
        });
        let val = evaluate(&model, &ds.val)?;
        history.push(record(epoch, &val));
        if val.accuracy > best.1.accuracy {
            best = (model.clone(), val, epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (model, best_val, best_epoch) = best;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val,
        epochs_run,
    })
}

fn record(epoch: usize, m: &Metrics) -> EpochRecord {
    EpochRecord {
        epoch,
        split: m.split,
        accuracy: m.accuracy,
        loss: m.loss,
    }
}

/// Everything produced by one end-to-end run.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub datasets: Datasets,
    pub outcome: TrainOutcome,
}

/// Split, extract, balance, normalize and train.
pub fn train<S: SubjectSource + ?Sized>(source: &S, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let corpus = extract_corpus(source, cfg.patch_size, cfg.stride())?;
    train_on_corpus(&corpus, cfg)
}

/// As [`train`], reusing already extracted patches.
pub fn train_on_corpus(corpus: &ExtractedCorpus, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    if corpus.patch_size != cfg.patch_size {
        return Err(Error::ShapeMismatch(format!(
            "corpus patch size {} vs config {}",
            corpus.patch_size, cfg.patch_size
        )));
    }
    let assignment = assign_splits(&corpus.subjects, cfg.fractions, cfg.seed)?;
    let datasets = build_datasets(corpus, &assignment, cfg.seed)?;
    let outcome = train_model(&datasets, cfg)?;
    Ok(TrainRun { datasets, outcome })
}

/// Per-subject damage-map summary against ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectResult {
    pub subject_id: String,
    pub has_lesion: bool,
    pub mean_score: f64,
    pub decision: bool,
    /// Mean probability over true lesion voxels, if any.
    pub lesion_mean: Option<f64>,
    /// Mean probability over myocardium outside the lesion, if any.
    pub healthy_mean: Option<f64>,
}

impl SubjectResult {
    pub fn correct(&self) -> bool {
        self.decision == self.has_lesion
    }
}

/// Dense maps and decisions for the given subjects of `source`.
pub fn evaluate_subjects<S, C>(source: &S, indices: &[usize], model: &C, threshold: f64) -> Result<Vec<SubjectResult>>
where
    S: SubjectSource + ?Sized,
    C: PatchClassifier + ?Sized,
{
    let mut out = Vec::with_capacity(indices.len());
    for &idx in indices {
        let vols = source.load(idx)?;
        let map = infer_damage_map(model, &vols.cine, &vols.myo, threshold)?;
        let (mut ls, mut ln, mut hs, mut hn) = (0.0, 0usize, 0.0, 0usize);
        for ((&v, &m), &l) in map
            .map
            .data()
            .iter()
            .zip(vols.myo.data())
            .zip(vols.lesion.data())
        {
            if m <= 0.5 {
                continue;
            }
            if l > 0.5 {
                ls += v;
                ln += 1;
            } else {
                hs += v;
                hn += 1;
            }
        }
        out.push(SubjectResult {
            subject_id: vols.info.subject_id,
            has_lesion: vols.info.has_lesion,
            mean_score: map.mean_score,
            decision: map.decision,
            lesion_mean: (ln > 0).then(|| ls / ln as f64),
            healthy_mean: (hn > 0).then(|| hs / hn as f64),
        });
    }
    Ok(out)
}

/// Indices into `source.subjects()` of the subjects assigned to `split`.
pub fn split_indices<S: SubjectSource + ?Sized>(source: &S, assignment: &SplitAssignment, split: Split) -> Vec<usize> {
    source
        .subjects()
        .iter()
        .enumerate()
        .filter(|(_, s)| assignment.split_of(&s.subject_id) == Some(split))
        .map(|(i, _)| i)
        .collect()
}
