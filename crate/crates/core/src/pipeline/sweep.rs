use std::fmt::Write as _;

use super::{build_datasets, extract_corpus_multi, assign_splits, train_model, SubjectSource, TrainConfig};
use crate::error::{Error, Result};

pub const DEFAULT_SWEEP_SIZES: [usize; 4] = [5, 7, 9, 11];

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub patch_size: usize,
    /// Patches passing the coverage rule over the whole corpus.
    pub patch_count: usize,
    /// Patches left after balancing, summed over the three splits.
    pub balanced_count: usize,
    pub val_accuracy: f64,
    pub below_floor: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub min_balanced: usize,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("patch_size,patch_count,balanced_count,val_accuracy,below_floor\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.patch_size,
                r.patch_count,
                r.balanced_count,
                r.val_accuracy,
                u8::from(r.below_floor)
            );
        }
        out
    }

    /// Row with the highest validation accuracy (smallest size on ties).
    pub fn best(&self) -> Option<&SweepRow> {
        self.rows
            .iter()
            .fold(None, |acc: Option<&SweepRow>, r| match acc {
                Some(b) if b.val_accuracy >= r.val_accuracy => Some(b),
                _ => Some(r),
            })
    }
}

/// Trains one model per patch size with the same seeds and split. Stride
/// follows `cfg.stride`, defaulting to each size. Sizes whose balanced
/// inventory falls below `min_balanced` are flagged, not skipped.
pub fn sweep_patch_size<S: SubjectSource + ?Sized>(
    source: &S,
    sizes: &[usize],
    cfg: &TrainConfig,
    min_balanced: usize,
) -> Result<SweepResult> {
    if sizes.is_empty() {
        return Err(Error::EmptyList("patch sizes"));
    }
    if let Some(&p) = sizes.iter().find(|&&p| p % 2 == 0) {
        return Err(Error::EvenPatchSize(p));
    }
    let configs: Vec<TrainConfig> = sizes
        .iter()
        .map(|&p| TrainConfig {
            patch_size: p,
            ..cfg.clone()
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let corpora = extract_corpus_multi(source, sizes, |p| cfg.stride.unwrap_or(p))?;
    let assignment = assign_splits(&corpora[0].subjects, cfg.fractions, cfg.seed)?;
    let mut rows = Vec::with_capacity(sizes.len());
    for (corpus, c) in corpora.iter().zip(&configs) {
        let ds = build_datasets(corpus, &assignment, c.seed)?;
        let outcome = train_model(&ds, c)?;
        let balanced_count = ds.train.len() + ds.val.len() + ds.test.len();
        rows.push(SweepRow {
            patch_size: c.patch_size,
            patch_count: corpus.total(),
            balanced_count,
            val_accuracy: outcome.best_val.accuracy,
            below_floor: balanced_count < min_balanced,
        });
    }
    Ok(SweepResult { rows, min_balanced })
}
