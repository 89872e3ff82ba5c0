//! Where subject volumes come from: an in-memory phantom plan or a corpus
//! directory with `manifest.csv` and per-subject FVOL files.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imgvol::{load_volume, Volume3D};
use crate::phantom::{plan_corpus, PhantomParams, SubjectPlan};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubjectInfo {
    pub subject_id: String,
    pub has_lesion: bool,
}

#[derive(Clone, Debug)]
pub struct SubjectVolumes {
    pub info: SubjectInfo,
    pub cine: Volume3D,
    pub myo: Volume3D,
    pub lesion: Volume3D,
}

/// Random access to a cohort; volumes are loaded one subject at a time.
pub trait SubjectSource {
    fn subjects(&self) -> Vec<SubjectInfo>;
    fn load(&self, index: usize) -> Result<SubjectVolumes>;

    fn find(&self, subject_id: &str) -> Option<usize> {
        self.subjects()
            .iter()
            .position(|s| s.subject_id == subject_id)
    }
}

/// Phantom subjects generated on demand.
#[derive(Clone, Debug)]
pub struct PhantomCorpus {
    pub plans: Vec<SubjectPlan>,
}

impl PhantomCorpus {
    pub fn new(n_subjects: usize, n_lesioned: usize, params: &PhantomParams) -> Result<Self> {
        Ok(PhantomCorpus {
            plans: plan_corpus(n_subjects, n_lesioned, params)?,
        })
    }
}

impl SubjectSource for PhantomCorpus {
    fn subjects(&self) -> Vec<SubjectInfo> {
        self.plans
            .iter()
            .map(|p| SubjectInfo {
                subject_id: p.subject_id.clone(),
                has_lesion: p.has_lesion,
            })
            .collect()
    }

    fn load(&self, index: usize) -> Result<SubjectVolumes> {
        let plan = self
            .plans
            .get(index)
            .ok_or_else(|| Error::InvalidParameter(format!("no subject at index {index}")))?;
        let s = plan.realize()?;
        Ok(SubjectVolumes {
            info: SubjectInfo {
                subject_id: s.subject_id,
                has_lesion: s.has_lesion,
            },
            cine: s.cine,
            myo: s.myo_mask,
            lesion: s.lesion_mask,
        })
    }
}

/// A directory written by `phantom-gen` (or laid out the same way).
#[derive(Clone, Debug)]
pub struct CorpusDir {
    pub dir: PathBuf,
    subjects: Vec<SubjectInfo>,
}

impl CorpusDir {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let manifest = dir.join("manifest.csv");
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if !header.starts_with("subject_id,has_lesion") {
            return Err(Error::header(&manifest, format!("unexpected header `{header}`")));
        }
        let mut subjects = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut cols = line.split(',');
            let (Some(id), Some(flag)) = (cols.next(), cols.next()) else {
                return Err(Error::header(&manifest, format!("bad row `{line}`")));
            };
            let has_lesion = match flag.trim() {
                "1" | "true" => true,
                "0" | "false" => false,
                other => {
                    return Err(Error::header(
                        &manifest,
                        format!("bad has_lesion value `{other}`"),
                    ))
                }
            };
            subjects.push(SubjectInfo {
                subject_id: id.trim().to_string(),
                has_lesion,
            });
        }
        if subjects.is_empty() {
            return Err(Error::EmptyList("manifest subjects"));
        }
        Ok(CorpusDir { dir, subjects })
    }

    pub fn volume_path(&self, subject_id: &str, kind: &str) -> PathBuf {
        self.dir.join(format!("{subject_id}_{kind}.fvol"))
    }
}

impl SubjectSource for CorpusDir {
    fn subjects(&self) -> Vec<SubjectInfo> {
        self.subjects.clone()
    }

    fn load(&self, index: usize) -> Result<SubjectVolumes> {
        let info = self
            .subjects
            .get(index)
            .ok_or_else(|| Error::InvalidParameter(format!("no subject at index {index}")))?
            .clone();
        let id = &info.subject_id;
        Ok(SubjectVolumes {
            cine: load_volume(self.volume_path(id, "cine"))?,
            myo: load_volume(self.volume_path(id, "myo"))?,
            lesion: load_volume(self.volume_path(id, "lesion"))?,
            info,
        })
    }
}
