//! Train/val/test phantom splits and their on-disk layout.
//!
//! A dataset directory holds `manifest.json`, `atlas.vol`, `atlas.lbl` and
//! one `<id>.vol` (image), `<id>_brain.vol` (binary brain mask) and
//! `<id>.lbl` (labels) per subject.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::affine::AffineMatrix;
use crate::error::{CoreError, Result};
use crate::io::{load_labels, load_volume, save_labels, save_volume};
use crate::phantom::{generate_phantom, make_atlas, Phantom, PhantomSpec};
use crate::volume::{LabelMask, Volume};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 20,
            val: 5,
            test: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(CoreError::Config(format!(
                "unknown split {s:?}; expected train, val or test"
            ))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub image: String,
    pub brain_mask: String,
    pub labels: String,
    /// Subject-to-atlas voxel transform used to render the subject.
    pub pose: AffineMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: PhantomSpec,
    pub master_seed: u64,
    pub sizes: SplitSizes,
    pub atlas_image: String,
    pub atlas_labels: String,
    pub subjects: Vec<SubjectEntry>,
}

#[derive(Clone, Debug)]
pub struct Subject {
    pub id: String,
    pub seed: u64,
    pub phantom: Phantom,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: PhantomSpec,
    pub master_seed: u64,
    pub atlas_image: Volume,
    pub atlas_labels: LabelMask,
    pub train: Vec<Subject>,
    pub val: Vec<Subject>,
    pub test: Vec<Subject>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Subject] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.train.len(),
            val: self.val.len(),
            test: self.test.len(),
        }
    }

    pub fn phantoms(&self, s: Split) -> Vec<Phantom> {
        self.split(s).iter().map(|x| x.phantom.clone()).collect()
    }

    pub fn images(&self, s: Split) -> Vec<Volume> {
        self.split(s)
            .iter()
            .map(|x| x.phantom.image.clone())
            .collect()
    }
}

/// Subject `i` (counted across train, val, test in that order) uses seed
/// `master_seed + i`.
pub fn generate_dataset(
    spec: &PhantomSpec,
    master_seed: u64,
    sizes: SplitSizes,
) -> Result<Dataset> {
    spec.validate()?;
    let (atlas_image, atlas_labels) = make_atlas(spec)?;
    let mut index = 0u64;
    let mut make = |split: Split, n: usize| -> Result<Vec<Subject>> {
        (0..n)
            .map(|k| {
                let seed = master_seed.wrapping_add(index);
                index += 1;
                Ok(Subject {
                    id: format!("{split}_{k:03}"),
                    seed,
                    phantom: generate_phantom(spec, seed)?,
                })
            })
            .collect()
    };
    let train = make(Split::Train, sizes.train)?;
    let val = make(Split::Val, sizes.val)?;
    let test = make(Split::Test, sizes.test)?;
    Ok(Dataset {
        spec: spec.clone(),
        master_seed,
        atlas_image,
        atlas_labels,
        train,
        val,
        test,
    })
}

pub fn dataset_manifest(ds: &Dataset) -> DatasetManifest {
    let entry = |split: Split, s: &Subject| SubjectEntry {
        id: s.id.clone(),
        split,
        seed: s.seed,
        image: format!("{}.vol", s.id),
        brain_mask: format!("{}_brain.vol", s.id),
        labels: format!("{}.lbl", s.id),
        pose: s.phantom.pose,
    };
    let subjects = [Split::Train, Split::Val, Split::Test]
        .into_iter()
        .flat_map(|sp| ds.split(sp).iter().map(move |s| entry(sp, s)))
        .collect();
    DatasetManifest {
        spec: ds.spec.clone(),
        master_seed: ds.master_seed,
        sizes: ds.sizes(),
        atlas_image: "atlas.vol".into(),
        atlas_labels: "atlas.lbl".into(),
        subjects,
    }
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let man = dataset_manifest(ds);
    save_volume(&dir.join(&man.atlas_image), &ds.atlas_image)?;
    save_labels(&dir.join(&man.atlas_labels), &ds.atlas_labels)?;
    let all = ds.train.iter().chain(&ds.val).chain(&ds.test);
    for (s, e) in all.zip(&man.subjects) {
        save_volume(&dir.join(&e.image), &s.phantom.image)?;
        let mask = Volume::new(s.phantom.image.dims(), s.phantom.truth_ext.clone())?;
        save_volume(&dir.join(&e.brain_mask), &mask)?;
        save_labels(&dir.join(&e.labels), &s.phantom.truth_seg)?;
    }
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&man).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| CoreError::io(path, e))?;
    Ok(man)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
    let man: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| CoreError::format("manifest", e.to_string()))?;
    let atlas_image = load_volume(&dir.join(&man.atlas_image))?;
    let atlas_labels = load_labels(&dir.join(&man.atlas_labels))?;
    let mut ds = Dataset {
        spec: man.spec.clone(),
        master_seed: man.master_seed,
        atlas_image,
        atlas_labels,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for e in &man.subjects {
        let image = load_volume(&dir.join(&e.image))?;
        let truth_ext = load_volume(&dir.join(&e.brain_mask))?.values().to_vec();
        let truth_seg = load_labels(&dir.join(&e.labels))?;
        if image.dims() != ds.atlas_image.dims() || truth_seg.dims() != image.dims() {
            return Err(CoreError::format(
                format!("subjects.{}", e.id),
                "dimensions differ from the atlas",
            ));
        }
        let s = Subject {
            id: e.id.clone(),
            seed: e.seed,
            phantom: Phantom {
                image,
                truth_ext,
                truth_seg,
                pose: e.pose,
            },
        };
        match e.split {
            Split::Train => ds.train.push(s),
            Split::Val => ds.val.push(s),
            Split::Test => ds.test.push(s),
        }
    }
    Ok(ds)
}
