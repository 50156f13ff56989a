//! Dataset files, checkpoints and the synthetic generator.
//!
//! A dataset root holds:
//!
//! ```text
//! mapping.txt          id<TAB>name per class
//! features/<id>.fseq   binary features (see [`features`])
//! labels/<id>.txt      one class name per frame
//! splits/train.txt     sample ids
//! splits/val.txt
//! ```

pub mod checkpoint;
pub mod features;
pub mod synth;
pub mod text;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

pub use checkpoint::{load_checkpoint, load_checkpoint_into, save_checkpoint, CheckpointMeta};
pub use features::{import_csv, load_features, save_features};
pub use synth::{
    nearest_prototype, synth_generate, SyntheticConfig, SyntheticDataset, Transitions,
};
pub use text::{
    labels_to_text, load_labels, load_probabilities, load_split, load_transcript, save_labels,
    save_probabilities, ClassMap,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub root: PathBuf,
    /// Label/feature length mismatches are errors when set, truncations otherwise.
    pub strict_lengths: bool,
    /// Class excluded from evaluation metrics.
    pub ignore_class: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            strict_lengths: true,
            ignore_class: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub id: String,
    /// T×D.
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: ClassMap,
    pub train: Vec<Video>,
    pub val: Vec<Video>,
}

pub fn features_path(root: &Path, id: &str) -> PathBuf {
    root.join("features").join(format!("{id}.fseq"))
}

pub fn labels_path(root: &Path, id: &str) -> PathBuf {
    root.join("labels").join(format!("{id}.txt"))
}

pub fn split_path(root: &Path, split: &str) -> PathBuf {
    root.join("splits").join(format!("{split}.txt"))
}

pub fn mapping_path(root: &Path) -> PathBuf {
    root.join("mapping.txt")
}

/// Reads one video's features and labels, reconciling their lengths.
pub fn load_video(root: &Path, id: &str, classes: &ClassMap, strict: bool) -> Result<Video> {
    let fpath = features_path(root, id);
    let lpath = labels_path(root, id);
    let features = load_features(&fpath)?;
    let mut labels = load_labels(&lpath, classes)?;
    let frames = features.rows();
    let keep = text::reconcile_lengths(&lpath, labels.len(), frames, strict)?;
    if keep == 0 {
        return Err(Error::LengthMismatch {
            path: lpath,
            labels: labels.len(),
            frames,
        });
    }
    labels.truncate(keep);
    let features = if keep < frames {
        Tensor::new(
            &[keep, features.cols()],
            features.data()[..keep * features.cols()].to_vec(),
        )?
    } else {
        features
    };
    Ok(Video {
        id: id.to_string(),
        features,
        labels,
    })
}

impl Dataset {
    pub fn load(root: &Path, strict: bool) -> Result<Self> {
        let classes = ClassMap::load(&mapping_path(root))?;
        let train_ids = load_split(&split_path(root, "train"))?;
        let val_ids = load_split(&split_path(root, "val"))?;
        let train_set: HashSet<&String> = train_ids.iter().collect();
        if let Some(dup) = val_ids.iter().find(|id| train_set.contains(id)) {
            return Err(Error::Corrupt {
                path: split_path(root, "val"),
                msg: format!("id {dup:?} is also in the training split"),
            });
        }
        let load = |ids: &[String]| -> Result<Vec<Video>> {
            ids.iter()
                .map(|id| load_video(root, id, &classes, strict))
                .collect()
        };
        let ds = Self {
            train: load(&train_ids)?,
            val: load(&val_ids)?,
            classes,
        };
        let dims: HashSet<usize> = ds.videos().map(|v| v.features.cols()).collect();
        if dims.len() > 1 {
            return Err(Error::Corrupt {
                path: root.join("features"),
                msg: format!("inconsistent feature dimensions {dims:?}"),
            });
        }
        Ok(ds)
    }

    pub fn videos(&self) -> impl Iterator<Item = &Video> {
        self.train.iter().chain(&self.val)
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.videos().next().map(|v| v.features.cols())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Writes the dataset tree under `root`, creating directories as needed.
    pub fn write(&self, root: &Path) -> Result<()> {
        for dir in [
            root.join("features"),
            root.join("labels"),
            root.join("splits"),
        ] {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        self.classes.save(&mapping_path(root))?;
        for v in self.videos() {
            save_features(&features_path(root, &v.id), &v.features)?;
            save_labels(&labels_path(root, &v.id), &v.labels, &self.classes)?;
        }
        let ids = |vs: &[Video]| vs.iter().map(|v| v.id.clone()).collect::<Vec<_>>();
        text::save_split(&split_path(root, "train"), &ids(&self.train))?;
        text::save_split(&split_path(root, "val"), &ids(&self.val))
    }
}

impl SyntheticDataset {
    pub fn to_dataset(&self) -> Result<Dataset> {
        let classes = ClassMap::new(self.class_names())?;
        let n_train = self.videos.len() - self.config.val_videos;
        let convert = |v: &synth::SyntheticVideo| Video {
            id: v.id.clone(),
            features: v.features.clone(),
            labels: v.labels.clone(),
        };
        Ok(Dataset {
            classes,
            train: self.videos[..n_train].iter().map(convert).collect(),
            val: self.videos[n_train..].iter().map(convert).collect(),
        })
    }
}
