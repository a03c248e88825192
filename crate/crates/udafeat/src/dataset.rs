//! On-disk datasets: `<root>/{source,target,val}/{images,labels}/NNNNNN.(ppm|pgm)`
//! plus `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use udafeat_core::synth::{render_split, DomainShift, Sample, SceneSpec, Split};

use crate::config::SplitCounts;
use crate::error::{format_err, io_err, Error, Result};
use crate::pnm;

pub const MANIFEST: &str = "manifest.json";
pub const SPLITS: [Split; 3] = [Split::Source, Split::Target, Split::Val];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SceneSpec,
    pub shift: DomainShift,
    pub seed: u64,
    pub counts: SplitCounts,
}

impl Manifest {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Source => self.counts.source,
            Split::Target => self.counts.target,
            Split::Val => self.counts.val,
        }
    }
}

pub fn image_path(root: &Path, split: Split, i: usize) -> PathBuf {
    root.join(split.name()).join("images").join(format!("{i:06}.ppm"))
}

pub fn label_path(root: &Path, split: Split, i: usize) -> PathBuf {
    root.join(split.name()).join("labels").join(format!("{i:06}.pgm"))
}

/// Renders and writes every split; returns the manifest path. Target
/// training labels are written too but never read for training.
pub fn write_dataset(root: &Path, spec: &SceneSpec, shift: &DomainShift, counts: SplitCounts) -> Result<PathBuf> {
    let manifest = Manifest {
        spec: spec.clone(),
        shift: shift.clone(),
        seed: spec.seed,
        counts,
    };
    for split in SPLITS {
        for sub in ["images", "labels"] {
            let dir = root.join(split.name()).join(sub);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        for i in 0..manifest.count(split) {
            let sample = render_split(spec, shift, split, i);
            pnm::write_ppm(&image_path(root, split, i), &sample.image)?;
            let labels = sample.labels.as_ref().expect("rendered samples carry labels");
            pnm::write_pgm(&label_path(root, split, i), labels)?;
        }
    }
    let path = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))
}

/// Loads one split. Labels of the target training split are dropped.
pub fn load_split(root: &Path, manifest: &Manifest, split: Split) -> Result<Vec<Sample>> {
    (0..manifest.count(split))
        .map(|i| {
            let image = pnm::read_ppm(&image_path(root, split, i))?;
            let labels = if split.labelled() {
                Some(pnm::read_pgm(&label_path(root, split, i))?)
            } else {
                None
            };
            let s = image.shape();
            if (s[1], s[2]) != (manifest.spec.height, manifest.spec.width) {
                return Err(Error::Mismatch(format!(
                    "{}: image is {}x{}, manifest says {}x{}",
                    image_path(root, split, i).display(),
                    s[1],
                    s[2],
                    manifest.spec.height,
                    manifest.spec.width
                )));
            }
            Ok(Sample {
                image,
                labels,
                domain: split.domain(),
            })
        })
        .collect()
}

/// All three splits of a dataset directory.
pub struct Dataset {
    pub manifest: Manifest,
    pub source: Vec<Sample>,
    pub target: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = read_manifest(root)?;
        Ok(Dataset {
            source: load_split(root, &manifest, Split::Source)?,
            target: load_split(root, &manifest, Split::Target)?,
            val: load_split(root, &manifest, Split::Val)?,
            manifest,
        })
    }
}
