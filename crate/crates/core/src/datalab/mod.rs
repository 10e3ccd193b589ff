//! Dataset loading from pixmap directories and synthetic data generation.
//!
//! On-disk layout:
//!
//! ```text
//! root/classes.txt              optional, one class name per line
//! root/{train,val}/labels.csv   filename,class_index
//! root/{train,val}/img_NNNNN.ppm
//! ```

pub mod pnm;
pub mod synth;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{invalid, Error, Result};
use crate::numerics::Tensor;

pub use synth::{synthesize, ObjectBox, SyntheticData, SyntheticSpec, SyntheticSplit};

pub const LABELS_FILE: &str = "labels.csv";
pub const CLASSES_FILE: &str = "classes.txt";
pub const SPLITS: [&str; 2] = ["train", "val"];

/// Images as `[H, W, 3]` tensors in `[0, 1]` with aligned labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    /// `(height, width)` shared by all images, if any.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.images.first().map(|t| (t.shape()[0], t.shape()[1]))
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            class_names: self.class_names.clone(),
        }
    }
}

/// Files and labels making up an on-disk dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    /// `(split, file name, label)` in file order
    pub entries: Vec<(String, String, usize)>,
}

pub fn image_file_name(index: usize) -> String {
    format!("img_{index:05}.ppm")
}

/// Renders the synthetic set and writes it under `root`.
pub fn generate_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let class_names = synth::class_names(spec.classes);
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let classes_path = root.join(CLASSES_FILE);
    std::fs::write(&classes_path, class_names.join("\n") + "\n").map_err(|e| Error::io(&classes_path, e))?;
    let mut entries = Vec::new();
    for (split, per_class, stream) in [
        ("train", spec.train_per_class, synth::TRAIN_STREAM),
        ("val", spec.val_per_class, synth::VAL_STREAM),
    ] {
        let dir = root.join(split);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (images, labels, _) = synth::render_split(spec, per_class, stream);
        let mut csv = String::from("filename,class_index\n");
        for (i, (samples, label)) in images.into_iter().zip(labels).enumerate() {
            let name = image_file_name(i);
            let p = pnm::Pixmap {
                width: spec.image_side,
                height: spec.image_side,
                channels: 3,
                maxval: 255,
                samples,
            };
            pnm::write(&dir.join(&name), &p)?;
            writeln!(csv, "{name},{label}").unwrap();
            entries.push((split.to_string(), name, label));
        }
        let labels_path = dir.join(LABELS_FILE);
        std::fs::write(&labels_path, csv).map_err(|e| Error::io(&labels_path, e))?;
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        class_names,
        entries,
    })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_class_names(root: &Path) -> Result<Option<Vec<String>>> {
    let path = root.join(CLASSES_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let names: Vec<String> = read_text(&path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if names.is_empty() {
        return Err(Error::format(&path, "no class names"));
    }
    Ok(Some(names))
}

fn parse_labels(path: &Path) -> Result<Vec<(String, usize)>> {
    let text = read_text(path)?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line == "filename,class_index") {
            continue;
        }
        let (name, label) = line
            .split_once(',')
            .ok_or_else(|| Error::format(path, format!("line {}: expected filename,class_index", n + 1)))?;
        let label = label
            .trim()
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad class index '{}'", n + 1, label.trim())))?;
        rows.push((name.trim().to_string(), label));
    }
    Ok(rows)
}

fn load_split_with(root: &Path, split: &str, class_names: Option<&[String]>) -> Result<Dataset> {
    let dir = root.join(split);
    let labels_path = dir.join(LABELS_FILE);
    let rows = parse_labels(&labels_path)?;
    if rows.is_empty() {
        return Err(Error::format(&labels_path, "no samples listed"));
    }
    let mut images = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    let mut size = None;
    for (name, label) in rows {
        let path = dir.join(&name);
        if let Some(names) = class_names {
            if label >= names.len() {
                return Err(Error::format(&path, format!("unknown class {label} ({} classes)", names.len())));
            }
        }
        let t = pnm::read(&path)?.to_rgb_tensor();
        let dims = (t.shape()[0], t.shape()[1]);
        match size {
            None => size = Some(dims),
            Some(s) if s != dims => {
                return Err(Error::format(
                    &path,
                    format!("image is {}x{}, expected {}x{}", dims.1, dims.0, s.1, s.0),
                ))
            }
            _ => {}
        }
        images.push(t);
        labels.push(label);
    }
    let class_names = match class_names {
        Some(n) => n.to_vec(),
        None => (0..=*labels.iter().max().unwrap()).map(|c| format!("class_{c}")).collect(),
    };
    Ok(Dataset {
        images,
        labels,
        class_names,
    })
}

/// Loads one split (`train` or `val`) of a dataset directory.
pub fn load_split(root: &Path, split: &str) -> Result<Dataset> {
    let names = read_class_names(root)?;
    load_split_with(root, split, names.as_deref())
}

/// Loads both splits; without `classes.txt`, the class count is the largest
/// label seen in either split plus one.
pub fn load_dataset(root: &Path) -> Result<(Dataset, Dataset)> {
    let names = read_class_names(root)?;
    let mut train = load_split_with(root, "train", names.as_deref())?;
    let mut val = load_split_with(root, "val", names.as_deref())?;
    if names.is_none() {
        let n = train.classes().max(val.classes());
        let all: Vec<String> = (0..n).map(|c| format!("class_{c}")).collect();
        train.class_names = all.clone();
        val.class_names = all;
    }
    if train.image_size() != val.image_size() {
        return Err(invalid!(
            "train images are {:?} but val images are {:?}",
            train.image_size(),
            val.image_size()
        ));
    }
    Ok((train, val))
}
