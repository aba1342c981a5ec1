//! On-disk dataset layout shared by training, evaluation and robustness runs.
//!
//! ```text
//! DIR/images/NAME.png       RGB image
//! DIR/partitions/NAME.png   source labels (optional if binary/ exists)
//! DIR/binary/NAME.png       0/255 forged mask (optional if partitions/ exists)
//! ```

use crate::error::{Error, Result};
use crate::io::{read_binary_mask_png, read_image, read_partition_png};
use crate::synth::partition_to_binary;
use crate::types::{BinaryMask, Image, SourcePartition};
use rayon::prelude::*;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug)]
pub struct DatasetEntry {
    pub name: String,
    pub image: Image,
    pub partition: Option<SourcePartition>,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn from_entries(entries: Vec<DatasetEntry>) -> Self {
        Self { entries }
    }

    /// Builds an in-memory dataset from images and their partitions.
    pub fn from_samples(samples: Vec<(Image, SourcePartition)>) -> Self {
        let entries = samples
            .into_iter()
            .enumerate()
            .map(|(i, (image, partition))| DatasetEntry {
                name: format!("{i:05}.png"),
                mask: partition_to_binary(&partition),
                image,
                partition: Some(partition),
            })
            .collect();
        Self { entries }
    }
}

/// PNG file names under `dir`, sorted.
pub fn png_names(dir: &Path) -> Result<Vec<String>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let images = dir.join("images");
    if !images.is_dir() {
        return Err(Error::Config(format!("{} has no images/ directory", dir.display())));
    }
    let names = png_names(&images)?;
    let entries = names
        .par_iter()
        .map(|name| load_entry(dir, name))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { entries })
}

fn existing(path: PathBuf) -> Option<PathBuf> {
    path.is_file().then_some(path)
}

fn load_entry(dir: &Path, name: &str) -> Result<DatasetEntry> {
    let image = read_image(&dir.join("images").join(name))?;
    let partition = existing(dir.join("partitions").join(name))
        .map(|p| read_partition_png(&p))
        .transpose()?;
    let mask = match existing(dir.join("binary").join(name)) {
        Some(p) => read_binary_mask_png(&p)?,
        None => partition
            .as_ref()
            .map(partition_to_binary)
            .ok_or_else(|| Error::Config(format!("no ground truth for {name} in {}", dir.display())))?,
    };
    let dims = (image.height(), image.width());
    let mut shapes = vec![(mask.height(), mask.width())];
    if let Some(p) = &partition {
        shapes.push((p.height(), p.width()));
    }
    if let Some(&(h, w)) = shapes.iter().find(|&&s| s != dims) {
        return Err(Error::ShapeMismatch {
            left: format!("image {name} {}x{}", dims.0, dims.1),
            right: format!("ground truth {h}x{w}"),
        });
    }
    Ok(DatasetEntry {
        name: name.to_string(),
        image,
        partition,
        mask,
    })
}
