//! Dataset directory layout: `images/*.ppm`, `masks/*.pgm`, and an
//! `index.csv` with header `image,mask,label`, relative paths, LF endings.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{io_err, DataError, Result};
use crate::gen::Sample;
use crate::pnm;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexRow {
    pub image: String,
    pub mask: String,
    pub label: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub rows: Vec<IndexRow>,
    pub split: Option<Split>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Write samples to `dir` and return the index. Round-trip is lossless for
/// the binary masks and for images after one 8-bit quantization.
pub fn write_dataset(samples: &[Sample], dir: &Path) -> Result<DatasetIndex> {
    fs::create_dir_all(dir.join("images")).map_err(io_err(dir))?;
    fs::create_dir_all(dir.join("masks")).map_err(io_err(dir))?;
    let mut rows = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image_rel = format!("images/img_{i:05}.ppm");
        let mask_rel = format!("masks/mask_{i:05}.pgm");
        pnm::write_ppm(&dir.join(&image_rel), &s.image, s.h, s.w)?;
        pnm::write_pgm(&dir.join(&mask_rel), &s.mask, s.h, s.w)?;
        rows.push(IndexRow {
            image: image_rel,
            mask: mask_rel,
            label: s.label,
        });
    }
    let mut csv = String::from("image,mask,label\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.image, r.mask, r.label));
    }
    let index_path = dir.join("index.csv");
    fs::write(&index_path, csv).map_err(io_err(&index_path))?;
    Ok(DatasetIndex {
        root: dir.to_path_buf(),
        rows,
        split: None,
    })
}

/// Parse `dir/index.csv`, verifying every referenced file exists and no path
/// repeats.
pub fn read_index(dir: &Path) -> Result<DatasetIndex> {
    let index_path = dir.join("index.csv");
    let text = fs::read_to_string(&index_path).map_err(io_err(&index_path))?;
    let mut lines = text.lines();
    let mut offset = 0usize;
    let header = lines.next().unwrap_or("");
    if header != "image,mask,label" {
        return Err(DataError::Parse {
            path: index_path,
            offset: 0,
            what: format!("bad header {header:?}, expected \"image,mask,label\""),
        });
    }
    offset += header.len() + 1;
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for line in lines {
        if line.is_empty() {
            offset += 1;
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(DataError::Parse {
                path: index_path,
                offset,
                what: format!("expected 3 comma-separated fields, got {}", parts.len()),
            });
        }
        let label: u8 = parts[2].parse().map_err(|_| DataError::Parse {
            path: index_path.clone(),
            offset,
            what: format!("bad label {:?}", parts[2]),
        })?;
        if label > 1 {
            return Err(DataError::Parse {
                path: index_path,
                offset,
                what: format!("label must be 0 or 1, got {label}"),
            });
        }
        for rel in [parts[0], parts[1]] {
            if !seen.insert(rel.to_string()) {
                return Err(DataError::DuplicatePath(rel.to_string()));
            }
            if !dir.join(rel).is_file() {
                return Err(DataError::MissingEntry(rel.to_string()));
            }
        }
        rows.push(IndexRow {
            image: parts[0].to_string(),
            mask: parts[1].to_string(),
            label,
        });
        offset += line.len() + 1;
    }
    Ok(DatasetIndex {
        root: dir.to_path_buf(),
        rows,
        split: None,
    })
}

/// Load every sample referenced by the index.
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let index = read_index(dir)?;
    load_samples(&index)
}

pub fn load_samples(index: &DatasetIndex) -> Result<Vec<Sample>> {
    index.rows.iter().map(|row| load_row(index, row)).collect()
}

pub fn load_row(index: &DatasetIndex, row: &IndexRow) -> Result<Sample> {
    let (image, h, w) = pnm::read_ppm(&index.root.join(&row.image))?;
    let (mask, mh, mw) = pnm::read_pgm_mask(&index.root.join(&row.mask))?;
    if (mh, mw) != (h, w) {
        return Err(DataError::SizeMismatch(mh, mw, h, w));
    }
    Ok(Sample {
        image,
        mask,
        label: row.label,
        seed: 0,
        h,
        w,
    })
}
