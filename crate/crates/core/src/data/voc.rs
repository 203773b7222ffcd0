//! VOC-style directory layout:
//!
//! ```text
//! images/<id>.png      8-bit RGB
//! masks/<id>.png       8-bit class indices, 255 = ignore
//! instances/<id>.png   optional, 0 = none, k = instance k
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::boxes::BoxGeometry;
use super::image_io::{read_index_png, read_rgb_png, write_index_png, write_rgb_png};
use super::{Instance, Sample};
use crate::error::{Error, Result};
use crate::mask::{LabelMask, IGNORE_LABEL};

pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";
pub const INSTANCES_DIR: &str = "instances";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instances: Option<String>,
}

/// Dataset listing; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    #[serde(default)]
    pub class_names: Vec<String>,
    pub samples: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposals: Option<String>,
}

fn png_ids(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// 4-connected components of every foreground class, in raster order of
/// their first pixel.
pub fn connected_instances(mask: &LabelMask) -> Vec<Instance> {
    let (h, w) = (mask.height(), mask.width());
    let labels = mask.labels();
    let mut seen = vec![false; labels.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        let class = labels[start];
        if seen[start] || class == 0 || class == IGNORE_LABEL {
            continue;
        }
        let mut pixels = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            pixels.push(p as u32);
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if !seen[q] && labels[q] == class {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        pixels.sort_unstable();
        let bbox = BoxGeometry::bounding(&pixels, w).expect("nonempty component");
        out.push(Instance { class, bbox, pixels });
    }
    out
}

/// Instances from an instance-index mask; each takes the majority class of
/// its pixels.
fn indexed_instances(ids: &LabelMask, mask: &LabelMask) -> Vec<Instance> {
    let mut groups: BTreeMap<u8, Vec<u32>> = BTreeMap::new();
    for (p, &k) in ids.labels().iter().enumerate() {
        if k != 0 && k != IGNORE_LABEL {
            groups.entry(k).or_default().push(p as u32);
        }
    }
    groups
        .into_values()
        .filter_map(|pixels| {
            let mut counts = [0usize; 256];
            for &p in &pixels {
                counts[mask.labels()[p as usize] as usize] += 1;
            }
            let class = (1..255u8)
                .filter(|&c| counts[c as usize] > 0)
                .max_by(|&a, &b| counts[a as usize].cmp(&counts[b as usize]).then(b.cmp(&a)))?;
            let bbox = BoxGeometry::bounding(&pixels, mask.width())?;
            Some(Instance { class, bbox, pixels })
        })
        .collect()
}

fn load_one(id: &str, image: &Path, mask: &Path, instances: Option<&Path>, num_classes: usize) -> Result<Sample> {
    let img = read_rgb_png(image)?;
    let m = read_index_png(mask)?;
    let s = img.shape();
    if (s.h, s.w) != (m.height(), m.width()) {
        return Err(Error::Data(format!(
            "{}: mask is {}x{}, image is {}x{}",
            mask.display(),
            m.width(),
            m.height(),
            s.w,
            s.h
        )));
    }
    m.validate(num_classes)
        .map_err(|e| Error::Data(format!("{}: {e}", mask.display())))?;
    let inst = match instances {
        Some(p) => {
            let ids = read_index_png(p)?;
            if (ids.height(), ids.width()) != (m.height(), m.width()) {
                return Err(Error::Data(format!("{}: instance mask size differs from mask", p.display())));
            }
            indexed_instances(&ids, &m)
        }
        None => connected_instances(&m),
    };
    Ok(Sample {
        id: id.to_string(),
        image: img,
        mask: m,
        instances: inst,
    })
}

/// Loads every image/mask pair of a VOC-style directory, sorted by id.
pub fn load_voc_style(dir: impl AsRef<Path>, num_classes: usize) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let images = png_ids(&dir.join(IMAGES_DIR))?;
    let masks = png_ids(&dir.join(MASKS_DIR))?;
    let instances = png_ids(&dir.join(INSTANCES_DIR))?;
    if let Some(id) = images.keys().find(|k| !masks.contains_key(*k)) {
        return Err(Error::Data(format!("image {id} has no mask in {}", dir.display())));
    }
    if let Some(id) = masks.keys().find(|k| !images.contains_key(*k)) {
        return Err(Error::Data(format!("mask {id} has no image in {}", dir.display())));
    }
    if images.is_empty() {
        return Err(Error::Data(format!("no images under {}", dir.join(IMAGES_DIR).display())));
    }
    let ids: Vec<&String> = images.keys().collect();
    ids.par_iter()
        .map(|id| load_one(id, &images[*id], &masks[*id], instances.get(*id).map(PathBuf::as_path), num_classes))
        .collect()
}

/// Loads the samples listed in a manifest file.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<Sample>)> {
    let path = path.as_ref();
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(path)?)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let samples = manifest
        .samples
        .par_iter()
        .map(|e| {
            load_one(
                &e.id,
                &base.join(&e.image),
                &base.join(&e.mask),
                e.instances.as_ref().map(|p| base.join(p)).as_deref(),
                manifest.num_classes,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

/// Writes samples in the VOC-style layout with instance masks and a
/// manifest. Returns the manifest.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    samples: &[Sample],
    num_classes: usize,
    class_names: &[&str],
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    for sub in [IMAGES_DIR, MASKS_DIR, INSTANCES_DIR] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let entries = samples
        .par_iter()
        .map(|s| {
            if s.instances.len() >= IGNORE_LABEL as usize {
                return Err(Error::Data(format!("sample {} has too many instances", s.id)));
            }
            let image = format!("{IMAGES_DIR}/{}.png", s.id);
            let mask = format!("{MASKS_DIR}/{}.png", s.id);
            let inst = format!("{INSTANCES_DIR}/{}.png", s.id);
            write_rgb_png(dir.join(&image), &s.image)?;
            write_index_png(dir.join(&mask), &s.mask)?;
            let mut ids = LabelMask::filled(s.mask.height(), s.mask.width(), 0);
            for (k, i) in s.instances.iter().enumerate() {
                for &p in &i.pixels {
                    ids.labels_mut()[p as usize] = k as u8 + 1;
                }
            }
            write_index_png(dir.join(&inst), &ids)?;
            Ok(ManifestEntry {
                id: s.id.clone(),
                image,
                mask,
                instances: Some(inst),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        num_classes,
        class_names: class_names.iter().map(|s| s.to_string()).collect(),
        samples: entries,
        proposals: None,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub image_id: String,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub score: f64,
}

/// Reads newline-delimited proposal records, grouped by image id in file
/// order.
pub fn read_proposals(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<BoxGeometry>>> {
    let path = path.as_ref();
    let mut out: BTreeMap<String, Vec<BoxGeometry>> = BTreeMap::new();
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ProposalRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let b = BoxGeometry::new(r.x0, r.y0, r.x1, r.y1)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.entry(r.image_id).or_default().push(b.with_score(r.score));
    }
    Ok(out)
}

pub fn write_proposals(path: impl AsRef<Path>, proposals: &BTreeMap<String, Vec<BoxGeometry>>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for (id, boxes) in proposals {
        for b in boxes {
            let r = ProposalRecord {
                image_id: id.clone(),
                x0: b.x0,
                y0: b.y0,
                x1: b.x1,
                y1: b.y1,
                score: b.score,
            };
            serde_json::to_writer(&mut f, &r)?;
            f.write_all(b"\n")?;
        }
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn components_split_per_class_and_region() {
        #[rustfmt::skip]
        let m = LabelMask::new(3, 4, vec![
            1, 1, 0, 2,
            0, 0, 0, 2,
            1, 255, 2, 2,
        ]).unwrap();
        let inst = connected_instances(&m);
        assert_eq!(inst.len(), 3);
        assert_eq!((inst[0].class, inst[0].pixels.len()), (1, 2));
        assert_eq!((inst[1].class, inst[1].pixels.len()), (2, 4));
        assert_eq!((inst[2].class, inst[2].bbox), (1, BoxGeometry::new(0, 2, 1, 3).unwrap()));
    }
}
