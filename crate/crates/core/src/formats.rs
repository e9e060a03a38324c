//! Plain-file interchange formats.
//!
//! * Annotations: one object per line, `class_id cx cy w h`, normalized
//!   floats at 6 decimals, LF endings.
//! * Images: binary PPM (P6), maxval 255, RGB interleaved.
//! * Manifests: CSV listing image/annotation pairs with per-class counts.
//! * Detections: `class_id confidence cx cy w h`, same numeric format as
//!   annotations.
//!
//! Relative paths inside a manifest are resolved against the manifest's
//! directory, so a dataset directory can be moved as a unit.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::loss::Detection;
use crate::tensor::Tensor;

fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

pub fn write_annotations(path: &Path, annotations: &[(usize, BBox)]) -> Result<()> {
    let mut out = String::new();
    for (class, b) in annotations {
        out.push_str(&format!(
            "{class} {:.6} {:.6} {:.6} {:.6}\n",
            b.cx, b.cy, b.w, b.h
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read an annotation file, validating class ids against `classes`.
pub fn read_annotations(path: &Path, classes: usize) -> Result<Vec<(usize, BBox)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(parse_error(
                path,
                lineno,
                format!("expected 5 fields, got {}", fields.len()),
            ));
        }
        let class: usize = fields[0]
            .parse()
            .map_err(|_| parse_error(path, lineno, format!("bad class id {:?}", fields[0])))?;
        if class >= classes {
            return Err(parse_error(
                path,
                lineno,
                format!(
                    "class id {class} out of range (valid ids are 0..{})",
                    classes - 1
                ),
            ));
        }
        let mut vals = [0.0f64; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            vals[k] = f
                .parse()
                .map_err(|_| parse_error(path, lineno, format!("bad number {f:?}")))?;
        }
        let bbox = BBox::new(vals[0], vals[1], vals[2], vals[3])
            .map_err(|e| parse_error(path, lineno, e.to_string()))?;
        out.push((class, bbox));
    }
    Ok(out)
}

/// Write an H x W x 3 tensor of [0,1] floats as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    if image.shape.len() != 3 || image.shape[2] != 3 {
        return Err(Error::config(format!(
            "PPM writer needs an HxWx3 tensor, got {:?}",
            image.shape
        )));
    }
    let (h, w) = (image.shape[0], image.shape[1]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(h * w * 3);
    for &v in &image.data {
        bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // Skip whitespace and '#' comment lines between header tokens.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: "truncated header".into(),
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token(&bytes)?;
    if magic != "P6" {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("not a binary PPM (magic {magic:?})"),
        });
    }
    let w: usize = token(&bytes)?.parse().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        msg: "bad width".into(),
    })?;
    let h: usize = token(&bytes)?.parse().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        msg: "bad height".into(),
    })?;
    let maxval: usize = token(&bytes)?.parse().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        msg: "bad maxval".into(),
    })?;
    if maxval != 255 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("unsupported maxval {maxval}"),
        });
    }
    // Exactly one whitespace byte separates header from pixel data.
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "pixel data truncated: need {need} bytes, have {}",
                bytes.len().saturating_sub(pos)
            ),
        });
    }
    let mut t = Tensor::zeros(&[h, w, 3]);
    for (i, &b) in bytes[pos..pos + need].iter().enumerate() {
        t.data[i] = b as f32 / 255.0;
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub annotation: PathBuf,
    pub num_objects: usize,
    pub class_counts: Vec<usize>,
}

/// Dataset index. `dir` is the directory the manifest lives in (or was
/// constructed for); entry paths are resolved against it when relative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

const MANIFEST_HEADER: &str = "path,annotation_path,num_objects,counts_per_class";

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .to_path_buf();
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header == MANIFEST_HEADER => {}
            Some((_, header)) => {
                return Err(parse_error(
                    path,
                    1,
                    format!("bad manifest header {header:?}"),
                ))
            }
            None => return Err(parse_error(path, 1, "empty manifest")),
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(parse_error(
                    path,
                    lineno,
                    format!("expected 4 columns, got {}", fields.len()),
                ));
            }
            let num_objects: usize = fields[2]
                .parse()
                .map_err(|_| parse_error(path, lineno, "bad object count"))?;
            let class_counts = if fields[3].is_empty() {
                Vec::new()
            } else {
                fields[3]
                    .split(';')
                    .map(|c| {
                        c.parse::<usize>()
                            .map_err(|_| parse_error(path, lineno, "bad class count"))
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            if class_counts.iter().sum::<usize>() != num_objects {
                return Err(parse_error(
                    path,
                    lineno,
                    "class counts do not sum to num_objects",
                ));
            }
            entries.push(ManifestEntry {
                image: PathBuf::from(fields[0]),
                annotation: PathBuf::from(fields[1]),
                num_objects,
                class_counts,
            });
        }
        Ok(Manifest { dir, entries })
    }

    /// Write the manifest. Entry paths are re-anchored to the target file's
    /// directory: kept relative when the file lands in the data directory,
    /// made absolute otherwise, so the saved manifest always resolves.
    pub fn save(&self, path: &Path) -> Result<()> {
        let target_dir = path.parent().unwrap_or_else(|| Path::new("."));
        let anchored = |p: &Path| -> PathBuf {
            let resolved = self.resolve(p);
            match resolved.strip_prefix(target_dir) {
                Ok(rel) => rel.to_path_buf(),
                Err(_) => resolved,
            }
        };
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            let counts: Vec<String> = e.class_counts.iter().map(|c| c.to_string()).collect();
            out.push_str(&format!(
                "{},{},{},{}\n",
                anchored(&e.image).display(),
                anchored(&e.annotation).display(),
                e.num_objects,
                counts.join(";")
            ));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.resolve(&entry.image)
    }

    pub fn annotation_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.resolve(&entry.annotation)
    }

    /// Number of classes covered (length of the widest counts vector).
    pub fn classes(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.class_counts.len())
            .max()
            .unwrap_or(0)
    }

    /// Total object instances per class across the dataset.
    pub fn total_class_counts(&self) -> Vec<usize> {
        let mut totals = vec![0usize; self.classes()];
        for e in &self.entries {
            for (c, &n) in e.class_counts.iter().enumerate() {
                totals[c] += n;
            }
        }
        totals
    }
}

pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<()> {
    let mut out = String::new();
    for d in detections {
        out.push_str(&format!(
            "{} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
            d.class, d.confidence, d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path, classes: usize) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(parse_error(
                path,
                lineno,
                format!("expected 6 fields, got {}", fields.len()),
            ));
        }
        let class: usize = fields[0]
            .parse()
            .map_err(|_| parse_error(path, lineno, format!("bad class id {:?}", fields[0])))?;
        if class >= classes {
            return Err(parse_error(
                path,
                lineno,
                format!("class id {class} out of range"),
            ));
        }
        let mut vals = [0.0f64; 5];
        for (k, f) in fields[1..].iter().enumerate() {
            vals[k] = f
                .parse()
                .map_err(|_| parse_error(path, lineno, format!("bad number {f:?}")))?;
        }
        let bbox = BBox::new(vals[1], vals[2], vals[3], vals[4])
            .map_err(|e| parse_error(path, lineno, e.to_string()))?;
        out.push(Detection {
            class,
            bbox,
            confidence: vals[0],
        });
    }
    Ok(out)
}
