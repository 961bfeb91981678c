use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::registry::CategoryRegistry;
use super::scene::{GtInstance, HiddenGroundTruth, ImageLevelLabels, SceneImage, SceneRecord, Triplet};
use crate::error::{Error, Result};
use crate::json;
use crate::mask::{BBox, Mask};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub labels: String,
    pub hidden: String,
}

/// Index of one split on disk. Paths are relative to `root`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub height: usize,
    pub width: usize,
    pub objects: CategoryRegistry,
    pub relations: CategoryRegistry,
    pub corpus: String,
    pub records: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct LabelsFile {
    objects: Vec<String>,
    relations: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct InstanceFile {
    bbox: [usize; 4],
    category: String,
    mask_rle: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct HiddenFile {
    captions: Vec<String>,
    instances: Vec<InstanceFile>,
    triplets: Vec<(usize, String, usize)>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

pub fn encode_ppm(image: &SceneImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.to_rgb8());
    out
}

/// Parse a binary 8-bit PPM.
pub fn decode_ppm(bytes: &[u8], id: &str, origin: &Path) -> Result<SceneImage> {
    let bad = |m: &str| Error::format(origin, m.to_string());
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PPM header number"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing PPM data"))?;
    if data.len() != w * h * 3 {
        return Err(bad(&format!("expected {} bytes of pixel data, found {}", w * h * 3, data.len())));
    }
    Ok(SceneImage::from_rgb8(id, h, w, data))
}

fn labels_to_file(l: &ImageLevelLabels, objects: &CategoryRegistry, relations: &CategoryRegistry) -> LabelsFile {
    LabelsFile {
        objects: l.objects.iter().map(|&c| objects.name(c).unwrap().to_string()).collect(),
        relations: l.relations.iter().map(|&c| relations.name(c).unwrap().to_string()).collect(),
    }
}

fn lookup(reg: &CategoryRegistry, name: &str, origin: &Path) -> Result<usize> {
    reg.id(name)
        .ok_or_else(|| Error::format(origin, format!("unknown category {name:?}")))
}

/// Write images, labels, hidden ground truth, corpus and manifest under `root`.
pub fn write_dataset(
    root: &Path,
    split: &str,
    objects: &CategoryRegistry,
    relations: &CategoryRegistry,
    (height, width): (usize, usize),
    records: &[SceneRecord],
    corpus: &[String],
) -> Result<DatasetManifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut entries = Vec::with_capacity(records.len());
    for rec in records {
        let id = &rec.image.id;
        crate::error::contract!(
            rec.image.height() == height && rec.image.width() == width,
            "image {id} is {}x{}, split expects {height}x{width}",
            rec.image.height(),
            rec.image.width()
        );
        let entry = ManifestEntry {
            id: id.clone(),
            image: format!("images/{id}.ppm"),
            labels: format!("labels/{id}.json"),
            hidden: format!("hidden/{id}.json"),
        };
        write_file(&root.join(&entry.image), &encode_ppm(&rec.image))?;
        let labels = labels_to_file(&rec.labels, objects, relations);
        write_file(&root.join(&entry.labels), json::to_sorted_pretty(&labels).as_bytes())?;
        let h = &rec.hidden;
        let hidden = HiddenFile {
            captions: h.captions.clone(),
            instances: h
                .instances
                .iter()
                .map(|i| InstanceFile {
                    bbox: [i.bbox.x0, i.bbox.y0, i.bbox.x1, i.bbox.y1],
                    category: objects.name(i.category).unwrap().to_string(),
                    mask_rle: i.mask.to_rle(),
                })
                .collect(),
            triplets: h
                .triplets
                .iter()
                .map(|t| (t.subject, relations.name(t.relation).unwrap().to_string(), t.object))
                .collect(),
        };
        write_file(&root.join(&entry.hidden), json::to_sorted_string(&hidden).as_bytes())?;
        entries.push(entry);
    }
    let mut text = corpus.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    write_file(&root.join("corpus.txt"), text.as_bytes())?;
    let manifest = DatasetManifest {
        split: split.to_string(),
        height,
        width,
        objects: objects.clone(),
        relations: relations.clone(),
        corpus: "corpus.txt".into(),
        records: entries,
        root: root.to_path_buf(),
    };
    write_file(&root.join("manifest.json"), json::to_sorted_pretty(&manifest).as_bytes())?;
    Ok(manifest)
}

/// Read and validate a manifest: every referenced file must exist.
pub fn read_dataset(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    let mut m: DatasetManifest = read_json(&path)?;
    m.root = root.to_path_buf();
    let corpus = m.path(&m.corpus);
    if !corpus.is_file() {
        return Err(Error::format(&corpus, "corpus file referenced by manifest is missing"));
    }
    for e in &m.records {
        for rel in [&e.image, &e.labels, &e.hidden] {
            let p = m.path(rel);
            if !p.is_file() {
                return Err(Error::format(&p, "file referenced by manifest is missing"));
            }
        }
    }
    Ok(m)
}

pub fn load_image(m: &DatasetManifest, index: usize) -> Result<SceneImage> {
    let e = &m.records[index];
    let path = m.path(&e.image);
    let img = decode_ppm(&read_file(&path)?, &e.id, &path)?;
    if img.height() != m.height || img.width() != m.width {
        return Err(Error::format(&path, format!("image size differs from manifest {}x{}", m.height, m.width)));
    }
    Ok(img)
}

pub fn load_labels(m: &DatasetManifest, index: usize) -> Result<ImageLevelLabels> {
    let path = m.path(&m.records[index].labels);
    let f: LabelsFile = read_json(&path)?;
    Ok(ImageLevelLabels {
        objects: f.objects.iter().map(|n| lookup(&m.objects, n, &path)).collect::<Result<_>>()?,
        relations: f.relations.iter().map(|n| lookup(&m.relations, n, &path)).collect::<Result<_>>()?,
    })
}

pub fn load_corpus(m: &DatasetManifest) -> Result<Vec<String>> {
    let path = m.path(&m.corpus);
    let text = String::from_utf8(read_file(&path)?).map_err(|e| Error::format(&path, e.to_string()))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

/// Unguarded hidden-file parser; reachable only through [`super::HiddenStore`].
pub(super) fn load_hidden(m: &DatasetManifest, index: usize) -> Result<HiddenGroundTruth> {
    let path = m.path(&m.records[index].hidden);
    let f: HiddenFile = read_json(&path)?;
    let instances = f
        .instances
        .iter()
        .map(|i| {
            let mask = Mask::from_rle(m.height, m.width, &i.mask_rle)
                .ok_or_else(|| Error::format(&path, "mask run lengths do not cover the image"))?;
            Ok(GtInstance {
                category: lookup(&m.objects, &i.category, &path)?,
                mask,
                bbox: BBox {
                    x0: i.bbox[0],
                    y0: i.bbox[1],
                    x1: i.bbox[2],
                    y1: i.bbox[3],
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let triplets = f
        .triplets
        .iter()
        .map(|(s, r, o)| {
            Ok(Triplet {
                subject: *s,
                relation: lookup(&m.relations, r, &path)?,
                object: *o,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HiddenGroundTruth {
        instances,
        triplets,
        captions: f.captions,
    })
}

/// Images and labels of a split held in memory. Hidden data is not loaded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<SceneImage>,
    pub labels: Vec<ImageLevelLabels>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = read_dataset(root)?;
        let images = (0..manifest.len()).map(|i| load_image(&manifest, i)).collect::<Result<_>>()?;
        let labels = (0..manifest.len()).map(|i| load_labels(&manifest, i)).collect::<Result<_>>()?;
        Ok(Dataset {
            manifest,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn corpus(&self) -> Result<Vec<String>> {
        load_corpus(&self.manifest)
    }
}
