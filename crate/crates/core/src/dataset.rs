//! Dataset records, class sets and the native manifest format.
//!
//! A manifest is a list of image records, each with its ground-truth
//! annotations and the weather condition it was captured (or rendered) under.
//! On disk it is a line-oriented UTF-8 text file:
//!
//! ```text
//! weatherbias-manifest v1
//! # classes<TAB>car,bus,person,bicycle
//! # provenance<TAB>scene seed=7
//! images/00000.ppm<TAB>64<TAB>64<TAB>clean<TAB>0:3,4,20,15;2:30,10,38,33
//! ```
//!
//! Image paths are written relative to the manifest's directory when the image
//! lives below it, and resolved against that directory on read. A trailing
//! `:d` on an annotation marks it difficult.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{io_err, DataError};

pub const MANIFEST_HEADER: &str = "weatherbias-manifest v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassSet(Vec<String>);

impl ClassSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, DataError> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains([',', '\t', '\n', ';', ':']) {
                return Err(DataError::Config(format!("invalid class name {n:?}")));
            }
            if names[..i].contains(n) {
                return Err(DataError::Config(format!("duplicate class name {n:?}")));
            }
        }
        Ok(ClassSet(names))
    }

    /// The harness's fixed four-class set.
    pub fn canonical() -> Self {
        ClassSet(["car", "bus", "person", "bicycle"].map(String::from).to_vec())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.0.get(id).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|n| n == name)
    }
}

impl TryFrom<Vec<String>> for ClassSet {
    type Error = DataError;
    fn try_from(v: Vec<String>) -> Result<Self, Self::Error> {
        ClassSet::new(v)
    }
}

impl From<ClassSet> for Vec<String> {
    fn from(c: ClassSet) -> Self {
        c.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    pub class_id: usize,
    #[serde(default)]
    pub difficult: bool,
}

impl Annotation {
    pub fn new(bbox: BBox, class_id: usize) -> Self {
        Annotation { bbox, class_id, difficult: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConditionTag {
    Clean,
    /// Name of the corruption (or `+`-joined chain of corruptions).
    Corrupted(String),
}

impl fmt::Display for ConditionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConditionTag::Clean => f.write_str("clean"),
            ConditionTag::Corrupted(kind) => write!(f, "corrupted:{kind}"),
        }
    }
}

impl FromStr for ConditionTag {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clean" => Ok(ConditionTag::Clean),
            _ => match s.strip_prefix("corrupted:") {
                Some(kind) if !kind.is_empty() && !kind.contains(char::is_whitespace) => {
                    Ok(ConditionTag::Corrupted(kind.to_string()))
                }
                _ => Err(format!("unknown condition tag {s:?}")),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub image_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<Annotation>,
    pub condition: ConditionTag,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    pub class_set: ClassSet,
    pub provenance: String,
}

impl DatasetManifest {
    pub fn empty(class_set: ClassSet, provenance: impl Into<String>) -> Self {
        DatasetManifest { records: Vec::new(), class_set, provenance: provenance.into() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn annotation_count(&self) -> usize {
        self.records.iter().map(|r| r.annotations.len()).sum()
    }

    /// Checks that every box lies inside its image and every class id is known.
    pub fn validate(&self) -> Result<(), DataError> {
        for (index, r) in self.records.iter().enumerate() {
            if r.width == 0 || r.height == 0 {
                return Err(DataError::Record { index, message: "zero-sized image".into() });
            }
            for a in &r.annotations {
                if a.class_id >= self.class_set.len() {
                    return Err(DataError::Record {
                        index,
                        message: format!("class id {} outside class set", a.class_id),
                    });
                }
                if !a.bbox.is_valid() || !a.bbox.within(r.width as f64, r.height as f64) {
                    return Err(DataError::Record {
                        index,
                        message: format!("box {:?} outside {}x{} image", a.bbox, r.width, r.height),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Keeps only the annotations whose class name is in `keep`, remapping ids to
/// `keep`'s order. Images that lose all annotations stay in the manifest.
pub fn filter_classes(m: &DatasetManifest, keep: &ClassSet) -> Result<DatasetManifest, DataError> {
    let mut remap = vec![None; m.class_set.len()];
    for (new_id, name) in keep.names().iter().enumerate() {
        let old = m.class_set.index_of(name).ok_or_else(|| {
            DataError::Config(format!("class {name:?} is not in the source class set"))
        })?;
        remap[old] = Some(new_id);
    }
    let records = m
        .records
        .iter()
        .map(|r| ImageRecord {
            annotations: r
                .annotations
                .iter()
                .filter_map(|a| {
                    remap.get(a.class_id).copied().flatten().map(|class_id| Annotation { class_id, ..*a })
                })
                .collect(),
            ..r.clone()
        })
        .collect();
    Ok(DatasetManifest { records, class_set: keep.clone(), provenance: m.provenance.clone() })
}

/// All of `clean` plus `floor(fraction * |corrupted|)` records sampled without
/// replacement from `corrupted`, shuffled together.
pub fn mix_datasets(
    clean: &DatasetManifest,
    corrupted: &DatasetManifest,
    fraction_corrupted: f64,
    seed: u64,
) -> Result<DatasetManifest, DataError> {
    if clean.class_set != corrupted.class_set {
        return Err(DataError::Config("cannot mix manifests with different class sets".into()));
    }
    if !(0.0..=1.0).contains(&fraction_corrupted) {
        return Err(DataError::Config(format!(
            "corrupted fraction {fraction_corrupted} outside [0, 1]"
        )));
    }
    let take = (fraction_corrupted * corrupted.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, corrupted.len(), take).into_vec();
    picked.sort_unstable();

    let mut records = clean.records.clone();
    records.extend(picked.into_iter().map(|i| corrupted.records[i].clone()));
    records.shuffle(&mut rng);
    Ok(DatasetManifest {
        records,
        class_set: clean.class_set.clone(),
        provenance: format!(
            "mix({} | {} | fraction={fraction_corrupted} seed={seed})",
            clean.provenance, corrupted.provenance
        ),
    })
}

fn format_annotations(annotations: &[Annotation]) -> String {
    annotations
        .iter()
        .map(|a| {
            let b = &a.bbox;
            let mut s = format!("{}:{},{},{},{}", a.class_id, b.xmin, b.ymin, b.xmax, b.ymax);
            if a.difficult {
                s.push_str(":d");
            }
            s
        })
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_annotation(s: &str) -> Result<Annotation, String> {
    let mut parts = s.split(':');
    let class_id = parts
        .next()
        .and_then(|c| c.parse::<usize>().ok())
        .ok_or_else(|| format!("bad class id in {s:?}"))?;
    let coords = parts.next().ok_or_else(|| format!("missing coordinates in {s:?}"))?;
    let difficult = match parts.next() {
        None => false,
        Some("d") => true,
        Some(other) => return Err(format!("unknown annotation flag {other:?}")),
    };
    if parts.next().is_some() {
        return Err(format!("trailing fields in {s:?}"));
    }
    let c: Vec<f64> = coords
        .split(',')
        .map(str::parse::<f64>)
        .collect::<Result<_, _>>()
        .map_err(|e| format!("bad coordinate in {s:?}: {e}"))?;
    if c.len() != 4 {
        return Err(format!("expected 4 coordinates in {s:?}"));
    }
    let bbox = BBox::new(c[0], c[1], c[2], c[3]).map_err(|e| e.to_string())?;
    Ok(Annotation { bbox, class_id, difficult })
}

fn path_for_file(image_path: &Path, base: &Path) -> Result<String, DataError> {
    let rel = match image_path.strip_prefix(base) {
        Ok(rel) if !base.as_os_str().is_empty() => rel.to_path_buf(),
        _ if base.as_os_str().is_empty() && image_path.is_relative() => image_path.to_path_buf(),
        _ => std::path::absolute(image_path).map_err(io_err::<DataError>(image_path))?,
    };
    let s = rel
        .to_str()
        .ok_or_else(|| DataError::Config(format!("non UTF-8 image path {}", rel.display())))?;
    if s.contains(['\t', '\n']) {
        return Err(DataError::Config(format!("image path {s:?} contains a tab or newline")));
    }
    Ok(s.replace('\\', "/"))
}

/// Serializes a manifest to its text form, relativizing paths against `base`.
pub fn manifest_to_string(m: &DatasetManifest, base: &Path) -> Result<String, DataError> {
    let mut out = String::new();
    out.push_str(MANIFEST_HEADER);
    out.push('\n');
    out.push_str(&format!("# classes\t{}\n", m.class_set.names().join(",")));
    out.push_str(&format!("# provenance\t{}\n", m.provenance.replace(['\n', '\t'], " ")));
    for r in &m.records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            path_for_file(&r.image_path, base)?,
            r.width,
            r.height,
            r.condition,
            format_annotations(&r.annotations)
        ));
    }
    Ok(out)
}

pub fn manifest_from_str(text: &str, base: &Path) -> Result<DatasetManifest, DataError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, MANIFEST_HEADER)) => {}
        Some((_, other)) => {
            return Err(DataError::SchemaVersion { found: other.to_string(), expected: MANIFEST_HEADER })
        }
        None => return Err(DataError::SchemaVersion { found: String::new(), expected: MANIFEST_HEADER }),
    }
    let mut class_set = None;
    let mut provenance = String::new();
    let mut records = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let bad = |message: String| DataError::Manifest { line: line_no, message };
        if let Some(meta) = line.strip_prefix("# ") {
            let (key, value) = meta.split_once('\t').unwrap_or((meta, ""));
            match key {
                "classes" => {
                    let names: Vec<&str> =
                        if value.is_empty() { Vec::new() } else { value.split(',').collect() };
                    class_set = Some(ClassSet::new(names).map_err(|e| bad(e.to_string()))?);
                }
                "provenance" => provenance = value.to_string(),
                _ => {}
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 tab-separated fields, found {}", fields.len())));
        }
        let width = fields[1].parse().map_err(|e| bad(format!("width: {e}")))?;
        let height = fields[2].parse().map_err(|e| bad(format!("height: {e}")))?;
        let condition = fields[3].parse().map_err(bad)?;
        let annotations = if fields[4].is_empty() {
            Vec::new()
        } else {
            fields[4].split(';').map(parse_annotation).collect::<Result<_, _>>().map_err(bad)?
        };
        let p = Path::new(fields[0]);
        let image_path = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        records.push(ImageRecord { image_path, width, height, annotations, condition });
    }
    let class_set = class_set.ok_or(DataError::Manifest {
        line: 2,
        message: "missing `# classes` line".into(),
    })?;
    let m = DatasetManifest { records, class_set, provenance };
    m.validate()?;
    Ok(m)
}

fn parent_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new(""))
}

pub fn write_manifest(m: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    let text = manifest_to_string(m, parent_dir(path))?;
    fs::write(path, text).map_err(io_err::<DataError>(path))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = fs::read_to_string(path).map_err(io_err::<DataError>(path))?;
    manifest_from_str(&text, parent_dir(path))
}
