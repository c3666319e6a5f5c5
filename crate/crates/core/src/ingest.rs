//! Readers for Pascal VOC XML and COCO JSON annotation files.
//!
//! Both readers map category names through a [`ClassSet`] and silently drop
//! objects of other categories; the number dropped is reported back.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::bbox::BBox;
use crate::dataset::{Annotation, ClassSet, ConditionTag, DatasetManifest, ImageRecord};
use crate::error::{io_err, DataError};

/// One parsed VOC annotation file.
#[derive(Clone, Debug, PartialEq)]
pub struct VocAnnotation {
    pub filename: Option<String>,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<Annotation>,
    pub dropped: usize,
}

fn byte_offset(text: &str, row: u32, col: u32) -> usize {
    let mut offset = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        if i + 1 == row as usize {
            let chars = col.saturating_sub(1) as usize;
            return offset + line.char_indices().nth(chars).map_or(line.len(), |(b, _)| b);
        }
        offset += line.len();
    }
    text.len()
}

fn child<'a, 'i>(node: roxmltree::Node<'a, 'i>, name: &str) -> Option<roxmltree::Node<'a, 'i>> {
    node.children().find(|n| n.has_tag_name(name))
}

fn child_text<'a>(node: roxmltree::Node<'a, '_>, name: &str) -> Option<&'a str> {
    child(node, name).and_then(|n| n.text()).map(str::trim)
}

pub fn parse_voc_xml(document: &[u8], classes: &ClassSet) -> Result<VocAnnotation, DataError> {
    let text = std::str::from_utf8(document).map_err(|e| DataError::Parse {
        offset: e.valid_up_to(),
        message: "document is not valid UTF-8".into(),
    })?;
    let doc = roxmltree::Document::parse(text).map_err(|e| {
        let pos = e.pos();
        DataError::Parse { offset: byte_offset(text, pos.row, pos.col), message: e.to_string() }
    })?;
    let root = doc.root_element();
    let size_err = |message: &str| DataError::Parse { offset: 0, message: message.to_string() };
    let size = child(root, "size").ok_or_else(|| size_err("missing <size> element"))?;
    let dim = |name: &str| -> Result<u32, DataError> {
        child_text(size, name)
            .and_then(|t| t.parse::<f64>().ok())
            .filter(|v| *v >= 1.0 && v.fract() == 0.0)
            .map(|v| v as u32)
            .ok_or_else(|| size_err(&format!("missing or invalid <size>/<{name}>")))
    };
    let (width, height) = (dim("width")?, dim("height")?);

    let mut annotations = Vec::new();
    let mut dropped = 0;
    for (index, object) in root.children().filter(|n| n.has_tag_name("object")).enumerate() {
        let record_err = |message: String| DataError::Record { index, message };
        let name = child_text(object, "name").ok_or_else(|| record_err("missing <name>".into()))?;
        let Some(class_id) = classes.index_of(name) else {
            dropped += 1;
            continue;
        };
        let bndbox = child(object, "bndbox").ok_or_else(|| record_err("missing <bndbox>".into()))?;
        let mut coords = [0.0; 4];
        for (slot, field) in coords.iter_mut().zip(["xmin", "ymin", "xmax", "ymax"]) {
            *slot = child_text(bndbox, field)
                .ok_or_else(|| record_err(format!("missing <bndbox>/<{field}>")))?
                .parse()
                .map_err(|e| record_err(format!("<{field}>: {e}")))?;
        }
        let bbox = BBox::new(coords[0], coords[1], coords[2], coords[3])
            .ok()
            .and_then(|b| b.clip(width as f64, height as f64))
            .ok_or_else(|| record_err(format!("degenerate box {coords:?}")))?;
        let difficult = matches!(child_text(object, "difficult"), Some("1"));
        annotations.push(Annotation { bbox, class_id, difficult });
    }
    Ok(VocAnnotation {
        filename: child_text(root, "filename").map(String::from),
        width,
        height,
        annotations,
        dropped,
    })
}

/// Reads a list of VOC XML files into a manifest; image paths are
/// `image_dir/<filename>`.
pub fn read_voc_files(
    xml_paths: &[PathBuf],
    image_dir: &Path,
    classes: &ClassSet,
) -> Result<(DatasetManifest, usize), DataError> {
    let mut m = DatasetManifest::empty(classes.clone(), format!("voc:{}", image_dir.display()));
    let mut dropped = 0;
    for path in xml_paths {
        let bytes = fs::read(path).map_err(io_err::<DataError>(path))?;
        let voc = parse_voc_xml(&bytes, classes)?;
        let filename = voc.filename.ok_or_else(|| DataError::Parse {
            offset: 0,
            message: format!("{}: missing <filename>", path.display()),
        })?;
        dropped += voc.dropped;
        m.records.push(ImageRecord {
            image_path: image_dir.join(filename),
            width: voc.width,
            height: voc.height,
            annotations: voc.annotations,
            condition: ConditionTag::Clean,
        });
    }
    Ok((m, dropped))
}

#[derive(Deserialize)]
struct CocoDocument {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CocoImport {
    pub manifest: DatasetManifest,
    /// Annotations whose category is not in the class set.
    pub dropped: usize,
}

/// Parses a COCO annotation document. Boxes are converted from `[x, y, w, h]`
/// to corner form; crowd annotations are marked difficult. Records follow the
/// order of the `images` array.
pub fn parse_coco_json(
    document: &[u8],
    classes: &ClassSet,
    image_dir: &Path,
) -> Result<CocoImport, DataError> {
    let doc: CocoDocument = serde_json::from_slice(document).map_err(|e| {
        let text = String::from_utf8_lossy(document);
        DataError::Parse {
            offset: byte_offset(&text, e.line() as u32, e.column() as u32),
            message: e.to_string(),
        }
    })?;

    let category_class: HashMap<u64, Option<usize>> =
        doc.categories.iter().map(|c| (c.id, classes.index_of(&c.name))).collect();
    let image_slot: HashMap<u64, usize> = doc.images.iter().enumerate().map(|(i, im)| (im.id, i)).collect();

    let mut records: Vec<ImageRecord> = doc
        .images
        .iter()
        .map(|im| ImageRecord {
            image_path: image_dir.join(&im.file_name),
            width: im.width,
            height: im.height,
            annotations: Vec::new(),
            condition: ConditionTag::Clean,
        })
        .collect();

    let mut dropped = 0;
    for (index, a) in doc.annotations.iter().enumerate() {
        let record_err = |message: String| DataError::Record { index, message };
        let slot = *image_slot
            .get(&a.image_id)
            .ok_or_else(|| record_err(format!("unknown image id {}", a.image_id)))?;
        let class = *category_class
            .get(&a.category_id)
            .ok_or_else(|| record_err(format!("unknown category id {}", a.category_id)))?;
        let Some(class_id) = class else {
            dropped += 1;
            continue;
        };
        let [x, y, w, h] = a.bbox;
        let rec = &mut records[slot];
        let bbox = BBox::from_xywh(x, y, w, h)
            .ok()
            .and_then(|b| b.clip(rec.width as f64, rec.height as f64))
            .ok_or_else(|| record_err(format!("degenerate box {:?}", a.bbox)))?;
        rec.annotations.push(Annotation { bbox, class_id, difficult: a.iscrowd != 0 });
    }

    Ok(CocoImport {
        manifest: DatasetManifest {
            records,
            class_set: classes.clone(),
            provenance: format!("coco:{}", image_dir.display()),
        },
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn voc(objects: &str) -> String {
        format!(
            "<annotation><filename>000001.jpg</filename>\
             <size><width>500</width><height>375</height><depth>3</depth></size>{objects}</annotation>"
        )
    }

    #[test]
    fn voc_without_objects_is_empty() {
        let v = parse_voc_xml(voc("").as_bytes(), &ClassSet::canonical()).unwrap();
        assert!(v.annotations.is_empty());
        assert_eq!((v.width, v.height), (500, 375));
        assert_eq!(v.filename.as_deref(), Some("000001.jpg"));
    }

    #[test]
    fn voc_object_fields_echo_input() {
        let doc = voc(
            "<object><name>car</name><difficult>0</difficult>\
             <bndbox><xmin>10</xmin><ymin>20</ymin><xmax>110</xmax><ymax>220</ymax></bndbox></object>\
             <object><name>dog</name><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>5</xmax><ymax>5</ymax></bndbox></object>\
             <object><name>person</name><difficult>1</difficult>\
             <bndbox><xmin>1</xmin><ymin>2</ymin><xmax>30</xmax><ymax>40</ymax></bndbox></object>",
        );
        let v = parse_voc_xml(doc.as_bytes(), &ClassSet::canonical()).unwrap();
        assert_eq!(v.dropped, 1);
        assert_eq!(v.annotations.len(), 2);
        assert_eq!(v.annotations[0].class_id, 0);
        assert_eq!(v.annotations[0].bbox, BBox::new(10.0, 20.0, 110.0, 220.0).unwrap());
        assert!(!v.annotations[0].difficult);
        assert_eq!(v.annotations[1].class_id, 2);
        assert!(v.annotations[1].difficult);
    }

    #[test]
    fn truncated_voc_reports_offset() {
        let doc = voc("");
        let cut = &doc.as_bytes()[..doc.len() - 20];
        match parse_voc_xml(cut, &ClassSet::canonical()) {
            Err(DataError::Parse { offset, .. }) => assert!(offset <= cut.len()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn voc_missing_bndbox_names_object_index() {
        let doc = voc(
            "<object><name>bus</name><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>5</xmax><ymax>5</ymax></bndbox></object>\
             <object><name>car</name></object>",
        );
        match parse_voc_xml(doc.as_bytes(), &ClassSet::canonical()) {
            Err(DataError::Record { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    const COCO: &str = r#"{
        "images": [{"id": 7, "file_name": "a.jpg", "width": 100, "height": 80}],
        "annotations": [
            {"id": 1, "image_id": 7, "category_id": 6, "bbox": [5, 5, 10, 20], "iscrowd": 0},
            {"id": 2, "image_id": 7, "category_id": 8, "bbox": [1, 1, 3, 3], "iscrowd": 0}
        ],
        "categories": [{"id": 6, "name": "bus"}, {"id": 8, "name": "truck"}]
    }"#;

    #[test]
    fn coco_converts_xywh_and_drops_unmapped() {
        let imp = parse_coco_json(COCO.as_bytes(), &ClassSet::canonical(), Path::new("img")).unwrap();
        assert_eq!(imp.dropped, 1);
        let r = &imp.manifest.records[0];
        assert_eq!(r.image_path, Path::new("img/a.jpg"));
        assert_eq!(r.annotations.len(), 1);
        assert_eq!(r.annotations[0].class_id, 1);
        assert_eq!(r.annotations[0].bbox, BBox::new(5.0, 5.0, 15.0, 25.0).unwrap());
    }

    #[test]
    fn coco_without_annotations_is_empty() {
        let doc = r#"{"images": [], "annotations": [], "categories": []}"#;
        let imp = parse_coco_json(doc.as_bytes(), &ClassSet::canonical(), Path::new("")).unwrap();
        assert!(imp.manifest.is_empty());
        assert_eq!(imp.dropped, 0);
    }

    #[test]
    fn coco_structural_errors() {
        let missing = r#"{"images": [], "categories": []}"#;
        assert!(matches!(
            parse_coco_json(missing.as_bytes(), &ClassSet::canonical(), Path::new("")),
            Err(DataError::Parse { .. })
        ));
        let dangling = COCO.replace("\"image_id\": 7, \"category_id\": 8", "\"image_id\": 9, \"category_id\": 8");
        match parse_coco_json(dangling.as_bytes(), &ClassSet::canonical(), Path::new("")) {
            Err(DataError::Record { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }
}
