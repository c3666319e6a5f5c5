//! Per-class AP / mAP evaluation and report tables.

pub mod metrics;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use metrics::{
    assign_tp_fp, average_precision, evaluate_class, mean_ap, pr_curve, ApMethod, ApValue, ClassEvaluation, Outcome,
    PrPoint,
};

use crate::bbox::BBox;
use crate::dataset::{DatasetManifest, Detection};
use crate::detector::checkpoint::encode_model;
use crate::detector::{predict, ModelState, PredictConfig};
use crate::error::{io_err, EvalError};
use crate::imaging::read_image;
use crate::rng::sha256_hex;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub method: ApMethod,
    pub predict: PredictConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { iou_threshold: 0.5, method: ApMethod::ElevenPoint, predict: PredictConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_id: String,
    pub dataset_id: String,
    pub iou_threshold: f64,
    pub method: ApMethod,
}

/// One table row: per-class AP and mAP, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub classes: Vec<String>,
    pub ap: Vec<f64>,
    pub map: f64,
    pub images: usize,
    pub ground_truths: Vec<usize>,
    pub detections: Vec<usize>,
    pub warnings: Vec<String>,
    pub provenance: Provenance,
}

/// Detections keyed by image path.
pub type DetectionDump = BTreeMap<PathBuf, Vec<Detection>>;

pub enum DetectionSource<'a> {
    Model(&'a ModelState),
    Dump(&'a DetectionDump),
}

/// Short content hash identifying a model.
pub fn model_id(model: &ModelState) -> String {
    sha256_hex(&encode_model(model))[..16].to_string()
}

pub fn run_detector(model: &ModelState, test: &DatasetManifest, cfg: &PredictConfig) -> Result<Vec<Vec<Detection>>, EvalError> {
    test.records
        .iter()
        .map(|r| Ok(predict(model, &read_image(&r.image_path)?, cfg)?))
        .collect()
}

pub fn evaluate(
    source: DetectionSource<'_>,
    test: &DatasetManifest,
    cfg: &EvalConfig,
    label: &str,
) -> Result<EvalReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let (dets, model_id) = match source {
        DetectionSource::Model(m) => {
            if m.class_set != test.class_set {
                return Err(EvalError::ClassMismatch(format!(
                    "model classes {:?}, test classes {:?}",
                    m.class_set.names(),
                    test.class_set.names()
                )));
            }
            (run_detector(m, test, &cfg.predict)?, model_id(m))
        }
        DetectionSource::Dump(dump) => {
            let dets = test.records.iter().map(|r| dump.get(&r.image_path).cloned().unwrap_or_default()).collect();
            (dets, "detection-dump".to_string())
        }
    };
    evaluate_detections(&dets, test, cfg, label, model_id)
}

/// Scores precomputed detections; `dets[i]` belongs to `test.records[i]`.
pub fn evaluate_detections(
    dets: &[Vec<Detection>],
    test: &DatasetManifest,
    cfg: &EvalConfig,
    label: &str,
    model_id: String,
) -> Result<EvalReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    if dets.len() != test.len() {
        return Err(EvalError::Contract(format!("{} detection lists for {} images", dets.len(), test.len())));
    }
    let n = test.class_set.len();
    if let Some(d) = dets.iter().flatten().find(|d| d.class_id >= n) {
        return Err(EvalError::ClassMismatch(format!("detection class {} outside the {n}-class set", d.class_id)));
    }
    let gts: Vec<_> = test.records.iter().map(|r| r.annotations.clone()).collect();
    let mut report = EvalReport {
        label: label.to_string(),
        classes: test.class_set.names().to_vec(),
        ap: Vec::with_capacity(n),
        map: 0.0,
        images: test.len(),
        ground_truths: Vec::with_capacity(n),
        detections: Vec::with_capacity(n),
        warnings: Vec::new(),
        provenance: Provenance {
            model_id,
            dataset_id: test.provenance.clone(),
            iou_threshold: cfg.iou_threshold,
            method: cfg.method,
        },
    };
    for c in 0..n {
        let e = evaluate_class(dets, &gts, c, cfg.iou_threshold, cfg.method);
        if e.ap.no_ground_truth {
            report.warnings.push(format!("class {} has no ground truth; AP set to 0", test.class_set.names()[c]));
        }
        report.ap.push(100.0 * e.ap.ap);
        report.ground_truths.push(e.n_gt);
        report.detections.push(e.n_detections);
    }
    report.map = mean_ap(&report.ap, n)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Markdown,
    Csv,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row per report with every class AP and the mAP, two decimals.
pub fn render_report_table(reports: &[EvalReport], classes: &[String], format: TableFormat) -> Result<String, EvalError> {
    if let Some(r) = reports.iter().find(|r| r.classes != classes) {
        return Err(EvalError::ClassMismatch(format!("report {:?} has classes {:?}, table has {classes:?}", r.label, r.classes)));
    }
    let mut out = String::new();
    match format {
        TableFormat::Markdown => {
            let _ = writeln!(out, "| Model | {} | mAP |", classes.join(" | "));
            let _ = writeln!(out, "|---|{}---:|", "---:|".repeat(classes.len()));
            for r in reports {
                let cells: Vec<String> = r.ap.iter().map(|a| format!("{a:.2}")).collect();
                let _ = writeln!(out, "| {} | {} | {:.2} |", r.label.replace('|', "\\|"), cells.join(" | "), r.map);
            }
        }
        TableFormat::Csv => {
            let _ = writeln!(out, "model,{},mAP", classes.join(","));
            for r in reports {
                let cells: Vec<String> = r.ap.iter().map(|a| format!("{a:.2}")).collect();
                let _ = writeln!(out, "{},{},{:.2}", csv_field(&r.label), cells.join(","), r.map);
            }
        }
    }
    Ok(out)
}

fn resolve(path: &str, base: &Path) -> PathBuf {
    let p = PathBuf::from(path);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

/// Parses `image_path<TAB>class_id<TAB>confidence<TAB>xmin,ymin,xmax,ymax`
/// lines. Relative paths are resolved against `base`; blank lines and lines
/// starting with `#` are skipped.
pub fn parse_detection_dump(text: &str, base: &Path) -> Result<DetectionDump, EvalError> {
    let mut dump = DetectionDump::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |message: String| EvalError::Dump { line: line_no, message };
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [path, class, conf, coords] = fields[..] else {
            return Err(err(format!("expected 4 tab-separated fields, found {}", fields.len())));
        };
        let class_id = class.parse::<usize>().map_err(|e| err(format!("class id {class:?}: {e}")))?;
        let confidence = conf.parse::<f64>().map_err(|e| err(format!("confidence {conf:?}: {e}")))?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(err(format!("confidence {confidence} outside [0, 1]")));
        }
        let c: Vec<f64> = coords
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| err(format!("box {coords:?}: {e}")))?;
        let [xmin, ymin, xmax, ymax] = c[..] else {
            return Err(err(format!("box {coords:?} needs 4 coordinates")));
        };
        let bbox = BBox::new(xmin, ymin, xmax, ymax).map_err(|e| err(e.to_string()))?;
        dump.entry(resolve(path, base)).or_default().push(Detection { bbox, class_id, confidence });
    }
    Ok(dump)
}

pub fn detection_dump_to_string(dump: &DetectionDump) -> String {
    let mut out = String::new();
    for (path, dets) in dump {
        for d in dets {
            let b = d.bbox;
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{},{},{},{}",
                path.display(),
                d.class_id,
                d.confidence,
                b.xmin,
                b.ymin,
                b.xmax,
                b.ymax
            );
        }
    }
    out
}

pub fn read_detection_dump(path: &Path) -> Result<DetectionDump, EvalError> {
    let text = fs::read_to_string(path).map_err(io_err::<EvalError>(path))?;
    parse_detection_dump(&text, path.parent().unwrap_or(Path::new(".")))
}

pub fn write_detection_dump(dump: &DetectionDump, path: &Path) -> Result<(), EvalError> {
    fs::write(path, detection_dump_to_string(dump)).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Annotation, ClassSet, ConditionTag, ImageRecord};

    fn manifest() -> DatasetManifest {
        let mut m = DatasetManifest::empty(ClassSet::canonical(), "unit");
        for (i, boxes) in [vec![(0, 0.0)], vec![(1, 10.0), (0, 30.0)], vec![(2, 5.0)]].into_iter().enumerate() {
            m.records.push(ImageRecord {
                image_path: PathBuf::from(format!("/data/{i}.ppm")),
                width: 64,
                height: 64,
                annotations: boxes
                    .into_iter()
                    .map(|(c, x)| Annotation::new(BBox::new(x, x, x + 12.0, x + 12.0).unwrap(), c))
                    .collect(),
                condition: ConditionTag::Clean,
            });
        }
        m
    }

    fn perfect(m: &DatasetManifest) -> Vec<Vec<Detection>> {
        m.records
            .iter()
            .map(|r| r.annotations.iter().map(|a| Detection { bbox: a.bbox, class_id: a.class_id, confidence: 0.9 }).collect())
            .collect()
    }

    #[test]
    fn perfect_detector_scores_full_marks_except_absent_classes() {
        let m = manifest();
        let r = evaluate_detections(&perfect(&m), &m, &EvalConfig::default(), "perfect", "x".into()).unwrap();
        assert_eq!(r.ap, vec![100.0, 100.0, 100.0, 0.0]);
        assert_eq!(r.map, 75.0);
        assert_eq!(r.ground_truths, vec![2, 1, 1, 0]);
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn empty_test_set_is_rejected() {
        let m = DatasetManifest::empty(ClassSet::canonical(), "none");
        assert!(matches!(evaluate_detections(&[], &m, &EvalConfig::default(), "x", "x".into()), Err(EvalError::EmptyTestSet)));
    }

    #[test]
    fn dump_round_trip_matches_direct_evaluation() {
        let m = manifest();
        let dets = perfect(&m);
        let dump: DetectionDump = m.records.iter().map(|r| r.image_path.clone()).zip(dets.clone()).collect();
        let text = detection_dump_to_string(&dump);
        let back = parse_detection_dump(&text, Path::new("/elsewhere")).unwrap();
        assert_eq!(back, dump);
        let a = evaluate(DetectionSource::Dump(&back), &m, &EvalConfig::default(), "dump").unwrap();
        let b = evaluate_detections(&dets, &m, &EvalConfig::default(), "dump", "detection-dump".into()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn malformed_dump_lines_name_the_line() {
        for (text, line) in [
            ("a.ppm\t0\t0.5\t1,2,3,4\nb.ppm\t0\t0.5\n", 2),
            ("a.ppm\tx\t0.5\t1,2,3,4\n", 1),
            ("\na.ppm\t0\t1.5\t1,2,3,4\n", 2),
            ("a.ppm\t0\t0.5\t3,2,1,4\n", 1),
        ] {
            match parse_detection_dump(text, Path::new(".")) {
                Err(EvalError::Dump { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn out_of_range_class_is_a_mismatch() {
        let m = manifest();
        let mut dets = perfect(&m);
        dets[0][0].class_id = 7;
        assert!(matches!(
            evaluate_detections(&dets, &m, &EvalConfig::default(), "x", "x".into()),
            Err(EvalError::ClassMismatch(_))
        ));
    }

    #[test]
    fn tables() {
        let m = manifest();
        let classes = ClassSet::canonical().names().to_vec();
        let r = evaluate_detections(&perfect(&m), &m, &EvalConfig::default(), "Stage 1", "x".into()).unwrap();
        assert_eq!(render_report_table(&[], &classes, TableFormat::Csv).unwrap(), "model,car,bus,person,bicycle,mAP\n");
        let csv = render_report_table(&[r.clone()], &classes, TableFormat::Csv).unwrap();
        assert_eq!(csv.lines().nth(1).unwrap(), "Stage 1,100.00,100.00,100.00,0.00,75.00");
        let md = render_report_table(&[r.clone()], &classes, TableFormat::Markdown).unwrap();
        assert_eq!(md.lines().count(), 3);
        assert!(md.contains("| Stage 1 | 100.00 | 100.00 | 100.00 | 0.00 | 75.00 |"));
        assert_eq!(md, render_report_table(&[r.clone()], &classes, TableFormat::Markdown).unwrap());
        let mut other = r;
        other.classes.pop();
        assert!(render_report_table(&[other], &classes, TableFormat::Csv).is_err());
    }
}
