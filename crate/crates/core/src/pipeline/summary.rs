//! Bias gap, mitigation ratios and bound checks derived from stage reports.

use serde::{Deserialize, Serialize};

use crate::evaluation::EvalReport;

/// `mAP(technique) / mAP(stage 2)`, or unbounded when the baseline is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Ratio {
    Value(f64),
    Unbounded,
}

impl Serialize for Ratio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Ratio::Value(v) => s.serialize_f64(*v),
            Ratio::Unbounded => s.serialize_str("unbounded"),
        }
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Ratio::Value(v)),
            Raw::Text(t) if t == "unbounded" => Ok(Ratio::Unbounded),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad ratio {t:?}"))),
        }
    }
}

pub fn bias_gap(clean_map: f64, corrupted_map: f64) -> f64 {
    clean_map - corrupted_map
}

pub fn ratio(map: f64, baseline: f64) -> Ratio {
    if baseline > 0.0 {
        Ratio::Value(map / baseline)
    } else {
        Ratio::Unbounded
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mitigation {
    pub technique: String,
    pub map: f64,
    pub ratio: Ratio,
    pub delta_map: f64,
    pub per_class_delta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasSummary {
    /// `mAP(stage 1) - mAP(stage 2)` for family A; absent when either stage did not run.
    pub bias_gap: Option<f64>,
    /// The same gap for family B.
    pub bias_gap_b: Option<f64>,
    pub mitigations: Vec<Mitigation>,
    /// Mean of the technique ratios; unbounded if any ratio is.
    pub mean_ratio: Option<Ratio>,
}

pub fn mitigation(technique: &str, report: &EvalReport, baseline: &EvalReport) -> Mitigation {
    Mitigation {
        technique: technique.to_string(),
        map: report.map,
        ratio: ratio(report.map, baseline.map),
        delta_map: report.map - baseline.map,
        per_class_delta: report.ap.iter().zip(&baseline.ap).map(|(a, b)| a - b).collect(),
    }
}

pub fn mean_ratio(mitigations: &[Mitigation]) -> Option<Ratio> {
    if mitigations.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for m in mitigations {
        match m.ratio {
            Ratio::Value(v) => sum += v,
            Ratio::Unbounded => return Some(Ratio::Unbounded),
        }
    }
    Some(Ratio::Value(sum / mitigations.len() as f64))
}

pub fn summarize(
    stage1: Option<&EvalReport>,
    stage2: Option<&EvalReport>,
    stage1_b: Option<&EvalReport>,
    stage2_b: Option<&EvalReport>,
    techniques: &[(&str, &EvalReport)],
) -> BiasSummary {
    let gap = |a: Option<&EvalReport>, b: Option<&EvalReport>| Some(bias_gap(a?.map, b?.map));
    let mitigations: Vec<Mitigation> = match stage2 {
        Some(base) => techniques.iter().map(|(name, r)| mitigation(name, r, base)).collect(),
        None => Vec::new(),
    };
    BiasSummary {
        bias_gap: gap(stage1, stage2),
        bias_gap_b: gap(stage1_b, stage2_b),
        mean_ratio: mean_ratio(&mitigations),
        mitigations,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), passed, detail: detail.into() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{ApMethod, Provenance};

    fn report(ap: [f64; 4]) -> EvalReport {
        EvalReport {
            label: "r".into(),
            classes: vec!["car".into(), "bus".into(), "person".into(), "bicycle".into()],
            ap: ap.to_vec(),
            map: ap.iter().sum::<f64>() / 4.0,
            images: 1,
            ground_truths: vec![1; 4],
            detections: vec![1; 4],
            warnings: vec![],
            provenance: Provenance { model_id: "m".into(), dataset_id: "d".into(), iou_threshold: 0.5, method: ApMethod::ElevenPoint },
        }
    }

    #[test]
    fn table_arithmetic() {
        assert!((bias_gap(74.95, 3.75) - 71.2).abs() < 1e-9);
        assert_eq!(ratio(26.25, 3.75), Ratio::Value(7.0));
        assert_eq!(ratio(5.0, 0.0), Ratio::Unbounded);
    }

    #[test]
    fn summary_from_reports() {
        let s1 = report([80.0, 70.0, 60.0, 90.0]);
        let s2 = report([7.0, 0.0, 8.0, 0.0]);
        let t1 = report([8.0, 5.0, 7.0, 2.0]);
        let t2 = report([6.0, 3.0, 4.0, 92.0]);
        let s = summarize(Some(&s1), Some(&s2), None, None, &[("tech1", &t1), ("tech2", &t2)]);
        assert_eq!(s.bias_gap, Some(75.0 - 3.75));
        assert_eq!(s.bias_gap_b, None);
        assert_eq!(s.mitigations[1].ratio, Ratio::Value(7.0));
        assert_eq!(s.mitigations[0].per_class_delta, vec![1.0, 5.0, -1.0, 2.0]);
        assert_eq!(s.mean_ratio, Some(Ratio::Value((5.5 / 3.75 + 7.0) / 2.0)));
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<BiasSummary>(&json).unwrap(), s);
    }

    #[test]
    fn zero_baseline_is_unbounded() {
        let zero = report([0.0; 4]);
        let t = report([4.0, 0.0, 0.0, 0.0]);
        let s = summarize(None, Some(&zero), None, None, &[("tech2", &t)]);
        assert_eq!(s.mitigations[0].ratio, Ratio::Unbounded);
        assert_eq!(s.mitigations[0].delta_map, 1.0);
        assert_eq!(s.mean_ratio, Some(Ratio::Unbounded));
        assert!(serde_json::to_string(&s).unwrap().contains("\"unbounded\""));
    }

    #[test]
    fn partial_runs_leave_fields_unavailable() {
        let s1 = report([50.0; 4]);
        let s = summarize(Some(&s1), None, None, None, &[]);
        assert_eq!((s.bias_gap, s.mean_ratio), (None, None));
        assert!(s.mitigations.is_empty());
    }
}
