use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{
    classification_scores, instance_prf, mean_average_precision, snippet_prf, ClassificationScores,
    GenerationScores, Prf,
};
use crate::corpus::SnippetRef;
use crate::error::Result;
use crate::track::TrackingScores;

/// Everything a run produced that can be scored. Leave a stage `None` when
/// it was not run.
#[derive(Debug, Default)]
pub struct ReportInputs {
    /// (predicted, gold) knowledge-seeking decisions.
    pub detection: Option<Vec<(bool, bool)>>,
    pub tracking: Option<TrackingScores>,
    pub selection: Option<SelectionInputs>,
    pub generation: Option<GenerationInputs>,
}

#[derive(Debug, Default)]
pub struct SelectionInputs {
    pub predicted: Vec<BTreeSet<SnippetRef>>,
    pub gold: Vec<BTreeSet<SnippetRef>>,
    /// Full candidate ranking per instance; omit to skip mAP.
    pub rankings: Option<Vec<Vec<SnippetRef>>>,
}

#[derive(Debug, Default)]
pub struct GenerationInputs {
    pub hypotheses: Vec<String>,
    pub references: Vec<String>,
}

/// Metric bundle of one run. Absent fields were not evaluated. Field order
/// is fixed so serialized reports diff cleanly.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub detection: Option<ClassificationScores>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tracking: Option<TrackingScores>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub instance_prf: Option<Prf>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub instance_prf_with_empty_gold: Option<Prf>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub snippet_prf: Option<Prf>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bleu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rouge1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rouge2: Option<f64>,
    #[serde(rename = "rougeL", skip_serializing_if = "Option::is_none", default)]
    pub rouge_l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub meteor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub avg_response_length: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub selection_instances: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub excluded_empty_gold: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub generation_instances: Option<usize>,
}

pub fn full_report(inputs: &ReportInputs) -> Result<EvalReport> {
    let mut report = EvalReport {
        detection: inputs
            .detection
            .as_ref()
            .map(|pairs| classification_scores(pairs.iter().copied())),
        tracking: inputs.tracking.clone(),
        ..EvalReport::default()
    };
    if let Some(sel) = &inputs.selection {
        let inst = instance_prf(&sel.predicted, &sel.gold);
        report.instance_prf = Some(inst.prf);
        report.instance_prf_with_empty_gold = Some(inst.with_empty_gold);
        report.snippet_prf = Some(snippet_prf(&sel.predicted, &sel.gold));
        report.selection_instances = Some(inst.evaluated);
        report.excluded_empty_gold = Some(inst.excluded_empty_gold);
        if let Some(rankings) = &sel.rankings {
            report.map_score = Some(mean_average_precision(rankings, &sel.gold).map);
        }
    }
    if let Some(generation) = &inputs.generation {
        if !generation.hypotheses.is_empty() {
            let h: Vec<&str> = generation.hypotheses.iter().map(String::as_str).collect();
            let r: Vec<&str> = generation.references.iter().map(String::as_str).collect();
            let g = GenerationScores::compute(&h, &r)?;
            report.bleu = Some(g.bleu);
            report.rouge1 = Some(g.rouge1);
            report.rouge2 = Some(g.rouge2);
            report.rouge_l = Some(g.rouge_l);
            report.meteor = Some(g.meteor);
            report.avg_response_length = Some(g.avg_response_length);
            report.generation_instances = Some(h.len());
        }
    }
    Ok(report)
}

impl EvalReport {
    /// Human-readable table, values in percent.
    pub fn to_table(&self) -> String {
        let mut lines = Vec::new();
        let pct = |x: f64| format!("{:6.2}", 100.0 * x);
        if let Some(d) = &self.detection {
            lines.push(format!(
                "KTD  acc {}  P {}  R {}  F {}",
                pct(d.accuracy),
                pct(d.precision),
                pct(d.recall),
                pct(d.f1)
            ));
        }
        if let Some(t) = &self.tracking {
            lines.push(format!(
                "ET   acc {}  missing {}  spurious {}",
                pct(t.accuracy),
                pct(t.missing_rate),
                pct(t.spurious_rate)
            ));
        }
        if let (Some(i), Some(s)) = (&self.instance_prf, &self.snippet_prf) {
            let map = self.map_score.map(pct).unwrap_or_else(|| "     -".into());
            lines.push(format!(
                "KS   inst P {} R {} F {} | snip P {} R {} F {} | mAP {}",
                pct(i.precision),
                pct(i.recall),
                pct(i.f1),
                pct(s.precision),
                pct(s.recall),
                pct(s.f1),
                map
            ));
        }
        if let Some(b) = self.bleu {
            lines.push(format!(
                "RG   BLEU {}  R-1 {}  R-2 {}  R-L {}  MT {}  len {:.2}",
                pct(b),
                pct(self.rouge1.unwrap_or(0.0)),
                pct(self.rouge2.unwrap_or(0.0)),
                pct(self.rouge_l.unwrap_or(0.0)),
                pct(self.meteor.unwrap_or(0.0)),
                self.avg_response_length.unwrap_or(0.0)
            ));
        }
        lines.join("\n")
    }
}
