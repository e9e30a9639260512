//! Curation reports.
//!
//! The text form has one record per line, tab-separated:
//!
//! ```text
//! webseg-report	1
//! stage	<name>	input=<n>	kept=<n>	dropped=<n>	[purity_in=<x>	purity_out=<x>]
//! image	<stage>	<image path>	tag=<t>	score=<p>	rank=<r|->	kept|dropped	[<reason>]
//! ```
//!
//! `score` is the tag probability the decision was based on and `rank` the
//! tag's 1-based position among the sorted class probabilities. Stage lines
//! precede their image lines; stages appear in execution order and images in
//! manifest order.

use std::fmt::Write;

use crate::dataset::DatasetManifest;

const REPORT_TAG: &str = "webseg-report";
const REPORT_VERSION: u32 = 1;

/// One image's fate at one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    /// Record index in the manifest.
    pub index: usize,
    pub tag: u32,
    pub score: f64,
    pub rank: Option<usize>,
    pub kept: bool,
    /// What dropped the image; empty when kept.
    pub reason: String,
}

/// Tag purity before and after a stage, measured against ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Purity {
    pub input: f64,
    pub retained: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: String,
    pub input: usize,
    pub kept: usize,
    pub dropped: usize,
    pub decisions: Vec<Decision>,
    pub purity: Option<Purity>,
}

impl StageReport {
    pub fn new(stage: impl Into<String>, decisions: Vec<Decision>) -> Self {
        let kept = decisions.iter().filter(|d| d.kept).count();
        Self {
            stage: stage.into(),
            input: decisions.len(),
            kept,
            dropped: decisions.len() - kept,
            decisions,
            purity: None,
        }
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.decisions.iter().filter(|d| d.kept).map(|d| d.index).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CurationReport {
    pub stages: Vec<StageReport>,
}

impl CurationReport {
    pub fn to_text(&self, manifest: &DatasetManifest) -> String {
        let mut out = format!("{REPORT_TAG}\t{REPORT_VERSION}\n");
        for s in &self.stages {
            write!(out, "stage\t{}\tinput={}\tkept={}\tdropped={}", s.stage, s.input, s.kept, s.dropped)
                .expect("string write");
            if let Some(p) = s.purity {
                write!(out, "\tpurity_in={:.6}\tpurity_out={:.6}", p.input, p.retained).expect("string write");
            }
            out.push('\n');
            for d in &s.decisions {
                let rank = d.rank.map_or("-".to_string(), |r| r.to_string());
                write!(
                    out,
                    "image\t{}\t{}\ttag={}\tscore={:.6}\trank={}\t{}",
                    s.stage,
                    manifest.records()[d.index].image.display(),
                    d.tag,
                    d.score,
                    rank,
                    if d.kept { "kept" } else { "dropped" }
                )
                .expect("string write");
                if !d.reason.is_empty() {
                    write!(out, "\t{}", d.reason).expect("string write");
                }
                out.push('\n');
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decision(index: usize, kept: bool) -> Decision {
        Decision {
            index,
            tag: 1,
            score: 0.5,
            rank: Some(1),
            kept,
            reason: if kept { String::new() } else { "rule-1".into() },
        }
    }

    #[test]
    fn counts_balance() {
        let r = StageReport::new("s", vec![decision(0, true), decision(1, false), decision(2, true)]);
        assert_eq!((r.input, r.kept, r.dropped), (3, 2, 1));
        assert_eq!(r.kept_indices(), vec![0, 2]);
    }
}
