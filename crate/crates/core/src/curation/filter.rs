use rayon::prelude::*;

use super::report::{Decision, StageReport};
use crate::convnet::{train_classifier, Network, TrainSchedule};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::tensor::argsort_descending;

/// Probability at or below which rule 1 drops an image.
pub const RULE1_MAX_DROP: f64 = 0.1;
/// Rule 2 keeps an image when its tag ranks within this many top classes.
pub const RULE2_TOP: usize = 3;
/// Probability at or below which rule 3 drops an image.
pub const RULE3_MAX_DROP: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterRule {
    /// Drop when `P(tag) ≤ 0.1`.
    Implausible,
    /// Drop when the tag is outside the top three predictions.
    OutsideTopThree,
    /// Drop when `P(tag) ≤ 0.6`.
    Unconfident,
}

impl FilterRule {
    pub const CASCADE: [FilterRule; 3] = [
        FilterRule::Implausible,
        FilterRule::OutsideTopThree,
        FilterRule::Unconfident,
    ];

    pub fn number(self) -> u8 {
        match self {
            FilterRule::Implausible => 1,
            FilterRule::OutsideTopThree => 2,
            FilterRule::Unconfident => 3,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        Self::CASCADE.into_iter().find(|r| r.number() == n)
    }

    fn check(self, class_count: usize) -> Result<()> {
        if self == FilterRule::OutsideTopThree && class_count < RULE2_TOP {
            return Err(Error::config(format!(
                "rule 2 needs at least {RULE2_TOP} classes, have {class_count}"
            )));
        }
        Ok(())
    }

    /// Whether an image tagged `tag` (in `1..=K`) with class probabilities
    /// `probs` (index `i` is class `i + 1`) survives this rule.
    pub fn keeps(self, probs: &[f64], tag: u32) -> Result<bool> {
        self.check(probs.len())?;
        if tag == 0 || tag as usize > probs.len() {
            return Err(Error::usage(format!("tag {tag} outside 1..={}", probs.len())));
        }
        let p = probs[tag as usize - 1];
        Ok(match self {
            FilterRule::Implausible => p > RULE1_MAX_DROP,
            FilterRule::Unconfident => p > RULE3_MAX_DROP,
            FilterRule::OutsideTopThree => argsort_descending(probs)?[..RULE2_TOP].contains(&(tag as usize - 1)),
        })
    }
}

fn rank_of(probs: &[f64], tag: u32) -> Result<usize> {
    Ok(argsort_descending(probs)?
        .iter()
        .position(|&i| i == tag as usize - 1)
        .expect("tag in range")
        + 1)
}

/// Applies one rule with a frozen classifier. Decisions keep the input
/// order.
pub fn filter_stage(
    samples: &[Sample],
    classifier: &Network,
    rule: FilterRule,
) -> Result<(Vec<Sample>, StageReport)> {
    rule.check(classifier.class_count())?;
    let decisions: Vec<Decision> = samples
        .par_iter()
        .map(|s| {
            let probs = classifier.classify(&s.image)?;
            let kept = rule.keeps(&probs, s.tag)?;
            Ok(Decision {
                index: s.index,
                tag: s.tag,
                score: probs[s.tag as usize - 1],
                rank: Some(rank_of(&probs, s.tag)?),
                kept,
                reason: if kept { String::new() } else { format!("rule-{}", rule.number()) },
            })
        })
        .collect::<Result<_>>()?;
    let kept = samples
        .iter()
        .zip(&decisions)
        .filter(|(_, d)| d.kept)
        .map(|(s, _)| s.clone())
        .collect();
    let report = StageReport::new(format!("filter-rule-{}", rule.number()), decisions);
    Ok((kept, report))
}

/// Result of the three train-then-filter rounds.
#[derive(Debug, Clone)]
pub struct CascadeOutcome {
    pub kept: Vec<Sample>,
    /// The classifier trained in the last round, on the set rule 3 filtered.
    pub classifier: Network,
    pub stages: Vec<StageReport>,
}

/// Trains a fresh classifier from `init_seed` on the current set, then
/// filters with rule 1, 2 and 3 in turn. Every round cold-starts with the
/// same seed and schedule.
pub fn filter_cascade(
    samples: Vec<Sample>,
    class_count: usize,
    schedule: &TrainSchedule,
    init_seed: u64,
) -> Result<CascadeOutcome> {
    FilterRule::OutsideTopThree.check(class_count)?;
    let channels = samples
        .first()
        .map(|s| s.image.channels())
        .ok_or_else(|| Error::DataExhausted { stage: "filter-cascade input".into() })?;
    let mut current = samples;
    let mut stages = Vec::with_capacity(3);
    let mut classifier = None;
    for rule in FilterRule::CASCADE {
        let data: Vec<(&crate::FeatureMap, usize)> =
            current.iter().map(|s| (&s.image, s.tag as usize)).collect();
        let net = Network::reference_classifier(channels, class_count, init_seed);
        let net = train_classifier(net, &data, schedule)
            .map_err(|e| e.in_stage(&format!("train-classifier-{}", rule.number())))?;
        let (kept, report) = filter_stage(&current, &net, rule)?;
        log::info!(
            "rule {}: kept {} of {}",
            rule.number(),
            report.kept,
            report.input
        );
        stages.push(report);
        if kept.is_empty() {
            return Err(Error::DataExhausted {
                stage: format!("filter-rule-{}", rule.number()),
            });
        }
        current = kept;
        classifier = Some(net);
    }
    Ok(CascadeOutcome {
        kept: current,
        classifier: classifier.expect("three rounds ran"),
        stages,
    })
}
