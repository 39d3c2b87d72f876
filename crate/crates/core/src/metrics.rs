//! Answer scoring (EM, token F1) and search-behaviour metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::credit::StepAssessment;
use crate::transcript::Trajectory;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("evaluation set is empty")]
    EmptyEvalSet,
}

/// Lowercases, strips ASCII punctuation, drops the articles a/an/the and
/// collapses whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct.split_whitespace().filter(|w| !matches!(*w, "a" | "an" | "the")).collect::<Vec<_>>().join(" ")
}

pub fn exact_match(prediction: &str, golden: &str) -> u8 {
    u8::from(normalize_answer(prediction) == normalize_answer(golden))
}

/// Token-multiset F1 over normalized answers.
pub fn f1(prediction: &str, golden: &str) -> f64 {
    let pred = normalize_answer(prediction);
    let gold = normalize_answer(golden);
    let pred: Vec<&str> = pred.split_whitespace().collect();
    let gold: Vec<&str> = gold.split_whitespace().collect();
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    // 2PR/(P+R) with P = o/|pred|, R = o/|gold| reduces to 2o/(|pred|+|gold|)
    2.0 * overlap as f64 / (pred.len() + gold.len()) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question: String,
    pub prediction: String,
    pub golden_answer: String,
    pub f1: f64,
    pub em: u8,
    pub search_calls: usize,
    /// Correct answer and every search step high quality.
    pub perfect: u8,
    /// Incorrect answer but at least one high-quality search step.
    pub partial: u8,
}

impl EvalRecord {
    pub fn new(
        question: impl Into<String>,
        prediction: impl Into<String>,
        golden_answer: impl Into<String>,
        search_calls: usize,
        step_scores: &[u8],
    ) -> Self {
        let prediction = prediction.into();
        let golden_answer = golden_answer.into();
        let em = exact_match(&prediction, &golden_answer);
        let f1 = if em == 1 { 1.0 } else { f1(&prediction, &golden_answer) };
        let perfect = u8::from(em == 1 && step_scores.iter().all(|&s| s == 1));
        let partial = u8::from(em == 0 && step_scores.contains(&1));
        Self { question: question.into(), prediction, golden_answer, f1, em, search_calls, perfect, partial }
    }

    /// Scores an assessed trajectory; the prediction is its boxed answer, or
    /// empty when there is none.
    pub fn from_trajectory(t: &Trajectory, assessments: &[StepAssessment], golden: &str) -> Self {
        let scores: Vec<u8> = assessments.iter().map(|a| a.s).collect();
        Self::new(
            t.question.clone(),
            t.boxed_answer().unwrap_or_default(),
            golden,
            t.search_round_count(),
            &scores,
        )
    }
}

/// Mean of `F_i / max(T_i, 1)`.
pub fn search_efficiency(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyEvalSet);
    }
    let total: f64 = records.iter().map(|r| r.f1 / r.search_calls.max(1) as f64).sum();
    Ok(total / records.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchQuality {
    pub s_q: f64,
    pub perfect_rate: f64,
    pub partial_rate: f64,
}

pub fn search_quality(records: &[EvalRecord]) -> Result<SearchQuality, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyEvalSet);
    }
    let n = records.len() as f64;
    let perfect = records.iter().filter(|r| r.perfect == 1).count() as f64;
    let partial = records.iter().filter(|r| r.partial == 1).count() as f64;
    let perfect_rate = perfect / n;
    let partial_rate = partial / n;
    Ok(SearchQuality { s_q: perfect_rate + partial_rate, perfect_rate, partial_rate })
}

/// Aggregate evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub em: f64,
    pub f1: f64,
    pub s_e: f64,
    pub s_q: f64,
    pub perfect_rate: f64,
    pub partial_rate: f64,
}

pub fn evaluate(records: &[EvalRecord]) -> Result<EvalReport, MetricsError> {
    let s_e = search_efficiency(records)?;
    let quality = search_quality(records)?;
    let n = records.len() as f64;
    Ok(EvalReport {
        n: records.len(),
        em: records.iter().map(|r| f64::from(r.em)).sum::<f64>() / n,
        f1: records.iter().map(|r| r.f1).sum::<f64>() / n,
        s_e,
        s_q: quality.s_q,
        perfect_rate: quality.perfect_rate,
        partial_rate: quality.partial_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalization_cases() {
        assert_eq!(normalize_answer("Kevin McCarthy"), "kevin mccarthy");
        assert_eq!(normalize_answer("The Battle of the Little Bighorn."), "battle of little bighorn");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("  A   theatre  "), "theatre");
    }

    #[test]
    fn em_cases() {
        assert_eq!(exact_match("1876", "1876"), 1);
        assert_eq!(exact_match("kevin mccarthy", "Kevin McCarthy"), 1);
        assert_eq!(exact_match("John Derek", "Kevin McCarthy"), 0);
    }

    #[test]
    fn f1_cases() {
        assert_eq!(f1("Kevin McCarthy", "kevin mccarthy"), 1.0);
        // P = 2/3, R = 1 → 2·(2/3)/(5/3) = 0.8
        assert_eq!(f1("kevin mccarthy actor", "kevin mccarthy"), 0.8);
        assert_eq!(f1("alpha", "beta"), 0.0);
        assert_eq!(f1("", ""), 1.0);
        assert_eq!(f1("", "x"), 0.0);
        assert_eq!(f1("the", "x"), 0.0);
    }

    #[test]
    fn search_efficiency_cases() {
        let rec =
            |f1: f64, t: usize| EvalRecord { f1, search_calls: t, ..EvalRecord::new("q", "p", "g", t, &[]) };
        assert_eq!(search_efficiency(&[rec(1.0, 2)]).unwrap(), 0.5);
        assert_eq!(search_efficiency(&[rec(1.0, 2), rec(0.5, 1)]).unwrap(), 0.5);
        assert_eq!(search_efficiency(&[rec(0.6, 0)]).unwrap(), 0.6);
        assert_eq!(search_efficiency(&[]), Err(MetricsError::EmptyEvalSet));
    }

    #[test]
    fn search_quality_cases() {
        let perfect = EvalRecord::new("q", "x", "x", 1, &[1]);
        let partial = EvalRecord::new("q", "x", "y", 2, &[1, 0]);
        let q = search_quality(&[perfect, partial]).unwrap();
        assert_eq!((q.s_q, q.perfect_rate, q.partial_rate), (1.0, 0.5, 0.5));

        let failing = EvalRecord::new("q", "x", "y", 1, &[0]);
        let q = search_quality(&[failing.clone(), failing]).unwrap();
        assert_eq!((q.s_q, q.perfect_rate, q.partial_rate), (0.0, 0.0, 0.0));

        let correct_but_sloppy = EvalRecord::new("q", "x", "x", 2, &[1, 0]);
        assert_eq!((correct_but_sloppy.perfect, correct_but_sloppy.partial), (0, 0));
        assert_eq!(search_quality(&[]), Err(MetricsError::EmptyEvalSet));
    }

    proptest! {
        #[test]
        fn f1_is_symmetric_and_bounded(a in "[a-c ]{0,12}", b in "[a-c ]{0,12}") {
            let x = f1(&a, &b);
            prop_assert_eq!(x, f1(&b, &a));
            prop_assert!((0.0..=1.0).contains(&x));
            if exact_match(&a, &b) == 1 {
                prop_assert_eq!(x, 1.0);
            }
        }

        #[test]
        fn record_flags_are_exclusive(em in 0u8..2, scores in proptest::collection::vec(0u8..2, 0..5)) {
            let (p, g) = if em == 1 { ("a", "a") } else { ("a", "b") };
            let r = EvalRecord::new("q", p, g, scores.len(), &scores);
            prop_assert!(!(r.perfect == 1 && r.partial == 1));
        }
    }
}
