//! Recall@k, exact match, and the pretraining ablation table.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{contains_answer, normalize_answer, tokenize, Chunk};
use crate::encoder::{featurize_tokens, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::finetune::QaExample;
use crate::vecindex::Retriever;

/// Per-question outcome kept in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub question: String,
    /// 1-based rank of the first answer-bearing chunk within the searched depth.
    pub first_hit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prediction: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub em: Option<f64>,
    pub skipped: usize,
    pub fingerprint: String,
    pub records: Vec<QuestionRecord>,
}

/// Fraction of questions whose top-k holds a chunk containing a gold answer,
/// for each k, plus the per-question first-hit ranks.
#[allow(clippy::too_many_arguments)]
pub fn recall_at_k(
    questions: &[QaExample],
    question_tower: &EncoderParams,
    config: &EncoderConfig,
    retriever: &dyn Retriever,
    chunks: &[Chunk],
    ks: &[usize],
    max_answer_len: usize,
) -> Result<(BTreeMap<usize, f64>, Vec<QuestionRecord>)> {
    if questions.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::invalid("ks must be non-empty and positive"));
    }
    let depth = *ks.iter().max().unwrap();
    let by_id: HashMap<u64, &Chunk> = chunks.iter().map(|c| (c.id, c)).collect();
    let records = questions
        .par_iter()
        .map(|q| {
            let h = question_tower.encode_vector(&featurize_tokens(&tokenize(&q.question), config));
            let hits = retriever.search(&h.to_f32(), depth)?;
            let first_hit = hits
                .hits
                .iter()
                .position(|hit| by_id.get(&hit.id).is_some_and(|c| contains_answer(c, &q.answers, max_answer_len)))
                .map(|p| p + 1);
            Ok(QuestionRecord {
                question: q.question.clone(),
                first_hit,
                prediction: None,
                correct: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = records.len() as f64;
    let recall = ks
        .iter()
        .map(|&k| {
            let hit = records.iter().filter(|r| r.first_hit.is_some_and(|p| p <= k)).count();
            (k, hit as f64 / n)
        })
        .collect();
    Ok((recall, records))
}

pub fn is_exact_match(prediction: &str, golds: &[String]) -> bool {
    let p = normalize_answer(prediction);
    golds.iter().any(|g| normalize_answer(g) == p)
}

/// Mean over questions of normalized equality with any gold answer.
pub fn exact_match(predictions: &[String], golds: &[Vec<String>]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::DimensionMismatch {
            expected: golds.len(),
            actual: predictions.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| is_exact_match(p, g))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Recall@k side by side for several pretraining strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub ks: Vec<usize>,
    pub rows: Vec<AblationRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    /// Percentages, aligned with `ks`.
    pub recall: Vec<f64>,
    pub report: EvalReport,
}

impl AblationTable {
    pub fn new(ks: &[usize], reports: Vec<(String, EvalReport)>) -> Result<Self> {
        let rows = reports
            .into_iter()
            .map(|(name, report)| {
                let recall = ks
                    .iter()
                    .map(|k| {
                        report
                            .recall_at
                            .get(k)
                            .map(|r| 100.0 * r)
                            .ok_or_else(|| Error::invalid(format!("report {name} lacks R@{k}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(AblationRow { name, recall, report })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { ks: ks.to_vec(), rows })
    }

    pub fn recall(&self, name: &str, k: usize) -> Option<f64> {
        let col = self.ks.iter().position(|&x| x == k)?;
        self.rows.iter().find(|r| r.name == name).map(|r| r.recall[col])
    }

    /// Fixed-width text rendering.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(8);
        let mut out = format!("{:<width$}", "strategy");
        for k in &self.ks {
            let _ = write!(out, " {:>7}", format!("R@{k}"));
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<width$}", r.name);
            for v in &r.recall {
                let _ = write!(out, " {v:>7.1}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecindex::{FlatIndex, VectorStore};

    fn qa(q: &str, a: &[&str]) -> QaExample {
        QaExample {
            question: q.into(),
            answers: a.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn exact_match_cases() {
        let g = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(exact_match(&["The Beatles".into()], &[g(&["beatles"])]).unwrap(), 1.0);
        assert_eq!(exact_match(&["".into(), "".into()], &[g(&["x"]), g(&["y"])]).unwrap(), 0.0);
        let preds = ["Paris", "london", "Rome", "Oslo"].map(String::from);
        let golds = [g(&["paris"]), g(&["Berlin"]), g(&["rome", "roma"]), g(&["Bergen"])];
        assert_eq!(exact_match(&preds, &golds).unwrap(), 0.5);
        assert!(matches!(
            exact_match(&preds[..3], &golds),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    /// Question tower with a zero projection scores every chunk 0, so ranking falls back to ids.
    fn zero_tower(cfg: &EncoderConfig) -> EncoderParams {
        EncoderParams::zeros(crate::encoder::Tower::Question, cfg)
    }

    #[test]
    fn recall_from_rank() {
        let cfg = EncoderConfig {
            n_buckets: 16,
            hidden_dim: 2,
            index_dim: 2,
            ..Default::default()
        };
        let chunks: Vec<Chunk> = (0..5u64)
            .map(|i| Chunk::from_text(i, "d", if i == 2 { "the answer is Oslo" } else { "nothing here" }))
            .collect();
        let store = VectorStore::from_rows(2, (0..5).collect(), vec![0.0; 10]).unwrap();
        let flat = FlatIndex { store: &store };
        let qs = [qa("capital of norway", &["Oslo"])];
        let (r, recs) = recall_at_k(&qs, &zero_tower(&cfg), &cfg, &flat, &chunks, &[1, 2, 5], 10).unwrap();
        assert_eq!(recs[0].first_hit, Some(3));
        assert_eq!(r[&2], 0.0);
        assert_eq!(r[&5], 1.0);

        let qs = [qa("a", &["Oslo"]), qa("b", &["Lima"])];
        let (r, _) = recall_at_k(&qs, &zero_tower(&cfg), &cfg, &flat, &chunks, &[5], 10).unwrap();
        assert_eq!(r[&5], 0.5);
        assert!(matches!(
            recall_at_k(&[], &zero_tower(&cfg), &cfg, &flat, &chunks, &[5], 10),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn ablation_table_layout() {
        let report = |r5: f64| EvalReport {
            recall_at: [(1, r5 / 2.0), (5, r5)].into_iter().collect(),
            em: None,
            skipped: 0,
            fingerprint: "f".into(),
            records: vec![],
        };
        let t = AblationTable::new(
            &[5],
            vec![("progressive".into(), report(0.52)), ("ict".into(), report(0.204))],
        )
        .unwrap();
        assert_eq!(t.recall("ict", 5), Some(20.4));
        let text = t.to_text();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().next().unwrap().ends_with("R@5"));

        let same = AblationTable::new(&[1, 5], (0..3).map(|i| (format!("r{i}"), report(0.3))).collect()).unwrap();
        assert!(same.rows.windows(2).all(|w| w[0].recall == w[1].recall));
        assert!(AblationTable::new(&[10], vec![("x".into(), report(0.1))]).is_err());
    }
}
