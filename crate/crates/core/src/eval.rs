//! Ranking metrics, benchmark reports and the data-efficiency protocol.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::TimeAwareReps;
use crate::qa::{family_metric, train_qa, Family, QaModel};
use crate::questions::{Answer, QType, Question};
use crate::tkg::{EntityId, TemporalKG, TimestampId, Vocab};
use crate::training::TrainConfig;

/// Mean reciprocal rank.
pub fn mrr(ranks: &[usize]) -> Result<f64> {
    check_ranks(ranks)?;
    Ok(ranks.iter().map(|r| 1.0 / *r as f64).sum::<f64>() / ranks.len() as f64)
}

/// Fraction of ranks `<= k`.
pub fn hits_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(ranks)?;
    if k == 0 {
        return Err(Error::config("k", "must be at least 1"));
    }
    Ok(ranks.iter().filter(|r| **r <= k).count() as f64 / ranks.len() as f64)
}

fn check_ranks(ranks: &[usize]) -> Result<()> {
    if ranks.is_empty() {
        return Err(Error::Empty("rank list"));
    }
    if ranks.contains(&0) {
        return Err(Error::format("ranks are 1-based"));
    }
    Ok(())
}

/// 1-based rank of `answer` in `scores`, ignoring the `excluded` indices.
/// Candidates with an equal score and a lower index rank ahead.
pub fn rank_of(scores: &[f64], answer: usize, excluded: &[u32]) -> Result<usize> {
    let target = *scores.get(answer).ok_or(Error::IdOutOfRange {
        kind: "candidate",
        id: answer,
        bound: scores.len(),
    })?;
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|(i, s)| *i != answer && (**s > target || (**s == target && *i < answer)))
        .filter(|(i, _)| !excluded.contains(&(*i as u32)))
        .count();
    Ok(ahead + 1)
}

/// Index of the highest score, lowest index on ties. `None` when empty.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        match best {
            Some(b) if *s <= scores[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One evaluated question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub qtype: QType,
    pub t_q: TimestampId,
    /// 1-based rank of the ground truth (EPQs only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    pub correct: bool,
    pub predicted: Answer,
    /// Some representation fell back to the base table.
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mrr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hits_at_1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hits_at_3: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hits_at_10: Option<f64>,
}

impl Aggregate {
    fn of(records: &[&QuestionRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("no records to aggregate"));
        }
        let accuracy = records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64;
        let ranks: Vec<usize> = records.iter().filter_map(|r| r.rank).collect();
        let (mrr_v, h1, h3, h10) = if ranks.len() == records.len() {
            (
                Some(mrr(&ranks)?),
                Some(hits_at_k(&ranks, 1)?),
                Some(hits_at_k(&ranks, 3)?),
                Some(hits_at_k(&ranks, 10)?),
            )
        } else {
            (None, None, None, None)
        };
        Ok(Self {
            count: records.len(),
            accuracy,
            mrr: mrr_v,
            hits_at_1: h1,
            hits_at_3: h3,
            hits_at_10: h10,
        })
    }
}

/// Benchmark results on one split. Aggregates are keyed by question type
/// (`EPQ1`, `EPQ2`, `YUQ`, `FRQ`), by `EPQ` for both EPQ types, and by
/// `overall` for the question-count-weighted accuracy over everything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub split: String,
    /// Configuration the report was produced with, as TOML.
    pub config: String,
    pub aggregates: BTreeMap<String, Aggregate>,
    pub records: Vec<QuestionRecord>,
}

impl EvalReport {
    pub fn from_records(split: &str, config: String, records: Vec<QuestionRecord>) -> Result<Self> {
        let mut aggregates = BTreeMap::new();
        let mut add = |key: &str, keep: &dyn Fn(&QuestionRecord) -> bool| -> Result<()> {
            let sel: Vec<&QuestionRecord> = records.iter().filter(|r| keep(r)).collect();
            if !sel.is_empty() {
                aggregates.insert(key.to_string(), Aggregate::of(&sel)?);
            }
            Ok(())
        };
        for qt in QType::ALL {
            add(qt.as_str(), &|r| r.qtype == qt)?;
        }
        add("EPQ", &|r| r.qtype.is_epq())?;
        add("overall", &|_| true)?;
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            split: split.to_string(),
            config,
            aggregates,
            records,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::format(format!(
                "report schema {} is not the supported version {REPORT_SCHEMA_VERSION}",
                r.schema_version
            )));
        }
        Ok(r)
    }

    fn rows(&self) -> Vec<[String; 7]> {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        self.aggregates
            .iter()
            .map(|(k, a)| {
                [
                    k.clone(),
                    a.count.to_string(),
                    opt(a.mrr),
                    opt(a.hits_at_1),
                    opt(a.hits_at_3),
                    opt(a.hits_at_10),
                    format!("{:.4}", a.accuracy),
                ]
            })
            .collect()
    }

    const HEADER: [&'static str; 7] = [
        "type", "count", "mrr", "hits@1", "hits@3", "hits@10", "accuracy",
    ];

    pub fn to_table(&self) -> String {
        let rows = self.rows();
        let mut width = Self::HEADER.map(str::len);
        for r in &rows {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: &[String]| {
            let mut s = cells
                .iter()
                .zip(width)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ");
            s.truncate(s.trim_end().len());
            s.push('\n');
            s
        };
        let mut out = format!("split: {}\n", self.split);
        out += &line(&Self::HEADER.map(String::from));
        for r in &rows {
            out += &line(r);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::HEADER.join(",") + "\n";
        for r in self.rows() {
            out += &r.join(",");
            out.push('\n');
        }
        out
    }
}

/// Other correct answers of an EPQ at its timestamp, for filtered ranking.
fn other_answers(q: &Question, kg: &TemporalKG) -> Vec<EntityId> {
    let snap = kg.snapshot(q.t_q);
    let Answer::Entity(a) = q.answer else {
        return Vec::new();
    };
    let mut out: Vec<EntityId> = match (q.qtype, q.provenance.as_slice()) {
        (QType::Epq1, [f]) => snap
            .iter()
            .filter(|x| x.s == f.s && x.r == f.r)
            .map(|x| x.o)
            .collect(),
        (QType::Epq2, [body, head]) => snap
            .iter()
            .filter(|x| x.r == body.r && x.o == body.o)
            .flat_map(|x| {
                snap.iter()
                    .filter(move |y| y.s == x.s && y.r == head.r && y.o != body.o)
            })
            .map(|y| y.o)
            .collect(),
        _ => Vec::new(),
    };
    out.retain(|e| *e != a);
    out.sort_unstable();
    out.dedup();
    out
}

#[derive(Debug, Clone, Copy)]
pub struct BenchmarkOptions<'a> {
    pub split: &'a str,
    /// Every question must satisfy `from <= t_q <= to`.
    pub timestamps: (TimestampId, TimestampId),
    /// Exclude other correct answers at `t_q` from EPQ ranks.
    pub filter: Option<&'a TemporalKG>,
}

/// Evaluate every question with the model of its family. Aborts when a
/// question lies outside the split or a representation it reads was fed
/// by facts at or after its timestamp.
pub fn run_benchmark(
    models: &BTreeMap<Family, QaModel>,
    questions: &[Question],
    reps: &TimeAwareReps,
    opts: &BenchmarkOptions<'_>,
    config: String,
) -> Result<EvalReport> {
    let (from, to) = opts.timestamps;
    for q in questions {
        if q.t_q < from || q.t_q > to {
            return Err(q.invalid(format!(
                "timestamp {} outside the {} split [{from}, {to}]",
                q.t_q, opts.split
            )));
        }
        reps.check_no_leakage(q.t_q)?;
    }
    let records = questions
        .par_iter()
        .map(|q| {
            let family = Family::of(q.qtype);
            let model = models.get(&family).ok_or_else(|| {
                Error::config("models", format!("no trained {} model", family.as_str()))
            })?;
            let p = model.predict(q, reps)?;
            let mut rank = p.rank;
            if let (Some(kg), Answer::Entity(a)) = (opts.filter, q.answer) {
                rank = Some(rank_of(&p.scores, a as usize, &other_answers(q, kg))?);
            }
            Ok(QuestionRecord {
                id: q.id.clone(),
                qtype: q.qtype,
                t_q: q.t_q,
                rank,
                correct: p.correct,
                predicted: p.predicted,
                fallback: p.fallback,
                tags: q.tags.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_records(opts.split, config, records)
}

/// Question sets of one family by split.
#[derive(Debug, Clone, Copy)]
pub struct FamilySets<'a> {
    pub train: &'a [Question],
    pub valid: &'a [Question],
    pub test: &'a [Question],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub train_questions: usize,
    /// MRR for EPQs, accuracy otherwise, on the full test set.
    pub metric: f64,
}

/// The first `ceil(fraction * n)` questions of a seeded permutation, kept in
/// their original order. Fraction 1 returns the input unchanged.
pub fn subsample(questions: &[Question], fraction: f64, seed: u64) -> Result<Vec<Question>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(
            "fractions",
            format!("{fraction} is not in (0, 1]"),
        ));
    }
    if fraction == 1.0 {
        return Ok(questions.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..questions.len()).collect();
    idx.shuffle(&mut rng);
    let k = ((fraction * questions.len() as f64).ceil() as usize)
        .max(1)
        .min(questions.len());
    let mut keep = idx[..k].to_vec();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| questions[i].clone()).collect())
}

/// Retrain one family on growing training subsets and evaluate each on the
/// fixed test set. `fractions` must be strictly increasing within (0, 1].
pub fn data_efficiency(
    family: Family,
    sets: FamilySets<'_>,
    reps: &TimeAwareReps,
    kg_vocab: &Vocab,
    cfg: &TrainConfig,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    if fractions.is_empty() {
        return Err(Error::config("fractions", "empty"));
    }
    if fractions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("fractions", "must be strictly increasing"));
    }
    let own = |qs: &[Question]| -> Vec<Question> {
        qs.iter()
            .filter(|q| Family::of(q.qtype) == family)
            .cloned()
            .collect()
    };
    let (train, test) = (own(sets.train), own(sets.test));
    if test.is_empty() {
        return Err(Error::Empty("no test questions for this family"));
    }
    let mut out = Vec::with_capacity(fractions.len());
    for f in fractions {
        let sub = subsample(&train, *f, seed)?;
        let trained = train_qa(family, &sub, sets.valid, reps, kg_vocab, cfg)?;
        let preds = test
            .par_iter()
            .map(|q| trained.model.predict(q, reps))
            .collect::<Result<Vec<_>>>()?;
        out.push(CurvePoint {
            fraction: *f,
            train_questions: sub.len(),
            metric: family_metric(family, &preds)?,
        });
    }
    Ok(out)
}

/// Number of adjacent decreases in a curve.
pub fn inversions(curve: &[CurvePoint]) -> usize {
    curve
        .windows(2)
        .filter(|w| w[1].metric < w[0].metric)
        .count()
}
