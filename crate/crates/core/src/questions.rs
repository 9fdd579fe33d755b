//! Question templates and generation of the four question types.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tkg::{EntityId, Quadruple, RelationId, TemporalKG, TimestampId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QType {
    #[serde(rename = "EPQ1")]
    Epq1,
    #[serde(rename = "EPQ2")]
    Epq2,
    #[serde(rename = "YUQ")]
    Yuq,
    #[serde(rename = "FRQ")]
    Frq,
}

impl QType {
    pub const ALL: [QType; 4] = [QType::Epq1, QType::Epq2, QType::Yuq, QType::Frq];

    pub fn as_str(&self) -> &'static str {
        match self {
            QType::Epq1 => "EPQ1",
            QType::Epq2 => "EPQ2",
            QType::Yuq => "YUQ",
            QType::Frq => "FRQ",
        }
    }

    pub fn is_epq(&self) -> bool {
        matches!(self, QType::Epq1 | QType::Epq2)
    }
}

impl fmt::Display for QType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum YesUnknown {
    Yes,
    Unknown,
}

impl YesUnknown {
    pub fn as_str(&self) -> &'static str {
        match self {
            YesUnknown::Yes => "yes",
            YesUnknown::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Entity(EntityId),
    YesUnknown(YesUnknown),
    Choice(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub text: String,
    pub fact: Quadruple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub qtype: QType,
    pub text: String,
    /// Annotated entities: `[s_q]` for EPQs, `[s_q, o_q]` for YUQs and FRQs.
    pub entities: Vec<EntityId>,
    pub t_q: TimestampId,
    pub answer: Answer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<Choice>>,
    pub provenance: Vec<Quadruple>,
    /// For unknown YUQs, the perturbed quadruple the question asks about.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbed: Option<Quadruple>,
    /// `choices[i]` is the `shuffle_perm[i]`-th choice in score order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shuffle_perm: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

impl Question {
    pub fn subject(&self) -> Result<EntityId> {
        self.entities
            .first()
            .copied()
            .ok_or_else(|| self.invalid("no annotated subject"))
    }

    pub fn object(&self) -> Result<EntityId> {
        self.entities
            .get(1)
            .copied()
            .ok_or_else(|| self.invalid("no annotated object"))
    }

    pub fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::Question {
            id: self.id.clone(),
            reason: reason.into(),
        }
    }
}

/// Template slot kinds in the templates file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Slot {
    Epq1,
    Yuq,
    Frq,
    Choice,
}

/// Natural-language patterns per relation (and per relation pair for 2-hop
/// questions). Slots: `{s_q} {o_q} {t_q}` and `{s_c} {o_c} {t_c}`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TemplateSet {
    single: BTreeMap<(RelationId, Slot), String>,
    two_hop: BTreeMap<(RelationId, RelationId), String>,
}

/// Third-person singular of the first word of a verb phrase.
pub fn third_person(phrase: &str) -> String {
    let (verb, rest) = match phrase.split_once(' ') {
        Some((v, r)) => (v, Some(r)),
        None => (phrase, None),
    };
    let inflected = match verb {
        "be" => "is".to_string(),
        "have" => "has".to_string(),
        v if ["s", "sh", "ch", "x", "z", "o"]
            .iter()
            .any(|e| v.ends_with(e)) =>
        {
            format!("{v}es")
        }
        v if v.ends_with('y') && !v.ends_with("ay") && !v.ends_with("ey") && !v.ends_with("oy") => {
            format!("{}ies", &v[..v.len() - 1])
        }
        v => format!("{v}s"),
    };
    match rest {
        Some(r) => format!("{inflected} {r}"),
        None => inflected,
    }
}

impl TemplateSet {
    /// Standard patterns from relation phrases in base verb form. Relations
    /// in `excluded` get no template.
    pub fn from_relation_phrases(phrases: &[String], excluded: &[RelationId]) -> Self {
        let mut set = Self::default();
        for (r, p) in phrases.iter().enumerate() {
            let r = r as RelationId;
            if excluded.contains(&r) {
                continue;
            }
            set.single
                .insert((r, Slot::Epq1), format!("Who will {{s_q}} {p} on {{t_q}}?"));
            set.single.insert(
                (r, Slot::Yuq),
                format!("Will {{s_q}} {p} {{o_q}} on {{t_q}}?"),
            );
            set.single.insert(
                (r, Slot::Frq),
                format!("Why will {{s_q}} {p} {{o_q}} on {{t_q}}?"),
            );
            set.single
                .insert((r, Slot::Choice), format!("{{s_c}} {p} {{o_c}} on {{t_c}}"));
        }
        set
    }

    /// Add a 2-hop pattern for the rule `(X, r1, m) => (X, r2, n)`.
    pub fn add_two_hop(
        &mut self,
        r1: RelationId,
        r2: RelationId,
        phrases: &[String],
    ) -> Result<()> {
        let p1 = phrases.get(r1 as usize).ok_or(Error::IdOutOfRange {
            kind: "relation",
            id: r1 as usize,
            bound: phrases.len(),
        })?;
        let p2 = phrases.get(r2 as usize).ok_or(Error::IdOutOfRange {
            kind: "relation",
            id: r2 as usize,
            bound: phrases.len(),
        })?;
        self.two_hop.insert(
            (r1, r2),
            format!(
                "Who will a country {p2}, while this country {} {{s_q}} on {{t_q}}?",
                third_person(p1)
            ),
        );
        Ok(())
    }

    pub fn has_relation(&self, r: RelationId) -> bool {
        self.single.contains_key(&(r, Slot::Epq1))
    }

    fn pattern(&self, r: RelationId, slot: Slot) -> Option<&str> {
        self.single.get(&(r, slot)).map(String::as_str)
    }

    pub fn two_hop_pattern(&self, r1: RelationId, r2: RelationId) -> Option<&str> {
        self.two_hop.get(&(r1, r2)).map(String::as_str)
    }

    /// TSV rows `relation_id<TAB>kind<TAB>pattern`; 2-hop rows use `r1,r2` as
    /// the id and `EPQ2` as the kind.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for ((r, slot), p) in &self.single {
            let kind = match slot {
                Slot::Epq1 => "EPQ1",
                Slot::Yuq => "YUQ",
                Slot::Frq => "FRQ",
                Slot::Choice => "CHOICE",
            };
            writeln!(w, "{r}\t{kind}\t{p}")?;
        }
        for ((r1, r2), p) in &self.two_hop {
            writeln!(w, "{r1},{r2}\tEPQ2\t{p}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut set = Self::default();
        for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: &str| Error::MalformedRow {
                row: i + 1,
                reason: reason.to_string(),
            };
            let mut parts = line.splitn(3, '\t');
            let (id, kind, pattern) = match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), Some(c)) if !c.is_empty() => (a, b, c.to_string()),
                _ => return Err(bad("expected relation_id, kind and pattern")),
            };
            let rel = |s: &str| {
                s.trim()
                    .parse::<RelationId>()
                    .map_err(|_| bad("bad relation id"))
            };
            if kind == "EPQ2" {
                let (a, b) = id
                    .split_once(',')
                    .ok_or_else(|| bad("EPQ2 id must be r1,r2"))?;
                set.two_hop.insert((rel(a)?, rel(b)?), pattern);
                continue;
            }
            let slot = match kind {
                "EPQ1" => Slot::Epq1,
                "YUQ" => Slot::Yuq,
                "FRQ" => Slot::Frq,
                "CHOICE" => Slot::Choice,
                _ => return Err(bad("unknown template kind")),
            };
            set.single.insert((rel(id)?, slot), pattern);
        }
        Ok(set)
    }
}

/// Names of entities and dates for slot filling.
pub struct Fill<'a> {
    pub vocab: &'a Vocab,
}

impl Fill<'_> {
    fn question(&self, pattern: &str, s: EntityId, o: Option<EntityId>, t: TimestampId) -> String {
        let mut text = pattern
            .replace("{s_q}", self.vocab.entity(s))
            .replace("{t_q}", &self.vocab.date_label(t));
        if let Some(o) = o {
            text = text.replace("{o_q}", self.vocab.entity(o));
        }
        text
    }

    fn choice(&self, pattern: &str, f: &Quadruple) -> String {
        pattern
            .replace("{s_c}", self.vocab.entity(f.s))
            .replace("{o_c}", self.vocab.entity(f.o))
            .replace("{t_c}", &self.vocab.date_label(f.t))
    }
}

fn question_id(prefix: &str, qtype: QType, i: usize) -> String {
    format!("{prefix}-{}-{i:06}", qtype.as_str().to_lowercase())
}

#[derive(Debug, Clone, Default)]
pub struct Generated {
    pub questions: Vec<Question>,
    /// Source facts or groundings that produced no question.
    pub skipped: usize,
}

/// One 1-hop EPQ per fact whose relation has a template.
pub fn gen_1hop(
    kg: &TemporalKG,
    vocab: &Vocab,
    templates: &TemplateSet,
    prefix: &str,
) -> Generated {
    let fill = Fill { vocab };
    let mut out = Generated::default();
    for q in kg.quads() {
        let Some(p) = templates.pattern(q.r, Slot::Epq1) else {
            out.skipped += 1;
            continue;
        };
        out.questions.push(Question {
            id: question_id(prefix, QType::Epq1, out.questions.len()),
            qtype: QType::Epq1,
            text: fill.question(p, q.s, None, q.t),
            entities: vec![q.s],
            t_q: q.t,
            answer: Answer::Entity(q.o),
            choices: None,
            provenance: vec![*q],
            perturbed: None,
            shuffle_perm: None,
            tags: Vec::new(),
        });
    }
    out
}

/// `(X, r1, m) => (X, r2, n)` mined on one snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoHopRule {
    pub r1: RelationId,
    pub r2: RelationId,
    pub t: TimestampId,
    /// Distinct body groundings `(X, m)`.
    pub body: usize,
    /// Body groundings with some `(X, r2, n)`, `n != m`.
    pub support: usize,
    pub confidence: f64,
}

/// Rules with confidence strictly above `min_conf`, ordered by `(r1, r2)`.
/// `snapshot` must hold facts of a single timestamp.
pub fn mine_2hop_rules(snapshot: &[Quadruple], min_conf: f64) -> Result<Vec<TwoHopRule>> {
    if !(min_conf > 0.0 && min_conf <= 1.0) {
        return Err(Error::config("min_conf", "must lie in (0, 1]"));
    }
    let Some(t) = snapshot.first().map(|q| q.t) else {
        return Ok(Vec::new());
    };
    // (X, r) -> set of objects
    let mut objects: BTreeMap<(EntityId, RelationId), BTreeSet<EntityId>> = BTreeMap::new();
    for q in snapshot {
        objects.entry((q.s, q.r)).or_default().insert(q.o);
    }
    let relations: BTreeSet<RelationId> = snapshot.iter().map(|q| q.r).collect();
    let mut rules = Vec::new();
    for &r1 in &relations {
        for &r2 in &relations {
            let mut body = 0;
            let mut support = 0;
            for ((x, r), ms) in objects.range((0, r1)..) {
                if *r != r1 {
                    continue;
                }
                let heads = objects.get(&(*x, r2));
                for m in ms {
                    body += 1;
                    if heads.is_some_and(|ns| ns.iter().any(|n| n != m)) {
                        support += 1;
                    }
                }
            }
            if body == 0 {
                continue;
            }
            let confidence = support as f64 / body as f64;
            if confidence > min_conf {
                rules.push(TwoHopRule {
                    r1,
                    r2,
                    t,
                    body,
                    support,
                    confidence,
                });
            }
        }
    }
    Ok(rules)
}

/// Distinct `(r1, r2)` pairs mined on any snapshot of `kg`.
pub fn mine_rule_pairs(kg: &TemporalKG, min_conf: f64) -> Result<Vec<(RelationId, RelationId)>> {
    let mut pairs = BTreeSet::new();
    for t in 0..kg.num_timestamps() as TimestampId {
        for rule in mine_2hop_rules(kg.snapshot(t), min_conf)? {
            pairs.insert((rule.r1, rule.r2));
        }
    }
    Ok(pairs.into_iter().collect())
}

/// Rule allowlist: one `r1<TAB>r2` pair per line, `#` comments.
pub fn read_rule_allowlist(path: &Path) -> Result<Vec<(RelationId, RelationId)>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse = || -> Option<(RelationId, RelationId)> {
            let (a, b) = line.split_once('\t')?;
            Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
        };
        out.push(parse().ok_or_else(|| Error::MalformedRow {
            row: i + 1,
            reason: "expected r1<TAB>r2".into(),
        })?);
    }
    Ok(out)
}

pub fn write_rule_pairs(path: &Path, pairs: &[(RelationId, RelationId)]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (a, b) in pairs {
        writeln!(w, "{a}\t{b}")?;
    }
    w.flush()?;
    Ok(())
}

/// One 2-hop EPQ per distinct grounding `(X, r1, m, t), (X, r2, n, t)` with
/// `n != m`. The anchor `m` is annotated and `n` is the answer.
pub fn ground_2hop(
    kg: &TemporalKG,
    rules: &[(RelationId, RelationId)],
    vocab: &Vocab,
    templates: &TemplateSet,
    prefix: &str,
) -> Generated {
    let fill = Fill { vocab };
    let mut out = Generated::default();
    let mut seen = HashSet::new();
    for t in 0..kg.num_timestamps() as TimestampId {
        let snap = kg.snapshot(t);
        for &(r1, r2) in rules {
            for body in snap.iter().filter(|q| q.r == r1) {
                for head in snap.iter().filter(|q| q.r == r2 && q.s == body.s) {
                    if head.o == body.o {
                        out.skipped += 1;
                        continue;
                    }
                    if !seen.insert((t, r1, r2, body.o, head.o)) {
                        continue;
                    }
                    let Some(p) = templates.two_hop_pattern(r1, r2) else {
                        out.skipped += 1;
                        continue;
                    };
                    out.questions.push(Question {
                        id: question_id(prefix, QType::Epq2, out.questions.len()),
                        qtype: QType::Epq2,
                        text: fill.question(p, body.o, None, t),
                        entities: vec![body.o],
                        t_q: t,
                        answer: Answer::Entity(head.o),
                        choices: None,
                        provenance: vec![*body, *head],
                        perturbed: None,
                        shuffle_perm: None,
                        tags: Vec::new(),
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct YuqConfig {
    pub true_fraction: f64,
    pub max_tries: usize,
    pub seed: u64,
}

impl Default for YuqConfig {
    fn default() -> Self {
        Self {
            true_fraction: 0.25,
            max_tries: 1000,
            seed: 0,
        }
    }
}

/// Yes questions from `round(true_fraction * n)` facts of `kg`; every other
/// fact has its subject, object or relation resampled until the quadruple is
/// absent from `full_kg`.
pub fn gen_yuq(
    kg: &TemporalKG,
    full_kg: &TemporalKG,
    vocab: &Vocab,
    templates: &TemplateSet,
    cfg: &YuqConfig,
    prefix: &str,
) -> Result<Generated> {
    if !(cfg.true_fraction > 0.0 && cfg.true_fraction < 1.0) {
        return Err(Error::config("true_fraction", "must lie in (0, 1)"));
    }
    let fill = Fill { vocab };
    let mut out = Generated::default();
    let eligible: Vec<Quadruple> = kg
        .quads()
        .iter()
        .filter(|q| templates.pattern(q.r, Slot::Yuq).is_some())
        .copied()
        .collect();
    out.skipped += kg.len() - eligible.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(31);
    let n_true = (cfg.true_fraction * eligible.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..eligible.len()).collect();
    order.shuffle(&mut rng);
    let mut is_true = vec![false; eligible.len()];
    for &i in &order[..n_true] {
        is_true[i] = true;
    }
    let ne = full_kg.num_entities() as EntityId;
    let nr = full_kg.num_relations() as RelationId;
    for (i, fact) in eligible.iter().enumerate() {
        let (asked, answer) = if is_true[i] {
            (*fact, YesUnknown::Yes)
        } else {
            let mut found = None;
            for _ in 0..cfg.max_tries {
                let mut p = *fact;
                match rng.random_range(0..3u8) {
                    0 => p.s = rng.random_range(0..ne),
                    1 => p.o = rng.random_range(0..ne),
                    _ => p.r = rng.random_range(0..nr),
                }
                if !full_kg.contains(&p) && templates.pattern(p.r, Slot::Yuq).is_some() {
                    found = Some(p);
                    break;
                }
            }
            match found {
                Some(p) => (p, YesUnknown::Unknown),
                None => {
                    out.skipped += 1;
                    continue;
                }
            }
        };
        let pattern = templates
            .pattern(asked.r, Slot::Yuq)
            .expect("checked above");
        out.questions.push(Question {
            id: question_id(prefix, QType::Yuq, out.questions.len()),
            qtype: QType::Yuq,
            text: fill.question(pattern, asked.s, Some(asked.o), asked.t),
            entities: vec![asked.s, asked.o],
            t_q: asked.t,
            answer: Answer::YesUnknown(answer),
            choices: None,
            provenance: vec![*fact],
            perturbed: (answer == YesUnknown::Unknown).then_some(asked),
            shuffle_perm: None,
            tags: Vec::new(),
        });
    }
    Ok(out)
}

/// Relevance of a prior fact to a target fact.
pub trait ContributionScorer {
    fn score(&self, target: &Quadruple, prior: &Quadruple) -> f64;
}

/// `λ_t exp(-(t - t_f)) + λ_e |{s,o} ∩ {s_f,o_f}| + λ_r [r_f => r]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeuristicScorer {
    pub lambda_t: f64,
    pub lambda_e: f64,
    pub lambda_r: f64,
    /// Directed pairs `(r_f, r)`.
    pub rule_pairs: BTreeSet<(RelationId, RelationId)>,
}

impl Default for HeuristicScorer {
    fn default() -> Self {
        Self {
            lambda_t: 1.0,
            lambda_e: 1.0,
            lambda_r: 2.0,
            rule_pairs: BTreeSet::new(),
        }
    }
}

impl ContributionScorer for HeuristicScorer {
    fn score(&self, target: &Quadruple, prior: &Quadruple) -> f64 {
        let dt = target.t as f64 - prior.t as f64;
        let ends: BTreeSet<EntityId> = [target.s, target.o].into();
        let shared = [prior.s, prior.o]
            .iter()
            .collect::<BTreeSet<_>>()
            .iter()
            .filter(|e| ends.contains(e))
            .count();
        let rule = self.rule_pairs.contains(&(prior.r, target.r));
        self.lambda_t * (-dt).exp()
            + self.lambda_e * shared as f64
            + if rule { self.lambda_r } else { 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrqConfig {
    /// Prior facts within this many timestamps before the target are candidates.
    pub horizon: usize,
    pub seed: u64,
}

impl Default for FrqConfig {
    fn default() -> Self {
        Self {
            horizon: 4,
            seed: 0,
        }
    }
}

/// Counts of FRQ candidates dropped by each rule.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrqSkips {
    pub too_few_priors: usize,
    pub same_fact: usize,
    pub tied_top: usize,
    pub no_template: usize,
}

/// Positions (in descending score order) of the Answer, Hard Negative,
/// Median and Negative choices among `n >= 4` scored facts.
pub fn choice_positions(n: usize) -> [usize; 4] {
    // lower median of the ascending order, expressed as a descending index
    let median = n - 1 - (n - 1) / 2;
    [0, 1, median, n - 1]
}

/// FRQs for each fact of `kg` with at least four related prior facts in
/// `history` (facts sharing an endpoint within the horizon).
pub fn gen_frq(
    kg: &TemporalKG,
    history: &TemporalKG,
    scorer: &dyn ContributionScorer,
    vocab: &Vocab,
    templates: &TemplateSet,
    cfg: &FrqConfig,
    prefix: &str,
) -> (Generated, FrqSkips) {
    let fill = Fill { vocab };
    let mut out = Generated::default();
    let mut skips = FrqSkips::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(41);
    for target in kg.quads() {
        let (Some(qp), Some(cp)) = (
            templates.pattern(target.r, Slot::Frq),
            templates.pattern(target.r, Slot::Choice),
        ) else {
            skips.no_template += 1;
            continue;
        };
        let from = (target.t as usize).saturating_sub(cfg.horizon) as TimestampId;
        let mut scored: Vec<(f64, Quadruple)> = history
            .time_range(from, target.t)
            .quads()
            .iter()
            .filter(|f| [f.s, f.o].iter().any(|e| *e == target.s || *e == target.o))
            .map(|f| (scorer.score(target, f), *f))
            .collect();
        if scored.len() < 4 {
            skips.too_few_priors += 1;
            continue;
        }
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.time_key().cmp(&b.1.time_key()))
        });
        if scored[0].0 == scored[1].0 {
            skips.tied_top += 1;
            continue;
        }
        let top = scored[0].1;
        if top.triple() == target.triple() {
            skips.same_fact += 1;
            continue;
        }
        let picked: Vec<Quadruple> = choice_positions(scored.len())
            .iter()
            .map(|i| scored[*i].1)
            .collect();
        // Choices use the choice template of their own relation when present.
        let mut ok = true;
        let ranked: Vec<Choice> = picked
            .iter()
            .map(|f| {
                let p = templates.pattern(f.r, Slot::Choice).unwrap_or_else(|| {
                    ok = false;
                    cp
                });
                Choice {
                    text: fill.choice(p, f),
                    fact: *f,
                }
            })
            .collect();
        if !ok {
            skips.no_template += 1;
            continue;
        }
        let mut perm: Vec<usize> = (0..4).collect();
        perm.shuffle(&mut rng);
        let choices: Vec<Choice> = perm.iter().map(|i| ranked[*i].clone()).collect();
        let answer = perm.iter().position(|i| *i == 0).expect("perm contains 0");
        out.questions.push(Question {
            id: question_id(prefix, QType::Frq, out.questions.len()),
            qtype: QType::Frq,
            text: fill.question(qp, target.s, Some(target.o), target.t),
            entities: vec![target.s, target.o],
            t_q: target.t,
            answer: Answer::Choice(answer),
            choices: Some(choices),
            provenance: vec![*target],
            perturbed: None,
            shuffle_perm: Some(perm),
            tags: vec!["machine-ranked".into()],
        });
    }
    out.skipped = skips.too_few_priors + skips.same_fact + skips.tied_top + skips.no_template;
    (out, skips)
}

/// Whether the Answer is the only choice whose fact has both annotated
/// question entities as its endpoints.
pub fn answer_uniquely_shares_entities(q: &Question) -> bool {
    let (Answer::Choice(a), Some(choices), [s, o, ..]) =
        (q.answer, q.choices.as_ref(), q.entities.as_slice())
    else {
        return false;
    };
    let both = |f: &Quadruple| [f.s, f.o].contains(s) && [f.s, f.o].contains(o);
    choices
        .iter()
        .enumerate()
        .all(|(i, c)| both(&c.fact) == (i == a))
}

pub fn write_questions(path: &Path, questions: &[Question]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for q in questions {
        serde_json::to_writer(&mut w, q)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_questions(path: &Path) -> Result<Vec<Question>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::MalformedRow {
                row: i + 1,
                reason: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

impl FromStr for QType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QType::ALL
            .into_iter()
            .find(|q| q.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::format(format!("unknown question type `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn vocab(entities: &[&str], relations: &[&str], start: (i32, u32, u32), days: usize) -> Vocab {
        let d0 = NaiveDate::from_ymd_opt(start.0, start.1, start.2).unwrap();
        Vocab::new(
            entities.iter().map(|s| s.to_string()).collect(),
            relations.iter().map(|s| s.to_string()).collect(),
            d0.iter_days().take(days).collect(),
        )
        .unwrap()
    }

    #[test]
    fn worked_examples() {
        let v = vocab(
            &[
                "Sudan",
                "Ramtane Lamamra",
                "Germany",
                "United States",
                "Iran",
                "Israel",
            ],
            &["host", "accuse", "engage in diplomatic cooperation with"],
            (2021, 8, 1),
            2,
        );
        let mut tpl = TemplateSet::from_relation_phrases(&v.relation_names, &[]);
        tpl.add_two_hop(1, 2, &v.relation_names).unwrap();
        let kg = TemporalKG::new(
            vec![
                Quadruple::new(0, 0, 1, 0),
                Quadruple::new(3, 1, 4, 1),
                Quadruple::new(3, 2, 5, 1),
            ],
            6,
            3,
            2,
        )
        .unwrap();
        let one = gen_1hop(&kg.time_range(0, 1), &v, &tpl, "test");
        assert_eq!(one.questions[0].text, "Who will Sudan host on 2021-08-01?");
        assert_eq!(one.questions[0].answer, Answer::Entity(1));
        let two = ground_2hop(&kg, &[(1, 2)], &v, &tpl, "test");
        assert_eq!(two.questions.len(), 1);
        assert_eq!(
            two.questions[0].text,
            "Who will a country engage in diplomatic cooperation with, while this country accuses Iran on 2021-08-02?"
        );
        assert_eq!(two.questions[0].entities, vec![4]);
        assert_eq!(two.questions[0].answer, Answer::Entity(5));
        let fill = Fill { vocab: &v };
        let p = tpl.pattern(0, Slot::Yuq).unwrap();
        assert_eq!(
            fill.question(p, 0, Some(1), 0),
            "Will Sudan host Ramtane Lamamra on 2021-08-01?"
        );
        assert_eq!(
            fill.question(p, 2, Some(1), 0),
            "Will Germany host Ramtane Lamamra on 2021-08-01?"
        );
    }

    #[test]
    fn third_person_forms() {
        assert_eq!(third_person("accuse"), "accuses");
        assert_eq!(
            third_person("criticize or denounce"),
            "criticizes or denounce"
        );
        assert_eq!(
            third_person("express intent to meet"),
            "expresses intent to meet"
        );
        assert_eq!(third_person("deny"), "denies");
        assert_eq!(third_person("play"), "plays");
        assert_eq!(third_person("have talks with"), "has talks with");
    }

    #[test]
    fn missing_template_is_skipped() {
        let v = vocab(&["a", "b"], &["host", "assassinate"], (2021, 1, 1), 1);
        let tpl = TemplateSet::from_relation_phrases(&v.relation_names, &[1]);
        let kg = TemporalKG::new(
            vec![Quadruple::new(0, 0, 1, 0), Quadruple::new(0, 1, 1, 0)],
            2,
            2,
            1,
        )
        .unwrap();
        let g = gen_1hop(&kg, &v, &tpl, "x");
        assert_eq!(g.questions.len(), 1);
        assert_eq!(g.skipped, 1);
    }

    #[test]
    fn rule_confidence_counts() {
        // X=0 has r0 to 1,2,3,4 (4 body groundings); r1 to 1 only,
        // so support needs n != m: m=2,3,4 qualify -> 3/4
        let snap: Vec<Quadruple> = (1..=4)
            .map(|m| Quadruple::new(0, 0, m, 0))
            .chain([Quadruple::new(0, 1, 1, 0)])
            .collect();
        let rules = mine_2hop_rules(&snap, 0.5).unwrap();
        let r = rules.iter().find(|r| r.r1 == 0 && r.r2 == 1).unwrap();
        assert_eq!((r.body, r.support), (4, 3));
        // X=0,5 with two bodies each, only X=0 has the head: 2/4, dropped at 0.5
        let snap = vec![
            Quadruple::new(0, 0, 1, 0),
            Quadruple::new(0, 0, 2, 0),
            Quadruple::new(5, 0, 1, 0),
            Quadruple::new(5, 0, 2, 0),
            Quadruple::new(0, 1, 3, 0),
        ];
        let rules = mine_2hop_rules(&snap, 0.5).unwrap();
        assert!(!rules.iter().any(|r| r.r1 == 0 && r.r2 == 1));
        let rules = mine_2hop_rules(&snap, 0.4).unwrap();
        assert_eq!(
            rules
                .iter()
                .find(|r| r.r1 == 0 && r.r2 == 1)
                .unwrap()
                .confidence,
            0.5
        );
        assert!(mine_2hop_rules(&snap, 0.0).is_err());
    }

    #[test]
    fn perfect_rule() {
        let snap = vec![
            Quadruple::new(0, 0, 1, 3),
            Quadruple::new(0, 1, 2, 3),
            Quadruple::new(4, 0, 5, 3),
            Quadruple::new(4, 1, 6, 3),
        ];
        let rules = mine_2hop_rules(&snap, 0.5).unwrap();
        let r = rules.iter().find(|r| r.r1 == 0 && r.r2 == 1).unwrap();
        assert_eq!(r.confidence, 1.0);
        assert_eq!(r.t, 3);
    }

    #[test]
    fn frq_choice_selection() {
        struct Fixed(BTreeMap<Quadruple, f64>);
        impl ContributionScorer for Fixed {
            fn score(&self, _: &Quadruple, prior: &Quadruple) -> f64 {
                self.0[prior]
            }
        }
        let v = vocab(
            &["a", "b", "c", "d", "e"],
            &["meet", "visit", "praise"],
            (2021, 1, 1),
            4,
        );
        let tpl = TemplateSet::from_relation_phrases(&v.relation_names, &[]);
        let priors = [
            Quadruple::new(0, 0, 2, 2),
            Quadruple::new(0, 2, 3, 2),
            Quadruple::new(1, 0, 4, 1),
            Quadruple::new(2, 2, 1, 1),
            Quadruple::new(0, 2, 4, 0),
        ];
        let scores = Fixed(
            priors
                .iter()
                .copied()
                .zip([9.0, 7.0, 5.0, 3.0, 1.0])
                .collect(),
        );
        let target = Quadruple::new(0, 1, 1, 3);
        let all: Vec<Quadruple> = priors.iter().copied().chain([target]).collect();
        let history = TemporalKG::new(all, 5, 3, 4).unwrap();
        let kg = history.time_range(3, 4);
        let (g, _) = gen_frq(&kg, &history, &scores, &v, &tpl, &FrqConfig::default(), "t");
        let q = &g.questions[0];
        let choices = q.choices.as_ref().unwrap();
        let got: BTreeSet<Quadruple> = choices.iter().map(|c| c.fact).collect();
        let want: BTreeSet<Quadruple> = [priors[0], priors[1], priors[2], priors[4]].into();
        assert_eq!(got, want);
        let Answer::Choice(i) = q.answer else {
            panic!()
        };
        assert_eq!(choices[i].fact, priors[0]);
        let perm = q.shuffle_perm.as_ref().unwrap();
        assert_eq!(perm[i], 0);
        assert_eq!(choices[i].text, "a meet c on 2021-01-03");
        assert_eq!(q.text, "Why will a visit b on 2021-01-04?");
        assert_eq!(q.tags, vec!["machine-ranked".to_string()]);
    }

    #[test]
    fn frq_filters_repeated_fact() {
        let v = vocab(&["a", "b", "c"], &["meet", "visit"], (2021, 1, 1), 5);
        let tpl = TemplateSet::from_relation_phrases(&v.relation_names, &[]);
        let quads = vec![
            Quadruple::new(0, 1, 1, 3),
            Quadruple::new(0, 0, 2, 1),
            Quadruple::new(2, 0, 1, 1),
            Quadruple::new(2, 0, 0, 0),
            Quadruple::new(0, 1, 1, 4),
        ];
        let kg = TemporalKG::new(quads, 3, 2, 5).unwrap();
        let (g, skips) = gen_frq(
            &kg.time_range(4, 5),
            &kg,
            &HeuristicScorer::default(),
            &v,
            &tpl,
            &FrqConfig::default(),
            "t",
        );
        assert!(g.questions.is_empty());
        assert_eq!(skips.same_fact, 1);
    }

    #[test]
    fn unique_sharing_filter() {
        let choice = |s, o| Choice {
            text: String::new(),
            fact: Quadruple::new(s, 0, o, 0),
        };
        let mut q = Question {
            id: "f".into(),
            qtype: QType::Frq,
            text: String::new(),
            entities: vec![0, 1],
            t_q: 1,
            answer: Answer::Choice(2),
            choices: Some(vec![choice(0, 2), choice(3, 1), choice(1, 0), choice(0, 0)]),
            provenance: Vec::new(),
            perturbed: None,
            shuffle_perm: None,
            tags: Vec::new(),
        };
        assert!(answer_uniquely_shares_entities(&q));
        q.answer = Answer::Choice(0);
        assert!(!answer_uniquely_shares_entities(&q));
        q.answer = Answer::Choice(2);
        q.choices.as_mut().unwrap()[3] = choice(0, 1);
        assert!(!answer_uniquely_shares_entities(&q));
        q.entities.truncate(1);
        assert!(!answer_uniquely_shares_entities(&q));
    }

    #[test]
    fn median_positions() {
        assert_eq!(choice_positions(4), [0, 1, 2, 3]);
        assert_eq!(choice_positions(5), [0, 1, 2, 4]);
        assert_eq!(choice_positions(6), [0, 1, 3, 5]);
    }

    #[test]
    fn yuq_balance_and_absence() {
        let ne = 50;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let quads: Vec<Quadruple> = (0..12_000)
            .map(|_| {
                Quadruple::new(
                    rng.random_range(0..ne),
                    rng.random_range(0..4),
                    rng.random_range(0..ne),
                    rng.random_range(0..20),
                )
            })
            .collect();
        let kg = TemporalKG::new(quads, ne as usize, 4, 20).unwrap();
        let names: Vec<String> = (0..ne).map(|i| format!("e{i}")).collect();
        let v = Vocab::new(
            names,
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            NaiveDate::from_ymd_opt(2021, 1, 1)
                .unwrap()
                .iter_days()
                .take(20)
                .collect(),
        )
        .unwrap();
        let tpl = TemplateSet::from_relation_phrases(&v.relation_names, &[]);
        let g = gen_yuq(&kg, &kg, &v, &tpl, &YuqConfig::default(), "t").unwrap();
        let yes = g
            .questions
            .iter()
            .filter(|q| q.answer == Answer::YesUnknown(YesUnknown::Yes))
            .count();
        let frac = yes as f64 / g.questions.len() as f64;
        assert!((frac - 0.25).abs() <= 0.01, "{frac}");
        for q in &g.questions {
            match q.answer {
                Answer::YesUnknown(YesUnknown::Unknown) => {
                    let p = q.perturbed.unwrap();
                    assert!(!kg.contains(&p));
                    let src = q.provenance[0];
                    let changed =
                        (p.s != src.s) as u8 + (p.o != src.o) as u8 + (p.r != src.r) as u8;
                    assert_eq!(changed, 1);
                    assert_eq!(p.t, src.t);
                }
                _ => assert!(q.perturbed.is_none()),
            }
        }
        let again = gen_yuq(&kg, &kg, &v, &tpl, &YuqConfig::default(), "t").unwrap();
        assert_eq!(again.questions, g.questions);
        assert!(gen_yuq(
            &kg,
            &kg,
            &v,
            &tpl,
            &YuqConfig {
                true_fraction: 1.0,
                ..Default::default()
            },
            "t"
        )
        .is_err());
    }

    #[test]
    fn io_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let v = vocab(&["a", "b"], &["meet", "visit"], (2021, 1, 1), 1);
        let mut tpl = TemplateSet::from_relation_phrases(&v.relation_names, &[]);
        tpl.add_two_hop(0, 1, &v.relation_names).unwrap();
        let p = dir.path().join("templates.tsv");
        tpl.write(&p).unwrap();
        assert_eq!(TemplateSet::read(&p).unwrap(), tpl);
        let kg = TemporalKG::new(vec![Quadruple::new(0, 0, 1, 0)], 2, 2, 1).unwrap();
        let qs = gen_1hop(&kg, &v, &tpl, "train").questions;
        let p = dir.path().join("q.jsonl");
        write_questions(&p, &qs).unwrap();
        assert_eq!(read_questions(&p).unwrap(), qs);
        let line = fs::read_to_string(&p).unwrap();
        assert!(line.contains("\"qtype\":\"EPQ1\"") && line.contains("\"answer\":{\"entity\":1}"));
        let p = dir.path().join("rules.tsv");
        write_rule_pairs(&p, &[(0, 1), (2, 3)]).unwrap();
        assert_eq!(read_rule_allowlist(&p).unwrap(), vec![(0, 1), (2, 3)]);
    }
}
