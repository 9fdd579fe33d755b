//! Pipeline configuration and the in-memory stages shared by the command
//! line tool and the integration tests.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::eval::FamilySets;
use crate::forecaster::{train_forecaster, ForecastParams, TimeAwareReps, DEFAULT_WINDOW};
use crate::mhs::{propagate, Edge, MhsConfig, PsiKind};
use crate::qa::{train_qa, Family, QaTrained};
use crate::questions::{
    answer_uniquely_shares_entities, gen_1hop, gen_frq, gen_yuq, ground_2hop, mine_2hop_rules,
    Answer, FrqConfig, FrqSkips, Generated, HeuristicScorer, QType, Question, TemplateSet,
    YuqConfig,
};
use crate::synth::{relation_name, SynthConfig, CONSEQUENCE, TRIGGER};
use crate::tkg::{
    split, RelationId, SplitBoundaries, SplitName, Splits, TemporalKG, TimestampId, Vocab,
};
use crate::training::{TrainConfig, Trained};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Raw events TSV, written by `synth` and read by `ingest`.
    pub events: PathBuf,
    pub kg_dir: PathBuf,
    pub questions_dir: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            events: "events.tsv".into(),
            kg_dir: "kg".into(),
            questions_dir: "questions".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

impl Paths {
    /// Make relative paths relative to `base`.
    pub fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.events,
            &mut self.kg_dir,
            &mut self.questions_dir,
            &mut self.checkpoints,
            &mut self.reports,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecasterStage {
    /// Number of preceding timestamps aggregated into a representation.
    pub window: usize,
    pub train: TrainConfig,
}

impl Default for ForecasterStage {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            train: TrainConfig {
                dim: 32,
                epochs: 40,
                batch_size: 4,
                lr: 0.005,
                seed: 1,
                ..Default::default()
            },
        }
    }
}

/// Contribution scorer settings with relations given by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrqScorerConfig {
    pub lambda_t: f64,
    pub lambda_e: f64,
    pub lambda_r: f64,
    /// Directed `(prior relation, target relation)` pairs.
    pub rule_pairs: Vec<(String, String)>,
}

impl Default for FrqScorerConfig {
    fn default() -> Self {
        let h = HeuristicScorer::default();
        Self {
            lambda_t: h.lambda_t,
            lambda_e: h.lambda_e,
            lambda_r: h.lambda_r,
            rule_pairs: vec![(
                relation_name(TRIGGER as usize),
                relation_name(CONSEQUENCE as usize),
            )],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenqConfig {
    /// Relations that get no question template.
    pub exclude_relations: Vec<String>,
    /// When non-empty, YUQs and FRQs of every split and EPQs of the valid and
    /// test splits are generated only from facts with these relations.
    /// Training EPQs always use every fact.
    pub focus_relations: Vec<String>,
    pub two_hop: bool,
    /// 2-hop rules are mined per snapshot and kept when their confidence
    /// exceeds `rule_min_conf` and their support reaches `rule_min_support`.
    pub rule_min_conf: f64,
    pub rule_min_support: usize,
    pub yuq: YuqConfig,
    pub frq: FrqConfig,
    pub frq_scorer: FrqScorerConfig,
    /// Keep only FRQs whose Answer is the single choice linking both
    /// question entities.
    pub frq_unique_sharing: bool,
}

impl Default for GenqConfig {
    fn default() -> Self {
        Self {
            exclude_relations: Vec::new(),
            focus_relations: vec![relation_name(CONSEQUENCE as usize)],
            two_hop: true,
            rule_min_conf: 0.5,
            rule_min_support: 2,
            yuq: YuqConfig {
                seed: 3,
                ..Default::default()
            },
            frq: FrqConfig {
                seed: 3,
                ..Default::default()
            },
            frq_scorer: FrqScorerConfig::default(),
            frq_unique_sharing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MhsStage {
    pub hops: usize,
    pub gamma: f64,
    pub psi: PsiKind,
    /// Temporal embedding tables read by the neural psi.
    pub tables: TrainConfig,
    pub psi_train: TrainConfig,
}

impl Default for MhsStage {
    fn default() -> Self {
        let m = MhsConfig::default();
        Self {
            hops: m.hops,
            gamma: m.gamma,
            psi: m.psi,
            tables: TrainConfig {
                dim: 32,
                epochs: 30,
                batch_size: 64,
                lr: 0.05,
                seed: 2,
                ..Default::default()
            },
            psi_train: TrainConfig {
                dim: 32,
                epochs: 10,
                batch_size: 16,
                lr: 0.003,
                seed: 1,
                ..Default::default()
            },
        }
    }
}

impl MhsStage {
    pub fn config(&self) -> MhsConfig {
        MhsConfig {
            hops: self.hops,
            gamma: self.gamma,
            psi: self.psi,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalStage {
    /// Exclude other correct answers at `t_q` from EPQ ranks.
    pub filtered: bool,
    /// Allow the multi-hop scorer, which reads facts at the question timestamp.
    pub cheating_snapshot: bool,
    pub emit_csv: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataEffStage {
    pub family: Family,
    pub fractions: Vec<f64>,
    pub seed: u64,
}

impl Default for DataEffStage {
    fn default() -> Self {
        Self {
            family: Family::Epq,
            fractions: vec![0.1, 0.25, 0.5, 0.75, 1.0],
            seed: 7,
        }
    }
}

fn default_split() -> SplitBoundaries {
    SplitBoundaries {
        t0: 0,
        t1: 45,
        t2: 50,
        t3: 59,
    }
}

fn default_qa() -> TrainConfig {
    TrainConfig {
        dim: 32,
        epochs: 10,
        batch_size: 16,
        lr: 0.003,
        reg: 0.01,
        seed: 1,
        ..Default::default()
    }
}

/// Every stage seed below is offset by the top-level `seed`, which has no
/// default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default = "default_split")]
    pub split: SplitBoundaries,
    #[serde(default)]
    pub forecaster: ForecasterStage,
    #[serde(default)]
    pub genq: GenqConfig,
    #[serde(default = "default_qa")]
    pub qa: TrainConfig,
    #[serde(default)]
    pub mhs: MhsStage,
    #[serde(default)]
    pub eval: EvalStage,
    #[serde(default)]
    pub data_efficiency: DataEffStage,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            split: default_split(),
            forecaster: ForecasterStage::default(),
            genq: GenqConfig::default(),
            qa: default_qa(),
            mhs: MhsStage::default(),
            eval: EvalStage::default(),
            data_efficiency: DataEffStage::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.synth.validate()?;
        for (name, c) in [
            ("forecaster.train", &self.forecaster.train),
            ("qa", &self.qa),
            ("mhs.tables", &self.mhs.tables),
            ("mhs.psi_train", &self.mhs.psi_train),
        ] {
            c.validate().map_err(|e| match e {
                Error::Config { field, reason } => Error::config(format!("{name}.{field}"), reason),
                other => other,
            })?;
        }
        if self.forecaster.window == 0 {
            return Err(Error::config("forecaster.window", "must be at least 1"));
        }
        if self.qa.dim != self.forecaster.train.dim {
            return Err(Error::config("qa.dim", "must equal forecaster.train.dim"));
        }
        if self.mhs.psi == PsiKind::Neural && self.mhs.tables.dim != self.qa.dim {
            return Err(Error::config(
                "mhs.tables.dim",
                "must equal qa.dim for the neural psi",
            ));
        }
        self.mhs.config().validate().map_err(|e| match e {
            Error::Config { field, reason } => Error::config(format!("mhs.{field}"), reason),
            other => other,
        })?;
        let y = self.genq.yuq.true_fraction;
        if !(y > 0.0 && y < 1.0) {
            return Err(Error::config(
                "genq.yuq.true_fraction",
                "must lie in (0, 1)",
            ));
        }
        let c = self.genq.rule_min_conf;
        if !(c > 0.0 && c <= 1.0) {
            return Err(Error::config("genq.rule_min_conf", "must lie in (0, 1]"));
        }
        let f = &self.data_efficiency.fractions;
        if f.is_empty()
            || f.iter().any(|x| !(*x > 0.0 && *x <= 1.0))
            || f.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::config(
                "data_efficiency.fractions",
                "must be non-empty, strictly increasing and within (0, 1]",
            ));
        }
        Ok(())
    }

    fn offset(&self, c: &TrainConfig) -> TrainConfig {
        TrainConfig {
            seed: c.seed.wrapping_add(self.seed),
            ..c.clone()
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.synth.seed.wrapping_add(self.seed),
            ..self.synth.clone()
        }
    }

    pub fn forecaster_train(&self) -> TrainConfig {
        self.offset(&self.forecaster.train)
    }

    pub fn qa_train(&self) -> TrainConfig {
        self.offset(&self.qa)
    }

    pub fn tables_train(&self) -> TrainConfig {
        self.offset(&self.mhs.tables)
    }

    pub fn psi_train(&self) -> TrainConfig {
        self.offset(&self.mhs.psi_train)
    }

    pub fn yuq_config(&self) -> YuqConfig {
        YuqConfig {
            seed: self.genq.yuq.seed.wrapping_add(self.seed),
            ..self.genq.yuq.clone()
        }
    }

    pub fn frq_config(&self) -> FrqConfig {
        FrqConfig {
            seed: self.genq.frq.seed.wrapping_add(self.seed),
            ..self.genq.frq.clone()
        }
    }

    pub fn data_eff_seed(&self) -> u64 {
        self.data_efficiency.seed.wrapping_add(self.seed)
    }
}

/// Relation ids for names; unknown names are a config error on `field`.
pub fn relation_ids(vocab: &Vocab, names: &[String], field: &str) -> Result<Vec<RelationId>> {
    names
        .iter()
        .map(|n| {
            vocab
                .relation_id(n)
                .ok_or_else(|| Error::config(field, format!("unknown relation `{n}`")))
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuestionSets {
    pub train: Vec<Question>,
    pub valid: Vec<Question>,
    pub test: Vec<Question>,
}

impl QuestionSets {
    pub fn get(&self, name: SplitName) -> &[Question] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }

    pub fn get_mut(&mut self, name: SplitName) -> &mut Vec<Question> {
        match name {
            SplitName::Train => &mut self.train,
            SplitName::Valid => &mut self.valid,
            SplitName::Test => &mut self.test,
        }
    }

    pub fn family(&self) -> FamilySets<'_> {
        FamilySets {
            train: &self.train,
            valid: &self.valid,
            test: &self.test,
        }
    }
}

/// Counts from question generation, per split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenStats {
    pub rule_pairs: Vec<(RelationId, RelationId)>,
    pub splits: Vec<SplitStats>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub split: String,
    pub epq1: usize,
    pub epq2: usize,
    pub yuq: usize,
    pub frq: usize,
    pub skipped: usize,
    pub frq_skips: FrqSkips,
    /// FRQs dropped by the unique-sharing filter.
    pub frq_not_unique: usize,
}

pub fn templates(cfg: &PipelineConfig, vocab: &Vocab) -> Result<TemplateSet> {
    let excluded = relation_ids(vocab, &cfg.genq.exclude_relations, "genq.exclude_relations")?;
    Ok(TemplateSet::from_relation_phrases(
        &vocab.relation_names,
        &excluded,
    ))
}

fn scorer(cfg: &GenqConfig, vocab: &Vocab) -> Result<HeuristicScorer> {
    let mut rule_pairs = BTreeSet::new();
    for (a, b) in &cfg.frq_scorer.rule_pairs {
        let ids = relation_ids(vocab, &[a.clone(), b.clone()], "genq.frq_scorer.rule_pairs")?;
        rule_pairs.insert((ids[0], ids[1]));
    }
    Ok(HeuristicScorer {
        lambda_t: cfg.frq_scorer.lambda_t,
        lambda_e: cfg.frq_scorer.lambda_e,
        lambda_r: cfg.frq_scorer.lambda_r,
        rule_pairs,
    })
}

/// All question families for the three splits of `kg`. Each snapshot is
/// grounded with the 2-hop rules mined on that snapshot.
pub fn generate_questions(
    cfg: &PipelineConfig,
    vocab: &Vocab,
    kg: &TemporalKG,
) -> Result<(QuestionSets, GenStats)> {
    let splits = split(kg, cfg.split)?;
    let mut tpl = templates(cfg, vocab)?;
    let focus = relation_ids(vocab, &cfg.genq.focus_relations, "genq.focus_relations")?;
    let scorer = scorer(&cfg.genq, vocab)?;
    let mut stats = GenStats::default();
    let mut pairs = BTreeSet::new();
    let mut rules_at = Vec::with_capacity(kg.num_timestamps());
    for t in 0..kg.num_timestamps() as TimestampId {
        let mut here = Vec::new();
        if cfg.genq.two_hop {
            for r in mine_2hop_rules(kg.snapshot(t), cfg.genq.rule_min_conf)? {
                if r.support >= cfg.genq.rule_min_support {
                    here.push((r.r1, r.r2));
                }
            }
        }
        pairs.extend(here.iter().copied());
        rules_at.push(here);
    }
    for (r1, r2) in &pairs {
        tpl.add_two_hop(*r1, *r2, &vocab.relation_names)?;
    }
    stats.rule_pairs = pairs.into_iter().collect();
    let focused = |k: &TemporalKG| {
        if focus.is_empty() {
            k.clone()
        } else {
            k.filter(|q| focus.contains(&q.r))
        }
    };
    let (yuq_cfg, frq_cfg) = (cfg.yuq_config(), cfg.frq_config());
    let mut sets = QuestionSets::default();
    for name in SplitName::ALL {
        let part = splits.get(name);
        let prefix = name.as_str();
        let rel = focused(part);
        let epq_src = if name == SplitName::Train { part } else { &rel };
        let one = gen_1hop(epq_src, vocab, &tpl, prefix);
        let mut two = Generated::default();
        for (t, rules) in rules_at.iter().enumerate().filter(|(_, r)| !r.is_empty()) {
            let g = ground_2hop(
                &part.time_range(t as TimestampId, t as TimestampId + 1),
                rules,
                vocab,
                &tpl,
                prefix,
            );
            two.questions.extend(g.questions);
            two.skipped += g.skipped;
        }
        if name != SplitName::Train && !focus.is_empty() {
            two.questions.retain(|q| focus.contains(&q.provenance[1].r));
        }
        for (i, q) in two.questions.iter_mut().enumerate() {
            q.id = format!("{prefix}-epq2-{i:06}");
        }
        let yuq = gen_yuq(&rel, kg, vocab, &tpl, &yuq_cfg, prefix)?;
        let (frq, frq_skips) = gen_frq(&rel, kg, &scorer, vocab, &tpl, &frq_cfg, prefix);
        let mut frqs = frq.questions;
        let before = frqs.len();
        if cfg.genq.frq_unique_sharing {
            frqs.retain(answer_uniquely_shares_entities);
        }
        stats.splits.push(SplitStats {
            split: prefix.to_string(),
            epq1: one.questions.len(),
            epq2: two.questions.len(),
            yuq: yuq.questions.len(),
            frq: frqs.len(),
            skipped: one.skipped + two.skipped + yuq.skipped + frq.skipped,
            frq_skips,
            frq_not_unique: before - frqs.len(),
        });
        let out = sets.get_mut(name);
        out.extend(one.questions);
        out.extend(two.questions);
        out.extend(yuq.questions);
        out.extend(frqs);
    }
    Ok((sets, stats))
}

pub fn split_kg(cfg: &PipelineConfig, kg: &TemporalKG) -> Result<Splits> {
    split(kg, cfg.split)
}

pub fn train_forecaster_stage(
    cfg: &PipelineConfig,
    train: &TemporalKG,
) -> Result<Trained<ForecastParams>> {
    train_forecaster(train, cfg.forecaster.window, &cfg.forecaster_train())
}

/// Train one family, or `None` when the training split has none of its
/// questions.
pub fn train_family(
    cfg: &PipelineConfig,
    family: Family,
    sets: &QuestionSets,
    reps: &TimeAwareReps,
    vocab: &Vocab,
) -> Result<Option<QaTrained>> {
    if !sets.train.iter().any(|q| Family::of(q.qtype) == family) {
        return Ok(None);
    }
    train_qa(
        family,
        &sets.train,
        &sets.valid,
        reps,
        vocab,
        &cfg.qa_train(),
    )
    .map(Some)
}

pub const MHS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MhsRecord {
    pub id: String,
    pub qtype: QType,
    pub t_q: u32,
    pub answer: u32,
    /// `None` when nothing besides the subject was reached.
    pub predicted: Option<u32>,
    /// `None` when the answer was not reached.
    pub rank: Option<usize>,
}

/// Multi-hop scorer results. Unreached answers count as misses with a
/// reciprocal rank of 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MhsReport {
    pub schema_version: u32,
    pub cheating_snapshot: bool,
    pub psi: PsiKind,
    pub hops: usize,
    pub gamma: f64,
    pub count: usize,
    pub reached: usize,
    pub mrr: f64,
    pub hits_at_1: f64,
    pub hits_at_3: f64,
    pub hits_at_10: f64,
    pub records: Vec<MhsRecord>,
}

/// Run the scorer on every EPQ over the snapshot of `kg` at its timestamp.
pub fn run_mhs(
    questions: &[Question],
    kg: &TemporalKG,
    cfg: &MhsConfig,
    psi: impl Fn(&Question, &Edge) -> Result<f64> + Sync,
) -> Result<MhsReport> {
    cfg.validate()?;
    let epqs: Vec<&Question> = questions.iter().filter(|q| q.qtype.is_epq()).collect();
    if epqs.is_empty() {
        return Err(Error::Empty("no EPQs for the multi-hop scorer"));
    }
    let records = epqs
        .par_iter()
        .map(|q| {
            let Answer::Entity(answer) = q.answer else {
                return Err(q.invalid("EPQ without an entity answer"));
            };
            let s_q = q.subject()?;
            let r = propagate(kg.snapshot(q.t_q), kg.num_entities(), s_q, cfg, |e| {
                psi(q, e)
            })?;
            Ok(MhsRecord {
                id: q.id.clone(),
                qtype: q.qtype,
                t_q: q.t_q,
                answer,
                predicted: r.answer,
                rank: r.rank(s_q, answer),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = records.len() as f64;
    let recip: f64 = records
        .iter()
        .filter_map(|r| r.rank)
        .map(|r| 1.0 / r as f64)
        .sum();
    let hits = |k: usize| {
        records
            .iter()
            .filter(|r| r.rank.is_some_and(|x| x <= k))
            .count() as f64
            / n
    };
    Ok(MhsReport {
        schema_version: MHS_SCHEMA_VERSION,
        cheating_snapshot: true,
        psi: cfg.psi,
        hops: cfg.hops,
        gamma: cfg.gamma,
        count: records.len(),
        reached: records.iter().filter(|r| r.rank.is_some()).count(),
        mrr: recip / n,
        hits_at_1: hits(1),
        hits_at_3: hits(3),
        hits_at_10: hits(10),
        records,
    })
}

/// Temporal tables for the neural psi, trained on every split.
pub fn train_cheating_tables(
    cfg: &PipelineConfig,
    kg: &TemporalKG,
) -> Result<Trained<EmbeddingTable>> {
    crate::embeddings::train_temporal(kg, &cfg.tables_train())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate;

    #[test]
    fn config_roundtrip_and_seed_required() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
        let e = PipelineConfig::from_toml("[qa]\ndim = 32\n").unwrap_err();
        assert!(e.to_string().contains("seed"), "{e}");
        let e = PipelineConfig::from_toml("seed = 1\n[qa]\ndimm = 3\n").unwrap_err();
        assert!(matches!(e, Error::Config { .. }));
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn field_level_errors() {
        let field = |text: &str| match PipelineConfig::from_toml(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field("seed = 0\n[qa]\ndim = 16\n"), "qa.dim");
        assert_eq!(field("seed = 0\n[qa]\nlr = -1.0\n"), "qa.lr");
        assert_eq!(field("seed = 0\n[mhs]\ngamma = 0.0\n"), "mhs.gamma");
        assert_eq!(
            field("seed = 0\n[data_efficiency]\nfractions = [0.0, 1.0]\n"),
            "data_efficiency.fractions"
        );
        assert_eq!(
            field("seed = 0\n[data_efficiency]\nfractions = [0.5, 0.25]\n"),
            "data_efficiency.fractions"
        );
        assert!(matches!(
            PipelineConfig::from_toml("seed = 0\n[split]\nt0 = 5\nt1 = 5\nt2 = 6\nt3 = 7\n"),
            Err(Error::InvalidBoundaries(_))
        ));
    }

    #[test]
    fn top_level_seed_offsets_stages() {
        let cfg = PipelineConfig {
            seed: 10,
            ..Default::default()
        };
        assert_eq!(cfg.forecaster_train().seed, 11);
        assert_eq!(cfg.qa_train().seed, 11);
        assert_eq!(cfg.synth_config().seed, 10);
        assert_eq!(cfg.yuq_config().seed, 13);
    }

    #[test]
    fn question_sets_respect_splits_and_focus() {
        let cfg = PipelineConfig::default();
        let (vocab, kg) = generate(&cfg.synth_config()).unwrap();
        let (sets, stats) = generate_questions(&cfg, &vocab, &kg).unwrap();
        assert_eq!(stats.splits.len(), 3);
        for (name, lo, hi) in [("train", 0, 44), ("valid", 45, 49), ("test", 50, 59)] {
            let qs = sets.get(name.parse().unwrap());
            assert!(!qs.is_empty());
            assert!(qs
                .iter()
                .all(|q| q.t_q >= lo && q.t_q <= hi && q.id.starts_with(name)));
        }
        let noise_train = sets
            .train
            .iter()
            .any(|q| q.qtype == QType::Epq1 && q.provenance[0].r != CONSEQUENCE);
        assert!(noise_train);
        for q in sets.valid.iter().chain(&sets.test) {
            let r = q.provenance.last().unwrap().r;
            assert_eq!(r, CONSEQUENCE, "{}", q.id);
        }
        assert!(sets.test.iter().any(|q| q.qtype == QType::Yuq));
        assert!(sets
            .test
            .iter()
            .filter(|q| q.qtype == QType::Frq)
            .all(answer_uniquely_shares_entities));
        let again = generate_questions(&cfg, &vocab, &kg).unwrap().0;
        assert_eq!(again, sets);
        let bad = PipelineConfig {
            genq: GenqConfig {
                focus_relations: vec!["fly to the moon".into()],
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(matches!(
            generate_questions(&bad, &vocab, &kg),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn mhs_report_counts_unreached_as_misses() {
        use crate::tkg::Quadruple;
        let kg = TemporalKG::new(
            vec![Quadruple::new(0, 0, 1, 0), Quadruple::new(1, 0, 2, 0)],
            4,
            1,
            1,
        )
        .unwrap();
        let q = |id: &str, a| Question {
            id: id.into(),
            qtype: QType::Epq1,
            text: String::new(),
            entities: vec![0],
            t_q: 0,
            answer: Answer::Entity(a),
            choices: None,
            provenance: Vec::new(),
            perturbed: None,
            shuffle_perm: None,
            tags: Vec::new(),
        };
        let qs = [q("a", 1), q("b", 2), q("c", 3)];
        let r = run_mhs(&qs, &kg, &MhsConfig::default(), |_, _| Ok(0.0)).unwrap();
        assert_eq!((r.count, r.reached), (3, 2));
        assert!((r.mrr - (1.0 + 0.5) / 3.0).abs() < 1e-15);
        assert_eq!(r.records[2].rank, None);
        assert_eq!(r.records[0].predicted, Some(1));
    }
}
