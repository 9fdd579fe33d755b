//! Scoring heads for the three question families, their losses, training
//! and prediction.
//!
//! Every family owns its own encoder and heads. Time-aware representations
//! enter the tape as constants, so training never changes them.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, ParamId, ParamStore, Tape, Var};
use crate::binio;
use crate::encoder::{EncoderIds, TokenVocab};
use crate::error::{Error, Result};
use crate::eval::{argmax, rank_of};
use crate::forecaster::TimeAwareReps;
use crate::questions::{Answer, QType, Question, YesUnknown};
use crate::tkg::{EntityId, Quadruple, TimestampId, Vocab};
use crate::training::{run_epochs_with, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Epq,
    Yuq,
    Frq,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Epq, Family::Yuq, Family::Frq];

    pub fn of(qtype: QType) -> Family {
        match qtype {
            QType::Epq1 | QType::Epq2 => Family::Epq,
            QType::Yuq => Family::Yuq,
            QType::Frq => Family::Frq,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Epq => "epq",
            Family::Yuq => "yuq",
            Family::Frq => "frq",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::config(
                    "family",
                    format!("unknown family `{s}`, expected epq, yuq or frq"),
                )
            })
    }
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    enc: EncoderIds,
    head_w: ParamId,
    head_b: ParamId,
    fuse: Option<(ParamId, ParamId)>,
}

impl Ids {
    fn lookup(p: &ParamStore, family: Family) -> Result<Self> {
        Ok(Self {
            enc: EncoderIds::lookup(p)?,
            head_w: p.require("head.w")?,
            head_b: p.require("head.b")?,
            fuse: match family {
                Family::Frq => Some((p.require("fuse.w")?, p.require("fuse.b")?)),
                _ => None,
            },
        })
    }
}

/// A question reduced to token ids and entity/time indices.
#[derive(Debug, Clone)]
struct Prepared {
    id: String,
    s: EntityId,
    o: Option<EntityId>,
    t: TimestampId,
    text: Vec<u32>,
    choices: Vec<(Vec<u32>, Quadruple)>,
    target: usize,
}

/// Encoder, heads and token vocabulary for one question family.
#[derive(Debug, Clone, PartialEq)]
pub struct QaModel {
    pub family: Family,
    pub config: TrainConfig,
    pub vocab: TokenVocab,
    pub params: ParamStore,
}

/// Scores and the predicted answer for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub qtype: QType,
    pub scores: Vec<f64>,
    pub predicted: Answer,
    pub correct: bool,
    /// 1-based raw rank of the ground truth (EPQs only).
    pub rank: Option<usize>,
    /// Some representation fell back to the base table.
    pub fallback: bool,
}

const QA_MAGIC: &[u8; 8] = b"TKGQAMOD";

/// Texts that seed the token vocabulary besides training questions.
pub fn vocab_seed_texts(kg_vocab: &Vocab) -> Vec<String> {
    let mut texts: Vec<String> = kg_vocab.entity_names.clone();
    texts.extend(kg_vocab.relation_names.iter().cloned());
    texts.extend((0..kg_vocab.num_timestamps() as TimestampId).map(|t| kg_vocab.date_label(t)));
    texts.push(YesUnknown::Yes.as_str().into());
    texts.push(YesUnknown::Unknown.as_str().into());
    texts
}

impl QaModel {
    pub fn init(family: Family, vocab: TokenVocab, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = cfg.rng(51);
        let w = 2 * cfg.dim;
        let mut p = ParamStore::new();
        EncoderIds::init(&mut p, vocab.len(), cfg.dim, cfg.init_scale, &mut rng);
        p.add_near_identity("head.w", w, w, 0.05, &mut rng);
        // a spread-out bias gives the heads near-constant components, which
        // the bias-free products need to express a decision threshold
        p.add_uniform("head.b", 1, w, 1.0, &mut rng);
        if family == Family::Frq {
            // start as the mean of the three fused parts
            let mut fuse = vec![0.0; w * 3 * w];
            for i in 0..w {
                for k in 0..3 {
                    fuse[i * 3 * w + k * w + i] = 1.0 / 3.0 + rng.random_range(-0.05..0.05);
                }
            }
            p.add("fuse.w", w, 3 * w, fuse);
            p.add_zeros("fuse.b", 1, w);
        }
        Ok(Self {
            family,
            config: cfg.clone(),
            vocab,
            params: p,
        })
    }

    fn ids(&self, params: &ParamStore) -> Result<Ids> {
        Ids::lookup(params, self.family)
    }

    fn prepare(&self, q: &Question) -> Result<Prepared> {
        if Family::of(q.qtype) != self.family {
            return Err(q.invalid(format!(
                "{} question given to the {} model",
                q.qtype,
                self.family.as_str()
            )));
        }
        let s = q.subject()?;
        let (o, choices, target) = match (self.family, q.answer) {
            (Family::Epq, Answer::Entity(e)) => (None, Vec::new(), e as usize),
            (Family::Yuq, Answer::YesUnknown(x)) => (
                Some(q.object()?),
                Vec::new(),
                (x == YesUnknown::Unknown) as usize,
            ),
            (Family::Frq, Answer::Choice(i)) => {
                let cs = q
                    .choices
                    .as_ref()
                    .ok_or_else(|| q.invalid("FRQ without choices"))?;
                if cs.len() != 4 || i >= 4 {
                    return Err(q.invalid("FRQ needs four choices and an answer index below 4"));
                }
                let cs = cs
                    .iter()
                    .map(|c| (self.vocab.encode_pair_ids(&q.text, &c.text), c.fact))
                    .collect();
                (Some(q.object()?), cs, i)
            }
            _ => return Err(q.invalid("answer kind does not match question type")),
        };
        Ok(Prepared {
            id: q.id.clone(),
            s,
            o,
            t: q.t_q,
            text: self.vocab.encode_ids(&q.text),
            choices,
            target,
        })
    }

    /// Candidate logits of one question on the tape.
    fn logits(&self, sc: &mut Scorer<'_, '_>, p: &Prepared) -> Result<(Var, bool)> {
        let hq = sc.encode(&p.text);
        match self.family {
            Family::Epq => {
                let (a, fb) = sc.head(p.s, p.t)?;
                if fb {
                    return Err(Error::Question {
                        id: p.id.clone(),
                        reason: format!("t_q={} is outside the representation range", p.t),
                    });
                }
                if p.target >= sc.reps.num_entities() {
                    return Err(Error::Question {
                        id: p.id.clone(),
                        reason: format!("answer entity {} is out of range", p.target),
                    });
                }
                let mut scores = Vec::with_capacity(sc.reps.num_entities());
                for e in 0..sc.reps.num_entities() as EntityId {
                    let (b, _) = sc.head(e, p.t)?;
                    scores.push(sc.tape.re_dot3_conj(a, hq, b));
                }
                Ok((sc.tape.stack(&scores), false))
            }
            Family::Yuq => {
                let (a, fa) = sc.head(p.s, p.t)?;
                let (b, fb) = sc.head(p.o.expect("prepared"), p.t)?;
                let yes = sc.answer_token(YesUnknown::Yes);
                let unk = sc.answer_token(YesUnknown::Unknown);
                let s_yes = sc.tape.re_dot4_conj(a, hq, b, yes);
                let s_unk = sc.tape.re_dot4_conj(a, hq, b, unk);
                Ok((sc.tape.stack(&[s_yes, s_unk]), fa || fb))
            }
            Family::Frq => {
                let (fs, f1) = sc.head(p.s, p.t)?;
                let (fo, f2) = sc.head(p.o.expect("prepared"), p.t)?;
                let mut fallback = f1 || f2;
                let (fw, fbias) = sc.ids.fuse.expect("FRQ model has a fusion map");
                let mut scores = Vec::with_capacity(4);
                for (ids, fact) in &p.choices {
                    let hqc = sc.encode(ids);
                    let cat = sc.tape.concat(&[fs, hqc, fo]);
                    let fused = sc.tape.affine(fw, fbias, cat);
                    let (cs, g1) = sc.head(fact.s, fact.t)?;
                    let (co, g2) = sc.head(fact.o, fact.t)?;
                    fallback |= g1 || g2;
                    scores.push(sc.tape.re_dot4_conj(cs, hqc, co, fused));
                }
                Ok((sc.tape.stack(&scores), fallback))
            }
        }
    }

    fn batch_loss(
        &self,
        sc: &mut Scorer<'_, '_>,
        batch: &[&Prepared],
        mut neg: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let mut losses = Vec::with_capacity(batch.len());
        for p in batch {
            let (logits, _) = self.logits(sc, p)?;
            let loss = match (&mut neg, self.family) {
                (Some(rng), Family::Epq) if self.config.negatives > 0 => {
                    let n = sc.reps.num_entities();
                    let mut picks = vec![p.target];
                    picks.extend((0..self.config.negatives).map(|_| rng.random_range(0..n)));
                    let parts: Vec<Var> =
                        picks.iter().map(|i| sc.tape.slice(logits, *i, 1)).collect();
                    let sub = sc.tape.concat(&parts);
                    sc.tape.cross_entropy(sub, 0)
                }
                _ => sc.tape.cross_entropy(logits, p.target),
            };
            losses.push(loss);
            // N3 on the question vector and the subject head output
            if neg.is_some() && self.config.reg > 0.0 {
                let hq = sc.encode(&p.text);
                let (hs, _) = sc.head(p.s, p.t)?;
                for v in [hq, hs] {
                    let n = sc.tape.n3(v);
                    losses.push(sc.tape.scale(n, self.config.reg));
                }
            }
        }
        Ok(sc.tape.sum(&losses))
    }

    /// Summed cross-entropy of `questions` under `params` (full softmax).
    pub fn loss_with(
        &self,
        params: &ParamStore,
        reps: &TimeAwareReps,
        questions: &[Question],
    ) -> Result<f64> {
        let preps = questions
            .iter()
            .map(|q| self.prepare(q))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Prepared> = preps.iter().collect();
        let ids = self.ids(params)?;
        let mut tape = Tape::new(params);
        let mut sc = Scorer::new(&mut tape, ids, reps, &self.vocab);
        let l = self.batch_loss(&mut sc, &refs, None)?;
        Ok(tape.scalar(l))
    }

    /// Summed cross-entropy and its gradient with respect to every encoder
    /// and head parameter.
    pub fn loss_and_gradients(
        &self,
        reps: &TimeAwareReps,
        questions: &[Question],
    ) -> Result<(f64, Gradients)> {
        let preps = questions
            .iter()
            .map(|q| self.prepare(q))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Prepared> = preps.iter().collect();
        let ids = self.ids(&self.params)?;
        let mut tape = Tape::new(&self.params);
        let mut sc = Scorer::new(&mut tape, ids, reps, &self.vocab);
        let l = self.batch_loss(&mut sc, &refs, None)?;
        Ok((tape.scalar(l), tape.backward(l)))
    }

    pub fn predict(&self, q: &Question, reps: &TimeAwareReps) -> Result<Prediction> {
        self.predict_with(&self.params, q, reps)
    }

    fn predict_with(
        &self,
        params: &ParamStore,
        q: &Question,
        reps: &TimeAwareReps,
    ) -> Result<Prediction> {
        let p = self.prepare(q)?;
        let ids = self.ids(params)?;
        let mut tape = Tape::new(params);
        let mut sc = Scorer::new(&mut tape, ids, reps, &self.vocab);
        let (logits, fallback) = self.logits(&mut sc, &p)?;
        let scores = tape.value(logits).to_vec();
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(q.invalid("non-finite score"));
        }
        let best = argmax(&scores).ok_or_else(|| q.invalid("no candidates"))?;
        let (predicted, rank) = match self.family {
            Family::Epq => (
                Answer::Entity(best as EntityId),
                Some(rank_of(&scores, p.target, &[])?),
            ),
            Family::Yuq => (
                Answer::YesUnknown(if best == 0 {
                    YesUnknown::Yes
                } else {
                    YesUnknown::Unknown
                }),
                None,
            ),
            Family::Frq => (Answer::Choice(best), None),
        };
        Ok(Prediction {
            id: q.id.clone(),
            qtype: q.qtype,
            correct: best == p.target,
            scores,
            predicted,
            rank,
            fallback,
        })
    }

    /// Config preamble (TOML text), token vocabulary, then parameters.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_magic(w, QA_MAGIC, 1)?;
        binio::write_str(w, self.family.as_str())?;
        let preamble = toml::to_string(&self.config).map_err(|e| Error::format(e.to_string()))?;
        binio::write_str(w, &preamble)?;
        self.vocab.write_to(w)?;
        self.params.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_magic(r, QA_MAGIC, 1)?;
        let family = match binio::read_str(r)?.as_str() {
            "epq" => Family::Epq,
            "yuq" => Family::Yuq,
            "frq" => Family::Frq,
            other => return Err(Error::format(format!("unknown model family `{other}`"))),
        };
        let config: TrainConfig =
            toml::from_str(&binio::read_str(r)?).map_err(|e| Error::format(e.to_string()))?;
        let vocab = TokenVocab::read_from(r)?;
        let params = ParamStore::read_from(r)?;
        let model = Self {
            family,
            config,
            vocab,
            params,
        };
        model.ids(&model.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(fs::File::open(path)?))
    }
}

/// Per-tape caches of head outputs and encodings.
struct Scorer<'t, 'p> {
    tape: &'t mut Tape<'p>,
    ids: Ids,
    reps: &'t TimeAwareReps,
    vocab: &'t TokenVocab,
    heads: HashMap<(EntityId, TimestampId), (Var, bool)>,
    answers: [Option<Var>; 2],
}

impl<'t, 'p> Scorer<'t, 'p> {
    fn new(
        tape: &'t mut Tape<'p>,
        ids: Ids,
        reps: &'t TimeAwareReps,
        vocab: &'t TokenVocab,
    ) -> Self {
        Self {
            tape,
            ids,
            reps,
            vocab,
            heads: HashMap::new(),
            answers: [None, None],
        }
    }

    /// `tanh(W h_(e,t) + b)`.
    fn head(&mut self, e: EntityId, t: TimestampId) -> Result<(Var, bool)> {
        if let Some(v) = self.heads.get(&(e, t)) {
            return Ok(*v);
        }
        let (rep, fallback) = self.reps.entity(e, t)?;
        let h = self.tape.constant(rep.flatten());
        let a = self.tape.affine(self.ids.head_w, self.ids.head_b, h);
        let out = (self.tape.tanh(a), fallback);
        self.heads.insert((e, t), out);
        Ok(out)
    }

    fn encode(&mut self, ids: &[u32]) -> Var {
        self.ids.enc.encode_on_tape(self.tape, ids)
    }

    fn answer_token(&mut self, x: YesUnknown) -> Var {
        let i = (x == YesUnknown::Unknown) as usize;
        if let Some(v) = self.answers[i] {
            return v;
        }
        let ids = self.vocab.encode_ids(x.as_str());
        let v = self.encode(&ids);
        self.answers[i] = Some(v);
        v
    }
}

/// Validation metric of one family: MRR for EPQs, accuracy otherwise.
pub fn family_metric(family: Family, preds: &[Prediction]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Empty("no predictions"));
    }
    match family {
        Family::Epq => {
            let ranks: Vec<usize> = preds.iter().filter_map(|p| p.rank).collect();
            crate::eval::mrr(&ranks)
        }
        _ => Ok(preds.iter().filter(|p| p.correct).count() as f64 / preds.len() as f64),
    }
}

/// Trained model plus its training record.
#[derive(Debug, Clone)]
pub struct QaTrained {
    pub model: QaModel,
    /// Mean training loss per epoch, index 0 before any update.
    pub loss_curve: Vec<f64>,
    /// Validation metric per epoch (empty without validation questions).
    pub valid_curve: Vec<f64>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Train one family's encoder and heads on `questions` (other families are
/// ignored) with the representations held fixed. With validation questions
/// of the family, the parameters of the epoch with the best validation
/// metric are kept (earliest on ties); otherwise those of the last epoch.
pub fn train_qa(
    family: Family,
    questions: &[Question],
    valid: &[Question],
    reps: &TimeAwareReps,
    kg_vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<QaTrained> {
    if cfg.dim != reps.dim {
        return Err(Error::config(
            "dim",
            format!(
                "QA dim {} differs from representation dim {}",
                cfg.dim, reps.dim
            ),
        ));
    }
    let own: Vec<&Question> = questions
        .iter()
        .filter(|q| Family::of(q.qtype) == family)
        .collect();
    if own.is_empty() {
        return Err(Error::Empty("no training questions for this family"));
    }
    let valid: Vec<&Question> = valid
        .iter()
        .filter(|q| Family::of(q.qtype) == family)
        .collect();
    let seeds = vocab_seed_texts(kg_vocab);
    let texts = seeds
        .iter()
        .map(String::as_str)
        .chain(own.iter().map(|q| q.text.as_str()))
        .chain(
            own.iter()
                .flat_map(|q| q.choices.iter().flatten().map(|c| c.text.as_str())),
        );
    let vocab = TokenVocab::build(texts);
    let mut model = QaModel::init(family, vocab, cfg)?;
    if cfg.epochs == 0 {
        return Ok(QaTrained {
            model,
            loss_curve: Vec::new(),
            valid_curve: Vec::new(),
            best_epoch: 0,
        });
    }
    let preps = own
        .iter()
        .map(|q| model.prepare(q))
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<usize> = (0..preps.len()).collect();
    let mut params = std::mem::take(&mut model.params);
    let ids = Ids::lookup(&params, family)?;
    let mut neg_rng = cfg.rng(52);
    let mut valid_curve = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let curve = run_epochs_with(
        &mut params,
        &samples,
        cfg,
        None,
        53,
        |tape, batch| {
            let refs: Vec<&Prepared> = batch.iter().map(|i| &preps[*i]).collect();
            let mut sc = Scorer::new(tape, ids, reps, &model.vocab);
            model.batch_loss(&mut sc, &refs, Some(&mut neg_rng))
        },
        |epoch, params| {
            if valid.is_empty() {
                return Ok(());
            }
            let preds = valid
                .iter()
                .map(|q| model.predict_with(params, q, reps))
                .collect::<Result<Vec<_>>>()?;
            let metric = family_metric(family, &preds)?;
            valid_curve.push(metric);
            if best.as_ref().is_none_or(|(m, _, _)| metric > *m) {
                best = Some((metric, epoch, params.clone()));
            }
            Ok(())
        },
    )?;
    let best_epoch = match best {
        Some((_, epoch, kept)) => {
            params = kept;
            epoch
        }
        None => cfg.epochs,
    };
    model.params = params;
    Ok(QaTrained {
        model,
        loss_curve: curve,
        valid_curve,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{max_relative_error, numeric_gradient};
    use crate::complex::{conjugate, re_dot3, re_dot4, ComplexVec};
    use crate::questions::Choice;
    use std::collections::BTreeMap;

    fn cv(re: &[f64], im: &[f64]) -> ComplexVec {
        ComplexVec::new(re.to_vec(), im.to_vec()).unwrap()
    }

    /// Static reps over `n` entities and 3 timestamps.
    fn reps(n: usize, d: usize, seed: u64) -> TimeAwareReps {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut v = || -> ComplexVec {
            cv(
                &(0..d)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect::<Vec<_>>(),
                &(0..d)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect::<Vec<_>>(),
            )
        };
        let base: Vec<ComplexVec> = (0..n).map(|_| v()).collect();
        let mut entries = BTreeMap::new();
        entries.insert((0, 1), v());
        TimeAwareReps {
            dim: d,
            base,
            relations: vec![v()],
            entries,
            latest_source: vec![None, Some(0), Some(1)],
        }
    }

    fn q(
        id: &str,
        qtype: QType,
        text: &str,
        entities: Vec<EntityId>,
        t: TimestampId,
        answer: Answer,
    ) -> Question {
        Question {
            id: id.into(),
            qtype,
            text: text.into(),
            entities,
            t_q: t,
            answer,
            choices: None,
            provenance: Vec::new(),
            perturbed: None,
            shuffle_perm: None,
            tags: Vec::new(),
        }
    }

    fn frq(id: &str, t: TimestampId, answer: usize) -> Question {
        let mut x = q(
            id,
            QType::Frq,
            "Why will a visit b on day?",
            vec![0, 1],
            t,
            Answer::Choice(answer),
        );
        x.choices = Some(
            [(0, 1), (1, 2), (2, 3), (0, 3)]
                .iter()
                .enumerate()
                .map(|(i, (s, o))| Choice {
                    text: format!("e{s} meet e{o} on day {i}"),
                    fact: Quadruple::new(*s, 0, *o, 0),
                })
                .collect(),
        );
        x
    }

    fn model(family: Family, d: usize) -> QaModel {
        let vocab =
            TokenVocab::build(["who will a visit b on day ? e0 e1 e2 e3 meet yes unknown 0 1 2 3"]);
        let cfg = TrainConfig {
            dim: d,
            seed: 4,
            ..Default::default()
        };
        QaModel::init(family, vocab, &cfg).unwrap()
    }

    fn identity_heads(m: &mut QaModel) {
        // exact identity and no bias; reps stay small so tanh is the only change
        let ids = m.ids(&m.params).unwrap();
        let w = m.params.get(ids.head_w).rows;
        let t = m.params.get_mut(ids.head_w);
        t.data.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..w {
            t.data[i * w + i] = 1.0;
        }
        m.params
            .get_mut(ids.head_b)
            .data
            .iter_mut()
            .for_each(|x| *x = 0.0);
    }

    #[test]
    fn zero_question_vector_gives_zero_scores() {
        let mut m = model(Family::Epq, 2);
        let ids = m.ids(&m.params).unwrap();
        m.params
            .get_mut(ids.enc.proj_w)
            .data
            .iter_mut()
            .for_each(|x| *x = 0.0);
        let r = reps(5, 2, 1);
        let p = m
            .predict(
                &q(
                    "a",
                    QType::Epq1,
                    "who will a visit",
                    vec![1],
                    1,
                    Answer::Entity(3),
                ),
                &r,
            )
            .unwrap();
        assert!(p.scores.iter().all(|s| *s == 0.0));
        assert_eq!(p.predicted, Answer::Entity(0));
        assert_eq!(p.rank, Some(4));
    }

    #[test]
    fn epq_matches_hand_product() {
        let mut m = model(Family::Epq, 1);
        identity_heads(&mut m);
        let r = reps(3, 1, 2);
        let question = q(
            "a",
            QType::Epq1,
            "who will e1 visit",
            vec![1],
            2,
            Answer::Entity(0),
        );
        let p = m.predict(&question, &r).unwrap();
        let hq = crate::encoder::encode(&m.params, &m.vocab, &question.text).unwrap();
        let th = |v: &ComplexVec| cv(&[v.re[0].tanh()], &[v.im[0].tanh()]);
        for e in 0..3u32 {
            let want = re_dot3(&th(&r.base[1]), &hq, &conjugate(&th(&r.base[e as usize]))).unwrap();
            assert!((p.scores[e as usize] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn yuq_matches_hand_product_and_ties_to_yes() {
        let mut m = model(Family::Yuq, 1);
        identity_heads(&mut m);
        let r = reps(3, 1, 3);
        let question = q(
            "y",
            QType::Yuq,
            "will e0 visit e2",
            vec![0, 2],
            2,
            Answer::YesUnknown(YesUnknown::Yes),
        );
        let p = m.predict(&question, &r).unwrap();
        let hq = crate::encoder::encode(&m.params, &m.vocab, &question.text).unwrap();
        let th = |v: &ComplexVec| cv(&[v.re[0].tanh()], &[v.im[0].tanh()]);
        for (i, x) in [YesUnknown::Yes, YesUnknown::Unknown]
            .into_iter()
            .enumerate()
        {
            let hx = crate::encoder::encode_answer_token(&m.params, &m.vocab, x).unwrap();
            let want = re_dot4(&th(&r.base[0]), &hq, &conjugate(&th(&r.base[2])), &hx).unwrap();
            assert!((p.scores[i] - want).abs() < 1e-12);
        }
        // same token embedding for both answers -> tie -> yes
        let ids = m.ids(&m.params).unwrap();
        let (yes, unk) = (m.vocab.id("yes") as usize, m.vocab.id("unknown") as usize);
        let row = m.params.get(ids.enc.tokens).row(yes).to_vec();
        let w = row.len();
        m.params.get_mut(ids.enc.tokens).data[unk * w..(unk + 1) * w].copy_from_slice(&row);
        let p = m.predict(&question, &r).unwrap();
        assert_eq!(p.scores[0], p.scores[1]);
        assert_eq!(p.predicted, Answer::YesUnknown(YesUnknown::Yes));
    }

    #[test]
    fn frq_identical_choices_tie_to_first() {
        let m = model(Family::Frq, 2);
        let r = reps(4, 2, 4);
        let mut question = frq("f", 2, 2);
        let same = question.choices.as_ref().unwrap()[0].clone();
        question.choices = Some(vec![same; 4]);
        let p = m.predict(&question, &r).unwrap();
        assert!(p.scores.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(p.predicted, Answer::Choice(0));
        // choice at a timestamp beyond the reps falls back and is flagged
        let mut late = frq("g", 2, 0);
        late.choices.as_mut().unwrap()[1].fact.t = 7;
        assert!(m.predict(&late, &r).unwrap().fallback);
        assert!(!m.predict(&frq("h", 2, 0), &r).unwrap().fallback);
    }

    #[test]
    fn frq_matches_hand_fusion() {
        let m = model(Family::Frq, 1);
        let r = reps(4, 1, 5);
        let question = frq("f", 2, 1);
        let p = m.predict(&question, &r).unwrap();
        let ids = m.ids(&m.params).unwrap();
        let (hw, hb) = (m.params.get(ids.head_w), m.params.get(ids.head_b));
        let head = |v: &ComplexVec| {
            let x = v.flatten();
            let y: Vec<f64> = (0..2)
                .map(|i| {
                    (hw.row(i).iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + hb.data[i]).tanh()
                })
                .collect();
            cv(&[y[0]], &[y[1]])
        };
        let (fw, fb) = ids.fuse.unwrap();
        let (fw, fb) = (m.params.get(fw), m.params.get(fb));
        for (i, c) in question.choices.as_ref().unwrap().iter().enumerate() {
            let hqc =
                crate::encoder::encode_pair(&m.params, &m.vocab, &question.text, &c.text).unwrap();
            let cat: Vec<f64> = [
                head(&r.base[0]).flatten(),
                hqc.flatten(),
                head(&r.base[1]).flatten(),
            ]
            .concat();
            let fused: Vec<f64> = (0..2)
                .map(|k| fw.row(k).iter().zip(&cat).map(|(a, b)| a * b).sum::<f64>() + fb.data[k])
                .collect();
            let hp = cv(&[fused[0]], &[fused[1]]);
            let want = re_dot4(
                &head(&r.base[c.fact.s as usize]),
                &hqc,
                &conjugate(&head(&r.base[c.fact.o as usize])),
                &hp,
            )
            .unwrap();
            assert!(
                (p.scores[i] - want).abs() < 1e-12,
                "{} vs {want}",
                p.scores[i]
            );
        }
    }

    #[test]
    fn losses_match_hand_softmax() {
        let m = model(Family::Epq, 2);
        let r = reps(3, 2, 6);
        let qs = vec![
            q(
                "a",
                QType::Epq1,
                "who will e0 visit",
                vec![0],
                2,
                Answer::Entity(1),
            ),
            q(
                "b",
                QType::Epq2,
                "who will e2 meet",
                vec![2],
                1,
                Answer::Entity(0),
            ),
        ];
        let mut want = 0.0;
        for x in &qs {
            let p = m.predict(x, &r).unwrap();
            let Answer::Entity(a) = x.answer else {
                unreachable!()
            };
            let z: f64 = p.scores.iter().map(|s| s.exp()).sum();
            want -= (p.scores[a as usize].exp() / z).ln();
        }
        let got = m.loss_with(&m.params, &r, &qs).unwrap();
        assert!((got - want).abs() < 1e-12);
        // uniform FRQ scores give ln 4
        let mut f = model(Family::Frq, 2);
        let ids = f.ids(&f.params).unwrap();
        f.params
            .get_mut(ids.enc.proj_w)
            .data
            .iter_mut()
            .for_each(|x| *x = 0.0);
        let l = f
            .loss_with(&f.params, &reps(4, 2, 6), &[frq("f", 2, 3)])
            .unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let r = reps(4, 2, 7);
        let cases: Vec<(Family, Vec<Question>)> = vec![
            (
                Family::Epq,
                vec![
                    q(
                        "a",
                        QType::Epq1,
                        "who will e0 visit",
                        vec![0],
                        2,
                        Answer::Entity(3),
                    ),
                    q(
                        "b",
                        QType::Epq2,
                        "who will a meet e1",
                        vec![1],
                        1,
                        Answer::Entity(2),
                    ),
                ],
            ),
            (
                Family::Yuq,
                vec![
                    q(
                        "y",
                        QType::Yuq,
                        "will e0 visit e2",
                        vec![0, 2],
                        1,
                        Answer::YesUnknown(YesUnknown::Unknown),
                    ),
                    q(
                        "z",
                        QType::Yuq,
                        "will e3 meet e1",
                        vec![3, 1],
                        2,
                        Answer::YesUnknown(YesUnknown::Yes),
                    ),
                ],
            ),
            (Family::Frq, vec![frq("f", 2, 1), frq("g", 1, 3)]),
        ];
        for (family, qs) in cases {
            let m = model(family, 2);
            let (_, grads) = m.loss_and_gradients(&r, &qs).unwrap();
            let mut params = m.params.clone();
            for id in m.params.ids() {
                let num =
                    numeric_gradient(&mut params, id, 1e-5, |p| m.loss_with(p, &r, &qs).unwrap());
                let err = max_relative_error(grads.get(id), &num, 1e-6);
                assert!(err < 1e-4, "{family:?} {}: {err}", m.params.name(id));
            }
        }
    }

    #[test]
    fn shift_invariance_of_softmax_loss() {
        let scores = [0.3, -1.2, 2.0, 0.7];
        let shifted: Vec<f64> = scores.iter().map(|s| s + 5.0).collect();
        let ce = |s: &[f64], t: usize| crate::autograd::log_sum_exp(s) - s[t];
        assert!((ce(&scores, 2) - ce(&shifted, 2)).abs() < 1e-12);
        assert_eq!(argmax(&scores), argmax(&shifted));
    }

    #[test]
    fn single_entity_rank_is_one() {
        let m = model(Family::Epq, 2);
        let r = reps(1, 2, 8);
        let p = m
            .predict(
                &q("a", QType::Epq1, "who", vec![0], 1, Answer::Entity(0)),
                &r,
            )
            .unwrap();
        assert_eq!(p.rank, Some(1));
    }

    #[test]
    fn checkpoint_roundtrip_and_family_guard() {
        let m = model(Family::Frq, 2);
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(QaModel::read_from(&mut buf.as_slice()).unwrap(), m);
        let r = reps(4, 2, 9);
        let e = model(Family::Epq, 2);
        assert!(matches!(
            e.predict(&frq("f", 1, 0), &r),
            Err(Error::Question { .. })
        ));
    }
}
