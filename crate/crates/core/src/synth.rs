//! Planted-rule synthetic corpus.
//!
//! Every day a few distinct subjects `a` fire the trigger relation towards
//! some `b`; the next day `(a, consequence, b)` holds. The remaining facts
//! use noise relations chosen uniformly at random.

use chrono::{Days, NaiveDate};
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tkg::{EntityId, Quadruple, RelationId, TemporalKG, Vocab};

pub const TRIGGER: RelationId = 0;
pub const CONSEQUENCE: RelationId = 1;

const RELATION_PHRASES: &[&str] = &[
    "accuse",
    "engage in diplomatic cooperation with",
    "host",
    "criticize",
    "praise",
    "threaten",
    "consult",
    "visit",
    "sign an agreement with",
    "make a statement about",
    "appeal to",
    "sanction",
];

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ran", "su", "te", "vo", "bel", "dor", "ni", "pa", "zu",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub entities: usize,
    pub relations: usize,
    pub days: usize,
    /// Trigger facts per day; each has a distinct subject.
    pub triggers_per_day: usize,
    pub noise_per_day: usize,
    pub start: NaiveDate,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            entities: 30,
            relations: 10,
            days: 60,
            triggers_per_day: 6,
            noise_per_day: 6,
            start: NaiveDate::from_ymd_opt(2021, 1, 1).unwrap(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.entities < 2 {
            return Err(Error::config("entities", "need at least 2"));
        }
        if self.relations < 3 {
            return Err(Error::config(
                "relations",
                "need trigger, consequence and one noise relation",
            ));
        }
        if self.days < 2 {
            return Err(Error::config("days", "need at least 2"));
        }
        if self.triggers_per_day > self.entities {
            return Err(Error::config(
                "triggers_per_day",
                "cannot exceed the entity count",
            ));
        }
        Ok(())
    }
}

/// Pronounceable, distinct entity names derived from the index.
pub fn entity_name(i: usize) -> String {
    let n = SYLLABLES.len();
    let mut name = String::new();
    let mut k = i;
    loop {
        name.push_str(SYLLABLES[k % n]);
        k /= n;
        if k == 0 {
            break;
        }
        k -= 1;
    }
    name.push_str(["ia", "stan", "land", "ora"][i % 4]);
    let mut chars = name.chars();
    let first = chars.next().unwrap().to_ascii_uppercase();
    std::iter::once(first).chain(chars).collect()
}

pub fn relation_name(i: usize) -> String {
    RELATION_PHRASES
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("interact type {i} with"))
}

pub fn generate(cfg: &SynthConfig) -> Result<(Vocab, TemporalKG)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ne = cfg.entities as EntityId;
    let entities: Vec<EntityId> = (0..ne).collect();
    let mut quads = Vec::new();
    for day in 0..cfg.days as u32 {
        if day + 1 < cfg.days as u32 {
            let mut subjects = entities.clone();
            subjects.shuffle(&mut rng);
            for &a in &subjects[..cfg.triggers_per_day] {
                let mut b = rng.random_range(0..ne - 1);
                if b >= a {
                    b += 1;
                }
                quads.push(Quadruple::new(a, TRIGGER, b, day));
                quads.push(Quadruple::new(a, CONSEQUENCE, b, day + 1));
            }
        }
        for _ in 0..cfg.noise_per_day {
            let s = rng.random_range(0..ne);
            let o = rng.random_range(0..ne);
            let r = rng.random_range(2..cfg.relations as RelationId);
            quads.push(Quadruple::new(s, r, o, day));
        }
    }
    let end = cfg
        .start
        .checked_add_days(Days::new(cfg.days as u64 - 1))
        .ok_or_else(|| Error::config("days", "date overflow"))?;
    let vocab = Vocab::new(
        (0..cfg.entities).map(entity_name).collect(),
        (0..cfg.relations).map(relation_name).collect(),
        cfg.start.iter_days().take_while(|d| *d <= end).collect(),
    )?;
    let kg = TemporalKG::new(quads, cfg.entities, cfg.relations, cfg.days)?;
    Ok((vocab, kg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn names_are_distinct() {
        let names: HashSet<String> = (0..500).map(entity_name).collect();
        assert_eq!(names.len(), 500);
        assert!(names.iter().all(|n| !n.contains(' ')));
    }

    #[test]
    fn rule_holds_and_is_deterministic() {
        let cfg = SynthConfig::default();
        let (vocab, kg) = generate(&cfg).unwrap();
        assert_eq!(vocab.num_entities(), 30);
        assert_eq!(vocab.num_timestamps(), 60);
        for q in kg
            .quads()
            .iter()
            .filter(|q| q.r == TRIGGER && (q.t as usize) + 1 < cfg.days)
        {
            assert!(kg.contains(&Quadruple::new(q.s, CONSEQUENCE, q.o, q.t + 1)));
        }
        for q in kg.quads().iter().filter(|q| q.r == CONSEQUENCE) {
            assert!(kg.contains(&Quadruple::new(q.s, TRIGGER, q.o, q.t - 1)));
        }
        // one consequence per (subject, day)
        let mut seen = HashSet::new();
        for q in kg.quads().iter().filter(|q| q.r == CONSEQUENCE) {
            assert!(seen.insert((q.s, q.t)));
        }
        let (_, again) = generate(&cfg).unwrap();
        assert_eq!(kg, again);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = SynthConfig {
            relations: 2,
            ..Default::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config { .. })));
    }
}
