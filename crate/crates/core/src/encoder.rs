//! Shallow trainable text encoder: tokens, attention pooling with a learned
//! query, and an affine projection to `2d` reals read as a complex vector.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::binio;
use crate::complex::{split_to_complex, ComplexVec};
use crate::error::Result;
use crate::questions::YesUnknown;

pub const CLS: &str = "[CLS]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const SEP: &str = "[SEP]";
const SPECIALS: [&str; 4] = [CLS, PAD, UNK, SEP];

pub const CLS_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

/// Lowercase, split on whitespace, and make every ASCII punctuation mark its
/// own token. Bracketed special tokens are kept whole.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        if SPECIALS.contains(&word) {
            out.push(word.to_string());
            continue;
        }
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Token to id map: the four special tokens first, then every other token
/// in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl TokenVocab {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts
            .into_iter()
            .flat_map(tokenize)
            .filter(|t| !SPECIALS.contains(&t.as_str()))
            .collect();
        Self::from_tokens(
            SPECIALS
                .iter()
                .map(|s| s.to_string())
                .chain(words)
                .collect(),
        )
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `[CLS]` followed by the ids of `text`.
    pub fn encode_ids(&self, text: &str) -> Vec<u32> {
        std::iter::once(CLS_ID)
            .chain(tokenize(text).iter().map(|t| self.id(t)))
            .collect()
    }

    /// Ids of `question [SEP] choice`.
    pub fn encode_pair_ids(&self, question: &str, choice: &str) -> Vec<u32> {
        let mut ids = self.encode_ids(question);
        ids.push(SEP_ID);
        ids.extend(tokenize(choice).iter().map(|t| self.id(t)));
        ids
    }

    /// TSV `token<TAB>id`.
    pub fn to_tsv(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_u32(w, self.tokens.len() as u32)?;
        for t in &self.tokens {
            binio::write_str(w, t)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let n = binio::read_u32(r)? as usize;
        let tokens = (0..n).map(|_| binio::read_str(r)).collect::<Result<_>>()?;
        Ok(Self::from_tokens(tokens))
    }
}

/// Encoder parameter handles inside a model's parameter store.
#[derive(Debug, Clone, Copy)]
pub struct EncoderIds {
    pub tokens: ParamId,
    pub query: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

impl EncoderIds {
    pub fn init(
        p: &mut ParamStore,
        vocab_len: usize,
        dim: usize,
        init_scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = 2 * dim;
        Self {
            tokens: p.add_uniform("enc.tokens", vocab_len, w, init_scale, rng),
            query: p.add_zeros("enc.query", 1, w),
            proj_w: p.add_near_identity("enc.proj_w", w, w, 0.05, rng),
            proj_b: p.add_zeros("enc.proj_b", 1, w),
        }
    }

    pub fn lookup(p: &ParamStore) -> Result<Self> {
        Ok(Self {
            tokens: p.require("enc.tokens")?,
            query: p.require("enc.query")?,
            proj_w: p.require("enc.proj_w")?,
            proj_b: p.require("enc.proj_b")?,
        })
    }

    /// `2d` real encoding of a token id sequence; `[PAD]` positions are
    /// ignored by the pooling.
    pub fn encode_on_tape(&self, tape: &mut Tape<'_>, ids: &[u32]) -> Var {
        let rows: Vec<Var> = ids
            .iter()
            .filter(|i| **i != PAD_ID)
            .map(|i| tape.param_row(self.tokens, *i as usize))
            .collect();
        let q = tape.param(self.query);
        let logits: Vec<Var> = rows.iter().map(|r| tape.dot(*r, q)).collect();
        let logits = tape.stack(&logits);
        let weights = tape.softmax(logits);
        let pooled = tape.weighted_sum(weights, &rows);
        tape.affine(self.proj_w, self.proj_b, pooled)
    }
}

pub fn encode(params: &ParamStore, vocab: &TokenVocab, text: &str) -> Result<ComplexVec> {
    encode_ids(params, &vocab.encode_ids(text))
}

pub fn encode_pair(
    params: &ParamStore,
    vocab: &TokenVocab,
    question: &str,
    choice: &str,
) -> Result<ComplexVec> {
    encode_ids(params, &vocab.encode_pair_ids(question, choice))
}

pub fn encode_answer_token(
    params: &ParamStore,
    vocab: &TokenVocab,
    x: YesUnknown,
) -> Result<ComplexVec> {
    encode(params, vocab, x.as_str())
}

fn encode_ids(params: &ParamStore, ids: &[u32]) -> Result<ComplexVec> {
    let enc = EncoderIds::lookup(params)?;
    let mut tape = Tape::new(params);
    let v = enc.encode_on_tape(&mut tape, ids);
    split_to_complex(tape.value(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn setup() -> (ParamStore, TokenVocab) {
        let vocab = TokenVocab::build(["Who will Sudan host on 2021-08-01?", "yes unknown"]);
        let mut p = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        EncoderIds::init(&mut p, vocab.len(), 4, 0.5, &mut rng);
        (p, vocab)
    }

    #[test]
    fn tokenizer() {
        assert_eq!(
            tokenize("Who will Sudan host, on 2021-08-01?"),
            ["who", "will", "sudan", "host", ",", "on", "2021", "-", "08", "-", "01", "?"]
        );
        assert_eq!(tokenize("a [SEP] b [PAD]"), ["a", "[SEP]", "b", "[PAD]"]);
    }

    #[test]
    fn vocab_order() {
        let (_, v) = setup();
        assert_eq!(&v.tokens()[..4], &SPECIALS.map(String::from));
        let rest = &v.tokens()[4..];
        assert!(rest.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(
            v.id("sudan"),
            v.tokens().iter().position(|t| t == "sudan").unwrap() as u32
        );
        assert_eq!(v.id("germany"), UNK_ID);
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        assert_eq!(TokenVocab::read_from(&mut buf.as_slice()).unwrap(), v);
        assert!(v.to_tsv().starts_with("[CLS]\t0\n[PAD]\t1\n"));
    }

    #[test]
    fn purity_and_shape() {
        let (p, v) = setup();
        let a = encode(&p, &v, "Who will Sudan host?").unwrap();
        let b = encode(&p, &v, "Who will Sudan host?").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 4);
        let long = encode(&p, &v, &"host ".repeat(50)).unwrap();
        assert_eq!(long.dim(), 4);
        let unk = encode(&p, &v, "zzz qqq").unwrap();
        assert!(unk.is_finite());
    }

    #[test]
    fn zero_projection_gives_zero() {
        let (mut p, v) = setup();
        let enc = EncoderIds::lookup(&p).unwrap();
        p.get_mut(enc.proj_w).data.iter_mut().for_each(|x| *x = 0.0);
        assert_eq!(
            encode(&p, &v, "Who will Sudan host?").unwrap(),
            ComplexVec::zeros(4)
        );
    }

    #[test]
    fn pair_encoding() {
        let (p, v) = setup();
        let q = "Who will Sudan host?";
        assert_eq!(
            encode_pair(&p, &v, q, "on 2021").unwrap(),
            encode(&p, &v, &format!("{q} [SEP] on 2021")).unwrap()
        );
        assert_eq!(
            encode_pair(&p, &v, q, "[PAD]").unwrap(),
            encode(&p, &v, &format!("{q} [SEP]")).unwrap()
        );
        assert_eq!(
            encode_answer_token(&p, &v, YesUnknown::Yes).unwrap(),
            encode(&p, &v, "yes").unwrap()
        );
    }

    proptest! {
        #[test]
        fn detokenize_roundtrip(s in "[ -~]{0,40}") {
            let toks = tokenize(&s);
            prop_assert_eq!(tokenize(&detokenize(&toks)), toks);
        }
    }
}
