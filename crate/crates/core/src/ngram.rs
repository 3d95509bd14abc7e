//! Interpolated Kneser-Ney trigram models and the cross-artist NLL matrix.
//!
//! Lines are padded with two BOS symbols and one EOS. The predictable set is
//! the training types plus UNK and EOS; the unigram level interpolates with a
//! uniform distribution over that set, so every probability is positive.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::SPECIAL_TOKENS;
use crate::error::{Error, Result};

pub const DISCOUNT: f64 = 0.75;

const BOS: u32 = 0;
const EOS: u32 = 1;
const UNK: u32 = 2;

#[derive(Debug, Clone, Default)]
struct ContextStats {
    /// Sum of counts following the context.
    total: usize,
    /// Distinct follower types.
    types: usize,
}

#[derive(Debug, Clone)]
pub struct KneserNeyModel {
    discount: f64,
    ids: HashMap<String, u32>,
    /// Token per id; id 0 is BOS and is never predicted.
    tokens: Vec<String>,
    trigrams: HashMap<(u32, u32, u32), usize>,
    trigram_contexts: HashMap<(u32, u32), ContextStats>,
    /// `N1+(• v w)`
    bigram_continuation: HashMap<(u32, u32), usize>,
    /// Per `v`: `Σ_w N1+(• v w)` and `|{w : N1+(• v w) > 0}|`.
    bigram_contexts: HashMap<u32, ContextStats>,
    /// `N1+(• w)`, indexed by id.
    unigram_continuation: Vec<usize>,
    /// `N1+(• •)`
    bigram_types: usize,
    unigram_types: usize,
}

pub fn fit_kn<S: AsRef<str>>(lines: &[Vec<S>]) -> Result<KneserNeyModel> {
    fit_kn_with_discount(lines, DISCOUNT)
}

pub fn fit_kn_with_discount<S: AsRef<str>>(lines: &[Vec<S>], discount: f64) -> Result<KneserNeyModel> {
    if !(discount > 0.0 && discount < 1.0) {
        return Err(Error::InvalidConfig(format!("discount {discount} outside (0, 1)")));
    }
    if !lines.iter().any(|l| !l.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    let mut tokens: Vec<String> = vec![SPECIAL_TOKENS[2].into(), SPECIAL_TOKENS[3].into(), SPECIAL_TOKENS[1].into()];
    let mut ids: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
    let mut trigrams: HashMap<(u32, u32, u32), usize> = HashMap::new();
    for line in lines.iter().filter(|l| !l.is_empty()) {
        let mut seq = vec![BOS, BOS];
        for t in line {
            let t = t.as_ref();
            let id = *ids.entry(t.to_string()).or_insert_with(|| {
                tokens.push(t.to_string());
                tokens.len() as u32 - 1
            });
            seq.push(id);
        }
        seq.push(EOS);
        for w in seq.windows(3) {
            *trigrams.entry((w[0], w[1], w[2])).or_default() += 1;
        }
    }

    let mut trigram_contexts: HashMap<(u32, u32), ContextStats> = HashMap::new();
    let mut bigram_continuation: HashMap<(u32, u32), usize> = HashMap::new();
    for (&(u, v, w), &c) in &trigrams {
        let s = trigram_contexts.entry((u, v)).or_default();
        s.total += c;
        s.types += 1;
        *bigram_continuation.entry((v, w)).or_default() += 1;
    }
    let mut bigram_contexts: HashMap<u32, ContextStats> = HashMap::new();
    let mut unigram_continuation = vec![0usize; tokens.len()];
    for (&(v, w), &n) in &bigram_continuation {
        let s = bigram_contexts.entry(v).or_default();
        s.total += n;
        s.types += 1;
        unigram_continuation[w as usize] += 1;
    }
    let bigram_types = bigram_continuation.len();
    let unigram_types = unigram_continuation.iter().filter(|&&n| n > 0).count();
    Ok(KneserNeyModel {
        discount,
        ids,
        tokens,
        trigrams,
        trigram_contexts,
        bigram_continuation,
        bigram_contexts,
        unigram_continuation,
        bigram_types,
        unigram_types,
    })
}

impl KneserNeyModel {
    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Predictable tokens: training types, UNK and EOS.
    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.tokens[1..].iter().map(String::as_str)
    }

    /// Size of the predictable set.
    pub fn vocab_size(&self) -> usize {
        self.tokens.len() - 1
    }

    fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    fn p1(&self, w: u32) -> f64 {
        let d = self.discount;
        let t = self.bigram_types as f64;
        let n = self.unigram_continuation.get(w as usize).copied().unwrap_or(0) as f64;
        (n - d).max(0.0) / t + d * self.unigram_types as f64 / t / self.vocab_size() as f64
    }

    fn p2(&self, v: u32, w: u32) -> f64 {
        let Some(ctx) = self.bigram_contexts.get(&v) else {
            return self.p1(w);
        };
        let d = self.discount;
        let total = ctx.total as f64;
        let n = self.bigram_continuation.get(&(v, w)).copied().unwrap_or(0) as f64;
        (n - d).max(0.0) / total + d * ctx.types as f64 / total * self.p1(w)
    }

    fn p3(&self, u: u32, v: u32, w: u32) -> f64 {
        let Some(ctx) = self.trigram_contexts.get(&(u, v)) else {
            return self.p2(v, w);
        };
        let d = self.discount;
        let total = ctx.total as f64;
        let c = self.trigrams.get(&(u, v, w)).copied().unwrap_or(0) as f64;
        (c - d).max(0.0) / total + d * ctx.types as f64 / total * self.p2(v, w)
    }

    /// `P(w | u, v)`. Use `<s>` for BOS and `</s>` for EOS; unknown tokens read as UNK.
    pub fn prob(&self, u: &str, v: &str, w: &str) -> f64 {
        let w = self.id(w);
        if w == BOS {
            return 0.0;
        }
        self.p3(self.id(u), self.id(v), w)
    }

    /// `Σ ln P(w_t | w_{t−2}, w_{t−1})` over the padded line, EOS included.
    pub fn logprob_line<S: AsRef<str>>(&self, line: &[S]) -> Result<f64> {
        if line.is_empty() {
            return Err(Error::EmptyLine);
        }
        let mut seq = vec![BOS, BOS];
        seq.extend(line.iter().map(|t| match self.id(t.as_ref()) {
            BOS => UNK,
            id => id,
        }));
        seq.push(EOS);
        Ok(seq.windows(3).map(|w| self.p3(w[0], w[1], w[2]).ln()).sum())
    }
}

/// Rows are generating artists, columns the scoring artist's model; entries
/// are mean per-line NLL in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllMatrix {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl NllMatrix {
    pub fn new(names: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        let k = names.len();
        if values.len() != k || values.iter().any(|r| r.len() != k) {
            return Err(Error::Shape {
                op: "nll matrix",
                lhs: vec![values.len(), values.first().map_or(0, Vec::len)],
                rhs: vec![k, k],
            });
        }
        Ok(NllMatrix { names, values })
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    /// Tab-separated with artist names as headers and two decimals per entry.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for n in &self.names {
            out.push('\t');
            out.push_str(n);
        }
        out.push('\n');
        for (name, row) in self.names.iter().zip(&self.values) {
            out.push_str(name);
            for v in row {
                write!(out, "\t{v:.2}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::InvalidInput("empty NLL table".into()))?;
        let names: Vec<String> = header.split('\t').skip(1).map(str::to_string).collect();
        let mut values = Vec::new();
        for line in lines {
            let row: Vec<f64> = line
                .split('\t')
                .skip(1)
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidInput(format!("NLL table: {e}")))?;
            values.push(row);
        }
        Self::new(names, values)
    }
}

/// Entry `(i, j)` is the mean of `−logprob` of artist `i`'s lines under model `j`.
pub fn nll_matrix<S: AsRef<str>>(
    names: &[String],
    generated: &[Vec<Vec<S>>],
    models: &[KneserNeyModel],
) -> Result<NllMatrix> {
    let k = names.len();
    if generated.len() != k || models.len() != k {
        return Err(Error::Shape {
            op: "nll matrix",
            lhs: vec![generated.len(), models.len()],
            rhs: vec![k, k],
        });
    }
    let mut values = Vec::with_capacity(k);
    for lines in generated {
        if lines.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut row = Vec::with_capacity(k);
        for model in models {
            let mut total = 0.0;
            for line in lines {
                total -= model.logprob_line(line)?;
            }
            row.push(total / lines.len() as f64);
        }
        values.push(row);
    }
    NllMatrix::new(names.to_vec(), values)
}

/// Rows whose strict, unique minimum is on the diagonal. Ties with the diagonal do not count.
pub fn diag_argmin_count(m: &NllMatrix) -> usize {
    m.values
        .iter()
        .enumerate()
        .filter(|(i, row)| row.iter().enumerate().all(|(j, &v)| j == *i || row[*i] < v))
        .count()
}
