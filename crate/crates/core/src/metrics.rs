//! Quality metrics for compressed contexts: answer recall, answer NLL and the
//! KL divergence between full- and compressed-context next-token
//! distributions.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::fusion::CompressedContext;

const DISTRIBUTION_TOLERANCE: f64 = 1e-9;
/// Compressed-context probabilities are floored here before renormalizing.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// Deterministic next-token distributions over a fixed vocabulary.
pub trait ProbabilityProvider {
    fn vocab_size(&self) -> usize;

    fn token_id(&self, token: &str) -> Option<usize>;

    /// Distribution of the token following `history`.
    fn next_distribution(&self, history: &[String]) -> Result<Vec<f64>>;

    /// One distribution per target: the `i`-th conditions on `context`
    /// followed by `targets[..i]`.
    fn distributions(&self, context: &[String], targets: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut history = context.to_vec();
        let mut out = Vec::with_capacity(targets.len());
        for t in targets {
            out.push(self.next_distribution(&history)?);
            history.push(t.clone());
        }
        Ok(out)
    }
}

pub fn validate_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::contract("invalid distribution: empty"));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::contract(
            "invalid distribution: negative or non-finite entry",
        ));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(Error::contract(format!(
            "invalid distribution: sums to {sum}"
        )));
    }
    Ok(())
}

/// 1 if `answer` occurs, case-insensitively, in the space-joined gathered
/// tokens.
pub fn answer_recall(compressed: &CompressedContext, answer: &str) -> Result<u8> {
    answer_recall_in(&compressed.text(), answer)
}

pub fn answer_recall_in(text: &str, answer: &str) -> Result<u8> {
    if answer.trim().is_empty() {
        return Err(Error::input("answer string is empty"));
    }
    Ok(u8::from(
        text.to_lowercase().contains(&answer.to_lowercase()),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nll {
    /// Mean negative log-likelihood; `+inf` if any answer token had zero
    /// probability.
    pub value: f64,
    pub zero_probability: bool,
}

/// Mean of `-ln p(token | context, preceding answer tokens)`.
pub fn nll<P: ProbabilityProvider + ?Sized>(
    provider: &P,
    context: &[String],
    answer: &[String],
) -> Result<Nll> {
    if answer.is_empty() {
        return Err(Error::input("answer has no tokens"));
    }
    let dists = provider.distributions(context, answer)?;
    let mut total = 0.0;
    let mut zero_probability = false;
    for (dist, tok) in dists.iter().zip(answer) {
        validate_distribution(dist)?;
        let p = provider.token_id(tok).map_or(0.0, |i| dist[i]);
        if p <= 0.0 {
            zero_probability = true;
        } else {
            total -= p.ln();
        }
    }
    let value = if zero_probability {
        f64::INFINITY
    } else {
        total / answer.len() as f64
    };
    Ok(Nll {
        value,
        zero_probability,
    })
}

/// `sum_v p(v) ln(p(v) / q(v))` with `q` floored and renormalized.
pub fn kl_between(p: &[f64], q: &[f64]) -> Result<f64> {
    validate_distribution(p)?;
    validate_distribution(q)?;
    if p.len() != q.len() {
        return Err(Error::contract(
            "distributions have different support sizes",
        ));
    }
    let floored: Vec<f64> = q.iter().map(|v| v.max(PROBABILITY_FLOOR)).collect();
    let z: f64 = floored.iter().sum();
    let kl: f64 = p
        .iter()
        .zip(&floored)
        .filter(|(pv, _)| **pv > 0.0)
        .map(|(pv, qv)| pv * (pv / (qv / z)).ln())
        .sum();
    // Rounding can leave a tiny negative sum for equal inputs.
    Ok(kl.max(0.0))
}

/// Mean KL divergence between the distributions that follow `full ++ probe`
/// and `compressed ++ probe`, over every probe suffix.
pub fn kl_divergence<P: ProbabilityProvider + ?Sized>(
    provider: &P,
    full: &[String],
    compressed: &[String],
    probes: &[Vec<String>],
) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::contract("no probe positions given"));
    }
    let mut total = 0.0;
    for probe in probes {
        let mut a = full.to_vec();
        a.extend_from_slice(probe);
        let mut b = compressed.to_vec();
        b.extend_from_slice(probe);
        total += kl_between(
            &provider.next_distribution(&a)?,
            &provider.next_distribution(&b)?,
        )?;
    }
    Ok(total / probes.len() as f64)
}

/// Probe suffixes at the end of the query and after the first answer token.
pub fn default_probes(query: &[String], answer: &[String]) -> Vec<Vec<String>> {
    let mut probes = vec![query.to_vec()];
    if let Some(first) = answer.first() {
        let mut p = query.to_vec();
        p.push(first.clone());
        probes.push(p);
    }
    probes
}

/// Share of gold positions present in the compressed context.
pub fn evidence_recall(compressed: &CompressedContext, gold: &BTreeSet<usize>) -> f64 {
    if gold.is_empty() {
        return 1.0;
    }
    let hit = gold.iter().filter(|p| compressed.contains(**p)).count();
    hit as f64 / gold.len() as f64
}

/// Intersection over union of two position sets.
pub fn iou(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Same probability for every vocabulary entry.
#[derive(Debug, Clone)]
pub struct UniformProvider {
    ids: HashMap<String, usize>,
}

impl UniformProvider {
    pub fn new<I, S>(vocab: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = vocab.into_iter().map(Into::into).collect();
        UniformProvider {
            ids: set.into_iter().enumerate().map(|(i, t)| (t, i)).collect(),
        }
    }
}

impl ProbabilityProvider for UniformProvider {
    fn vocab_size(&self) -> usize {
        self.ids.len()
    }

    fn token_id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    fn next_distribution(&self, _history: &[String]) -> Result<Vec<f64>> {
        let v = self.ids.len();
        if v == 0 {
            return Err(Error::contract("empty vocabulary"));
        }
        Ok(vec![1.0 / v as f64; v])
    }
}

/// Laplace-smoothed bigram model:
/// `p(w | prev) = (c(prev, w) + alpha) / (c(prev) + alpha * V)`, where `prev`
/// is the last history token. An empty history, or one ending in an
/// out-of-vocabulary token, yields the uniform distribution.
///
/// With context adaptation on, bigrams observed in the history are added to
/// the corpus counts, so the distribution depends on what the context
/// contains and not only on its last token.
#[derive(Debug, Clone)]
pub struct ToyLanguageModel {
    vocab: Vec<String>,
    ids: HashMap<String, usize>,
    bigrams: HashMap<(usize, usize), u64>,
    row_totals: Vec<u64>,
    alpha: f64,
    adapt_to_context: bool,
}

impl ToyLanguageModel {
    pub const ALPHA: f64 = 1.0;

    /// Vocabulary is the sorted union of `extra_vocab` and the corpus tokens.
    pub fn new<S: AsRef<str>>(corpus: &[S], extra_vocab: &[S]) -> Self {
        let vocab: Vec<String> = corpus
            .iter()
            .chain(extra_vocab)
            .map(|s| s.as_ref().to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let ids: HashMap<String, usize> = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let mut bigrams = HashMap::new();
        let mut row_totals = vec![0u64; vocab.len()];
        for w in corpus.windows(2) {
            let a = ids[w[0].as_ref()];
            let b = ids[w[1].as_ref()];
            *bigrams.entry((a, b)).or_insert(0) += 1;
            row_totals[a] += 1;
        }
        ToyLanguageModel {
            vocab,
            ids,
            bigrams,
            row_totals,
            alpha: Self::ALPHA,
            adapt_to_context: false,
        }
    }

    pub fn with_context_adaptation(mut self, on: bool) -> Self {
        self.adapt_to_context = on;
        self
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }
}

impl ProbabilityProvider for ToyLanguageModel {
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn token_id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    fn next_distribution(&self, history: &[String]) -> Result<Vec<f64>> {
        let v = self.vocab.len();
        if v == 0 {
            return Err(Error::contract("empty vocabulary"));
        }
        let Some(prev) = history.last().and_then(|t| self.token_id(t)) else {
            return Ok(vec![1.0 / v as f64; v]);
        };
        let mut row = vec![0u64; v];
        for (w, slot) in row.iter_mut().enumerate() {
            *slot = self.bigrams.get(&(prev, w)).copied().unwrap_or(0);
        }
        let mut total = self.row_totals[prev];
        if self.adapt_to_context {
            for pair in history.windows(2) {
                if self.token_id(&pair[0]) != Some(prev) {
                    continue;
                }
                if let Some(next) = self.token_id(&pair[1]) {
                    row[next] += 1;
                    total += 1;
                }
            }
        }
        let denom = total as f64 + self.alpha * v as f64;
        Ok(row
            .iter()
            .map(|&c| (c as f64 + self.alpha) / denom)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Provenance;

    fn strings(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn compressed(text: &str) -> CompressedContext {
        let tokens = strings(text);
        CompressedContext {
            positions: (0..tokens.len()).collect(),
            provenance: vec![Provenance::default(); tokens.len()],
            tokens,
        }
    }

    #[test]
    fn recall_cases() {
        let c = compressed("the Eiffel Tower is in Paris");
        assert_eq!(answer_recall(&c, "paris").unwrap(), 1);
        assert_eq!(answer_recall(&c, "eiffel tower").unwrap(), 1);
        assert_eq!(answer_recall(&c, "London").unwrap(), 0);
        assert!(answer_recall(&c, "  ").is_err());
    }

    #[test]
    fn kl_closed_form() {
        let kl = kl_between(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(kl_between(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!(kl_between(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(kl_between(&[0.5, 0.5], &[0.0, 1.0]).unwrap().is_finite());
    }

    #[test]
    fn uniform_nll_is_ln_v() {
        let p = UniformProvider::new(["a", "b", "c", "d", "e"]);
        let out = nll(&p, &strings("a b"), &strings("c d")).unwrap();
        assert!((out.value - 5f64.ln()).abs() < 1e-12);
        let miss = nll(&p, &[], &strings("zzz")).unwrap();
        assert!(miss.zero_probability && miss.value.is_infinite());
        assert!(nll(&p, &[], &[]).is_err());
    }

    #[test]
    fn toy_model_distributions_are_valid() {
        let m =
            ToyLanguageModel::new(&strings("a b a c"), &strings("d")).with_context_adaptation(true);
        for h in [vec![], strings("a"), strings("zz"), strings("a b a d a")] {
            validate_distribution(&m.next_distribution(&h).unwrap()).unwrap();
        }
        // p(b | a) = (1 + 1) / (2 + 4)
        let d = m.next_distribution(&strings("a")).unwrap();
        assert!((d[m.token_id("b").unwrap()] - 2.0 / 6.0).abs() < 1e-15);
        // The history adds a->b, a->d: (2 + 1) / (4 + 4)
        let d = m.next_distribution(&strings("a b a d a")).unwrap();
        assert!((d[m.token_id("b").unwrap()] - 3.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn identical_contexts_have_zero_kl() {
        let m = ToyLanguageModel::new(&strings("x y z x y"), &[]).with_context_adaptation(true);
        let ctx = strings("x y x z");
        let kl = kl_divergence(
            &m,
            &ctx,
            &ctx,
            &default_probes(&strings("y"), &strings("z")),
        )
        .unwrap();
        assert_eq!(kl, 0.0);
        assert!(kl_divergence(&m, &ctx, &ctx, &[]).is_err());
    }

    #[test]
    fn set_overlap_helpers() {
        let a: BTreeSet<usize> = [1, 2, 3].into();
        let b: BTreeSet<usize> = [2, 3, 4].into();
        assert_eq!(iou(&a, &b), 0.5);
        assert_eq!(iou(&a, &a), 1.0);
        let c = compressed("p q r s");
        assert_eq!(evidence_recall(&c, &[1, 2, 9, 10].into()), 0.5);
    }
}
