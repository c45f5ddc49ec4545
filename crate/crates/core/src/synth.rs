//! Seeded synthetic corpora with planted evidence.
//!
//! Every token vector is a positive combination of `atoms_per_token` atoms
//! from an orthonormal dictionary. The last `reserved_atoms` atoms never
//! appear in background text; each case draws its own evidence atoms from
//! that pool. Evidence tokens carry one evidence atom, query tokens carry all
//! of them, and distractor spans repeat the query's words over background
//! atoms only.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::activation::{write_activations, ActivationStream, Token};
use crate::error::{Error, Result};
use crate::sae::{normalize_rows, train_from, write_params, SaeParams, SaeShape, TrainConfig};

pub const SAE_FILE: &str = "sae.s3sa";
pub const CONTEXT_FILE: &str = "context.s3ac";
pub const QUERY_FILE: &str = "query.s3ac";
pub const GOLD_FILE: &str = "gold.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub context_len: usize,
    pub layers: Vec<u32>,
    pub d_in: usize,
    pub reserved_atoms: usize,
    pub atoms_per_token: usize,
    /// Share of context positions inside evidence spans.
    pub evidence_fraction: f64,
    pub evidence_spans: usize,
    pub distractor_spans: usize,
    pub distractor_len: usize,
    pub query_len: usize,
    pub vocab_size: usize,
    /// Positions at each end kept free of planted spans.
    pub edge_margin: usize,
    pub train_steps: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            context_len: 2000,
            layers: vec![8, 16],
            d_in: 64,
            reserved_atoms: 16,
            atoms_per_token: 3,
            evidence_fraction: 0.02,
            evidence_spans: 2,
            distractor_spans: 2,
            distractor_len: 12,
            query_len: 6,
            vocab_size: 400,
            edge_margin: 80,
            train_steps: 100,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn background_atoms(&self) -> usize {
        self.d_in - self.reserved_atoms
    }

    pub fn evidence_len(&self) -> usize {
        let total = (self.evidence_fraction * self.context_len as f64).round() as usize;
        total / self.evidence_spans.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.atoms_per_token;
        if self.layers.is_empty() || self.d_in == 0 || self.context_len == 0 || self.query_len == 0
        {
            return Err(Error::contract(
                "synthetic corpus needs layers, d_in, context and query length",
            ));
        }
        if k < 2 || self.reserved_atoms < k || self.background_atoms() < k {
            return Err(Error::contract(
                "need at least atoms_per_token reserved and background atoms, and atoms_per_token >= 2",
            ));
        }
        if !(0.0..1.0).contains(&self.evidence_fraction)
            || self.evidence_spans == 0
            || self.evidence_len() < 2
        {
            return Err(Error::contract(
                "evidence spans must hold at least two tokens each",
            ));
        }
        if self.vocab_size < self.query_len {
            return Err(Error::contract("vocab_size must be at least query_len"));
        }
        let slots = self.evidence_spans + self.distractor_spans;
        let usable = self.context_len.saturating_sub(2 * self.edge_margin);
        let longest = self.evidence_len().max(self.distractor_len);
        if usable / slots < longest {
            return Err(Error::contract(
                "context too short for the requested planted spans",
            ));
        }
        Ok(())
    }
}

/// Ground truth stored next to each case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gold {
    pub answer: String,
    /// Inclusive `[start, end]` position ranges.
    #[serde(default)]
    pub evidence: Vec<[usize; 2]>,
    #[serde(default)]
    pub distractors: Vec<[usize; 2]>,
    #[serde(default)]
    pub evidence_atoms: Vec<u32>,
}

impl Gold {
    pub fn evidence_positions(&self) -> BTreeSet<usize> {
        self.evidence.iter().flat_map(|[a, b]| *a..=*b).collect()
    }

    pub fn answer_tokens(&self) -> Vec<String> {
        self.answer.split_whitespace().map(str::to_string).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCase {
    pub id: String,
    pub context: ActivationStream,
    pub query: ActivationStream,
    pub gold: Gold,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub sae: SaeParams,
    pub cases: Vec<SyntheticCase>,
}

/// Orthonormal `d × d` dictionary, row-major, rounded to f32.
pub fn planted_dictionary(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1C7);
    let mut rows: Vec<f64> = (0..d * d).map(|_| rng.sample(StandardNormal)).collect();
    for i in 0..d {
        for j in 0..i {
            let dot: f64 = (0..d).map(|c| rows[i * d + c] * rows[j * d + c]).sum();
            for c in 0..d {
                rows[i * d + c] -= dot * rows[j * d + c];
            }
        }
        normalize_rows(&mut rows[i * d..(i + 1) * d], d);
    }
    rows.iter_mut().for_each(|v| *v = *v as f32 as f64);
    rows
}

fn combine(dictionary: &[f64], d: usize, atoms: &[(usize, f32)], out: &mut [f32]) {
    out.fill(0.0);
    for &(a, c) in atoms {
        for (o, w) in out.iter_mut().zip(&dictionary[a * d..(a + 1) * d]) {
            *o += c * *w as f32;
        }
    }
}

fn coefficient(rng: &mut ChaCha8Rng) -> f32 {
    rng.random_range(1.0f32..2.0)
}

/// Tied SAE whose latents are the dictionary atoms, fine-tuned briefly on
/// samples from the generator.
pub fn planted_sae(config: &SynthConfig) -> Result<SaeParams> {
    let d = config.d_in;
    let shape = SaeShape::new(d, d, config.atoms_per_token)?;
    let dictionary = planted_dictionary(d, config.seed);
    let init = SaeParams::from_parts(
        shape,
        dictionary.clone(),
        vec![0.0; d],
        dictionary.clone(),
        vec![0.0; d],
    )?;
    if config.train_steps == 0 {
        return Ok(init);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7EA1);
    let all: Vec<usize> = (0..d).collect();
    let samples: Vec<Vec<f32>> = (0..2048)
        .map(|_| {
            let atoms: Vec<(usize, f32)> = all
                .choose_multiple(&mut rng, config.atoms_per_token)
                .map(|&a| (a, coefficient(&mut rng)))
                .collect();
            let mut v = vec![0f32; d];
            combine(&dictionary, d, &atoms, &mut v);
            v
        })
        .collect();
    let train = TrainConfig {
        learning_rate: 1e-5,
        batch_size_tokens: 256,
        steps: config.train_steps,
        seed: config.seed,
    };
    train_from(init, &train, &samples)
}

/// Evenly spaced slots, each holding one planted span at a random offset.
fn place_spans(config: &SynthConfig, rng: &mut ChaCha8Rng) -> (Vec<[usize; 2]>, Vec<[usize; 2]>) {
    let slots = config.evidence_spans + config.distractor_spans;
    let usable = config.context_len - 2 * config.edge_margin;
    let slot_len = usable / slots;
    let mut kinds: Vec<bool> = (0..slots).map(|i| i < config.evidence_spans).collect();
    kinds.shuffle(rng);
    let mut evidence = Vec::new();
    let mut distractors = Vec::new();
    for (i, is_evidence) in kinds.into_iter().enumerate() {
        let len = if is_evidence {
            config.evidence_len()
        } else {
            config.distractor_len
        };
        let base = config.edge_margin + i * slot_len;
        let start = base + rng.random_range(0..=slot_len - len);
        let range = [start, start + len - 1];
        if is_evidence {
            evidence.push(range);
        } else {
            distractors.push(range);
        }
    }
    (evidence, distractors)
}

pub fn generate_case(config: &SynthConfig, dictionary: &[f64], case: u64) -> Result<SyntheticCase> {
    let d = config.d_in;
    let k = config.atoms_per_token;
    let n = config.context_len;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(case + 1);

    let id = format!("case-{case:04}");
    let background: Vec<usize> = (0..config.background_atoms()).collect();
    let reserved: Vec<usize> = (config.background_atoms()..d).collect();
    let evidence_atoms: Vec<usize> = {
        let mut a: Vec<usize> = reserved.choose_multiple(&mut rng, k).copied().collect();
        a.sort_unstable();
        a
    };
    let words: Vec<String> = (0..config.vocab_size).map(|i| format!("w{i}")).collect();
    let query_words: Vec<String> = words
        .choose_multiple(&mut rng, config.query_len)
        .cloned()
        .collect();
    let (evidence, distractors) = place_spans(config, &mut rng);

    let mut text: Vec<String> = (0..n)
        .map(|_| words.choose(&mut rng).unwrap().clone())
        .collect();
    for [a, b] in &distractors {
        for (j, p) in (*a..=*b).enumerate() {
            if j % 2 == 0 {
                text[p] = query_words[(j / 2) % query_words.len()].clone();
            }
        }
    }
    let answer_words = [format!("zx{case:04}a"), format!("zx{case:04}b")];
    let [ea, _] = evidence[0];
    let mid = ea + (config.evidence_len() - 2) / 2;
    text[mid] = answer_words[0].clone();
    text[mid + 1] = answer_words[1].clone();

    let mut is_evidence = vec![false; n];
    for [a, b] in &evidence {
        is_evidence[*a..=*b].iter_mut().for_each(|f| *f = true);
    }
    let layers = config.layers.len();
    let mut plan: Vec<Vec<(usize, f32)>> = Vec::with_capacity(n * layers);
    for (p, &ev) in is_evidence.iter().enumerate() {
        let atoms: Vec<usize> = if ev {
            let mut a = vec![evidence_atoms[p % k]];
            a.extend(background.choose_multiple(&mut rng, k - 1));
            a
        } else {
            background.choose_multiple(&mut rng, k).copied().collect()
        };
        for _ in 0..layers {
            plan.push(atoms.iter().map(|&a| (a, coefficient(&mut rng))).collect());
        }
    }
    let context = ActivationStream::from_fn(
        Token::table_from_words(&text),
        config.layers.clone(),
        d,
        |p, l, out| combine(dictionary, d, &plan[p * layers + l], out),
    )?;

    let query_plan: Vec<Vec<(usize, f32)>> = (0..config.query_len * layers)
        .map(|_| {
            evidence_atoms
                .iter()
                .map(|&a| (a, coefficient(&mut rng)))
                .collect()
        })
        .collect();
    let query = ActivationStream::from_fn(
        Token::table_from_words(&query_words),
        config.layers.clone(),
        d,
        |p, l, out| combine(dictionary, d, &query_plan[p * layers + l], out),
    )?;

    Ok(SyntheticCase {
        id,
        context,
        query,
        gold: Gold {
            answer: answer_words.join(" "),
            evidence,
            distractors,
            evidence_atoms: evidence_atoms.iter().map(|&a| a as u32).collect(),
        },
    })
}

pub fn generate_corpus(config: &SynthConfig, n_cases: usize) -> Result<SynthCorpus> {
    config.validate()?;
    if n_cases == 0 {
        return Err(Error::contract("n_cases must be at least 1"));
    }
    let sae = planted_sae(config)?;
    let dictionary = planted_dictionary(config.d_in, config.seed);
    let cases = (0..n_cases as u64)
        .map(|i| generate_case(config, &dictionary, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthCorpus {
        config: config.clone(),
        sae,
        cases,
    })
}

/// Layout: `sae.s3sa` at the root and one directory per case holding
/// `context.s3ac`, `query.s3ac` and `gold.json`.
pub fn write_corpus(corpus: &SynthCorpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(SAE_FILE))?);
    write_params(&mut w, &corpus.sae)?;
    w.flush()?;
    for case in &corpus.cases {
        let case_dir = dir.join(&case.id);
        fs::create_dir_all(&case_dir)?;
        for (name, stream) in [(CONTEXT_FILE, &case.context), (QUERY_FILE, &case.query)] {
            let mut w = BufWriter::new(File::create(case_dir.join(name))?);
            write_activations(&mut w, stream)?;
            w.flush()?;
        }
        let gold =
            serde_json::to_string_pretty(&case.gold).map_err(|e| Error::format(e.to_string()))?;
        fs::write(case_dir.join(GOLD_FILE), gold + "\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            context_len: 600,
            train_steps: 5,
            ..Default::default()
        }
    }

    #[test]
    fn dictionary_is_orthonormal() {
        let d = 16;
        let m = planted_dictionary(d, 3);
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d).map(|c| m[i * d + c] * m[j * d + c]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-5, "{i} {j} {dot}");
            }
        }
    }

    #[test]
    fn spans_are_disjoint_and_inside_margins() {
        let c = SynthConfig::default();
        let corpus = generate_corpus(
            &SynthConfig {
                train_steps: 0,
                ..c.clone()
            },
            20,
        )
        .unwrap();
        for case in &corpus.cases {
            let mut all: Vec<[usize; 2]> = case
                .gold
                .evidence
                .iter()
                .chain(&case.gold.distractors)
                .copied()
                .collect();
            all.sort();
            assert_eq!(all.len(), 4);
            for w in all.windows(2) {
                assert!(w[0][1] < w[1][0]);
            }
            assert!(all[0][0] >= c.edge_margin && all[3][1] < c.context_len - c.edge_margin);
            assert_eq!(case.gold.evidence_positions().len(), 40);
        }
    }

    #[test]
    fn codes_recover_planted_atoms() {
        let corpus = generate_corpus(&small(), 1).unwrap();
        let case = &corpus.cases[0];
        let atoms: BTreeSet<u32> = case.gold.evidence_atoms.iter().copied().collect();
        for p in 0..case.query.len() {
            let code = corpus.sae.encode(case.query.vector(p, 0)).unwrap();
            assert_eq!(code.ids().collect::<BTreeSet<_>>(), atoms);
        }
        let [a, _] = case.gold.evidence[0];
        let code = corpus.sae.encode(case.context.vector(a, 1)).unwrap();
        assert_eq!(code.ids().filter(|f| atoms.contains(f)).count(), 1);
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate_corpus(&small(), 2).unwrap();
        let b = generate_corpus(&small(), 2).unwrap();
        assert_eq!(a.sae, b.sae);
        assert_eq!(a.cases[1].context, b.cases[1].context);
        assert_eq!(a.cases[1].gold, b.cases[1].gold);
        assert_ne!(a.cases[0].gold, a.cases[1].gold);
    }

    #[test]
    fn rejects_impossible_layouts() {
        let c = SynthConfig {
            context_len: 200,
            ..Default::default()
        };
        assert!(generate_corpus(&c, 1).is_err());
        assert!(generate_corpus(&SynthConfig::default(), 0).is_err());
    }
}
