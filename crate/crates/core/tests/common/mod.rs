//! Shared fixtures and brute-force reference implementations for the
//! integration and acceptance tests. Nothing here calls the library's scoring,
//! smoothing or span code.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s3attn::activation::{ActivationStream, Token};
use s3attn::retrieval::QueryFeatures;
use s3attn::sae::{SaeParams, SaeShape, SparseCode};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn words(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("t{i}")).collect()
}

/// Dense activations with entries uniform in [-1, 1).
pub fn random_stream(len: usize, layers: &[u32], d_in: usize, seed: u64) -> ActivationStream {
    let mut r = rng(seed);
    ActivationStream::from_fn(
        Token::table_from_words(&words(len)),
        layers.to_vec(),
        d_in,
        |_, _, out| {
            out.iter_mut()
                .for_each(|v| *v = r.random_range(-1.0f32..1.0))
        },
    )
    .unwrap()
}

pub fn random_sae(d_in: usize, d_latent: usize, k: usize, seed: u64) -> SaeParams {
    SaeParams::init(SaeShape::new(d_in, d_latent, k).unwrap(), seed).unwrap()
}

/// Zero encoder and unit encoder bias: every latent equals 1, so every code
/// holds all `d_latent == k` features.
pub fn forced_full_sae(d_in: usize, k: usize) -> SaeParams {
    let shape = SaeShape::new(d_in, k, k).unwrap();
    let mut w_dec = vec![0.0; k * d_in];
    for f in 0..k {
        w_dec[f * d_in + f % d_in] = 1.0;
    }
    SaeParams::from_parts(
        shape,
        vec![0.0; k * d_in],
        vec![1.0; k],
        w_dec,
        vec![0.0; d_in],
    )
    .unwrap()
}

/// `codes[t][layer_idx]`.
pub fn dense_codes(stream: &ActivationStream, sae: &SaeParams) -> Vec<Vec<SparseCode>> {
    (0..stream.len())
        .map(|t| {
            (0..stream.layers().len())
                .map(|l| sae.encode(stream.vector(t, l)).unwrap())
                .collect()
        })
        .collect()
}

/// Scores every position by looping over (layer, feature) for each position,
/// accumulating in ascending layer then feature order.
pub fn brute_force_scores(
    codes: &[Vec<SparseCode>],
    layers: &[u32],
    query: &BTreeMap<u32, BTreeMap<u32, f64>>,
    stop_threshold: u64,
) -> Vec<f64> {
    let mut freq: HashMap<u32, u64> = HashMap::new();
    for per_layer in codes {
        for code in per_layer {
            for &(f, _) in code.features() {
                *freq.entry(f).or_default() += 1;
            }
        }
    }
    let mut order: Vec<(usize, u32)> = layers.iter().copied().enumerate().collect();
    order.sort_by_key(|&(_, l)| l);
    codes
        .iter()
        .map(|per_layer| {
            let mut s = 0.0;
            for &(li, layer) in &order {
                let Some(qf) = query.get(&layer) else {
                    continue;
                };
                for (&f, &w) in qf {
                    let n = freq.get(&f).copied().unwrap_or(0);
                    if n > stop_threshold {
                        continue;
                    }
                    if per_layer[li].features().iter().any(|&(g, _)| g == f) {
                        s += w * (1.0 / ((1.0 + n as f64).ln() + 1.0));
                    }
                }
            }
            s
        })
        .collect()
}

pub fn random_query(
    layers: &[u32],
    d_latent: u32,
    n: usize,
    r: &mut ChaCha8Rng,
) -> BTreeMap<u32, BTreeMap<u32, f64>> {
    let mut q: BTreeMap<u32, BTreeMap<u32, f64>> = BTreeMap::new();
    for _ in 0..n {
        let layer = layers[r.random_range(0..layers.len())];
        let f = r.random_range(0..d_latent);
        q.entry(layer)
            .or_default()
            .insert(f, r.random_range(0.1..5.0));
    }
    q
}

pub fn query_features(q: &BTreeMap<u32, BTreeMap<u32, f64>>) -> QueryFeatures {
    QueryFeatures::new(q.clone()).unwrap()
}

/// Box average written as an explicit window sum.
pub fn naive_smooth(raw: &[f64], k: usize) -> Vec<f64> {
    let h = (k / 2) as i64;
    (0..raw.len() as i64)
        .map(|i| {
            let mut s = 0.0;
            for j in i - h..=i + h {
                if j >= 0 && (j as usize) < raw.len() {
                    s += raw[j as usize];
                }
            }
            s / k as f64
        })
        .collect()
}

/// Greedy NMS by full rescans.
pub fn naive_nms(s: &[f64], top_n: usize, radius: usize) -> Vec<usize> {
    let mut alive = vec![true; s.len()];
    let mut picks = Vec::new();
    while picks.len() < top_n {
        let mut best: Option<usize> = None;
        for i in 0..s.len() {
            if alive[i] && s[i] > 0.0 && best.is_none_or(|b| s[i] > s[b]) {
                best = Some(i);
            }
        }
        let Some(c) = best else { break };
        picks.push(c);
        for (i, a) in alive.iter_mut().enumerate() {
            if i.abs_diff(c) <= radius {
                *a = false;
            }
        }
    }
    picks.sort_unstable();
    picks
}

/// Mean over held-out vectors of the squared reconstruction error.
pub fn heldout_mse(sae: &SaeParams, data: &[Vec<f32>]) -> f64 {
    data.iter()
        .map(|x| {
            let code = sae.encode(x).unwrap();
            let y = sae.reconstruct(&code).unwrap();
            x.iter()
                .zip(&y)
                .map(|(a, b)| (*a as f64 - b).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        / data.len() as f64
}

/// Vectors built from `k` atoms of a random unit dictionary with positive
/// coefficients.
pub struct SparseDictionary {
    pub d_in: usize,
    pub atoms: Vec<Vec<f64>>,
}

impl SparseDictionary {
    pub fn new(d_in: usize, n_atoms: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let atoms = (0..n_atoms)
            .map(|_| {
                let v: Vec<f64> = (0..d_in).map(|_| r.random_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        SparseDictionary { d_in, atoms }
    }

    pub fn sample(&self, n: usize, k: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut r = rng(seed);
        (0..n)
            .map(|_| {
                let mut x = vec![0.0f64; self.d_in];
                let picks = rand::seq::index::sample(&mut r, self.atoms.len(), k);
                for a in picks.iter() {
                    let c: f64 = r.random_range(0.5..1.5);
                    for (xi, ai) in x.iter_mut().zip(&self.atoms[a]) {
                        *xi += c * ai;
                    }
                }
                x.into_iter().map(|v| v as f32).collect()
            })
            .collect()
    }
}
