//! Desk-scale SAE training: Adam on the mean squared reconstruction error,
//! decoder rows renormalized to unit length after every step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{normalize_rows, round_to_f32, top_k, SaeParams, SaeShape};
use crate::error::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size_tokens: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size_tokens: 256,
            steps: 2000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract("learning_rate must be positive and finite"));
        }
        if self.batch_size_tokens == 0 {
            return Err(Error::contract("batch_size_tokens must be positive"));
        }
        Ok(())
    }
}

/// Gradient of the batch loss with respect to every parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_enc: Vec<f64>,
    pub b_enc: Vec<f64>,
    pub w_dec: Vec<f64>,
    pub b_dec: Vec<f64>,
}

impl Gradients {
    fn zeros(shape: SaeShape) -> Self {
        let matrix = shape.d_latent * shape.d_in;
        Gradients {
            w_enc: vec![0.0; matrix],
            b_enc: vec![0.0; shape.d_latent],
            w_dec: vec![0.0; matrix],
            b_dec: vec![0.0; shape.d_in],
        }
    }
}

struct Forward {
    code: Vec<(u32, f64)>,
    centered: Vec<f64>,
    error: Vec<f64>,
}

fn forward(params: &SaeParams, x: &[f32]) -> Result<Forward> {
    let z = params.latents(x)?;
    let code = top_k(&z, params.k());
    let mut recon = params.b_dec().to_vec();
    for &(f, a) in &code {
        for (r, w) in recon.iter_mut().zip(params.decoder_row(f as usize)) {
            *r += a * w;
        }
    }
    let error = recon.iter().zip(x).map(|(r, &xi)| r - xi as f64).collect();
    let centered = x
        .iter()
        .zip(params.b_dec())
        .map(|(&xi, b)| xi as f64 - b)
        .collect();
    Ok(Forward {
        code,
        centered,
        error,
    })
}

fn forward_batch<V: AsRef<[f32]> + Sync>(params: &SaeParams, batch: &[V]) -> Result<Vec<Forward>> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    batch
        .par_iter()
        .map(|x| forward(params, x.as_ref()))
        .collect()
}

/// Mean over the batch of `||x - reconstruct(encode(x))||^2`.
pub fn reconstruction_loss<V: AsRef<[f32]> + Sync>(params: &SaeParams, batch: &[V]) -> Result<f64> {
    let passes = forward_batch(params, batch)?;
    let total: f64 = passes
        .iter()
        .map(|p| p.error.iter().map(|e| e * e).sum::<f64>())
        .sum();
    Ok(total / batch.len() as f64)
}

/// Loss and analytic gradients, treating the Top-K selection as a fixed mask.
pub fn reconstruction_grads<V: AsRef<[f32]> + Sync>(
    params: &SaeParams,
    batch: &[V],
) -> Result<(f64, Gradients)> {
    let passes = forward_batch(params, batch)?;
    let d_in = params.d_in();
    let scale = 2.0 / batch.len() as f64;
    let mut grads = Gradients::zeros(params.shape());
    let mut loss = 0.0;

    for pass in &passes {
        loss += pass.error.iter().map(|e| e * e).sum::<f64>();
        let g: Vec<f64> = pass.error.iter().map(|e| scale * e).collect();
        for (db, gi) in grads.b_dec.iter_mut().zip(&g) {
            *db += gi;
        }
        for &(f, a) in &pass.code {
            let f = f as usize;
            let rows = f * d_in..(f + 1) * d_in;
            let dec = &params.w_dec()[rows.clone()];
            let enc = &params.w_enc()[rows.clone()];
            let da: f64 = g.iter().zip(dec).map(|(gi, w)| gi * w).sum();
            for (dw, gi) in grads.w_dec[rows.clone()].iter_mut().zip(&g) {
                *dw += a * gi;
            }
            for (dw, c) in grads.w_enc[rows].iter_mut().zip(&pass.centered) {
                *dw += da * c;
            }
            grads.b_enc[f] += da;
            for (db, w) in grads.b_dec.iter_mut().zip(enc) {
                *db -= da * w;
            }
        }
    }
    Ok((loss / batch.len() as f64, grads))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, t: i32) {
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (((p, g), m), v) in theta.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
        }
    }
}

/// Trains a freshly initialized SAE (see [`SaeParams::init`]).
pub fn train<V: AsRef<[f32]> + Sync>(
    config: &TrainConfig,
    shape: SaeShape,
    data: &[V],
) -> Result<SaeParams> {
    let init = SaeParams::init(shape, config.seed)?;
    train_from(init, config, data)
}

/// Continues training from `init`. Batches are drawn from seeded shuffles of
/// `data`, so the result is a pure function of the inputs.
pub fn train_from<V: AsRef<[f32]> + Sync>(
    init: SaeParams,
    config: &TrainConfig,
    data: &[V],
) -> Result<SaeParams> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::input("training data is empty"));
    }
    if let Some(x) = data.iter().find(|x| x.as_ref().len() != init.d_in()) {
        return Err(Error::contract(format!(
            "training vector has dimension {}, SAE expects {}",
            x.as_ref().len(),
            init.d_in()
        )));
    }

    let shape = init.shape();
    let mut params = init;
    let matrix = shape.d_latent * shape.d_in;
    let mut opt = [
        Adam::new(matrix),
        Adam::new(shape.d_latent),
        Adam::new(matrix),
        Adam::new(shape.d_in),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_DA7A);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut batch: Vec<&[f32]> = Vec::with_capacity(config.batch_size_tokens);

    for step in 1..=config.steps {
        batch.clear();
        while batch.len() < config.batch_size_tokens {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(data[order[cursor]].as_ref());
            cursor += 1;
        }
        let (_, grads) = reconstruction_grads(&params, &batch)?;
        let lr = config.learning_rate;
        let t = step as i32;
        opt[0].step(&mut params.w_enc, &grads.w_enc, lr, t);
        opt[1].step(&mut params.b_enc, &grads.b_enc, lr, t);
        opt[2].step(&mut params.w_dec, &grads.w_dec, lr, t);
        opt[3].step(&mut params.b_dec, &grads.b_dec, lr, t);
        normalize_rows(&mut params.w_dec, shape.d_in);
        if !params.all_finite() {
            return Err(Error::input(format!(
                "training diverged at step {step}: non-finite weights"
            )));
        }
    }

    if config.steps > 0 {
        for block in [
            &mut params.w_enc,
            &mut params.b_enc,
            &mut params.w_dec,
            &mut params.b_dec,
        ] {
            round_to_f32(block);
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_data(n: usize, d: usize, seed: u64) -> Vec<Vec<f32>> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn zero_steps_returns_init() {
        let shape = SaeShape::new(4, 8, 2).unwrap();
        let cfg = TrainConfig {
            steps: 0,
            seed: 11,
            ..TrainConfig::default()
        };
        let trained = train(&cfg, shape, &toy_data(10, 4, 0)).unwrap();
        assert_eq!(trained, SaeParams::init(shape, 11).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let shape = SaeShape::new(4, 8, 2).unwrap();
        let cfg = TrainConfig {
            steps: 20,
            batch_size_tokens: 8,
            ..TrainConfig::default()
        };
        let data = toy_data(50, 4, 1);
        let a = train(&cfg, shape, &data).unwrap();
        let b = train(&cfg, shape, &data).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decoder_rows_stay_unit_norm() {
        let shape = SaeShape::new(4, 8, 2).unwrap();
        let cfg = TrainConfig {
            steps: 30,
            batch_size_tokens: 16,
            learning_rate: 1e-2,
            seed: 5,
        };
        let p = train(&cfg, shape, &toy_data(64, 4, 2)).unwrap();
        for f in 0..8 {
            let n = p.decoder_row(f).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "row {f} norm {n}");
        }
    }

    #[test]
    fn rejects_empty_or_mismatched_data() {
        let shape = SaeShape::new(4, 8, 2).unwrap();
        let cfg = TrainConfig::default();
        let empty: Vec<Vec<f32>> = Vec::new();
        assert!(matches!(train(&cfg, shape, &empty), Err(Error::Input(_))));
        assert!(matches!(
            train(&cfg, shape, &[vec![1.0f32; 3]]),
            Err(Error::Contract(_))
        ));
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(train(&bad, shape, &toy_data(4, 4, 0)).is_err());
    }
}
