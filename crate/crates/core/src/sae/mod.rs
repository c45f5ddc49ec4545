//! Top-K sparse autoencoder.
//!
//! An activation vector `x` is encoded as `z = ReLU(W_enc (x - b_dec) + b_enc)`
//! and only the `k` largest entries of `z` survive. Decoding is the linear map
//! `x_hat = sum_f a_f * W_dec[f] + b_dec`.
//!
//! Weights are held in `f64` but are always exactly representable as `f32`, so
//! a parameter file round-trips bit-for-bit.

mod format;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub use format::{read_params, write_params, Fingerprint, SAE_FORMAT_VERSION, SAE_MAGIC};
pub use train::{
    reconstruction_grads, reconstruction_loss, train, train_from, Gradients, TrainConfig,
};

/// Dimensions of a sparse autoencoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SaeShape {
    pub d_in: usize,
    pub d_latent: usize,
    pub k: usize,
}

impl SaeShape {
    pub fn new(d_in: usize, d_latent: usize, k: usize) -> Result<Self> {
        let shape = SaeShape { d_in, d_latent, k };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_latent == 0 || self.k == 0 {
            return Err(Error::contract(format!(
                "SAE dimensions must be positive (d_in={}, d_latent={}, k={})",
                self.d_in, self.d_latent, self.k
            )));
        }
        if self.k > self.d_latent {
            return Err(Error::contract(format!(
                "k={} exceeds d_latent={}",
                self.k, self.d_latent
            )));
        }
        if self.d_latent < self.d_in {
            return Err(Error::contract(format!(
                "d_latent={} is smaller than d_in={}",
                self.d_latent, self.d_in
            )));
        }
        if self.d_latent > u32::MAX as usize {
            return Err(Error::contract("d_latent does not fit in a u32 feature id"));
        }
        Ok(())
    }
}

/// Sparse code of one activation vector: active feature ids in increasing
/// order, each with a strictly positive activation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseCode {
    features: Vec<(u32, f64)>,
}

impl SparseCode {
    /// Builds a code from `(feature, activation)` pairs. Pairs are sorted by id;
    /// duplicate ids and non-positive activations are rejected.
    pub fn new(mut features: Vec<(u32, f64)>) -> Result<Self> {
        features.sort_by_key(|&(f, _)| f);
        if features.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::contract("duplicate feature id in sparse code"));
        }
        if let Some(&(f, a)) = features.iter().find(|&&(_, a)| !(a > 0.0 && a.is_finite())) {
            return Err(Error::contract(format!(
                "feature {f} has non-positive activation {a}"
            )));
        }
        Ok(SparseCode { features })
    }

    pub fn features(&self) -> &[(u32, f64)] {
        &self.features
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.features.iter().map(|&(f, _)| f)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn contains(&self, feature: u32) -> bool {
        self.activation(feature).is_some()
    }

    pub fn activation(&self, feature: u32) -> Option<f64> {
        self.features
            .binary_search_by_key(&feature, |&(f, _)| f)
            .ok()
            .map(|i| self.features[i].1)
    }
}

/// Parameters of a Top-K sparse autoencoder.
///
/// `w_enc` and `w_dec` are both `d_latent x d_in`, row-major: row `f` of
/// `w_enc` is the encoder direction of feature `f`, row `f` of `w_dec` its
/// decoder direction.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    shape: SaeShape,
    w_enc: Vec<f64>,
    b_enc: Vec<f64>,
    w_dec: Vec<f64>,
    b_dec: Vec<f64>,
}

impl SaeParams {
    pub fn from_parts(
        shape: SaeShape,
        w_enc: Vec<f64>,
        b_enc: Vec<f64>,
        w_dec: Vec<f64>,
        b_dec: Vec<f64>,
    ) -> Result<Self> {
        shape.validate()?;
        let matrix = shape.d_latent * shape.d_in;
        let checks = [
            ("W_enc", w_enc.len(), matrix),
            ("b_enc", b_enc.len(), shape.d_latent),
            ("W_dec", w_dec.len(), matrix),
            ("b_dec", b_dec.len(), shape.d_in),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::contract(format!(
                    "{name} has {got} entries, expected {want}"
                )));
            }
        }
        let params = SaeParams {
            shape,
            w_enc,
            b_enc,
            w_dec,
            b_dec,
        };
        if !params.all_finite() {
            return Err(Error::input("SAE weights contain NaN or infinity"));
        }
        Ok(params)
    }

    /// Seeded initialization: decoder rows drawn uniform in
    /// `[-1/sqrt(d_in), 1/sqrt(d_in)]` and normalized to unit length, encoder
    /// tied to the decoder, biases zero.
    pub fn init(shape: SaeShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (shape.d_in as f64).sqrt();
        let mut w_dec: Vec<f64> = (0..shape.d_latent * shape.d_in)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        normalize_rows(&mut w_dec, shape.d_in);
        round_to_f32(&mut w_dec);
        let w_enc = w_dec.clone();
        Self::from_parts(
            shape,
            w_enc,
            vec![0.0; shape.d_latent],
            w_dec,
            vec![0.0; shape.d_in],
        )
    }

    pub fn shape(&self) -> SaeShape {
        self.shape
    }

    pub fn d_in(&self) -> usize {
        self.shape.d_in
    }

    pub fn d_latent(&self) -> usize {
        self.shape.d_latent
    }

    pub fn k(&self) -> usize {
        self.shape.k
    }

    pub fn w_enc(&self) -> &[f64] {
        &self.w_enc
    }

    pub fn b_enc(&self) -> &[f64] {
        &self.b_enc
    }

    pub fn w_dec(&self) -> &[f64] {
        &self.w_dec
    }

    pub fn b_dec(&self) -> &[f64] {
        &self.b_dec
    }

    pub fn decoder_row(&self, feature: usize) -> &[f64] {
        &self.w_dec[feature * self.shape.d_in..(feature + 1) * self.shape.d_in]
    }

    pub fn into_parts(self) -> (SaeShape, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        (self.shape, self.w_enc, self.b_enc, self.w_dec, self.b_dec)
    }

    pub fn fingerprint(&self) -> Fingerprint {
        format::fingerprint(self)
    }

    fn all_finite(&self) -> bool {
        [&self.w_enc, &self.b_enc, &self.w_dec, &self.b_dec]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// ReLU pre-activations `z` for every latent.
    pub fn latents(&self, x: &[f32]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let d_in = self.shape.d_in;
        let centered: Vec<f64> = x
            .iter()
            .zip(&self.b_dec)
            .map(|(&xi, &b)| xi as f64 - b)
            .collect();
        Ok(self
            .w_enc
            .chunks_exact(d_in)
            .zip(&self.b_enc)
            .map(|(row, &b)| {
                let pre = row.iter().zip(&centered).map(|(w, c)| w * c).sum::<f64>() + b;
                pre.max(0.0)
            })
            .collect())
    }

    /// Encodes `x` into its Top-K sparse code. Zero activations are dropped,
    /// so a code may hold fewer than `k` features; ties go to the smaller id.
    pub fn encode(&self, x: &[f32]) -> Result<SparseCode> {
        let z = self.latents(x)?;
        Ok(SparseCode {
            features: top_k(&z, self.shape.k),
        })
    }

    pub fn encode_batch<V>(&self, xs: &[V]) -> Result<Vec<SparseCode>>
    where
        V: AsRef<[f32]> + Sync,
    {
        xs.par_iter().map(|x| self.encode(x.as_ref())).collect()
    }

    pub fn reconstruct(&self, code: &SparseCode) -> Result<Vec<f64>> {
        let mut out = self.b_dec.clone();
        for &(f, a) in code.features() {
            if f as usize >= self.shape.d_latent {
                return Err(Error::contract(format!(
                    "feature id {f} out of range for d_latent={}",
                    self.shape.d_latent
                )));
            }
            for (o, w) in out.iter_mut().zip(self.decoder_row(f as usize)) {
                *o += a * w;
            }
        }
        Ok(out)
    }

    fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.shape.d_in {
            return Err(Error::contract(format!(
                "input has dimension {}, SAE expects {}",
                x.len(),
                self.shape.d_in
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("input vector contains NaN or infinity"));
        }
        Ok(())
    }
}

/// Indices and values of the `k` largest strictly positive entries, returned
/// in increasing id order.
pub(crate) fn top_k(z: &[f64], k: usize) -> Vec<(u32, f64)> {
    let mut active: Vec<(u32, f64)> = z
        .iter()
        .enumerate()
        .filter(|&(_, &v)| v > 0.0)
        .map(|(i, &v)| (i as u32, v))
        .collect();
    if active.len() > k {
        let by_rank = |a: &(u32, f64), b: &(u32, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        active.select_nth_unstable_by(k - 1, by_rank);
        active.truncate(k);
        active.sort_unstable_by_key(|&(f, _)| f);
    }
    active
}

pub(crate) fn normalize_rows(m: &mut [f64], width: usize) {
    for row in m.chunks_exact_mut(width) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

pub(crate) fn round_to_f32(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_like(k: usize) -> SaeParams {
        let shape = SaeShape::new(2, 3, k).unwrap();
        let w = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        SaeParams::from_parts(shape, w.clone(), vec![0.0; 3], w, vec![0.0; 2]).unwrap()
    }

    #[test]
    fn encode_identity_projection() {
        let code = identity_like(2).encode(&[5.0, 3.0]).unwrap();
        assert_eq!(code.features(), &[(0, 5.0), (1, 3.0)]);
    }

    #[test]
    fn negative_input_gives_empty_code() {
        let code = identity_like(2).encode(&[-1.0, -1.0]).unwrap();
        assert!(code.is_empty());
    }

    #[test]
    fn ties_go_to_smaller_id() {
        assert_eq!(top_k(&[1.0, 1.0, 0.5], 1), vec![(0, 1.0)]);
        assert_eq!(top_k(&[0.5, 1.0, 1.0], 1), vec![(1, 1.0)]);
        assert_eq!(top_k(&[2.0, 0.0, 2.0, 2.0], 2), vec![(0, 2.0), (2, 2.0)]);
    }

    #[test]
    fn encode_errors() {
        let p = identity_like(2);
        assert!(matches!(p.encode(&[1.0]), Err(Error::Contract(_))));
        assert!(matches!(p.encode(&[f32::NAN, 1.0]), Err(Error::Input(_))));
    }

    #[test]
    fn reconstruct_empty_code_returns_bias() {
        let shape = SaeShape::new(2, 2, 1).unwrap();
        let w = vec![1.0, 0.0, 0.0, 1.0];
        let p = SaeParams::from_parts(shape, w.clone(), vec![0.0; 2], w, vec![0.1, 0.2]).unwrap();
        assert_eq!(
            p.reconstruct(&SparseCode::default()).unwrap(),
            vec![0.1, 0.2]
        );
    }

    #[test]
    fn reconstruct_single_feature() {
        let p = identity_like(1);
        let code = SparseCode::new(vec![(0, 2.0)]).unwrap();
        assert_eq!(p.reconstruct(&code).unwrap(), vec![2.0, 0.0]);
        let bad = SparseCode::new(vec![(9, 1.0)]).unwrap();
        assert!(matches!(p.reconstruct(&bad), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_invariants() {
        assert!(SaeShape::new(4, 8, 9).is_err());
        assert!(SaeShape::new(8, 4, 2).is_err());
        assert!(SaeShape::new(4, 8, 0).is_err());
        assert!(SaeShape::new(4, 8, 8).is_ok());
    }

    #[test]
    fn init_is_seeded_and_unit_norm() {
        let shape = SaeShape::new(8, 32, 4).unwrap();
        let a = SaeParams::init(shape, 7).unwrap();
        let b = SaeParams::init(shape, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, SaeParams::init(shape, 8).unwrap());
        for f in 0..32 {
            let n: f64 = a.decoder_row(f).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(a.w_enc(), a.w_dec());
    }

    #[test]
    fn sparse_code_rejects_bad_pairs() {
        assert!(SparseCode::new(vec![(1, 1.0), (1, 2.0)]).is_err());
        assert!(SparseCode::new(vec![(1, 0.0)]).is_err());
        let c = SparseCode::new(vec![(5, 1.0), (2, 3.0)]).unwrap();
        assert_eq!(c.ids().collect::<Vec<_>>(), vec![2, 5]);
        assert_eq!(c.activation(2), Some(3.0));
        assert!(!c.contains(3));
    }
}
