//! Single-head scaled dot-product attention over the same `[H, L]` input the
//! SSM paths consume. Each timestep's `H` channel values form one token,
//! projected to dimension `d` with seeded Gaussian weights.
//!
//! The full `L x L` score matrix is materialized, so memory grows
//! quadratically with the sequence length.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sts_core::Signal;

use crate::{BenchError, Result};

#[derive(Debug, Clone)]
pub struct AttentionBaseline {
    channels: usize,
    d: usize,
    /// `[3, H, d]`: query, key and value projections.
    weights: Vec<f64>,
}

impl AttentionBaseline {
    pub fn new(channels: usize, d: usize, seed: u64) -> Result<Self> {
        if channels == 0 || d == 0 {
            return Err(BenchError::Contract(
                "attention needs positive channels and head dimension".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (channels as f64).sqrt();
        let weights = (0..3 * channels * d)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        Ok(Self {
            channels,
            d,
            weights,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d
    }

    /// Heap bytes needed for a sequence of length `len`: the score matrix
    /// plus Q, K, V and the output.
    pub fn required_bytes(&self, len: usize) -> u64 {
        let len = len as u64;
        8 * len * len + 8 * 4 * len * self.d as u64
    }

    fn project(&self, x: &Signal, which: usize) -> Vec<f64> {
        let (h_count, d, len) = (self.channels, self.d, x.len());
        let w = &self.weights[which * h_count * d..(which + 1) * h_count * d];
        let mut out = vec![0.0; len * d];
        for h in 0..h_count {
            let xs = x.channel(h);
            let wrow = &w[h * d..(h + 1) * d];
            for (t, &xv) in xs.iter().enumerate() {
                for (o, &wv) in out[t * d..(t + 1) * d].iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        out
    }

    /// Computes `softmax(Q K^T / sqrt(d)) V` and returns it as `[L, d]`
    /// row-major.
    pub fn forward(&self, x: &Signal) -> Result<Vec<f64>> {
        if x.channels() != self.channels {
            return Err(BenchError::Contract(format!(
                "attention expects {} channels, got {}",
                self.channels,
                x.channels()
            )));
        }
        let (len, d) = (x.len(), self.d);
        let q = self.project(x, 0);
        let k = self.project(x, 1);
        let v = self.project(x, 2);
        let scale = 1.0 / (d as f64).sqrt();

        let mut scores = vec![0.0f64; len * len];
        for i in 0..len {
            let qi = &q[i * d..(i + 1) * d];
            let row = &mut scores[i * len..(i + 1) * len];
            for (j, s) in row.iter_mut().enumerate() {
                let kj = &k[j * d..(j + 1) * d];
                *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
        }
        for row in scores.chunks_exact_mut(len.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            let inv = 1.0 / total;
            for s in row.iter_mut() {
                *s *= inv;
            }
        }
        let mut out = vec![0.0; len * d];
        for i in 0..len {
            let row = &scores[i * len..(i + 1) * len];
            let oi = &mut out[i * d..(i + 1) * d];
            for (j, &p) in row.iter().enumerate() {
                for (o, vv) in oi.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                    *o += p * vv;
                }
            }
        }
        Ok(out)
    }
}
