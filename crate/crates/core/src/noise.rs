//! Common random numbers for the particle filter.
//!
//! A [`NoiseBank`] holds every stochastic input a filter run consumes: the
//! standard-normal proposal noises, the resampling uniforms and, when
//! Gumbel-softmax resampling is used, Gumbel(0,1) draws. The bank is fixed for
//! the lifetime of a chain so that the likelihood estimate is a deterministic
//! function of the parameters.
//!
//! Draws come from ChaCha streams keyed by `(seed, role, t[, i])`, so any slice
//! of the bank can be regenerated independently of the rest.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Above this many entries Gumbel rows are regenerated on demand instead of
/// being cached.
const GUMBEL_CACHE_LIMIT: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum NoiseRole {
    Proposal = 1,
    Resample = 2,
    Gumbel = 3,
    Initial = 4,
    Fresh = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator for one `(seed, role, keys...)` coordinate.
pub fn keyed_rng(seed: u64, role: NoiseRole, keys: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(seed ^ (role as u64).rotate_left(56));
    for &k in keys {
        h = splitmix64(h ^ k);
    }
    let mut key = [0u8; 32];
    for (chunk, word) in key.chunks_exact_mut(8).zip(0u64..) {
        chunk.copy_from_slice(&splitmix64(h ^ word).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Child seed for the coordinate `keys` under `seed`.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix64(seed), |h, &k| splitmix64(h ^ k))
}

/// Order-sensitive 64-bit hash of a slice of floats (by bit pattern).
pub fn hash_f64s(values: &[f64]) -> u64 {
    values
        .iter()
        .fold(0x243F_6A88_85A3_08D3, |h, v| splitmix64(h ^ v.to_bits()))
}

/// Uniform draw on `(0, 1]`.
pub fn uniform_open_closed(rng: &mut impl Rng) -> f64 {
    1.0 - rng.random::<f64>()
}

fn gumbel(rng: &mut impl Rng) -> f64 {
    -(-uniform_open_closed(rng).ln()).ln()
}

#[derive(Debug)]
pub struct NoiseBank {
    seed: u64,
    steps: usize,
    particles: usize,
    state_dim: usize,
    // time-major: [t][i][k]
    eps: Vec<f64>,
    // [i][k]
    eps_initial: Vec<f64>,
    // [t][i]
    u: Vec<f64>,
    gumbel: Vec<OnceLock<Vec<f64>>>,
}

impl NoiseBank {
    /// Draws the bank for `steps` time steps of `particles` particles in a
    /// `state_dim`-dimensional state space.
    pub fn new(seed: u64, steps: usize, particles: usize, state_dim: usize) -> Self {
        let mut eps = Vec::with_capacity(steps * particles * state_dim);
        let mut u = Vec::with_capacity(steps * particles);
        for t in 0..steps {
            let mut rng = keyed_rng(seed, NoiseRole::Proposal, &[t as u64]);
            eps.extend((0..particles * state_dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let mut rng = keyed_rng(seed, NoiseRole::Resample, &[t as u64]);
            u.extend((0..particles).map(|_| uniform_open_closed(&mut rng)));
        }
        let mut rng = keyed_rng(seed, NoiseRole::Initial, &[]);
        let eps_initial = (0..particles * state_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            seed,
            steps,
            particles,
            state_dim,
            eps,
            eps_initial,
            u,
            gumbel: (0..steps).map(|_| OnceLock::new()).collect(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Proposal noise `ε_t^(i)` for step `t` (0-based).
    pub fn eps(&self, t: usize, i: usize) -> &[f64] {
        let start = (t * self.particles + i) * self.state_dim;
        &self.eps[start..start + self.state_dim]
    }

    /// Noise for drawing the initial state of particle `i`.
    pub fn eps_initial(&self, i: usize) -> &[f64] {
        let start = i * self.state_dim;
        &self.eps_initial[start..start + self.state_dim]
    }

    /// Resampling uniforms `u_t^(1..N)`, each in `(0, 1]`.
    pub fn uniforms(&self, t: usize) -> &[f64] {
        &self.u[t * self.particles..(t + 1) * self.particles]
    }

    fn gumbel_row_into(&self, t: usize, i: usize, out: &mut Vec<f64>) {
        let mut rng = keyed_rng(self.seed, NoiseRole::Gumbel, &[t as u64, i as u64]);
        out.extend((0..self.particles).map(|_| gumbel(&mut rng)));
    }

    /// The `N × N` Gumbel(0,1) matrix for step `t`, row-major (row = offspring).
    pub fn gumbels(&self, t: usize) -> std::borrow::Cow<'_, [f64]> {
        let n = self.particles;
        let fill = || {
            let mut m = Vec::with_capacity(n * n);
            for i in 0..n {
                self.gumbel_row_into(t, i, &mut m);
            }
            m
        };
        if self.steps * n * n <= GUMBEL_CACHE_LIMIT {
            std::borrow::Cow::Borrowed(self.gumbel[t].get_or_init(fill).as_slice())
        } else {
            std::borrow::Cow::Owned(fill())
        }
    }

    /// Resampling uniforms that are *not* common across parameter values:
    /// keyed by the bank seed, the step and a caller-supplied key (typically a
    /// hash of θ).
    pub fn fresh_uniforms(&self, t: usize, key: u64) -> Vec<f64> {
        let mut rng = keyed_rng(self.seed, NoiseRole::Fresh, &[t as u64, key]);
        (0..self.particles).map(|_| uniform_open_closed(&mut rng)).collect()
    }
}
