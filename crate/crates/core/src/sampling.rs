//! Seeded low-discrepancy sampling: Halton points with a Cranley–Patterson shift.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// Halton sequence in `[0,1)^dim`, shifted modulo 1 by a seeded random offset.
#[derive(Debug, Clone)]
pub struct Halton {
    dim: usize,
    index: u64,
    shift: Vec<f64>,
}

impl Halton {
    pub fn new(dim: usize, seed: u64) -> Halton {
        assert!(dim <= PRIMES.len(), "Halton sequence supports up to {} dimensions", PRIMES.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shift = (0..dim).map(|_| rng.gen::<f64>()).collect();
        Halton { dim, index: 1, shift }
    }

    /// Unshifted sequence; used where exact reproducibility of the point set matters more
    /// than seeding.
    pub fn unshifted(dim: usize) -> Halton {
        Halton {
            dim,
            index: 1,
            shift: vec![0.0; dim],
        }
    }

    pub fn next_unit(&mut self) -> Vec<f64> {
        let i = self.index;
        self.index += 1;
        (0..self.dim)
            .map(|k| (radical_inverse(i, PRIMES[k]) + self.shift[k]).fract())
            .collect()
    }

    pub fn next_in_box(&mut self, bounds: &[(f64, f64)]) -> Vec<f64> {
        self.next_unit()
            .into_iter()
            .zip(bounds)
            .map(|(u, (lo, hi))| lo + u * (hi - lo))
            .collect()
    }
}

/// `count` quasi-uniform unit vectors in `dim` dimensions.
///
/// In one dimension the two signs; in two dimensions equally spaced angles starting at 0
/// (so the coordinate axes are always included when `count` is a multiple of 4). Higher
/// dimensions map Halton points through the Box–Muller transform and normalise.
pub fn sphere_directions(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    match dim {
        0 => Vec::new(),
        1 => (0..count).map(|k| vec![if k % 2 == 0 { 1.0 } else { -1.0 }]).collect(),
        2 => (0..count)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / count as f64;
                vec![a.cos(), a.sin()]
            })
            .collect(),
        _ => {
            let pairs = dim.div_ceil(2);
            let mut seq = Halton::new(2 * pairs, seed);
            let mut out = Vec::with_capacity(count);
            while out.len() < count {
                let u = seq.next_unit();
                let mut v = Vec::with_capacity(2 * pairs);
                for p in 0..pairs {
                    let r = (-2.0 * (1.0 - u[2 * p]).max(f64::MIN_POSITIVE).ln()).sqrt();
                    let a = 2.0 * PI * u[2 * p + 1];
                    v.push(r * a.cos());
                    v.push(r * a.sin());
                }
                v.truncate(dim);
                let n = crate::linalg::norm2(&v);
                if n > 1e-12 {
                    out.push(v.into_iter().map(|c| c / n).collect());
                }
            }
            out
        }
    }
}
