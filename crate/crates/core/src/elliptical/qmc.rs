//! Randomly shifted Kronecker (Richtmyer) point sets with antithetic pairing.

use rand::{Rng, RngExt};

fn primes(n: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(n);
    let mut c = 2u64;
    while out.len() < n {
        if out.iter().take_while(|&&p| p * p <= c).all(|&p| c % p != 0) {
            out.push(c);
        }
        c += 1;
    }
    out
}

/// Irrational generators frac(√p) for the first `dim` primes.
pub fn richtmyer_alpha(dim: usize) -> Vec<f64> {
    primes(dim).into_iter().map(|p| (p as f64).sqrt().fract()).collect()
}

/// `n_pairs` antithetic pairs per shift, `n_shift` independent shifts, `dim` coordinates.
/// Layout: `points[(s * 2 * n_pairs + i) * dim + c]`; entries lie strictly inside (0,1).
#[derive(Debug, Clone)]
pub struct PointSet {
    pub dim: usize,
    pub n_shift: usize,
    pub per_shift: usize,
    pub points: Vec<f64>,
}

impl PointSet {
    pub fn new<R: Rng + ?Sized>(dim: usize, n_total: usize, n_shift: usize, rng: &mut R) -> Self {
        let n_shift = n_shift.max(1);
        let n_pairs = (n_total / (2 * n_shift)).max(1);
        let alpha = richtmyer_alpha(dim.max(1));
        let mut points = Vec::with_capacity(n_shift * 2 * n_pairs * dim);
        for _ in 0..n_shift {
            let shift: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
            let mut block = Vec::with_capacity(2 * n_pairs * dim);
            let mut anti = Vec::with_capacity(n_pairs * dim);
            for i in 1..=n_pairs {
                for c in 0..dim {
                    let u = clamp_open((shift[c] + i as f64 * alpha[c]).fract());
                    block.push(u);
                    anti.push(clamp_open(1.0 - u));
                }
            }
            block.extend(anti);
            points.extend(block);
        }
        PointSet { dim, n_shift, per_shift: 2 * n_pairs, points }
    }

    pub fn len(&self) -> usize {
        self.n_shift * self.per_shift
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
}

#[inline]
fn clamp_open(u: f64) -> f64 {
    u.clamp(1e-15, 1.0 - 1e-15)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn means_are_near_half_and_pairs_antithetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps = PointSet::new(5, 512, 8, &mut rng);
        assert_eq!(ps.len(), 512);
        for c in 0..5 {
            let m: f64 = (0..ps.len()).map(|i| ps.point(i)[c]).sum::<f64>() / ps.len() as f64;
            assert!((m - 0.5).abs() < 1e-12, "antithetic pairing makes the mean exact");
        }
        let half = ps.per_shift / 2;
        assert!((ps.point(0)[0] + ps.point(half)[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn integrates_smooth_function_accurately() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ps = PointSet::new(2, 4096, 8, &mut rng);
        let est: f64 = (0..ps.len()).map(|i| {
            let p = ps.point(i);
            (p[0] * p[1]).exp()
        }).sum::<f64>() / ps.len() as f64;
        // ∫∫ e^{xy} = Σ 1/(n! (n+1)²)
        let mut want = 0.0;
        let mut fact = 1.0;
        for n in 0..20 {
            if n > 0 {
                fact *= n as f64;
            }
            want += 1.0 / (fact * ((n + 1) as f64).powi(2));
        }
        assert!((est - want).abs() < 1e-3, "{est} {want}");
    }
}
