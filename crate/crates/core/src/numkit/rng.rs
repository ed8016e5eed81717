//! Seeded pseudo-random source.
//!
//! The generator is SplitMix64 (Steele et al.), a counter-style mixer with
//! a single 64-bit state word: identical seeds give identical draw
//! sequences on every run. Uniform doubles take the top 53 bits; normals
//! come from the trigonometric Box-Muller transform with the spare value
//! cached, so draw order is fixed regardless of how results are consumed.

use super::Tensor;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed, spare: None }
    }

    /// Deterministically derives an independent stream, e.g. one per task
    /// or per prompt, from this generator's seed.
    pub fn derive(&self, stream: u64) -> Rng {
        let mut mixer = Rng::new(self.state ^ stream.wrapping_mul(GOLDEN).wrapping_add(1));
        Rng::new(mixer.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` via fixed-point multiply.
    pub fn below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal draw (Box-Muller, sine/cosine pair).
    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        // u1 is kept away from zero so ln(u1) stays finite.
        let u1 = (self.uniform()).max(f64::MIN_POSITIVE);
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| self.normal())
    }

    /// Normal tensor with the given standard deviation.
    pub fn normal_tensor_scaled(&mut self, shape: &[usize], std: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.normal() * std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Rng::new(0);
        let mut b = Rng::new(0);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let ta = Rng::new(42).normal_tensor(&[16]);
        let tb = Rng::new(42).normal_tensor(&[16]);
        assert_eq!(ta, tb);
    }

    #[test]
    fn derived_streams_differ_and_are_stable() {
        let root = Rng::new(0);
        let mut s1 = root.derive(1);
        let mut s2 = root.derive(2);
        let mut s1b = root.derive(1);
        assert_ne!(s1.next_u64(), s2.next_u64());
        assert_eq!(s1b.next_u64(), Rng::new(0).derive(1).next_u64());
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = Rng::new(3);
        for _ in 0..1000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normals_roughly_standard() {
        let mut rng = Rng::new(9);
        let n = 20_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn below_is_in_range() {
        let mut rng = Rng::new(5);
        for _ in 0..1000 {
            assert!(rng.below(7) < 7);
        }
    }
}
