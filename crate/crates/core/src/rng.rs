//! Portable pseudo-random stream.
//!
//! Every random draw in the crate comes from this generator so that other
//! implementations can reproduce the exact same synthetic data and weight
//! initializations:
//!
//! * seeding: the state is `splitmix64(seed)`, replaced by
//!   `0x9E3779B97F4A7C15` if that yields zero;
//! * step: xorshift64* (`x ^= x >> 12; x ^= x << 25; x ^= x >> 27`), output
//!   `x * 0x2545F4914F6CDD1D` (wrapping);
//! * uniform `f64` in `[0, 1)`: top 53 output bits times `2^-53`;
//! * standard normal: Box-Muller on two fresh uniforms `u1, u2`,
//!   `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`; the sine branch is discarded.

#[derive(Debug, Clone)]
pub struct Xorshift64Star {
    state: u64,
}

fn splitmix64(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Xorshift64Star {
    pub fn new(seed: u64) -> Self {
        let state = match splitmix64(seed) {
            0 => 0x9E37_79B9_7F4A_7C15,
            s => s,
        };
        Self { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..bound` by multiply-shift; `bound` must be positive.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }

    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Derives an independent stream, e.g. one per service or per run.
    pub fn fork(&mut self) -> Self {
        Self::new(self.next_u64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_is_reproducible() {
        let mut a = Xorshift64Star::new(42);
        let mut b = Xorshift64Star::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_ne!(Xorshift64Star::new(1).next_u64(), Xorshift64Star::new(2).next_u64());
    }

    #[test]
    fn known_first_outputs() {
        // splitmix64(0) = 0xE220A8397B1DCDAF
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
        let mut rng = Xorshift64Star { state: 1 };
        // x = 1 -> 1 ^ (1 << 25) = 0x2000001, >> 27 leaves it unchanged
        assert_eq!(rng.next_u64(), 0x2000001u64.wrapping_mul(0x2545_F491_4F6C_DD1D));
    }

    #[test]
    fn uniform_and_normal_moments() {
        let mut rng = Xorshift64Star::new(7);
        let n = 200_000;
        let u: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        assert!(u.iter().all(|v| (0.0..1.0).contains(v)));
        let mean = u.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01);
        let z: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
        let zm = z.iter().sum::<f64>() / n as f64;
        let zv = z.iter().map(|v| (v - zm).powi(2)).sum::<f64>() / n as f64;
        assert!(zm.abs() < 0.01);
        assert!((zv - 1.0).abs() < 0.02);
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut rng = Xorshift64Star::new(9);
        let mut v: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
