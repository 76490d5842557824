//! Dense vector arithmetic and the seeded generator every other module draws from.
//!
//! All protocol quantities (models, gradients, auxiliary and mean gradients)
//! live in a [`ParamVector`]. Summations run left to right over the inputs so
//! that aggregation is bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat model-sized vector of finite `f64` coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    /// Builds a vector, rejecting empty input and non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("parameter vector"));
        }
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "parameter vector dimension must be positive");
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Returns `alpha * self`.
    pub fn scaled(&self, alpha: f64) -> Result<Self> {
        let out: Vec<f64> = self.0.iter().map(|v| alpha * v).collect();
        check_finite(&out)?;
        Ok(Self(out))
    }

    /// In-place `self += alpha * x`.
    pub fn add_scaled(&mut self, alpha: f64, x: &ParamVector) -> Result<()> {
        ensure_same_dim(self, x)?;
        for (y, xv) in self.0.iter_mut().zip(&x.0) {
            *y += alpha * xv;
        }
        check_finite(&self.0)
    }

    /// Crate-internal mutable access; callers must restore finiteness.
    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(v: ParamVector) -> Self {
        v.0
    }
}

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

pub(crate) fn ensure_same_dim(a: &ParamVector, b: &ParamVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(())
}

/// Inner product `Σ aₖ·bₖ`.
pub fn dot(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    ensure_same_dim(a, b)?;
    Ok(a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum())
}

/// Returns `alpha·x + y`, leaving both inputs untouched.
pub fn axpy(alpha: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    let mut out = y.clone();
    out.add_scaled(alpha, x)?;
    Ok(out)
}

/// `Σᵢ wᵢ·vᵢ`, accumulated in list order.
pub fn weighted_sum(vectors: &[&ParamVector], weights: &[f64]) -> Result<ParamVector> {
    let first = vectors.first().ok_or(Error::Empty("weighted_sum vectors"))?;
    if vectors.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "weighted_sum got {} vectors and {} weights",
            vectors.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
        return Err(Error::NonFiniteScalar {
            context: "weighted_sum weight",
            value: *w,
        });
    }
    let mut acc = vec![0.0; first.dim()];
    for (v, &w) in vectors.iter().zip(weights) {
        ensure_same_dim(first, v)?;
        for (a, x) in acc.iter_mut().zip(&v.0) {
            *a += w * x;
        }
    }
    check_finite(&acc)?;
    Ok(ParamVector(acc))
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// xoshiro256** generator whose 256-bit state is expanded from a 64-bit seed
/// with splitmix64.
///
/// The algorithm is fixed and platform independent, so a seed pins the whole
/// stream. Children are derived with [`SeededRng::derive`], which hashes the
/// parent seed with a list of tags and never touches the parent's stream.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    state: [u64; 4],
    draws: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Self {
            seed,
            state,
            draws: 0,
        }
    }

    /// Child generator keyed by `(seed, tags...)`.
    pub fn derive(seed: u64, tags: &[u64]) -> Self {
        let mut h = seed;
        let mut mixed = splitmix64(&mut h);
        for &tag in tags {
            let mut s = mixed ^ tag.wrapping_mul(GOLDEN_GAMMA);
            mixed = splitmix64(&mut s);
        }
        Self::new(mixed)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 64-bit words drawn so far.
    pub fn stream_position(&self) -> u64 {
        self.draws
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        self.draws += 1;
        result
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`, safe to take a logarithm of.
    fn next_f64_open0(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` by rejection, free of modulo bias.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Standard normal draw (Box-Muller, one value per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64_open0();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Gamma(shape, 1) by Marsaglia-Tsang, boosted for `shape < 1`.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        assert!(shape > 0.0 && shape.is_finite(), "gamma shape must be positive");
        if shape < 1.0 {
            let boost = self.next_f64_open0().powf(1.0 / shape);
            return self.gamma(shape + 1.0) * boost;
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let (x, v) = loop {
                let x = self.normal();
                let v = 1.0 + c * x;
                if v > 0.0 {
                    break (x, v * v * v);
                }
            };
            let u = self.next_f64_open0();
            if u < 1.0 - 0.0331 * x * x * x * x || u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }

    /// Symmetric Dirichlet draw over `k` outcomes.
    ///
    /// When every gamma variate underflows (tiny concentration) the whole mass
    /// is put on one uniformly chosen outcome, the limit of the distribution.
    pub fn dirichlet(&mut self, concentration: f64, k: usize) -> Vec<f64> {
        let mut draws: Vec<f64> = (0..k).map(|_| self.gamma(concentration)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            draws.iter_mut().for_each(|p| *p /= total);
        } else {
            draws.iter_mut().for_each(|p| *p = 0.0);
            let pick = self.below(k);
            draws[pick] = 1.0;
        }
        draws
    }

    /// Index drawn with probability proportional to `weights`.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let target = self.next_f64() * total;
        let mut acc = 0.0;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if target < acc {
                return i;
            }
        }
        // rounding left target at the very top; take the last positive weight
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `m` distinct values from `[0, n)`, in draw order.
    pub fn sample_without_replacement(&mut self, n: usize, m: usize) -> Vec<usize> {
        assert!(m <= n, "cannot draw {m} of {n} without replacement");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..m {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(m);
        pool
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn dot_hand_values() {
        assert_eq!(dot(&pv(&[1.0, 2.0, 3.0]), &pv(&[4.0, 5.0, 6.0])).unwrap(), 32.0);
        assert_eq!(dot(&pv(&[1.5, -2.0]), &ParamVector::zeros(2)).unwrap(), 0.0);
    }

    #[test]
    fn dot_self_matches_naive_loop() {
        let mut rng = SeededRng::new(11);
        let v = ParamVector::new((0..100).map(|_| rng.normal()).collect()).unwrap();
        let mut oracle = 0.0;
        for i in 0..v.dim() {
            oracle += v.as_slice()[i] * v.as_slice()[i];
        }
        let got = dot(&v, &v).unwrap();
        assert!((got - oracle).abs() <= 1e-12 * oracle.abs());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = pv(&[1.0, 2.0]);
        let b = pv(&[1.0]);
        assert!(matches!(dot(&a, &b), Err(Error::DimensionMismatch { .. })));
        assert!(axpy(1.0, &a, &b).is_err());
        assert!(weighted_sum(&[&a, &b], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn axpy_cases() {
        let x = pv(&[1.0, 1.0]);
        let y = pv(&[3.0, 4.0]);
        assert_eq!(axpy(0.0, &x, &y).unwrap(), y);
        assert_eq!(axpy(1.0, &x, &ParamVector::zeros(2)).unwrap(), x);
        assert_eq!(axpy(2.0, &x, &y).unwrap(), pv(&[5.0, 6.0]));
        // inputs untouched
        assert_eq!(x, pv(&[1.0, 1.0]));
    }

    #[test]
    fn weighted_sum_cases() {
        let v = pv(&[0.1, -7.25, 3.0]);
        assert_eq!(weighted_sum(&[&v], &[1.0]).unwrap(), v);
        assert_eq!(weighted_sum(&[&v, &v], &[0.5, 0.5]).unwrap(), v);
        let e0 = pv(&[1.0, 0.0]);
        let e1 = pv(&[0.0, 1.0]);
        assert_eq!(weighted_sum(&[&e0, &e1], &[0.3, 0.7]).unwrap(), pv(&[0.3, 0.7]));
        assert!(matches!(weighted_sum(&[], &[]), Err(Error::Empty(_))));
        assert!(weighted_sum(&[&v], &[f64::NAN]).is_err());
    }

    #[test]
    fn constructor_rejects_non_finite() {
        assert!(matches!(
            ParamVector::new(vec![1.0, f64::INFINITY]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(ParamVector::new(vec![]).is_err());
        assert!(serde_json::from_str::<ParamVector>("[1.0, 2.0]").is_ok());
    }

    #[test]
    fn rng_reproducible_for_ten_thousand_draws() {
        let mut a = SeededRng::new(2024);
        let mut b = SeededRng::new(2024);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_eq!(a.stream_position(), 10_000);
        let mut c = SeededRng::new(2025);
        assert_ne!(SeededRng::new(2024).next_u64(), c.next_u64());
    }

    #[test]
    fn rng_reference_stream_is_pinned() {
        // splitmix64 expansion of seed 0 followed by xoshiro256**
        let mut sm = 0u64;
        assert_eq!(splitmix64(&mut sm), 0xE220_A839_7B1D_CDAF);
        let mut rng = SeededRng::new(0);
        let first: Vec<u64> = (0..3).map(|_| rng.next_u64()).collect();
        let mut again = SeededRng::new(0);
        assert_eq!(first, (0..3).map(|_| again.next_u64()).collect::<Vec<_>>());
    }

    #[test]
    fn derived_streams_differ_by_tag() {
        let a = SeededRng::derive(5, &[1, 2]).next_u64();
        let b = SeededRng::derive(5, &[2, 1]).next_u64();
        let c = SeededRng::derive(5, &[1, 2]).next_u64();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn sampling_helpers() {
        let mut rng = SeededRng::new(3);
        let s = rng.sample_without_replacement(10, 10);
        let mut sorted = s.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        let p = rng.dirichlet(0.3, 7);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x >= 0.0));
        let tiny = rng.dirichlet(1e-300, 4);
        assert!((tiny.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for _ in 0..100 {
            assert_eq!(rng.categorical(&[0.0, 1.0, 0.0]), 1);
        }
    }

    #[test]
    fn gamma_mean_is_shape() {
        let mut rng = SeededRng::new(99);
        for &shape in &[0.3, 1.0, 4.5] {
            let n = 40_000;
            let mean = (0..n).map(|_| rng.gamma(shape)).sum::<f64>() / n as f64;
            assert!((mean - shape).abs() < 0.05 * shape.max(1.0), "shape {shape} mean {mean}");
        }
    }

    proptest! {
        #[test]
        fn dot_symmetric_and_bilinear(
            a in prop::collection::vec(-100.0f64..100.0, 1..40),
            scale in -10.0f64..10.0,
            seed in any::<u64>(),
        ) {
            let mut rng = SeededRng::new(seed);
            let b: Vec<f64> = a.iter().map(|_| rng.normal()).collect();
            let av = ParamVector::new(a.clone()).unwrap();
            let bv = ParamVector::new(b).unwrap();
            let ab = dot(&av, &bv).unwrap();
            prop_assert_eq!(ab, dot(&bv, &av).unwrap());
            let scaled = dot(&av.scaled(scale).unwrap(), &bv).unwrap();
            let magnitude: f64 = av.as_slice().iter().zip(bv.as_slice())
                .map(|(x, y)| (scale * x * y).abs()).sum();
            prop_assert!((scaled - scale * ab).abs() <= 1e-12 * magnitude.max(1e-300));
        }

        #[test]
        fn convex_weights_of_identical_vectors(
            v in prop::collection::vec(-1e3f64..1e3, 1..20),
            raw in prop::collection::vec(0.01f64..1.0, 1..6),
        ) {
            let pv = ParamVector::new(v).unwrap();
            let halves = weighted_sum(&[&pv, &pv], &[0.5, 0.5]).unwrap();
            prop_assert_eq!(&halves, &pv);
            let total: f64 = raw.iter().sum();
            let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
            let refs: Vec<&ParamVector> = weights.iter().map(|_| &pv).collect();
            let out = weighted_sum(&refs, &weights).unwrap();
            for (o, x) in out.as_slice().iter().zip(pv.as_slice()) {
                prop_assert!((o - x).abs() <= 8.0 * f64::EPSILON * x.abs());
            }
        }
    }
}
