//! Randomized quasi-Monte Carlo points: Sobol sequences with optional nested
//! (Owen) scrambling or a digital random shift, and the map from the unit cube
//! to exogenous noise.
//!
//! Direction numbers ship in `data/new-joe-kuo-6.1024.txt`, one line per
//! dimension `d >= 2` in the usual Joe–Kuo layout:
//!
//! ```text
//! d   s   a   m_1 .. m_s
//! ```
//!
//! where `s` is the degree of the primitive polynomial, `a` encodes its inner
//! coefficients and `m_i` are the initial direction integers. Dimension 1 is the
//! van der Corput sequence and is implicit.

use std::sync::OnceLock;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use thiserror::Error;

use crate::rng::{derive_seed, rng_from_seed, splitmix64};
use crate::scalar::Real;
use crate::scm::NoiseSpec;

const TABLE: &str = include_str!("../data/new-joe-kuo-6.1024.txt");
const BITS: usize = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SamplerError {
    #[error("dimension {requested} exceeds the direction-number table ({max})")]
    DimensionTooLarge { requested: usize, max: usize },
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("point index overflow: sequence supports 2^32 points")]
    IndexOverflow,
    #[error("point matrix has {got} columns, noise spec has {expected}")]
    ColumnMismatch { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scramble {
    None,
    /// Nested uniform scrambling, one random bit flip per digit prefix.
    #[default]
    Owen,
    /// XOR of every coordinate with one random 32-bit word per dimension.
    DigitalShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QmcConfig {
    pub dimension: usize,
    pub scramble: Scramble,
    pub seed: u64,
    pub skip: u64,
}

impl QmcConfig {
    pub fn new(dimension: usize) -> Self {
        QmcConfig {
            dimension,
            scramble: Scramble::Owen,
            seed: 0,
            skip: 0,
        }
    }
}

/// Where unit-cube points come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointSource {
    Sobol { scramble: Scramble, seed: u64 },
    Pseudo { seed: u64 },
}

impl Default for PointSource {
    fn default() -> Self {
        PointSource::Sobol {
            scramble: Scramble::Owen,
            seed: 0,
        }
    }
}

impl PointSource {
    pub fn seed(&self) -> u64 {
        match *self {
            PointSource::Sobol { seed, .. } | PointSource::Pseudo { seed } => seed,
        }
    }

    /// Same kind of source with a different seed.
    #[must_use]
    pub fn reseeded(&self, seed: u64) -> Self {
        match *self {
            PointSource::Sobol { scramble, .. } => PointSource::Sobol { scramble, seed },
            PointSource::Pseudo { .. } => PointSource::Pseudo { seed },
        }
    }

    /// Source for work item `index`, seeded from `(seed, index)` only.
    #[must_use]
    pub fn for_item(&self, index: u64) -> Self {
        self.reseeded(derive_seed(self.seed(), index))
    }

    pub fn unit_points<T: Real>(&self, dimension: usize, n: usize) -> Result<Array2<T>, SamplerError> {
        match *self {
            PointSource::Sobol { scramble, seed } => sobol_points(
                &QmcConfig {
                    dimension,
                    scramble,
                    seed,
                    skip: 0,
                },
                n,
            ),
            PointSource::Pseudo { seed } => {
                if dimension == 0 {
                    return Err(SamplerError::ZeroDimension);
                }
                let mut rng = rng_from_seed(seed);
                Ok(Array2::from_shape_fn((n, dimension), |_| T::lit(rng.gen::<f64>())))
            }
        }
    }
}

struct DirectionTable {
    /// `v[d][k]`: direction integer for bit `k` of the index in dimension `d`.
    v: Vec<[u32; BITS]>,
}

fn table() -> &'static DirectionTable {
    static CELL: OnceLock<DirectionTable> = OnceLock::new();
    CELL.get_or_init(|| parse_table(TABLE))
}

fn parse_table(text: &str) -> DirectionTable {
    let mut v = Vec::new();
    let mut first = [0u32; BITS];
    for (k, slot) in first.iter_mut().enumerate() {
        *slot = 1 << (BITS - 1 - k);
    }
    v.push(first);
    for line in text.lines().skip(1) {
        let nums: Vec<u32> = line
            .split_whitespace()
            .map(|t| t.parse().expect("direction table is numeric"))
            .collect();
        if nums.is_empty() {
            continue;
        }
        let s = nums[1] as usize;
        let a = nums[2];
        let m = &nums[3..3 + s];
        v.push(direction_integers(s, a, m));
    }
    DirectionTable { v }
}

fn direction_integers(s: usize, a: u32, m: &[u32]) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    for k in 0..BITS.min(s) {
        v[k] = m[k] << (BITS - 1 - k);
    }
    for k in s..BITS {
        let mut x = v[k - s] ^ (v[k - s] >> s);
        for q in 1..s {
            if (a >> (s - 1 - q)) & 1 == 1 {
                x ^= v[k - q];
            }
        }
        v[k] = x;
    }
    v
}

/// Largest dimension the shipped table supports.
pub fn max_dimension() -> usize {
    table().v.len()
}

/// Raw 32-bit Sobol coordinate of point `index` (Gray-code order) in dimension `d`.
fn sobol_word(dir: &[u32; BITS], index: u32) -> u32 {
    let mut gray = index ^ (index >> 1);
    let mut x = 0u32;
    let mut k = 0;
    while gray != 0 {
        if gray & 1 == 1 {
            x ^= dir[k];
        }
        gray >>= 1;
        k += 1;
    }
    x
}

fn owen_scramble(x: u32, seed: u64) -> u32 {
    let mut out = 0u32;
    for k in 0..BITS {
        // the flip for digit k depends on the k digits above it
        let prefix = if k == 0 { 0 } else { (x >> (BITS - k)) as u64 };
        let h = splitmix64(seed ^ splitmix64(((k as u64) << 40) ^ prefix));
        let bit = (x >> (BITS - 1 - k)) & 1;
        out |= ((bit ^ (h & 1) as u32) & 1) << (BITS - 1 - k);
    }
    out
}

/// `n x dimension` matrix of points in `[0, 1)`.
pub fn sobol_points<T: Real>(cfg: &QmcConfig, n: usize) -> Result<Array2<T>, SamplerError> {
    if cfg.dimension == 0 {
        return Err(SamplerError::ZeroDimension);
    }
    let tbl = table();
    if cfg.dimension > tbl.v.len() {
        return Err(SamplerError::DimensionTooLarge {
            requested: cfg.dimension,
            max: tbl.v.len(),
        });
    }
    if cfg.skip + n as u64 > 1u64 << 32 {
        return Err(SamplerError::IndexOverflow);
    }
    let dim_seeds: Vec<u64> = (0..cfg.dimension)
        .map(|d| derive_seed(cfg.seed, d as u64))
        .collect();
    let scale = 1.0 / (1u64 << 32) as f64;
    let mut out = Array2::<T>::zeros((n, cfg.dimension));
    for d in 0..cfg.dimension {
        let dir = &tbl.v[d];
        let shift = splitmix64(dim_seeds[d]) as u32;
        for i in 0..n {
            let raw = sobol_word(dir, (cfg.skip + i as u64) as u32);
            let word = match cfg.scramble {
                Scramble::None => raw,
                Scramble::Owen => owen_scramble(raw, dim_seeds[d]),
                Scramble::DigitalShift => raw ^ shift,
            };
            out[[i, d]] = T::lit(word as f64 * scale);
        }
    }
    Ok(out)
}

/// Maps each column of `points` through the inverse CDF of the matching noise
/// distribution.
pub fn to_noise<T: Real>(points: ArrayView2<T>, noise: &NoiseSpec<T>) -> Result<Array2<T>, SamplerError> {
    if points.ncols() != noise.len() {
        return Err(SamplerError::ColumnMismatch {
            got: points.ncols(),
            expected: noise.len(),
        });
    }
    let mut out = points.to_owned();
    for (j, mut col) in out.columns_mut().into_iter().enumerate() {
        let dist = noise.get(j);
        col.mapv_inplace(|u| dist.quantile(u));
    }
    Ok(out)
}

/// Inverse of the standard normal CDF.
///
/// Acklam's rational approximation followed by one Halley step against an
/// accurate `erfc`; absolute error is below 1e-14 on `(0, 1)`. Endpoints map
/// to the infinities.
pub fn inverse_normal_cdf(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const LOW: f64 = 0.02425;

    if p.is_nan() {
        return f64::NAN;
    }
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let x = if p < LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    x - u / (1.0 + x * u / 2.0)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::NoiseDist;

    fn cfg(dimension: usize, scramble: Scramble, seed: u64) -> QmcConfig {
        QmcConfig {
            dimension,
            scramble,
            seed,
            skip: 0,
        }
    }

    #[test]
    fn first_points_dimension_one() {
        let pts: Array2<f64> = sobol_points(&cfg(1, Scramble::None, 0), 4).unwrap();
        assert_eq!(pts.column(0).to_vec(), vec![0.0, 0.5, 0.75, 0.25]);
    }

    // Frozen from an independent Joe–Kuo implementation (scipy.stats.qmc.Sobol,
    // scramble=False).
    #[test]
    fn matches_reference_points() {
        let pts: Array2<f64> = sobol_points(&cfg(8, Scramble::None, 0), 8).unwrap();
        let expected = [
            [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
            [0.75, 0.25, 0.25, 0.25, 0.75, 0.75, 0.25, 0.75],
            [0.25, 0.75, 0.75, 0.75, 0.25, 0.25, 0.75, 0.25],
            [0.375, 0.375, 0.625, 0.875, 0.375, 0.125, 0.375, 0.875],
            [0.875, 0.875, 0.125, 0.375, 0.875, 0.625, 0.875, 0.375],
            [0.625, 0.125, 0.875, 0.625, 0.625, 0.875, 0.125, 0.125],
            [0.125, 0.625, 0.375, 0.125, 0.125, 0.375, 0.625, 0.625],
        ];
        for (i, row) in expected.iter().enumerate() {
            assert_eq!(pts.row(i).to_vec(), row.to_vec(), "row {i}");
        }

        let far: Array2<f64> = sobol_points(
            &QmcConfig {
                dimension: 40,
                scramble: Scramble::None,
                seed: 0,
                skip: 1000,
            },
            3,
        )
        .unwrap();
        let expected = [
            [0.2197265625, 0.9072265625, 0.3447265625, 0.4794921875],
            [0.7197265625, 0.4072265625, 0.8447265625, 0.9794921875],
            [0.9697265625, 0.1572265625, 0.0947265625, 0.2294921875],
        ];
        for (i, row) in expected.iter().enumerate() {
            let got: Vec<f64> = [0, 5, 17, 39].iter().map(|&d| far[[i, d]]).collect();
            assert_eq!(got, row.to_vec(), "row {i}");
        }
    }

    #[test]
    fn dimension_limits() {
        assert!(max_dimension() >= 64);
        assert_eq!(
            sobol_points::<f64>(&cfg(max_dimension() + 1, Scramble::None, 0), 2),
            Err(SamplerError::DimensionTooLarge {
                requested: max_dimension() + 1,
                max: max_dimension()
            })
        );
        assert_eq!(
            sobol_points::<f64>(&cfg(0, Scramble::None, 0), 2),
            Err(SamplerError::ZeroDimension)
        );
    }

    #[test]
    fn deterministic() {
        for s in [Scramble::None, Scramble::Owen, Scramble::DigitalShift] {
            let a: Array2<f64> = sobol_points(&cfg(5, s, 9), 100).unwrap();
            let b: Array2<f64> = sobol_points(&cfg(5, s, 9), 100).unwrap();
            assert_eq!(a, b);
        }
        let a: Array2<f64> = sobol_points(&cfg(3, Scramble::Owen, 1), 16).unwrap();
        let b: Array2<f64> = sobol_points(&cfg(3, Scramble::Owen, 2), 16).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn scrambled_columns_are_uniform() {
        let n = 1 << 14;
        for s in [Scramble::Owen, Scramble::DigitalShift] {
            let pts: Array2<f64> = sobol_points(&cfg(6, s, 77), n).unwrap();
            for col in pts.columns() {
                let mut v = col.to_vec();
                let m = v.iter().sum::<f64>() / n as f64;
                let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                assert!((m - 0.5).abs() < 0.01);
                assert!((var - 1.0 / 12.0).abs() < 0.003);
                // Kolmogorov–Smirnov against U(0,1), 1% critical value 1.628/sqrt(n)
                v.sort_by(f64::total_cmp);
                let ks = v
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| ((i + 1) as f64 / n as f64 - x).max(x - i as f64 / n as f64))
                    .fold(0.0, f64::max);
                assert!(ks < 1.628 / (n as f64).sqrt(), "ks {ks}");
            }
        }
    }

    #[test]
    fn owen_scrambling_keeps_net_stratification() {
        // each of the 2^k elementary intervals gets exactly one of the first 2^k points
        let pts: Array2<f64> = sobol_points(&cfg(4, Scramble::Owen, 5), 64).unwrap();
        for col in pts.columns() {
            let mut cells: Vec<usize> = col.iter().map(|&x| (x * 64.0) as usize).collect();
            cells.sort_unstable();
            assert_eq!(cells, (0..64).collect::<Vec<_>>());
        }
    }

    #[test]
    fn to_noise_examples() {
        let noise = NoiseSpec::new(vec![
            NoiseDist::gaussian(0.0, 1.0).unwrap(),
            NoiseDist::uniform(-1.0, 1.0).unwrap(),
        ]);
        let pts: Array2<f64> = ndarray::arr2(&[[0.5, 0.25], [0.975, 0.5]]);
        let u = to_noise(pts.view(), &noise).unwrap();
        assert!(u[[0, 0]].abs() < 1e-15);
        assert!((u[[0, 1]] + 0.5).abs() < 1e-15);
        assert!((u[[1, 0]] - 1.959_963_984_540_054).abs() < 1e-4);
        let bad: Array2<f64> = ndarray::arr2(&[[0.5]]);
        assert!(to_noise(bad.view(), &noise).is_err());
    }

    #[test]
    fn inverse_normal_accuracy() {
        // reference quantiles of N(0,1)
        let cases = [
            (0.975, 1.959_963_984_540_054),
            (0.5, 0.0),
            (0.841_344_746_068_542_9, 1.0),
            (0.001, -3.090_232_306_167_813_5),
            (1e-10, -6.361_340_902_404_056),
        ];
        for (p, z) in cases {
            assert!((inverse_normal_cdf(p) - z).abs() < 1e-9, "{p}");
        }
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            assert!((normal_cdf(inverse_normal_cdf(p)) - p).abs() < 1e-14);
        }
    }

    #[test]
    fn pseudo_source_is_seeded() {
        let s = PointSource::Pseudo { seed: 4 };
        let a: Array2<f64> = s.unit_points(3, 10).unwrap();
        assert_eq!(a, s.unit_points::<f64>(3, 10).unwrap());
        assert!(a.iter().all(|&x| (0.0..1.0).contains(&x)));
    }
}
