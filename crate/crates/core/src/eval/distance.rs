//! Two-sample distances over `n x d` point sets: energy distance (with a
//! permutation test), Fréchet distance between fitted Gaussians, and kNN
//! precision / recall.
//!
//! Parallel reductions collect per-row partial sums and add them in row
//! order, so results do not depend on the thread count.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Eigenvalue floor applied to covariances before square roots.
pub const EIGEN_FLOOR: f64 = 1e-10;

/// Relative slack below zero tolerated before an eigenvalue counts as
/// genuinely negative.
const NEGATIVE_EIGEN_TOL: f64 = 1e-8;

/// Largest pooled sample for the multivariate permutation test, which keeps
/// the full distance matrix in memory.
pub const PERMUTATION_MAX_POINTS: usize = 4096;

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Accum {
    sum: f64,
    comp: f64,
}

impl Accum {
    pub(crate) fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(self) -> f64 {
        self.sum + self.comp
    }
}

fn ordered_sum(parts: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = Accum::default();
    for p in parts {
        acc.add(p);
    }
    acc.value()
}

fn points(x: &Tensor, what: &str) -> Result<(usize, usize)> {
    let (n, d) = x.dims2()?;
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!("{what} is empty")));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok((n, d))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum of `||a_i - b_j||` over all `(i, j)`.
fn cross_sum(a: &Tensor, b: &Tensor) -> f64 {
    let nb = b.shape()[0];
    let rows: Vec<f64> = (0..a.shape()[0])
        .into_par_iter()
        .map(|i| {
            let ai = a.row(i);
            let mut acc = Accum::default();
            for j in 0..nb {
                acc.add(dist(ai, b.row(j)));
            }
            acc.value()
        })
        .collect();
    ordered_sum(rows)
}

/// Sum of `x_j - x_i` over `i < j` for sorted `x`.
fn sorted_within_sum(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mut acc = Accum::default();
    for (j, v) in x.iter().enumerate() {
        acc.add(v * (2.0 * j as f64 - n + 1.0));
    }
    acc.value()
}

/// Sum of `|a_i - b_j|` over all pairs, both sorted.
fn sorted_cross_sum(a: &[f64], b: &[f64]) -> f64 {
    let mut prefix = Vec::with_capacity(b.len() + 1);
    let mut acc = Accum::default();
    prefix.push(0.0);
    for v in b {
        acc.add(*v);
        prefix.push(acc.value());
    }
    let total = prefix[b.len()];
    let m = b.len() as f64;
    let mut k = 0;
    let mut out = Accum::default();
    for &x in a {
        while k < b.len() && b[k] < x {
            k += 1;
        }
        let below = k as f64;
        out.add(x * below - prefix[k]);
        out.add((total - prefix[k]) - x * (m - below));
    }
    out.value()
}

fn sorted_column(x: &Tensor) -> Vec<f64> {
    let mut v = x.data().to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// `2 E||a - b|| - E||a - a'|| - E||b - b'||` as a V-statistic over all
/// cross and within pairs. One-dimensional inputs use sorted prefix sums.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (na, da) = points(a, "energy distance sample A")?;
    let (nb, db) = points(b, "energy distance sample B")?;
    if da != db {
        return Err(Error::ShapeMismatch {
            op: "energy_distance",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (na, nb) = (na as f64, nb as f64);
    let (ab, aa, bb) = if da == 1 {
        let (sa, sb) = (sorted_column(a), sorted_column(b));
        (
            sorted_cross_sum(&sa, &sb),
            2.0 * sorted_within_sum(&sa),
            2.0 * sorted_within_sum(&sb),
        )
    } else {
        (cross_sum(a, b), cross_sum(a, a), cross_sum(b, b))
    };
    let e = 2.0 * ab / (na * nb) - aa / (na * na) - bb / (nb * nb);
    Ok(e.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyTest {
    pub statistic: f64,
    pub p_value: f64,
    pub permutations: usize,
}

/// Label-permutation test of equal distributions using the energy distance.
/// `p = (1 + #{perm >= observed}) / (1 + permutations)`.
pub fn energy_test(a: &Tensor, b: &Tensor, permutations: usize, seed: u64) -> Result<EnergyTest> {
    let (na, d) = points(a, "energy test sample A")?;
    let (nb, db) = points(b, "energy test sample B")?;
    if d != db {
        return Err(Error::ShapeMismatch {
            op: "energy_test",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if permutations == 0 {
        return Err(Error::InvalidArgument("permutation count must be positive".into()));
    }
    let n = na + nb;
    let pooled: Vec<&[f64]> = (0..na).map(|i| a.row(i)).chain((0..nb).map(|j| b.row(j))).collect();
    let mut labels: Vec<bool> = (0..n).map(|i| i < na).collect();
    let mut rng = stream(seed, "eval/permutation");

    let statistic_of: Box<dyn Fn(&[bool]) -> f64> = if d == 1 {
        // Sort once; each labelling then costs O(n).
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| pooled[i][0].total_cmp(&pooled[j][0]));
        let z: Vec<f64> = order.iter().map(|&i| pooled[i][0]).collect();
        let total = sorted_within_sum(&z);
        Box::new(move |lab: &[bool]| {
            let (mut xa, mut xb) = (Vec::with_capacity(na), Vec::with_capacity(nb));
            for (k, &i) in order.iter().enumerate() {
                if lab[i] {
                    xa.push(z[k]);
                } else {
                    xb.push(z[k]);
                }
            }
            let (saa, sbb) = (sorted_within_sum(&xa), sorted_within_sum(&xb));
            let sab = total - saa - sbb;
            energy_from_sums(sab, 2.0 * saa, 2.0 * sbb, na, nb)
        })
    } else {
        if n > PERMUTATION_MAX_POINTS {
            return Err(Error::InvalidArgument(format!(
                "{n} pooled points exceed the permutation-test limit {PERMUTATION_MAX_POINTS}"
            )));
        }
        let dmat: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| (i + 1..n).map(|j| dist(pooled[i], pooled[j])).collect())
            .collect();
        Box::new(move |lab: &[bool]| {
            let rows: Vec<[f64; 3]> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut acc = [Accum::default(); 3];
                    for (off, dij) in dmat[i].iter().enumerate() {
                        let j = i + 1 + off;
                        let slot = match (lab[i], lab[j]) {
                            (true, true) => 0,
                            (false, false) => 1,
                            _ => 2,
                        };
                        acc[slot].add(*dij);
                    }
                    acc.map(Accum::value)
                })
                .collect();
            let s = |k: usize| ordered_sum(rows.iter().map(|r| r[k]));
            energy_from_sums(s(2), 2.0 * s(0), 2.0 * s(1), na, nb)
        })
    };

    let observed = statistic_of(&labels);
    let mut exceed = 0usize;
    for _ in 0..permutations {
        labels.shuffle(&mut rng);
        if statistic_of(&labels) >= observed {
            exceed += 1;
        }
    }
    Ok(EnergyTest {
        statistic: observed,
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
        permutations,
    })
}

fn energy_from_sums(cross: f64, within_a: f64, within_b: f64, na: usize, nb: usize) -> f64 {
    let (na, nb) = (na as f64, nb as f64);
    2.0 * cross / (na * nb) - within_a / (na * na) - within_b / (nb * nb)
}

/// Mean vector and unbiased covariance of a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

pub fn fit_gaussian_stats(samples: &Tensor) -> Result<GaussianStats> {
    let (n, d) = points(samples, "Gaussian fit sample")?;
    if n < 2 {
        return Err(Error::InvalidArgument("covariance needs at least 2 samples".into()));
    }
    let x = DMatrix::from_row_slice(n, d, samples.data());
    let mean = DVector::from_iterator(d, x.column_iter().map(|c| c.mean()));
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok(GaussianStats { mean, cov, count: n })
}

/// Eigen-decomposition of the symmetrized matrix with eigenvalues floored;
/// significantly negative eigenvalues are an error.
fn floored_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    if let Some(bad) = eig.eigenvalues.iter().find(|v| !v.is_finite() || **v < -NEGATIVE_EIGEN_TOL * top) {
        return Err(Error::Degenerate(format!(
            "{what} is not positive semi-definite: eigenvalue {bad:e} (largest magnitude {top:e}, trace {:e})",
            m.trace()
        )));
    }
    eig.eigenvalues.iter_mut().for_each(|v| *v = v.max(EIGEN_FLOOR));
    Ok(eig)
}

fn sqrt_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = floored_eigen(m, what)?;
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * root * eig.eigenvectors.transpose())
}

/// `||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2})`.
pub fn frechet_gaussian_distance(s1: &GaussianStats, s2: &GaussianStats) -> Result<f64> {
    let d = s1.mean.len();
    if s2.mean.len() != d || s1.cov.shape() != (d, d) || s2.cov.shape() != (d, d) {
        return Err(Error::ShapeMismatch {
            op: "frechet_gaussian_distance",
            lhs: vec![d, s1.cov.nrows(), s1.cov.ncols()],
            rhs: vec![s2.mean.len(), s2.cov.nrows(), s2.cov.ncols()],
        });
    }
    let root1 = sqrt_psd(&s1.cov, "first covariance")?;
    floored_eigen(&s2.cov, "second covariance")?;
    let inner = &root1 * &s2.cov * &root1;
    let cross: f64 = floored_eigen(&inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|v| v.sqrt())
        .sum();
    let diff = (&s1.mean - &s2.mean).norm_squared();
    let fd = diff + s1.cov.trace() + s2.cov.trace() - 2.0 * cross;
    if !fd.is_finite() {
        return Err(Error::NonFinite("Frechet distance".into()));
    }
    Ok(fd.max(0.0))
}

/// Squared distance from each point to its `k`-th nearest other point.
fn knn_radii_sq(s: &Tensor, k: usize) -> Vec<f64> {
    let n = s.shape()[0];
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist_sq(s.row(i), s.row(j))).collect();
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect()
}

fn coverage(points: &Tensor, centres: &Tensor, radii_sq: &[f64]) -> f64 {
    let n = points.shape()[0];
    let inside = (0..n)
        .into_par_iter()
        .filter(|&i| {
            let p = points.row(i);
            (0..centres.shape()[0]).any(|j| dist_sq(p, centres.row(j)) <= radii_sq[j])
        })
        .count();
    inside as f64 / n as f64
}

/// `(precision, recall)`: the fraction of generated points inside the real
/// kNN manifold, and of real points inside the generated one.
pub fn knn_precision_recall(real: &Tensor, generated: &Tensor, k: usize) -> Result<(f64, f64)> {
    let (nr, d) = points(real, "real sample")?;
    let (ng, dg) = points(generated, "generated sample")?;
    if d != dg {
        return Err(Error::ShapeMismatch {
            op: "knn_precision_recall",
            lhs: real.shape().to_vec(),
            rhs: generated.shape().to_vec(),
        });
    }
    if k == 0 || k >= nr || k >= ng {
        return Err(Error::InvalidArgument(format!(
            "k = {k} needs 1 <= k < set size (real {nr}, generated {ng})"
        )));
    }
    let real_r = knn_radii_sq(real, k);
    let gen_r = knn_radii_sq(generated, k);
    Ok((coverage(generated, real, &real_r), coverage(real, generated, &gen_r)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, stream};
    use proptest::prelude::*;

    fn col(v: Vec<f64>) -> Tensor {
        Tensor::from_vec([v.len(), 1], v).unwrap()
    }

    fn gauss(n: usize, d: usize, shift: f64, seed: u64) -> Tensor {
        let mut rng = stream(seed, "test/points");
        Tensor::from_vec([n, d], normal_vec(&mut rng, n * d).into_iter().map(|v| v + shift).collect()).unwrap()
    }

    /// Direct pair loop with compensated sums.
    fn naive_energy(a: &Tensor, b: &Tensor) -> f64 {
        let mean = |x: &Tensor, y: &Tensor| {
            let mut acc = Accum::default();
            for i in 0..x.shape()[0] {
                for j in 0..y.shape()[0] {
                    acc.add(dist(x.row(i), y.row(j)));
                }
            }
            acc.value() / (x.shape()[0] * y.shape()[0]) as f64
        };
        2.0 * mean(a, b) - mean(a, a) - mean(b, b)
    }

    #[test]
    fn energy_point_masses_and_identity() {
        let a = Tensor::from_vec([3, 2], vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::from_vec([2, 2], vec![3.0, 4.0, 3.0, 4.0]).unwrap();
        assert_eq!(energy_distance(&a, &b).unwrap(), 10.0);
        let x = gauss(50, 3, 0.0, 1);
        assert_eq!(energy_distance(&x, &x).unwrap(), 0.0);
        let c = col(vec![2.0; 4]);
        let e = energy_distance(&col(vec![-1.5; 3]), &c).unwrap();
        assert!((e - 7.0).abs() < 1e-15);
    }

    #[test]
    fn energy_one_dimensional_fast_path_matches_naive_loop() {
        let mut values = Vec::new();
        for seed in 0..3 {
            let a = gauss(10_000, 1, 0.0, 10 + seed);
            let b = gauss(10_000, 1, 1.0, 20 + seed);
            let fast = energy_distance(&a, &b).unwrap();
            let slow = naive_energy(&a, &b);
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
            values.push(fast);
        }
        let mean = values.iter().sum::<f64>() / 3.0;
        for v in values {
            assert!((v - mean).abs() < 0.05 * mean);
        }
    }

    #[test]
    fn energy_multivariate_matches_naive_loop() {
        let a = gauss(300, 3, 0.0, 5);
        let b = gauss(200, 3, 0.3, 6);
        let e = energy_distance(&a, &b).unwrap();
        assert!((e - naive_energy(&a, &b)).abs() < 1e-12);
        assert!(energy_distance(&a, &gauss(5, 2, 0.0, 1)).is_err());
    }

    #[test]
    fn energy_test_separates_and_accepts() {
        for d in [1, 2] {
            let a = gauss(300, d, 0.0, 1);
            let same = gauss(300, d, 0.0, 2);
            let shifted = gauss(300, d, 0.5, 3);
            let t_same = energy_test(&a, &same, 199, 4).unwrap();
            let t_far = energy_test(&a, &shifted, 199, 4).unwrap();
            assert!(t_same.p_value > 0.01, "d={d} {t_same:?}");
            assert!(t_far.p_value <= 0.01, "d={d} {t_far:?}");
            let direct = energy_distance(&a, &shifted).unwrap();
            assert!((t_far.statistic - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn frechet_one_dimensional_closed_form() {
        let s = |m: f64, var: f64| GaussianStats {
            mean: DVector::from_vec(vec![m]),
            cov: DMatrix::from_vec(1, 1, vec![var]),
            count: 0,
        };
        for (m1, v1, m2, v2) in [(0.0, 1.0, 1.0, 4.0), (0.3, 0.2, -1.1, 0.7), (2.0, 9.0, 2.0, 9.0)] {
            let fd = frechet_gaussian_distance(&s(m1, v1), &s(m2, v2)).unwrap();
            let closed = (m1 - m2) * (m1 - m2) + (v1.sqrt() - v2.sqrt()).powi(2);
            assert!((fd - closed).abs() < 1e-8, "{fd} vs {closed}");
        }
        let fd = frechet_gaussian_distance(&s(0.0, 1.0), &s(1.0, 4.0)).unwrap();
        assert!((fd - 2.0).abs() < 1e-8);
    }

    #[test]
    fn frechet_identity_and_rotation() {
        let a = gauss(400, 3, 0.0, 7);
        let b = gauss(400, 3, 0.4, 8).map(|v| v * 1.3);
        let (sa, sb) = (fit_gaussian_stats(&a).unwrap(), fit_gaussian_stats(&b).unwrap());
        assert!(frechet_gaussian_distance(&sa, &sa).unwrap() < 1e-8);
        let fd = frechet_gaussian_distance(&sa, &sb).unwrap();
        let back = frechet_gaussian_distance(&sb, &sa).unwrap();
        assert!((fd - back).abs() < 1e-8);

        let (c, s) = (0.6f64, 0.8f64);
        let rot = DMatrix::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]);
        let rotate = |x: &Tensor| {
            let m = DMatrix::from_row_slice(400, 3, x.data()) * rot.transpose();
            let mut data = Vec::new();
            for r in m.row_iter() {
                data.extend(r.iter().copied());
            }
            Tensor::from_vec([400, 3], data).unwrap()
        };
        let ra = fit_gaussian_stats(&rotate(&a)).unwrap();
        let rb = fit_gaussian_stats(&rotate(&b)).unwrap();
        let rotated = frechet_gaussian_distance(&ra, &rb).unwrap();
        assert!((rotated - fd).abs() < 1e-6, "{rotated} vs {fd}");
    }

    #[test]
    fn frechet_rejects_indefinite_covariance() {
        let good = GaussianStats {
            mean: DVector::zeros(2),
            cov: DMatrix::identity(2, 2),
            count: 0,
        };
        let bad = GaussianStats {
            mean: DVector::zeros(2),
            cov: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
            count: 0,
        };
        let err = frechet_gaussian_distance(&good, &bad).unwrap_err();
        assert!(err.to_string().contains("eigenvalue"), "{err}");
        // A rank-deficient covariance is fine after flooring.
        let flat = GaussianStats {
            mean: DVector::zeros(2),
            cov: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
            count: 0,
        };
        assert!(frechet_gaussian_distance(&flat, &good).unwrap().is_finite());
    }

    /// Exhaustive evaluation: full sort of true distances per point.
    fn brute_knn(real: &Tensor, generated: &Tensor, k: usize) -> (f64, f64) {
        let radius = |s: &Tensor, i: usize| {
            let mut d: Vec<f64> = (0..s.shape()[0])
                .filter(|&j| j != i)
                .map(|j| dist(s.row(i), s.row(j)))
                .collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        };
        let frac = |p: &Tensor, s: &Tensor| {
            let radii: Vec<f64> = (0..s.shape()[0]).map(|j| radius(s, j)).collect();
            let mut inside = 0;
            for i in 0..p.shape()[0] {
                let mut hit = false;
                for j in 0..s.shape()[0] {
                    if dist(p.row(i), s.row(j)) <= radii[j] {
                        hit = true;
                    }
                }
                if hit {
                    inside += 1;
                }
            }
            inside as f64 / p.shape()[0] as f64
        };
        (frac(generated, real), frac(real, generated))
    }

    #[test]
    fn knn_matches_brute_force_on_twenty_points() {
        for seed in 0..5 {
            let real = gauss(20, 2, 0.0, 100 + seed);
            let generated = gauss(20, 2, 0.7, 200 + seed).map(|v| v * 0.8);
            let fast = knn_precision_recall(&real, &generated, 3).unwrap();
            assert_eq!(fast, brute_knn(&real, &generated, 3));
        }
    }

    #[test]
    fn knn_extremes_and_errors() {
        let real = gauss(30, 2, 0.0, 1);
        assert_eq!(knn_precision_recall(&real, &real, 3).unwrap(), (1.0, 1.0));
        let far = real.map(|v| v + 1e3);
        assert_eq!(knn_precision_recall(&real, &far, 3).unwrap(), (0.0, 0.0));
        assert!(knn_precision_recall(&real, &far, 30).is_err());
        assert!(knn_precision_recall(&real, &far, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn distances_are_symmetric(seed in 0u64..1000, na in 3usize..40, nb in 3usize..40, d in 1usize..4) {
            let a = gauss(na, d, 0.0, seed);
            let b = gauss(nb, d, 0.5, seed + 1);
            let ab = energy_distance(&a, &b).unwrap();
            let ba = energy_distance(&b, &a).unwrap();
            prop_assert!(ab >= 0.0 && (ab - ba).abs() < 1e-12);
            let (sa, sb) = (fit_gaussian_stats(&a).unwrap(), fit_gaussian_stats(&b).unwrap());
            let f1 = frechet_gaussian_distance(&sa, &sb).unwrap();
            let f2 = frechet_gaussian_distance(&sb, &sa).unwrap();
            prop_assert!(f1 >= 0.0 && (f1 - f2).abs() < 1e-6 * (1.0 + f1));
        }

        #[test]
        fn knn_is_bounded_and_monotone_in_k(seed in 0u64..1000, n in 6usize..30) {
            let real = gauss(n, 2, 0.0, seed);
            let generated = gauss(n, 2, 0.8, seed + 7);
            let mut last = (0.0, 0.0);
            for k in 1..n.min(6) {
                let (p, r) = knn_precision_recall(&real, &generated, k).unwrap();
                prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&r));
                prop_assert!(p >= last.0 && r >= last.1);
                last = (p, r);
            }
        }
    }
}
