//! Small statistics toolkit: correlations, rank tests, goodness of fit and
//! Gaussian Fréchet distances.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF, StudentsT};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of empty slice");
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Pearson correlation; `None` when either series has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 1e-300 || syy <= 1e-300 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Average ranks (1-based), ties share their mean rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    pearson(&ranks(xs), &ranks(ys)).unwrap_or(0.0)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for k in 0..used.len() {
            if !used[k] {
                used[k] = true;
                cur.push(k);
                rec(cur, used, out);
                cur.pop();
                used[k] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// One-sided p-value for a Spearman correlation in the stated direction
/// (`positive = true` tests rho > 0). Exact permutation distribution for
/// n <= 9, Student-t approximation above.
pub fn spearman_p_one_sided(xs: &[f64], ys: &[f64], positive: bool) -> f64 {
    let n = xs.len();
    let rho = spearman(xs, ys);
    let sign = if positive { 1.0 } else { -1.0 };
    if n < 3 {
        return 1.0;
    }
    if n <= 9 {
        let rx = ranks(xs);
        let ry = ranks(ys);
        let perms = permutations(n);
        let hits = perms
            .iter()
            .filter(|p| {
                let permuted: Vec<f64> = p.iter().map(|&k| ry[k]).collect();
                let r = pearson(&rx, &permuted).unwrap_or(0.0);
                sign * r >= sign * rho - 1e-12
            })
            .count();
        return hits as f64 / perms.len() as f64;
    }
    let df = (n - 2) as f64;
    let t = sign * rho * (df / (1.0 - rho * rho).max(1e-300)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid t distribution");
    1.0 - dist.cdf(t)
}

/// Chi-square goodness of fit against the uniform distribution over bins.
pub fn chi_square_uniform_p(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).expect("valid chi-square");
    1.0 - dist.cdf(stat)
}

/// One-sided sign test: probability of at least `wins` successes out of
/// `trials` non-tied comparisons under p = 1/2.
pub fn sign_test_p(wins: u64, trials: u64) -> f64 {
    if trials == 0 {
        return 1.0;
    }
    if wins == 0 {
        return 1.0;
    }
    let dist = Binomial::new(0.5, trials).expect("valid binomial");
    1.0 - dist.cdf(wins - 1)
}

/// Mean vector and (population) covariance of row-wise samples.
pub fn fit_gaussian(samples: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = samples.len();
    let d = samples.first().map_or(0, |s| s.len());
    let mut mu = DVector::zeros(d);
    for s in samples {
        mu += DVector::from_column_slice(s);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let x = DVector::from_column_slice(s) - &mu;
        cov += &x * x.transpose();
    }
    cov /= n as f64;
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

fn is_singular(m: &DMatrix<f64>) -> bool {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.iter().any(|&v| v <= 1e-12)
}

/// Squared Fréchet distance between two Gaussians,
/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2})`.
pub fn frechet_distance_sq(
    mu1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    cov2: &DMatrix<f64>,
) -> f64 {
    let diff = mu1 - mu2;
    let s1 = sym_sqrt(cov1);
    let inner = &s1 * cov2 * &s1;
    let cross = sym_sqrt(&inner).trace();
    (diff.dot(&diff) + cov1.trace() + cov2.trace() - 2.0 * cross).max(0.0)
}

/// Adds `eps * I` when the covariance is singular; returns whether it did.
pub fn regularize(cov: &mut DMatrix<f64>, eps: f64) -> bool {
    if is_singular(cov) {
        for k in 0..cov.nrows() {
            cov[(k, k)] += eps;
        }
        true
    } else {
        false
    }
}
