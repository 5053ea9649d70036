//! Attribution solvers over coalition values, independent of any image model.
//!
//! A coalition is a `bool` per segment: `true` keeps the segment, `false`
//! replaces it with the baseline.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::error::{MvError, Result};

pub const EXACT_SHAPLEY_MAX_SEGMENTS: usize = 12;
pub const FULL_ENUMERATION_MAX_SEGMENTS: usize = 25;

/// LIME proximity: exponential kernel on the cosine distance between the
/// coalition and the all-ones coalition.
pub fn lime_weight(coalition: &[bool], kernel_width: f64) -> f64 {
    let s = coalition.len() as f64;
    let k = coalition.iter().filter(|&&b| b).count() as f64;
    let d = if k == 0.0 { 1.0 } else { 1.0 - (k / s).sqrt() };
    (-(d * d) / (kernel_width * kernel_width)).exp()
}

/// Weighted ridge regression of `values` on coalition indicators with an
/// unpenalised intercept. Returns the per-segment coefficients.
pub fn lime_fit(coalitions: &[Vec<bool>], values: &[f64], kernel_width: f64, ridge: f64) -> Result<Vec<f64>> {
    let n = coalitions.len();
    if n == 0 || n != values.len() {
        return Err(MvError::InvalidArgument("need one value per coalition".into()));
    }
    if coalitions.iter().all(|c| c == &coalitions[0]) {
        return Err(MvError::Degenerate("all sampled coalitions are identical".into()));
    }
    let s = coalitions[0].len();
    let weights: Vec<f64> = coalitions.iter().map(|c| lime_weight(c, kernel_width)).collect();
    let wsum: f64 = weights.iter().sum();
    let mut xmean = vec![0.0; s];
    let mut ymean = 0.0;
    for ((c, &wt), &y) in coalitions.iter().zip(&weights).zip(values) {
        for (m, &b) in xmean.iter_mut().zip(c) {
            *m += wt * (b as u8 as f64);
        }
        ymean += wt * y;
    }
    xmean.iter_mut().for_each(|m| *m /= wsum);
    ymean /= wsum;

    let mut a = DMatrix::<f64>::zeros(s, s);
    let mut rhs = DVector::<f64>::zeros(s);
    let mut xc = vec![0.0; s];
    for ((c, &wt), &y) in coalitions.iter().zip(&weights).zip(values) {
        for j in 0..s {
            xc[j] = c[j] as u8 as f64 - xmean[j];
        }
        let yc = y - ymean;
        for i in 0..s {
            rhs[i] += wt * xc[i] * yc;
            for j in 0..s {
                a[(i, j)] += wt * xc[i] * xc[j];
            }
        }
    }
    for i in 0..s {
        a[(i, i)] += ridge;
    }
    solve_spd(a, rhs)
}

fn solve_spd(a: DMatrix<f64>, b: DVector<f64>) -> Result<Vec<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(&b).iter().copied().collect());
    }
    // singular normal equations: minimum-norm least-squares solution
    let svd = a.svd(true, true);
    let x = svd
        .solve(&b, 1e-12)
        .map_err(|e| MvError::Degenerate(format!("least-squares solve failed: {e}")))?;
    Ok(x.iter().copied().collect())
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Shapley kernel weight for a coalition of size `k` out of `s`.
pub fn shapley_kernel_weight(s: usize, k: usize) -> f64 {
    if k == 0 || k == s {
        return f64::INFINITY;
    }
    (s - 1) as f64 / (binomial(s, k) * k as f64 * (s - k) as f64)
}

/// Kernel-weighted least squares with the efficiency constraint
/// `sum(phi) == v_full - v_empty`, enforced by eliminating the last segment.
///
/// `coalitions` must exclude the empty and full coalitions; `weights` are the
/// regression weights for each row.
pub fn kernel_shap_fit(
    coalitions: &[Vec<bool>],
    values: &[f64],
    weights: &[f64],
    v_empty: f64,
    v_full: f64,
) -> Result<Vec<f64>> {
    let s = coalitions
        .first()
        .map(|c| c.len())
        .ok_or_else(|| MvError::InvalidArgument("kernel SHAP needs at least one proper coalition".into()))?;
    let delta = v_full - v_empty;
    if s == 1 {
        return Ok(vec![delta]);
    }
    let m = s - 1;
    let mut a = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    let mut x = vec![0.0; m];
    for ((c, &y), &wt) in coalitions.iter().zip(values).zip(weights) {
        let last = c[m] as u8 as f64;
        for j in 0..m {
            x[j] = c[j] as u8 as f64 - last;
        }
        let t = y - v_empty - last * delta;
        for i in 0..m {
            rhs[i] += wt * x[i] * t;
            for j in 0..m {
                a[(i, j)] += wt * x[i] * x[j];
            }
        }
    }
    let mut phi = solve_spd(a, rhs)?;
    let rest: f64 = phi.iter().sum();
    phi.push(delta - rest);
    Ok(phi)
}

pub fn coalition_from_bits(bits: u64, s: usize) -> Vec<bool> {
    (0..s).map(|i| bits >> i & 1 == 1).collect()
}

/// Every proper, non-empty coalition with its Shapley kernel weight.
pub fn enumerate_proper_coalitions(s: usize) -> Result<(Vec<Vec<bool>>, Vec<f64>)> {
    if s > FULL_ENUMERATION_MAX_SEGMENTS {
        return Err(MvError::TooManySegments {
            method: "kernel_shap full enumeration",
            max: FULL_ENUMERATION_MAX_SEGMENTS,
            got: s,
        });
    }
    let full = (1u64 << s) - 1;
    let coalitions: Vec<Vec<bool>> = (1..full).map(|b| coalition_from_bits(b, s)).collect();
    let weights = coalitions
        .iter()
        .map(|c| shapley_kernel_weight(s, c.iter().filter(|&&b| b).count()))
        .collect();
    Ok((coalitions, weights))
}

/// `n` proper coalitions drawn from the Shapley kernel: a size is chosen in
/// proportion to the kernel mass of that size, then a uniform subset of that
/// size, each followed by its complement. Rows are equally weighted.
pub fn sample_kernel_coalitions<R: Rng>(s: usize, n: usize, rng: &mut R) -> Vec<Vec<bool>> {
    let sizes: Vec<usize> = (1..s).collect();
    let mass: Vec<f64> = sizes.iter().map(|&k| (s - 1) as f64 / (k * (s - k)) as f64).collect();
    let total: f64 = mass.iter().sum();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut u = rng.gen::<f64>() * total;
        let mut k = sizes[sizes.len() - 1];
        for (&sz, &m) in sizes.iter().zip(&mass) {
            if u < m {
                k = sz;
                break;
            }
            u -= m;
        }
        let mut c = vec![false; s];
        for i in sample_indices(rng, s, k) {
            c[i] = true;
        }
        let comp: Vec<bool> = c.iter().map(|b| !b).collect();
        out.push(c);
        if out.len() < n {
            out.push(comp);
        }
    }
    out
}

/// Exact Shapley values from the values of all `2^s` coalitions, indexed by
/// bitmask (bit `i` set when segment `i` is kept).
pub fn exact_shapley_from_table(s: usize, table: &[f64]) -> Result<Vec<f64>> {
    if s > EXACT_SHAPLEY_MAX_SEGMENTS {
        return Err(MvError::TooManySegments {
            method: "exact_shapley",
            max: EXACT_SHAPLEY_MAX_SEGMENTS,
            got: s,
        });
    }
    if table.len() != 1 << s {
        return Err(MvError::ShapeMismatch {
            expected: format!("{} coalition values", 1u64 << s),
            actual: table.len().to_string(),
        });
    }
    // |T|! (s - |T| - 1)! / s!
    let weight: Vec<f64> = (0..s).map(|t| 1.0 / (binomial(s - 1, t) * s as f64)).collect();
    let mut phi = vec![0.0; s];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1usize << i;
        for t in 0..table.len() {
            if t & bit == 0 {
                *p += weight[t.count_ones() as usize] * (table[t | bit] - table[t]);
            }
        }
    }
    Ok(phi)
}
