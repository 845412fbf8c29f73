#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use qls_core::Dataset;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub fn normal_mat(rng: &mut ChaCha8Rng, n: usize, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, k, |_, _| rng.sample(StandardNormal))
}

/// Design matrix with an intercept column followed by `p - 1` normal columns.
pub fn design_with_intercept(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
    let mut d = normal_mat(rng, n, p);
    d.column_mut(0).fill(1.0);
    d
}

/// Endogenous linear model with one control and `k2` excluded instruments.
pub fn iv_dataset(rng: &mut ChaCha8Rng, n: usize, k2: usize) -> Dataset {
    let z1 = normal_mat(rng, n, 1);
    let z2 = normal_mat(rng, n, k2);
    let e = normal_vec(rng, n);
    let v = normal_vec(rng, n);
    let x = DVector::from_fn(n, |i, _| z1[(i, 0)] + z2.row(i).sum() + v[i] + 0.5 * e[i]);
    let y = DVector::from_fn(n, |i, _| 1.0 + x[i] + z1[(i, 0)] + e[i]);
    Dataset::new(y, x, z1, z2).unwrap()
}

/// Explicit inverse of a small square matrix by Gauss–Jordan elimination
/// with partial pivoting.
pub fn gauss_jordan_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut inv = DMatrix::<f64>::identity(n, n);
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| m[(i, c)].abs().total_cmp(&m[(j, c)].abs()))
            .unwrap();
        m.swap_rows(c, p);
        inv.swap_rows(c, p);
        let d = m[(c, c)];
        assert!(d.abs() > 1e-14, "singular oracle matrix");
        for j in 0..n {
            m[(c, j)] /= d;
            inv[(c, j)] /= d;
        }
        for r in 0..n {
            if r != c {
                let f = m[(r, c)];
                for j in 0..n {
                    m[(r, j)] -= f * m[(c, j)];
                    inv[(r, j)] -= f * inv[(c, j)];
                }
            }
        }
    }
    inv
}

/// All `k`-element subsets of `0..n` in lexicographic order.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}
