//! Planted-dictionary generator.
//!
//! Two dictionaries share one sparse code stream: sample k of side A is
//! `G_A z_k` and of side B is `G_B z_k`, so ground-truth feature j is the same
//! latent on both sides.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ActivationStream;
use crate::error::{Error, Result};
use crate::numerics::{dot, norm2, Matrix};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFeatureModel {
    /// D × F_true, unit columns.
    pub dict: Matrix,
    /// Expected number of active features per sample.
    pub sparsity: f64,
}

/// Non-zero (feature, magnitude) pairs of one sample, sorted by feature.
pub type SparseCode = Vec<(usize, f64)>;

impl SyntheticFeatureModel {
    /// Gaussian directions normalized to unit length.
    pub fn random(dim: usize, f_true: usize, sparsity: f64, seed: u64) -> Result<Self> {
        if f_true <= dim {
            return Err(Error::Config(format!(
                "planted dictionary needs F_true > D (got {f_true} <= {dim})"
            )));
        }
        let mut rng = rng::derived(seed, "planted-dict");
        let mut dict = Matrix::from_fn(dim, f_true, |_, _| StandardNormal.sample(&mut rng));
        normalize_columns(&mut dict);
        Ok(SyntheticFeatureModel { dict, sparsity })
    }

    pub fn dim(&self) -> usize {
        self.dict.rows()
    }

    pub fn f_true(&self) -> usize {
        self.dict.cols()
    }

    /// Same features seen through a random orthogonal change of basis.
    pub fn rotated(&self, seed: u64) -> SyntheticFeatureModel {
        let r = random_rotation(self.dim(), seed);
        let dict = crate::numerics::matmul(&r, &self.dict).expect("square rotation");
        SyntheticFeatureModel {
            dict,
            sparsity: self.sparsity,
        }
    }

    pub fn embed(&self, z: &SparseCode, out: &mut [f64]) {
        out.fill(0.0);
        let d = self.dim();
        for &(j, a) in z {
            for (r, o) in out.iter_mut().enumerate().take(d) {
                *o += a * self.dict.get(r, j);
            }
        }
    }
}

fn normalize_columns(m: &mut Matrix) {
    for c in 0..m.cols() {
        let n = norm2(&m.column(c));
        for r in 0..m.rows() {
            let v = m.get(r, c) / n;
            m.set(r, c, v);
        }
    }
}

/// Haar-ish random orthogonal matrix via Gram-Schmidt on Gaussian rows.
pub fn random_rotation(dim: usize, seed: u64) -> Matrix {
    let mut rng = rng::derived(seed, "rotation");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _ in 0..2 {
            for u in &rows {
                let p = dot(&v, u);
                for (x, y) in v.iter_mut().zip(u) {
                    *x -= p * y;
                }
            }
        }
        let n = norm2(&v);
        if n > 1e-8 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Matrix::from_fn(dim, dim, |r, c| rows[r][c])
}

/// Each feature independently active with probability `sparsity / f_true`,
/// magnitude uniform on [0.5, 1.5].
pub fn sample_codes(f_true: usize, sparsity: f64, n: usize, seed: u64) -> Vec<SparseCode> {
    let mut rng: Rng = rng::derived(seed, "codes");
    let p = (sparsity / f_true as f64).clamp(0.0, 1.0);
    (0..n)
        .map(|_| {
            (0..f_true)
                .filter_map(|j| {
                    if rng.random::<f64>() < p {
                        Some((j, rng.random_range(0.5..1.5)))
                    } else {
                        None
                    }
                })
                .collect()
        })
        .collect()
}

/// Index-aligned streams driven by the same codes; planted pairing is j ↔ j.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub a: ActivationStream,
    pub b: ActivationStream,
}

pub fn gen_synthetic_pair(
    model_a: &SyntheticFeatureModel,
    model_b: &SyntheticFeatureModel,
    codes: &[SparseCode],
) -> Result<SyntheticPair> {
    if model_a.f_true() != model_b.f_true() {
        return Err(Error::Shape(format!(
            "dictionaries have {} and {} planted features",
            model_a.f_true(),
            model_b.f_true()
        )));
    }
    let f = model_a.f_true();
    let mut a = ActivationStream::new("synthetic.a", model_a.dim());
    let mut b = ActivationStream::new("synthetic.b", model_b.dim());
    a.data.reserve(codes.len() * a.dim);
    b.data.reserve(codes.len() * b.dim);
    let mut va = vec![0.0; model_a.dim()];
    let mut vb = vec![0.0; model_b.dim()];
    for (k, z) in codes.iter().enumerate() {
        if let Some(&(j, v)) = z.iter().find(|(j, v)| *j >= f || !(*v >= 0.0)) {
            return Err(Error::Data(format!("code {k} has invalid entry ({j}, {v})")));
        }
        model_a.embed(z, &mut va);
        model_b.embed(z, &mut vb);
        a.push(k as u64, 1, &va)?;
        b.push(k as u64, 1, &vb)?;
    }
    Ok(SyntheticPair { a, b })
}

/// Dense activation of planted feature `j` over a code stream.
pub fn code_column(codes: &[SparseCode], j: usize) -> Vec<f64> {
    codes
        .iter()
        .map(|z| z.iter().find(|(k, _)| *k == j).map_or(0.0, |(_, v)| *v))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_are_unit_and_rotation_is_orthogonal() {
        let m = SyntheticFeatureModel::random(8, 20, 3.0, 1).unwrap();
        for c in 0..20 {
            assert!((norm2(&m.dict.column(c)) - 1.0).abs() < 1e-12);
        }
        let r = random_rotation(8, 2);
        let rrt = crate::numerics::matmul(&r, &r.transpose()).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((rrt.get(i, j) - e).abs() < 1e-12);
            }
        }
        assert!(SyntheticFeatureModel::random(8, 8, 3.0, 1).is_err());
    }

    #[test]
    fn identical_dictionaries_give_identical_streams() {
        let m = SyntheticFeatureModel::random(6, 12, 2.0, 4).unwrap();
        let codes = sample_codes(12, 2.0, 50, 5);
        let p = gen_synthetic_pair(&m, &m, &codes).unwrap();
        assert_eq!(p.a.data, p.b.data);
        assert_eq!(p.a.len(), p.b.len());
        assert_eq!(p.a.docs, p.b.docs);
    }

    #[test]
    fn one_hot_code_yields_the_column() {
        let m = SyntheticFeatureModel::random(6, 12, 2.0, 4).unwrap();
        let p = gen_synthetic_pair(&m, &m, &[vec![(7, 1.0)]]).unwrap();
        assert_eq!(p.a.row(0), m.dict.column(7).as_slice());
    }

    #[test]
    fn codes_have_expected_density_and_range() {
        let codes = sample_codes(256, 5.0, 4000, 11);
        let total: usize = codes.iter().map(|z| z.len()).sum();
        let mean = total as f64 / codes.len() as f64;
        assert!((mean - 5.0).abs() < 0.3, "mean active {mean}");
        assert!(codes.iter().flatten().all(|(_, v)| (0.5..1.5).contains(v)));
    }

    #[test]
    fn planted_pair_code_correlates_perfectly_with_itself() {
        let codes = sample_codes(30, 3.0, 500, 2);
        let x = code_column(&codes, 4);
        let n = x.len() as f64;
        let (sx, sxx): (f64, f64) = (x.iter().sum(), x.iter().map(|v| v * v).sum());
        let rho = (n * sxx - sx * sx) / ((n * sxx - sx * sx).sqrt() * (n * sxx - sx * sx).sqrt());
        assert!((rho - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_feature_counts_fail() {
        let a = SyntheticFeatureModel::random(6, 12, 2.0, 4).unwrap();
        let b = SyntheticFeatureModel::random(6, 13, 2.0, 4).unwrap();
        assert!(matches!(gen_synthetic_pair(&a, &b, &[]), Err(Error::Shape(_))));
    }
}
