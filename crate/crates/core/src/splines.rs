//! Cubic B-spline bases on equidistant knots (open and cyclic), difference
//! penalties, and row-wise tensor products.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const DEGREE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    /// Number of basis functions.
    pub k: usize,
    pub lo: f64,
    pub hi: f64,
    pub cyclic: bool,
    pub penalty_order: usize,
}

impl BasisSpec {
    pub fn new(k: usize, lo: f64, hi: f64, cyclic: bool, penalty_order: usize) -> Result<Self> {
        let spec = Self {
            k,
            lo,
            hi,
            cyclic,
            penalty_order,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn open(k: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(k, lo, hi, false, 2)
    }

    pub fn cyclic(k: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(k, lo, hi, true, 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.penalty_order < 1 {
            return invalid("penalty order must be at least 1");
        }
        if self.k < self.penalty_order + 1 {
            return invalid(format!(
                "basis dimension {} must exceed penalty order {}",
                self.k, self.penalty_order
            ));
        }
        if !(self.lo < self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return invalid(format!("empty domain [{}, {}]", self.lo, self.hi));
        }
        Ok(())
    }

    fn check_evaluable(&self) -> Result<()> {
        self.validate()?;
        if self.k < DEGREE + 1 {
            return invalid(format!(
                "a cubic basis needs at least {} functions, got {}",
                DEGREE + 1,
                self.k
            ));
        }
        Ok(())
    }

    /// Knot spacing.
    pub fn spacing(&self) -> f64 {
        let intervals = if self.cyclic { self.k } else { self.k - DEGREE };
        (self.hi - self.lo) / intervals as f64
    }

    /// Knot vector: for open bases `k + 4` knots starting three spacings
    /// below `lo`; for cyclic bases the `k + 7` knots of the unwrapped
    /// uniform basis.
    pub fn knots(&self) -> Vec<f64> {
        let h = self.spacing();
        let count = if self.cyclic { self.k + 2 * DEGREE + 1 } else { self.k + DEGREE + 1 };
        (0..count)
            .map(|j| self.lo + (j as f64 - DEGREE as f64) * h)
            .collect()
    }

    /// Clamps `x` into the domain (no-op for cyclic bases).
    pub fn clamp(&self, x: f64) -> f64 {
        if self.cyclic {
            x
        } else {
            x.clamp(self.lo, self.hi)
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.cyclic || (x >= self.lo && x <= self.hi)
    }

    /// The four nonzero basis values at `x` as `(column, value)` pairs.
    pub fn eval_sparse(&self, x: f64) -> Result<[(usize, f64); 4]> {
        if !x.is_finite() {
            return invalid(format!("non-finite covariate value {x}"));
        }
        let h = self.spacing();
        let (span, local) = if self.cyclic {
            let period = self.hi - self.lo;
            let mut r = (x - self.lo).rem_euclid(period);
            if r >= period {
                r = 0.0;
            }
            let i = ((r / h).floor() as usize).min(self.k - 1);
            (i, r)
        } else {
            if x < self.lo || x > self.hi {
                return invalid(format!(
                    "value {x} outside basis domain [{}, {}]",
                    self.lo, self.hi
                ));
            }
            let r = x - self.lo;
            let i = ((r / h).floor() as usize).min(self.k - DEGREE - 1);
            (i, r)
        };
        // Local knots around the span on the uniform grid (relative to lo).
        let knot = |j: isize| (span as isize + j) as f64 * h;
        let vals = de_boor_nonzero(local, &knot);
        let mut out = [(0usize, 0.0); 4];
        for (r, v) in vals.iter().enumerate() {
            let col = if self.cyclic {
                (span + r + self.k - DEGREE) % self.k
            } else {
                span + r
            };
            out[r] = (col, *v);
        }
        Ok(out)
    }
}

/// Cox–de Boor triangular recursion for the four cubic basis functions that
/// are nonzero on the span `[knot(0), knot(1))`.
fn de_boor_nonzero(x: f64, knot: &dyn Fn(isize) -> f64) -> [f64; 4] {
    let mut n = [0.0; 4];
    let mut left = [0.0; 4];
    let mut right = [0.0; 4];
    n[0] = 1.0;
    for j in 1..=DEGREE {
        left[j] = x - knot(1 - j as isize);
        right[j] = knot(j as isize) - x;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    n
}

/// Dense evaluation of a basis (or a tensor product of bases) at a set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignBlock {
    pub matrix: DMatrix<f64>,
    /// Marginal bases, one per tensor factor.
    pub specs: Vec<BasisSpec>,
}

impl DesignBlock {
    pub fn new(matrix: DMatrix<f64>, spec: BasisSpec) -> Self {
        Self {
            matrix,
            specs: vec![spec],
        }
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }
}

pub fn bspline_design(x: &[f64], spec: &BasisSpec) -> Result<DesignBlock> {
    spec.check_evaluable()?;
    let mut m = DMatrix::zeros(x.len(), spec.k);
    for (i, &xi) in x.iter().enumerate() {
        for (c, v) in spec.eval_sparse(xi)? {
            m[(i, c)] += v;
        }
    }
    Ok(DesignBlock::new(m, *spec))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyBlock {
    pub matrix: DMatrix<f64>,
    pub order: usize,
    pub cyclic: bool,
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Order-p difference matrix; cyclic bases get `k` rows that wrap the seam.
pub fn difference_matrix(spec: &BasisSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let (k, p) = (spec.k, spec.penalty_order);
    let coef: Vec<f64> = (0..=p)
        .map(|i| {
            let sign = if (p - i) % 2 == 0 { 1.0 } else { -1.0 };
            sign * binomial(p, i)
        })
        .collect();
    let rows = if spec.cyclic { k } else { k - p };
    let mut d = DMatrix::zeros(rows, k);
    for r in 0..rows {
        for (i, c) in coef.iter().enumerate() {
            d[(r, (r + i) % k)] += c;
        }
    }
    Ok(d)
}

/// `S = DᵀD` for the order-p difference matrix of the basis.
pub fn difference_penalty(spec: &BasisSpec) -> Result<PenaltyBlock> {
    let d = difference_matrix(spec)?;
    Ok(PenaltyBlock {
        matrix: d.transpose() * d,
        order: spec.penalty_order,
        cyclic: spec.cyclic,
    })
}

/// Kronecker product of two row vectors, first factor varying slowest.
pub fn kron_row(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for x in a {
        for y in b {
            out.push(x * y);
        }
    }
    out
}

/// Embeds the `j`-th marginal penalty as `I ⊗ … ⊗ S_j ⊗ … ⊗ I`.
pub fn embed_marginal_penalty(s: &DMatrix<f64>, dims: &[usize], j: usize) -> DMatrix<f64> {
    let before: usize = dims[..j].iter().product();
    let after: usize = dims[j + 1..].iter().product();
    let left = DMatrix::<f64>::identity(before, before);
    let right = DMatrix::<f64>::identity(after, after);
    left.kronecker(s).kronecker(&right)
}

/// Row-wise tensor product of marginal design blocks with one embedded
/// penalty per marginal.
pub fn tensor_design(blocks: &[DesignBlock]) -> Result<(DesignBlock, Vec<PenaltyBlock>)> {
    let Some(first) = blocks.first() else {
        return invalid("tensor product of zero blocks");
    };
    let rows = first.rows();
    if let Some(b) = blocks.iter().find(|b| b.rows() != rows) {
        return invalid(format!(
            "marginal row counts differ: {} vs {}",
            rows,
            b.rows()
        ));
    }
    let dims: Vec<usize> = blocks.iter().map(|b| b.cols()).collect();
    let cols: usize = dims.iter().product();
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        let mut row = vec![1.0];
        for b in blocks {
            let r: Vec<f64> = b.matrix.row(i).iter().cloned().collect();
            row = kron_row(&row, &r);
        }
        for (c, v) in row.into_iter().enumerate() {
            m[(i, c)] = v;
        }
    }
    let mut penalties = Vec::with_capacity(blocks.len());
    let mut specs = Vec::new();
    for (j, b) in blocks.iter().enumerate() {
        // a marginal built by tensor_design already contributes several specs;
        // its penalty follows the first of them
        let spec = b.specs[0];
        let mut marginal = spec;
        marginal.k = b.cols();
        let s = difference_penalty(&marginal)?;
        penalties.push(PenaltyBlock {
            matrix: embed_marginal_penalty(&s.matrix, &dims, j),
            order: s.order,
            cyclic: s.cyclic,
        });
        specs.extend(b.specs.iter().cloned());
    }
    Ok((DesignBlock { matrix: m, specs }, penalties))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Textbook recursive Cox–de Boor definition over a full knot vector.
    /// Knots extend past the domain, so half-open intervals cover `hi` too.
    fn cox_de_boor(knots: &[f64], j: usize, d: usize, x: f64) -> f64 {
        if d == 0 {
            return if knots[j] <= x && x < knots[j + 1] { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let den1 = knots[j + d] - knots[j];
        if den1 != 0.0 {
            v += (x - knots[j]) / den1 * cox_de_boor(knots, j, d - 1, x);
        }
        let den2 = knots[j + d + 1] - knots[j + 1];
        if den2 != 0.0 {
            v += (knots[j + d + 1] - x) / den2 * cox_de_boor(knots, j + 1, d - 1, x);
        }
        v
    }

    #[test]
    fn matches_recursive_oracle_at_interior_knots() {
        let spec = BasisSpec::open(10, 0.0, 7.0).unwrap();
        let knots = spec.knots();
        for x in [0.0, 1.0, 2.0, 3.5, 4.0, 6.0, 6.3, 7.0] {
            let row = bspline_design(&[x], &spec).unwrap().matrix;
            for j in 0..10 {
                let oracle = cox_de_boor(&knots, j, 3, x);
                assert!(
                    (row[(0, j)] - oracle).abs() < 1e-12,
                    "x={x} j={j}: {} vs {oracle}",
                    row[(0, j)]
                );
            }
        }
    }

    #[test]
    fn cyclic_matches_wrapped_oracle() {
        let spec = BasisSpec::cyclic(8, 0.0, 24.0).unwrap();
        let h = spec.spacing();
        // unwrapped uniform knots over three periods
        let knots: Vec<f64> = (0..40).map(|j| (j as f64 - 11.0) * h).collect();
        for x in [0.0, 1.5, 3.0, 11.9, 23.99] {
            let row = bspline_design(&[x], &spec).unwrap().matrix;
            let mut wrapped = vec![0.0; 8];
            for j in 0..(knots.len() - 4) {
                let v = cox_de_boor(&knots, j, 3, x);
                // basis j starts at knot j; column of the basis starting at lo is 0
                let col = ((j as isize - 11).rem_euclid(8)) as usize;
                wrapped[col] += v;
            }
            for c in 0..8 {
                assert!((row[(0, c)] - wrapped[c]).abs() < 1e-12, "x={x} c={c}");
            }
        }
    }

    #[test]
    fn cyclic_seam_rows_identical() {
        let spec = BasisSpec::cyclic(12, 0.0, 1.0).unwrap();
        let d = bspline_design(&[0.0, 1.0], &spec).unwrap().matrix;
        assert_eq!(d.row(0), d.row(1));
    }

    #[test]
    fn rejects_out_of_domain() {
        let spec = BasisSpec::open(6, 0.0, 1.0).unwrap();
        assert!(bspline_design(&[1.5], &spec).is_err());
    }

    #[test]
    fn first_order_penalty_example() {
        let spec = BasisSpec::new(3, 0.0, 1.0, false, 1).unwrap();
        let d = difference_matrix(&spec).unwrap();
        assert_eq!(d, DMatrix::from_row_slice(2, 3, &[-1.0, 1.0, 0.0, 0.0, -1.0, 1.0]));
        let s = difference_penalty(&spec).unwrap();
        assert_eq!(s.matrix, d.transpose() * d);
    }

    #[test]
    fn penalty_rejects_small_k() {
        assert!(BasisSpec::new(2, 0.0, 1.0, false, 2).is_err());
    }

    #[test]
    fn cyclic_wrap_term_present() {
        let spec = BasisSpec::new(4, 0.0, 1.0, true, 2).unwrap();
        let s = difference_penalty(&spec).unwrap().matrix;
        // quadratic form of β = e_0 - 2 e_3 + e_2 (the (β₁ − 2β₄ + β₃) wrap row)
        let mut w = nalgebra::DVector::zeros(4);
        w[0] = 1.0;
        w[3] = -2.0;
        w[2] = 1.0;
        let d = difference_matrix(&spec).unwrap();
        assert!(d.row_iter().any(|r| r.transpose() == w));
        let e = |i: usize| nalgebra::DVector::<f64>::from_fn(4, |r, _| if r == i { 1.0 } else { 0.0 });
        let open = BasisSpec::new(4, 0.0, 1.0, false, 2).unwrap();
        let s_open = difference_penalty(&open).unwrap().matrix;
        let w2 = nalgebra::DVector::from_vec(vec![-2.0, 1.0, 0.0, 1.0]);
        let expected = &s_open + &w * w.transpose() + &w2 * w2.transpose();
        for i in 0..4 {
            for j in 0..4 {
                let q = |v: &nalgebra::DVector<f64>| (v.transpose() * &s * v)[0];
                let entry = 0.5 * (q(&(e(i) + e(j))) - q(&e(i)) - q(&e(j)));
                let entry = if i == j { q(&e(i)) } else { entry };
                assert!((entry - expected[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn open_penalty_rank() {
        for (k, p) in [(5, 1), (10, 2), (12, 3), (20, 2)] {
            let spec = BasisSpec::new(k, 0.0, 1.0, false, p).unwrap();
            let s = difference_penalty(&spec).unwrap().matrix;
            let sv = s.svd(false, false).singular_values;
            let rank = sv.iter().filter(|v| **v > 1e-9).count();
            assert_eq!(rank, k - p);
        }
    }

    #[test]
    fn cyclic_rotation_invariance() {
        let spec = BasisSpec::cyclic(6, 0.0, 6.0).unwrap();
        let shifted = BasisSpec::cyclic(6, 1.0, 7.0).unwrap();
        let xs: Vec<f64> = (0..30).map(|i| i as f64 * 0.21).collect();
        let a = bspline_design(&xs, &spec).unwrap().matrix;
        let b = bspline_design(&xs, &shifted).unwrap().matrix;
        for i in 0..xs.len() {
            for c in 0..6 {
                assert!((a[(i, (c + 1) % 6)] - b[(i, c)]).abs() < 1e-12);
            }
        }
        // the cyclic penalty is circulant, hence unchanged by the permutation
        let s = difference_penalty(&spec).unwrap().matrix;
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(s[(i, j)], s[((i + 1) % 6, (j + 1) % 6)]);
            }
        }
    }

    #[test]
    fn tensor_examples() {
        let a = DesignBlock::new(
            DMatrix::from_row_slice(2, 2, &[0.25, 0.75, 1.0, 0.0]),
            BasisSpec::new(2, 0.0, 1.0, false, 1).unwrap(),
        );
        let b = DesignBlock::new(
            DMatrix::from_row_slice(2, 3, &[0.2, 0.3, 0.5, 0.0, 1.0, 0.0]),
            BasisSpec::new(3, 0.0, 1.0, false, 1).unwrap(),
        );
        let (t, pens) = tensor_design(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(t.cols(), 6);
        assert_eq!(pens.len(), 2);
        let row0: Vec<f64> = t.matrix.row(0).iter().cloned().collect();
        assert_eq!(row0, kron_row(&[0.25, 0.75], &[0.2, 0.3, 0.5]));
        let short = DesignBlock::new(DMatrix::zeros(3, 3), b.specs[0]);
        assert!(tensor_design(&[a, short]).is_err());
    }

    proptest! {
        #[test]
        fn partition_of_unity(x in 0.0f64..=1.0, k in 4usize..30, cyclic: bool) {
            let spec = BasisSpec::new(k, 0.0, 1.0, cyclic, 2).unwrap();
            let row = spec.eval_sparse(x).unwrap();
            let s: f64 = row.iter().map(|(_, v)| v).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|(_, v)| *v >= -1e-15));
        }

        #[test]
        fn constant_coefficients_unpenalized(c in -10.0f64..10.0, k in 3usize..15, p in 1usize..3, cyclic: bool) {
            prop_assume!(k > p);
            let spec = BasisSpec::new(k, 0.0, 1.0, cyclic, p).unwrap();
            let s = difference_penalty(&spec).unwrap().matrix;
            let beta = nalgebra::DVector::from_element(k, c);
            prop_assert!((beta.transpose() * &s * &beta)[0].abs() < 1e-9);
        }
    }
}
