//! Penalized least-squares additive models.
//!
//! A model is an intercept plus a sum of smooth terms. Each term is a
//! (tensor product of) B-spline or factor marginals, optionally multiplied by a
//! `by` covariate. Coefficients minimize
//! `‖y − Xβ‖² + Σ λᵢ βᵀSᵢβ`, with every λ chosen from its grid by GCV in
//! cyclic coordinate sweeps.
//!
//! Identifiability: every term block is column-centered over the training
//! rows, so each term's contributions average to zero there. Blocks whose
//! span contains the constant (plain smooths and factor-`by` smooths) also
//! absorb the matching sum-to-zero constraint into a reduced basis; tensor
//! products absorb it per marginal instead, which keeps them free of the main
//! effects. Numeric-`by` (varying coefficient) blocks are only centered.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{psd_factor, solve_spd};
use crate::splines::{difference_penalty, embed_marginal_penalty, BasisSpec};

const MAX_SWEEPS: usize = 5;
const GCV_TOLERANCE: f64 = 1e-7;

/// Log-spaced default smoothing grid: 21 points from 1e-4 to 1e6.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..21).map(|i| 10f64.powf(-4.0 + 0.5 * i as f64)).collect()
}

/// Named covariate columns of equal length.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureTable {
    len: usize,
    columns: BTreeMap<String, Vec<f64>>,
}

impl FeatureTable {
    pub fn new(len: usize) -> Self {
        Self {
            len,
            columns: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn insert(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if values.len() != self.len {
            return invalid(format!(
                "column `{name}` has {} rows, table has {}",
                values.len(),
                self.len
            ));
        }
        self.columns.insert(name, values);
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        self.insert(name, values)?;
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .get(name)
            .map(|c| c.as_slice())
            .ok_or_else(|| Error::InvalidInput(format!("missing covariate `{name}`")))
    }

    /// Rows selected by index, in order.
    pub fn take(&self, rows: &[usize]) -> FeatureTable {
        FeatureTable {
            len: rows.len(),
            columns: self
                .columns
                .iter()
                .map(|(k, v)| (k.clone(), rows.iter().map(|&r| v[r]).collect()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Marginal {
    Spline { covariate: String, basis: BasisSpec },
    /// Indicator columns for integer levels `0..levels`, ridge-penalized.
    Factor { covariate: String, levels: usize },
}

impl Marginal {
    pub fn spline(covariate: &str, basis: BasisSpec) -> Self {
        Marginal::Spline {
            covariate: covariate.into(),
            basis,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Marginal::Spline { basis, .. } => basis.k,
            Marginal::Factor { levels, .. } => *levels,
        }
    }

    fn penalty(&self) -> Result<DMatrix<f64>> {
        match self {
            Marginal::Spline { basis, .. } => Ok(difference_penalty(basis)?.matrix),
            Marginal::Factor { levels, .. } => Ok(DMatrix::identity(*levels, *levels)),
        }
    }

    fn covariate(&self) -> &str {
        match self {
            Marginal::Spline { covariate, .. } | Marginal::Factor { covariate, .. } => covariate,
        }
    }

    /// Nonzero entries of the marginal row at value `x`.
    fn eval(&self, x: f64, clamp: bool, clamped: &mut usize, out: &mut Vec<(usize, f64)>) -> Result<()> {
        out.clear();
        match self {
            Marginal::Spline { basis, covariate } => {
                let x = if clamp && !basis.contains(x) && x.is_finite() {
                    *clamped += 1;
                    basis.clamp(x)
                } else {
                    x
                };
                let row = basis
                    .eval_sparse(x)
                    .map_err(|e| Error::InvalidInput(format!("covariate `{covariate}`: {e}")))?;
                out.extend(row.iter().filter(|(_, v)| *v != 0.0));
            }
            Marginal::Factor { covariate, levels } => {
                let level = x.round();
                if !x.is_finite() || (x - level).abs() > 1e-9 || level < 0.0 || level as usize >= *levels {
                    return invalid(format!(
                        "covariate `{covariate}` value {x} is not a level in 0..{levels}"
                    ));
                }
                out.push((level as usize, 1.0));
            }
        }
        Ok(())
    }
}

/// Optional multiplier of a term's basis rows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum By {
    #[default]
    None,
    /// Varying-coefficient term: rows scaled by the covariate value.
    Numeric { covariate: String },
    /// Rows kept only where the covariate equals `level`.
    Level { covariate: String, level: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSpec {
    pub name: String,
    pub marginals: Vec<Marginal>,
    #[serde(default)]
    pub by: By,
    pub lambda_grid: Vec<f64>,
}

impl TermSpec {
    pub fn smooth(name: &str, marginal: Marginal) -> Self {
        Self {
            name: name.into(),
            marginals: vec![marginal],
            by: By::None,
            lambda_grid: default_lambda_grid(),
        }
    }

    pub fn tensor(name: &str, marginals: Vec<Marginal>) -> Self {
        Self {
            name: name.into(),
            marginals,
            by: By::None,
            lambda_grid: default_lambda_grid(),
        }
    }

    pub fn with_by(mut self, by: By) -> Self {
        self.by = by;
        self
    }

    pub fn with_grid(mut self, grid: Vec<f64>) -> Self {
        self.lambda_grid = grid;
        self
    }

    pub fn raw_dim(&self) -> usize {
        self.marginals.iter().map(|m| m.dim()).product()
    }

    pub fn n_penalties(&self) -> usize {
        self.marginals.len()
    }

    /// Column layout of marginal dimensions (tensor terms only differ).
    fn dims(&self) -> Vec<usize> {
        self.marginals.iter().map(|m| m.dim()).collect()
    }

    fn absorbs_term_constraint(&self) -> bool {
        self.marginals.len() == 1 && !matches!(self.by, By::Numeric { .. })
    }

    fn covariates(&self) -> Vec<&str> {
        let mut c: Vec<&str> = self.marginals.iter().map(|m| m.covariate()).collect();
        match &self.by {
            By::None => {}
            By::Numeric { covariate } | By::Level { covariate, .. } => c.push(covariate),
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GamSpec {
    pub terms: Vec<TermSpec>,
}

impl GamSpec {
    pub fn new(terms: Vec<TermSpec>) -> Result<Self> {
        let spec = Self { terms };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for t in &self.terms {
            if !names.insert(t.name.as_str()) {
                return invalid(format!("duplicate term name `{}`", t.name));
            }
            if t.marginals.is_empty() {
                return invalid(format!("term `{}` has no marginals", t.name));
            }
            for m in &t.marginals {
                if let Marginal::Spline { basis, .. } = m {
                    basis.validate()?;
                }
                if m.dim() == 0 {
                    return invalid(format!("term `{}` has an empty marginal", t.name));
                }
            }
            let g = &t.lambda_grid;
            let zero_only = g.len() == 1 && g[0] == 0.0;
            if g.is_empty() || !(zero_only || g.iter().all(|l| *l > 0.0 && l.is_finite())) {
                return invalid(format!(
                    "term `{}` needs a strictly positive λ grid (or exactly [0])",
                    t.name
                ));
            }
        }
        Ok(())
    }
}

/// Reusable scratch space for row evaluation.
#[derive(Default)]
struct RowScratch {
    marginal: Vec<(usize, f64)>,
    acc: Vec<(usize, f64)>,
    next: Vec<(usize, f64)>,
}

/// Raw (uncentered, unconstrained) nonzeros of a term's row `t`.
fn term_row(
    term: &TermSpec,
    dims: &[usize],
    cov: &[&[f64]],
    t: usize,
    clamp: bool,
    clamped: &mut usize,
    scratch: &mut RowScratch,
) -> Result<()> {
    let scale = match &term.by {
        By::None => 1.0,
        By::Numeric { .. } => cov[term.marginals.len()][t],
        By::Level { level, .. } => {
            let v = cov[term.marginals.len()][t];
            if (v - *level as f64).abs() < 1e-9 {
                1.0
            } else {
                0.0
            }
        }
    };
    scratch.acc.clear();
    if scale == 0.0 {
        return Ok(());
    }
    if !scale.is_finite() {
        return invalid(format!("term `{}`: non-finite by-value", term.name));
    }
    scratch.acc.push((0, scale));
    for (j, m) in term.marginals.iter().enumerate() {
        m.eval(cov[j][t], clamp, clamped, &mut scratch.marginal)?;
        scratch.next.clear();
        for &(ca, va) in &scratch.acc {
            for &(cb, vb) in &scratch.marginal {
                scratch.next.push((ca * dims[j] + cb, va * vb));
            }
        }
        std::mem::swap(&mut scratch.acc, &mut scratch.next);
    }
    Ok(())
}

fn covariate_columns<'a>(term: &TermSpec, table: &'a FeatureTable) -> Result<Vec<&'a [f64]>> {
    term.covariates().into_iter().map(|c| table.get(c)).collect()
}

/// Orthonormal basis (k × k−1) of the complement of `c`, via a Householder
/// reflection. Returns `None` when `c` vanishes.
fn constraint_null_space(c: &DVector<f64>) -> Option<DMatrix<f64>> {
    let k = c.len();
    let norm = c.norm();
    if norm == 0.0 || k < 2 {
        return None;
    }
    let mut u = c.clone();
    let sign = if c[0] >= 0.0 { 1.0 } else { -1.0 };
    u[0] += sign * norm;
    let uu = u.dot(&u);
    let h = DMatrix::<f64>::identity(k, k) - (&u * u.transpose()) * (2.0 / uu);
    Some(h.columns(1, k - 1).into_owned())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedTerm {
    pub spec: TermSpec,
    /// Coefficients on the raw basis columns (after constraint absorption).
    pub coefficients: Vec<f64>,
    /// Smoothing parameter per marginal penalty.
    pub lambdas: Vec<f64>,
    /// Training column means of the raw block (centering constants).
    pub column_means: Vec<f64>,
    /// Effective degrees of freedom of the term.
    pub edf: f64,
}

impl FittedTerm {
    /// `meansᵀβ`: the constant removed from every contribution.
    pub fn centering_offset(&self) -> f64 {
        self.column_means
            .iter()
            .zip(&self.coefficients)
            .map(|(m, b)| m * b)
            .sum()
    }
}

/// Fitted additive model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GamFit {
    pub intercept: f64,
    pub terms: Vec<FittedTerm>,
    #[serde(skip)]
    pub residuals: Vec<f64>,
    pub residual_scale: f64,
    pub gcv: f64,
    /// Total effective degrees of freedom, intercept included.
    pub edf: f64,
    pub n_obs: usize,
}

/// Per-term decomposition of predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Contributions {
    pub intercept: f64,
    pub terms: Vec<(String, Vec<f64>)>,
    /// Covariate values clamped into a non-cyclic basis domain.
    pub clamped: usize,
}

impl Contributions {
    pub fn total(&self) -> Vec<f64> {
        let n = self.terms.first().map(|t| t.1.len()).unwrap_or(0);
        let mut out = vec![self.intercept; n];
        for (_, c) in &self.terms {
            for (o, v) in out.iter_mut().zip(c) {
                *o += v;
            }
        }
        out
    }

    pub fn term(&self, name: &str) -> Option<&[f64]> {
        self.terms
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }
}

struct TermLayout {
    raw_dim: usize,
    raw_offset: usize,
    fit_offset: usize,
    fit_dim: usize,
    /// raw_dim × fit_dim
    z: DMatrix<f64>,
    /// Penalties in the term's fit coordinates.
    penalties: Vec<DMatrix<f64>>,
    means: Vec<f64>,
}

struct PenaltyEntry {
    term: usize,
    marginal: usize,
    grid: Vec<f64>,
}

/// Sparse raw rows of all training observations, per term.
struct RawRows {
    ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

fn build_raw_rows(term: &TermSpec, table: &FeatureTable, clamp: bool) -> Result<(RawRows, usize)> {
    let cov = covariate_columns(term, table)?;
    let dims = term.dims();
    let mut scratch = RowScratch::default();
    let mut clamped = 0;
    let mut rows = RawRows {
        ptr: Vec::with_capacity(table.len() + 1),
        cols: Vec::new(),
        vals: Vec::new(),
    };
    rows.ptr.push(0);
    for t in 0..table.len() {
        term_row(term, &dims, &cov, t, clamp, &mut clamped, &mut scratch)?;
        for &(c, v) in &scratch.acc {
            rows.cols.push(c as u32);
            rows.vals.push(v);
        }
        rows.ptr.push(rows.cols.len());
    }
    Ok((rows, clamped))
}

fn marginal_column_sums(m: &Marginal, x: &[f64]) -> Result<DVector<f64>> {
    let mut sums = DVector::zeros(m.dim());
    let mut buf = Vec::new();
    let mut clamped = 0;
    for &v in x {
        m.eval(v, false, &mut clamped, &mut buf)?;
        for &(c, w) in &buf {
            sums[c] += w;
        }
    }
    Ok(sums)
}

/// Builds constraint bases and fit-space penalties for a term.
fn term_layout(
    term: &TermSpec,
    table: &FeatureTable,
    rows: &RawRows,
    raw_offset: usize,
    fit_offset: usize,
) -> Result<TermLayout> {
    let raw_dim = term.raw_dim();
    let n = table.len() as f64;
    let mut sums = DVector::zeros(raw_dim);
    for (c, v) in rows.cols.iter().zip(&rows.vals) {
        sums[*c as usize] += v;
    }
    let means: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let dims = term.dims();
    let raw_penalties: Vec<DMatrix<f64>> = term
        .marginals
        .iter()
        .enumerate()
        .map(|(j, m)| Ok(embed_marginal_penalty(&m.penalty()?, &dims, j)))
        .collect::<Result<_>>()?;

    let z = if term.absorbs_term_constraint() {
        constraint_null_space(&sums).unwrap_or_else(|| DMatrix::identity(raw_dim, raw_dim))
    } else if term.marginals.len() > 1 {
        let cov = covariate_columns(term, table)?;
        let mut z = DMatrix::from_element(1, 1, 1.0);
        for (j, m) in term.marginals.iter().enumerate() {
            let s = marginal_column_sums(m, cov[j])?;
            let zj = constraint_null_space(&s)
                .unwrap_or_else(|| DMatrix::identity(m.dim(), m.dim()));
            z = z.kronecker(&zj);
        }
        z
    } else {
        DMatrix::identity(raw_dim, raw_dim)
    };
    let fit_dim = z.ncols();
    let penalties = raw_penalties
        .iter()
        .map(|s| {
            let mut p = z.transpose() * s * &z;
            crate::linalg::symmetrize(&mut p);
            p
        })
        .collect();
    Ok(TermLayout {
        raw_dim,
        raw_offset,
        fit_offset,
        fit_dim,
        z,
        penalties,
        means,
    })
}

fn add_penalty(target: &mut DMatrix<f64>, layout: &TermLayout, s: &DMatrix<f64>, lambda: f64) {
    if lambda == 0.0 {
        return;
    }
    let o = layout.fit_offset;
    for i in 0..layout.fit_dim {
        for j in 0..layout.fit_dim {
            target[(o + i, o + j)] += lambda * s[(i, j)];
        }
    }
}

/// Penalized normal equations in fit coordinates.
struct System {
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
    /// Σ (y − ȳ)²
    yy: f64,
    n: f64,
}

impl System {
    fn penalized(&self, layouts: &[TermLayout], pens: &[PenaltyEntry], lambdas: &[f64]) -> DMatrix<f64> {
        let mut h = self.gram.clone();
        for (p, l) in pens.iter().zip(lambdas) {
            add_penalty(&mut h, &layouts[p.term], &layouts[p.term].penalties[p.marginal], *l);
        }
        h
    }

    fn gcv(&self, rss: f64, edf_terms: f64) -> f64 {
        let tr = 1.0 + edf_terms;
        if tr >= self.n {
            return f64::INFINITY;
        }
        self.n * rss / (self.n - tr).powi(2)
    }

    /// Solves at fixed λ; returns (β, RSS, term edf per fit coordinate).
    fn solve(
        &self,
        layouts: &[TermLayout],
        pens: &[PenaltyEntry],
        lambdas: &[f64],
    ) -> Result<(DVector<f64>, f64, DVector<f64>)> {
        let h = self.penalized(layouts, pens, lambdas);
        let beta = solve_spd(&h, &self.rhs)?;
        let rss = (self.yy - 2.0 * beta.dot(&self.rhs) + (self.gram.clone() * &beta).dot(&beta)).max(0.0);
        // diag(H⁻¹G) gives per-coefficient effective degrees of freedom
        let factor = psd_factor(&h).map_err(|_| Error::Singular("penalized system".into()))?;
        let l = factor.lower;
        let y = l
            .solve_lower_triangular(&self.gram)
            .ok_or_else(|| Error::Singular("penalized system".into()))?;
        let hinv_g = l
            .tr_solve_lower_triangular(&y)
            .ok_or_else(|| Error::Singular("penalized system".into()))?;
        Ok((beta, rss, hinv_g.diagonal()))
    }

    /// Exact GCV profile over the grid of penalty `j` with all others fixed,
    /// from one generalized eigendecomposition.
    fn profile(
        &self,
        layouts: &[TermLayout],
        pens: &[PenaltyEntry],
        lambdas: &[f64],
        j: usize,
    ) -> Result<Vec<f64>> {
        let grid = &pens[j].grid;
        let base = grid.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut shifted = lambdas.to_vec();
        shifted[j] = base;
        let a = self.penalized(layouts, pens, &shifted);
        let p = a.nrows();
        let mut s = DMatrix::zeros(p, p);
        add_penalty(&mut s, &layouts[pens[j].term], &layouts[pens[j].term].penalties[pens[j].marginal], 1.0);
        let l = psd_factor(&a)
            .map_err(|_| Error::Singular("penalized system".into()))?
            .lower;
        let singular = || Error::Singular("penalized system".into());
        let ls = l.solve_lower_triangular(&s).ok_or_else(singular)?;
        let mut c = l.solve_lower_triangular(&ls.transpose()).ok_or_else(singular)?;
        crate::linalg::symmetrize(&mut c);
        let eig = c.symmetric_eigen();
        let w = l
            .tr_solve_lower_triangular(&eig.eigenvectors)
            .ok_or_else(singular)?;
        let z = w.transpose() * &self.rhs;
        let m = w.transpose() * (&self.gram * &w);
        let d = eig.eigenvalues;
        let mut out = Vec::with_capacity(grid.len());
        let mut v = DVector::zeros(p);
        for &lambda in grid {
            let mu = lambda - base;
            let mut edf = 0.0;
            for i in 0..p {
                let shrink = 1.0 / (1.0 + mu * d[i].max(0.0));
                v[i] = z[i] * shrink;
                edf += m[(i, i)] * shrink;
            }
            let rss = (self.yy - 2.0 * v.dot(&z) + (&m * &v).dot(&v)).max(0.0);
            out.push(self.gcv(rss, edf));
        }
        Ok(out)
    }
}

/// Fits the model by penalized least squares with GCV smoothing selection.
pub fn fit_gam(spec: &GamSpec, covariates: &FeatureTable, y: &[f64]) -> Result<GamFit> {
    spec.validate()?;
    let n = y.len();
    if n < 2 {
        return invalid("a GAM needs at least two observations");
    }
    if covariates.len() != n {
        return invalid(format!(
            "{} covariate rows for {} responses",
            covariates.len(),
            n
        ));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("GAM response".into()));
    }
    let mean_y = y.iter().sum::<f64>() / n as f64;
    let yc: Vec<f64> = y.iter().map(|v| v - mean_y).collect();

    let mut rows = Vec::with_capacity(spec.terms.len());
    let mut layouts = Vec::with_capacity(spec.terms.len());
    let (mut raw_total, mut fit_total) = (0, 0);
    for term in &spec.terms {
        let (r, _) = build_raw_rows(term, covariates, false)?;
        let layout = term_layout(term, covariates, &r, raw_total, fit_total)?;
        raw_total += layout.raw_dim;
        fit_total += layout.fit_dim;
        rows.push(r);
        layouts.push(layout);
    }

    // raw Gram and cross-products from the sparse rows
    let mut g_raw = DMatrix::<f64>::zeros(raw_total, raw_total);
    let mut b_raw = DVector::<f64>::zeros(raw_total);
    let mut buf: Vec<(usize, f64)> = Vec::new();
    for t in 0..n {
        buf.clear();
        for (r, l) in rows.iter().zip(&layouts) {
            for k in r.ptr[t]..r.ptr[t + 1] {
                buf.push((l.raw_offset + r.cols[k] as usize, r.vals[k]));
            }
        }
        for (i, &(a, va)) in buf.iter().enumerate() {
            b_raw[a] += va * yc[t];
            for &(b, vb) in &buf[i..] {
                g_raw[(a.min(b), a.max(b))] += va * vb;
            }
        }
    }
    let means: Vec<f64> = layouts.iter().flat_map(|l| l.means.iter().cloned()).collect();
    for a in 0..raw_total {
        for b in a..raw_total {
            let v = g_raw[(a, b)] - n as f64 * means[a] * means[b];
            g_raw[(a, b)] = v;
            g_raw[(b, a)] = v;
        }
    }
    // yc sums to zero, so centering leaves the cross-products unchanged

    let mut zbig = DMatrix::<f64>::zeros(raw_total, fit_total);
    for l in &layouts {
        zbig.view_mut((l.raw_offset, l.fit_offset), (l.raw_dim, l.fit_dim))
            .copy_from(&l.z);
    }
    let mut gram = zbig.transpose() * (&g_raw * &zbig);
    crate::linalg::symmetrize(&mut gram);
    let system = System {
        gram,
        rhs: zbig.transpose() * b_raw,
        yy: yc.iter().map(|v| v * v).sum(),
        n: n as f64,
    };

    let mut pens = Vec::new();
    let mut lambdas = Vec::new();
    for (ti, term) in spec.terms.iter().enumerate() {
        for m in 0..term.n_penalties() {
            let grid = term.lambda_grid.clone();
            // start from the grid point closest to 1 on a log scale
            let start = grid
                .iter()
                .cloned()
                .min_by(|a, b| {
                    let d = |x: f64| if x > 0.0 { x.ln().abs() } else { f64::INFINITY };
                    d(*a).total_cmp(&d(*b))
                })
                .unwrap_or(0.0);
            lambdas.push(start);
            pens.push(PenaltyEntry {
                term: ti,
                marginal: m,
                grid,
            });
        }
    }

    let selectable: Vec<usize> = (0..pens.len()).filter(|&j| pens[j].grid.len() > 1).collect();
    if !selectable.is_empty() {
        let mut previous = f64::INFINITY;
        for _ in 0..MAX_SWEEPS {
            let mut current = f64::INFINITY;
            for &j in &selectable {
                let scores = system.profile(&layouts, &pens, &lambdas, j)?;
                let (best, score) = scores
                    .iter()
                    .enumerate()
                    .fold((0, f64::INFINITY), |acc, (i, s)| if *s < acc.1 { (i, *s) } else { acc });
                if score.is_finite() {
                    lambdas[j] = pens[j].grid[best];
                    current = score;
                }
            }
            if (previous - current).abs() < GCV_TOLERANCE * current.abs().max(f64::MIN_POSITIVE) {
                break;
            }
            previous = current;
        }
    }

    let (beta, rss, edf_diag) = system.solve(&layouts, &pens, &lambdas)?;
    let edf_terms: f64 = edf_diag.iter().sum();
    let gcv = system.gcv(rss, edf_terms);

    let mut terms = Vec::with_capacity(spec.terms.len());
    let mut fitted = vec![mean_y; n];
    for (ti, (term, l)) in spec.terms.iter().zip(&layouts).enumerate() {
        let bf = beta.rows(l.fit_offset, l.fit_dim).into_owned();
        let braw = &l.z * bf;
        let coefficients: Vec<f64> = braw.iter().cloned().collect();
        let offset: f64 = l.means.iter().zip(&coefficients).map(|(m, b)| m * b).sum();
        let r = &rows[ti];
        for (t, f) in fitted.iter_mut().enumerate() {
            let mut v = -offset;
            for k in r.ptr[t]..r.ptr[t + 1] {
                v += r.vals[k] * coefficients[r.cols[k] as usize];
            }
            *f += v;
        }
        let term_lambdas = pens
            .iter()
            .zip(&lambdas)
            .filter(|(p, _)| p.term == ti)
            .map(|(_, l)| *l)
            .collect();
        terms.push(FittedTerm {
            spec: term.clone(),
            coefficients,
            lambdas: term_lambdas,
            column_means: l.means.clone(),
            edf: edf_diag.rows(l.fit_offset, l.fit_dim).sum(),
        });
    }
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let residual_scale = (residuals.iter().map(|r| r * r).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    Ok(GamFit {
        intercept: mean_y,
        terms,
        residuals,
        residual_scale,
        gcv,
        edf: 1.0 + edf_terms,
        n_obs: n,
    })
}

/// GCV score `n·RSS / (n − tr(A))²` of a penalized least-squares fit with an
/// explicit dense design (include an intercept column if wanted).
pub fn gcv_score(
    y: &[f64],
    x: &DMatrix<f64>,
    penalties: &[DMatrix<f64>],
    lambdas: &[f64],
) -> Result<f64> {
    let n = y.len();
    if x.nrows() != n || penalties.len() != lambdas.len() {
        return invalid("gcv_score: dimension mismatch");
    }
    let yv = DVector::from_column_slice(y);
    let g = x.transpose() * x;
    let mut h = g.clone();
    for (s, l) in penalties.iter().zip(lambdas) {
        h += s * *l;
    }
    let beta = solve_spd(&h, &(x.transpose() * &yv))?;
    let rss = (&yv - x * &beta).norm_squared();
    let l = psd_factor(&h)?.lower;
    let hinv_g = l
        .solve_lower_triangular(&g)
        .and_then(|v| l.tr_solve_lower_triangular(&v))
        .ok_or_else(|| Error::Singular("gcv_score".into()))?;
    let tr = hinv_g.trace();
    if tr >= n as f64 {
        return invalid(format!("saturated fit: tr(A) = {tr} ≥ n = {n}"));
    }
    Ok(n as f64 * rss / (n as f64 - tr).powi(2))
}

impl GamFit {
    pub fn term_names(&self) -> Vec<&str> {
        self.terms.iter().map(|t| t.spec.name.as_str()).collect()
    }

    pub fn term_index(&self, name: &str) -> Option<usize> {
        self.terms.iter().position(|t| t.spec.name == name)
    }

    /// Contribution of one term at every row of `covariates`, using the
    /// training centering constants. Non-cyclic covariates outside the basis
    /// domain are clamped to it; the count is added to `clamped`.
    pub fn term_contribution(
        &self,
        index: usize,
        covariates: &FeatureTable,
        clamped: &mut usize,
    ) -> Result<Vec<f64>> {
        let term = &self.terms[index];
        let cov = covariate_columns(&term.spec, covariates)?;
        let dims = term.spec.dims();
        let offset = term.centering_offset();
        let mut scratch = RowScratch::default();
        (0..covariates.len())
            .map(|t| {
                term_row(&term.spec, &dims, &cov, t, true, clamped, &mut scratch)?;
                Ok(scratch
                    .acc
                    .iter()
                    .map(|&(c, v)| v * term.coefficients[c])
                    .sum::<f64>()
                    - offset)
            })
            .collect()
    }

    pub fn term_contributions(&self, covariates: &FeatureTable) -> Result<Contributions> {
        let mut clamped = 0;
        let terms = (0..self.terms.len())
            .map(|i| {
                Ok((
                    self.terms[i].spec.name.clone(),
                    self.term_contribution(i, covariates, &mut clamped)?,
                ))
            })
            .collect::<Result<_>>()?;
        if clamped > 0 {
            log::warn!("{clamped} covariate values clamped into their basis domains");
        }
        Ok(Contributions {
            intercept: self.intercept,
            terms,
            clamped,
        })
    }

    pub fn predict(&self, covariates: &FeatureTable) -> Result<Vec<f64>> {
        let c = self.term_contributions(covariates)?;
        if c.terms.is_empty() {
            return Ok(vec![self.intercept; covariates.len()]);
        }
        Ok(c.total())
    }
}

pub fn predict_gam(fit: &GamFit, covariates: &FeatureTable) -> Result<Vec<f64>> {
    fit.predict(covariates)
}

pub fn term_contributions(fit: &GamFit, covariates: &FeatureTable) -> Result<Contributions> {
    fit.term_contributions(covariates)
}
