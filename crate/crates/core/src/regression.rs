//! Least squares with coefficient t-tests and nested-model F-tests, and the
//! strain energy model family fitted over the (strain, texture) grid.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::beta::beta_reg;
use thiserror::Error;

use crate::schema::{csv_header_line, strip_csv_schema, SchemaError, TSED_SCHEMA};

#[derive(Debug, Error)]
pub enum RegressionError {
    #[error("design is rank deficient (condition number {0:e})")]
    RankDeficient(f64),
    #[error("need more observations than terms ({rows} rows, {cols} terms)")]
    TooFewObservations { rows: usize, cols: usize },
    #[error("models are not nested")]
    NotNested,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("unknown model {0}")]
    UnknownModel(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Largest accepted condition number of the column-scaled `X^T X`.
pub const MAX_CONDITION: f64 = 1e12;

pub fn t_cdf(x: f64, dof: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let tail = 0.5 * t_two_sided(x, dof);
    if x >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// `P(|T| >= |x|)`.
pub fn t_two_sided(x: f64, dof: f64) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    beta_reg(dof / 2.0, 0.5, dof / (dof + x * x))
}

pub fn f_cdf(x: f64, d1: f64, d2: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    beta_reg(d1 / 2.0, d2 / 2.0, d1 * x / (d1 * x + d2))
}

/// `P(F >= x)`, evaluated without cancellation.
pub fn f_sf(x: f64, d1: f64, d2: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    beta_reg(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * x))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub terms: Vec<String>,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_values: Vec<f64>,
    pub p_values: Vec<f64>,
    pub residuals: Vec<f64>,
    pub fitted: Vec<f64>,
    pub rss: f64,
    pub dof: usize,
}

impl FitResult {
    pub fn estimate(&self, term: &str) -> Option<f64> {
        self.terms.iter().position(|t| t == term).map(|i| self.estimates[i])
    }

    pub fn sigma2(&self) -> f64 {
        self.rss / self.dof as f64
    }
}

fn condition_number(x: &DMatrix<f64>) -> f64 {
    let mut scaled = x.clone();
    for mut col in scaled.column_iter_mut() {
        let n = col.norm();
        if n == 0.0 {
            return f64::INFINITY;
        }
        col /= n;
    }
    let sv = scaled.singular_values();
    let (lo, hi) = sv.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &s| (a.min(s), b.max(s)));
    if lo == 0.0 {
        f64::INFINITY
    } else {
        (hi / lo).powi(2)
    }
}

/// Least squares by Householder QR of the design.
pub fn ols_fit(x: &DMatrix<f64>, y: &DVector<f64>, terms: &[String]) -> Result<FitResult, RegressionError> {
    let (n, p) = x.shape();
    if n <= p || y.len() != n || terms.len() != p || p == 0 {
        return Err(RegressionError::TooFewObservations { rows: n, cols: p });
    }
    let cond = condition_number(x);
    if !(cond <= MAX_CONDITION) {
        return Err(RegressionError::RankDeficient(cond));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let qty = qr.q().transpose() * y;
    let beta = r.solve_upper_triangular(&qty).ok_or(RegressionError::RankDeficient(cond))?;
    let r_inv = r.solve_upper_triangular(&DMatrix::identity(p, p)).ok_or(RegressionError::RankDeficient(cond))?;
    let cov_unscaled = &r_inv * r_inv.transpose();
    let fitted = x * &beta;
    let residuals = y - &fitted;
    let rss = residuals.norm_squared();
    let dof = n - p;
    let sigma2 = rss / dof as f64;
    let std_errors: Vec<f64> = (0..p).map(|i| (sigma2 * cov_unscaled[(i, i)]).sqrt()).collect();
    let t_values: Vec<f64> = beta
        .iter()
        .zip(&std_errors)
        .map(|(&b, &se)| if se == 0.0 && b == 0.0 { 0.0 } else { b / se })
        .collect();
    let p_values = t_values.iter().map(|&t| t_two_sided(t, dof as f64)).collect();
    Ok(FitResult {
        terms: terms.to_vec(),
        estimates: beta.iter().copied().collect(),
        std_errors,
        t_values,
        p_values,
        residuals: residuals.iter().copied().collect(),
        fitted: fitted.iter().copied().collect(),
        rss,
        dof,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FTest {
    pub f: f64,
    pub p: f64,
    pub q: usize,
    pub dof: usize,
}

/// F-test of the terms present in `full` but not in `reduced`.
pub fn f_test_joint(full: &FitResult, reduced: &FitResult) -> Result<FTest, RegressionError> {
    let f_terms: BTreeSet<&String> = full.terms.iter().collect();
    let r_terms: BTreeSet<&String> = reduced.terms.iter().collect();
    if !r_terms.is_subset(&f_terms) || full.residuals.len() != reduced.residuals.len() {
        return Err(RegressionError::NotNested);
    }
    let q = f_terms.len() - r_terms.len();
    if q == 0 {
        return Ok(FTest { f: 0.0, p: 1.0, q, dof: full.dof });
    }
    let num = ((reduced.rss - full.rss) / q as f64).max(0.0);
    let den = full.rss / full.dof as f64;
    let f = if num == 0.0 { 0.0 } else { num / den };
    Ok(FTest { f, p: f_sf(f, q as f64, full.dof as f64), q, dof: full.dof })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    /// `(theoretical normal quantile, sorted standardised residual)`.
    pub qq: Vec<(f64, f64)>,
    /// `(fitted, residual)` in input order.
    pub residual_vs_fitted: Vec<(f64, f64)>,
}

pub fn residual_diagnostics(fit: &FitResult) -> Diagnostics {
    let n = fit.residuals.len();
    let sigma = fit.sigma2().sqrt();
    let mut std: Vec<f64> =
        fit.residuals.iter().map(|&r| if sigma > 0.0 { r / sigma } else { 0.0 }).collect();
    std.sort_by(f64::total_cmp);
    let normal = Normal::standard();
    let qq = std
        .iter()
        .enumerate()
        .map(|(i, &s)| (normal.inverse_cdf((i as f64 + 0.5) / n as f64), s))
        .collect();
    let residual_vs_fitted = fit.fitted.iter().copied().zip(fit.residuals.iter().copied()).collect();
    Diagnostics { qq, residual_vs_fitted }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Marking {
    Independent,
    MovingAverage,
}

impl Marking {
    pub fn as_str(&self) -> &'static str {
        match self {
            Marking::Independent => "im",
            Marking::MovingAverage => "ma",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "im" => Some(Marking::Independent),
            "ma" => Some(Marking::MovingAverage),
            _ => None,
        }
    }
}

/// One grid point of the strain energy study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsedRecord {
    pub epsilon_m: f64,
    pub kappa: f64,
    pub marking: Marking,
    pub w_total: f64,
    pub w_lamella: Option<f64>,
    pub w_matrix: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Response {
    Total,
    Lamella,
    Matrix,
}

impl Response {
    fn of(&self, r: &TsedRecord) -> Option<f64> {
        match self {
            Response::Total => Some(r.w_total),
            Response::Lamella => r.w_lamella,
            Response::Matrix => r.w_matrix,
        }
    }
}

/// Basis function of a grid point.
#[derive(Debug, Clone, Copy)]
pub struct Term {
    pub name: &'static str,
    pub f: fn(&TsedRecord) -> f64,
}

fn ind(r: &TsedRecord, m: Marking) -> f64 {
    if r.marking == m {
        1.0
    } else {
        0.0
    }
}

pub const INTERCEPT: Term = Term { name: "intercept", f: |_| 1.0 };
pub const EPS: Term = Term { name: "eps", f: |r| r.epsilon_m };
pub const EPS2: Term = Term { name: "eps2", f: |r| r.epsilon_m.powi(2) };
pub const EPS3: Term = Term { name: "eps3", f: |r| r.epsilon_m.powi(3) };
pub const EPS_KAPPA: Term = Term { name: "eps_kappa", f: |r| r.epsilon_m * r.kappa };
pub const EPS2_KAPPA: Term = Term { name: "eps2_kappa", f: |r| r.epsilon_m.powi(2) * r.kappa };
pub const EPS_IM: Term = Term { name: "eps_im", f: |r| r.epsilon_m * ind(r, Marking::Independent) };
pub const EPS2_IM: Term = Term { name: "eps2_im", f: |r| r.epsilon_m.powi(2) * ind(r, Marking::Independent) };
pub const EPS_MA: Term = Term { name: "eps_ma", f: |r| r.epsilon_m * ind(r, Marking::MovingAverage) };
pub const EPS2_MA: Term = Term { name: "eps2_ma", f: |r| r.epsilon_m.powi(2) * ind(r, Marking::MovingAverage) };

#[derive(Debug, Clone)]
pub struct DesignSpec {
    pub name: &'static str,
    pub response: Response,
    pub terms: Vec<Term>,
    /// Coefficient labels (`beta1`, ...), parallel to `terms`.
    pub labels: Vec<&'static str>,
}

impl DesignSpec {
    /// `m1`: strain, squared strain and both texture interactions.
    pub fn m1() -> Self {
        Self {
            name: "m1",
            response: Response::Total,
            terms: vec![EPS, EPS2, EPS_KAPPA, EPS2_KAPPA],
            labels: vec!["beta1", "beta2", "beta3", "beta4"],
        }
    }

    /// `m1p`: `m1` without the quadratic interaction.
    pub fn m1p() -> Self {
        Self {
            name: "m1p",
            response: Response::Total,
            terms: vec![EPS, EPS2, EPS_KAPPA],
            labels: vec!["beta1", "beta2", "beta3"],
        }
    }

    /// `m0`: strain terms only, the null model of the interaction F-test.
    pub fn m0() -> Self {
        Self { name: "m0", response: Response::Total, terms: vec![EPS, EPS2], labels: vec!["beta1", "beta2"] }
    }

    pub fn lamella() -> Self {
        Self {
            name: "lamella",
            response: Response::Lamella,
            terms: vec![INTERCEPT, EPS, EPS2, EPS_KAPPA, EPS2_KAPPA],
            labels: vec!["beta0", "beta1", "beta2", "beta3", "beta4"],
        }
    }

    pub fn matrix() -> Self {
        Self {
            name: "matrix",
            response: Response::Matrix,
            terms: vec![EPS, EPS2, EPS_KAPPA, EPS2_KAPPA],
            labels: vec!["beta1", "beta2", "beta3", "beta4"],
        }
    }

    /// Both markings at zero texture, separate linear and quadratic terms and
    /// a shared cubic term.
    pub fn cubic_pair() -> Self {
        Self {
            name: "cubic",
            response: Response::Total,
            terms: vec![EPS_IM, EPS2_IM, EPS_MA, EPS2_MA, EPS3],
            labels: vec!["beta1", "beta2", "beta3", "beta4", "beta5"],
        }
    }

    pub fn by_name(name: &str) -> Result<Self, RegressionError> {
        Ok(match name {
            "m1" => Self::m1(),
            "m1p" => Self::m1p(),
            "m0" => Self::m0(),
            "lamella" => Self::lamella(),
            "matrix" => Self::matrix(),
            "cubic" => Self::cubic_pair(),
            other => return Err(RegressionError::UnknownModel(other.to_string())),
        })
    }

    pub fn has_intercept(&self) -> bool {
        self.terms.iter().any(|t| t.name == INTERCEPT.name)
    }

    pub fn term_names(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.name.to_string()).collect()
    }

    /// Rows with a defined response; `None` when nothing qualifies.
    pub fn design(&self, data: &[TsedRecord]) -> (DMatrix<f64>, DVector<f64>) {
        let rows: Vec<&TsedRecord> = data.iter().filter(|r| self.response.of(r).is_some()).collect();
        let x = DMatrix::from_fn(rows.len(), self.terms.len(), |i, j| (self.terms[j].f)(rows[i]));
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| self.response.of(r).unwrap()));
        (x, y)
    }

    pub fn fit(&self, data: &[TsedRecord]) -> Result<FitResult, RegressionError> {
        let (x, y) = self.design(data);
        ols_fit(&x, &y, &self.term_names())
    }
}

#[derive(Debug, Clone)]
pub struct ModelSuite {
    pub m1: FitResult,
    pub m1p: FitResult,
    /// Joint test that both texture interactions vanish.
    pub interaction_test: FTest,
    pub lamella: Option<FitResult>,
    pub matrix: Option<FitResult>,
    pub cubic_pair: Option<FitResult>,
}

fn distinct(values: impl Iterator<Item = f64>) -> usize {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

/// Fits the model family. Texture models use the independent-marking rows;
/// the cubic pair uses both markings at zero texture and is skipped when
/// moving-average rows are absent.
pub fn study_model_suite(data: &[TsedRecord]) -> Result<ModelSuite, RegressionError> {
    let im: Vec<TsedRecord> = data.iter().copied().filter(|r| r.marking == Marking::Independent).collect();
    if distinct(im.iter().map(|r| r.epsilon_m)) < 2 || distinct(im.iter().map(|r| r.kappa)) < 2 {
        return Err(RegressionError::InsufficientData(
            "independent marking needs at least two strain and two texture levels".into(),
        ));
    }
    let m1 = DesignSpec::m1().fit(&im)?;
    let m1p = DesignSpec::m1p().fit(&im)?;
    let m0 = DesignSpec::m0().fit(&im)?;
    let interaction_test = f_test_joint(&m1, &m0)?;
    let phase = |spec: DesignSpec| -> Result<Option<FitResult>, RegressionError> {
        let (x, _) = spec.design(&im);
        if x.nrows() <= spec.terms.len() {
            return Ok(None);
        }
        spec.fit(&im).map(Some)
    };
    let lamella = phase(DesignSpec::lamella())?;
    let matrix = phase(DesignSpec::matrix())?;
    let zero: Vec<TsedRecord> = data.iter().copied().filter(|r| r.kappa == 0.0).collect();
    let has_both = zero.iter().any(|r| r.marking == Marking::MovingAverage)
        && zero.iter().any(|r| r.marking == Marking::Independent);
    let cubic_pair = if has_both { Some(DesignSpec::cubic_pair().fit(&zero)?) } else { None };
    Ok(ModelSuite { m1, m1p, interaction_test, lamella, matrix, cubic_pair })
}

const TSED_COLUMNS: [&str; 6] = ["epsilon_m", "kappa", "marking", "w_total", "w_lamella", "w_matrix"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_tsed<W: Write>(records: &[TsedRecord], mut out: W) -> Result<(), RegressionError> {
    out.write_all(csv_header_line(TSED_SCHEMA).as_bytes())?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TSED_COLUMNS)?;
    for r in records {
        w.write_record([
            r.epsilon_m.to_string(),
            r.kappa.to_string(),
            r.marking.as_str().to_string(),
            r.w_total.to_string(),
            opt(r.w_lamella),
            opt(r.w_matrix),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tsed<R: Read>(mut input: R) -> Result<Vec<TsedRecord>, RegressionError> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    let body = strip_csv_schema(&text, TSED_SCHEMA)?;
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    if rdr.headers()?.iter().ne(TSED_COLUMNS.iter().copied()) {
        return Err(SchemaError::Parse(format!("unexpected tsed columns: {:?}", rdr.headers()?)).into());
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let num = |i: usize| -> Result<f64, RegressionError> {
            row[i].trim().parse().map_err(|_| SchemaError::Parse(format!("bad {}: {:?}", TSED_COLUMNS[i], &row[i])).into())
        };
        let optional = |i: usize| -> Result<Option<f64>, RegressionError> {
            if row[i].trim().is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        let marking = Marking::parse(row[2].trim())
            .ok_or_else(|| SchemaError::Parse(format!("bad marking {:?}", &row[2])))?;
        out.push(TsedRecord {
            epsilon_m: num(0)?,
            kappa: num(1)?,
            marking,
            w_total: num(3)?,
            w_lamella: optional(4)?,
            w_matrix: optional(5)?,
        });
    }
    Ok(out)
}

/// Coefficient table: `coefficient, estimate, std_error, t_value, p_value`,
/// p-values with four decimals.
pub fn write_coefficients<W: Write>(spec: &DesignSpec, fit: &FitResult, out: W) -> Result<(), RegressionError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["coefficient", "term", "estimate", "std_error", "t_value", "p_value"])?;
    for i in 0..fit.terms.len() {
        w.write_record([
            spec.labels[i].to_string(),
            fit.terms[i].clone(),
            fit.estimates[i].to_string(),
            fit.std_errors[i].to_string(),
            fit.t_values[i].to_string(),
            format!("{:.4}", fit.p_values[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("x{i}")).collect()
    }

    /// Explicit 3x3 inverse by cofactors.
    fn inv3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let c = |r: usize, k: usize| {
            let (r1, r2) = ((r + 1) % 3, (r + 2) % 3);
            let (k1, k2) = ((k + 1) % 3, (k + 2) % 3);
            m[r1][k1] * m[r2][k2] - m[r1][k2] * m[r2][k1]
        };
        let det = m[0][0] * c(0, 0) + m[0][1] * c(0, 1) + m[0][2] * c(0, 2);
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = c(j, i) / det;
            }
        }
        out
    }

    #[test]
    fn exact_fits() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 5.0]);
        let y = DVector::from_row_slice(&[3.0, 6.0]);
        assert!(ols_fit(&x, &y, &names(2)).is_err());
        let x = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 4.0]);
        let y = DVector::from_row_slice(&[3.0, 6.0, 12.0]);
        let f = ols_fit(&x, &y, &names(1)).unwrap();
        assert!((f.estimates[0] - 3.0).abs() < 1e-12 && f.rss < 1e-20);
        let mut r = rng(1);
        let x = DMatrix::from_fn(12, 3, |_, _| r.random::<f64>());
        let y = &x * DVector::from_row_slice(&[1.5, -2.0, 0.25]);
        let f = ols_fit(&x, &y, &names(3)).unwrap();
        assert!(f.residuals.iter().all(|e| e.abs() < 1e-9));
        assert!((f.estimates[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn matches_explicit_normal_equations() {
        let mut r = rng(2);
        let x = DMatrix::from_fn(10, 3, |_, _| r.random_range(-1.0..1.0));
        let y = DVector::from_fn(10, |_, _| r.random_range(-5.0..5.0));
        let f = ols_fit(&x, &y, &names(3)).unwrap();
        let mut xtx = [[0.0; 3]; 3];
        let mut xty = [0.0; 3];
        for i in 0..3 {
            for k in 0..10 {
                xty[i] += x[(k, i)] * y[k];
                for j in 0..3 {
                    xtx[i][j] += x[(k, i)] * x[(k, j)];
                }
            }
        }
        let inv = inv3(&xtx);
        let rss: f64 = (0..10)
            .map(|k| {
                let fit: f64 = (0..3).map(|i| x[(k, i)] * (0..3).map(|j| inv[i][j] * xty[j]).sum::<f64>()).sum();
                (y[k] - fit).powi(2)
            })
            .sum();
        for i in 0..3 {
            let b: f64 = (0..3).map(|j| inv[i][j] * xty[j]).sum();
            assert!((f.estimates[i] - b).abs() < 1e-8);
            let se = (rss / 7.0 * inv[i][i]).sqrt();
            assert!((f.std_errors[i] - se).abs() < 1e-8);
            assert!((f.t_values[i] - f.estimates[i] / f.std_errors[i]).abs() < 1e-10);
        }
        assert_eq!(f.dof, 7);
    }

    #[test]
    fn rank_deficiency_detected() {
        let x = DMatrix::from_fn(6, 2, |i, _| i as f64);
        let y = DVector::from_fn(6, |i, _| i as f64);
        assert!(matches!(ols_fit(&x, &y, &names(2)), Err(RegressionError::RankDeficient(_))));
    }

    /// `P(T <= x)` for one and two degrees of freedom in closed form.
    fn t_closed(x: f64, dof: u32) -> f64 {
        match dof {
            1 => 0.5 + x.atan() / std::f64::consts::PI,
            2 => 0.5 + x / (2.0 * (2.0 + x * x).sqrt()),
            4 => {
                let s = x / (4.0 + x * x).sqrt();
                0.5 + 0.5 * s * (1.0 + 0.5 * (1.0 - s * s))
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn distribution_functions() {
        for dof in [1.0, 3.0, 17.0, 1e6] {
            assert_eq!(t_cdf(0.0, dof), 0.5);
        }
        assert!((t_cdf(1.0, 1e6) - 0.841344746).abs() < 1e-4);
        for &x in &[-3.0, -0.7, 0.2, 1.5, 6.0] {
            for dof in [1, 2, 4] {
                assert!((t_cdf(x, dof as f64) - t_closed(x, dof)).abs() < 1e-10, "x={x} dof={dof}");
            }
        }
        // F(2, d) has survival function (1 + 2x/d)^(-d/2).
        for &x in &[0.1, 1.0, 3.5, 20.0] {
            for d in [3.0f64, 10.0, 24.0] {
                let sf = (1.0 + 2.0 * x / d).powf(-d / 2.0);
                assert!((f_sf(x, 2.0, d) - sf).abs() < 1e-10);
                assert!((f_cdf(x, 2.0, d) - (1.0 - sf)).abs() < 1e-10);
            }
        }
        for &t in &[0.3, 1.1, 2.7] {
            for d in [5.0, 24.0] {
                assert!((f_cdf(t * t, 1.0, d) - (2.0 * t_cdf(t, d) - 1.0)).abs() < 1e-10);
            }
        }
    }

    fn grid(beta: &[f64], spec: &DesignSpec, noise: f64, r: &mut ChaCha8Rng) -> Vec<TsedRecord> {
        let mut out = Vec::new();
        for i in 0..7 {
            for j in 0..4 {
                let mut rec = TsedRecord {
                    epsilon_m: 0.05 + 0.025 * i as f64,
                    kappa: 10.0 * j as f64,
                    marking: Marking::Independent,
                    w_total: 0.0,
                    w_lamella: None,
                    w_matrix: None,
                };
                let mean: f64 = spec.terms.iter().zip(beta).map(|(t, b)| b * (t.f)(&rec)).sum();
                rec.w_total = mean + noise * r.sample::<f64, _>(StandardNormal);
                out.push(rec);
            }
        }
        out
    }

    #[test]
    fn recovers_reduced_model_coefficients() {
        let beta = [1073.64, -2216.34, -6.58];
        let data = grid(&beta, &DesignSpec::m1p(), 0.0, &mut rng(3));
        let f = DesignSpec::m1p().fit(&data).unwrap();
        for (e, b) in f.estimates.iter().zip(beta) {
            assert!(((e - b) / b).abs() < 1e-6);
        }
        assert!(f.rss < 1e-12);
    }

    #[test]
    fn t_squared_equals_f() {
        let mut r = rng(4);
        let data = grid(&[1082.31, -2270.73, -7.15, 3.63], &DesignSpec::m1(), 2.0, &mut r);
        let full = DesignSpec::m1().fit(&data).unwrap();
        let reduced = DesignSpec::m1p().fit(&data).unwrap();
        let test = f_test_joint(&full, &reduced).unwrap();
        let t = full.t_values[3];
        assert!((test.f - t * t).abs() < 1e-8 * test.f.max(1.0));
        assert!((test.p - full.p_values[3]).abs() < 1e-10);
        // Direct RSS oracle on the same 28 points.
        let f_direct = ((reduced.rss - full.rss) / 1.0) / (full.rss / 24.0);
        assert!((test.f - f_direct).abs() < 1e-8 * f_direct.max(1.0));
        let same = f_test_joint(&full, &full).unwrap();
        assert_eq!((same.f, same.p), (0.0, 1.0));
        assert!(matches!(f_test_joint(&reduced, &full), Err(RegressionError::NotNested)));
    }

    #[test]
    fn missing_large_term_is_decisive() {
        let data = grid(&[1000.0, -2000.0, -50.0, 400.0], &DesignSpec::m1(), 0.0, &mut rng(5));
        let mut noisy = data.clone();
        for (k, r) in noisy.iter_mut().enumerate() {
            r.w_total += if k % 2 == 0 { 1e-9 } else { -1e-9 };
        }
        let full = DesignSpec::m1().fit(&noisy).unwrap();
        let reduced = DesignSpec::m1p().fit(&noisy).unwrap();
        assert!(f_test_joint(&full, &reduced).unwrap().p < 1e-12);
    }

    #[test]
    fn zero_response() {
        let data = grid(&[0.0; 4], &DesignSpec::m1(), 0.0, &mut rng(6));
        let f = DesignSpec::m1().fit(&data).unwrap();
        assert!(f.estimates.iter().all(|&b| b == 0.0));
        assert!(f.p_values.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn scale_equivariance() {
        let mut r = rng(7);
        let data = grid(&[1082.31, -2270.73, -7.15, 3.63], &DesignSpec::m1(), 5.0, &mut r);
        let a = DesignSpec::m1().fit(&data).unwrap();
        let scaled: Vec<TsedRecord> = data.iter().map(|d| TsedRecord { w_total: -3.0 * d.w_total, ..*d }).collect();
        let b = DesignSpec::m1().fit(&scaled).unwrap();
        for i in 0..4 {
            assert!((b.estimates[i] + 3.0 * a.estimates[i]).abs() < 1e-8 * a.estimates[i].abs().max(1.0));
            assert!((b.std_errors[i] - 3.0 * a.std_errors[i]).abs() < 1e-8 * a.std_errors[i]);
            assert!((b.t_values[i] + a.t_values[i]).abs() < 1e-10 * a.t_values[i].abs().max(1.0));
            assert!((b.p_values[i] - a.p_values[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn null_interaction_rarely_significant() {
        // Noise comparable to the residual scale behind the published standard errors.
        let mut r = rng(8);
        let mut accepted = 0;
        for _ in 0..100 {
            let data = grid(&[1082.31, -2270.73, -7.15, 0.0], &DesignSpec::m1(), 3.0, &mut r);
            let f = DesignSpec::m1().fit(&data).unwrap();
            if f.p_values[3] > 0.05 {
                accepted += 1;
            }
        }
        assert!(accepted >= 90, "{accepted}");
    }

    #[test]
    fn diagnostics() {
        let data = grid(&[1.0, 2.0, 3.0], &DesignSpec::m1p(), 0.0, &mut rng(9));
        let f = DesignSpec::m1p().fit(&data).unwrap();
        let d = residual_diagnostics(&f);
        assert_eq!(d.qq.len(), 28);
        assert_eq!(d.residual_vs_fitted.len(), 28);
        let zero = FitResult { residuals: vec![0.0; 28], rss: 0.0, ..f };
        assert!(residual_diagnostics(&zero).qq.iter().all(|&(_, s)| s == 0.0));

        // Empirical distribution of standardised residuals against the normal.
        let mut r = rng(10);
        let n = 10_000;
        let x = DMatrix::from_element(n, 1, 1.0);
        let y = DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal));
        let fit = ols_fit(&x, &y, &names(1)).unwrap();
        let d = residual_diagnostics(&fit);
        let normal = Normal::standard();
        let worst = d
            .qq
            .iter()
            .enumerate()
            .map(|(i, &(_, s))| (normal.cdf(s) - (i as f64 + 0.5) / n as f64).abs())
            .fold(0.0, f64::max);
        assert!(worst < 0.1, "{worst}");
    }

    #[test]
    fn model_suite_and_io() {
        let mut r = rng(11);
        let mut data = grid(&[1073.64, -2216.34, -6.58], &DesignSpec::m1p(), 1.0, &mut r);
        for d in data.iter_mut() {
            d.w_lamella = Some(225.2 - 1590.9 * d.epsilon_m + 6420.8 * d.epsilon_m.powi(2) + 0.5 * r.random::<f64>());
            d.w_matrix = Some(799.7 * d.epsilon_m - 1419.0 * d.epsilon_m.powi(2) + 0.5 * r.random::<f64>());
        }
        for i in 0..7 {
            let e = 0.05 + 0.025 * i as f64;
            data.push(TsedRecord {
                epsilon_m: e,
                kappa: 0.0,
                marking: Marking::MovingAverage,
                w_total: 1223.0 * e - 6370.0 * e * e + 12727.0 * e.powi(3),
                w_lamella: None,
                w_matrix: None,
            });
        }
        let suite = study_model_suite(&data).unwrap();
        assert_eq!(suite.m1.terms.len(), 4);
        assert!(suite.interaction_test.f > 0.0);
        assert!(suite.lamella.as_ref().unwrap().estimate("intercept").is_some());
        assert!(suite.matrix.is_some());
        assert_eq!(suite.cubic_pair.as_ref().unwrap().terms.len(), 5);

        let mut buf = Vec::new();
        write_tsed(&data, &mut buf).unwrap();
        let back = read_tsed(buf.as_slice()).unwrap();
        assert_eq!(back, data);
        let mut again = Vec::new();
        write_tsed(&back, &mut again).unwrap();
        assert_eq!(again, buf);

        let mut table = Vec::new();
        write_coefficients(&DesignSpec::m1p(), &suite.m1p, &mut table).unwrap();
        let text = String::from_utf8(table).unwrap();
        assert!(text.starts_with("coefficient,term,estimate,std_error,t_value,p_value\nbeta1,eps,"));
        assert!(study_model_suite(&data[..4]).is_err());
        assert!(DesignSpec::by_name("nope").is_err());
    }

    #[test]
    fn cubic_pair_recovery() {
        let mut data = Vec::new();
        for i in 0..7 {
            let e = 0.05 + 0.025 * i as f64;
            for (m, b1, b2) in [(Marking::Independent, 1324.0, -5806.0), (Marking::MovingAverage, 1223.0, -6370.0)] {
                data.push(TsedRecord {
                    epsilon_m: e,
                    kappa: 0.0,
                    marking: m,
                    w_total: b1 * e + b2 * e * e + 12727.0 * e.powi(3),
                    w_lamella: None,
                    w_matrix: None,
                });
            }
        }
        let f = DesignSpec::cubic_pair().fit(&data).unwrap();
        for (e, b) in f.estimates.iter().zip([1324.0, -5806.0, 1223.0, -6370.0, 12727.0]) {
            assert!(((e - b) / b).abs() < 1e-6, "{e} vs {b}");
        }
    }
}
