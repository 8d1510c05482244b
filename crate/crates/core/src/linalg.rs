//! Dense least squares through Householder QR.
//!
//! Columns are scaled to unit norm before factoring, so `|R_jj|` is the
//! sine of the angle between column `j` and the span of the columns before
//! it. A column whose sine falls under [`RANK_TOL`] is reported as
//! dependent.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const RANK_TOL: f64 = 1e-10;

/// Builds an `n x p` matrix from row slices.
pub fn design_from_rows<R: AsRef<[f64]>>(rows: &[R], p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), p, |i, j| rows[i].as_ref()[j])
}

/// Minimizes `||design * theta - target||^2`.
pub fn least_squares(design: &DMatrix<f64>, target: &DVector<f64>) -> Result<DVector<f64>> {
    let (n, p) = design.shape();
    if target.len() != n {
        return Err(Error::InvalidInput(format!(
            "design has {n} rows but target has {} entries",
            target.len()
        )));
    }
    if p == 0 {
        return Err(Error::InvalidInput("design has no columns".into()));
    }
    if n < p {
        return Err(Error::InvalidInput(format!(
            "need at least as many rows as columns ({n} < {p})"
        )));
    }
    if let Some(bad) = design.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "design column {} contains a non-finite value",
            bad / n
        )));
    }
    if target.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(
            "target contains a non-finite value".into(),
        ));
    }

    let scales: Vec<f64> = design.column_iter().map(|c| c.norm()).collect();
    if let Some(zero) = scales.iter().position(|&s| s == 0.0) {
        return Err(Error::RankDeficient { column: zero });
    }
    let mut scaled = design.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col /= scales[j];
    }

    let qr = scaled.qr();
    let r = qr.r();
    if let Some(j) = (0..p).find(|&j| r[(j, j)].abs() < RANK_TOL) {
        return Err(Error::RankDeficient { column: j });
    }
    let mut qtb = target.clone();
    qr.q_tr_mul(&mut qtb);
    let rhs = qtb.rows(0, p).into_owned();
    let mut theta = r
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| Error::Solver("triangular solve failed".into()))?;
    for (j, x) in theta.iter_mut().enumerate() {
        *x /= scales[j];
    }
    Ok(theta)
}
