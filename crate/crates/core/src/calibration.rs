//! Train/test splitting, least-squares fitting and adjusted R².
//!
//! VT-Micro is fitted as a linear regression of `ln(total_j)` on its 16
//! monomials, using only samples with positive energy. ARRB is a plain
//! linear regression on its six terms. AA-Micro has an exponential part and
//! needs an iterative solver:
//!
//! 1. Fit the linear half by ordinary least squares and start the exponent
//!    half at a constant, `ln(max(1, mean positive leftover))`, where the
//!    leftover is `observed - linear prediction`.
//! 2. Refine all 30 coefficients jointly with damped Gauss-Newton
//!    (Levenberg-Marquardt with Marquardt column scaling). Each step solves
//!    the augmented system `[J; sqrt(lambda) D] delta = [-r; 0]` by QR
//!    instead of forming normal equations. `lambda` shrinks tenfold after an
//!    accepted step and grows tenfold after a rejected one.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consumption_models::{
    aamicro_features, aamicro_slot, ModelCoefficients, ModelKind, AAMICRO_BASIS, AAMICRO_TERMS,
};
use crate::energy_pipeline::EnergySample;
use crate::error::{Error, Result};
use crate::linalg::least_squares;

pub const DEFAULT_SPLIT_SEED: u64 = 2024;

/// Tolerance added before flooring `ratio * n`, so ratios like 0.8 that are
/// not exact in binary still give `floor(0.8 * 10) = 8`.
const FLOOR_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    SeededShuffle,
    SequentialPrefix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_ratio: f64,
    pub seed: u64,
    pub strategy: SplitStrategy,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_ratio: 0.8,
            seed: DEFAULT_SPLIT_SEED,
            strategy: SplitStrategy::SeededShuffle,
        }
    }
}

pub fn train_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64) + FLOOR_EPS).floor() as usize
}

/// Partitions samples into `(train, test)`, both returned in
/// `(mode, run_id, t)` order.
pub fn split(
    samples: &[EnergySample],
    spec: &SplitSpec,
) -> Result<(Vec<EnergySample>, Vec<EnergySample>)> {
    if !(spec.train_ratio > 0.0 && spec.train_ratio < 1.0) {
        return Err(Error::InvalidInput(format!(
            "train_ratio must lie in (0, 1), got {}",
            spec.train_ratio
        )));
    }
    let n = samples.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 samples to split, got {n}"
        )));
    }
    let mut ordered = samples.to_vec();
    ordered.sort_by_key(|s| s.key());
    let k = train_count(n, spec.train_ratio);

    let mut idx: Vec<usize> = (0..n).collect();
    if spec.strategy == SplitStrategy::SeededShuffle {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    }
    let mut train_idx = idx[..k].to_vec();
    let mut test_idx = idx[k..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((
        train_idx.into_iter().map(|i| ordered[i]).collect(),
        test_idx.into_iter().map(|i| ordered[i]).collect(),
    ))
}

/// Solves `min ||design * theta - target||^2`.
pub fn fit_linear_least_squares(
    design: &DMatrix<f64>,
    target: &DVector<f64>,
) -> Result<DVector<f64>> {
    least_squares(design, target)
}

/// Hex SHA-256 over the training samples' fields.
pub fn training_hash(samples: &[EnergySample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.run_id.to_le_bytes());
        h.update(s.mode.as_str().as_bytes());
        h.update((s.t as u64).to_le_bytes());
        for x in [s.speed, s.accel, s.engine_j, s.battery_j, s.total_j] {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussNewtonConfig {
    pub max_iters: usize,
    /// Stop once an accepted step improves SSE by less than this fraction.
    pub rel_tol: f64,
    pub damping_init: f64,
    /// Giving up threshold for rejected steps: once damping exceeds this no
    /// descent direction is left and the current point is returned.
    pub damping_max: f64,
    /// Retries with increased damping when the augmented system is still
    /// numerically singular.
    pub max_singular_retries: usize,
}

impl Default for GaussNewtonConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            rel_tol: 1e-10,
            damping_init: 1e-3,
            damping_max: 1e16,
            max_singular_retries: 12,
        }
    }
}

impl GaussNewtonConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol.is_finite() && self.rel_tol >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "rel_tol must be >= 0, got {}",
                self.rel_tol
            )));
        }
        if !(self.damping_init.is_finite() && self.damping_init > 0.0) {
            return Err(Error::InvalidInput(format!(
                "damping_init must be > 0, got {}",
                self.damping_init
            )));
        }
        if self.damping_max.partial_cmp(&self.damping_init) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::InvalidInput(
                "damping_max must exceed damping_init".into(),
            ));
        }
        Ok(())
    }
}

/// A fitted model before scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub coeffs: ModelCoefficients,
    /// VT-Micro only: samples with `total_j <= 0` left out of the log fit.
    pub excluded_nonpositive: usize,
    pub solver_iterations: usize,
    pub converged: bool,
    /// SSE at the start and after every accepted step (AA-Micro only).
    pub sse_history: Vec<f64>,
}

impl Fit {
    fn closed_form(coeffs: ModelCoefficients, excluded_nonpositive: usize) -> Self {
        Self {
            coeffs,
            excluded_nonpositive,
            solver_iterations: 0,
            converged: true,
            sse_history: Vec::new(),
        }
    }
}

fn design_for(kind: ModelKind, samples: &[&EnergySample]) -> DMatrix<f64> {
    let layout = kind.layout();
    DMatrix::from_fn(samples.len(), layout.len(), |i, j| {
        layout[j].eval(samples[i].speed, samples[i].accel)
    })
}

pub fn fit_vtmicro(train: &[EnergySample]) -> Result<Fit> {
    let positive: Vec<&EnergySample> = train.iter().filter(|s| s.total_j > 0.0).collect();
    if positive.is_empty() {
        return Err(Error::InvalidInput(
            "VT-Micro needs at least one sample with positive energy".into(),
        ));
    }
    let x = design_for(ModelKind::VtMicro, &positive);
    let y = DVector::from_iterator(positive.len(), positive.iter().map(|s| s.total_j.ln()));
    let theta = least_squares(&x, &y)?;
    let coeffs = ModelCoefficients::new(ModelKind::VtMicro, theta.iter().copied().collect())?;
    Ok(Fit::closed_form(coeffs, train.len() - positive.len()))
}

pub fn fit_arrb(train: &[EnergySample]) -> Result<Fit> {
    if train.len() < 6 {
        return Err(Error::InvalidInput(format!(
            "ARRB needs at least 6 samples, got {}",
            train.len()
        )));
    }
    let refs: Vec<&EnergySample> = train.iter().collect();
    let x = design_for(ModelKind::Arrb, &refs);
    let y = DVector::from_iterator(train.len(), train.iter().map(|s| s.total_j));
    let theta = least_squares(&x, &y)?;
    Ok(Fit::closed_form(
        ModelCoefficients::new(ModelKind::Arrb, theta.iter().copied().collect())?,
        0,
    ))
}

/// Precomputed basis and targets for one AA-Micro problem.
struct AaProblem {
    basis: DMatrix<f64>,
    target: DVector<f64>,
    clamp: f64,
}

impl AaProblem {
    fn new(train: &[EnergySample], clamp: f64) -> Self {
        let n = train.len();
        let mut basis = DMatrix::zeros(n, AAMICRO_BASIS);
        for (i, s) in train.iter().enumerate() {
            let (l, _) = aamicro_features(s.speed, s.accel);
            for (j, x) in l.into_iter().enumerate() {
                basis[(i, j)] = x;
            }
        }
        Self {
            basis,
            target: DVector::from_iterator(n, train.iter().map(|s| s.total_j)),
            clamp,
        }
    }

    /// Predictions and `d exp(G) / d G` (zero where the exponent is clamped).
    fn evaluate(&self, theta: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let lin = &self.basis * theta.rows(0, AAMICRO_BASIS);
        let arg = &self.basis * theta.rows(AAMICRO_BASIS, AAMICRO_BASIS);
        let n = self.target.len();
        let mut pred = DVector::zeros(n);
        let mut slope = DVector::zeros(n);
        for i in 0..n {
            let g = arg[i];
            let e = g.clamp(-self.clamp, self.clamp).exp();
            pred[i] = lin[i] + e;
            slope[i] = if g.abs() < self.clamp { e } else { 0.0 };
        }
        (pred, slope)
    }

    fn sse(&self, theta: &DVector<f64>) -> f64 {
        let (pred, _) = self.evaluate(theta);
        (pred - &self.target).norm_squared()
    }

    /// Second derivative of the predictions along `direction`; only the
    /// exponential half is curved.
    fn second_directional(&self, slope: &DVector<f64>, direction: &DVector<f64>) -> DVector<f64> {
        let dg = &self.basis * direction.rows(AAMICRO_BASIS, AAMICRO_BASIS);
        slope.component_mul(&dg.component_mul(&dg))
    }

    fn jacobian(&self, slope: &DVector<f64>) -> DMatrix<f64> {
        let n = self.target.len();
        let mut j = DMatrix::zeros(n, AAMICRO_TERMS);
        j.columns_mut(0, AAMICRO_BASIS).copy_from(&self.basis);
        for c in 0..AAMICRO_BASIS {
            for i in 0..n {
                j[(i, AAMICRO_BASIS + c)] = slope[i] * self.basis[(i, c)];
            }
        }
        j
    }
}

/// Stage 1: linear half by least squares, exponent half at a constant.
fn aamicro_initial(problem: &AaProblem) -> Result<DVector<f64>> {
    let linear = least_squares(&problem.basis, &problem.target)?;
    let leftover = &problem.target - &problem.basis * &linear;
    let positive: Vec<f64> = leftover.iter().copied().filter(|&x| x > 0.0).collect();
    let constant = if positive.is_empty() {
        -problem.clamp
    } else {
        let mean = positive.iter().sum::<f64>() / positive.len() as f64;
        mean.max(1.0).ln()
    };
    let mut theta = DVector::zeros(AAMICRO_TERMS);
    theta.rows_mut(0, AAMICRO_BASIS).copy_from(&linear);
    theta[AAMICRO_BASIS + aamicro_slot(0, 0)] = constant;
    Ok(theta)
}

/// Largest accepted ratio of the geodesic correction to the step itself,
/// both in damping-scaled norm.
const GEODESIC_RATIO: f64 = 0.75;

pub fn fit_aamicro(train: &[EnergySample], solver: &GaussNewtonConfig) -> Result<Fit> {
    fit_aamicro_with_clamp(
        train,
        solver,
        crate::consumption_models::DEFAULT_EXPONENT_CLAMP,
    )
}

pub fn fit_aamicro_with_clamp(
    train: &[EnergySample],
    solver: &GaussNewtonConfig,
    clamp: f64,
) -> Result<Fit> {
    solver.validate()?;
    if train.len() < AAMICRO_TERMS {
        return Err(Error::InvalidInput(format!(
            "AA-Micro needs at least {AAMICRO_TERMS} samples, got {}",
            train.len()
        )));
    }
    let problem = AaProblem::new(train, clamp);
    let mut theta = aamicro_initial(&problem)?;
    let mut sse = problem.sse(&theta);
    if !sse.is_finite() {
        return Err(Error::Solver("initial objective is not finite".into()));
    }
    let mut history = vec![sse];
    let mut damping = solver.damping_init;
    let mut iterations = 0;
    let mut converged = false;
    let n = train.len();
    // Damping scale per parameter: running maximum of the Jacobian column
    // norms, so a direction that fades out (an exponent term pushed deep
    // into the negative) stays as stiff as it was when it mattered.
    let mut scale = vec![0.0f64; AAMICRO_TERMS];

    while iterations < solver.max_iters {
        if sse == 0.0 {
            converged = true;
            break;
        }
        iterations += 1;
        let (pred, slope) = problem.evaluate(&theta);
        let residual = pred - &problem.target;
        let jac = problem.jacobian(&slope);
        for (d, c) in scale.iter_mut().zip(jac.column_iter()) {
            *d = d.max(c.norm());
        }
        let floor = scale.iter().copied().fold(0.0, f64::max).max(1.0) * 1e-12;

        let mut retries = 0;
        let (velocity, accel, aug_diag) = loop {
            let root = damping.sqrt();
            let diag: Vec<f64> = scale.iter().map(|&c| root * c.max(floor)).collect();
            let mut aug = DMatrix::zeros(n + AAMICRO_TERMS, AAMICRO_TERMS);
            aug.rows_mut(0, n).copy_from(&jac);
            for (j, &d) in diag.iter().enumerate() {
                aug[(n + j, j)] = d;
            }
            let mut rhs = DVector::zeros(n + AAMICRO_TERMS);
            rhs.rows_mut(0, n).copy_from(&(-&residual));
            match least_squares(&aug, &rhs) {
                Ok(velocity) => {
                    let curvature = problem.second_directional(&slope, &velocity);
                    rhs.rows_mut(0, n).copy_from(&(-curvature));
                    let accel = least_squares(&aug, &rhs)?;
                    break (velocity, accel, diag);
                }
                Err(Error::RankDeficient { column }) => {
                    retries += 1;
                    if retries > solver.max_singular_retries {
                        return Err(Error::Solver(format!(
                            "damped system stays singular at column {column} after {retries} retries"
                        )));
                    }
                    damping *= 10.0;
                }
                Err(e) => return Err(e),
            }
        };
        let scaled_norm = |x: &DVector<f64>| {
            x.iter()
                .zip(&aug_diag)
                .map(|(v, d)| (v * d).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let bounded = 2.0 * scaled_norm(&accel) <= GEODESIC_RATIO * scaled_norm(&velocity);
        let step = velocity + 0.5 * accel;

        let candidate = &theta + step;
        let candidate_sse = problem.sse(&candidate);
        if bounded && candidate_sse.is_finite() && candidate_sse < sse {
            let improvement = (sse - candidate_sse) / sse;
            theta = candidate;
            sse = candidate_sse;
            history.push(sse);
            damping = (damping / 10.0).max(1e-15);
            if improvement < solver.rel_tol {
                converged = true;
                break;
            }
        } else {
            damping *= 10.0;
            if damping > solver.damping_max {
                // No damping level yields descent: a stationary point.
                converged = true;
                break;
            }
        }
    }

    let mut coeffs = ModelCoefficients::new(ModelKind::AaMicro, theta.iter().copied().collect())?;
    coeffs.exponent_clamp = clamp;
    Ok(Fit {
        coeffs,
        excluded_nonpositive: 0,
        solver_iterations: iterations,
        converged,
        sse_history: history,
    })
}

pub fn fit_model(
    kind: ModelKind,
    train: &[EnergySample],
    solver: &GaussNewtonConfig,
) -> Result<Fit> {
    match kind {
        ModelKind::VtMicro => fit_vtmicro(train),
        ModelKind::Arrb => fit_arrb(train),
        ModelKind::AaMicro => fit_aamicro(train, solver),
    }
}

/// `1 - (1 - R²)(n - 1)/(n - p - 1)` with `R² = 1 - SSE/SST`.
pub fn adjusted_r2(target: &[f64], predicted: &[f64], p: usize) -> Result<f64> {
    let n = target.len();
    if predicted.len() != n {
        return Err(Error::InvalidInput(format!(
            "target has {n} entries, predictions {}",
            predicted.len()
        )));
    }
    if n <= p + 1 {
        return Err(Error::InvalidInput(format!(
            "adjusted R² needs n > p + 1 (n = {n}, p = {p})"
        )));
    }
    let mean = target.iter().sum::<f64>() / n as f64;
    let sst: f64 = target.iter().map(|y| (y - mean).powi(2)).sum();
    if sst == 0.0 {
        return Err(Error::DegenerateTarget("target has zero variance".into()));
    }
    let sse: f64 = target
        .iter()
        .zip(predicted)
        .map(|(y, f)| (y - f).powi(2))
        .sum();
    let r2 = 1.0 - sse / sst;
    Ok(1.0 - (1.0 - r2) * (n - 1) as f64 / (n - p - 1) as f64)
}

/// Parameters counted by adjusted R²: every coefficient but the constant.
pub fn adjusted_r2_params(kind: ModelKind) -> usize {
    kind.layout().len() - 1
}

pub fn score(coeffs: &ModelCoefficients, samples: &[EnergySample]) -> Result<f64> {
    let target: Vec<f64> = samples.iter().map(|s| s.total_j).collect();
    let pred: Vec<f64> = samples
        .iter()
        .map(|s| coeffs.predict(s.speed, s.accel))
        .collect();
    adjusted_r2(&target, &pred, adjusted_r2_params(coeffs.kind))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub kind: ModelKind,
    pub theta: ModelCoefficients,
    pub r2_adj_train: f64,
    pub r2_adj_test: f64,
    pub r2_adj_all: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_params: usize,
    pub excluded_nonpositive: usize,
    pub solver_iterations: usize,
    pub converged: bool,
    pub sse_history: Vec<f64>,
    pub split: SplitSpec,
}

/// Split, fit on the training part, and score train, test and the union.
pub fn calibrate(
    kind: ModelKind,
    samples: &[EnergySample],
    spec: &SplitSpec,
    solver: &GaussNewtonConfig,
) -> Result<FitReport> {
    let (train, test) = split(samples, spec)?;
    let mut fit = fit_model(kind, &train, solver)?;
    fit.coeffs.fit_meta.training_hash = Some(training_hash(&train));
    fit.coeffs.fit_meta.n_train = Some(train.len());
    fit.coeffs.fit_meta.seed = Some(spec.seed);
    fit.coeffs.fit_meta.tool_version = Some(crate::TOOL_VERSION.to_string());
    if let (Some(first), Some(last)) = (train.first(), train.last()) {
        let fmt = |s: &EnergySample| format!("{}/{}/{}", s.mode, s.run_id, s.t);
        fit.coeffs.fit_meta.training_span = Some((fmt(first), fmt(last)));
    }

    let mut all = train.clone();
    all.extend_from_slice(&test);
    Ok(FitReport {
        kind,
        r2_adj_train: score(&fit.coeffs, &train)?,
        r2_adj_test: score(&fit.coeffs, &test)?,
        r2_adj_all: score(&fit.coeffs, &all)?,
        n_train: train.len(),
        n_test: test.len(),
        n_params: fit.coeffs.theta.len(),
        excluded_nonpositive: fit.excluded_nonpositive,
        solver_iterations: fit.solver_iterations,
        converged: fit.converged,
        sse_history: fit.sse_history,
        theta: fit.coeffs,
        split: *spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consumption_models::aamicro_pos_slot;
    use crate::trajectory_store::VehicleMode;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn samples_from(
        points: &[(f64, f64)],
        mut f: impl FnMut(f64, f64) -> f64,
    ) -> Vec<EnergySample> {
        points
            .iter()
            .enumerate()
            .map(|(i, &(v, a))| {
                let j = f(v, a);
                EnergySample {
                    run_id: 1,
                    mode: VehicleMode::Acc,
                    t: i + 1,
                    speed: v,
                    accel: a,
                    engine_j: j,
                    battery_j: 0.0,
                    total_j: j,
                }
            })
            .collect()
    }

    fn grid(n: usize, seed: u64) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (rng.random_range(8.941..17.778), rng.random_range(-4.0..3.0)))
            .collect()
    }

    #[test]
    fn split_sizes() {
        let s = samples_from(&grid(10, 1), |_, _| 1.0);
        let (train, test) = split(&s, &SplitSpec::default()).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        assert_eq!(train_count(2402, 0.8), 1921);
        assert_eq!(train_count(2021, 0.8), 1616);
        assert!(split(&s[..1], &SplitSpec::default()).is_err());
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let s = samples_from(&grid(57, 2), |v, _| v);
        let spec = SplitSpec {
            seed: 99,
            ..Default::default()
        };
        let a = split(&s, &spec).unwrap();
        let b = split(&s, &spec).unwrap();
        assert_eq!(a, b);
        let mut keys: Vec<_> = a.0.iter().chain(&a.1).map(|x| x.key()).collect();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), s.len());

        let seq = split(
            &s,
            &SplitSpec {
                strategy: SplitStrategy::SequentialPrefix,
                ..spec
            },
        )
        .unwrap();
        assert_eq!(seq.0, s[..45].to_vec());
    }

    #[test]
    fn vtmicro_log_linear_recovery() {
        let s = samples_from(&grid(400, 3), |v, _| (2.0 + 0.1 * v).exp());
        let fit = fit_vtmicro(&s).unwrap();
        for (i, &c) in fit.coeffs.theta.iter().enumerate() {
            let want = match i {
                0 => 2.0,
                4 => 0.1,
                _ => 0.0,
            };
            assert!((c - want).abs() < 1e-8, "coef {i}: {c}");
        }
    }

    #[test]
    fn vtmicro_constant_and_exclusion() {
        let mut s = samples_from(&grid(100, 4), |_, _| 321.0);
        let fit = fit_vtmicro(&s).unwrap();
        assert!((fit.coeffs.theta[0] - 321f64.ln()).abs() < 1e-9);
        assert!(fit.coeffs.theta[1..].iter().all(|c| c.abs() < 1e-9));

        s[3].total_j = -50.0;
        s[7].total_j = 0.0;
        let fit = fit_vtmicro(&s).unwrap();
        assert_eq!(fit.excluded_nonpositive, 2);
        // Still scored on all samples, including the negative ones.
        assert!(score(&fit.coeffs, &s).unwrap() < 1.0);

        let none = samples_from(&grid(20, 5), |_, _| -1.0);
        assert!(fit_vtmicro(&none).is_err());
    }

    #[test]
    fn arrb_recovery_zero_and_degenerate() {
        let truth = [900.0, 150.0, -3.0, 0.4, 60.0, 25.0];
        let f = |v: f64, a: f64| {
            truth[0]
                + truth[1] * v
                + truth[2] * v * v
                + truth[3] * v.powi(3)
                + truth[4] * v * a
                + truth[5] * v * a.max(0.0).powi(2)
        };
        let s = samples_from(&grid(500, 6), f);
        let fit = fit_arrb(&s).unwrap();
        for (c, t) in fit.coeffs.theta.iter().zip(truth) {
            assert!(((c - t) / t).abs() < 1e-8, "{c} vs {t}");
        }

        let zero = samples_from(&grid(50, 7), |_, _| 0.0);
        assert!(fit_arrb(&zero)
            .unwrap()
            .coeffs
            .theta
            .iter()
            .all(|c| c.abs() < 1e-12));

        let flat: Vec<(f64, f64)> = grid(50, 8).into_iter().map(|(_, a)| (12.0, a)).collect();
        let s = samples_from(&flat, |_, a| 100.0 + a);
        assert!(matches!(fit_arrb(&s), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn arrb_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = Normal::new(0.0, 500.0).unwrap();
        let s = samples_from(&grid(300, 9), |v, a| {
            5000.0 + 800.0 * v + 300.0 * v * a + noise.sample(&mut rng)
        });
        let first = fit_arrb(&s).unwrap().coeffs;
        let again: Vec<EnergySample> = s
            .iter()
            .map(|x| EnergySample {
                total_j: first.predict(x.speed, x.accel),
                ..*x
            })
            .collect();
        let second = fit_arrb(&again).unwrap().coeffs;
        for (a, b) in first.theta.iter().zip(&second.theta) {
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    fn aa_truth() -> ModelCoefficients {
        let mut lin = [0.0; AAMICRO_BASIS];
        lin[aamicro_slot(0, 0)] = 12_000.0;
        lin[aamicro_slot(1, 0)] = 400.0;
        lin[aamicro_slot(0, 1)] = 3_000.0;
        lin[aamicro_slot(1, 1)] = 150.0;
        lin[aamicro_pos_slot(0, 2)] = 900.0;
        let mut exp = [0.0; AAMICRO_BASIS];
        exp[aamicro_slot(0, 0)] = 7.5;
        exp[aamicro_slot(1, 0)] = 0.08;
        exp[aamicro_pos_slot(0, 1)] = 0.35;
        ModelCoefficients::aamicro(lin, exp)
    }

    #[test]
    fn aamicro_self_recovery() {
        let truth = aa_truth();
        let train = samples_from(&grid(600, 10), |v, a| truth.predict(v, a));
        let held = samples_from(&grid(200, 11), |v, a| truth.predict(v, a));
        let fit = fit_aamicro(&train, &GaussNewtonConfig::default()).unwrap();
        assert!(fit.solver_iterations <= 200);
        assert!(fit.sse_history.windows(2).all(|w| w[1] <= w[0]));
        let mse: f64 = held
            .iter()
            .map(|s| (fit.coeffs.predict(s.speed, s.accel) - s.total_j).powi(2))
            .sum::<f64>()
            / held.len() as f64;
        let mean_abs = held.iter().map(|s| s.total_j.abs()).sum::<f64>() / held.len() as f64;
        assert!(
            mse.sqrt() < 1e-4 * mean_abs,
            "rmse {} vs {}",
            mse.sqrt(),
            mean_abs
        );
    }

    #[test]
    fn aamicro_linear_only_truth() {
        let mut lin = [0.0; AAMICRO_BASIS];
        lin[aamicro_slot(0, 0)] = 20_000.0;
        lin[aamicro_slot(1, 1)] = 300.0;
        lin[aamicro_pos_slot(1, 2)] = 40.0;
        let mut exp = [0.0; AAMICRO_BASIS];
        exp[aamicro_slot(0, 0)] = -30.0;
        let truth = ModelCoefficients::aamicro(lin, exp);
        let s = samples_from(&grid(300, 12), |v, a| truth.predict(v, a));
        let stage1 = fit_aamicro(
            &s,
            &GaussNewtonConfig {
                max_iters: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!stage1.converged);
        assert_eq!(stage1.solver_iterations, 0);
        let problem = AaProblem::new(&s, 30.0);
        let linear = least_squares(&problem.basis, &problem.target).unwrap();
        let linear_sse = (&problem.basis * linear - &problem.target).norm_squared();
        let full = fit_aamicro(&s, &GaussNewtonConfig::default()).unwrap();
        let final_sse = *full.sse_history.last().unwrap();
        let scale = problem.target.norm_squared();
        assert!(
            (linear_sse - final_sse).abs() <= 1e-6 * scale,
            "{linear_sse} vs {final_sse}"
        );
    }

    #[test]
    fn aamicro_pure_noise_has_no_skill() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let noise = Normal::new(0.0, 1000.0).unwrap();
        let all = samples_from(&grid(1500, 14), |_, _| noise.sample(&mut rng));
        let report = calibrate(
            ModelKind::AaMicro,
            &all,
            &SplitSpec::default(),
            &GaussNewtonConfig::default(),
        )
        .unwrap();
        assert!(report.r2_adj_test <= 0.05, "{}", report.r2_adj_test);
        assert!(report.sse_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn adjusted_r2_examples() {
        let y: Vec<f64> = (0..20).map(|i| i as f64).collect();
        assert_eq!(adjusted_r2(&y, &y, 3).unwrap(), 1.0);

        let y: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        let mean = y.iter().sum::<f64>() / 100.0;
        let got = adjusted_r2(&y, &vec![mean; 100], 1).unwrap();
        assert!((got - (1.0 - 99.0 / 98.0)).abs() < 1e-12);
        assert!((got + 0.0102).abs() < 1e-4);

        // Construct R² = 0.9 exactly: SST = 10, SSE = 1.
        let y = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let f: Vec<f64> = y.iter().map(|v| v * (1.0 - 0.1f64.sqrt())).collect();
        let got = adjusted_r2(&y, &f, 2).unwrap();
        assert!((got - (1.0 - 0.1 * 9.0 / 7.0)).abs() < 1e-12);
        assert!((got - 0.8714).abs() < 1e-4);

        assert!(adjusted_r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 2).is_err());
        assert!(matches!(
            adjusted_r2(&[2.0; 5], &[2.0; 5], 1),
            Err(Error::DegenerateTarget(_))
        ));
    }

    #[test]
    fn plain_r2_nonnegative_for_fits_with_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let noise = Normal::new(0.0, 2000.0).unwrap();
        let truth = aa_truth();
        let s = samples_from(&grid(800, 16), |v, a| {
            truth.predict(v, a) + noise.sample(&mut rng)
        });
        for kind in ModelKind::ALL {
            let fit = fit_model(kind, &s, &GaussNewtonConfig::default()).unwrap();
            let y: Vec<f64> = s.iter().map(|x| x.total_j).collect();
            let f: Vec<f64> = s
                .iter()
                .map(|x| fit.coeffs.predict(x.speed, x.accel))
                .collect();
            assert!(adjusted_r2(&y, &f, 0).unwrap() >= 0.0, "{kind}");
        }
    }
}
