//! Residual metrics, run groups and the group cross-application matrices.
//!
//! The RSS and RMSE metrics come in two flavours. `Conventional` is the
//! textbook pair (`sum r^2`, `sqrt(mean r^2)`). `PaperLiteral` follows the
//! formulas exactly as they are usually printed for this protocol, which
//! reduce to the plain residual sum and the mean absolute residual.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::{fit_aamicro, GaussNewtonConfig};
use crate::consumption_models::ModelCoefficients;
use crate::energy_pipeline::EnergySample;
use crate::error::{Error, Result};
use crate::trajectory_store::VehicleMode;

pub const DEFAULT_BINS: usize = 50;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricMode {
    /// RSS = sum of r, RMSE = mean of |r|.
    PaperLiteral,
    /// RSS = sum of r², RMSE = sqrt(mean of r²).
    #[default]
    Conventional,
}

impl MetricMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricMode::PaperLiteral => "paper-literal",
            MetricMode::Conventional => "conventional",
        }
    }
}

impl fmt::Display for MetricMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "paper-literal" | "literal" => Ok(MetricMode::PaperLiteral),
            "conventional" => Ok(MetricMode::Conventional),
            other => Err(Error::InvalidInput(format!(
                "unknown metric mode '{other}'"
            ))),
        }
    }
}

/// `predicted - observed`, in the order of `samples`.
pub fn residuals(coeffs: &ModelCoefficients, samples: &[EnergySample]) -> Vec<f64> {
    samples
        .iter()
        .map(|s| coeffs.predict(s.speed, s.accel) - s.total_j)
        .collect()
}

pub fn metric_rss(r: &[f64], mode: MetricMode) -> f64 {
    match mode {
        MetricMode::PaperLiteral => r.iter().sum(),
        MetricMode::Conventional => r.iter().map(|x| x * x).sum(),
    }
}

pub fn metric_rmse(r: &[f64], mode: MetricMode) -> f64 {
    if r.is_empty() {
        return f64::NAN;
    }
    let n = r.len() as f64;
    match mode {
        MetricMode::PaperLiteral => r.iter().map(|x| x.abs()).sum::<f64>() / n,
        MetricMode::Conventional => (r.iter().map(|x| x * x).sum::<f64>() / n).sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub group_id: u8,
    pub run_ids: Vec<u32>,
}

/// Runs 1..9 dealt round-robin into three groups.
pub fn default_groups() -> [GroupSpec; 3] {
    [1u8, 2, 3].map(|g| GroupSpec {
        group_id: g,
        run_ids: (0..3).map(|k| u32::from(g) + 3 * k).collect(),
    })
}

pub fn validate_groups(groups: &[GroupSpec; 3]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for g in groups {
        if g.run_ids.is_empty() {
            return Err(Error::InvalidInput(format!(
                "group {} lists no runs",
                g.group_id
            )));
        }
        for &r in &g.run_ids {
            if !seen.insert(r) {
                return Err(Error::InvalidInput(format!(
                    "run {r} appears in more than one group"
                )));
            }
        }
    }
    Ok(())
}

/// Parses `"1,4,7;2,5,8;3,6,9"`.
pub fn parse_groups(text: &str) -> Result<[GroupSpec; 3]> {
    let parts: Vec<&str> = text.split(';').collect();
    if parts.len() != 3 {
        return Err(Error::InvalidInput(format!(
            "expected three ';'-separated groups, got {}",
            parts.len()
        )));
    }
    let mut out = default_groups();
    for (i, part) in parts.iter().enumerate() {
        out[i].run_ids = part
            .split(',')
            .map(|x| {
                x.trim()
                    .parse::<u32>()
                    .map_err(|_| Error::InvalidInput(format!("bad run id '{x}' in group list")))
            })
            .collect::<Result<_>>()?;
    }
    validate_groups(&out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    /// Normalized so that `sum(density * width) = 1`.
    pub density: Vec<f64>,
}

impl Histogram {
    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["bin_center", "density"])?;
        for (c, d) in self.centers().iter().zip(&self.density) {
            w.write_record([c.to_string(), d.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub histogram: Histogram,
}

fn histogram_range(r: &[f64]) -> (f64, f64) {
    let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo < hi {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Equal-width histogram over `[lo, hi]` plus mean and std.
pub fn residual_density_in(r: &[f64], bins: usize, lo: f64, hi: f64) -> Result<ResidualSummary> {
    if r.is_empty() {
        return Err(Error::InvalidInput("no residuals to summarize".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidInput(
            "histogram needs at least one bin".into(),
        ));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::InvalidInput(format!(
            "bad histogram range [{lo}, {hi}]"
        )));
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in r {
        let k = (((x - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let std = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(ResidualSummary {
        n: r.len(),
        mean,
        std,
        histogram: Histogram {
            edges: (0..=bins).map(|k| lo + k as f64 * width).collect(),
            density: counts.iter().map(|&c| c as f64 / (n * width)).collect(),
        },
    })
}

/// Histogram over `[min(r), max(r)]`. A constant vector gets a unit-wide
/// range centred on its value.
pub fn residual_density(r: &[f64], bins: usize) -> Result<ResidualSummary> {
    if r.is_empty() {
        return Err(Error::InvalidInput("no residuals to summarize".into()));
    }
    let (lo, hi) = histogram_range(r);
    residual_density_in(r, bins, lo, hi)
}

/// Result of applying each group's model to each group's data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    pub metric_name: String,
    pub mode: MetricMode,
    pub fit_on: VehicleMode,
    pub eval_on: VehicleMode,
    pub groups: [GroupSpec; 3],
    /// `values[model_group][data_group]`, RMSE under `mode`.
    pub values: [[f64; 3]; 3],
    /// RSS under `mode`, same indexing.
    pub rss: [[f64; 3]; 3],
    pub residual_summaries: [[ResidualSummary; 3]; 3],
    pub models: Vec<ModelCoefficients>,
    pub solver_iterations: [usize; 3],
    pub converged: [bool; 3],
    /// Raw residuals per cell, kept in memory for recomputation checks.
    #[serde(skip)]
    pub residuals: Vec<Vec<Vec<f64>>>,
}

impl EvalMatrix {
    pub fn mean_value(&self) -> f64 {
        self.values.iter().flatten().sum::<f64>() / 9.0
    }

    pub fn max_min_ratio(&self) -> f64 {
        let cells = self.values.iter().flatten();
        let max = cells.clone().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = cells.copied().fold(f64::INFINITY, f64::min);
        max / min
    }

    pub fn write_values_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "model_group",
            "data_group",
            "metric",
            "mode",
            "value",
            "rss",
        ])?;
        for (i, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                w.write_record([
                    self.groups[i].group_id.to_string(),
                    self.groups[j].group_id.to_string(),
                    self.metric_name.clone(),
                    self.mode.to_string(),
                    v.to_string(),
                    self.rss[i][j].to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

pub fn group_samples(
    samples: &[EnergySample],
    mode: VehicleMode,
    group: &GroupSpec,
) -> Vec<EnergySample> {
    let mut out: Vec<EnergySample> = samples
        .iter()
        .filter(|s| s.mode == mode && group.run_ids.contains(&s.run_id))
        .copied()
        .collect();
    out.sort_by_key(|s| s.key());
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossConfig {
    pub solver: GaussNewtonConfig,
    pub mode: MetricMode,
    pub bins: usize,
}

impl Default for CrossConfig {
    fn default() -> Self {
        Self {
            solver: GaussNewtonConfig::default(),
            mode: MetricMode::Conventional,
            bins: DEFAULT_BINS,
        }
    }
}

/// Fits one AA-Micro model per `fit_on` group (on the whole group) and
/// scores each against every `eval_on` group.
pub fn cross_matrix(
    groups: &[GroupSpec; 3],
    fit_on: VehicleMode,
    eval_on: VehicleMode,
    samples: &[EnergySample],
    config: &CrossConfig,
) -> Result<EvalMatrix> {
    validate_groups(groups)?;
    let fit_sets: Vec<Vec<EnergySample>> = groups
        .iter()
        .map(|g| group_samples(samples, fit_on, g))
        .collect();
    let eval_sets: Vec<Vec<EnergySample>> = groups
        .iter()
        .map(|g| group_samples(samples, eval_on, g))
        .collect();
    for (g, (f, e)) in groups.iter().zip(fit_sets.iter().zip(&eval_sets)) {
        if f.is_empty() {
            return Err(Error::InvalidInput(format!(
                "group {} has no {fit_on} samples",
                g.group_id
            )));
        }
        if e.is_empty() {
            return Err(Error::InvalidInput(format!(
                "group {} has no {eval_on} samples",
                g.group_id
            )));
        }
    }

    let mut models = Vec::with_capacity(3);
    let mut solver_iterations = [0; 3];
    let mut converged = [false; 3];
    for (i, set) in fit_sets.iter().enumerate() {
        let fit = fit_aamicro(set, &config.solver).map_err(|e| match e {
            Error::InvalidInput(m) => {
                Error::InvalidInput(format!("group {}: {m}", groups[i].group_id))
            }
            other => other,
        })?;
        solver_iterations[i] = fit.solver_iterations;
        converged[i] = fit.converged;
        models.push(fit.coeffs);
    }

    let residuals: Vec<Vec<Vec<f64>>> = models
        .iter()
        .map(|m| eval_sets.iter().map(|set| residuals(m, set)).collect())
        .collect();
    let all: Vec<f64> = residuals.iter().flatten().flatten().copied().collect();
    let (lo, hi) = histogram_range(&all);

    let mut values = [[0.0; 3]; 3];
    let mut rss = [[0.0; 3]; 3];
    let mut summaries: Vec<ResidualSummary> = Vec::with_capacity(9);
    for i in 0..3 {
        for j in 0..3 {
            let r = &residuals[i][j];
            values[i][j] = metric_rmse(r, config.mode);
            rss[i][j] = metric_rss(r, config.mode);
            summaries.push(residual_density_in(r, config.bins, lo, hi)?);
        }
    }
    let mut it = summaries.into_iter();
    let residual_summaries =
        std::array::from_fn(|_| std::array::from_fn(|_| it.next().expect("nine cells")));

    Ok(EvalMatrix {
        metric_name: "rmse".into(),
        mode: config.mode,
        fit_on,
        eval_on,
        groups: groups.clone(),
        values,
        rss,
        residual_summaries,
        models,
        solver_iterations,
        converged,
        residuals,
    })
}
