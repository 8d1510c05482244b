use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use energy_calib::calibration::{calibrate, FitReport, SplitStrategy};
use energy_calib::consumption_models::{ModelCoefficients, ModelKind};
use energy_calib::energy_pipeline::{
    process_series, read_samples, summarize, write_samples, CleaningReport, EnergySample, Summary,
};
use energy_calib::evaluation::{
    cross_matrix, metric_rmse, metric_rss, parse_groups, residual_density, residuals, CrossConfig,
    EvalMatrix, MetricMode, ResidualSummary,
};
use energy_calib::synth_oracle::make_dataset;
use energy_calib::trajectory_store::{
    load_runs_from_path, resample, DatasetManifest, IngestOptions, Run, VehicleMode,
};
use serde::{Deserialize, Serialize};

use crate::args::{
    Command, CrossvalArgs, EvalArgs, FitArgs, ProcessArgs, ReportArgs, SolverArgs, SynthArgs,
};
use crate::config::RunConfig;
use crate::{create_file, ensure_dir, write_json, Artifact, InputDigest, Provenance, UsageError};

pub fn dispatch(command: Command, mut config: RunConfig, out: &Path) -> Result<()> {
    match command {
        Command::Synth(a) => {
            apply_synth(&mut config, &a);
            config.validate()?;
            cmd_synth(&config, out)
        }
        Command::Process(a) => {
            apply_process(&mut config, &a);
            config.validate()?;
            cmd_process(&config, &a, out)
        }
        Command::Fit(a) => {
            apply_solver(&mut config, &a.solver);
            if let Some(r) = a.train_ratio {
                config.split.train_ratio = r;
            }
            if let Some(s) = a.split_seed {
                config.split.seed = s;
            }
            if a.sequential {
                config.split.strategy = SplitStrategy::SequentialPrefix;
            }
            config.validate()?;
            cmd_fit(&config, &a, out)
        }
        Command::Eval(a) => {
            apply_metric(&mut config, a.metric, a.bins);
            config.validate()?;
            cmd_eval(&config, &a, out)
        }
        Command::Crossval(a) => {
            apply_solver(&mut config, &a.solver);
            apply_metric(&mut config, a.metric, a.bins);
            if let Some(g) = &a.groups {
                config.groups = parse_groups(g).map_err(|e| UsageError(e.to_string()))?;
            }
            config.validate()?;
            cmd_crossval(&config, &a, out)
        }
        Command::Report(a) => cmd_report(&a, out),
    }
}

fn apply_synth(config: &mut RunConfig, a: &SynthArgs) {
    let s = &mut config.synth;
    if let Some(seed) = a.seed {
        s.seed = seed;
    }
    if let Some(n) = a.runs {
        s.n_runs = n;
    }
    if let Some(n) = a.run_length {
        s.run_length = n as usize;
    }
    if let Some(x) = a.noise_acc {
        s.noise_rel_acc = x;
    }
    if let Some(x) = a.noise_hv {
        s.noise_rel_hv = x;
    }
    if a.null_control {
        *s = s.null_control();
    }
}

fn apply_process(config: &mut RunConfig, a: &ProcessArgs) {
    if let Some(dt) = a.dt {
        config.dt = dt;
    }
    if let Some(v) = a.min_speed {
        config.cleaning.min_speed = v;
    }
    if let Some(j) = a.energy_floor {
        config.cleaning.zero_accel_energy_floor = j;
    }
}

fn apply_solver(config: &mut RunConfig, a: &SolverArgs) {
    if let Some(n) = a.max_iters {
        config.solver.max_iters = n;
    }
    if let Some(t) = a.rel_tol {
        config.solver.rel_tol = t;
    }
    if let Some(d) = a.damping_init {
        config.solver.damping_init = d;
    }
}

fn apply_metric(config: &mut RunConfig, metric: Option<MetricMode>, bins: Option<usize>) {
    if let Some(m) = metric {
        config.metric = m;
    }
    if let Some(b) = bins {
        config.bins = b;
    }
}

fn write_provenance(out: &Path, prov: &Provenance) -> Result<()> {
    write_json(&out.join(format!("provenance_{}.json", prov.command)), prov)
}

pub fn cmd_synth(config: &RunConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let manifest = make_dataset(&config.synth, out)?;
    write_provenance(out, &Provenance::new("synth", config, Vec::new()))?;
    println!(
        "wrote {} runs and manifest.json to {}",
        manifest.files.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCleaning {
    pub mode: VehicleMode,
    pub run_id: u32,
    pub report: CleaningReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningOutput {
    pub total: CleaningReport,
    pub runs: Vec<RunCleaning>,
}

fn load_inputs(a: &ProcessArgs) -> Result<(Vec<Run>, Vec<PathBuf>)> {
    if let Some(manifest_path) = &a.manifest {
        let manifest = DatasetManifest::from_path(manifest_path)?;
        let mut files = vec![manifest_path.clone()];
        files.extend(manifest.resolve(manifest_path).into_iter().map(|(p, _)| p));
        return Ok((manifest.load_runs(manifest_path)?, files));
    }
    let mut runs: Vec<Run> = Vec::new();
    let mut seen = BTreeSet::new();
    for path in &a.inputs {
        for run in load_runs_from_path(path, &IngestOptions::default())? {
            if !seen.insert((run.mode, run.run_id)) {
                bail!(energy_calib::Error::Validation(format!(
                    "run {} ({}) appears in more than one file",
                    run.run_id, run.mode
                )));
            }
            runs.push(run);
        }
    }
    runs.sort_by_key(|r| (r.mode, r.run_id));
    Ok((runs, a.inputs.clone()))
}

pub fn cmd_process(config: &RunConfig, a: &ProcessArgs, out: &Path) -> Result<()> {
    let (runs, files) = load_inputs(a)?;
    if runs.is_empty() {
        bail!(energy_calib::Error::InvalidInput(
            "no runs found in the inputs".into()
        ));
    }
    let inputs = files
        .iter()
        .map(|p| InputDigest::of(p))
        .collect::<Result<Vec<_>>>()?;

    let mut samples: Vec<EnergySample> = Vec::new();
    let mut total = CleaningReport::default();
    let mut per_run = Vec::with_capacity(runs.len());
    for run in &runs {
        let series = resample(&run.records, config.dt)
            .with_context(|| format!("resampling run {} ({})", run.run_id, run.mode))?;
        let (kept, report) = process_series(&series, &config.powertrain, &config.cleaning)
            .with_context(|| format!("processing run {} ({})", run.run_id, run.mode))?;
        samples.extend(kept);
        total.merge(&report);
        per_run.push(RunCleaning {
            mode: run.mode,
            run_id: run.run_id,
            report,
        });
    }
    samples.sort_by_key(|s| s.key());
    let summary: Summary = summarize(&samples)?;

    ensure_dir(out)?;
    let prov = Provenance::new("process", config, inputs);
    write_samples(create_file(&out.join("samples.csv"))?, &samples)?;
    write_json(
        &out.join("cleaning_report.json"),
        &Artifact {
            provenance: prov.clone(),
            result: CleaningOutput {
                total,
                runs: per_run,
            },
        },
    )?;
    write_json(
        &out.join("summary.json"),
        &Artifact {
            provenance: prov.clone(),
            result: summary.clone(),
        },
    )?;
    write_provenance(out, &prov)?;
    println!(
        "{} runs, {} ticks in, {} samples kept (low speed {}, zero-accel low energy {}, first/last tick {})",
        runs.len(),
        total.input_count,
        total.output_count,
        total.dropped_low_speed,
        total.dropped_zero_accel_low_energy,
        total.dropped_first_tick
    );
    Ok(())
}

fn load_samples(path: &Path) -> Result<Vec<EnergySample>> {
    let file = std::fs::File::open(path).map_err(|e| energy_calib::Error::io(path, e))?;
    read_samples(std::io::BufReader::new(file))
        .with_context(|| format!("reading samples {}", path.display()))
}

fn modes_to_run(samples: &[EnergySample], only: Option<VehicleMode>) -> Result<Vec<VehicleMode>> {
    let present: BTreeSet<VehicleMode> = samples.iter().map(|s| s.mode).collect();
    match only {
        Some(m) if present.contains(&m) => Ok(vec![m]),
        Some(m) => bail!(energy_calib::Error::InvalidInput(format!(
            "no {m} samples in the input"
        ))),
        None if present.is_empty() => bail!(energy_calib::Error::InvalidInput(
            "sample file is empty".into()
        )),
        None => Ok(present.into_iter().collect()),
    }
}

fn of_mode(samples: &[EnergySample], mode: VehicleMode) -> Vec<EnergySample> {
    samples.iter().filter(|s| s.mode == mode).copied().collect()
}

pub fn fit_file_stem(kind: ModelKind, mode: VehicleMode) -> String {
    format!("{}_{}", kind.as_str(), mode)
}

pub fn cmd_fit(config: &RunConfig, a: &FitArgs, out: &Path) -> Result<()> {
    let samples = load_samples(&a.samples)?;
    let modes = modes_to_run(&samples, a.mode)?;
    let prov = Provenance::new("fit", config, vec![InputDigest::of(&a.samples)?]);
    ensure_dir(out)?;

    let mut rows = Vec::new();
    for &mode in &modes {
        let subset = of_mode(&samples, mode);
        for kind in a.model.kinds() {
            let report = calibrate(kind, &subset, &config.split, &config.solver)
                .with_context(|| format!("fitting {} on {mode} samples", kind.label()))?;
            let stem = fit_file_stem(kind, mode);
            write_json(
                &out.join(format!("fit_{stem}.json")),
                &Artifact {
                    provenance: prov.clone(),
                    result: report.clone(),
                },
            )?;
            let model_path = out.join(format!("model_{stem}.json"));
            std::fs::write(&model_path, report.theta.to_json()? + "\n")
                .with_context(|| format!("writing {}", model_path.display()))?;
            let mut line = format!(
                "{:<9} {:<3} train {:.4}  test {:.4}  all {:.4}",
                kind.label(),
                mode,
                report.r2_adj_train,
                report.r2_adj_test,
                report.r2_adj_all
            );
            if kind == ModelKind::VtMicro {
                line += &format!(
                    "  (excluded {} non-positive samples)",
                    report.excluded_nonpositive
                );
            }
            if kind == ModelKind::AaMicro {
                line += &format!(
                    "  ({} iterations, converged {})",
                    report.solver_iterations, report.converged
                );
            }
            println!("{line}");
            rows.push((mode, report));
        }
    }
    write_fit_summary(&out.join("fit_summary.csv"), &rows)?;
    write_provenance(out, &prov)?;
    Ok(())
}

fn write_fit_summary(path: &Path, rows: &[(VehicleMode, FitReport)]) -> Result<()> {
    use std::io::Write;
    let mut w = create_file(path)?;
    writeln!(
        w,
        "model,mode,n_train,n_test,r2_adj_train,r2_adj_test,r2_adj_all,excluded_nonpositive,solver_iterations,converged"
    )?;
    for (mode, r) in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.kind.as_str(),
            mode,
            r.n_train,
            r.n_test,
            r.r2_adj_train,
            r.r2_adj_test,
            r.r2_adj_all,
            r.excluded_nonpositive,
            r.solver_iterations,
            r.converged
        )?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub model_file: String,
    pub model_kind: ModelKind,
    pub mode: VehicleMode,
    pub metric_mode: MetricMode,
    pub n: usize,
    pub rss: f64,
    pub rmse: f64,
    pub residuals: ResidualSummary,
}

pub fn cmd_eval(config: &RunConfig, a: &EvalArgs, out: &Path) -> Result<()> {
    let samples = load_samples(&a.samples)?;
    let text = std::fs::read_to_string(&a.model_file)
        .map_err(|e| energy_calib::Error::io(&a.model_file, e))?;
    let model = ModelCoefficients::from_json(&text)
        .with_context(|| format!("loading model {}", a.model_file.display()))?;
    let stem = a
        .model_file
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let prov = Provenance::new(
        "eval",
        config,
        vec![
            InputDigest::of(&a.samples)?,
            InputDigest::of(&a.model_file)?,
        ],
    );
    ensure_dir(out)?;
    for mode in modes_to_run(&samples, a.mode)? {
        let subset = of_mode(&samples, mode);
        let r = residuals(&model, &subset);
        let summary = residual_density(&r, config.bins)?;
        let result = EvalOutput {
            model_file: a
                .model_file
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            model_kind: model.kind,
            mode,
            metric_mode: config.metric,
            n: r.len(),
            rss: metric_rss(&r, config.metric),
            rmse: metric_rmse(&r, config.metric),
            residuals: summary,
        };
        println!(
            "{} on {mode}: RMSE {:.3}  RSS {:.6e}  ({} metric, n = {})",
            stem, result.rmse, result.rss, config.metric, result.n
        );
        result.residuals.histogram.write_csv(create_file(
            &out.join(format!("density_{stem}_{mode}.csv")),
        )?)?;
        write_json(
            &out.join(format!("eval_{stem}_{mode}.json")),
            &Artifact {
                provenance: prov.clone(),
                result,
            },
        )?;
    }
    write_provenance(out, &prov)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalOutput {
    pub test1: EvalMatrix,
    pub test2: EvalMatrix,
    /// Mean of the Test 1 cells (ACC models on ACC data).
    pub within_type_mean: f64,
    /// Mean of the Test 2 cells (ACC models on HV data).
    pub cross_type_mean: f64,
    pub cross_to_within: f64,
    pub test1_max_min_ratio: f64,
}

fn write_matrix_dir(dir: &Path, m: &EvalMatrix) -> Result<()> {
    ensure_dir(dir)?;
    m.write_values_csv(create_file(&dir.join("matrix.csv"))?)?;
    for (i, row) in m.residual_summaries.iter().enumerate() {
        let gi = m.groups[i].group_id;
        for (j, cell) in row.iter().enumerate() {
            let gj = m.groups[j].group_id;
            cell.histogram.write_csv(create_file(
                &dir.join(format!("rss_model{gi}_data{gj}.csv")),
            )?)?;
        }
        let path = dir.join(format!("model_group{gi}.json"));
        std::fs::write(&path, m.models[i].to_json()? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn cmd_crossval(config: &RunConfig, a: &CrossvalArgs, out: &Path) -> Result<()> {
    let samples = load_samples(&a.samples)?;
    let cross = CrossConfig {
        solver: config.solver,
        mode: config.metric,
        bins: config.bins,
    };
    let test1 = cross_matrix(
        &config.groups,
        VehicleMode::Acc,
        VehicleMode::Acc,
        &samples,
        &cross,
    )
    .context("test 1 (ACC models on ACC data)")?;
    let test2 = cross_matrix(
        &config.groups,
        VehicleMode::Acc,
        VehicleMode::Hv,
        &samples,
        &cross,
    )
    .context("test 2 (ACC models on HV data)")?;

    ensure_dir(out)?;
    write_matrix_dir(&out.join("test1"), &test1)?;
    write_matrix_dir(&out.join("test2"), &test2)?;
    let within = test1.mean_value();
    let across = test2.mean_value();
    let result = CrossvalOutput {
        within_type_mean: within,
        cross_type_mean: across,
        cross_to_within: across / within,
        test1_max_min_ratio: test1.max_min_ratio(),
        test1,
        test2,
    };
    println!(
        "test 1 mean RMSE {:.3} (max/min {:.3}), test 2 mean RMSE {:.3}, ratio {:.3} ({} metric)",
        within, result.test1_max_min_ratio, across, result.cross_to_within, config.metric
    );
    let prov = Provenance::new("crossval", config, vec![InputDigest::of(&a.samples)?]);
    write_json(
        &out.join("crossval.json"),
        &Artifact {
            provenance: prov.clone(),
            result,
        },
    )?;
    write_provenance(out, &prov)?;
    Ok(())
}

pub fn cmd_report(a: &ReportArgs, out: &Path) -> Result<()> {
    let dir = a.dir.clone().unwrap_or_else(|| out.to_path_buf());
    let text = crate::report::render(&dir)?;
    ensure_dir(out)?;
    let path = out.join("report.md");
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}
