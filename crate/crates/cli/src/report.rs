//! Markdown report assembled from the JSON outputs of earlier commands.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;
use energy_calib::calibration::FitReport;
use energy_calib::consumption_models::ModelKind;
use energy_calib::energy_pipeline::{FieldStats, Summary};
use energy_calib::evaluation::EvalMatrix;
use energy_calib::trajectory_store::VehicleMode;

use crate::commands::{fit_file_stem, CleaningOutput, CrossvalOutput};
use crate::{read_json, Artifact};

fn load<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<Option<Artifact<T>>> {
    if !path.exists() {
        return Ok(None);
    }
    read_json(path).map(Some)
}

fn stats_cells(s: &FieldStats) -> String {
    format!(
        "[{:.3}, {:.3}] | {:.3} | {:.3}",
        s.min, s.max, s.mean, s.std
    )
}

fn data_section(md: &mut String, summary: &Summary, cleaning: Option<&CleaningOutput>) {
    md.push_str("## Cleaned data statistics\n\n");
    if let Some(c) = cleaning {
        let t = &c.total;
        let _ = writeln!(
            md,
            "{} ticks in, {} samples kept; dropped {} below the speed floor, {} at zero acceleration with low energy, {} first/last ticks.\n",
            t.input_count, t.output_count, t.dropped_low_speed, t.dropped_zero_accel_low_energy, t.dropped_first_tick
        );
    }
    md.push_str(
        "| Variable | Mode | Unit | Range [min, max] | Mean | Std |\n|---|---|---|---|---|---|\n",
    );
    for (mode, m) in summary {
        let _ = writeln!(md, "| Samples | {mode} | count | {} | | |", m.count);
        let _ = writeln!(md, "| Runs | {mode} | id | {:?} | | |", m.run_ids);
        for (name, unit, s) in [
            ("Battery_J", "J", &m.battery_j),
            ("Engine_J", "J", &m.engine_j),
            ("Total_J", "J", &m.total_j),
            ("Speed", "m/s", &m.speed),
            ("Acceleration", "m/s²", &m.accel),
        ] {
            let _ = writeln!(md, "| {name} | {mode} | {unit} | {} |", stats_cells(s));
        }
    }
    md.push('\n');
}

fn fit_section(md: &mut String, dir: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for kind in ModelKind::ALL {
        let mut cells = Vec::new();
        let mut any = false;
        for mode in VehicleMode::ALL {
            let fit: Option<Artifact<FitReport>> =
                load(&dir.join(format!("fit_{}.json", fit_file_stem(kind, mode))))?;
            match fit {
                Some(f) => {
                    any = true;
                    let r = f.result;
                    cells.push(format!(
                        "{:.4} | {:.4} | {:.4}",
                        r.r2_adj_train, r.r2_adj_test, r.r2_adj_all
                    ));
                }
                None => cells.push("n/a | n/a | n/a".into()),
            }
        }
        if any {
            rows.push(format!("| {} | {} |", kind.label(), cells.join(" | ")));
        }
    }
    md.push_str("## Model fit (adjusted R²)\n\n");
    if rows.is_empty() {
        md.push_str("No fit outputs found; run `fit` first.\n\n");
        return Ok(());
    }
    md.push_str("| Model | ACC train | ACC test | ACC all | HV train | HV test | HV all |\n|---|---|---|---|---|---|---|\n");
    for r in rows {
        md.push_str(&r);
        md.push('\n');
    }
    md.push('\n');
    Ok(())
}

fn matrix_table(md: &mut String, title: &str, m: &EvalMatrix) {
    let _ = writeln!(
        md,
        "### {title}\n\nRMSE ({} metric), {} models applied to {} data. Rows: model group; columns: data group.\n",
        m.mode, m.fit_on, m.eval_on
    );
    md.push_str("| Model \\ Data |");
    for g in &m.groups {
        let _ = write!(md, " Group {} |", g.group_id);
    }
    md.push_str("\n|---|---|---|---|\n");
    for (i, row) in m.values.iter().enumerate() {
        let _ = write!(md, "| Group {} |", m.groups[i].group_id);
        for v in row {
            let _ = write!(md, " {v:.3} |");
        }
        md.push('\n');
    }
    md.push('\n');
}

fn crossval_section(md: &mut String, cv: &CrossvalOutput) {
    md.push_str("## Group cross-application\n\n");
    matrix_table(md, "Test 1", &cv.test1);
    matrix_table(md, "Test 2", &cv.test2);
    let _ = writeln!(
        md,
        "Within-type mean {:.3}, cross-type mean {:.3}, ratio {:.3}; Test 1 max/min cell ratio {:.3}.\n",
        cv.within_type_mean, cv.cross_type_mean, cv.cross_to_within, cv.test1_max_min_ratio
    );
    md.push_str("Residual densities per cell are in `test1/` and `test2/` as `rss_model<i>_data<j>.csv`.\n\n");
}

pub fn render(dir: &Path) -> Result<String> {
    let mut md = String::from("# Energy model calibration report\n\n");
    let summary: Option<Artifact<Summary>> = load(&dir.join("summary.json"))?;
    let cleaning: Option<Artifact<CleaningOutput>> = load(&dir.join("cleaning_report.json"))?;
    let crossval: Option<Artifact<CrossvalOutput>> = load(&dir.join("crossval.json"))?;

    if let Some(p) = summary
        .as_ref()
        .map(|s| &s.provenance)
        .or(crossval.as_ref().map(|c| &c.provenance))
    {
        let _ = writeln!(
            md,
            "Tool version {}; metric mode {}; seeds {:?}.\n",
            p.tool_version, p.metric_mode, p.seeds
        );
    }
    match &summary {
        Some(s) => data_section(&mut md, &s.result, cleaning.as_ref().map(|c| &c.result)),
        None => {
            md.push_str("## Cleaned data statistics\n\nNo summary found; run `process` first.\n\n")
        }
    }
    fit_section(&mut md, dir)?;
    match &crossval {
        Some(c) => crossval_section(&mut md, &c.result),
        None => md.push_str(
            "## Group cross-application\n\nNo crossval output found; run `crossval` first.\n",
        ),
    }
    Ok(md)
}
