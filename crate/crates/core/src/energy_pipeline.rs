//! Per-tick energy accounting for a hybrid powertrain.
//!
//! Engine energy comes from the mass of air ingested over the tick,
//! converted through the air-fuel ratio, the fuel's calorific value and the
//! engine efficiency. Battery energy comes from the SOC drop across the tick
//! scaled by capacity and electric efficiency; it goes negative while the
//! battery recharges. Acceleration is the backward difference of boundary
//! speeds, so tick 0 never yields a sample.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory_store::{TrajectorySeries, VehicleMode};

/// `|a|` below this counts as zero acceleration for the cleaning rule.
pub const ZERO_ACCEL_EPS: f64 = 1e-12;

/// 20 mph in m/s.
pub const DEFAULT_MIN_SPEED: f64 = 8.941;

pub const DEFAULT_ZERO_ACCEL_ENERGY_FLOOR: f64 = 25_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowertrainParams {
    pub air_fuel_ratio: f64,
    /// J/g.
    pub calorific_value: f64,
    /// J.
    pub battery_capacity: f64,
    pub engine_efficiency: f64,
    pub electric_efficiency: f64,
}

impl Default for PowertrainParams {
    fn default() -> Self {
        Self {
            air_fuel_ratio: 14.7,
            calorific_value: 44_000.0,
            // 1.4 kWh
            battery_capacity: 5_040_000.0,
            engine_efficiency: 0.40,
            electric_efficiency: 0.50,
        }
    }
}

impl PowertrainParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("air_fuel_ratio", self.air_fuel_ratio),
            ("calorific_value", self.calorific_value),
            ("battery_capacity", self.battery_capacity),
            ("engine_efficiency", self.engine_efficiency),
            ("electric_efficiency", self.electric_efficiency),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "{name} must be > 0, got {value}"
                )));
            }
        }
        for (name, value) in [
            ("engine_efficiency", self.engine_efficiency),
            ("electric_efficiency", self.electric_efficiency),
        ] {
            if value > 1.0 {
                return Err(Error::InvalidInput(format!(
                    "{name} must be <= 1, got {value}"
                )));
            }
        }
        Ok(())
    }

    /// Joules delivered per gram of ingested air.
    pub fn joules_per_air_gram(&self) -> f64 {
        self.calorific_value * self.engine_efficiency / self.air_fuel_ratio
    }

    /// Joules delivered per unit of SOC fraction.
    pub fn joules_per_soc(&self) -> f64 {
        self.battery_capacity * self.electric_efficiency
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergySample {
    pub run_id: u32,
    pub mode: VehicleMode,
    pub t: usize,
    pub speed: f64,
    pub accel: f64,
    pub engine_j: f64,
    pub battery_j: f64,
    pub total_j: f64,
}

impl EnergySample {
    /// Ordering key used for every deterministic merge.
    pub fn key(&self) -> (VehicleMode, u32, usize) {
        (self.mode, self.run_id, self.t)
    }
}

pub fn gasoline_energy(maf_integral: f64, params: &PowertrainParams) -> Result<f64> {
    if !(maf_integral.is_finite() && maf_integral >= 0.0) {
        return Err(Error::Domain(format!(
            "air mass over a tick must be finite and >= 0, got {maf_integral}"
        )));
    }
    Ok(maf_integral * params.calorific_value * params.engine_efficiency / params.air_fuel_ratio)
}

/// Positive while discharging.
pub fn battery_energy(soc_start: f64, soc_end: f64, params: &PowertrainParams) -> Result<f64> {
    for soc in [soc_start, soc_end] {
        if !(soc.is_finite() && (0.0..=1.0).contains(&soc)) {
            return Err(Error::Domain(format!("soc out of range [0, 1]: {soc}")));
        }
    }
    Ok((soc_start - soc_end) * params.battery_capacity * params.electric_efficiency)
}

/// Backward differences; entry 0 is `None` because tick 0 has no
/// predecessor.
pub fn accelerations(speeds: &[f64], dt: f64) -> Result<Vec<Option<f64>>> {
    if speeds.len() < 2 {
        return Err(Error::RunTooShort(format!(
            "need at least 2 ticks to difference speeds, got {}",
            speeds.len()
        )));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt must be > 0, got {dt}")));
    }
    let mut out = Vec::with_capacity(speeds.len());
    out.push(None);
    out.extend(speeds.windows(2).map(|w| Some((w[1] - w[0]) / dt)));
    Ok(out)
}

/// Samples for ticks `1..`. The last tick is skipped when the series has no
/// closing boundary SOC.
pub fn build_samples(
    series: &TrajectorySeries,
    params: &PowertrainParams,
) -> Result<Vec<EnergySample>> {
    series.validate()?;
    if series.ticks.len() < 2 {
        return Err(Error::RunTooShort(format!(
            "run {} ({}) has {} tick(s); at least 2 are needed",
            series.run_id,
            series.mode,
            series.ticks.len()
        )));
    }
    let speeds: Vec<f64> = series.ticks.iter().map(|t| t.speed).collect();
    let accel = accelerations(&speeds, series.dt)?;
    let context = |e: Error| match e {
        Error::Domain(m) => Error::Domain(format!("run {} ({}): {m}", series.run_id, series.mode)),
        other => other,
    };

    let mut out = Vec::with_capacity(series.ticks.len() - 1);
    for (i, tick) in series.ticks.iter().enumerate().skip(1) {
        let soc_end = match series.ticks.get(i + 1) {
            Some(next) => next.soc,
            None => match series.end {
                Some(b) => b.soc,
                None => break,
            },
        };
        let engine_j = gasoline_energy(tick.maf_integral, params).map_err(context)?;
        let battery_j = battery_energy(tick.soc, soc_end, params).map_err(context)?;
        out.push(EnergySample {
            run_id: series.run_id,
            mode: series.mode,
            t: tick.t,
            speed: tick.speed,
            accel: accel[i].expect("ticks past 0 have an acceleration"),
            engine_j,
            battery_j,
            total_j: engine_j + battery_j,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleaningRules {
    /// m/s; samples strictly below are dropped.
    pub min_speed: f64,
    /// J; zero-acceleration samples strictly below are dropped.
    pub zero_accel_energy_floor: f64,
}

impl Default for CleaningRules {
    fn default() -> Self {
        Self {
            min_speed: DEFAULT_MIN_SPEED,
            zero_accel_energy_floor: DEFAULT_ZERO_ACCEL_ENERGY_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub input_count: usize,
    pub dropped_low_speed: usize,
    pub dropped_zero_accel_low_energy: usize,
    pub dropped_first_tick: usize,
    pub output_count: usize,
}

impl CleaningReport {
    pub fn reconciles(&self) -> bool {
        self.input_count
            == self.output_count
                + self.dropped_low_speed
                + self.dropped_zero_accel_low_energy
                + self.dropped_first_tick
    }

    pub fn merge(&mut self, other: &CleaningReport) {
        self.input_count += other.input_count;
        self.dropped_low_speed += other.dropped_low_speed;
        self.dropped_zero_accel_low_energy += other.dropped_zero_accel_low_energy;
        self.dropped_first_tick += other.dropped_first_tick;
        self.output_count += other.output_count;
    }
}

/// Applies the low-speed rule, then the zero-acceleration/low-energy rule.
/// A sample failing both counts once, as low speed.
pub fn clean(
    samples: &[EnergySample],
    rules: &CleaningRules,
) -> (Vec<EnergySample>, CleaningReport) {
    let mut report = CleaningReport {
        input_count: samples.len(),
        ..Default::default()
    };
    let mut kept = Vec::with_capacity(samples.len());
    for s in samples {
        if s.speed < rules.min_speed {
            report.dropped_low_speed += 1;
        } else if s.accel.abs() < ZERO_ACCEL_EPS && s.total_j < rules.zero_accel_energy_floor {
            report.dropped_zero_accel_low_energy += 1;
        } else {
            kept.push(*s);
        }
    }
    report.output_count = kept.len();
    (kept, report)
}

/// Full per-run chain: samples, then cleaning. Tick 0 (and a trailing tick
/// without closing SOC) are counted as `dropped_first_tick`.
pub fn process_series(
    series: &TrajectorySeries,
    params: &PowertrainParams,
    rules: &CleaningRules,
) -> Result<(Vec<EnergySample>, CleaningReport)> {
    let samples = build_samples(series, params)?;
    let (kept, mut report) = clean(&samples, rules);
    report.dropped_first_tick = series.ticks.len() - samples.len();
    report.input_count = series.ticks.len();
    Ok((kept, report))
}

/// Processes many runs and merges the result in `(mode, run_id, t)` order.
pub fn process_all(
    series: &[TrajectorySeries],
    params: &PowertrainParams,
    rules: &CleaningRules,
) -> Result<(Vec<EnergySample>, CleaningReport)> {
    params.validate()?;
    let mut all = Vec::new();
    let mut report = CleaningReport::default();
    for s in series {
        let (kept, r) = process_series(s, params, rules)?;
        all.extend(kept);
        report.merge(&r);
    }
    all.sort_by_key(|s| s.key());
    Ok((all, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl FieldStats {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("cannot summarize an empty set".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean,
            std: var.sqrt(),
        })
    }
}

/// One mode's cleaned-data statistics. Field order follows the usual table
/// layout: battery, engine, total, speed, acceleration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub count: usize,
    pub run_ids: Vec<u32>,
    pub battery_j: FieldStats,
    pub engine_j: FieldStats,
    pub total_j: FieldStats,
    pub speed: FieldStats,
    pub accel: FieldStats,
}

pub type Summary = BTreeMap<VehicleMode, ModeSummary>;

pub fn summarize(samples: &[EnergySample]) -> Result<Summary> {
    if samples.is_empty() {
        return Err(Error::InvalidInput(
            "cannot summarize an empty sample set".into(),
        ));
    }
    let mut out = BTreeMap::new();
    for mode in VehicleMode::ALL {
        let subset: Vec<&EnergySample> = samples.iter().filter(|s| s.mode == mode).collect();
        if subset.is_empty() {
            continue;
        }
        let col =
            |f: fn(&EnergySample) -> f64| -> Vec<f64> { subset.iter().map(|s| f(s)).collect() };
        let mut run_ids: Vec<u32> = subset.iter().map(|s| s.run_id).collect();
        run_ids.sort_unstable();
        run_ids.dedup();
        out.insert(
            mode,
            ModeSummary {
                count: subset.len(),
                run_ids,
                battery_j: FieldStats::of(&col(|s| s.battery_j))?,
                engine_j: FieldStats::of(&col(|s| s.engine_j))?,
                total_j: FieldStats::of(&col(|s| s.total_j))?,
                speed: FieldStats::of(&col(|s| s.speed))?,
                accel: FieldStats::of(&col(|s| s.accel))?,
            },
        );
    }
    Ok(out)
}

const SAMPLE_HEADER: [&str; 8] = [
    "run_id",
    "mode",
    "t",
    "speed",
    "accel",
    "engine_j",
    "battery_j",
    "total_j",
];

pub fn write_samples<W: Write>(writer: W, samples: &[EnergySample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SAMPLE_HEADER)?;
    for s in samples {
        w.write_record([
            s.run_id.to_string(),
            s.mode.to_string(),
            s.t.to_string(),
            s.speed.to_string(),
            s.accel.to_string(),
            s.engine_j.to_string(),
            s.battery_j.to_string(),
            s.total_j.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn read_samples<R: Read>(reader: R) -> Result<Vec<EnergySample>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    if header
        .iter()
        .map(str::trim)
        .ne(SAMPLE_HEADER.iter().copied())
    {
        return Err(Error::Schema(format!(
            "sample CSV header must be '{}'",
            SAMPLE_HEADER.join(",")
        )));
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let num = |i: usize| -> Result<f64> {
            row[i].trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("cannot parse {} from '{}'", SAMPLE_HEADER[i], &row[i]),
            })
        };
        let parse_err = |what: &str| Error::Parse {
            line,
            message: format!("cannot parse {what}"),
        };
        out.push(EnergySample {
            run_id: row[0].trim().parse().map_err(|_| parse_err("run_id"))?,
            mode: row[1].parse().map_err(|_| parse_err("mode"))?,
            t: row[2].trim().parse().map_err(|_| parse_err("t"))?,
            speed: num(3)?,
            accel: num(4)?,
            engine_j: num(5)?,
            battery_j: num(6)?,
            total_j: num(7)?,
        });
    }
    Ok(out)
}
