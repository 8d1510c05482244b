//! Raw OBD-style run logs: CSV ingestion, validation and resampling onto a
//! fixed tick grid.
//!
//! Input rows carry `run_id,mode,t,maf_gps,soc,speed_mps` (or `soc_pct`
//! instead of `soc`). State of charge is always held as a fraction in
//! `[0, 1]` once ingested.
//!
//! Resampling integrates mass air flow over each tick with the trapezoid
//! rule and point-samples SOC and speed at tick boundaries by linear
//! interpolation. Boundary sampling (rather than window means) keeps the
//! acceleration difference from smoothing the speed signal a second time.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack used when flooring `span / dt`, so that grids built from decimal
/// timestamps do not lose their final tick to rounding.
const GRID_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleMode {
    Acc,
    Hv,
}

impl VehicleMode {
    pub const ALL: [VehicleMode; 2] = [VehicleMode::Acc, VehicleMode::Hv];

    pub fn as_str(self) -> &'static str {
        match self {
            VehicleMode::Acc => "acc",
            VehicleMode::Hv => "hv",
        }
    }
}

impl fmt::Display for VehicleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VehicleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "acc" => Ok(VehicleMode::Acc),
            "hv" => Ok(VehicleMode::Hv),
            other => Err(Error::Validation(format!("unknown vehicle mode '{other}'"))),
        }
    }
}

/// One raw timestamped sensor reading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObdRecord {
    pub run_id: u32,
    pub mode: VehicleMode,
    /// Seconds.
    pub timestamp: f64,
    /// Mass air flow, g/s.
    pub maf: f64,
    /// State of charge as a fraction.
    pub soc: f64,
    /// m/s.
    pub speed: f64,
}

impl ObdRecord {
    pub fn validate(&self) -> Result<()> {
        if self.run_id == 0 {
            return Err(Error::Validation(
                "run_id must be a positive integer".into(),
            ));
        }
        if !self.timestamp.is_finite() {
            return Err(Error::Validation(format!(
                "run {}: non-finite timestamp",
                self.run_id
            )));
        }
        if !(self.soc.is_finite() && (0.0..=1.0).contains(&self.soc)) {
            return Err(Error::Validation(format!(
                "run {} at t={}: soc out of range ({})",
                self.run_id, self.timestamp, self.soc
            )));
        }
        if !(self.maf.is_finite() && self.maf >= 0.0) {
            return Err(Error::Validation(format!(
                "run {} at t={}: maf must be finite and >= 0 ({})",
                self.run_id, self.timestamp, self.maf
            )));
        }
        if !(self.speed.is_finite() && self.speed >= 0.0) {
            return Err(Error::Validation(format!(
                "run {} at t={}: speed must be finite and >= 0 ({})",
                self.run_id, self.timestamp, self.speed
            )));
        }
        Ok(())
    }
}

/// All records of one run, ordered by timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub run_id: u32,
    pub mode: VehicleMode,
    pub records: Vec<ObdRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// When set, every row must carry this mode.
    pub expected_mode: Option<VehicleMode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SocColumn {
    Fraction(usize),
    Percent(usize),
}

struct Columns {
    run_id: usize,
    mode: usize,
    t: usize,
    maf: usize,
    soc: SocColumn,
    speed: usize,
}

impl Columns {
    fn from_header(header: &csv::StringRecord) -> Result<Self> {
        let find = |name: &str| header.iter().position(|h| h.trim() == name);
        let require = |name: &str| {
            find(name).ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
        };
        let soc = match (find("soc"), find("soc_pct")) {
            (Some(i), None) => SocColumn::Fraction(i),
            (None, Some(i)) => SocColumn::Percent(i),
            (Some(_), Some(_)) => {
                return Err(Error::Schema(
                    "exactly one of 'soc' or 'soc_pct' must be present, found both".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Schema(
                    "exactly one of 'soc' or 'soc_pct' must be present, found neither".into(),
                ))
            }
        };
        Ok(Columns {
            run_id: require("run_id")?,
            mode: require("mode")?,
            t: require("t")?,
            maf: require("maf_gps")?,
            soc,
            speed: require("speed_mps")?,
        })
    }
}

fn field<'r>(record: &'r csv::StringRecord, idx: usize, line: u64, name: &str) -> Result<&'r str> {
    record.get(idx).map(str::trim).ok_or_else(|| Error::Parse {
        line,
        message: format!("missing field '{name}'"),
    })
}

fn parse_num<T: FromStr>(raw: &str, line: u64, name: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse {name} from '{raw}'"),
    })
}

/// Parses a CSV stream into runs keyed by `(mode, run_id)`.
///
/// Timestamps must strictly increase within each run in file order.
pub fn load_runs<R: Read>(source: R, options: &IngestOptions) -> Result<Vec<Run>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(source);
    let columns = Columns::from_header(reader.headers()?)?;
    let width = reader.headers()?.len();

    let mut runs: BTreeMap<(VehicleMode, u32), Vec<ObdRecord>> = BTreeMap::new();
    let mut record = csv::StringRecord::new();
    loop {
        let more = reader.read_record(&mut record).map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::Parse {
                line,
                message: e.to_string(),
            }
        })?;
        if !more {
            break;
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != width {
            return Err(Error::Parse {
                line,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        let run_id: u32 = parse_num(
            field(&record, columns.run_id, line, "run_id")?,
            line,
            "run_id",
        )?;
        let mode: VehicleMode = field(&record, columns.mode, line, "mode")?
            .parse()
            .map_err(|e: Error| Error::Parse {
                line,
                message: e.to_string(),
            })?;
        if let Some(expected) = options.expected_mode {
            if mode != expected {
                return Err(Error::Validation(format!(
                    "line {line}: mode '{mode}' differs from expected '{expected}'"
                )));
            }
        }
        let timestamp: f64 = parse_num(field(&record, columns.t, line, "t")?, line, "t")?;
        let maf: f64 = parse_num(
            field(&record, columns.maf, line, "maf_gps")?,
            line,
            "maf_gps",
        )?;
        let soc = match columns.soc {
            SocColumn::Fraction(i) => {
                parse_num::<f64>(field(&record, i, line, "soc")?, line, "soc")?
            }
            SocColumn::Percent(i) => {
                parse_num::<f64>(field(&record, i, line, "soc_pct")?, line, "soc_pct")? / 100.0
            }
        };
        let speed: f64 = parse_num(
            field(&record, columns.speed, line, "speed_mps")?,
            line,
            "speed_mps",
        )?;

        let rec = ObdRecord {
            run_id,
            mode,
            timestamp,
            maf,
            soc,
            speed,
        };
        rec.validate()
            .map_err(|e| Error::Validation(format!("line {line}: {e}")))?;

        let bucket = runs.entry((mode, run_id)).or_default();
        if let Some(prev) = bucket.last() {
            if rec.timestamp <= prev.timestamp {
                return Err(Error::Validation(format!(
                    "run {run_id} ({mode}): timestamp {} at line {line} does not increase past {}",
                    rec.timestamp, prev.timestamp
                )));
            }
        }
        bucket.push(rec);
    }

    Ok(runs
        .into_iter()
        .map(|((mode, run_id), records)| Run {
            run_id,
            mode,
            records,
        })
        .collect())
}

pub fn load_runs_from_path(path: &Path, options: &IngestOptions) -> Result<Vec<Run>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    load_runs(std::io::BufReader::new(file), options).map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        Error::Schema(m) => Error::Schema(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// One file entry of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFile {
    /// Relative paths resolve against the manifest's directory.
    pub path: String,
    pub mode: VehicleMode,
}

/// JSON listing of CSV run files. Unknown keys are ignored so richer
/// manifests (such as the synthetic ones) load through the same type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub files: Vec<ManifestFile>,
}

impl DatasetManifest {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn resolve(&self, manifest_path: &Path) -> Vec<(PathBuf, VehicleMode)> {
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        self.files
            .iter()
            .map(|f| (base.join(&f.path), f.mode))
            .collect()
    }

    /// Loads every listed file. Duplicate `(mode, run_id)` across files is an
    /// error.
    pub fn load_runs(&self, manifest_path: &Path) -> Result<Vec<Run>> {
        let mut all: BTreeMap<(VehicleMode, u32), Run> = BTreeMap::new();
        for (path, mode) in self.resolve(manifest_path) {
            let opts = IngestOptions {
                expected_mode: Some(mode),
            };
            for run in load_runs_from_path(&path, &opts)? {
                let key = (run.mode, run.run_id);
                if all.contains_key(&key) {
                    return Err(Error::Validation(format!(
                        "run {} ({}) appears in more than one file",
                        run.run_id, run.mode
                    )));
                }
                all.insert(key, run);
            }
        }
        Ok(all.into_values().collect())
    }
}

/// One resampled tick: mass air flow integrated over `[t, t + dt)`, SOC and
/// speed sampled at the opening boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tick {
    pub t: usize,
    /// Grams over the tick.
    pub maf_integral: f64,
    pub soc: f64,
    pub speed: f64,
}

/// Signal values at the closing boundary of the last tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub soc: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySeries {
    pub run_id: u32,
    pub mode: VehicleMode,
    pub dt: f64,
    pub ticks: Vec<Tick>,
    /// SOC and speed at the end of the final tick. `None` means the last
    /// tick has no closing SOC and cannot produce a battery energy.
    pub end: Option<Boundary>,
}

impl TrajectorySeries {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Validation(format!(
                "dt must be > 0, got {}",
                self.dt
            )));
        }
        for (i, tick) in self.ticks.iter().enumerate() {
            if tick.t != i {
                return Err(Error::Validation(format!(
                    "run {}: tick indices must be contiguous from 0 (found {} at position {i})",
                    self.run_id, tick.t
                )));
            }
        }
        Ok(())
    }

    /// Encodes the series as raw records that resample back to the same
    /// ticks: boundary rows carry zero flow, and a mid-tick row carries
    /// `2 * maf_integral / dt` so the trapezoid over the window recovers the
    /// integral exactly. The closing boundary repeats the last speed when no
    /// end boundary is stored.
    pub fn to_records(&self) -> Vec<ObdRecord> {
        let mut out = Vec::with_capacity(self.ticks.len() * 2 + 1);
        let rec = |timestamp: f64, maf: f64, soc: f64, speed: f64| ObdRecord {
            run_id: self.run_id,
            mode: self.mode,
            timestamp,
            maf,
            soc,
            speed,
        };
        for (i, tick) in self.ticks.iter().enumerate() {
            let start = i as f64 * self.dt;
            let (next_soc, next_speed) = match self.ticks.get(i + 1) {
                Some(n) => (n.soc, n.speed),
                None => self
                    .end
                    .map(|b| (b.soc, b.speed))
                    .unwrap_or((tick.soc, tick.speed)),
            };
            out.push(rec(start, 0.0, tick.soc, tick.speed));
            out.push(rec(
                start + 0.5 * self.dt,
                2.0 * tick.maf_integral / self.dt,
                0.5 * (tick.soc + next_soc),
                0.5 * (tick.speed + next_speed),
            ));
        }
        let n = self.ticks.len();
        if let Some(last) = self.ticks.last() {
            let b = self.end.unwrap_or(Boundary {
                soc: last.soc,
                speed: last.speed,
            });
            out.push(rec(n as f64 * self.dt, 0.0, b.soc, b.speed));
        }
        out
    }
}

/// Piecewise-linear view of one signal over the record timestamps.
struct Signal<'a> {
    records: &'a [ObdRecord],
    get: fn(&ObdRecord) -> f64,
}

impl Signal<'_> {
    /// Index `j` of the segment `[t_j, t_{j+1}]` containing `x`, searching
    /// forward from `hint`.
    fn segment(&self, x: f64, hint: &mut usize) -> usize {
        let last = self.records.len() - 1;
        while *hint + 1 < last && self.records[*hint + 1].timestamp <= x {
            *hint += 1;
        }
        *hint
    }

    fn value_in(&self, j: usize, x: f64) -> f64 {
        let a = &self.records[j];
        let Some(b) = self.records.get(j + 1) else {
            return (self.get)(a);
        };
        let w = ((x - a.timestamp) / (b.timestamp - a.timestamp)).clamp(0.0, 1.0);
        (self.get)(a) * (1.0 - w) + (self.get)(b) * w
    }

    fn value_at(&self, x: f64, hint: &mut usize) -> f64 {
        let j = self.segment(x, hint);
        self.value_in(j, x)
    }

    /// Trapezoid integral over `[lo, hi]`, exact for the piecewise-linear
    /// interpolant.
    fn integral(&self, lo: f64, hi: f64, hint: &mut usize) -> f64 {
        let mut j = self.segment(lo, hint);
        let mut acc = 0.0;
        let mut x0 = lo;
        loop {
            let seg_end = self.records.get(j + 1).map_or(hi, |r| r.timestamp.min(hi));
            if seg_end > x0 {
                acc += 0.5 * (seg_end - x0) * (self.value_in(j, x0) + self.value_in(j, seg_end));
            }
            if seg_end >= hi || j + 2 >= self.records.len() {
                break;
            }
            x0 = seg_end;
            j += 1;
        }
        acc
    }
}

/// Number of whole ticks of width `dt` that fit in `span`.
pub fn tick_count(span: f64, dt: f64) -> usize {
    (span / dt + GRID_EPS).floor().max(0.0) as usize
}

/// Resamples one run onto a `dt` grid starting at its first timestamp.
/// A trailing partial window is dropped.
pub fn resample(records: &[ObdRecord], dt: f64) -> Result<TrajectorySeries> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt must be > 0, got {dt}")));
    }
    let first = records
        .first()
        .ok_or_else(|| Error::RunTooShort("run has no records".into()))?;
    if let Some(other) = records
        .iter()
        .find(|r| r.run_id != first.run_id || r.mode != first.mode)
    {
        return Err(Error::Validation(format!(
            "resample expects a single run, found run {} ({}) and run {} ({})",
            first.run_id, first.mode, other.run_id, other.mode
        )));
    }
    if records.windows(2).any(|w| w[1].timestamp <= w[0].timestamp) {
        return Err(Error::Validation(format!(
            "run {} ({}): timestamps must strictly increase",
            first.run_id, first.mode
        )));
    }

    let t0 = first.timestamp;
    let t_last = records[records.len() - 1].timestamp;
    let n_ticks = tick_count(t_last - t0, dt);
    if n_ticks == 0 {
        return Err(Error::RunTooShort(format!(
            "run {} ({}) spans {}s, shorter than dt = {dt}s",
            first.run_id,
            first.mode,
            t_last - t0
        )));
    }
    let boundary = |k: usize| (t0 + k as f64 * dt).min(t_last);

    let maf = Signal {
        records,
        get: |r| r.maf,
    };
    let soc = Signal {
        records,
        get: |r| r.soc,
    };
    let speed = Signal {
        records,
        get: |r| r.speed,
    };
    let (mut h_maf, mut h_soc, mut h_speed) = (0, 0, 0);

    let mut ticks = Vec::with_capacity(n_ticks);
    for k in 0..n_ticks {
        let lo = boundary(k);
        let hi = boundary(k + 1);
        ticks.push(Tick {
            t: k,
            maf_integral: maf.integral(lo, hi, &mut h_maf),
            soc: soc.value_at(lo, &mut h_soc),
            speed: speed.value_at(lo, &mut h_speed),
        });
    }
    let end_at = boundary(n_ticks);
    let end = Boundary {
        soc: soc.value_at(end_at, &mut h_soc),
        speed: speed.value_at(end_at, &mut h_speed),
    };

    Ok(TrajectorySeries {
        run_id: first.run_id,
        mode: first.mode,
        dt,
        ticks,
        end: Some(end),
    })
}

/// Writes records in the ingestion schema with `soc` as a fraction.
pub fn write_records<W: std::io::Write>(writer: W, records: &[ObdRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["run_id", "mode", "t", "maf_gps", "soc", "speed_mps"])?;
    for r in records {
        w.write_record([
            r.run_id.to_string(),
            r.mode.to_string(),
            r.timestamp.to_string(),
            r.maf.to_string(),
            r.soc.to_string(),
            r.speed.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}
