//! Synthetic datasets with known ground truth.
//!
//! Speeds come from a bounded mean-reverting random walk, per-tick energy
//! from a truth model plus Gaussian noise, and the energy is then inverted
//! back into raw MAF/SOC/speed records so the forward pipeline can be
//! checked against the values that produced them.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::consumption_models::{
    aamicro_pos_slot, aamicro_slot, ModelCoefficients, ModelKind, AAMICRO_BASIS,
};
use crate::energy_pipeline::{accelerations, PowertrainParams};
use crate::error::{Error, Result};
use crate::trajectory_store::{
    write_records, Boundary, ManifestFile, Tick, TrajectorySeries, VehicleMode,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_runs: u32,
    pub run_length: usize,
    /// Seconds per tick.
    pub dt: f64,
    /// m/s, `[low, high]`.
    pub speed_bounds: [f64; 2],
    /// Pull toward the midpoint per tick.
    pub speed_reversion: f64,
    /// m/s per tick.
    pub speed_sigma: f64,
    pub truth_acc: ModelCoefficients,
    pub truth_hv: ModelCoefficients,
    /// Noise standard deviation as a fraction of the mode's mean |J|.
    pub noise_rel_acc: f64,
    pub noise_rel_hv: f64,
    pub battery_share: f64,
    pub regen_share: f64,
    pub initial_soc: f64,
    pub powertrain: PowertrainParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            n_runs: 9,
            run_length: 300,
            dt: 1.0,
            speed_bounds: [8.941, 17.778],
            speed_reversion: 0.1,
            speed_sigma: 0.8,
            truth_acc: default_truth_acc(),
            truth_hv: default_truth_hv(),
            noise_rel_acc: 0.05,
            noise_rel_hv: 0.10,
            battery_share: 0.1,
            regen_share: 1.0,
            initial_soc: 0.55,
            powertrain: PowertrainParams::default(),
        }
    }
}

/// AA-Micro truth: an exponential in speed and acceleration with a steeper
/// exponent under positive acceleration, plus linear acceleration terms that
/// turn the total negative under hard braking.
pub fn default_truth_acc() -> ModelCoefficients {
    let mut lin = [0.0; AAMICRO_BASIS];
    let mut exp = [0.0; AAMICRO_BASIS];
    lin[aamicro_slot(0, 1)] = 5_000.0;
    lin[aamicro_slot(1, 1)] = 300.0;
    exp[aamicro_slot(0, 0)] = 7.0;
    exp[aamicro_slot(1, 0)] = 0.2;
    exp[aamicro_slot(0, 1)] = 0.5;
    exp[aamicro_pos_slot(0, 1)] = 0.7;
    ModelCoefficients::aamicro(lin, exp)
}

/// ARRB truth with a cubic speed term.
pub fn default_truth_hv() -> ModelCoefficients {
    ModelCoefficients::new(
        ModelKind::Arrb,
        vec![5_000.0, 800.0, -20.0, 2.5, 400.0, 300.0],
    )
    .expect("six ARRB coefficients")
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.n_runs == 0 {
            return bad("n_runs must be at least 1".into());
        }
        if self.run_length < 3 {
            return bad(format!(
                "run_length must be at least 3, got {}",
                self.run_length
            ));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad(format!("dt must be > 0, got {}", self.dt));
        }
        let [lo, hi] = self.speed_bounds;
        if !(lo.is_finite() && hi.is_finite() && lo < hi && lo >= 0.0) {
            return bad(format!(
                "speed bounds must satisfy 0 <= low < high, got [{lo}, {hi}]"
            ));
        }
        for (name, x) in [
            ("speed_reversion", self.speed_reversion),
            ("battery_share", self.battery_share),
            ("regen_share", self.regen_share),
            ("initial_soc", self.initial_soc),
        ] {
            if !(0.0..=1.0).contains(&x) {
                return bad(format!("{name} must be in [0, 1], got {x}"));
            }
        }
        for (name, x) in [
            ("speed_sigma", self.speed_sigma),
            ("noise_rel_acc", self.noise_rel_acc),
            ("noise_rel_hv", self.noise_rel_hv),
        ] {
            if !(x.is_finite() && x >= 0.0) {
                return bad(format!("{name} must be a non-negative number, got {x}"));
            }
        }
        self.truth_acc.validate()?;
        self.truth_hv.validate()?;
        self.powertrain.validate()
    }

    /// Same config with the HV side replaced by the ACC truth and noise, so
    /// both modes come from one process.
    pub fn null_control(&self) -> Self {
        Self {
            truth_hv: self.truth_acc.clone(),
            noise_rel_hv: self.noise_rel_acc,
            ..self.clone()
        }
    }

    pub fn truth(&self, mode: VehicleMode) -> &ModelCoefficients {
        match mode {
            VehicleMode::Acc => &self.truth_acc,
            VehicleMode::Hv => &self.truth_hv,
        }
    }

    pub fn noise_rel(&self, mode: VehicleMode) -> f64 {
        match mode {
            VehicleMode::Acc => self.noise_rel_acc,
            VehicleMode::Hv => self.noise_rel_hv,
        }
    }
}

/// Splitmix64 of `seed` mixed with a stream index.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z =
        (seed ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn run_stream(mode: VehicleMode, run_id: u32, purpose: u64) -> u64 {
    let m = match mode {
        VehicleMode::Acc => 1u64,
        VehicleMode::Hv => 2,
    };
    (m << 40) | (u64::from(run_id) << 8) | purpose
}

pub fn speed_seed(config: &SynthConfig, mode: VehicleMode, run_id: u32) -> u64 {
    derive_seed(config.seed, run_stream(mode, run_id, 0))
}

pub fn noise_seed(config: &SynthConfig, mode: VehicleMode, run_id: u32) -> u64 {
    derive_seed(config.seed, run_stream(mode, run_id, 1))
}

fn reflect(mut v: f64, lo: f64, hi: f64) -> f64 {
    for _ in 0..64 {
        if v > hi {
            v = 2.0 * hi - v;
        } else if v < lo {
            v = 2.0 * lo - v;
        } else {
            return v;
        }
    }
    v.clamp(lo, hi)
}

/// `run_length` speeds starting at the midpoint of the bounds. Innovations
/// are uniform with unit variance, so accelerations stay bounded and every
/// run covers the same speed/acceleration region.
pub fn gen_speed_profile(config: &SynthConfig, seed: u64) -> Vec<f64> {
    let [lo, hi] = config.speed_bounds;
    let mu = 0.5 * (lo + hi);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = 3f64.sqrt();
    let innovation = Uniform::new_inclusive(-half, half).expect("valid range");
    let mut v = mu;
    let mut out = Vec::with_capacity(config.run_length);
    for _ in 0..config.run_length {
        out.push(v);
        let xi: f64 = innovation.sample(&mut rng);
        v = reflect(
            v + config.speed_reversion * (mu - v) + config.speed_sigma * xi,
            lo,
            hi,
        );
    }
    out
}

fn routing_accels(speeds: &[f64], dt: f64) -> Result<Vec<f64>> {
    Ok(accelerations(speeds, dt)?
        .into_iter()
        .map(|a| a.unwrap_or(0.0))
        .collect())
}

/// Noise-free truth energy per tick. Tick 0 has no previous speed and is
/// evaluated at zero acceleration.
pub fn truth_energy(truth: &ModelCoefficients, speeds: &[f64], dt: f64) -> Result<Vec<f64>> {
    if speeds.len() < 2 {
        return Err(Error::RunTooShort(format!(
            "need at least 2 speeds, got {}",
            speeds.len()
        )));
    }
    let accel = routing_accels(speeds, dt)?;
    Ok(speeds
        .iter()
        .zip(&accel)
        .map(|(&v, &a)| truth.predict(v, a))
        .collect())
}

/// Truth energy plus `N(0, noise_sigma)` per tick.
pub fn gen_energy(
    truth: &ModelCoefficients,
    speeds: &[f64],
    dt: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut j = truth_energy(truth, speeds, dt)?;
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in &mut j {
            let xi: f64 = StandardNormal.sample(&mut rng);
            *x += noise_sigma * xi;
        }
    }
    Ok(j)
}

/// Splits a tick's demand into `(engine_j, battery_j)`. Positive demand
/// sends `battery_share` to the battery. Negative demand while braking
/// recovers only `regen_share` of it; the rest is lost to the friction
/// brakes and never shows up in the signals. Any other negative demand is
/// charged to the battery in full.
pub fn route_energy(j: f64, a: f64, config: &SynthConfig) -> (f64, f64) {
    if j >= 0.0 {
        let battery_j = config.battery_share * j;
        (j - battery_j, battery_j)
    } else if a < 0.0 {
        (0.0, config.regen_share * j)
    } else {
        (0.0, j)
    }
}

/// Energy the signals will carry for a tick, after braking losses.
pub fn recorded_energy(j: f64, a: f64, config: &SynthConfig) -> f64 {
    let (engine_j, battery_j) = route_energy(j, a, config);
    engine_j + battery_j
}

/// Turns per-tick energy back into MAF integrals and an SOC trajectory.
pub fn invert_to_obd(
    energy: &[f64],
    speeds: &[f64],
    config: &SynthConfig,
    run_id: u32,
    mode: VehicleMode,
) -> Result<TrajectorySeries> {
    if energy.len() != speeds.len() {
        return Err(Error::InvalidInput(format!(
            "{} energies for {} speeds",
            energy.len(),
            speeds.len()
        )));
    }
    if speeds.len() < 2 {
        return Err(Error::RunTooShort(format!(
            "need at least 2 ticks, got {}",
            speeds.len()
        )));
    }
    let p = &config.powertrain;
    let accel = routing_accels(speeds, config.dt)?;
    let mut soc = config.initial_soc;
    let mut ticks = Vec::with_capacity(speeds.len());
    for (t, ((&j, &v), &a)) in energy.iter().zip(speeds).zip(&accel).enumerate() {
        let (engine_j, battery_j) = route_energy(j, a, config);
        if engine_j < 0.0 {
            return Err(Error::Solver(format!(
                "internal error: negative engine energy {engine_j} at tick {t}"
            )));
        }
        ticks.push(Tick {
            t,
            maf_integral: engine_j / p.joules_per_air_gram(),
            soc,
            speed: v,
        });
        soc -= battery_j / p.joules_per_soc();
        if !(0.0..=1.0).contains(&soc) {
            return Err(Error::Domain(format!(
                "run {run_id} ({mode}): SOC leaves [0, 1] after tick {t} ({soc}); \
                 use a larger battery, a smaller battery share or a shorter run"
            )));
        }
    }
    Ok(TrajectorySeries {
        run_id,
        mode,
        dt: config.dt,
        ticks,
        end: Some(Boundary {
            soc,
            speed: *speeds.last().expect("non-empty"),
        }),
    })
}

/// Ground truth of one generated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTruth {
    pub run_id: u32,
    pub mode: VehicleMode,
    pub path: String,
    pub speed_seed: u64,
    pub noise_seed: u64,
    /// Joules.
    pub noise_sigma: f64,
    /// Per-tick energy as encoded in the records: noise included, braking
    /// losses removed.
    pub energy_j: Vec<f64>,
    /// Per-tick truth-model energy without noise.
    pub clean_energy_j: Vec<f64>,
}

/// `manifest.json` of a synthetic dataset. The `files` list makes it a
/// valid dataset manifest for ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub tool_version: String,
    pub files: Vec<ManifestFile>,
    pub config: SynthConfig,
    pub runs: Vec<RunTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub series: Vec<TrajectorySeries>,
    pub manifest: SynthManifest,
}

pub fn run_file_name(mode: VehicleMode, run_id: u32) -> String {
    format!("{mode}_run{run_id:02}.csv")
}

/// Noise standard deviation of a mode: `noise_rel` times the mean |J| of
/// the noise-free energy over all of that mode's runs, so every run of a
/// mode shares one sigma.
pub fn mode_noise_sigma(config: &SynthConfig, mode: VehicleMode) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for run_id in 1..=config.n_runs {
        let speeds = gen_speed_profile(config, speed_seed(config, mode, run_id));
        let clean = truth_energy(config.truth(mode), &speeds, config.dt)?;
        total += clean.iter().map(|x| x.abs()).sum::<f64>();
        count += clean.len();
    }
    Ok(config.noise_rel(mode) * total / count as f64)
}

/// Generates one run with the given noise level: speeds, energy and the
/// inverted series.
pub fn generate_run(
    config: &SynthConfig,
    mode: VehicleMode,
    run_id: u32,
    noise_sigma: f64,
) -> Result<(TrajectorySeries, RunTruth)> {
    let s_seed = speed_seed(config, mode, run_id);
    let n_seed = noise_seed(config, mode, run_id);
    let speeds = gen_speed_profile(config, s_seed);
    let clean = truth_energy(config.truth(mode), &speeds, config.dt)?;
    let energy = gen_energy(config.truth(mode), &speeds, config.dt, noise_sigma, n_seed)?;
    let series = invert_to_obd(&energy, &speeds, config, run_id, mode)?;
    let accel = routing_accels(&speeds, config.dt)?;
    let energy = energy
        .iter()
        .zip(&accel)
        .map(|(&j, &a)| recorded_energy(j, a, config))
        .collect();
    let truth = RunTruth {
        run_id,
        mode,
        path: run_file_name(mode, run_id),
        speed_seed: s_seed,
        noise_seed: n_seed,
        noise_sigma,
        energy_j: energy,
        clean_energy_j: clean,
    };
    Ok((series, truth))
}

/// All runs of both modes, in memory.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let mut series = Vec::new();
    let mut runs = Vec::new();
    for mode in VehicleMode::ALL {
        let sigma = mode_noise_sigma(config, mode)?;
        for run_id in 1..=config.n_runs {
            let (s, t) = generate_run(config, mode, run_id, sigma)?;
            series.push(s);
            runs.push(t);
        }
    }
    let files = runs
        .iter()
        .map(|r| ManifestFile {
            path: r.path.clone(),
            mode: r.mode,
        })
        .collect();
    Ok(SynthDataset {
        series,
        manifest: SynthManifest {
            tool_version: crate::TOOL_VERSION.to_string(),
            files,
            config: config.clone(),
            runs,
        },
    })
}

/// Generates the dataset and writes one CSV per run plus `manifest.json`
/// into `dir`.
pub fn make_dataset(config: &SynthConfig, dir: &Path) -> Result<SynthManifest> {
    let data = generate(config)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (series, truth) in data.series.iter().zip(&data.manifest.runs) {
        let path = dir.join(&truth.path);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_records(std::io::BufWriter::new(file), &series.to_records())?;
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&data.manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(data.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy_pipeline::build_samples;
    use proptest::prelude::*;

    fn arrb(theta: [f64; 6]) -> ModelCoefficients {
        ModelCoefficients::new(ModelKind::Arrb, theta.to_vec()).unwrap()
    }

    #[test]
    fn noiseless_walk_is_constant() {
        let config = SynthConfig {
            speed_sigma: 0.0,
            ..SynthConfig::default()
        };
        let v = gen_speed_profile(&config, 3);
        let mu = 0.5 * (8.941 + 17.778);
        assert_eq!(v.len(), 300);
        assert!(v.iter().all(|&x| x == mu));
    }

    #[test]
    fn constant_model_energy() {
        let speeds = [10.0, 11.0, 12.5, 12.0];
        let j = gen_energy(
            &arrb([25_000.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            &speeds,
            1.0,
            0.0,
            1,
        )
        .unwrap();
        assert_eq!(j, vec![25_000.0; 4]);

        let j = gen_energy(
            &arrb([0.0, 0.0, 0.0, 0.0, 500.0, 0.0]),
            &[12.0; 5],
            1.0,
            0.0,
            1,
        )
        .unwrap();
        assert!(j.iter().all(|&x| x == 0.0));

        let truth = default_truth_hv();
        let a = gen_energy(&truth, &speeds, 1.0, 300.0, 9).unwrap();
        assert_eq!(a, gen_energy(&truth, &speeds, 1.0, 300.0, 9).unwrap());
        assert_ne!(a, gen_energy(&truth, &speeds, 1.0, 300.0, 10).unwrap());
        assert!(gen_energy(&truth, &[10.0], 1.0, 0.0, 1).is_err());
    }

    #[test]
    fn inversion_examples() {
        let full_battery = SynthConfig {
            battery_share: 1.0,
            ..SynthConfig::default()
        };
        let s = invert_to_obd(
            &[0.0, 25_200.0],
            &[10.0, 10.0],
            &full_battery,
            1,
            VehicleMode::Acc,
        )
        .unwrap();
        assert_eq!(s.ticks[1].maf_integral, 0.0);
        assert!((s.ticks[1].soc - s.end.unwrap().soc - 0.01).abs() < 1e-15);

        let engine_only = SynthConfig {
            battery_share: 0.0,
            ..SynthConfig::default()
        };
        let s = invert_to_obd(
            &[0.0, 1197.279],
            &[10.0, 10.0],
            &engine_only,
            1,
            VehicleMode::Acc,
        )
        .unwrap();
        assert!((s.ticks[1].maf_integral - 1.0).abs() < 1e-6);
        assert_eq!(s.ticks[1].soc, s.end.unwrap().soc);

        let s = invert_to_obd(
            &[0.0, -10_000.0],
            &[12.0, 10.0],
            &SynthConfig::default(),
            1,
            VehicleMode::Hv,
        )
        .unwrap();
        assert_eq!(s.ticks[1].maf_integral, 0.0);
        assert!(s.end.unwrap().soc > s.ticks[1].soc);
    }

    #[test]
    fn soc_exit_is_reported() {
        let config = SynthConfig {
            battery_share: 1.0,
            initial_soc: 0.01,
            ..SynthConfig::default()
        };
        let err =
            invert_to_obd(&[30_000.0; 4], &[10.0; 4], &config, 3, VehicleMode::Acc).unwrap_err();
        assert!(err.to_string().contains("SOC"), "{err}");
    }

    #[test]
    fn round_trip_recovers_energy() {
        let config = SynthConfig::default();
        let (series, truth) = generate_run(&config, VehicleMode::Acc, 1, 0.0).unwrap();
        let samples = build_samples(&series, &config.powertrain).unwrap();
        assert_eq!(samples.len(), config.run_length - 1);
        let speeds: Vec<f64> = series.ticks.iter().map(|t| t.speed).collect();
        for s in &samples {
            let j = truth.energy_j[s.t];
            assert!(
                (s.total_j - j).abs() <= 1e-9 * j.abs().max(1.0),
                "tick {}",
                s.t
            );
            assert_eq!(s.speed, speeds[s.t]);
            assert_eq!(s.accel, speeds[s.t] - speeds[s.t - 1]);
        }
    }

    #[test]
    fn default_dataset_shape() {
        let data = generate(&SynthConfig::default()).unwrap();
        assert_eq!(data.series.len(), 18);
        assert_eq!(data.manifest.files.len(), 18);
        assert_eq!(data.manifest.files[0].path, "acc_run01.csv");
        assert_eq!(data.manifest.files[17].path, "hv_run09.csv");
        assert_eq!(data, generate(&SynthConfig::default()).unwrap());
    }

    #[test]
    fn config_validation() {
        let ok = SynthConfig::default();
        assert!(ok.validate().is_ok());
        for broken in [
            SynthConfig {
                n_runs: 0,
                ..ok.clone()
            },
            SynthConfig {
                run_length: 2,
                ..ok.clone()
            },
            SynthConfig {
                speed_bounds: [17.0, 9.0],
                ..ok.clone()
            },
            SynthConfig {
                battery_share: 1.5,
                ..ok.clone()
            },
            SynthConfig {
                regen_share: -0.1,
                ..ok.clone()
            },
        ] {
            assert!(broken.validate().is_err());
        }
    }

    #[test]
    fn seeds_differ_by_stream() {
        let c = SynthConfig::default();
        let mut seeds = std::collections::BTreeSet::new();
        for mode in VehicleMode::ALL {
            for r in 1..=9 {
                assert!(seeds.insert(speed_seed(&c, mode, r)));
                assert!(seeds.insert(noise_seed(&c, mode, r)));
            }
        }
    }

    proptest! {
        #[test]
        fn speeds_stay_in_bounds(seed in any::<u64>(), sigma in 0.0f64..5.0) {
            let c = SynthConfig { speed_sigma: sigma, run_length: 200, ..SynthConfig::default() };
            let v = gen_speed_profile(&c, seed);
            prop_assert!(v.iter().all(|&x| (8.941..=17.778).contains(&x)));
            prop_assert_eq!(v, gen_speed_profile(&c, seed));
        }

        #[test]
        fn split_conserves_energy(
            energy in prop::collection::vec(-20_000.0f64..60_000.0, 2..100),
            beta in 0.0f64..0.05,
            regen in 0.0f64..=1.0,
        ) {
            let n = energy.len();
            let speeds: Vec<f64> = (0..n).map(|i| 12.0 + ((i * 7) % 5) as f64 * 0.3).collect();
            let config = SynthConfig { battery_share: beta, regen_share: regen, ..SynthConfig::default() };
            let series = invert_to_obd(&energy, &speeds, &config, 1, VehicleMode::Acc).unwrap();
            let samples = build_samples(&series, &config.powertrain).unwrap();
            let accel = routing_accels(&speeds, 1.0).unwrap();
            let recorded: Vec<f64> = energy.iter().zip(&accel).map(|(&j, &a)| recorded_energy(j, a, &config)).collect();
            let eng: f64 = samples.iter().map(|s| s.engine_j).sum();
            let bat: f64 = samples.iter().map(|s| s.battery_j).sum();
            prop_assert!(samples.iter().all(|s| s.engine_j >= 0.0));
            let total: f64 = recorded[1..].iter().sum();
            let scale: f64 = energy.iter().map(|x| x.abs()).sum();
            prop_assert!((eng + bat - total).abs() <= 1e-9 * scale.max(1.0));
            if regen == 1.0 {
                prop_assert_eq!(&recorded, &energy);
            }
        }
    }
}
