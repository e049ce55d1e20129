//! Reproducible workflows behind the `ctrio` subcommands: simulate a
//! dataset, run the estimator, evaluate a trajectory, re-inject a converged
//! calibration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{load_toml, parse_toml, RadarSource, RunConfig, SimSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, CalibrationEstimate, CalibrationTruth, EvalReport};
use crate::fgo::CalibrationMode;
use crate::io;
use crate::pipeline::{merge_events, run_single, run_threaded, CalibrationGuess, PipelineCounters, PipelineOutput};
use crate::sim::generate;

pub const IMU_FILE: &str = "imu.csv";
pub const RADAR_FILE: &str = "radar.csv";
pub const EGOVEL_FILE: &str = "egovel.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const CALIBRATION_FILE: &str = "calibration.csv";
pub const REPORTS_FILE: &str = "reports.jsonl";
pub const DISCONTINUITY_FILE: &str = "discontinuities.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVAL_FILE: &str = "eval_report.json";
pub const PAIRS_FILE: &str = "ape_pairs.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn hashes(dir: &Path, names: &[&str]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for n in names {
        let p = dir.join(n);
        if p.exists() {
            out.insert(n.to_string(), sha256_file(&p)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimManifest {
    pub seed: u64,
    /// Effective spec as TOML.
    pub spec: String,
    pub files: BTreeMap<String, String>,
}

impl SimManifest {
    pub fn spec(&self) -> Result<SimSpec> {
        parse_toml(&self.spec)
    }
}

pub fn read_sim_manifest(dataset: &Path) -> Result<SimManifest> {
    let p = dataset.join(MANIFEST_FILE);
    if !p.exists() {
        return Err(Error::MissingInput(p));
    }
    Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
}

/// Generates a dataset from a spec file into `out`.
pub fn cmd_sim(spec_path: &Path, out: &Path) -> Result<SimManifest> {
    let spec: SimSpec = load_toml(spec_path)?;
    sim_to_dir(&spec, out)
}

pub fn sim_to_dir(spec: &SimSpec, out: &Path) -> Result<SimManifest> {
    spec.validate()?;
    let data = generate(&spec.trajectory, &spec.rig)?;
    fs::create_dir_all(out)?;
    io::write_imu(&out.join(IMU_FILE), &data.imu)?;
    io::write_scans(&out.join(RADAR_FILE), &data.scans)?;
    io::write_egovel(&out.join(EGOVEL_FILE), &data.egovel)?;
    io::write_truth(&out.join(TRUTH_FILE), &data.truth_samples())?;
    let manifest = SimManifest {
        seed: spec.rig.seed,
        spec: spec.to_toml()?,
        files: hashes(out, &[IMU_FILE, RADAR_FILE, EGOVEL_FILE, TRUTH_FILE])?,
    };
    io::write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOverrides {
    pub calibration: Option<CalibrationMode>,
    pub initial_t_o: Option<f64>,
    pub radar_source: Option<RadarSource>,
    pub two_workers: Option<bool>,
    pub ransac_seed: Option<u64>,
}

impl RunOverrides {
    pub fn apply(&self, mut c: RunConfig) -> RunConfig {
        if let Some(m) = self.calibration {
            c.pipeline.calibration = m;
        }
        if let Some(t) = self.initial_t_o {
            c.pipeline.initial_calibration.t_o = t;
        }
        if let Some(s) = self.radar_source {
            c.radar_source = s;
        }
        if let Some(w) = self.two_workers {
            c.two_workers = w;
        }
        if let Some(s) = self.ransac_seed {
            c.pipeline.ransac.seed = s;
        }
        c
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub dataset: PathBuf,
    /// Effective config as TOML.
    pub config: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub counters: PipelineCounters,
}

pub fn read_run_manifest(path: &Path) -> Result<RunManifest> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Runs the estimator over the dataset in memory.
pub fn run_dataset(dataset: &Path, config: &RunConfig) -> Result<PipelineOutput> {
    config.validate()?;
    let imu = io::read_imu(&dataset.join(IMU_FILE))?;
    let events = match config.radar_source {
        RadarSource::Scans => merge_events(&imu, &io::read_scans(&dataset.join(RADAR_FILE), config.flip_doppler)?, &[]),
        RadarSource::Egovel => merge_events(&imu, &[], &io::read_egovel(&dataset.join(EGOVEL_FILE))?),
    };
    if config.two_workers {
        run_threaded(config.pipeline, &events)
    } else {
        run_single(config.pipeline, &events)
    }
}

fn input_names(config: &RunConfig) -> [&'static str; 2] {
    match config.radar_source {
        RadarSource::Scans => [IMU_FILE, RADAR_FILE],
        RadarSource::Egovel => [IMU_FILE, EGOVEL_FILE],
    }
}

/// One run: trajectory, calibration log, solver reports, effective config
/// and a manifest with input and output hashes.
pub fn cmd_run(dataset: &Path, config: &RunConfig, out: &Path) -> Result<RunManifest> {
    let output = run_dataset(dataset, config)?;
    fs::create_dir_all(out)?;
    io::write_trajectory(&out.join(TRAJECTORY_FILE), &output.trajectory)?;
    io::write_calibration(&out.join(CALIBRATION_FILE), &output.calibration)?;
    io::write_json_lines(&out.join(REPORTS_FILE), &output.reports)?;
    io::write_json_lines(&out.join(DISCONTINUITY_FILE), &output.discontinuities)?;
    let text = config.to_toml()?;
    fs::write(out.join(CONFIG_FILE), &text)?;
    let manifest = RunManifest {
        dataset: dataset.to_path_buf(),
        config: text,
        inputs: hashes(dataset, &input_names(config))?,
        outputs: hashes(out, &[TRAJECTORY_FILE, CALIBRATION_FILE, REPORTS_FILE, DISCONTINUITY_FILE])?,
        counters: output.counters,
    };
    io::write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Re-runs exactly what a manifest records, refusing changed inputs.
pub fn cmd_rerun(manifest_path: &Path, out: &Path) -> Result<RunManifest> {
    let m = read_run_manifest(manifest_path)?;
    let config: RunConfig = parse_toml(&m.config)?;
    let now = hashes(&m.dataset, &input_names(&config))?;
    if now != m.inputs {
        return Err(Error::Malformed {
            what: m.dataset.display().to_string(),
            message: "input files differ from the manifest".into(),
        });
    }
    cmd_run(&m.dataset, &config, out)
}

#[derive(Debug, Clone, Copy, Serialize)]
struct SweepRow {
    #[serde(rename = "init_t_O")]
    init_t_o: f64,
    t: f64,
    #[serde(rename = "t_O")]
    t_o: f64,
    ext_rot_deg: f64,
    ext_trans_m: f64,
}

/// One run per initial offset, each in `out/init_<ms>ms`, plus a combined
/// convergence CSV.
pub fn cmd_sweep(dataset: &Path, config: &RunConfig, initial_offsets: &[f64], out: &Path) -> Result<Vec<RunManifest>> {
    fs::create_dir_all(out)?;
    let mut manifests = Vec::new();
    let mut w = csv::Writer::from_path(out.join(SWEEP_FILE))?;
    for &t0 in initial_offsets {
        let mut c = *config;
        c.pipeline.initial_calibration.t_o = t0;
        let sub = out.join(format!("init_{:.1}ms", t0 * 1e3));
        manifests.push(cmd_run(dataset, &c, &sub)?);
        for r in io::read_calibration(&sub.join(CALIBRATION_FILE))? {
            let phi = r.r_ir.log();
            w.serialize(SweepRow {
                init_t_o: t0,
                t: r.t,
                t_o: r.t_o,
                ext_rot_deg: phi.norm().to_degrees(),
                ext_trans_m: r.p_ir.norm(),
            })?;
        }
    }
    w.flush()?;
    Ok(manifests)
}

/// Evaluates a trajectory against a reference. With `dataset` given, the
/// final calibration is scored against the simulated truth.
pub fn cmd_eval(estimate: &Path, reference: &Path, dataset: Option<&Path>, out: &Path) -> Result<EvalReport> {
    let est = io::read_poses(estimate)?;
    let reference_poses = io::read_poses(reference)?;
    let calibration = match dataset {
        Some(d) => {
            let rig = read_sim_manifest(d)?.spec()?.rig;
            let traj = io::read_trajectory(estimate)?;
            let last = traj.last().ok_or_else(|| Error::Malformed {
                what: estimate.display().to_string(),
                message: "empty trajectory".into(),
            })?;
            Some((
                CalibrationEstimate { t_o: last.t_o, r_ir: last.r_ir, p_ir: last.p_ir },
                CalibrationTruth { t_o: rig.true_t_o, r_ir: rig.r_ir(), p_ir: rig.p_ir() },
            ))
        }
        None => None,
    };
    let (report, pairs) = evaluate(&est, &reference_poses, calibration)?;
    fs::create_dir_all(out)?;
    io::write_json(&out.join(EVAL_FILE), &report)?;
    let mut w = csv::Writer::from_path(out.join(PAIRS_FILE))?;
    for p in pairs {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(report)
}

/// Config with the last calibration of `calibration_csv` as fixed initial
/// values and calibration estimation switched off.
pub fn reinjected(calibration_csv: &Path, base: &RunConfig) -> Result<RunConfig> {
    let recs = io::read_calibration(calibration_csv)?;
    let last = recs.last().ok_or_else(|| Error::Malformed {
        what: calibration_csv.display().to_string(),
        message: "no calibration records".into(),
    })?;
    let phi = last.r_ir.log();
    let mut c = *base;
    c.pipeline.calibration = CalibrationMode::None;
    c.pipeline.initial_calibration =
        CalibrationGuess { r_ir: [phi.x, phi.y, phi.z], p_ir: [last.p_ir.x, last.p_ir.y, last.p_ir.z], t_o: last.t_o };
    c.validate()?;
    Ok(c)
}

pub fn cmd_reinject(calibration_csv: &Path, base: &RunConfig, out: &Path) -> Result<RunConfig> {
    let c = reinjected(calibration_csv, base)?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, c.to_toml()?)?;
    Ok(c)
}
