use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ctrio::cli::{self, RunOverrides};
use ctrio::config::{load_toml, RadarSource, RunConfig};
use ctrio::fgo::CalibrationMode;

#[derive(Parser)]
#[command(name = "ctrio", about = "Radar-inertial odometry with online spatiotemporal calibration")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    None,
    E,
    T,
    Et,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Scans,
    Egovel,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset from a TOML spec.
    Sim {
        spec: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run the estimator on a dataset directory.
    Run {
        /// Dataset directory (omit with --manifest).
        dataset: Option<PathBuf>,
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        calibration: Option<Mode>,
        /// Initial temporal offset, seconds.
        #[arg(long)]
        t_o: Option<f64>,
        #[arg(long, value_enum)]
        source: Option<Source>,
        #[arg(long)]
        two_workers: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated initial offsets, seconds; one run each.
        #[arg(long, value_delimiter = ',')]
        sweep: Option<Vec<f64>>,
        /// Replay the run recorded in a manifest.
        #[arg(long, conflicts_with_all = ["dataset", "config", "sweep"])]
        manifest: Option<PathBuf>,
    },
    /// Score a trajectory against a reference.
    Eval {
        estimate: PathBuf,
        reference: PathBuf,
        /// Simulated dataset whose rig supplies calibration truth.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Write a config that fixes the last calibration of a run.
    Reinject {
        calibration: PathBuf,
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn base_config(path: Option<&PathBuf>) -> ctrio::Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), |p| load_toml(p))
}

fn dispatch(args: Args) -> ctrio::Result<String> {
    match args.cmd {
        Cmd::Sim { spec, out } => {
            let m = cli::cmd_sim(&spec, &out)?;
            Ok(format!("dataset {} (seed {})", out.display(), m.seed))
        }
        Cmd::Run { dataset, config, out, calibration, t_o, source, two_workers, seed, sweep, manifest } => {
            if let Some(m) = manifest {
                cli::cmd_rerun(&m, &out)?;
                return Ok(format!("replayed into {}", out.display()));
            }
            let dataset = dataset.ok_or_else(|| ctrio::Error::MissingInput(PathBuf::from("<dataset>")))?;
            let overrides = RunOverrides {
                calibration: calibration.map(|m| match m {
                    Mode::None => CalibrationMode::None,
                    Mode::E => CalibrationMode::E,
                    Mode::T => CalibrationMode::T,
                    Mode::Et => CalibrationMode::ET,
                }),
                initial_t_o: t_o,
                radar_source: source.map(|s| match s {
                    Source::Scans => RadarSource::Scans,
                    Source::Egovel => RadarSource::Egovel,
                }),
                two_workers: two_workers.then_some(true),
                ransac_seed: seed,
            };
            let cfg = overrides.apply(base_config(config.as_ref())?);
            match sweep {
                Some(offsets) => {
                    cli::cmd_sweep(&dataset, &cfg, &offsets, &out)?;
                    Ok(format!("{} runs into {}", offsets.len(), out.display()))
                }
                None => {
                    let m = cli::cmd_run(&dataset, &cfg, &out)?;
                    Ok(format!("run into {} ({:?})", out.display(), m.counters))
                }
            }
        }
        Cmd::Eval { estimate, reference, dataset, out } => {
            let r = cli::cmd_eval(&estimate, &reference, dataset.as_deref(), &out)?;
            Ok(serde_json::to_string(&r)?)
        }
        Cmd::Reinject { calibration, config, out } => {
            cli::cmd_reinject(&calibration, &base_config(config.as_ref())?, &out)?;
            Ok(format!("config {}", out.display()))
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Args::parse()) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let rec = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{rec}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exec(args: &[&str]) -> ctrio::Result<String> {
        dispatch(Args::try_parse_from(std::iter::once("ctrio").chain(args.iter().copied())).unwrap())
    }

    #[test]
    fn subcommands_chain_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let p = |name: &str| dir.path().join(name).display().to_string();
        std::fs::write(p("spec.toml"), "[trajectory]\nkind = \"figure-eight\"\nduration = 8.0\n[rig]\ntrue_t_o = 0.03\n").unwrap();
        exec(&["sim", &p("spec.toml"), "-o", &p("data")]).unwrap();
        exec(&["run", &p("data"), "-o", &p("run"), "--source", "egovel", "--two-workers", "--t-o", "0.01"]).unwrap();
        let effective = std::fs::read_to_string(dir.path().join("run").join(cli::CONFIG_FILE)).unwrap();
        assert!(effective.contains("radar_source = \"egovel\"") && effective.contains("two_workers = true"));
        let report = exec(&[
            "eval",
            &p("run/trajectory.csv"),
            &p("data/truth.csv"),
            "--dataset",
            &p("data"),
            "-o",
            &p("eval"),
        ])
        .unwrap();
        assert!(report.contains("t_o_final_error"));
        exec(&["reinject", &p("run/calibration.csv"), "-o", &p("fixed.toml")]).unwrap();
        let fixed: RunConfig = load_toml(&dir.path().join("fixed.toml")).unwrap();
        assert_eq!(fixed.pipeline.calibration, CalibrationMode::None);
        exec(&["run", &p("data"), "-o", &p("sweep"), "--calibration", "t", "--sweep", "0,0.05"]).unwrap();
        assert!(dir.path().join("sweep").join(cli::SWEEP_FILE).exists());
    }

    #[test]
    fn errors_carry_a_kind() {
        let dir = tempfile::tempdir().unwrap();
        let err = exec(&["run", &dir.path().display().to_string(), "-o", "/dev/null/x"]).unwrap_err();
        assert_eq!(err.kind(), "missing_input");
        assert!(Args::try_parse_from(["ctrio", "run", "--calibration", "bogus", "-o", "x"]).is_err());
    }
}
