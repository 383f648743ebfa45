//! Configuration loading, sweep execution, and result emission.
//!
//! The config file is flat-key JSON; every absent key falls back to the
//! 120 GHz reference setup (desk-scale panels by default, full-scale
//! behind `--full-scale`). Results land as `metrics.csv` (one row per
//! sweep cell), a `manifest.json` echoing every resolved key, and a
//! per-trial `trials.csv` when verbose. All files are written to a
//! temporary name first and renamed into place, so failed runs never
//! leave partial artifacts.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::Parser;
use serde_json::{json, Map, Value};

use crate::dma::MicrostripParams;
use crate::estimation::SearchGrid;
use crate::geometry::ArrayLayout;
use crate::simulate::{
    dbm_to_watts, run_experiment, thermal_noise_dbm, MetricsRecord, ScenarioDist, SimConfig,
    TrialRow,
};
use crate::{Error, Result};

/// Command-line flags. Flags override config-file values; `--full-scale`
/// only changes the defaults, so explicit config keys still win.
#[derive(Parser, Debug, Clone)]
#[command(name = "isac-sim", version, about = "Near-field sensing and downlink sweep for a full-duplex metasurface node")]
pub struct CliArgs {
    /// JSON config file with flat keys; absent keys use defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for metrics.csv, manifest.json, and trials.csv.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the trial count per sweep cell.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Full-scale defaults: 512 elements per microstrip and a coarse
    /// three-axis search grid.
    #[arg(long)]
    pub full_scale: bool,
    /// Also writes per-trial rows to trials.csv.
    #[arg(long)]
    pub verbose: bool,
}

/// Flag-level overrides applied during config resolution.
#[derive(Debug, Default, Clone, Copy)]
pub struct ConfigOverrides {
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub full_scale: bool,
}

fn config_err(key: &str, reason: impl std::fmt::Display) -> Error {
    Error::Config(format!("key `{key}`: {reason}"))
}

fn take_f64(map: &mut Map<String, Value>, key: &str, default: f64) -> Result<f64> {
    match map.remove(key) {
        None => Ok(default),
        Some(Value::Number(n)) => {
            n.as_f64().ok_or_else(|| config_err(key, "not representable as a float"))
        }
        Some(other) => Err(config_err(key, format!("expected a number, got {other}"))),
    }
}

fn take_usize(map: &mut Map<String, Value>, key: &str, default: usize) -> Result<usize> {
    match map.remove(key) {
        None => Ok(default),
        Some(Value::Number(n)) => n
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| config_err(key, "expected a nonnegative integer")),
        Some(other) => Err(config_err(key, format!("expected an integer, got {other}"))),
    }
}

fn take_u64(map: &mut Map<String, Value>, key: &str, default: u64) -> Result<u64> {
    match map.remove(key) {
        None => Ok(default),
        Some(Value::Number(n)) => {
            n.as_u64().ok_or_else(|| config_err(key, "expected a nonnegative integer"))
        }
        Some(other) => Err(config_err(key, format!("expected an integer, got {other}"))),
    }
}

fn take_f64_array(map: &mut Map<String, Value>, key: &str, default: &[f64]) -> Result<Vec<f64>> {
    match map.remove(key) {
        None => Ok(default.to_vec()),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_f64().ok_or_else(|| config_err(key, format!("non-numeric entry {v}")))
            })
            .collect(),
        Some(other) => Err(config_err(key, format!("expected an array, got {other}"))),
    }
}

fn take_usize_array(
    map: &mut Map<String, Value>,
    key: &str,
    default: &[usize],
) -> Result<Vec<usize>> {
    match map.remove(key) {
        None => Ok(default.to_vec()),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_u64()
                    .map(|u| u as usize)
                    .ok_or_else(|| config_err(key, format!("non-integer entry {v}")))
            })
            .collect(),
        Some(other) => Err(config_err(key, format!("expected an array, got {other}"))),
    }
}

fn positive_step(key: &str, step: f64) -> Result<f64> {
    if step > 0.0 {
        Ok(step)
    } else {
        Err(config_err(key, format!("step must be positive, got {step}")))
    }
}

/// Resolves flat-key JSON (or nothing) plus flag overrides into a full
/// [`SimConfig`] and an echo map holding every key's effective value in
/// config-file units. The echo is itself a valid config reproducing the
/// run, and unknown keys are rejected by name.
pub fn resolve_config(
    raw: Option<&str>,
    overrides: &ConfigOverrides,
) -> Result<(SimConfig, Map<String, Value>)> {
    let mut map: Map<String, Value> = match raw {
        None => Map::new(),
        Some(text) => match serde_json::from_str(text)? {
            Value::Object(map) => map,
            other => {
                return Err(Error::Config(format!(
                    "config must be a JSON object of flat keys, got {other}"
                )))
            }
        },
    };

    // Geometry. Carrier 120 GHz; desk-scale panels unless the full-scale
    // flag raises the default element count.
    let lambda = take_f64(&mut map, "lambda_m", 0.0025)?;
    let n_e = take_usize(&mut map, "n_e", if overrides.full_scale { 512 } else { 64 })?;
    let d_e = take_f64(&mut map, "d_e_m", lambda / 5.0)?;
    let d_rf = take_f64(&mut map, "d_rf_m", lambda / 2.0)?;
    let d_p = take_f64(&mut map, "d_p_m", 0.02)?;
    let kappa_abs = take_f64(&mut map, "kappa_abs", 0.0033)?;
    let b_gain = take_f64(&mut map, "b_gain", 2.0)?;

    // Sweep axes and protocol sizes.
    let n_rf_grid = take_usize_array(&mut map, "n_rf_grid", &[4])?;
    let p_max_grid = take_f64_array(&mut map, "p_max_grid_dbm", &[-10.0, 0.0, 10.0, 20.0])?;
    let t_slots = take_usize(&mut map, "t_slots", 200)?;
    let trials = overrides.trials.map(Ok).unwrap_or_else(|| take_usize(&mut map, "trials", 20))?;
    map.remove("trials");
    let k_targets = take_usize(&mut map, "k_targets", 3)?;
    let u_users = take_usize(&mut map, "u_users", 2)?;
    let l_antennas = take_usize(&mut map, "l_antennas", 2)?;
    let ue_spacing = take_f64(&mut map, "ue_spacing_m", lambda / 2.0)?;
    let codebook_bits = take_usize(&mut map, "codebook_bits", 6)? as u32;

    // Powers. The residual-SI threshold converts to linear exactly once,
    // here; the sweep budgets and noise stay in dBm as reporting labels.
    let bandwidth_hz = take_f64(&mut map, "bandwidth_hz", 150e3)?;
    let noise_dbm = take_f64(&mut map, "noise_dbm", thermal_noise_dbm(bandwidth_hz))?;
    let (gamma, gamma_echo) = match map.remove("gamma_dbm") {
        None => (dbm_to_watts(-110.0), json!(-110.0)),
        Some(Value::Number(n)) => {
            let dbm =
                n.as_f64().ok_or_else(|| config_err("gamma_dbm", "not representable"))?;
            (dbm_to_watts(dbm), json!(dbm))
        }
        Some(Value::String(s)) if s.eq_ignore_ascii_case("inf") => (f64::INFINITY, json!("inf")),
        Some(other) => {
            return Err(config_err("gamma_dbm", format!("expected dBm or \"inf\", got {other}")))
        }
    };
    let seed = overrides.seed.unwrap_or(take_u64(&mut map, "seed", 1)?);
    map.remove("seed");

    // Scene distribution, degrees in the file, radians inside.
    let azimuth_deg = take_f64(&mut map, "azimuth_deg", 90.0)?;
    let range_min = take_f64(&mut map, "range_min_m", 1.0)?;
    let range_max = take_f64(&mut map, "range_max_m", 25.0)?;
    let elev_min_deg = take_f64(&mut map, "elev_min_deg", 0.0)?;
    let elev_max_deg = take_f64(&mut map, "elev_max_deg", 90.0)?;

    // Search grid. Desk scale searches range and elevation at fixed
    // azimuth; full scale (or any grid_azim_* key) opens the third axis.
    let (r_step_default, e_step_default) =
        if overrides.full_scale { (0.5, 2.0) } else { (0.1, 0.5) };
    let grid_r_min = take_f64(&mut map, "grid_r_min_m", 1.0)?;
    let grid_r_max = take_f64(&mut map, "grid_r_max_m", 25.0)?;
    let grid_r_step =
        positive_step("grid_r_step_m", take_f64(&mut map, "grid_r_step_m", r_step_default)?)?;
    let grid_e_min = take_f64(&mut map, "grid_elev_min_deg", 0.0)?;
    let grid_e_max = take_f64(&mut map, "grid_elev_max_deg", 90.0)?;
    let grid_e_step = positive_step(
        "grid_elev_step_deg",
        take_f64(&mut map, "grid_elev_step_deg", e_step_default)?,
    )?;
    let wants_azim_axis = overrides.full_scale
        || ["grid_azim_min_deg", "grid_azim_max_deg", "grid_azim_step_deg"]
            .iter()
            .any(|k| map.contains_key(*k));
    let azim_axis = if wants_azim_axis {
        let lo = take_f64(&mut map, "grid_azim_min_deg", 45.0)?;
        let hi = take_f64(&mut map, "grid_azim_max_deg", 135.0)?;
        let step =
            positive_step("grid_azim_step_deg", take_f64(&mut map, "grid_azim_step_deg", 2.0)?)?;
        Some((lo, hi, step))
    } else {
        None
    };
    let refine_levels = take_usize(&mut map, "refine_levels", 2)?;

    // Optional common microstrip losses, broadcast to every strip.
    let strip_alpha = take_f64(&mut map, "strip_alpha", 0.0)?;
    let strip_beta =
        take_f64(&mut map, "strip_beta", 2.0 * std::f64::consts::PI / lambda)?;

    if let Some(unknown) = map.keys().next() {
        return Err(Error::Config(format!("unknown key `{unknown}`")));
    }

    let layout_n_rf = n_rf_grid.iter().copied().max().unwrap_or(0);
    let layout = ArrayLayout {
        n_rf: layout_n_rf,
        n_e,
        d_e,
        d_rf,
        d_p,
        lambda,
        kappa_abs,
        b_gain,
    };
    let rho_row: Vec<f64> = (0..n_e).map(|n| n as f64 * d_e).collect();
    let params = MicrostripParams {
        alpha: vec![strip_alpha; layout_n_rf],
        beta: vec![strip_beta; layout_n_rf],
        rho: vec![rho_row; layout_n_rf],
    };

    let phi_axis = match azim_axis {
        Some((lo, hi, step)) => {
            SearchGrid::axis(lo.to_radians(), hi.to_radians(), step.to_radians())
        }
        None => vec![azimuth_deg.to_radians()],
    };
    let grid = SearchGrid::new(
        SearchGrid::axis(grid_r_min, grid_r_max, grid_r_step),
        SearchGrid::axis(grid_e_min.to_radians(), grid_e_max.to_radians(), grid_e_step.to_radians()),
        phi_axis,
        refine_levels,
    )?;

    let config = SimConfig {
        layout,
        params,
        dist: ScenarioDist {
            azimuth: azimuth_deg.to_radians(),
            range_bounds: (range_min, range_max),
            elevation_bounds: (elev_min_deg.to_radians(), elev_max_deg.to_radians()),
        },
        k_targets,
        u_users,
        l_antennas,
        ue_spacing,
        codebook_bits,
        gamma,
        grid,
        p_max_grid,
        n_rf_grid,
        t_slots,
        trials,
        bandwidth_hz,
        noise_dbm,
        seed,
    };
    config.validate()?;

    let mut echo = Map::new();
    echo.insert("lambda_m".into(), json!(lambda));
    echo.insert("n_e".into(), json!(n_e));
    echo.insert("d_e_m".into(), json!(d_e));
    echo.insert("d_rf_m".into(), json!(d_rf));
    echo.insert("d_p_m".into(), json!(d_p));
    echo.insert("kappa_abs".into(), json!(kappa_abs));
    echo.insert("b_gain".into(), json!(b_gain));
    echo.insert("n_rf_grid".into(), json!(config.n_rf_grid));
    echo.insert("p_max_grid_dbm".into(), json!(config.p_max_grid));
    echo.insert("t_slots".into(), json!(t_slots));
    echo.insert("trials".into(), json!(trials));
    echo.insert("k_targets".into(), json!(k_targets));
    echo.insert("u_users".into(), json!(u_users));
    echo.insert("l_antennas".into(), json!(l_antennas));
    echo.insert("ue_spacing_m".into(), json!(ue_spacing));
    echo.insert("codebook_bits".into(), json!(codebook_bits));
    echo.insert("bandwidth_hz".into(), json!(bandwidth_hz));
    echo.insert("noise_dbm".into(), json!(noise_dbm));
    echo.insert("gamma_dbm".into(), gamma_echo);
    echo.insert("seed".into(), json!(seed));
    echo.insert("azimuth_deg".into(), json!(azimuth_deg));
    echo.insert("range_min_m".into(), json!(range_min));
    echo.insert("range_max_m".into(), json!(range_max));
    echo.insert("elev_min_deg".into(), json!(elev_min_deg));
    echo.insert("elev_max_deg".into(), json!(elev_max_deg));
    echo.insert("grid_r_min_m".into(), json!(grid_r_min));
    echo.insert("grid_r_max_m".into(), json!(grid_r_max));
    echo.insert("grid_r_step_m".into(), json!(grid_r_step));
    echo.insert("grid_elev_min_deg".into(), json!(grid_e_min));
    echo.insert("grid_elev_max_deg".into(), json!(grid_e_max));
    echo.insert("grid_elev_step_deg".into(), json!(grid_e_step));
    if let Some((lo, hi, step)) = azim_axis {
        echo.insert("grid_azim_min_deg".into(), json!(lo));
        echo.insert("grid_azim_max_deg".into(), json!(hi));
        echo.insert("grid_azim_step_deg".into(), json!(step));
    }
    echo.insert("refine_levels".into(), json!(refine_levels));
    echo.insert("strip_alpha".into(), json!(strip_alpha));
    echo.insert("strip_beta".into(), json!(strip_beta));

    Ok((config, echo))
}

/// Loads and resolves a config file (absent path means all defaults).
pub fn load_config(path: Option<&Path>, overrides: &ConfigOverrides) -> Result<(SimConfig, Map<String, Value>)> {
    let raw = match path {
        Some(p) => Some(std::fs::read_to_string(p)?),
        None => None,
    };
    resolve_config(raw.as_deref(), overrides)
}

/// Fixed metrics.csv schema.
pub const METRICS_HEADER: &str =
    "p_max_dbm,n_rf,rmse_range_m,rmse_elev_deg,rmse_azim_deg,mean_sum_rate_bpshz,trials_used,infeasible_count";

/// Renders the aggregated records with the stable column order.
pub fn format_metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.p_max_dbm,
            r.n_rf,
            r.rmse_range_m,
            r.rmse_elev_deg,
            r.rmse_azim_deg,
            r.mean_sum_rate_bpshz,
            r.trials_used,
            r.infeasible_count
        ));
    }
    out
}

/// Renders the per-trial rows (verbose output).
pub fn format_trials_csv(rows: &[TrialRow]) -> String {
    let mut out = String::from(
        "p_max_dbm,n_rf,trial,feasible,range_rms_m,elev_rms_deg,azim_rms_deg,sum_rate_bpshz,snr_radar,snr_dl",
    );
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.p_max_dbm,
            r.n_rf,
            r.trial,
            u8::from(r.feasible),
            r.range_rms_m,
            r.elev_rms_deg,
            r.azim_rms_deg,
            r.sum_rate_bpshz,
            r.snr_radar,
            r.snr_dl
        ));
    }
    out
}

/// Writes through a temporary sibling and renames into place, so readers
/// never observe a partial file and failed runs leave nothing behind.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Config(format!("output path {} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::Io(e)
    })?;
    Ok(())
}

/// Paths written by a completed run.
#[derive(Debug)]
pub struct RunSummary {
    pub metrics_path: PathBuf,
    pub manifest_path: PathBuf,
    pub trials_path: Option<PathBuf>,
    pub records: usize,
}

/// Executes the sweep described by the flags and writes the artifacts.
pub fn run_cli(args: &CliArgs) -> Result<RunSummary> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let overrides = ConfigOverrides {
        seed: args.seed,
        trials: args.trials,
        full_scale: args.full_scale,
    };
    let (config, echo) = load_config(args.config.as_deref(), &overrides)?;
    let output = run_experiment(&config)?;

    std::fs::create_dir_all(&args.out)?;
    let metrics_path = args.out.join("metrics.csv");
    write_atomic(&metrics_path, &format_metrics_csv(&output.records))?;
    let trials_path = if args.verbose {
        let path = args.out.join("trials.csv");
        write_atomic(&path, &format_trials_csv(&output.trials))?;
        Some(path)
    } else {
        None
    };

    let manifest = json!({
        "tool": "isac-sim",
        "version": env!("CARGO_PKG_VERSION"),
        "config_path": args.config.as_ref().map(|p| p.display().to_string()),
        "out_dir": args.out.display().to_string(),
        "full_scale": args.full_scale,
        "verbose": args.verbose,
        "resolved": Value::Object(echo),
        "rate_mean_excludes_infeasible": true,
        "records": output.records.len(),
        "started_unix_s": started.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        "wall_s": clock.elapsed().as_secs_f64(),
    });
    let manifest_path = args.out.join("manifest.json");
    let mut rendered = serde_json::to_string_pretty(&manifest)?;
    rendered.push('\n');
    write_atomic(&manifest_path, &rendered)?;

    Ok(RunSummary {
        metrics_path,
        manifest_path,
        trials_path,
        records: output.records.len(),
    })
}

/// Binary entry point: parse flags, run, report, map errors to a nonzero
/// exit status.
pub fn main_entry() -> ExitCode {
    let _ = env_logger::try_init();
    let args = CliArgs::parse();
    match run_cli(&args) {
        Ok(summary) => {
            println!(
                "wrote {} ({} rows) and {}",
                summary.metrics_path.display(),
                summary.records,
                summary.manifest_path.display()
            );
            if let Some(trials) = &summary.trials_path {
                println!("wrote {}", trials.display());
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
