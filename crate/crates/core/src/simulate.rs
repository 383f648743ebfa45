//! Received-signal synthesis, rate and error metrics, and the Monte Carlo
//! sweep over transmit power and microstrip count.
//!
//! A trial runs the two-phase protocol: probe the scene under random
//! codebook beamformers, locate the spectrum peaks, design the front end
//! from those estimates, then re-estimate under the optimized combiner and
//! score the downlink rate against the true channels. Every random draw
//! comes from a counter-mode stream addressed by (seed, cell, trial), so
//! results are independent of execution order and worker count.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::beamforming::{
    check_si_constraint, design_isac, digital_si_canceller, snr_dl, snr_radar, BeamformerSet,
    DesignInputs, PhaseCodebook,
};
use crate::dma::{assemble_analog_bf, compensate_weights, propagation_matrix, MicrostripParams};
use crate::estimation::{
    estimate_targets, match_estimates, MatchedErrors, SearchGrid, SnapshotBlock, TargetEstimate,
};
use crate::geometry::{dl_channel, radar_channel, si_channel, Scenario, SphericalCoord, UeDescriptor};
use crate::geometry::ArrayLayout;
use crate::linalg::fro_norm_sq;
use crate::{C64, CMat, CVec, Error, Result};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Converts a dBm figure to linear watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Thermal noise floor in dBm for a given bandwidth: -174 + 10 log10(B).
pub fn thermal_noise_dbm(bandwidth_hz: f64) -> f64 {
    -174.0 + 10.0 * bandwidth_hz.log10()
}

/// Random scene distribution: azimuth is pinned, elevation and range are
/// drawn uniformly, and every reflection coefficient gets a uniform phase.
#[derive(Clone, Debug)]
pub struct ScenarioDist {
    /// Fixed azimuth, radians.
    pub azimuth: f64,
    /// Inclusive range bounds, meters.
    pub range_bounds: (f64, f64),
    /// Inclusive elevation bounds, radians.
    pub elevation_bounds: (f64, f64),
}

impl ScenarioDist {
    /// Checks bound ordering and coordinate domains.
    pub fn validate(&self) -> Result<()> {
        let (r_lo, r_hi) = self.range_bounds;
        if !(r_lo > 0.0 && r_hi >= r_lo) {
            return Err(Error::invalid(
                "range_bounds",
                format!("need 0 < lo <= hi, got ({r_lo}, {r_hi})"),
            ));
        }
        let (e_lo, e_hi) = self.elevation_bounds;
        if !(e_lo >= 0.0 && e_hi >= e_lo) {
            return Err(Error::invalid(
                "elevation_bounds",
                format!("need 0 <= lo <= hi, got ({e_lo}, {e_hi})"),
            ));
        }
        SphericalCoord::new(r_lo, e_lo, self.azimuth)?;
        SphericalCoord::new(r_hi, e_hi, self.azimuth)?;
        Ok(())
    }

    /// Draws K target coordinates and unit-modulus reflection coefficients;
    /// the first `u_users` targets double as user reference points. Draw
    /// order per target is range, elevation, reflection phase.
    pub fn draw(
        &self,
        k_targets: usize,
        u_users: usize,
        l_antennas: usize,
        ue_spacing: f64,
        rng: &mut impl Rng,
    ) -> Result<Scenario> {
        let mut targets = Vec::with_capacity(k_targets);
        let mut coeffs = Vec::with_capacity(k_targets);
        for _ in 0..k_targets {
            let r = sample_range(self.range_bounds, rng);
            let theta = sample_range(self.elevation_bounds, rng);
            targets.push(SphericalCoord::new(r, theta, self.azimuth)?);
            coeffs.push(C64::from_polar(1.0, rng.gen_range(0.0..std::f64::consts::TAU)));
        }
        let ues = targets
            .iter()
            .take(u_users)
            .map(|coord| UeDescriptor { coord: *coord, l_antennas, ula_spacing: ue_spacing })
            .collect();
        let scenario = Scenario { targets, ues, reflection_coeffs: coeffs };
        scenario.validate()?;
        Ok(scenario)
    }
}

fn sample_range(bounds: (f64, f64), rng: &mut impl Rng) -> f64 {
    if bounds.1 > bounds.0 {
        rng.gen_range(bounds.0..bounds.1)
    } else {
        bounds.0
    }
}

/// Full description of one Monte Carlo experiment.
#[derive(Clone, Debug)]
pub struct SimConfig {
    /// Base geometry; its microstrip count must cover every grid entry.
    pub layout: ArrayLayout,
    /// Microstrip propagation parameters sized to `layout`; cells with
    /// fewer microstrips use the leading strips.
    pub params: MicrostripParams,
    pub dist: ScenarioDist,
    /// Sensed targets per scene (K).
    pub k_targets: usize,
    /// Downlink users, the first `u_users` targets (U).
    pub u_users: usize,
    /// Antennas per user terminal (L).
    pub l_antennas: usize,
    /// User array spacing, meters.
    pub ue_spacing: f64,
    pub codebook_bits: u32,
    /// Residual self-interference threshold, linear power; infinity
    /// disables the constraint.
    pub gamma: f64,
    pub grid: SearchGrid,
    /// Transmit power budgets, dBm.
    pub p_max_grid: Vec<f64>,
    /// Microstrip counts swept against the power grid.
    pub n_rf_grid: Vec<usize>,
    pub t_slots: usize,
    pub trials: usize,
    pub bandwidth_hz: f64,
    /// Noise power, dBm; [`thermal_noise_dbm`] gives the auto-derived
    /// value for `bandwidth_hz`.
    pub noise_dbm: f64,
    pub seed: u64,
}

impl SimConfig {
    /// Checks every cross-field invariant, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        self.dist.validate()?;
        self.grid.validate()?;
        if self.trials == 0 {
            return Err(Error::invalid("trials", "need at least one trial"));
        }
        if self.t_slots == 0 {
            return Err(Error::invalid("t_slots", "need at least one snapshot slot"));
        }
        if self.k_targets == 0 {
            return Err(Error::invalid("k_targets", "need at least one target"));
        }
        if self.u_users == 0 || self.u_users > self.k_targets {
            return Err(Error::invalid(
                "u_users",
                format!("user count must be in 1..={}, got {}", self.k_targets, self.u_users),
            ));
        }
        if self.l_antennas == 0 {
            return Err(Error::invalid("l_antennas", "need at least one user antenna"));
        }
        if !(self.ue_spacing > 0.0) {
            return Err(Error::invalid("ue_spacing", "user array spacing must be positive"));
        }
        if self.gamma < 0.0 {
            return Err(Error::invalid("gamma", "threshold must be nonnegative"));
        }
        if self.p_max_grid.is_empty() {
            return Err(Error::invalid("p_max_grid", "need at least one power budget"));
        }
        if self.n_rf_grid.is_empty() {
            return Err(Error::invalid("n_rf_grid", "need at least one microstrip count"));
        }
        if !(self.bandwidth_hz > 0.0) {
            return Err(Error::invalid("bandwidth_hz", "bandwidth must be positive"));
        }
        if !self.noise_dbm.is_finite() {
            return Err(Error::invalid("noise_dbm", "noise power must be finite"));
        }
        PhaseCodebook::new(self.codebook_bits)?;
        let max_n_rf = *self.n_rf_grid.iter().max().expect("nonempty grid");
        if self.layout.n_rf < max_n_rf {
            return Err(Error::invalid(
                "n_rf_grid",
                format!(
                    "layout provides {} microstrips but the grid asks for {max_n_rf}",
                    self.layout.n_rf
                ),
            ));
        }
        for &n_rf in &self.n_rf_grid {
            if self.k_targets >= n_rf {
                return Err(Error::invalid(
                    "k_targets",
                    format!(
                        "{} targets need fewer than n_rf = {n_rf} for a noise subspace",
                        self.k_targets
                    ),
                ));
            }
        }
        self.layout.validate()?;
        self.params.validate(&self.layout)?;
        Ok(())
    }

    /// Sweep cells in row-major order: power budgets outer, microstrip
    /// counts inner.
    pub fn num_cells(&self) -> usize {
        self.p_max_grid.len() * self.n_rf_grid.len()
    }

    /// Geometry, propagation parameters, and power budget (dBm) of one
    /// sweep cell.
    pub fn cell(&self, cell: usize) -> Result<(ArrayLayout, MicrostripParams, f64)> {
        if cell >= self.num_cells() {
            return Err(Error::invalid(
                "cell",
                format!("index {cell} outside 0..{}", self.num_cells()),
            ));
        }
        let p_max_dbm = self.p_max_grid[cell / self.n_rf_grid.len()];
        let n_rf = self.n_rf_grid[cell % self.n_rf_grid.len()];
        let layout = ArrayLayout { n_rf, ..self.layout };
        let params = MicrostripParams {
            alpha: self.params.alpha[..n_rf].to_vec(),
            beta: self.params.beta[..n_rf].to_vec(),
            rho: self.params.rho[..n_rf].to_vec(),
        };
        Ok((layout, params, p_max_dbm))
    }
}

/// Number of transmit-grid redraws across one probing pass.
const PROBE_BURSTS: usize = 8;

/// Scene draws use even streams indexed by trial alone, so every sweep
/// cell sees the same scene sequence and cross-cell comparisons are
/// paired; all other randomness uses odd cell-specific streams.
fn scenario_stream(trial: u64) -> u64 {
    trial << 1
}

fn cell_stream(cell: usize, trial: u64) -> u64 {
    ((cell as u64 + 1) << 33) | (trial << 1) | 1
}

/// One circularly-symmetric unit-variance complex Gaussian draw.
fn standard_complex(rng: &mut impl Rng) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Combiner-domain snapshots over `t_slots`: per slot, unit-covariance
/// symbols s and element noise n of per-entry variance `sigma2` drive
///
///   y = W_RX^H P_RX^H h_r P_TX W_TX V s + (W_SI~ + D) V s + W_RX^H P_RX^H n
///
/// with W_SI~ the combiner-domain self-interference map of `h_si`. When
/// `set.d_cancel` came from [`digital_si_canceller`] for the same chains
/// the middle term vanishes. Draw order per slot is symbols then noise,
/// entry by entry, real part before imaginary.
pub fn synth_rx_snapshots(
    h_r: &CMat,
    h_si: &CMat,
    set: &BeamformerSet,
    t_slots: usize,
    sigma2: f64,
    rng: &mut impl Rng,
) -> Result<SnapshotBlock> {
    if t_slots == 0 {
        return Err(Error::invalid("t_slots", "need at least one snapshot slot"));
    }
    if sigma2 < 0.0 {
        return Err(Error::invalid("sigma2", "noise power must be nonnegative"));
    }
    let rx_chain = set.rx_chain();
    let tx_chain = set.tx_chain();
    let n = rx_chain.nrows();
    if h_r.nrows() != n || h_r.ncols() != n || h_si.nrows() != n || h_si.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "channels must be {n}x{n} to match the panels"
        )));
    }
    let n_rf = rx_chain.ncols();
    let streams = set.v_digital.ncols();

    // Everything multiplying the symbols collapses into one matrix.
    let si_tilde = rx_chain.adjoint() * h_si * &tx_chain;
    let signal_map = (rx_chain.adjoint() * h_r * &tx_chain + si_tilde + &set.d_cancel.d_matrix)
        * &set.v_digital;
    let noise_map = rx_chain.adjoint();
    let noise_amp = sigma2.sqrt();

    let mut y = CMat::zeros(n_rf, t_slots);
    let mut s = CVec::zeros(streams);
    let mut noise = CVec::zeros(n);
    for t in 0..t_slots {
        for e in s.iter_mut() {
            *e = standard_complex(rng);
        }
        for e in noise.iter_mut() {
            *e = standard_complex(rng) * noise_amp;
        }
        let col = &signal_map * &s + &noise_map * &noise;
        y.set_column(t, &col);
    }
    SnapshotBlock::new(y)
}

/// One downlink observation at user `u`: y = h_dl P_TX W_TX V s + n with
/// unit-covariance symbols and per-antenna noise variance `sigma_u2`.
/// Draw order matches [`synth_rx_snapshots`]: symbols then noise.
pub fn synth_ue_signal(
    h_dl: &CMat,
    set: &BeamformerSet,
    sigma_u2: f64,
    rng: &mut impl Rng,
) -> Result<CVec> {
    if sigma_u2 < 0.0 {
        return Err(Error::invalid("sigma_u2", "noise power must be nonnegative"));
    }
    let tx_chain = set.tx_chain();
    if h_dl.ncols() != tx_chain.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "downlink channel has {} columns but the panel has {} elements",
            h_dl.ncols(),
            tx_chain.nrows()
        )));
    }
    let streams = set.v_digital.ncols();
    let map = h_dl * &tx_chain * &set.v_digital;
    let mut s = CVec::zeros(streams);
    for e in s.iter_mut() {
        *e = standard_complex(rng);
    }
    let noise_amp = sigma_u2.sqrt();
    let mut y = &map * &s;
    for e in y.iter_mut() {
        *e += standard_complex(rng) * noise_amp;
    }
    Ok(y)
}

/// Log-determinant of a Hermitian positive-definite matrix via Cholesky.
fn ln_det_hermitian_pd(m: &CMat) -> Result<f64> {
    let chol = nalgebra::linalg::Cholesky::new(m.clone())
        .ok_or_else(|| Error::invalid("matrix", "expected positive definite"))?;
    let l = chol.l();
    Ok(2.0 * (0..l.nrows()).map(|i| l[(i, i)].re.ln()).sum::<f64>())
}

/// Sum achievable downlink rate in bits/s/Hz over the true channels:
/// per user, log2 det(I + Q_u^{-1} H_u V_u V_u^H H_u^H) with
/// H_u = h_dl_u P_TX W_TX and Q_u the noise-plus-interference covariance
/// from the other users' precoder blocks.
pub fn achievable_rate(
    set: &BeamformerSet,
    true_dl_channels: &[CMat],
    sigma_u2: &[f64],
) -> Result<f64> {
    let u_count = true_dl_channels.len();
    if u_count == 0 || sigma_u2.len() != u_count {
        return Err(Error::DimensionMismatch(format!(
            "{u_count} channels but {} noise powers",
            sigma_u2.len()
        )));
    }
    if sigma_u2.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::invalid("sigma_u2", "per-user noise powers must be positive"));
    }
    if set.v_digital.ncols() % u_count != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{} precoder columns do not split over {u_count} users",
            set.v_digital.ncols()
        )));
    }
    let l_streams = set.v_digital.ncols() / u_count;
    let tx_chain = set.tx_chain();

    let mut rate = 0.0;
    for (u, h_dl) in true_dl_channels.iter().enumerate() {
        let h_u = h_dl * &tx_chain;
        let l_ant = h_u.nrows();
        let mut q = CMat::identity(l_ant, l_ant) * C64::new(sigma_u2[u], 0.0);
        let mut own = CMat::zeros(l_ant, l_ant);
        for v in 0..u_count {
            let block = h_u.clone() * set.v_digital.columns(v * l_streams, l_streams);
            let gram = &block * block.adjoint();
            if v == u {
                own = gram;
            } else {
                q += gram;
            }
        }
        let user = (ln_det_hermitian_pd(&(&q + own))? - ln_det_hermitian_pd(&q)?)
            / std::f64::consts::LN_2;
        rate += user.max(0.0);
    }
    Ok(rate)
}

/// Root mean square of a nonempty error list.
pub fn rmse(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::invalid("errors", "need at least one error sample"));
    }
    let mean_sq = errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64;
    Ok(mean_sq.sqrt())
}

/// Outcome of one trial: the final estimates, the probe-phase estimates the
/// beamformer design consumed, the designed front end, the truth-matched
/// errors (present when estimation ran), and the scores.
#[derive(Clone, Debug)]
pub struct TrialResult {
    pub estimates: Vec<TargetEstimate>,
    pub design_estimates: Vec<TargetEstimate>,
    pub beamformers: BeamformerSet,
    pub errors: Option<MatchedErrors>,
    pub sum_rate_bpshz: f64,
    pub snr_radar: f64,
    pub snr_dl: f64,
    pub feasible: bool,
}

/// One aggregated sweep-cell row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub p_max_dbm: f64,
    pub n_rf: usize,
    pub rmse_range_m: f64,
    pub rmse_elev_deg: f64,
    pub rmse_azim_deg: f64,
    pub mean_sum_rate_bpshz: f64,
    pub trials_used: usize,
    pub infeasible_count: usize,
}

/// Per-trial scores flattened for reporting.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialRow {
    pub p_max_dbm: f64,
    pub n_rf: usize,
    pub trial: u64,
    pub feasible: bool,
    pub range_rms_m: f64,
    pub elev_rms_deg: f64,
    pub azim_rms_deg: f64,
    pub sum_rate_bpshz: f64,
    pub snr_radar: f64,
    pub snr_dl: f64,
}

/// Aggregated records plus the per-trial rows behind them.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub records: Vec<MetricsRecord>,
    pub trials: Vec<TrialRow>,
}

/// Random-codebook probing front end for the first estimation pass. The
/// combiner grid is drawn once and shared by every burst, so the snapshot
/// covariance lives in one observation space; the transmit grid is redrawn
/// per burst, sweeping the illumination so no target spends the whole pass
/// in a fade of a single random pattern. Each burst cancels its own
/// self-interference exactly and spreads the full budget over all
/// microstrips through the canceled map's right-singular basis.
fn probe_bursts(
    layout: &ArrayLayout,
    params: &MicrostripParams,
    h_si: &CMat,
    codebook: &PhaseCodebook,
    p_max: f64,
    gamma: f64,
    bursts: usize,
    rng: &mut impl Rng,
) -> Result<Vec<BeamformerSet>> {
    let draw_grid = |rng: &mut dyn rand::RngCore| -> CMat {
        CMat::from_fn(layout.n_rf, layout.n_e, |_, _| {
            C64::from_polar(1.0, codebook.phases[rng.gen_range(0..codebook.phases.len())])
        })
    };
    let rx_grid = draw_grid(rng);
    let w_rx = assemble_analog_bf(compensate_weights(&rx_grid, params)?)?;
    let p_tx = propagation_matrix(params, layout)?;
    let p_rx = propagation_matrix(params, layout)?;

    let mut sets = Vec::with_capacity(bursts);
    for _ in 0..bursts {
        let tx_grid = draw_grid(rng);
        let w_tx = assemble_analog_bf(compensate_weights(&tx_grid, params)?)?;
        let (d_cancel, b_basis) = digital_si_canceller(&w_rx, &p_rx, h_si, &p_tx, &w_tx)?;

        let radiated = p_tx.scale_rows(w_tx.matrix()) * &b_basis;
        let power = fro_norm_sq(&radiated);
        let scale = if power > 0.0 { (p_max / power).sqrt() } else { 0.0 };
        let v_digital = &b_basis * C64::new(scale, 0.0);

        let check = check_si_constraint(&w_rx, &p_rx, h_si, &p_tx, &w_tx, &v_digital, gamma)?;
        sets.push(BeamformerSet {
            w_tx,
            w_rx: w_rx.clone(),
            p_tx: p_tx.clone(),
            p_rx: p_rx.clone(),
            v_digital,
            d_cancel,
            b_basis,
            si_row_power: check.row_power,
            feasible: check.feasible,
            gamma,
            p_max,
        });
    }
    Ok(sets)
}

/// Reorders estimates by their matched truth index, so the entries feeding
/// the design stage line up with the true targets and the first U entries
/// are the users.
fn align_to_truth(estimates: &[TargetEstimate], truth: &[SphericalCoord]) -> Result<Vec<TargetEstimate>> {
    let coords: Vec<SphericalCoord> = estimates.iter().map(|e| e.coord).collect();
    let matched = match_estimates(&coords, truth)?;
    Ok(matched.assignment.iter().map(|&e| estimates[e]).collect())
}

/// Runs one trial of sweep cell `cell` (row-major over the power and
/// microstrip grids). Deterministic in (config.seed, cell, trial).
pub fn run_trial(config: &SimConfig, cell: usize, trial: u64) -> Result<TrialResult> {
    let (layout, params, p_max_dbm) = config.cell(cell)?;
    let h_si = si_channel(&layout)?;
    let scenario = draw_scenario(config, trial)?;
    run_trial_inner(config, cell, trial, &scenario, &layout, &params, p_max_dbm, &h_si)
}

/// Runs the two-phase protocol of [`run_trial`] on a caller-supplied
/// scenario instead of one drawn from the configured distribution. The
/// scenario must agree with the config's target, user, and UE antenna
/// counts. Deterministic in (config.seed, cell, trial).
pub fn run_scenario_trial(
    config: &SimConfig,
    cell: usize,
    trial: u64,
    scenario: &Scenario,
) -> Result<TrialResult> {
    if scenario.targets.len() != config.k_targets {
        return Err(Error::invalid("scenario", "target count does not match config"));
    }
    if scenario.ues.len() != config.u_users {
        return Err(Error::invalid("scenario", "UE count does not match config"));
    }
    if scenario.ues.iter().any(|ue| ue.l_antennas != config.l_antennas) {
        return Err(Error::invalid("scenario", "UE antenna count does not match config"));
    }
    let (layout, params, p_max_dbm) = config.cell(cell)?;
    let h_si = si_channel(&layout)?;
    run_trial_inner(config, cell, trial, scenario, &layout, &params, p_max_dbm, &h_si)
}

/// Draws the scenario shared by every sweep cell at this trial index.
/// Public so fixed-scene studies can reproduce the per-trial draws.
pub fn draw_scenario(config: &SimConfig, trial: u64) -> Result<Scenario> {
    let mut scene_rng = ChaCha8Rng::seed_from_u64(config.seed);
    scene_rng.set_stream(scenario_stream(trial));
    config.dist.draw(
        config.k_targets,
        config.u_users,
        config.l_antennas,
        config.ue_spacing,
        &mut scene_rng,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_trial_inner(
    config: &SimConfig,
    cell: usize,
    trial: u64,
    scenario: &Scenario,
    layout: &ArrayLayout,
    params: &MicrostripParams,
    p_max_dbm: f64,
    h_si: &CMat,
) -> Result<TrialResult> {
    let p_max = dbm_to_watts(p_max_dbm);
    let sigma2 = dbm_to_watts(config.noise_dbm);
    let codebook = PhaseCodebook::new(config.codebook_bits)?;

    let truth: Vec<SphericalCoord> = scenario.targets.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(cell_stream(cell, trial));

    let h_r_true = radar_channel(&scenario, layout, true)?;

    // Phase 1: probe with random codebook weights and locate the peaks.
    let bursts = PROBE_BURSTS.min(config.t_slots);
    let probe = probe_bursts(layout, params, h_si, &codebook, p_max, config.gamma, bursts, &mut rng)?;
    let mut y = CMat::zeros(layout.n_rf, config.t_slots);
    let mut filled = 0;
    for (b, set) in probe.iter().enumerate() {
        let slots = config.t_slots / bursts + usize::from(b < config.t_slots % bursts);
        let burst = synth_rx_snapshots(&h_r_true, h_si, set, slots, sigma2, &mut rng)?;
        y.columns_mut(filled, slots).copy_from(&burst.y_matrix);
        filled += slots;
    }
    let block = SnapshotBlock::new(y)?;
    let first_pass = estimate_targets(
        &block,
        config.k_targets,
        &config.grid,
        &probe[0].w_rx,
        &probe[0].p_rx,
        layout,
    )?;
    let aligned = align_to_truth(&first_pass.estimates, &truth)?;

    // Phase 2: design from the estimates, then re-estimate under the
    // optimized combiner and score the downlink.
    let inputs = DesignInputs {
        layout,
        tx_params: params,
        rx_params: params,
        u_users: config.u_users,
        l_antennas: config.l_antennas,
        ue_spacing: config.ue_spacing,
        p_max,
        gamma: config.gamma,
        codebook: &codebook,
    };
    let set = design_isac(&aligned, h_si, &inputs)?;

    let block =
        synth_rx_snapshots(&h_r_true, h_si, &set, config.t_slots, sigma2, &mut rng)?;
    let second_pass =
        estimate_targets(&block, config.k_targets, &config.grid, &set.w_rx, &set.p_rx, layout)?;
    let final_estimates = align_to_truth(&second_pass.estimates, &truth)?;
    let final_coords: Vec<SphericalCoord> = final_estimates.iter().map(|e| e.coord).collect();
    let errors = match_estimates(&final_coords, &truth)?;

    let sigma_u2 = vec![sigma2; config.u_users];
    let true_dls: Vec<CMat> = scenario
        .ues
        .iter()
        .map(|ue| dl_channel(ue, layout))
        .collect::<Result<_>>()?;
    let sum_rate = achievable_rate(&set, &true_dls, &sigma_u2)?;

    // Estimated channels score the link diagnostics.
    let est_scene = Scenario {
        targets: final_coords.clone(),
        ues: vec![],
        reflection_coeffs: vec![C64::new(1.0, 0.0); final_coords.len()],
    };
    let h_r_hat = radar_channel(&est_scene, layout, false)?;
    let est_dls: Vec<CMat> = final_coords
        .iter()
        .take(config.u_users)
        .map(|coord| {
            dl_channel(
                &UeDescriptor {
                    coord: *coord,
                    l_antennas: config.l_antennas,
                    ula_spacing: config.ue_spacing,
                },
                layout,
            )
        })
        .collect::<Result<_>>()?;
    let radar_snr = snr_radar(&set, &h_r_hat, sigma2)?;
    let dl_snr = snr_dl(&set, &est_dls, &sigma_u2)?;

    let feasible = set.feasible;
    Ok(TrialResult {
        estimates: final_estimates,
        design_estimates: aligned,
        beamformers: set,
        errors: Some(errors),
        sum_rate_bpshz: sum_rate,
        snr_radar: radar_snr,
        snr_dl: dl_snr,
        feasible,
    })
}

fn trial_row(p_max_dbm: f64, n_rf: usize, trial: u64, res: &TrialResult) -> TrialRow {
    let (range_rms, elev_rms, azim_rms) = match &res.errors {
        Some(e) => (
            rmse(&e.range_err).unwrap_or(f64::NAN),
            rmse(&deg(&e.elev_err)).unwrap_or(f64::NAN),
            rmse(&deg(&e.azim_err)).unwrap_or(f64::NAN),
        ),
        None => (f64::NAN, f64::NAN, f64::NAN),
    };
    TrialRow {
        p_max_dbm,
        n_rf,
        trial,
        feasible: res.feasible,
        range_rms_m: range_rms,
        elev_rms_deg: elev_rms,
        azim_rms_deg: azim_rms,
        sum_rate_bpshz: res.sum_rate_bpshz,
        snr_radar: res.snr_radar,
        snr_dl: res.snr_dl,
    }
}

/// Runs the full sweep. Per cell, trials execute as independent jobs (in
/// parallel when the `parallel` feature is on) and aggregation reduces the
/// index-ordered results, so scheduling never changes the output. Feasible
/// trials pool their matched errors into the cell RMSEs and average their
/// rates; infeasible or failed trials are only counted.
pub fn run_experiment(config: &SimConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let mut records = Vec::with_capacity(config.num_cells());
    let mut rows = Vec::with_capacity(config.num_cells() * config.trials);

    for cell in 0..config.num_cells() {
        let (layout, params, p_max_dbm) = config.cell(cell)?;
        let h_si = si_channel(&layout)?;

        let run = |trial: u64| -> Option<TrialResult> {
            let attempt = draw_scenario(config, trial).and_then(|scenario| {
                run_trial_inner(config, cell, trial, &scenario, &layout, &params, p_max_dbm, &h_si)
            });
            match attempt {
                Ok(res) => Some(res),
                Err(err) => {
                    log::warn!(
                        "trial {trial} of cell {cell} (p_max {p_max_dbm} dBm, n_rf {}) failed: {err}",
                        layout.n_rf
                    );
                    None
                }
            }
        };
        #[cfg(feature = "parallel")]
        let results: Vec<Option<TrialResult>> =
            (0..config.trials as u64).into_par_iter().map(run).collect();
        #[cfg(not(feature = "parallel"))]
        let results: Vec<Option<TrialResult>> = (0..config.trials as u64).map(run).collect();

        let mut range_pool = Vec::new();
        let mut elev_pool = Vec::new();
        let mut azim_pool = Vec::new();
        let mut rates = Vec::new();
        let mut infeasible = 0usize;
        for (trial, res) in results.iter().enumerate() {
            match res {
                Some(res) if res.feasible => {
                    let errors = res.errors.as_ref().expect("feasible trials estimated");
                    range_pool.extend_from_slice(&errors.range_err);
                    elev_pool.extend(deg(&errors.elev_err));
                    azim_pool.extend(deg(&errors.azim_err));
                    rates.push(res.sum_rate_bpshz);
                    rows.push(trial_row(p_max_dbm, layout.n_rf, trial as u64, res));
                }
                Some(res) => {
                    infeasible += 1;
                    rows.push(trial_row(p_max_dbm, layout.n_rf, trial as u64, res));
                }
                None => infeasible += 1,
            }
        }
        let mean_rate = if rates.is_empty() {
            f64::NAN
        } else {
            rates.iter().sum::<f64>() / rates.len() as f64
        };
        records.push(MetricsRecord {
            p_max_dbm,
            n_rf: layout.n_rf,
            rmse_range_m: rmse(&range_pool).unwrap_or(f64::NAN),
            rmse_elev_deg: rmse(&elev_pool).unwrap_or(f64::NAN),
            rmse_azim_deg: rmse(&azim_pool).unwrap_or(f64::NAN),
            mean_sum_rate_bpshz: mean_rate,
            trials_used: rates.len(),
            infeasible_count: infeasible,
        });
    }
    Ok(ExperimentOutput { records, trials: rows })
}

fn deg(radians: &[f64]) -> Vec<f64> {
    radians.iter().map(|r| r.to_degrees()).collect()
}
