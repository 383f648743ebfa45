//! Joint analog/digital beamformer design: codebook-constrained coordinate
//! searches for the transmit and receive analog stages, exact digital
//! self-interference cancellation, single-user and block-diagonalization
//! precoding under a total power budget, per-microstrip residual-SI
//! feasibility checks, and the radar / downlink SNR metrics.
//!
//! The analog searches operate on relaxed unit-modulus weights whose phases
//! come from a finite codebook; [`crate::dma::compensate_weights`] then maps
//! the result onto realizable Lorentzian weights.

use crate::dma::{
    assemble_analog_bf, compensate_weights, propagation_matrix, AnalogBeamformer,
    MicrostripParams, PropagationMatrix,
};
use crate::estimation::TargetEstimate;
use crate::geometry::{dl_channel, radar_channel, ArrayLayout, Scenario, UeDescriptor};
use crate::linalg::{fro_norm_sq, hermitian_eigen_desc, svd_desc};
use crate::{C64, CMat, CVec, Error, Result};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

const ONE: C64 = C64::new(1.0, 0.0);

/// Finite set of phases available to the relaxed analog weights: 2^bits
/// values uniformly spanning [-pi/2, pi/2].
#[derive(Clone, Debug)]
pub struct PhaseCodebook {
    pub bits: u32,
    pub phases: Vec<f64>,
}

impl PhaseCodebook {
    pub fn new(bits: u32) -> Result<Self> {
        if bits == 0 || bits > 16 {
            return Err(Error::invalid("bits", "codebook resolution must be in 1..=16"));
        }
        let count = 1usize << bits;
        let step = std::f64::consts::PI / count as f64;
        let phases = (0..count)
            .map(|m| -std::f64::consts::FRAC_PI_2 + m as f64 * step)
            .collect();
        Ok(Self { bits, phases })
    }

    /// Index of the codebook phase nearest to `angle` on the circle; exact
    /// ties resolve to the lower index.
    pub fn quantize(&self, angle: f64) -> usize {
        let mut best = (0usize, f64::INFINITY);
        for (m, phi) in self.phases.iter().enumerate() {
            let mut d = (angle - phi).rem_euclid(std::f64::consts::TAU);
            if d > std::f64::consts::PI {
                d = std::f64::consts::TAU - d;
            }
            if d < best.1 {
                best = (m, d);
            }
        }
        best.0
    }
}

/// Digital cancellation matrix D, the exact negative of the effective
/// digital-domain self-interference map it was built from.
#[derive(Clone, Debug)]
pub struct CancellationMatrix {
    pub d_matrix: CMat,
}

/// Complete front-end design: analog beamformers with their microstrip
/// propagation, the digital precoder, the cancellation matrix, and the
/// feasibility verdict against the residual-SI threshold.
#[derive(Clone, Debug)]
pub struct BeamformerSet {
    pub w_tx: AnalogBeamformer,
    pub w_rx: AnalogBeamformer,
    pub p_tx: PropagationMatrix,
    pub p_rx: PropagationMatrix,
    /// N_RF x (U*L) digital precoder, user blocks side by side.
    pub v_digital: CMat,
    pub d_cancel: CancellationMatrix,
    /// Right-singular basis of the canceled SI map, used by the precoders.
    pub b_basis: CMat,
    /// Pre-cancellation SI power per RX microstrip for the final precoder.
    pub si_row_power: Vec<f64>,
    pub feasible: bool,
    pub gamma: f64,
    pub p_max: f64,
}

impl BeamformerSet {
    /// Transmit element-domain chain P_TX W_TX, shape N x N_RF.
    pub fn tx_chain(&self) -> CMat {
        self.p_tx.scale_rows(self.w_tx.matrix())
    }

    /// Receive element-domain chain P_RX W_RX, shape N x N_RF.
    pub fn rx_chain(&self) -> CMat {
        self.p_rx.scale_rows(self.w_rx.matrix())
    }
}

/// Outcome of a relaxed analog search: per-microstrip codebook phases plus
/// the objective value after initialization and after every element visit.
#[derive(Clone, Debug)]
pub struct WeightGridSolution {
    /// `phases[i][n]` is the codebook phase of element n on microstrip i.
    pub phases: Vec<Vec<f64>>,
    /// Objective trace: entry 0 is the initialization value, then one entry
    /// per element visit. Nondecreasing by construction.
    pub objective_trace: Vec<f64>,
    /// Final objective, recomputed from scratch.
    pub objective: f64,
}

impl WeightGridSolution {
    /// Block-sparse unit-modulus matrix of shape N x N_RF: column i carries
    /// e^{j phase} on microstrip i's rows.
    pub fn unit_matrix(&self, layout: &ArrayLayout) -> CMat {
        let (n_rf, n_e) = (self.phases.len(), self.phases[0].len());
        debug_assert_eq!(n_rf, layout.n_rf);
        debug_assert_eq!(n_e, layout.n_e);
        let mut m = CMat::zeros(n_rf * n_e, n_rf);
        for (i, row) in self.phases.iter().enumerate() {
            for (n, phi) in row.iter().enumerate() {
                m[(i * n_e + n, i)] = C64::from_polar(1.0, *phi);
            }
        }
        m
    }

    /// Dense n_rf x n_e grid of the unit-modulus weights, the layout
    /// expected by [`compensate_weights`].
    pub fn row_matrix(&self) -> CMat {
        let (n_rf, n_e) = (self.phases.len(), self.phases[0].len());
        CMat::from_fn(n_rf, n_e, |i, n| C64::from_polar(1.0, self.phases[i][n]))
    }
}

/// Phase angles of a dominant singular direction, rotated so the first
/// significant entry is real positive. The rotation choice is arbitrary
/// for the physics but must be stable: anchoring on the first entry keeps
/// the result independent of floating-point noise in magnitude ties.
fn canonical_phases(direction: &CVec) -> Vec<f64> {
    let peak = direction.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let lead = direction.iter().position(|z| z.norm() > 1e-12 * peak);
    let rot = match lead {
        Some(k) => direction[k].conj() / direction[k].norm(),
        None => ONE,
    };
    direction.iter().map(|z| (z * rot).arg()).collect()
}

/// Global rotations tried when seeding a coordinate search. The matched
/// filter fixes phase differences, not the common phase, and the common
/// phase decides which quantization basin the ascent starts in; a spread
/// of rotated starts lets the 1D searches reach optima that no sequence of
/// single-element moves could cross into from one arbitrary seed.
fn start_rotations(codebook: &PhaseCodebook) -> Vec<f64> {
    let count = (1usize << (codebook.bits + 2)).min(64);
    (0..count)
        .map(|k| k as f64 * std::f64::consts::TAU / count as f64)
        .collect()
}

/// Maximizes ||h_r_hat * W_TX~||^2 over block-sparse unit-modulus weights
/// with codebook phases. The objective decouples per microstrip; each strip
/// runs cyclic per-element exhaustive 1D searches from a quantized
/// matched-filter start until no single-element change improves it.
pub fn solve_op1(
    h_r_hat: &CMat,
    codebook: &PhaseCodebook,
    layout: &ArrayLayout,
) -> Result<WeightGridSolution> {
    let (n_rf, n_e) = (layout.n_rf, layout.n_e);
    if h_r_hat.ncols() != n_rf * n_e {
        return Err(Error::DimensionMismatch(format!(
            "channel has {} columns but the array has {} elements",
            h_r_hat.ncols(),
            n_rf * n_e
        )));
    }

    // The objective decouples per microstrip, so each strip picks the best
    // of its own rotated starts.
    let mut per_strip: Vec<StripRun> = Vec::with_capacity(n_rf);
    for i in 0..n_rf {
        let block = h_r_hat.columns(i * n_e, n_e).into_owned();
        let gram = block.adjoint() * &block;
        if block.norm() == 0.0 {
            per_strip.push(ascend_quadratic(&gram, vec![0; n_e], codebook));
            continue;
        }
        let (_, _, v) = svd_desc(&block);
        let mf_args = canonical_phases(&v.column(0).into_owned());
        let starts = seed_indices(&mf_args, codebook);
        let runs = run_starts(&starts, |init| ascend_quadratic(&gram, init.clone(), codebook));
        per_strip.push(pick_best(runs));
    }

    Ok(assemble_grid_solution(per_strip, codebook))
}

/// One coordinate-ascent run over a single strip's quadratic objective
/// w^H gram w, from the given codebook indices.
struct StripRun {
    indices: Vec<usize>,
    init_objective: f64,
    final_objective: f64,
    /// Objective after each element visit, local to the strip.
    visits: Vec<f64>,
}

/// Deduplicated quantized starts: the matched-filter phases rotated by
/// each global offset.
fn seed_indices(mf_args: &[f64], codebook: &PhaseCodebook) -> Vec<Vec<usize>> {
    let mut starts: Vec<Vec<usize>> = Vec::new();
    for psi in start_rotations(codebook) {
        let idx: Vec<usize> = mf_args.iter().map(|a| codebook.quantize(a + psi)).collect();
        if !starts.contains(&idx) {
            starts.push(idx);
        }
    }
    starts
}

/// Runs the ascent for every start, in parallel when enabled, preserving
/// start order for deterministic tie-breaking.
fn run_starts<F>(starts: &[Vec<usize>], run: F) -> Vec<StripRun>
where
    F: Fn(&Vec<usize>) -> StripRun + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        starts.par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        starts.iter().map(run).collect()
    }
}

/// Best final objective wins; earlier starts win ties. Starts whose finals
/// agree to within relative 1e-12 count as tied, so rotation-equivalent
/// optima resolve deterministically instead of by rounding noise.
fn pick_best(runs: Vec<StripRun>) -> StripRun {
    let top = runs
        .iter()
        .map(|r| r.final_objective)
        .fold(f64::NEG_INFINITY, f64::max);
    let floor = top - top.abs() * 1e-12;
    runs.into_iter()
        .find(|r| r.final_objective >= floor)
        .expect("at least one start")
}

/// Cyclic exhaustive 1D codebook searches on w^H gram w until no single
/// element change improves it.
fn ascend_quadratic(gram: &CMat, init: Vec<usize>, codebook: &PhaseCodebook) -> StripRun {
    let n_e = init.len();
    let mut indices = init;
    let mut weights =
        CVec::from_iterator(n_e, indices.iter().map(|m| C64::from_polar(1.0, codebook.phases[*m])));
    let mut s = gram * &weights;
    let mut objective = (weights.adjoint() * &s)[(0, 0)].re;
    let init_objective = objective;
    let mut visits = Vec::new();

    for _sweep in 0..64 {
        let mut changed = false;
        for n in 0..n_e {
            // Objective restricted to element n: const + 2 Re(conj(w_n) t_n)
            // with t_n independent of w_n.
            let t_n = s[n] - gram[(n, n)] * weights[n];
            let current = 2.0 * (weights[n].conj() * t_n).re;
            let mut best: Option<(usize, f64)> = None;
            for (m, phi) in codebook.phases.iter().enumerate() {
                let gain = 2.0 * (C64::from_polar(1.0, -phi) * t_n).re;
                if best.map_or(true, |(_, g)| gain > g) {
                    best = Some((m, gain));
                }
            }
            let (m_best, gain_best) = best.expect("codebook is nonempty");
            if gain_best > current {
                let new_w = C64::from_polar(1.0, codebook.phases[m_best]);
                let delta = new_w - weights[n];
                objective += gain_best - current;
                let col = gram.column(n).into_owned();
                s += col * delta;
                weights[n] = new_w;
                indices[n] = m_best;
                changed = true;
            }
            visits.push(objective);
        }
        if !changed {
            break;
        }
    }

    // Refresh the objective from scratch to shed incremental rounding.
    let s = gram * &weights;
    let objective = (weights.adjoint() * &s)[(0, 0)].re;
    StripRun { indices, init_objective, final_objective: objective, visits }
}

/// Stitches independent per-strip runs into one solution whose trace is
/// globally nondecreasing: strip i's visits ride on the final objectives
/// of earlier strips plus the initial objectives of later ones.
fn assemble_grid_solution(per_strip: Vec<StripRun>, codebook: &PhaseCodebook) -> WeightGridSolution {
    let inits: Vec<f64> = per_strip.iter().map(|r| r.init_objective).collect();
    let finals: Vec<f64> = per_strip.iter().map(|r| r.final_objective).collect();
    let total_init: f64 = inits.iter().sum();
    let mut trace = vec![total_init];
    let mut done: f64 = 0.0;
    for (i, run) in per_strip.iter().enumerate() {
        let pending: f64 = inits[i + 1..].iter().sum();
        for v in &run.visits {
            trace.push(done + v + pending);
        }
        done += finals[i];
    }
    WeightGridSolution {
        phases: per_strip
            .iter()
            .map(|r| r.indices.iter().map(|m| codebook.phases[*m]).collect())
            .collect(),
        objective_trace: trace,
        objective: finals.iter().sum(),
    }
}

/// Maximizes the ratio ||W_RX~^H h_r_hat W_TX~||^2 / ||W_RX~^H h_si W_TX~||^2
/// over the receive weights, the transmit weights being fixed. The
/// denominator is floored to keep the ratio defined when the SI projection
/// vanishes. Same search strategy as [`solve_op1`] applied to the global
/// ratio (which couples the strips through the shared denominator).
pub fn solve_op2(
    h_r_hat: &CMat,
    h_si: &CMat,
    w_tx_tilde: &CMat,
    codebook: &PhaseCodebook,
    layout: &ArrayLayout,
) -> Result<WeightGridSolution> {
    let (n_rf, n_e) = (layout.n_rf, layout.n_e);
    let n = n_rf * n_e;
    if h_r_hat.nrows() != n || h_si.nrows() != n || w_tx_tilde.nrows() != n {
        return Err(Error::DimensionMismatch(
            "channel and weight shapes must agree with the array".into(),
        ));
    }

    // Fixed right-hand products: the receive weights only see these.
    let r_full = h_r_hat * w_tx_tilde; // N x N_RF
    let s_full = h_si * w_tx_tilde; // N x N_RF
    let eps = (1e-12 * fro_norm_sq(&s_full)).max(1e-100);

    let conj_rows = |block: &CMat| -> Vec<CVec> {
        (0..block.nrows())
            .map(|k| CVec::from_iterator(block.ncols(), block.row(k).iter().map(|z| z.conj())))
            .collect()
    };

    struct StripData {
        r_rows: Vec<CVec>,
        s_rows: Vec<CVec>,
        mf_args: Vec<f64>,
    }

    let mut data: Vec<StripData> = Vec::with_capacity(n_rf);
    for i in 0..n_rf {
        let r_block = r_full.rows(i * n_e, n_e).into_owned();
        let s_block = s_full.rows(i * n_e, n_e).into_owned();
        let mf_args = if r_block.norm() == 0.0 {
            vec![codebook.phases[0]; n_e]
        } else {
            let (u, _, _) = svd_desc(&r_block);
            canonical_phases(&u.column(0).into_owned())
        };
        data.push(StripData { r_rows: conj_rows(&r_block), s_rows: conj_rows(&s_block), mf_args });
    }

    // The ratio couples the strips through the shared denominator, so one
    // global ascent runs per rotated start.
    struct Op2Run {
        indices: Vec<Vec<usize>>,
        trace: Vec<f64>,
        objective: f64,
    }

    let ascend = |init: &Vec<Vec<usize>>| -> Op2Run {
        let mut indices = init.clone();
        let mut weights: Vec<CVec> = indices
            .iter()
            .map(|row| {
                CVec::from_iterator(n_e, row.iter().map(|m| C64::from_polar(1.0, codebook.phases[*m])))
            })
            .collect();
        let mut r_proj: Vec<CVec> = Vec::with_capacity(n_rf);
        let mut s_proj: Vec<CVec> = Vec::with_capacity(n_rf);
        for (i, st) in data.iter().enumerate() {
            let mut r = CVec::zeros(n_rf);
            let mut s = CVec::zeros(n_rf);
            for (e, w) in weights[i].iter().enumerate() {
                r += &st.r_rows[e] * *w;
                s += &st.s_rows[e] * *w;
            }
            r_proj.push(r);
            s_proj.push(s);
        }
        let mut num: f64 = r_proj.iter().map(|v| v.norm_squared()).sum();
        let mut den: f64 = s_proj.iter().map(|v| v.norm_squared()).sum();
        let ratio = |num: f64, den: f64| num / den.max(eps);
        let mut trace = vec![ratio(num, den)];

        for _sweep in 0..64 {
            let mut changed = false;
            for i in 0..n_rf {
                for e in 0..n_e {
                    let num_i = r_proj[i].norm_squared();
                    let den_i = s_proj[i].norm_squared();
                    let current = ratio(num, den);
                    let mut best: Option<(usize, f64, f64, f64)> = None;
                    for (m, phi) in codebook.phases.iter().enumerate() {
                        let delta = C64::from_polar(1.0, *phi) - weights[i][e];
                        if delta.norm() == 0.0 {
                            continue;
                        }
                        let num_new =
                            num - num_i + (&r_proj[i] + &data[i].r_rows[e] * delta).norm_squared();
                        let den_new =
                            den - den_i + (&s_proj[i] + &data[i].s_rows[e] * delta).norm_squared();
                        let r = ratio(num_new, den_new);
                        if best.map_or(true, |(_, g, _, _)| r > g) {
                            best = Some((m, r, num_new, den_new));
                        }
                    }
                    if let Some((m, r, num_new, den_new)) = best {
                        if r > current {
                            let new_w = C64::from_polar(1.0, codebook.phases[m]);
                            let delta = new_w - weights[i][e];
                            let radd = &data[i].r_rows[e] * delta;
                            let sadd = &data[i].s_rows[e] * delta;
                            r_proj[i] += radd;
                            s_proj[i] += sadd;
                            weights[i][e] = new_w;
                            indices[i][e] = m;
                            num = num_new;
                            den = den_new;
                            changed = true;
                        }
                    }
                    trace.push(ratio(num, den));
                }
            }
            if !changed {
                break;
            }
        }

        // Recompute the final objective from scratch.
        let num: f64 = r_proj.iter().map(|v| v.norm_squared()).sum();
        let den: f64 = s_proj.iter().map(|v| v.norm_squared()).sum();
        Op2Run { indices, trace, objective: ratio(num, den) }
    };

    let mut starts: Vec<Vec<Vec<usize>>> = Vec::new();
    for psi in start_rotations(codebook) {
        let idx: Vec<Vec<usize>> = data
            .iter()
            .map(|st| st.mf_args.iter().map(|a| codebook.quantize(a + psi)).collect())
            .collect();
        if !starts.contains(&idx) {
            starts.push(idx);
        }
    }
    #[cfg(feature = "parallel")]
    let runs: Vec<Op2Run> = starts.par_iter().map(ascend).collect();
    #[cfg(not(feature = "parallel"))]
    let runs: Vec<Op2Run> = starts.iter().map(ascend).collect();
    let top = runs.iter().map(|r| r.objective).fold(f64::NEG_INFINITY, f64::max);
    let floor = top - top.abs() * 1e-12;
    let best = runs
        .into_iter()
        .find(|r| r.objective >= floor)
        .expect("at least one start");

    Ok(WeightGridSolution {
        phases: best
            .indices
            .iter()
            .map(|row| row.iter().map(|m| codebook.phases[*m]).collect())
            .collect(),
        objective_trace: best.trace,
        objective: best.objective,
    })
}

/// Exact digital SI canceller: D = -(W_RX^H P_RX^H h_si P_TX W_TX), plus
/// the right-singular basis B of the canceled map (identity when the map
/// is zero).
pub fn digital_si_canceller(
    w_rx: &AnalogBeamformer,
    p_rx: &PropagationMatrix,
    h_si: &CMat,
    p_tx: &PropagationMatrix,
    w_tx: &AnalogBeamformer,
) -> Result<(CancellationMatrix, CMat)> {
    let rx_chain = p_rx.scale_rows(w_rx.matrix());
    let tx_chain = p_tx.scale_rows(w_tx.matrix());
    if h_si.nrows() != rx_chain.nrows() || h_si.ncols() != tx_chain.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "SI channel is {}x{} but the chains expect {}x{}",
            h_si.nrows(),
            h_si.ncols(),
            rx_chain.nrows(),
            tx_chain.nrows()
        )));
    }
    let w_si = rx_chain.adjoint() * h_si * tx_chain;
    let n_rf = w_si.nrows();
    let b = if fro_norm_sq(&w_si) == 0.0 {
        CMat::identity(n_rf, n_rf)
    } else {
        let (_, _, v) = svd_desc(&w_si);
        v
    };
    Ok((CancellationMatrix { d_matrix: -w_si }, b))
}

/// Rescales V so the radiated power ||P_TX W_TX V||^2 equals the budget
/// exactly; leaves an all-zero precoder untouched.
fn rescale_to_budget(v: &mut CMat, tx_chain: &CMat, p_max: f64) {
    let power = fro_norm_sq(&(tx_chain * &*v));
    if power > 0.0 && power.is_finite() {
        *v *= C64::new((p_max / power).sqrt(), 0.0);
    }
}

/// Single-user digital precoder: V = B G with G = sqrt(P_max) E, E the
/// top-L right-singular directions of the effective channel
/// h_dl_hat P_TX W_TX B, then rescaled to meet the power budget exactly.
pub fn single_user_precoder(
    h_dl_hat: &CMat,
    p_tx: &PropagationMatrix,
    w_tx: &AnalogBeamformer,
    b_basis: &CMat,
    p_max: f64,
) -> Result<CMat> {
    let tx_chain = p_tx.scale_rows(w_tx.matrix());
    let l = h_dl_hat.nrows();
    let n_rf = b_basis.ncols();
    if l > n_rf {
        return Err(Error::invalid(
            "h_dl_hat",
            format!("{l} streams exceed {n_rf} RF chains"),
        ));
    }
    if p_max < 0.0 {
        return Err(Error::invalid("p_max", "power budget must be nonnegative"));
    }
    let h_eff = h_dl_hat * &tx_chain * b_basis;
    let (_, _, v_sv) = svd_desc(&h_eff);
    let e = v_sv.columns(0, l).into_owned();
    let mut v = b_basis * e * C64::new(p_max.sqrt(), 0.0);
    rescale_to_budget(&mut v, &tx_chain, p_max);
    Ok(v)
}

/// Block-diagonalization precoder for U >= 2 users. F holds the last
/// `alpha` columns of B; per user the precoder lives in the null space of
/// the other users' effective channels, carrying up to L streams each
/// (columns beyond the available null-space dimension stay zero). The
/// stacked result is rescaled to meet the power budget exactly.
pub fn block_diag_precoder(
    h_dl_hats: &[CMat],
    p_tx: &PropagationMatrix,
    w_tx: &AnalogBeamformer,
    b_basis: &CMat,
    p_max: f64,
    alpha: usize,
) -> Result<CMat> {
    let u_users = h_dl_hats.len();
    if u_users < 2 {
        return Err(Error::invalid("h_dl_hats", "block diagonalization needs U >= 2 users"));
    }
    let l = h_dl_hats[0].nrows();
    if h_dl_hats.iter().any(|h| h.nrows() != l) {
        return Err(Error::DimensionMismatch("users must have equal antenna counts".into()));
    }
    let n_rf = b_basis.ncols();
    if alpha > n_rf {
        return Err(Error::invalid("alpha", format!("{alpha} exceeds {n_rf} RF chains")));
    }
    if alpha <= (u_users - 1) * l {
        return Err(Error::BdInfeasible(format!(
            "alpha = {alpha} leaves no null space against {} interfering streams",
            (u_users - 1) * l
        )));
    }

    let tx_chain = p_tx.scale_rows(w_tx.matrix());
    let f = b_basis.columns(n_rf - alpha, alpha).into_owned();
    let h_effs: Vec<CMat> = h_dl_hats.iter().map(|h| h * &tx_chain * &f).collect();

    let dim_null = alpha - (u_users - 1) * l;
    let mut v = CMat::zeros(n_rf, u_users * l);
    for u in 0..u_users {
        // Stack the other users' effective channels and take the trailing
        // eigenvectors of the Gram matrix as an orthonormal null-space basis.
        let mut stacked = CMat::zeros((u_users - 1) * l, alpha);
        let mut row = 0;
        for (other, h) in h_effs.iter().enumerate() {
            if other != u {
                stacked.rows_mut(row, l).copy_from(h);
                row += l;
            }
        }
        let gram = stacked.adjoint() * &stacked;
        let (_, vectors) = hermitian_eigen_desc(&gram);
        let e_bar = vectors.columns(alpha - dim_null, dim_null).into_owned();

        let h_in_null = &h_effs[u] * &e_bar;
        let channel_scale = h_effs[u].norm();
        if h_in_null.norm() <= 1e-9 * channel_scale || channel_scale == 0.0 {
            return Err(Error::BdInfeasible(format!(
                "user {u} has no usable signal inside the protected null space"
            )));
        }
        let streams = l.min(dim_null);
        let (_, _, v_sv) = svd_desc(&h_in_null);
        let e_u = v_sv.columns(0, streams).into_owned();
        let g_u = &e_bar * e_u * C64::new((p_max / u_users as f64).sqrt(), 0.0);
        let v_u = &f * g_u;
        v.view_mut((0, u * l), (n_rf, streams)).copy_from(&v_u);
    }
    rescale_to_budget(&mut v, &tx_chain, p_max);
    Ok(v)
}

/// Per-RX-microstrip pre-cancellation SI power check against gamma.
#[derive(Clone, Debug)]
pub struct SiCheck {
    /// ||row i of W_RX^H P_RX^H h_si P_TX W_TX V||^2 per RX microstrip.
    pub row_power: Vec<f64>,
    pub row_ok: Vec<bool>,
    pub feasible: bool,
}

/// Evaluates the per-microstrip residual-SI constraint on the
/// pre-cancellation effective SI map (the analog front end sees this power
/// regardless of the digital canceller).
pub fn check_si_constraint(
    w_rx: &AnalogBeamformer,
    p_rx: &PropagationMatrix,
    h_si: &CMat,
    p_tx: &PropagationMatrix,
    w_tx: &AnalogBeamformer,
    v: &CMat,
    gamma: f64,
) -> Result<SiCheck> {
    if gamma < 0.0 {
        return Err(Error::invalid("gamma", "threshold must be nonnegative"));
    }
    let rx_chain = p_rx.scale_rows(w_rx.matrix());
    let tx_chain = p_tx.scale_rows(w_tx.matrix());
    let effective = rx_chain.adjoint() * h_si * tx_chain * v;
    let row_power: Vec<f64> = (0..effective.nrows())
        .map(|i| effective.row(i).norm_squared())
        .collect();
    let row_ok: Vec<bool> = row_power.iter().map(|p| *p <= gamma).collect();
    let feasible = row_ok.iter().all(|ok| *ok);
    Ok(SiCheck { row_power, row_ok, feasible })
}

/// Estimated radar SNR: beamformed target return over residual SI plus
/// combiner-colored noise.
pub fn snr_radar(set: &BeamformerSet, h_r_hat: &CMat, sigma2: f64) -> Result<f64> {
    if sigma2 < 0.0 {
        return Err(Error::invalid("sigma2", "noise power must be nonnegative"));
    }
    let rx_chain = set.rx_chain();
    let tx_chain = set.tx_chain();
    let num = fro_norm_sq(&(rx_chain.adjoint() * h_r_hat * (&tx_chain * &set.v_digital)));
    let residual = fro_norm_sq(&(&set.d_cancel.d_matrix * &set.v_digital));
    let den = residual + fro_norm_sq(&rx_chain) * sigma2;
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok(num / den)
}

/// Estimated downlink SNR: sum over users of the beamformed channel power
/// scaled by the inverse per-user noise power.
pub fn snr_dl(set: &BeamformerSet, h_dl_hats: &[CMat], sigma_u2: &[f64]) -> Result<f64> {
    if h_dl_hats.len() != sigma_u2.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} channels but {} noise powers",
            h_dl_hats.len(),
            sigma_u2.len()
        )));
    }
    if sigma_u2.iter().any(|s| *s <= 0.0) {
        return Err(Error::invalid("sigma_u2", "per-user noise powers must be positive"));
    }
    let tx_chain = set.tx_chain();
    let radiated = &tx_chain * &set.v_digital;
    Ok(h_dl_hats
        .iter()
        .zip(sigma_u2)
        .map(|(h, s2)| fro_norm_sq(&(h * &radiated)) / s2)
        .sum())
}

/// Static design inputs for [`design_isac`].
pub struct DesignInputs<'a> {
    pub layout: &'a ArrayLayout,
    pub tx_params: &'a MicrostripParams,
    pub rx_params: &'a MicrostripParams,
    /// Number of downlink users; the first `u_users` estimates are treated
    /// as the user positions.
    pub u_users: usize,
    /// Antennas per user terminal.
    pub l_antennas: usize,
    /// Spacing of the user's uniform linear array.
    pub ue_spacing: f64,
    pub p_max: f64,
    pub gamma: f64,
    pub codebook: &'a PhaseCodebook,
}

/// End-to-end beamformer design from target estimates: build the estimated
/// radar and downlink channels, solve the transmit then receive analog
/// searches, realize the weights on the Lorentzian circle, cancel the
/// digital SI exactly, and pick the digital precoder (single-user, or
/// block diagonalization with a descending retained-column search) subject
/// to the per-microstrip SI constraint.
pub fn design_isac(
    estimates: &[TargetEstimate],
    h_si: &CMat,
    inputs: &DesignInputs<'_>,
) -> Result<BeamformerSet> {
    let k = estimates.len();
    if k == 0 {
        return Err(Error::invalid("estimates", "need at least one target estimate"));
    }
    if inputs.u_users == 0 || inputs.u_users > k {
        return Err(Error::invalid(
            "u_users",
            format!("user count must be in 1..={k}, got {}", inputs.u_users),
        ));
    }
    if inputs.p_max < 0.0 {
        return Err(Error::invalid("p_max", "power budget must be nonnegative"));
    }
    let layout = inputs.layout;

    // Estimated radar channel, reflection coefficients omitted.
    let coords: Vec<_> = estimates.iter().map(|e| e.coord).collect();
    let scenario = Scenario {
        targets: coords.clone(),
        ues: vec![],
        reflection_coeffs: vec![ONE; k],
    };
    let h_r_hat = radar_channel(&scenario, layout, false)?;

    // Analog stage: transmit search, then receive search against the fixed
    // transmit weights, then realization on the Lorentzian circle.
    let op1 = solve_op1(&h_r_hat, inputs.codebook, layout)?;
    let w_tx_tilde = op1.unit_matrix(layout);
    let op2 = solve_op2(&h_r_hat, h_si, &w_tx_tilde, inputs.codebook, layout)?;

    let w_tx = assemble_analog_bf(compensate_weights(&op1.row_matrix(), inputs.tx_params)?)?;
    let w_rx = assemble_analog_bf(compensate_weights(&op2.row_matrix(), inputs.rx_params)?)?;
    let p_tx = propagation_matrix(inputs.tx_params, layout)?;
    let p_rx = propagation_matrix(inputs.rx_params, layout)?;

    let (d_cancel, b_basis) = digital_si_canceller(&w_rx, &p_rx, h_si, &p_tx, &w_tx)?;

    // Estimated downlink channels for the first U estimates.
    let mut h_dl_hats = Vec::with_capacity(inputs.u_users);
    for coord in coords.iter().take(inputs.u_users) {
        let ue = UeDescriptor {
            coord: *coord,
            l_antennas: inputs.l_antennas,
            ula_spacing: inputs.ue_spacing,
        };
        h_dl_hats.push(dl_channel(&ue, layout)?);
    }

    let build = |v_digital: CMat, feasible: bool, check: SiCheck| BeamformerSet {
        w_tx: w_tx.clone(),
        w_rx: w_rx.clone(),
        p_tx: p_tx.clone(),
        p_rx: p_rx.clone(),
        v_digital,
        d_cancel: d_cancel.clone(),
        b_basis: b_basis.clone(),
        si_row_power: check.row_power,
        feasible,
        gamma: inputs.gamma,
        p_max: inputs.p_max,
    };

    if inputs.u_users == 1 {
        let v = single_user_precoder(&h_dl_hats[0], &p_tx, &w_tx, &b_basis, inputs.p_max)?;
        let check = check_si_constraint(&w_rx, &p_rx, h_si, &p_tx, &w_tx, &v, inputs.gamma)?;
        let feasible = check.feasible;
        return Ok(build(v, feasible, check));
    }

    // Multi-user: retained-column search from N_RF downward, stopping at
    // the first SI-feasible block-diagonalized design.
    let floor = (inputs.u_users - 1) * inputs.l_antennas;
    let mut last: Option<(CMat, SiCheck)> = None;
    for alpha in (floor + 1..=layout.n_rf).rev() {
        let v = match block_diag_precoder(
            &h_dl_hats,
            &p_tx,
            &w_tx,
            &b_basis,
            inputs.p_max,
            alpha,
        ) {
            Ok(v) => v,
            Err(Error::BdInfeasible(_)) => continue,
            Err(e) => return Err(e),
        };
        let check = check_si_constraint(&w_rx, &p_rx, h_si, &p_tx, &w_tx, &v, inputs.gamma)?;
        if check.feasible {
            return Ok(build(v, true, check));
        }
        last = Some((v, check));
    }
    let (v, check) = match last {
        Some(pair) => pair,
        None => {
            let v = CMat::zeros(layout.n_rf, inputs.u_users * inputs.l_antennas);
            let check = check_si_constraint(&w_rx, &p_rx, h_si, &p_tx, &w_tx, &v, inputs.gamma)?;
            (v, check)
        }
    };
    Ok(build(v, false, check))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{si_channel, SphericalCoord};
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    const ZERO: C64 = C64::new(0.0, 0.0);

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn pseudo(seed: usize) -> f64 {
        let x = (seed as f64 * 12.9898 + 4.1414).sin() * 43758.5453;
        x - x.floor()
    }

    fn rnd_c(seed: usize) -> C64 {
        C64::from_polar(0.2 + pseudo(seed), (pseudo(seed + 1) - 0.5) * 2.0 * PI)
    }

    fn rnd_mat(rows: usize, cols: usize, seed: usize) -> CMat {
        CMat::from_fn(rows, cols, |i, j| rnd_c(seed + 17 * i + 31 * j))
    }

    fn toy_layout(n_rf: usize, n_e: usize) -> ArrayLayout {
        ArrayLayout::new(n_rf, n_e)
    }

    fn unit_col(phases: &[f64]) -> CVec {
        CVec::from_iterator(phases.len(), phases.iter().map(|p| C64::from_polar(1.0, *p)))
    }

    #[test]
    fn codebook_spans_half_circle_and_contains_expected_phases() {
        let cb = PhaseCodebook::new(3).unwrap();
        assert_eq!(cb.phases.len(), 8);
        assert!(cb.phases.windows(2).all(|w| w[1] > w[0]));
        assert!(cb.phases.iter().all(|p| (-FRAC_PI_2..=FRAC_PI_2).contains(p)));
        assert!(cb.phases.iter().any(|p| *p == 0.0));
        assert!(cb.phases.iter().any(|p| (*p - FRAC_PI_4).abs() < 1e-15));
        assert!(PhaseCodebook::new(0).is_err());
    }

    #[test]
    fn quantize_picks_nearest_phase_on_the_circle() {
        let cb = PhaseCodebook::new(3).unwrap();
        assert_eq!(cb.phases[cb.quantize(0.01)], 0.0);
        // 3 pi / 4 wraps toward +pi/2 territory: nearest is 3 pi / 8.
        assert_eq!(cb.quantize(3.0 * PI / 4.0), 7);
        // Antipodal region resolves deterministically.
        let idx = cb.quantize(PI);
        assert_eq!(idx, 0);
    }

    #[test]
    fn op1_aligns_to_a_rank_one_channel() {
        let layout = toy_layout(1, 2);
        let cb = PhaseCodebook::new(3).unwrap();
        let a = CVec::from_vec(vec![c(0.3, 0.4), c(-1.1, 0.2)]);
        let row = CMat::from_row_slice(1, 2, &[c(1.0, 0.0), C64::from_polar(1.0, -FRAC_PI_4)]);
        let h = &a * row;
        let sol = solve_op1(&h, &cb, &layout).unwrap();
        assert_eq!(sol.phases[0], vec![0.0, cb.phases[6]]);
        assert_relative_eq!(sol.objective, 4.0 * a.norm_squared(), max_relative = 1e-12);
    }

    #[test]
    fn op1_zero_channel_returns_first_codebook_phase() {
        let layout = toy_layout(2, 2);
        let cb = PhaseCodebook::new(3).unwrap();
        let h = CMat::zeros(4, 4);
        let sol = solve_op1(&h, &cb, &layout).unwrap();
        for row in &sol.phases {
            assert!(row.iter().all(|p| *p == cb.phases[0]));
        }
        assert_eq!(sol.objective, 0.0);
    }

    fn op1_brute_force(h: &CMat, cb: &PhaseCodebook, layout: &ArrayLayout) -> f64 {
        let n = layout.total_elements();
        let count = cb.phases.len();
        let mut best = f64::NEG_INFINITY;
        let mut idx = vec![0usize; n];
        loop {
            let mut w = CMat::zeros(n, layout.n_rf);
            for i in 0..layout.n_rf {
                for e in 0..layout.n_e {
                    let k = i * layout.n_e + e;
                    w[(k, i)] = C64::from_polar(1.0, cb.phases[idx[k]]);
                }
            }
            best = best.max(fro_norm_sq(&(h * w)));
            let mut pos = 0;
            loop {
                if pos == n {
                    return best;
                }
                idx[pos] += 1;
                if idx[pos] < count {
                    break;
                }
                idx[pos] = 0;
                pos += 1;
            }
        }
    }

    #[test]
    fn op1_matches_exhaustive_search_on_a_random_instance() {
        let layout = toy_layout(2, 2);
        let cb = PhaseCodebook::new(4).unwrap();
        let h = rnd_mat(4, 4, 3);
        let sol = solve_op1(&h, &cb, &layout).unwrap();
        let best = op1_brute_force(&h, &cb, &layout);
        assert_relative_eq!(sol.objective, best, max_relative = 1e-9);
    }

    #[test]
    fn op1_trace_is_nondecreasing() {
        let layout = toy_layout(2, 3);
        let cb = PhaseCodebook::new(4).unwrap();
        let h = rnd_mat(6, 6, 11);
        let sol = solve_op1(&h, &cb, &layout).unwrap();
        assert!(sol.objective_trace.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }

    #[test]
    fn op2_with_zero_si_reduces_to_op1_on_the_receive_side() {
        let layout = toy_layout(1, 4);
        let cb = PhaseCodebook::new(4).unwrap();
        let h_r = rnd_mat(4, 4, 23);
        let h_si = CMat::zeros(4, 4);
        let w_tx = solve_op1(&h_r, &cb, &layout).unwrap().unit_matrix(&layout);
        let op2 = solve_op2(&h_r, &h_si, &w_tx, &cb, &layout).unwrap();
        // Numerator-only problem: identical to the transmit search applied
        // to the adjoint of the fixed product.
        let m_adj = (&h_r * &w_tx).adjoint();
        let op1_rx = solve_op1(&m_adj, &cb, &layout).unwrap();
        assert_eq!(op2.phases, op1_rx.phases);
        assert_relative_eq!(
            op2.objective * (1e-12 * 0.0f64).max(1e-100),
            op1_rx.objective,
            max_relative = 1e-9
        );
    }

    #[test]
    fn op2_matches_exhaustive_ratio_search_on_a_toy_instance() {
        let layout = toy_layout(1, 2);
        let cb = PhaseCodebook::new(3).unwrap();
        let h_r = rnd_mat(2, 2, 41);
        let h_si = rnd_mat(2, 2, 57);
        let w_tx_phases = vec![cb.phases[2], cb.phases[5]];
        let mut w_tx = CMat::zeros(2, 1);
        w_tx[(0, 0)] = C64::from_polar(1.0, w_tx_phases[0]);
        w_tx[(1, 0)] = C64::from_polar(1.0, w_tx_phases[1]);

        let sol = solve_op2(&h_r, &h_si, &w_tx, &cb, &layout).unwrap();

        let r = &h_r * &w_tx;
        let s = &h_si * &w_tx;
        let eps = (1e-12 * fro_norm_sq(&s)).max(1e-100);
        let mut best = f64::NEG_INFINITY;
        for p0 in &cb.phases {
            for p1 in &cb.phases {
                let w = unit_col(&[*p0, *p1]);
                let num = (w.adjoint() * &r).norm_squared();
                let den = (w.adjoint() * &s).norm_squared();
                best = best.max(num / den.max(eps));
            }
        }
        assert_relative_eq!(sol.objective, best, max_relative = 1e-9);
    }

    #[test]
    fn op2_improves_on_the_matched_filter_initialization() {
        let layout = toy_layout(1, 4);
        let cb = PhaseCodebook::new(4).unwrap();
        // Signal concentrated on the first two elements, SI on the last two:
        // the matched filter chases the numerator, the ratio search must
        // also suppress the denominator.
        let mut h_r = CMat::zeros(4, 4);
        h_r[(0, 0)] = c(1.0, 0.0);
        h_r[(0, 1)] = c(0.0, 0.8);
        h_r[(1, 2)] = c(0.3, 0.0);
        let mut h_si = CMat::zeros(4, 4);
        h_si[(2, 2)] = c(0.9, 0.1);
        h_si[(3, 1)] = c(0.5, -0.4);
        h_si[(2, 0)] = c(0.2, 0.3);
        let w_tx = solve_op1(&h_r, &cb, &layout).unwrap().unit_matrix(&layout);
        let sol = solve_op2(&h_r, &h_si, &w_tx, &cb, &layout).unwrap();
        let init = sol.objective_trace[0];
        assert!(sol.objective > init);
        assert!(sol
            .objective_trace
            .windows(2)
            .all(|w| w[1] >= w[0] * (1.0 - 1e-12)));
    }

    fn toy_beamformers(layout: &ArrayLayout, seed: usize) -> (AnalogBeamformer, AnalogBeamformer, PropagationMatrix, PropagationMatrix) {
        let params = MicrostripParams::lossless(layout);
        let grid = CMat::from_fn(layout.n_rf, layout.n_e, |i, n| {
            C64::from_polar(1.0, (pseudo(seed + i * layout.n_e + n) - 0.5) * PI)
        });
        let w_tx = assemble_analog_bf(compensate_weights(&grid, &params).unwrap()).unwrap();
        let grid_rx = CMat::from_fn(layout.n_rf, layout.n_e, |i, n| {
            C64::from_polar(1.0, (pseudo(seed + 100 + i * layout.n_e + n) - 0.5) * PI)
        });
        let w_rx = assemble_analog_bf(compensate_weights(&grid_rx, &params).unwrap()).unwrap();
        let p = propagation_matrix(&params, layout).unwrap();
        (w_tx, w_rx, p.clone(), p)
    }

    #[test]
    fn canceller_negates_the_effective_si_exactly() {
        let layout = toy_layout(3, 4);
        let (w_tx, w_rx, p_tx, p_rx) = toy_beamformers(&layout, 5);
        let h_si = rnd_mat(12, 12, 71);
        let (d, b) = digital_si_canceller(&w_rx, &p_rx, &h_si, &p_tx, &w_tx).unwrap();
        let w_si = p_rx.scale_rows(w_rx.matrix()).adjoint() * &h_si * p_tx.scale_rows(w_tx.matrix());
        assert!((w_si + &d.d_matrix).norm() < 1e-14 * d.d_matrix.norm().max(1.0));
        assert!((b.adjoint() * &b - CMat::identity(3, 3)).norm() < 1e-10);
    }

    #[test]
    fn canceller_with_zero_si_returns_zero_and_an_orthonormal_basis() {
        let layout = toy_layout(2, 3);
        let (w_tx, w_rx, p_tx, p_rx) = toy_beamformers(&layout, 9);
        let h_si = CMat::zeros(6, 6);
        let (d, b) = digital_si_canceller(&w_rx, &p_rx, &h_si, &p_tx, &w_tx).unwrap();
        assert_eq!(d.d_matrix.norm(), 0.0);
        assert!((b.adjoint() * &b - CMat::identity(2, 2)).norm() < 1e-10);
    }

    /// Pseudo-inverse through the SVD, for constructing channels with a
    /// prescribed effective product.
    fn pinv(m: &CMat) -> CMat {
        let (u, sigma, v) = svd_desc(m);
        let tol = 1e-12 * sigma.first().copied().unwrap_or(0.0).max(1e-300);
        let inv = CMat::from_fn(sigma.len(), sigma.len(), |i, j| {
            if i == j && sigma[i] > tol {
                c(1.0 / sigma[i], 0.0)
            } else {
                ZERO
            }
        });
        &v * inv * u.adjoint()
    }

    #[test]
    fn single_user_precoder_follows_the_singular_directions() {
        let layout = toy_layout(3, 4);
        let (w_tx, _, p_tx, _) = toy_beamformers(&layout, 13);
        let chain = p_tx.scale_rows(w_tx.matrix());
        let b = CMat::identity(3, 3);
        // Effective channel diag(3, 2, 1) by construction.
        let target = CMat::from_diagonal(&CVec::from_vec(vec![c(3.0, 0.0), c(2.0, 0.0), c(1.0, 0.0)]));
        let h_dl = &target * pinv(&chain);
        let p_max = 0.5;
        let v = single_user_precoder(&h_dl, &p_tx, &w_tx, &b, p_max).unwrap();
        // Power budget met with equality.
        assert_relative_eq!(fro_norm_sq(&(&chain * &v)), p_max, max_relative = 1e-9);
        // V = B G with G diagonal up to phases: off-diagonal mass vanishes.
        let g = b.adjoint() * &v;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(g[(i, j)].norm() < 1e-8 * g[(j, j)].norm());
                }
            }
        }
        // Received column powers track the singular values 3 : 2 : 1.
        let rx = &h_dl * &chain * &v;
        let n0 = rx.column(0).norm();
        assert_relative_eq!(rx.column(1).norm() / n0, 2.0 / 3.0, max_relative = 1e-6);
        assert_relative_eq!(rx.column(2).norm() / n0, 1.0 / 3.0, max_relative = 1e-6);
    }

    #[test]
    fn single_user_precoder_with_zero_budget_is_zero() {
        let layout = toy_layout(3, 4);
        let (w_tx, _, p_tx, _) = toy_beamformers(&layout, 17);
        let b = CMat::identity(3, 3);
        let h_dl = rnd_mat(2, 12, 83);
        let v = single_user_precoder(&h_dl, &p_tx, &w_tx, &b, 0.0).unwrap();
        assert_eq!(v.norm(), 0.0);
    }

    #[test]
    fn single_user_precoder_concentrates_power_for_a_rank_one_channel() {
        let layout = toy_layout(3, 4);
        let (w_tx, _, p_tx, _) = toy_beamformers(&layout, 19);
        let b = CMat::identity(3, 3);
        let a = CMat::from_fn(2, 1, |i, _| rnd_c(200 + i));
        let row = CMat::from_fn(1, 12, |_, j| rnd_c(300 + j));
        let h_dl = &a * row;
        let v = single_user_precoder(&h_dl, &p_tx, &w_tx, &b, 1.0).unwrap();
        let chain = p_tx.scale_rows(w_tx.matrix());
        let h_eff = &h_dl * &chain * &b;
        let received = &h_eff * b.adjoint() * &v;
        assert!(received.column(1).norm() <= 1e-10 * received.column(0).norm());
    }

    #[test]
    fn block_diag_with_orthogonal_rows_has_zero_leakage() {
        let layout = toy_layout(2, 3);
        let (w_tx, _, p_tx, _) = toy_beamformers(&layout, 23);
        let chain = p_tx.scale_rows(w_tx.matrix());
        let b = CMat::identity(2, 2);
        let pseudo_inv = pinv(&chain);
        let h1 = CMat::from_row_slice(1, 2, &[c(1.0, 0.0), ZERO]) * &pseudo_inv;
        let h2 = CMat::from_row_slice(1, 2, &[ZERO, c(1.0, 0.0)]) * &pseudo_inv;
        let v = block_diag_precoder(&[h1.clone(), h2.clone()], &p_tx, &w_tx, &b, 1.0, 2).unwrap();
        let eff1 = &h1 * &chain * v.column(1).into_owned();
        let eff2 = &h2 * &chain * v.column(0).into_owned();
        let signal1 = (&h1 * &chain * v.column(0).into_owned()).norm();
        assert!(eff1.norm() <= 1e-12 * signal1);
        assert!(eff2.norm() <= 1e-12 * signal1);
    }

    #[test]
    fn block_diag_leakage_stays_below_threshold_on_random_channels() {
        let layout = toy_layout(6, 2);
        let (w_tx, _, p_tx, _) = toy_beamformers(&layout, 29);
        let chain = p_tx.scale_rows(w_tx.matrix());
        let b = CMat::identity(6, 6);
        let (u_users, l) = (2, 2);
        let h_dls: Vec<CMat> = (0..u_users).map(|u| rnd_mat(l, 12, 400 + 100 * u)).collect();
        let alpha = 6;
        let v = block_diag_precoder(&h_dls, &p_tx, &w_tx, &b, 2.0, alpha).unwrap();

        let f = b.columns(0, 6).into_owned();
        let h_effs: Vec<CMat> = h_dls.iter().map(|h| h * &chain * &f).collect();
        // Leakage ratio per user.
        for u in 0..u_users {
            let other = 1 - u;
            let v_u = v.columns(u * l, l).into_owned();
            let v_other = v.columns(other * l, l).into_owned();
            let signal = (&h_dls[u] * &chain * &v_u).norm();
            let leak = (&h_dls[u] * &chain * &v_other).norm();
            assert!(leak / signal < 1e-8, "user {u}: leak ratio {}", leak / signal);
        }
        // Independent projector oracle: V_other's effective image lies in the
        // null space of this user's effective channel.
        for u in 0..u_users {
            let other = 1 - u;
            let h_eff = &h_effs[u];
            let gram_inv = (h_eff * h_eff.adjoint()).try_inverse().unwrap();
            let projector = CMat::identity(6, 6) - h_eff.adjoint() * gram_inv * h_eff;
            let g_other = f.adjoint() * v.columns(other * l, l).into_owned();
            let outside = (&g_other - &projector * &g_other).norm();
            assert!(outside < 1e-8 * g_other.norm());
        }
        // Power equality.
        assert_relative_eq!(fro_norm_sq(&(&chain * &v)), 2.0, max_relative = 1e-9);
    }

    #[test]
    fn block_diag_rejects_equal_channels_and_small_alpha() {
        let layout = toy_layout(4, 2);
        let (w_tx, _, p_tx, _) = toy_beamformers(&layout, 31);
        let b = CMat::identity(4, 4);
        let h = rnd_mat(2, 8, 510);
        let err = block_diag_precoder(&[h.clone(), h.clone()], &p_tx, &w_tx, &b, 1.0, 4);
        assert!(matches!(err, Err(Error::BdInfeasible(_))));
        let h2 = rnd_mat(2, 8, 520);
        let err = block_diag_precoder(&[h.clone(), h2], &p_tx, &w_tx, &b, 1.0, 2);
        assert!(matches!(err, Err(Error::BdInfeasible(_))));
    }

    #[test]
    fn si_check_passes_zero_precoder_and_infinite_threshold() {
        let layout = toy_layout(2, 3);
        let (w_tx, w_rx, p_tx, p_rx) = toy_beamformers(&layout, 37);
        let h_si = si_channel(&layout).unwrap();
        let v0 = CMat::zeros(2, 2);
        let check = check_si_constraint(&w_rx, &p_rx, &h_si, &p_tx, &w_tx, &v0, 0.0).unwrap();
        assert!(check.feasible);
        let v = rnd_mat(2, 2, 610);
        let check = check_si_constraint(&w_rx, &p_rx, &h_si, &p_tx, &w_tx, &v, f64::INFINITY).unwrap();
        assert!(check.feasible);
    }

    #[test]
    fn si_check_row_powers_match_a_double_loop_oracle() {
        let layout = toy_layout(3, 2);
        let (w_tx, w_rx, p_tx, p_rx) = toy_beamformers(&layout, 41);
        let h_si = rnd_mat(6, 6, 710);
        let v = rnd_mat(3, 4, 720);
        let check = check_si_constraint(&w_rx, &p_rx, &h_si, &p_tx, &w_tx, &v, 1.0).unwrap();
        let m = p_rx.scale_rows(w_rx.matrix()).adjoint()
            * &h_si
            * p_tx.scale_rows(w_tx.matrix())
            * &v;
        for i in 0..3 {
            let mut acc = 0.0;
            for j in 0..4 {
                acc += m[(i, j)].norm_sqr();
            }
            assert_relative_eq!(check.row_power[i], acc, max_relative = 1e-12);
        }
    }

    fn toy_design(gamma: f64, u_users: usize, k: usize) -> Result<BeamformerSet> {
        let layout = toy_layout(4, 8);
        let params = MicrostripParams::lossless(&layout);
        let cb = PhaseCodebook::new(4).unwrap();
        let h_si = si_channel(&layout).unwrap();
        let mut estimates = Vec::new();
        for i in 0..k {
            estimates.push(TargetEstimate {
                coord: SphericalCoord::new(0.06 + 0.03 * i as f64, 0.3 + 0.4 * i as f64, FRAC_PI_2)
                    .unwrap(),
                spectrum_value: 1.0,
            });
        }
        let inputs = DesignInputs {
            layout: &layout,
            tx_params: &params,
            rx_params: &params,
            u_users,
            l_antennas: 2,
            ue_spacing: layout.d_rf,
            p_max: 0.1,
            gamma,
            codebook: &cb,
        };
        design_isac(&estimates, &h_si, &inputs)
    }

    #[test]
    fn design_single_user_is_feasible_with_a_loose_threshold() {
        let set = toy_design(f64::INFINITY, 1, 1).unwrap();
        assert!(set.feasible);
        // Power budget met with equality.
        let radiated = fro_norm_sq(&(set.tx_chain() * &set.v_digital));
        assert_relative_eq!(radiated, set.p_max, max_relative = 1e-9);
        // Exact digital cancellation.
        let layout = toy_layout(4, 8);
        let h_si = si_channel(&layout).unwrap();
        let w_si = set.rx_chain().adjoint() * &h_si * set.tx_chain();
        let resid = (&w_si + &set.d_cancel.d_matrix) * &set.v_digital;
        assert!(resid.norm() <= 1e-10 * (&w_si * &set.v_digital).norm().max(1e-300));
        // Every realized weight sits on the Lorentzian circle.
        for bf in [&set.w_tx, &set.w_rx] {
            for row in bf.weights() {
                for w in row {
                    let d = (w.value() - c(0.0, 0.5)).norm();
                    assert!((d - 0.5).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn design_with_zero_threshold_is_infeasible() {
        let set = toy_design(0.0, 1, 1).unwrap();
        assert!(!set.feasible);
        assert!(set.si_row_power.iter().any(|p| *p > 0.0));
    }

    #[test]
    fn design_two_users_searches_alpha_from_the_top() {
        let set = toy_design(f64::INFINITY, 2, 2).unwrap();
        assert!(set.feasible);
        assert_eq!(set.v_digital.ncols(), 4);
        let radiated = fro_norm_sq(&(set.tx_chain() * &set.v_digital));
        assert_relative_eq!(radiated, set.p_max, max_relative = 1e-9);
    }

    #[test]
    fn snr_radar_is_zero_for_zero_channel_and_vanishes_in_noise() {
        let set = toy_design(f64::INFINITY, 1, 1).unwrap();
        let n = 32;
        let zero = CMat::zeros(n, n);
        assert_eq!(snr_radar(&set, &zero, 1e-12).unwrap(), 0.0);
        let h = rnd_mat(n, n, 900);
        let snr_big_noise = snr_radar(&set, &h, 1e12).unwrap();
        assert!(snr_big_noise < 1e-9);
    }

    #[test]
    fn snr_radar_matches_a_term_by_term_oracle() {
        let set = toy_design(f64::INFINITY, 1, 1).unwrap();
        let h = rnd_mat(32, 32, 910);
        let sigma2 = 3.7e-3;
        let got = snr_radar(&set, &h, sigma2).unwrap();
        let rx = set.rx_chain();
        let tx = set.tx_chain();
        let num = fro_norm_sq(&(rx.adjoint() * &h * &tx * &set.v_digital));
        let den = fro_norm_sq(&(&set.d_cancel.d_matrix * &set.v_digital)) + fro_norm_sq(&rx) * sigma2;
        assert_relative_eq!(got, num / den, max_relative = 1e-12);
    }

    #[test]
    fn snr_dl_collapses_to_the_definition() {
        let set = toy_design(f64::INFINITY, 1, 1).unwrap();
        assert_eq!(
            snr_dl(&set, &[CMat::zeros(2, 32)], &[1.0]).unwrap(),
            0.0
        );
        let h1 = rnd_mat(2, 32, 920);
        let h2 = rnd_mat(2, 32, 930);
        let got = snr_dl(&set, &[h1.clone(), h2.clone()], &[0.5, 2.0]).unwrap();
        let tx = set.tx_chain();
        let oracle = fro_norm_sq(&(&h1 * &tx * &set.v_digital)) / 0.5
            + fro_norm_sq(&(&h2 * &tx * &set.v_digital)) / 2.0;
        assert_relative_eq!(got, oracle, max_relative = 1e-12);
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    fn arb_phase() -> impl Strategy<Value = f64> {
        -std::f64::consts::PI..std::f64::consts::PI
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// Coordinate ascent from the matched-filter start attains the
        /// exhaustive optimum on tiny instances.
        #[test]
        fn op1_attains_the_brute_force_optimum(
            re in proptest::collection::vec(-1.0f64..1.0, 8),
            im in proptest::collection::vec(-1.0f64..1.0, 8),
        ) {
            let layout = ArrayLayout::new(1, 2);
            let cb = PhaseCodebook::new(3).unwrap();
            let h = CMat::from_fn(4, 2, |i, j| C64::new(re[i * 2 + j], im[i * 2 + j]));
            let sol = solve_op1(&h, &cb, &layout).unwrap();
            let mut best = f64::NEG_INFINITY;
            for p0 in &cb.phases {
                for p1 in &cb.phases {
                    let w = CMat::from_fn(2, 1, |r, _| {
                        C64::from_polar(1.0, if r == 0 { *p0 } else { *p1 })
                    });
                    best = best.max(crate::linalg::fro_norm_sq(&(&h * w)));
                }
            }
            prop_assert!((sol.objective - best).abs() <= 1e-9 * best.max(1e-12));
        }

        /// The ratio search never falls below its initialization.
        #[test]
        fn op2_never_degrades_the_initial_ratio(seed_phases in proptest::collection::vec(arb_phase(), 4)) {
            let layout = ArrayLayout::new(1, 2);
            let cb = PhaseCodebook::new(3).unwrap();
            let h_r = CMat::from_fn(2, 2, |i, j| C64::from_polar(1.0, seed_phases[i * 2 + j]));
            let h_si = CMat::from_fn(2, 2, |i, j| C64::from_polar(0.5, seed_phases[(i * 2 + j + 1) % 4]));
            let w_tx = CMat::from_fn(2, 1, |r, _| C64::from_polar(1.0, cb.phases[r]));
            let sol = solve_op2(&h_r, &h_si, &w_tx, &cb, &layout).unwrap();
            prop_assert!(sol.objective >= sol.objective_trace[0] * (1.0 - 1e-12));
            prop_assert!(sol.objective_trace.windows(2).all(|w| w[1] >= w[0] * (1.0 - 1e-12)));
        }
    }
}
