//! Target parameter estimation from RF-chain snapshots: sample covariance,
//! eigen-subspace split, the 3D MUSIC pseudo-spectrum, grid peak search
//! with local refinement, and estimate-to-truth matching for error metrics.
//!
//! The receiver observes T snapshots through the analog combiner, so the
//! covariance lives in the small N_RF-dimensional digital domain while the
//! spectrum scans candidate (range, elevation, azimuth) triples through the
//! full near-field array response.

use crate::dma::{AnalogBeamformer, PropagationMatrix};
use crate::geometry::{self, ArrayLayout, Side, SphericalCoord};
use crate::{C64, CMat, CVec, Error, Result};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Spectrum value reported when the noise-subspace projection underflows
/// (the candidate is numerically indistinguishable from a signal direction).
pub const SPECTRUM_CEILING: f64 = 1e12;

/// A block of T receive snapshots: columns of `y_matrix` are the per-slot
/// N_RF-dimensional outputs of the RX combiner.
#[derive(Clone, Debug)]
pub struct SnapshotBlock {
    pub y_matrix: CMat,
    pub t_slots: usize,
}

impl SnapshotBlock {
    pub fn new(y_matrix: CMat) -> Result<Self> {
        let t_slots = y_matrix.ncols();
        if t_slots == 0 {
            return Err(Error::invalid("y_matrix", "need at least one snapshot column"));
        }
        Ok(Self { y_matrix, t_slots })
    }
}

/// Eigendecomposition of the sample covariance split into signal and noise
/// subspaces. Eigenvalues are sorted descending; the first K eigenvectors
/// form the signal basis, the rest the noise basis.
#[derive(Clone, Debug)]
pub struct SubspaceDecomposition {
    pub eigenvalues: Vec<f64>,
    pub signal_basis: CMat,
    pub noise_basis: CMat,
}

/// Search domain for the spectrum: one axis per parameter plus the number
/// of tenfold local refinements applied to each coarse peak.
#[derive(Clone, Debug)]
pub struct SearchGrid {
    pub r_axis: Vec<f64>,
    pub theta_axis: Vec<f64>,
    pub phi_axis: Vec<f64>,
    pub refine_levels: usize,
}

impl SearchGrid {
    pub fn new(
        r_axis: Vec<f64>,
        theta_axis: Vec<f64>,
        phi_axis: Vec<f64>,
        refine_levels: usize,
    ) -> Result<Self> {
        let grid = Self { r_axis, theta_axis, phi_axis, refine_levels };
        grid.validate()?;
        Ok(grid)
    }

    /// Uniformly spaced axis from `min` to `max` inclusive with the given
    /// step (the last point may fall short of `max` by up to one step).
    pub fn axis(min: f64, max: f64, step: f64) -> Vec<f64> {
        let count = ((max - min) / step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| min + i as f64 * step).collect()
    }

    /// Default grid for fixed-azimuth scenes: range 1 m to 25 m in 0.1 m
    /// steps, elevation 0 to 90 degrees in half-degree steps, azimuth
    /// pinned at 90 degrees, two refinement levels.
    pub fn fixed_azimuth_default() -> Self {
        let half_deg = 0.5_f64.to_radians();
        Self {
            r_axis: Self::axis(1.0, 25.0, 0.1),
            theta_axis: Self::axis(0.0, std::f64::consts::FRAC_PI_2, half_deg),
            phi_axis: vec![std::f64::consts::FRAC_PI_2],
            refine_levels: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, axis) in [
            ("r_axis", &self.r_axis),
            ("theta_axis", &self.theta_axis),
            ("phi_axis", &self.phi_axis),
        ] {
            if axis.is_empty() {
                return Err(Error::invalid("grid", format!("{name} needs at least one point")));
            }
            if axis.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::invalid("grid", format!("{name} must be strictly increasing")));
            }
        }
        Ok(())
    }

    fn step(axis: &[f64]) -> f64 {
        if axis.len() > 1 { axis[1] - axis[0] } else { 0.0 }
    }
}

/// One located spectrum peak.
#[derive(Clone, Copy, Debug)]
pub struct TargetEstimate {
    pub coord: SphericalCoord,
    pub spectrum_value: f64,
}

/// K estimates plus a degeneracy flag, set when fewer than K separated
/// local maxima existed and duplicates of the global maximum filled the
/// remainder.
#[derive(Clone, Debug)]
pub struct EstimationOutcome {
    pub estimates: Vec<TargetEstimate>,
    pub degenerate: bool,
}

/// Sample covariance R = (1/T) Y Y^H of a snapshot block.
pub fn sample_covariance(block: &SnapshotBlock) -> Result<CMat> {
    if block.t_slots == 0 || block.y_matrix.ncols() != block.t_slots {
        return Err(Error::invalid("block", "snapshot count does not match column count"));
    }
    let y = &block.y_matrix;
    Ok(y * y.adjoint() / C64::new(block.t_slots as f64, 0.0))
}

/// Splits the covariance eigenbasis into K signal and N_RF - K noise
/// directions. Fails when K >= N_RF because the noise subspace would be
/// empty.
pub fn subspace_split(r: &CMat, k: usize) -> Result<SubspaceDecomposition> {
    if r.nrows() != r.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "covariance is {}x{}",
            r.nrows(),
            r.ncols()
        )));
    }
    let n_rf = r.nrows();
    if k >= n_rf {
        return Err(Error::EmptyNoiseSubspace { k, n_rf });
    }
    let (eigenvalues, vectors) = crate::linalg::hermitian_eigen_desc(r);
    let signal_basis = vectors.columns(0, k).into_owned();
    let noise_basis = vectors.columns(k, n_rf - k).into_owned();
    Ok(SubspaceDecomposition { eigenvalues, signal_basis, noise_basis })
}

/// Shared state for many spectrum evaluations against one decomposition:
/// the combiner projection (P_RX W_RX)^H and the noise basis adjoint.
struct SpectrumEvaluator<'a> {
    proj_adj: CMat,
    noise_adj: CMat,
    layout: &'a ArrayLayout,
}

/// Per-thread scratch buffers for grid evaluation.
struct Scratch {
    response: CVec,
    m: CVec,
    projected: CVec,
}

impl<'a> SpectrumEvaluator<'a> {
    fn new(decomp: &SubspaceDecomposition, w_rx: &AnalogBeamformer, p_rx: &PropagationMatrix, layout: &'a ArrayLayout) -> Self {
        Self {
            proj_adj: p_rx.scale_rows(w_rx.matrix()).adjoint(),
            noise_adj: decomp.noise_basis.adjoint(),
            layout,
        }
    }

    fn scratch(&self) -> Scratch {
        Scratch {
            response: CVec::zeros(self.layout.total_elements()),
            m: CVec::zeros(self.proj_adj.nrows()),
            projected: CVec::zeros(self.noise_adj.nrows()),
        }
    }

    fn eval(&self, coord: &SphericalCoord, s: &mut Scratch) -> Result<f64> {
        geometry::fill_response(Side::Rx, coord.cartesian(), self.layout, s.response.as_mut_slice())?;
        s.m.gemv(C64::new(1.0, 0.0), &self.proj_adj, &s.response, C64::new(0.0, 0.0));
        s.projected
            .gemv(C64::new(1.0, 0.0), &self.noise_adj, &s.m, C64::new(0.0, 0.0));
        // The combiner-projected response varies in magnitude by orders of
        // magnitude across the grid, so the projection is normalized by
        // ‖M‖²; otherwise coordinates the combiner barely sees would score
        // arbitrarily high. Combiner-blind coordinates score zero.
        let gain = s.m.norm_squared();
        if !(gain > 0.0) {
            return Ok(0.0);
        }
        let denom = s.projected.norm_squared() / gain;
        if denom <= 1.0 / SPECTRUM_CEILING {
            Ok(SPECTRUM_CEILING)
        } else {
            Ok((1.0 / denom).min(SPECTRUM_CEILING))
        }
    }

    fn eval_batch(&self, coords: &[SphericalCoord]) -> Result<Vec<f64>> {
        #[cfg(feature = "parallel")]
        {
            coords
                .par_iter()
                .map_init(|| self.scratch(), |s, c| self.eval(c, s))
                .collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            let mut s = self.scratch();
            coords.iter().map(|c| self.eval(c, &mut s)).collect()
        }
    }
}

/// MUSIC pseudo-spectrum at one candidate point: ‖M‖² / (M^H U_n U_n^H M)
/// with M the combiner-projected RX response, clipped to
/// [`SPECTRUM_CEILING`] when the denominator underflows and zero where the
/// combiner has no response at all.
pub fn music_spectrum(
    coord: &SphericalCoord,
    decomp: &SubspaceDecomposition,
    w_rx: &AnalogBeamformer,
    p_rx: &PropagationMatrix,
    layout: &ArrayLayout,
) -> Result<f64> {
    let eval = SpectrumEvaluator::new(decomp, w_rx, p_rx, layout);
    let mut scratch = eval.scratch();
    eval.eval(coord, &mut scratch)
}

/// Index triple into a search grid.
type GridIdx = (usize, usize, usize);

fn flat(idx: GridIdx, grid: &SearchGrid) -> usize {
    (idx.0 * grid.theta_axis.len() + idx.1) * grid.phi_axis.len() + idx.2
}

/// Locates the K largest separated local maxima of the spectrum over the
/// grid, refines each by `refine_levels` tenfold local searches, and pads
/// with duplicates of the global maximum (flagging the outcome degenerate)
/// when fewer than K separated peaks exist.
pub fn estimate_targets(
    block: &SnapshotBlock,
    k: usize,
    grid: &SearchGrid,
    w_rx: &AnalogBeamformer,
    p_rx: &PropagationMatrix,
    layout: &ArrayLayout,
) -> Result<EstimationOutcome> {
    grid.validate()?;
    let r = sample_covariance(block)?;
    let decomp = subspace_split(&r, k)?;
    let eval = SpectrumEvaluator::new(&decomp, w_rx, p_rx, layout);

    // Coarse pass over the full grid.
    let mut coords = Vec::with_capacity(grid.r_axis.len() * grid.theta_axis.len() * grid.phi_axis.len());
    for &r_v in &grid.r_axis {
        for &t_v in &grid.theta_axis {
            for &p_v in &grid.phi_axis {
                coords.push(SphericalCoord { r: r_v, theta: t_v, phi: p_v });
            }
        }
    }
    let values = eval.eval_batch(&coords)?;

    // Local maxima against axis neighbors (ties count as maxima so that
    // clipped plateaus are not lost).
    let dims = [grid.r_axis.len(), grid.theta_axis.len(), grid.phi_axis.len()];
    let mut candidates: Vec<GridIdx> = Vec::new();
    for ir in 0..dims[0] {
        for it in 0..dims[1] {
            for ip in 0..dims[2] {
                let v = values[flat((ir, it, ip), grid)];
                let mut is_max = true;
                let mut check = |idx: GridIdx| {
                    if values[flat(idx, grid)] > v {
                        is_max = false;
                    }
                };
                if ir > 0 { check((ir - 1, it, ip)); }
                if ir + 1 < dims[0] { check((ir + 1, it, ip)); }
                if it > 0 { check((ir, it - 1, ip)); }
                if it + 1 < dims[1] { check((ir, it + 1, ip)); }
                if ip > 0 { check((ir, it, ip - 1)); }
                if ip + 1 < dims[2] { check((ir, it, ip + 1)); }
                if is_max {
                    candidates.push((ir, it, ip));
                }
            }
        }
    }

    // Largest spectrum value first; exact ties fall back to grid order.
    candidates.sort_by(|a, b| {
        let (va, vb) = (values[flat(*a, grid)], values[flat(*b, grid)]);
        vb.partial_cmp(&va).expect("spectrum values are finite").then(a.cmp(b))
    });

    // Greedy preselection with non-maximum suppression: a candidate
    // conflicts with an already selected peak when they sit within one
    // coarse cell of each other along every searched axis (the same
    // spectral blob). An ambiguity ridge through a strong target carries
    // several coarse maxima farther apart than that, so more candidates
    // than peaks are kept here and the surplus is merged after refinement,
    // once ridge maxima have collapsed onto the peak they belong to.
    let searched: Vec<bool> = dims.iter().map(|&d| d > 1).collect();
    let preselect = 3 * k;
    let mut selected: Vec<GridIdx> = Vec::new();
    for c in &candidates {
        if selected.len() == preselect {
            break;
        }
        let conflict = selected.iter().any(|s| {
            let deltas = [
                s.0.abs_diff(c.0),
                s.1.abs_diff(c.1),
                s.2.abs_diff(c.2),
            ];
            deltas
                .iter()
                .zip(&searched)
                .all(|(d, active)| !active || *d <= 1)
        });
        if !conflict {
            selected.push(*c);
        }
    }

    // Refine each preselected peak with successively finer local grids.
    let steps = [
        SearchGrid::step(&grid.r_axis),
        SearchGrid::step(&grid.theta_axis),
        SearchGrid::step(&grid.phi_axis),
    ];
    let bounds = [
        (grid.r_axis[0], *grid.r_axis.last().unwrap()),
        (grid.theta_axis[0], *grid.theta_axis.last().unwrap()),
        (grid.phi_axis[0], *grid.phi_axis.last().unwrap()),
    ];
    let mut refined: Vec<TargetEstimate> = Vec::with_capacity(selected.len());
    for idx in &selected {
        let center = [
            grid.r_axis[idx.0],
            grid.theta_axis[idx.1],
            grid.phi_axis[idx.2],
        ];
        let value = values[flat(*idx, grid)];
        refined.push(refine_peak(&eval, center, value, steps, bounds, grid.refine_levels)?);
    }

    // Strongest refined peaks first; candidates that refined into a peak
    // already taken (within one coarse cell along every searched axis) are
    // the same target and merge into it.
    refined.sort_by(|a, b| {
        b.spectrum_value
            .partial_cmp(&a.spectrum_value)
            .expect("spectrum values are finite")
    });
    let mut estimates: Vec<TargetEstimate> = Vec::with_capacity(k);
    for cand in &refined {
        if estimates.len() == k {
            break;
        }
        let duplicate = estimates.iter().any(|kept| {
            let deltas = [
                (kept.coord.r - cand.coord.r).abs(),
                (kept.coord.theta - cand.coord.theta).abs(),
                (kept.coord.phi - cand.coord.phi).abs(),
            ];
            deltas
                .iter()
                .zip(&steps)
                .zip(&searched)
                .all(|((d, s), active)| !active || *d <= *s + 1e-12)
        });
        if !duplicate {
            estimates.push(*cand);
        }
    }

    // Pad with the strongest peak if fewer than K distinct ones exist.
    let degenerate = estimates.len() < k;
    if degenerate {
        let top = estimates
            .first()
            .copied()
            .expect("a finite grid always has a global maximum");
        estimates.resize(k, top);
    }

    Ok(EstimationOutcome { estimates, degenerate })
}

/// Upper bound on window re-centers per refinement level. A coarse maximum
/// can sit several cells down an ambiguity ridge from the spectrum null, so
/// each level slides its window along the ridge while the best point keeps
/// landing on the window border, up to this many times.
const MAX_SLIDES: usize = 8;

/// One tenfold local refinement around a peak, repeated `levels` times.
/// Each level scans 21 points per searched axis spanning one step of the
/// previous level, clamped to the original grid bounds, re-centering and
/// rescanning while the maximum falls on the window border.
fn refine_peak(
    eval: &SpectrumEvaluator<'_>,
    mut center: [f64; 3],
    mut value: f64,
    coarse_steps: [f64; 3],
    bounds: [(f64, f64); 3],
    levels: usize,
) -> Result<TargetEstimate> {
    let mut steps = coarse_steps;
    for _ in 0..levels {
        let fine: Vec<f64> = steps.iter().map(|s| s / 10.0).collect();
        for _ in 0..MAX_SLIDES {
            let mut axes: Vec<Vec<f64>> = Vec::with_capacity(3);
            for a in 0..3 {
                if steps[a] == 0.0 {
                    axes.push(vec![center[a]]);
                } else {
                    let pts = (-10..=10_i32)
                        .map(|i| center[a] + i as f64 * fine[a])
                        .filter(|x| *x >= bounds[a].0 - 1e-12 && *x <= bounds[a].1 + 1e-12)
                        .collect();
                    axes.push(pts);
                }
            }
            let mut coords =
                Vec::with_capacity(axes[0].len() * axes[1].len() * axes[2].len());
            for &r_v in &axes[0] {
                for &t_v in &axes[1] {
                    for &p_v in &axes[2] {
                        coords.push(SphericalCoord { r: r_v, theta: t_v, phi: p_v });
                    }
                }
            }
            let vals = eval.eval_batch(&coords)?;
            let mut moved = false;
            for (c, v) in coords.iter().zip(&vals) {
                if *v > value {
                    value = *v;
                    center = [c.r, c.theta, c.phi];
                    moved = true;
                }
            }
            let on_border = (0..3).any(|a| {
                steps[a] != 0.0
                    && axes[a].len() > 1
                    && ((center[a] - axes[a][0]).abs() < 1e-12
                        || (center[a] - *axes[a].last().unwrap()).abs() < 1e-12)
            });
            if !(moved && on_border) {
                break;
            }
        }
        steps = [fine[0], fine[1], fine[2]];
        for a in 0..3 {
            if coarse_steps[a] == 0.0 {
                steps[a] = 0.0;
            }
        }
    }
    Ok(TargetEstimate {
        coord: SphericalCoord { r: center[0], theta: center[1], phi: center[2] },
        spectrum_value: value,
    })
}

/// Minimum-total-cost one-to-one pairing of estimates to truth under the
/// normalized cost |dr|/25 + |dtheta|/(pi/2) + |dphi|/(2 pi).
#[derive(Clone, Debug)]
pub struct MatchedErrors {
    /// `assignment[k]` is the estimate index paired with truth entry k.
    pub assignment: Vec<usize>,
    /// Absolute range errors in meters, aligned with `truth` order.
    pub range_err: Vec<f64>,
    /// Absolute elevation errors in radians.
    pub elev_err: Vec<f64>,
    /// Absolute azimuth errors in radians.
    pub azim_err: Vec<f64>,
}

fn pair_cost(est: &SphericalCoord, truth: &SphericalCoord) -> f64 {
    (est.r - truth.r).abs() / 25.0
        + (est.theta - truth.theta).abs() / std::f64::consts::FRAC_PI_2
        + (est.phi - truth.phi).abs() / std::f64::consts::TAU
}

/// Matches estimates to ground truth and reports per-parameter absolute
/// errors. Solved exactly by dynamic programming over estimate subsets.
pub fn match_estimates(
    estimates: &[SphericalCoord],
    truth: &[SphericalCoord],
) -> Result<MatchedErrors> {
    let k = truth.len();
    if estimates.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "{} estimates for {} truth entries",
            estimates.len(),
            k
        )));
    }
    if k == 0 {
        return Ok(MatchedErrors {
            assignment: vec![],
            range_err: vec![],
            elev_err: vec![],
            azim_err: vec![],
        });
    }
    if k > 16 {
        return Err(Error::invalid("truth", "assignment supports at most 16 targets"));
    }
    let cost = |t: usize, e: usize| pair_cost(&estimates[e], &truth[t]);

    // dp[mask] = minimal cost of assigning truths 0..popcount(mask) to the
    // estimate subset `mask`; choice[mask] remembers the estimate taken by
    // the last truth.
    let full = 1_usize << k;
    let mut dp = vec![f64::INFINITY; full];
    let mut choice = vec![usize::MAX; full];
    dp[0] = 0.0;
    for mask in 1..full {
        let t = (mask as u32).count_ones() as usize - 1;
        for e in 0..k {
            if mask & (1 << e) == 0 {
                continue;
            }
            let prev = dp[mask ^ (1 << e)];
            let total = prev + cost(t, e);
            if total < dp[mask] {
                dp[mask] = total;
                choice[mask] = e;
            }
        }
    }
    let mut assignment = vec![0; k];
    let mut mask = full - 1;
    for t in (0..k).rev() {
        let e = choice[mask];
        assignment[t] = e;
        mask ^= 1 << e;
    }
    let mut out = MatchedErrors {
        assignment,
        range_err: Vec::with_capacity(k),
        elev_err: Vec::with_capacity(k),
        azim_err: Vec::with_capacity(k),
    };
    for t in 0..k {
        let e = &estimates[out.assignment[t]];
        out.range_err.push((e.r - truth[t].r).abs());
        out.elev_err.push((e.theta - truth[t].theta).abs());
        out.azim_err.push((e.phi - truth[t].phi).abs());
    }
    Ok(out)
}
