//! Dynamic metasurface antenna hardware: signal propagation along each
//! microstrip, Lorentzian-constrained metamaterial weights, assembly of the
//! block-sparse analog beamforming matrix, and the compensation step that
//! folds the microstrip phase accrual into the weights.
//!
//! Each of the `n_rf` microstrips feeds one RF chain. A signal entering
//! microstrip i accrues attenuation and phase exp(-rho (alpha_i + j beta_i))
//! by the time it reaches the element at arc length rho. Each metamaterial
//! then applies a weight confined to the Lorentzian circle
//! w = (j + exp(j phi)) / 2, traced out fully as the tunable phase phi
//! sweeps a whole turn.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::geometry::ArrayLayout;
use crate::{C64, CMat, CVec, Error, Result};

/// Per-microstrip waveguide parameters: attenuation coefficients alpha_i,
/// wavenumbers beta_i, and the element arc lengths rho[i][n] along each
/// strip (row i lists microstrip i's elements in order).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicrostripParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub rho: Vec<Vec<f64>>,
}

impl MicrostripParams {
    /// Lossless default: alpha_i = 0, beta_i = 2 pi / lambda, and elements
    /// at arc lengths rho = (n - 1) d_e.
    pub fn lossless(layout: &ArrayLayout) -> Self {
        let beta = 2.0 * PI / layout.lambda;
        let row: Vec<f64> = (0..layout.n_e).map(|n| n as f64 * layout.d_e).collect();
        Self {
            alpha: vec![0.0; layout.n_rf],
            beta: vec![beta; layout.n_rf],
            rho: vec![row; layout.n_rf],
        }
    }

    /// Arc length of element n on microstrip i (both 1-based).
    pub fn rho(&self, i: usize, n: usize) -> f64 {
        self.rho[i - 1][n - 1]
    }

    /// Checks invariants against a layout: one alpha, beta, and rho row per
    /// microstrip, rho rows of length n_e and nondecreasing, alpha >= 0,
    /// beta > 0.
    pub fn validate(&self, layout: &ArrayLayout) -> Result<()> {
        if self.alpha.len() != layout.n_rf || self.beta.len() != layout.n_rf {
            return Err(Error::DimensionMismatch(format!(
                "{} alpha / {} beta entries for {} microstrips",
                self.alpha.len(),
                self.beta.len(),
                layout.n_rf
            )));
        }
        if self.rho.len() != layout.n_rf {
            return Err(Error::DimensionMismatch(format!(
                "{} rho rows for {} microstrips",
                self.rho.len(),
                layout.n_rf
            )));
        }
        if let Some(a) = self.alpha.iter().find(|a| !(**a >= 0.0)) {
            return Err(Error::invalid("alpha", format!("must be nonnegative, got {a}")));
        }
        if let Some(b) = self.beta.iter().find(|b| !(**b > 0.0)) {
            return Err(Error::invalid("beta", format!("must be positive, got {b}")));
        }
        for (i, row) in self.rho.iter().enumerate() {
            if row.len() != layout.n_e {
                return Err(Error::DimensionMismatch(format!(
                    "rho row {i} has {} entries for {} elements",
                    row.len(),
                    layout.n_e
                )));
            }
            if row.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::invalid(
                    "rho",
                    format!("row {i} is not nondecreasing along the microstrip"),
                ));
            }
        }
        Ok(())
    }
}

/// Metamaterial weight on the Lorentzian circle |w - j/2| = 1/2,
/// parameterized by its tunable phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LorentzianWeight {
    phi: f64,
    value: C64,
}

impl LorentzianWeight {
    /// Weight at tunable phase `phi`; any finite angle is accepted and
    /// stored wrapped into [-pi, pi).
    pub fn new(phi: f64) -> Result<Self> {
        let value = lorentzian_map(phi)?;
        Ok(Self { phi: wrap_principal(phi), value })
    }

    /// Tunable phase in [-pi, pi).
    pub fn phi(&self) -> f64 {
        self.phi
    }

    /// Complex weight (j + exp(j phi)) / 2.
    pub fn value(&self) -> C64 {
        self.value
    }
}

/// Maps a tunable phase to its Lorentzian-constrained weight
/// (j + exp(j phi)) / 2. The map is 2 pi periodic and its magnitude spans
/// [0, 1]: zero at phi = -pi/2, one at phi = pi/2.
pub fn lorentzian_map(phi: f64) -> Result<C64> {
    if !phi.is_finite() {
        return Err(Error::invalid("phi", format!("tunable phase must be finite, got {phi}")));
    }
    Ok((C64::new(0.0, 1.0) + C64::from_polar(1.0, phi)) / 2.0)
}

/// One panel's analog beamformer: the weight grid plus its block-sparse
/// N x N_RF matrix, where column i is supported on exactly the n_e rows of
/// microstrip i.
#[derive(Clone, Debug)]
pub struct AnalogBeamformer {
    weights: Vec<Vec<LorentzianWeight>>,
    matrix: CMat,
}

impl AnalogBeamformer {
    /// Weight grid, row i holding microstrip i's elements in order.
    pub fn weights(&self) -> &[Vec<LorentzianWeight>] {
        &self.weights
    }

    /// Block-sparse matrix of shape (n_rf * n_e) x n_rf.
    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }

    pub fn n_rf(&self) -> usize {
        self.weights.len()
    }

    pub fn n_e(&self) -> usize {
        self.weights[0].len()
    }
}

/// Assembles the block-sparse analog beamforming matrix from a weight grid
/// with one row per microstrip.
pub fn assemble_analog_bf(weights: Vec<Vec<LorentzianWeight>>) -> Result<AnalogBeamformer> {
    let n_rf = weights.len();
    if n_rf == 0 {
        return Err(Error::invalid("weights", "need at least one microstrip row"));
    }
    let n_e = weights[0].len();
    if n_e == 0 || weights.iter().any(|row| row.len() != n_e) {
        return Err(Error::DimensionMismatch(
            "weight rows must be nonempty and uniform in length".into(),
        ));
    }
    let mut matrix = CMat::zeros(n_rf * n_e, n_rf);
    for (i, row) in weights.iter().enumerate() {
        for (n, w) in row.iter().enumerate() {
            matrix[(i * n_e + n, i)] = w.value();
        }
    }
    Ok(AnalogBeamformer { weights, matrix })
}

/// Diagonal microstrip propagation matrix, stored as its diagonal. Entry
/// (i - 1) n_e + (n - 1) equals exp(-rho_{i,n} (alpha_i + j beta_i)).
#[derive(Clone, Debug)]
pub struct PropagationMatrix {
    diag: CVec,
}

impl PropagationMatrix {
    pub fn diagonal(&self) -> &CVec {
        &self.diag
    }

    /// Dense N x N form, for tests and small problems.
    pub fn to_dense(&self) -> CMat {
        CMat::from_diagonal(&self.diag)
    }

    /// P * m: scales row k of `m` by the k-th diagonal entry.
    pub fn scale_rows(&self, m: &CMat) -> CMat {
        let mut out = m.clone();
        for (k, d) in self.diag.iter().enumerate() {
            for v in out.row_mut(k).iter_mut() {
                *v *= d;
            }
        }
        out
    }

    /// P^H * m: scales row k of `m` by the conjugated k-th diagonal entry.
    pub fn scale_rows_adjoint(&self, m: &CMat) -> CMat {
        let mut out = m.clone();
        for (k, d) in self.diag.iter().enumerate() {
            let dc = d.conj();
            for v in out.row_mut(k).iter_mut() {
                *v *= dc;
            }
        }
        out
    }
}

/// Builds the propagation matrix for one panel. Magnitudes are at most one
/// and equal one exactly for lossless strips (alpha = 0).
pub fn propagation_matrix(params: &MicrostripParams, layout: &ArrayLayout) -> Result<PropagationMatrix> {
    params.validate(layout)?;
    let mut diag = CVec::zeros(layout.total_elements());
    for i in 0..layout.n_rf {
        for n in 0..layout.n_e {
            let rho = params.rho[i][n];
            diag[i * layout.n_e + n] =
                C64::from_polar((-rho * params.alpha[i]).exp(), -rho * params.beta[i]);
        }
    }
    Ok(PropagationMatrix { diag })
}

/// Wraps an angle into the principal domain [-pi, pi).
fn wrap_principal(psi: f64) -> f64 {
    (psi + PI).rem_euclid(2.0 * PI) - PI
}

/// Converts an unconstrained unit-modulus weight grid (n_rf x n_e, row i
/// holding microstrip i) into Lorentzian weights that pre-compensate the
/// microstrip phase accrual: w = (j + w_tilde exp(j rho beta)) / 2.
///
/// The designed phase survives the hardware exactly: the per-element
/// product of propagation and weight is
/// (j exp(-rho (alpha + j beta)) + w_tilde exp(-rho alpha)) / 2, the
/// intended w_tilde plus a fixed structural offset term.
pub fn compensate_weights(
    unconstrained: &CMat,
    params: &MicrostripParams,
) -> Result<Vec<Vec<LorentzianWeight>>> {
    let n_rf = params.alpha.len();
    if unconstrained.nrows() != n_rf || params.rho.iter().any(|r| r.len() != unconstrained.ncols())
    {
        return Err(Error::DimensionMismatch(format!(
            "weight grid is {}x{} but params describe {} microstrips of {} elements",
            unconstrained.nrows(),
            unconstrained.ncols(),
            n_rf,
            params.rho.first().map_or(0, |r| r.len()),
        )));
    }
    let mut grid = Vec::with_capacity(n_rf);
    for i in 0..n_rf {
        let mut row = Vec::with_capacity(unconstrained.ncols());
        for n in 0..unconstrained.ncols() {
            let w = unconstrained[(i, n)];
            if (w.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(
                    "unconstrained",
                    format!("entry ({i}, {n}) has modulus {}, expected 1", w.norm()),
                ));
            }
            let psi = w.arg() + params.rho[i][n] * params.beta[i];
            row.push(LorentzianWeight::new(wrap_principal(psi))?);
        }
        grid.push(row);
    }
    Ok(grid)
}
