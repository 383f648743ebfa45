//! Near-field geometry and channel synthesis for the dual-panel node.
//!
//! The node carries two identical panels of `n_rf` microstrips with `n_e`
//! metamaterial elements each. The TX panel sits at positive x, the RX
//! panel mirrors it at negative x, and elements stack along z. Sources in
//! the radiative near field see spherical wavefronts, so every channel
//! entry carries the exact Euclidean distance between one element and one
//! source point: a phase of 2*pi*d/lambda and an amplitude combining
//! free-space spreading, molecular absorption, and the element's
//! cosine-power radiation profile.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::{C64, CMat, CVec, Error, Result};

/// Which panel of the full-duplex node an element belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Tx,
    Rx,
}

/// Point in spherical coordinates: range from the origin, elevation
/// measured from the +z axis, azimuth measured from the +x axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphericalCoord {
    pub r: f64,
    pub theta: f64,
    pub phi: f64,
}

impl SphericalCoord {
    /// Validated constructor: `r > 0`, `theta` in `[0, pi]`, `phi` in `[0, 2pi)`.
    pub fn new(r: f64, theta: f64, phi: f64) -> Result<Self> {
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::invalid("r", format!("range must be positive, got {r}")));
        }
        if !(0.0..=PI).contains(&theta) {
            return Err(Error::invalid(
                "theta",
                format!("elevation must lie in [0, pi], got {theta}"),
            ));
        }
        if !(0.0..TAU).contains(&phi) {
            return Err(Error::invalid(
                "phi",
                format!("azimuth must lie in [0, 2pi), got {phi}"),
            ));
        }
        Ok(Self { r, theta, phi })
    }

    /// Cartesian position with x = r sin(theta) cos(phi),
    /// y = r sin(theta) sin(phi), z = r cos(theta).
    pub fn cartesian(&self) -> [f64; 3] {
        let (st, ct) = (self.theta.sin(), self.theta.cos());
        let (sp, cp) = (self.phi.sin(), self.phi.cos());
        [self.r * st * cp, self.r * st * sp, self.r * ct]
    }
}

/// Geometry and propagation constants of one DMA panel pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayLayout {
    /// Microstrips per panel (one RF chain each).
    pub n_rf: usize,
    /// Metamaterial elements per microstrip.
    pub n_e: usize,
    /// Element spacing along a microstrip (z direction), meters.
    pub d_e: f64,
    /// Spacing between adjacent microstrips (x direction), meters.
    pub d_rf: f64,
    /// Panel half-offset: the first microstrip of each panel sits at
    /// x = +/- d_p / 2, meters.
    pub d_p: f64,
    /// Carrier wavelength, meters.
    pub lambda: f64,
    /// Molecular absorption coefficient, 1/meters.
    pub kappa_abs: f64,
    /// Radiation profile exponent b in F(theta) = 2(b+1) cos^b(theta).
    pub b_gain: f64,
}

impl ArrayLayout {
    /// Layout with the default 120 GHz carrier and spacings: element pitch
    /// lambda/5, microstrip pitch lambda/2, panel half-offset 0.02 m,
    /// absorption 0.0033 /m, profile exponent 2.
    pub fn new(n_rf: usize, n_e: usize) -> Self {
        let lambda = 0.0025;
        Self {
            n_rf,
            n_e,
            d_e: lambda / 5.0,
            d_rf: lambda / 2.0,
            d_p: 0.02,
            lambda,
            kappa_abs: 0.0033,
            b_gain: 2.0,
        }
    }

    /// Total elements per panel, N = n_rf * n_e.
    pub fn total_elements(&self) -> usize {
        self.n_rf * self.n_e
    }

    /// Fraunhofer distance 2 D^2 / lambda of one panel, with D the panel
    /// diagonal. Ranges below this bound see spherical wavefronts.
    pub fn fraunhofer_distance(&self) -> f64 {
        let depth = (self.n_e.saturating_sub(1)) as f64 * self.d_e;
        let width = (self.n_rf.saturating_sub(1)) as f64 * self.d_rf;
        let d = depth.hypot(width);
        2.0 * d * d / self.lambda
    }

    /// Checks field invariants, naming the offending field on failure.
    pub fn validate(&self) -> Result<()> {
        if self.n_rf < 1 {
            return Err(Error::invalid("n_rf", "need at least one microstrip"));
        }
        if self.n_e < 1 {
            return Err(Error::invalid("n_e", "need at least one element"));
        }
        for (name, v) in [("d_e", self.d_e), ("d_rf", self.d_rf), ("lambda", self.lambda)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid("layout", format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.d_p >= 0.0) || !self.d_p.is_finite() {
            return Err(Error::invalid("d_p", format!("must be nonnegative, got {}", self.d_p)));
        }
        if !(self.kappa_abs >= 0.0) {
            return Err(Error::invalid(
                "kappa_abs",
                format!("must be nonnegative, got {}", self.kappa_abs),
            ));
        }
        if !(self.b_gain >= 0.0) {
            return Err(Error::invalid("b_gain", format!("must be nonnegative, got {}", self.b_gain)));
        }
        Ok(())
    }
}

/// A downlink user: a reference point plus an L-antenna linear array that
/// extends the horizontal radius at the reference azimuth in steps of
/// `ula_spacing`, keeping height fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UeDescriptor {
    pub coord: SphericalCoord,
    pub l_antennas: usize,
    pub ula_spacing: f64,
}

impl UeDescriptor {
    /// Spherical coordinates of the ell-th antenna (1-based). Antenna 1 is
    /// the reference point itself; antenna ell adds (ell-1) spacings to the
    /// horizontal radius r sin(theta) at unchanged height and azimuth.
    pub fn antenna_coord(&self, ell: usize) -> Result<SphericalCoord> {
        if ell < 1 || ell > self.l_antennas {
            return Err(Error::invalid(
                "ell",
                format!("antenna index {ell} outside 1..={}", self.l_antennas),
            ));
        }
        let rho = self.coord.r * self.coord.theta.sin() + (ell - 1) as f64 * self.ula_spacing;
        let z = self.coord.r * self.coord.theta.cos();
        SphericalCoord::new(rho.hypot(z), rho.atan2(z), self.coord.phi)
    }

    /// Cartesian position of the ell-th antenna (1-based).
    pub fn antenna_position(&self, ell: usize) -> Result<[f64; 3]> {
        Ok(self.antenna_coord(ell)?.cartesian())
    }

    /// Checks field invariants.
    pub fn validate(&self) -> Result<()> {
        SphericalCoord::new(self.coord.r, self.coord.theta, self.coord.phi)?;
        if self.l_antennas < 1 {
            return Err(Error::invalid("l_antennas", "need at least one antenna"));
        }
        if !(self.ula_spacing > 0.0) {
            return Err(Error::invalid(
                "ula_spacing",
                format!("must be positive, got {}", self.ula_spacing),
            ));
        }
        Ok(())
    }
}

/// K point targets, of which the first U are the downlink users.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub targets: Vec<SphericalCoord>,
    pub ues: Vec<UeDescriptor>,
    /// Unit-modulus reflection coefficient per target.
    pub reflection_coeffs: Vec<C64>,
}

impl Scenario {
    /// Number of targets K.
    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }

    /// Number of downlink users U.
    pub fn num_ues(&self) -> usize {
        self.ues.len()
    }

    /// Checks invariants: K >= 1, U <= K, the first U targets are the UE
    /// reference points, and every reflection coefficient has unit modulus.
    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::invalid("targets", "need at least one target"));
        }
        if self.ues.len() > self.targets.len() {
            return Err(Error::invalid(
                "ues",
                format!("{} users exceed {} targets", self.ues.len(), self.targets.len()),
            ));
        }
        if self.reflection_coeffs.len() != self.targets.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} reflection coefficients for {} targets",
                self.reflection_coeffs.len(),
                self.targets.len()
            )));
        }
        for coord in &self.targets {
            SphericalCoord::new(coord.r, coord.theta, coord.phi)?;
        }
        for (u, ue) in self.ues.iter().enumerate() {
            ue.validate()?;
            if ue.coord != self.targets[u] {
                return Err(Error::invalid(
                    "ues",
                    format!("user {u} does not sit at target {u}"),
                ));
            }
        }
        for (k, beta) in self.reflection_coeffs.iter().enumerate() {
            if (beta.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(
                    "reflection_coeffs",
                    format!("coefficient {k} has modulus {}", beta.norm()),
                ));
            }
        }
        Ok(())
    }
}

/// Position of element n on microstrip i (both 1-based). TX elements sit at
/// x = d_p/2 + (i-1) d_rf, RX elements mirror them at negated x; both panels
/// share y = 0 and z = (n-1) d_e.
pub fn element_position(side: Side, i: usize, n: usize, layout: &ArrayLayout) -> Result<[f64; 3]> {
    if i < 1 || i > layout.n_rf {
        return Err(Error::invalid(
            "i",
            format!("microstrip index {i} outside 1..={}", layout.n_rf),
        ));
    }
    if n < 1 || n > layout.n_e {
        return Err(Error::invalid(
            "n",
            format!("element index {n} outside 1..={}", layout.n_e),
        ));
    }
    let x = layout.d_p / 2.0 + (i - 1) as f64 * layout.d_rf;
    let x = match side {
        Side::Tx => x,
        Side::Rx => -x,
    };
    Ok([x, 0.0, (n - 1) as f64 * layout.d_e])
}

/// Metamaterial radiation profile F(theta) = 2(b+1) cos^b(theta) for theta
/// in [-pi/2, pi/2], zero outside.
pub fn radiation_profile(theta: f64, b: f64) -> f64 {
    if !(-PI / 2.0..=PI / 2.0).contains(&theta) {
        return 0.0;
    }
    2.0 * (b + 1.0) * theta.cos().max(0.0).powf(b)
}

/// Amplitude attenuation over a path of length `r` leaving an element at
/// elevation `theta`: sqrt(F(theta)) * lambda / (4 pi r) * exp(-kappa r / 2).
pub fn attenuation(r: f64, theta: f64, layout: &ArrayLayout) -> Result<f64> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::invalid("r", format!("path length must be positive, got {r}")));
    }
    Ok(radiation_profile(theta, layout.b_gain).sqrt() * layout.lambda / (4.0 * PI * r)
        * (-layout.kappa_abs * r / 2.0).exp())
}

/// Amplitude gain of one element toward a point at distance `d` whose
/// elevation sine (|dz|/d) is `q`. Equals `attenuation(d, asin(q))` but
/// avoids the inverse trig in the hot path.
#[inline]
fn element_gain(d: f64, q: f64, layout: &ArrayLayout) -> f64 {
    let cos2 = (1.0 - q * q).max(0.0);
    // sqrt(cos^b) = (cos^2)^(b/4); the default b = 2 reduces to a sqrt.
    let profile = if layout.b_gain == 2.0 {
        cos2.sqrt()
    } else {
        cos2.powf(layout.b_gain / 4.0)
    };
    (2.0 * (layout.b_gain + 1.0)).sqrt() * profile * layout.lambda / (4.0 * PI * d)
        * (-layout.kappa_abs * d / 2.0).exp()
}

/// Fills `out` with the panel response to a source at Cartesian `point`:
/// entry (i-1) n_e + (n-1) is attenuation times exp(j 2 pi d / lambda) with
/// d the Euclidean distance from element (i, n).
pub(crate) fn fill_response(
    side: Side,
    point: [f64; 3],
    layout: &ArrayLayout,
    out: &mut [C64],
) -> Result<()> {
    debug_assert_eq!(out.len(), layout.total_elements());
    let wavenumber = TAU / layout.lambda;
    let mut idx = 0;
    for i in 0..layout.n_rf {
        let x_e = layout.d_p / 2.0 + i as f64 * layout.d_rf;
        let x_e = match side {
            Side::Tx => x_e,
            Side::Rx => -x_e,
        };
        let dx = point[0] - x_e;
        let planar_sq = dx * dx + point[1] * point[1];
        for n in 0..layout.n_e {
            let dz = point[2] - n as f64 * layout.d_e;
            let d = (planar_sq + dz * dz).sqrt();
            if !(d > 0.0) {
                return Err(Error::invalid(
                    "point",
                    "source coincides with an array element (zero path length)",
                ));
            }
            let q = (dz.abs() / d).min(1.0);
            out[idx] = C64::from_polar(element_gain(d, q, layout), wavenumber * d);
            idx += 1;
        }
    }
    Ok(())
}

/// Near-field response vector of one panel toward a point source: length
/// N = n_rf * n_e, ordered microstrip-major.
pub fn steering_vector(side: Side, coord: &SphericalCoord, layout: &ArrayLayout) -> Result<CVec> {
    let mut v = CVec::zeros(layout.total_elements());
    fill_response(side, coord.cartesian(), layout, v.as_mut_slice())?;
    Ok(v)
}

/// Downlink channel from the TX panel to one user: L x N, row ell holding
/// the response of every TX element at the user's ell-th antenna.
pub fn dl_channel(ue: &UeDescriptor, layout: &ArrayLayout) -> Result<CMat> {
    ue.validate()?;
    let n = layout.total_elements();
    let mut h = CMat::zeros(ue.l_antennas, n);
    let mut buf = vec![C64::new(0.0, 0.0); n];
    for ell in 1..=ue.l_antennas {
        fill_response(Side::Tx, ue.antenna_position(ell)?, layout, &mut buf)?;
        for (c, v) in buf.iter().enumerate() {
            h[(ell - 1, c)] = *v;
        }
    }
    Ok(h)
}

/// Target reflection channel H_R = sum_k beta_k a_RX(k) a_TX(k)^T, an N x N
/// matrix of rank at most K. The transpose (not the adjoint) keeps the
/// outbound leg in the same phase convention as the downlink channel, so the
/// round-trip phase accumulates over both legs. With `include_reflection`
/// off every beta_k is replaced by 1, matching the estimator's view where
/// the coefficients are unknown.
pub fn radar_channel(
    scenario: &Scenario,
    layout: &ArrayLayout,
    include_reflection: bool,
) -> Result<CMat> {
    scenario.validate()?;
    let n = layout.total_elements();
    let mut h = CMat::zeros(n, n);
    for (k, coord) in scenario.targets.iter().enumerate() {
        let a_rx = steering_vector(Side::Rx, coord, layout)?;
        let a_tx = steering_vector(Side::Tx, coord, layout)?;
        let beta = if include_reflection {
            scenario.reflection_coeffs[k]
        } else {
            C64::new(1.0, 0.0)
        };
        h.ger(beta, &a_rx, &a_tx, C64::new(1.0, 0.0));
    }
    Ok(h)
}

/// Self-interference channel between the TX and RX panels: entry
/// ((i-1) n_e + n, (i'-1) n_e + n') couples RX element (i, n) to TX element
/// (i', n') over their Euclidean separation. Requires d_p > 0 so that no
/// element pair coincides.
pub fn si_channel(layout: &ArrayLayout) -> Result<CMat> {
    layout.validate()?;
    if !(layout.d_p > 0.0) {
        return Err(Error::invalid(
            "d_p",
            "panels coincide (d_p = 0), self-interference distance would vanish",
        ));
    }
    let (n_rf, n_e) = (layout.n_rf, layout.n_e);
    let wavenumber = TAU / layout.lambda;
    // The separation depends only on the microstrip index sum and the
    // absolute element offset, so one entry per distinct pair suffices.
    let mut table = vec![C64::new(0.0, 0.0); (2 * n_rf - 1) * n_e];
    for s in 0..(2 * n_rf - 1) {
        let x_sep = layout.d_p + s as f64 * layout.d_rf;
        for dn in 0..n_e {
            let z_sep = dn as f64 * layout.d_e;
            let d = x_sep.hypot(z_sep);
            let q = (z_sep / d).min(1.0);
            table[s * n_e + dn] = C64::from_polar(element_gain(d, q, layout), wavenumber * d);
        }
    }
    let n = n_rf * n_e;
    Ok(CMat::from_fn(n, n, |row, col| {
        let (i, nn) = (row / n_e, row % n_e);
        let (ip, np) = (col / n_e, col % n_e);
        table[(i + ip) * n_e + nn.abs_diff(np)]
    }))
}
