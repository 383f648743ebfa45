//! Link-level simulator for a full-duplex holographic-MIMO node performing
//! near-field integrated sensing and communication at sub-THz frequencies.
//!
//! The node carries one transmit and one receive dynamic metasurface antenna
//! (DMA) panel. It beams data to multiple downlink users while the same
//! waveform, reflected off point targets, is captured full-duplex by the
//! receive panel and fed to a 3D MUSIC estimator for range / elevation /
//! azimuth recovery. Analog beamformers are Lorentzian-constrained metamaterial
//! weights searched over a phase codebook; the digital side applies
//! block-diagonalization precoding and exact digital self-interference
//! cancellation.
//!
//! Module map:
//! - [`geometry`]: element positions, near-field steering vectors, downlink /
//!   radar / self-interference channels.
//! - [`dma`]: microstrip propagation, Lorentzian weights, analog beamformer
//!   assembly and phase compensation.
//! - [`estimation`]: sample covariance, subspace split, 3D MUSIC spectrum and
//!   grid peak search.
//! - [`beamforming`]: codebook searches for the analog weights, digital SI
//!   cancellation, single-user and block-diagonalization precoding.
//! - [`simulate`]: received-signal synthesis, rates, RMSE, Monte Carlo driver.
//! - [`cli`]: config loading and CSV emission.

pub mod beamforming;
pub mod cli;
pub mod dma;
pub mod error;
pub mod estimation;
pub mod geometry;
pub mod linalg;
pub mod simulate;

pub use error::{Error, Result};

/// Complex sample type used throughout.
pub type C64 = num_complex::Complex64;
/// Dynamically sized complex matrix.
pub type CMat = nalgebra::DMatrix<C64>;
/// Dynamically sized complex column vector.
pub type CVec = nalgebra::DVector<C64>;
