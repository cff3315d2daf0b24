//! Operator short-time Fourier transforms, quantum large sieve bounds,
//! mixed-state localization spectra and L1 operator recovery in the
//! Hermite basis.

pub mod acceptance;
pub mod cli;
pub mod error;
pub mod locop;
pub mod opstft;
pub mod output;
mod par;
pub mod phasespace;
pub mod recovery;
pub mod sieve;
pub mod specialfn;

pub use error::{Error, Result};
