//! Certified fidelity of quantum transmission through lossy, untrusted
//! channels.
//!
//! - [`qstate`]: density operators, fidelity and distances.
//! - [`qchannel`]: Kraus channels, Choi metrics, diamond-distance estimates.
//! - [`certbounds`]: self-testing bounds, finite statistics, certification.
//! - [`simkit`]: Monte Carlo protocol sessions and flip attacks.
//! - [`tomography`]: state and process tomography.
//! - [`runner`]: Alice/Bob sessions over in-process or TCP transports.

pub mod certbounds;
pub mod linalg;
pub mod qchannel;
pub mod qstate;
pub mod runner;
pub mod simkit;
pub mod tomography;

pub use certbounds::{certify, CertInputs, CertResult, Mode};
pub use linalg::{CMatrix, CVector};
pub use qchannel::{KrausChannel, NamedChannel};
pub use qstate::{DensityOperator, NamedState, Observable, PureState, QuantumState};
pub use runner::{SessionParams, WireMessage};
pub use simkit::{ChannelStrategy, DetectorModel, ProtocolParams, ProtocolTranscript, SourceModel, Verdict};
pub use tomography::TomographyDataset;

/// Any error raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    State(#[from] qstate::StateError),
    #[error(transparent)]
    Channel(#[from] qchannel::ChannelError),
    #[error(transparent)]
    Cert(#[from] certbounds::CertError),
    #[error(transparent)]
    Sim(#[from] simkit::SimError),
    #[error(transparent)]
    Tomo(#[from] tomography::TomoError),
    #[error(transparent)]
    Runner(#[from] runner::RunnerError),
}
