//! Core library for a fiber BB84 quantum key distribution simulator.
//!
//! The crate is layered bottom-up:
//!
//! * [`bits`]: packed bit strings shared by every layer.
//! * [`link`]: closed-form photon-budget model of the fiber link
//!   (transmittance, visibility, error rates, sifted-key rate).
//! * [`sim`]: stochastic engines that realize the link model as concrete
//!   detection records, exactly per cycle or via aggregated tallies.
//! * [`wire`]: the framed classical-channel protocol and its transports.
//! * [`cascade`]: interactive parity-exchange error reconciliation.
//! * [`privacy`]: leakage accounting and universal-hash key compression.
//! * [`security`]: eavesdropping bounds and go/no-go range analysis.
//! * [`session`]: the two endpoint state machines tying it all together.
//! * [`runner`]: in-process and TCP orchestration plus run reporting.

pub mod bits;
pub mod cascade;
pub mod link;
pub mod privacy;
pub mod runner;
pub mod security;
pub mod session;
pub mod sim;
pub mod wire;

pub use bits::Bits;
pub use link::LinkParams;
