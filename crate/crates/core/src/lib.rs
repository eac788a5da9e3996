//! Multichannel speech enhancement with mask-driven convolutional beamformers.
//!
//! The crate covers the whole simulate → enhance → decode → evaluate chain:
//!
//! - [`scene`]: reverberant multi-speaker scenes with every oracle component kept
//! - [`stft`]: weighted overlap-add analysis and synthesis
//! - [`masks`]: oracle ratio masks, cross-microphone alignment and averaging
//! - [`beamform`]: wMPDR / wLCMP convolutional beamformers and the MPDR, LCMP,
//!   MVDR and LCMV baselines
//! - [`aad`]: envelope-correlation auditory attention decoding
//! - [`metrics`]: frequency-weighted segmental SNR and decoding statistics
//!
//! Per-bin and per-channel work is parallelized with rayon under the
//! `parallel` feature (on by default).

pub mod aad;
pub mod beamform;
pub mod error;
pub mod linalg;
pub mod masks;
pub mod metrics;
pub mod par;
pub mod scene;
pub mod stft;
pub mod tensor;

pub use error::{Error, Result};
