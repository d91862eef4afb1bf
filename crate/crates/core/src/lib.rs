//! Group resonance network (GRN) for cross-subject EEG emotion recognition,
//! end to end on synthetic data: band-wise feature extraction, learnable group
//! prototypes, PLV/coherence resonance tensors against reference subjects,
//! resonance-aware fusion, and leakage-guarded SD/LOSO evaluation.

pub mod autograd;
pub mod config;
pub mod dataio;
pub mod error;
pub mod fft;
pub mod model;
pub mod protocol;
pub mod report;
pub mod seeding;
pub mod signal;
pub mod synchrony;
pub mod train;

pub use error::{GrnError, Result};
