//! Attack-signature forensics for a toy speaker recognizer.
//!
//! The crate covers the full chain: a deterministic synthetic speech corpus,
//! a small waveform-level speaker classifier/verifier, gradient-based
//! adversarial attacks (FGSM, Iter-FGSM, PGD, Carlini-Wagner) under L0/L1/L2/Linf
//! threat models, attack-signature embedding networks, PLDA scoring for attack
//! classification/verification/unknown-attack detection, and the evaluation
//! machinery (confusion matrices, EER, calibration) tying it together.

pub mod error;

pub use error::{Error, Result};
pub mod graph;
pub mod seed;
pub mod tensor;
pub mod signal;
pub mod synth;
pub mod wav;
pub mod checkpoint;
pub mod net;
pub mod train;
pub mod plda;
pub mod eval;
pub mod victim;
pub mod attacks;
pub mod signatures;
