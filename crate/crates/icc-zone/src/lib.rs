//! Closed-loop in-car communication (ICC) simulation and robust speech zone
//! detection.
//!
//! An ICC system picks up a front passenger's speech and reinforces it over
//! rear loudspeakers, closing an electroacoustic loop through the cabin. The
//! loudspeaker feedback leaking back into the passenger-dedicated microphones
//! confuses energy-based speech zone detection, which expects the
//! speaker-dedicated microphone to carry the most power.
//!
//! This crate provides the whole experiment pipeline:
//!
//! * [`stft`] - analysis/synthesis between time signals and the STFT domain,
//! * [`ctf`] - band-to-band convolutive transfer functions, their
//!   identification from time-domain filters and the stability border of
//!   recursive CTF loops,
//! * [`acoustics`] - free-field and image-source impulse responses plus the
//!   cabin geometry,
//! * [`sim`] - ground-truth time-domain simulation of the closed ICC loop
//!   with an imperfect feedback canceller, and its calibrations,
//! * [`estimator`] - model-based estimation of the per-microphone feedback
//!   spectra from the observed reference microphone alone,
//! * [`zone`] - PSD tracking, signal power ratios (SPR), direct-signal PSD
//!   estimation and the zone decision,
//! * [`harness`] - experiment configuration, gain sweeps and CSV/JSON/WAV
//!   emission backing the `icc-zone` command line tool.

pub mod acoustics;
pub mod ctf;
pub mod dsp;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod sim;
pub mod stft;
pub mod wav;
pub mod zone;

pub use error::{IccError, Result};

// Compile the guide's code snippets as doctests so the book cannot drift
// away from the library.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            #[allow(dead_code)]
            struct $name;
        };
    }

    chapter!(Introduction, "../../../book/src/introduction.md");
    chapter!(StftEngine, "../../../book/src/stft-engine.md");
    chapter!(Ctf, "../../../book/src/convolutive-transfer-functions.md");
    chapter!(Acoustics, "../../../book/src/cabin-acoustics.md");
    chapter!(LoopSim, "../../../book/src/closed-loop-simulation.md");
    chapter!(Estimator, "../../../book/src/feedback-estimation.md");
    chapter!(ZoneDetection, "../../../book/src/zone-detection.md");
    chapter!(Experiments, "../../../book/src/running-experiments.md");
}
