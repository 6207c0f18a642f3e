//! Rated-utterance manifests and the synthetic tone-in-noise dataset.

mod manifest;
mod synth;

pub use manifest::{mean_std, Manifest, RatedUtterance, RATING_CHECK_TOL};
pub use synth::{
    mos_map, synth_file_name, synth_generate, synth_sample, SynthConfig, SynthSample, SynthSet,
    SYNTH_MANIFEST,
};
