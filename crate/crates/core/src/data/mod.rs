//! Corpus generation: speech and noise surrogates, SNR mixing, manifests of
//! noisy-clean and noisy-noise pairs, and the per-step context sampler.

mod corpus;
mod ingest;
mod manifest;
mod mix;
mod sampler;
mod synth;

pub use corpus::{build_manifest, remix, CorpusConfig, CorpusManifests, DirectorySource};
pub use ingest::{load_wav_directory, resample};
pub use manifest::{
    InstructionId, Manifest, ManifestHeader, NormStats, Split, TargetKind, TrainingPair,
    MANIFEST_SCHEMA_VERSION,
};
pub use mix::{mix_at_snr, noise_gain, MixedPair};
pub use sampler::{sample_training_item, PairSampler};
pub use synth::{synthesize_clean, synthesize_noise, NoiseKind, SURROGATE_RMS};

/// Derives an independent child seed from a parent seed and a label (SplitMix64 finalizer
/// over the parent, the label bytes and the index).
pub fn derive_seed(parent: u64, label: &str, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    let mut h = mix(parent);
    for b in label.bytes() {
        h = mix(h ^ b as u64);
    }
    mix(h ^ index)
}
