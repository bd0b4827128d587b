use rand::Rng;

use super::manifest::{Manifest, TargetKind, TrainingPair};
use crate::error::{Error, Result};

/// Draws a training context, then pairs uniformly within it.
#[derive(Debug, Clone)]
pub struct PairSampler<'a> {
    speech: Vec<&'a TrainingPair>,
    noise: Vec<&'a TrainingPair>,
    speech_fraction: f64,
}

impl<'a> PairSampler<'a> {
    /// `speech_fraction` is the probability of a SPEECH context. A value of exactly 1 (or 0)
    /// disables the other context and tolerates an empty pool for it.
    pub fn new(manifest: &'a Manifest, speech_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&speech_fraction) {
            return Err(Error::Config(format!(
                "speech_fraction {speech_fraction} must lie in [0, 1]"
            )));
        }
        let speech: Vec<_> = manifest.pairs_of(TargetKind::Speech).collect();
        let noise: Vec<_> = manifest.pairs_of(TargetKind::Noise).collect();
        if speech_fraction > 0.0 && speech.is_empty() {
            return Err(Error::Config("manifest has no SPEECH pairs".into()));
        }
        if speech_fraction < 1.0 && noise.is_empty() {
            return Err(Error::Config("manifest has no NOISE pairs".into()));
        }
        Ok(Self {
            speech,
            noise,
            speech_fraction,
        })
    }

    pub fn draw_kind<R: Rng + ?Sized>(&self, rng: &mut R) -> TargetKind {
        if rng.random::<f64>() < self.speech_fraction {
            TargetKind::Speech
        } else {
            TargetKind::Noise
        }
    }

    pub fn draw_in<R: Rng + ?Sized>(&self, kind: TargetKind, rng: &mut R) -> &'a TrainingPair {
        let pool = match kind {
            TargetKind::Speech => &self.speech,
            TargetKind::Noise => &self.noise,
        };
        pool[rng.random_range(0..pool.len())]
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> &'a TrainingPair {
        let kind = self.draw_kind(rng);
        self.draw_in(kind, rng)
    }

    /// A batch of `n` pairs sharing one context.
    pub fn draw_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (TargetKind, Vec<&'a TrainingPair>) {
        let kind = self.draw_kind(rng);
        (kind, (0..n).map(|_| self.draw_in(kind, rng)).collect())
    }
}

/// Single draw: SPEECH with probability `speech_fraction`, uniform within the kind.
pub fn sample_training_item<'a, R: Rng + ?Sized>(
    m: &'a Manifest,
    rng: &mut R,
    speech_fraction: f64,
) -> Result<&'a TrainingPair> {
    Ok(PairSampler::new(m, speech_fraction)?.draw(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{FrameConfig, MelConfig};
    use crate::data::manifest::{ManifestHeader, NormStats, Split, MANIFEST_SCHEMA_VERSION};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::path::PathBuf;

    fn manifest(m: usize, o: usize) -> Manifest {
        let entries = (0..m + o)
            .map(|i| {
                let kind = if i < m { TargetKind::Speech } else { TargetKind::Noise };
                TrainingPair {
                    id: format!("p{i}"),
                    noisy_path: String::new(),
                    target_path: String::new(),
                    target_kind: kind,
                    instruction: kind.instruction(),
                    snr_db: 0.0,
                    seed: i as u64,
                    noise_kind: "WHITE".into(),
                    clean_path: String::new(),
                    noise_path: String::new(),
                }
            })
            .collect();
        Manifest {
            header: ManifestHeader {
                schema_version: MANIFEST_SCHEMA_VERSION,
                corpus_seed: 0,
                split: Split::Train,
                m,
                o,
                sample_rate: 16000,
                frame: FrameConfig::default(),
                mel: MelConfig::default(),
                norm: NormStats::from_percentiles(-1.0, 1.0).unwrap(),
                noise_kinds: vec![],
            },
            entries,
            root: PathBuf::new(),
        }
    }

    #[test]
    fn speech_frequency_concentrates() {
        let m = manifest(10, 10);
        let s = PairSampler::new(&m, 0.75).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| s.draw(&mut rng).target_kind == TargetKind::Speech)
            .count();
        let f = hits as f64 / n as f64;
        assert!((0.74..=0.76).contains(&f), "{f}");
    }

    #[test]
    fn fraction_one_is_all_speech() {
        let m = manifest(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p = sample_training_item(&m, &mut rng, 1.0).unwrap();
            assert_eq!(p.target_kind, TargetKind::Speech);
        }
    }

    #[test]
    fn empty_pool_is_config_error() {
        let m = manifest(3, 0);
        let err = PairSampler::new(&m, 0.75).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(PairSampler::new(&m, 1.0).is_ok());
        assert!(matches!(PairSampler::new(&m, 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn batches_share_one_context() {
        let m = manifest(4, 4);
        let s = PairSampler::new(&m, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let (kind, batch) = s.draw_batch(5, &mut rng);
            assert!(batch.iter().all(|p| p.target_kind == kind && p.instruction == kind.instruction()));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn ratio_within_four_sigma(p in 0.05f64..0.95, seed in 0u64..1000) {
            let m = manifest(5, 5);
            let s = PairSampler::new(&m, p).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 4000;
            let hits = (0..n).filter(|_| s.draw(&mut rng).target_kind == TargetKind::Speech).count();
            let f = hits as f64 / n as f64;
            prop_assert!((f - p).abs() <= 4.0 * (p * (1.0 - p) / n as f64).sqrt());
        }
    }
}
