use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use super::ingest::load_wav_directory;
use super::manifest::{
    Manifest, ManifestHeader, NormStats, Split, TargetKind, TrainingPair, MANIFEST_SCHEMA_VERSION,
};
use super::mix::MixedPair;
use super::synth::{synthesize_clean, synthesize_noise, NoiseKind};
use crate::audio::wav::{dequantize, quantize, write_wav};
use crate::audio::{mel_spectrogram, FrameConfig, MelConfig, Waveform};
use crate::error::{Error, Result};
use crate::parallel;

/// Peak level a stored mixture may reach; louder mixtures are attenuated as a whole.
const MIX_PEAK: f64 = 0.99;

/// Real recordings to draw clips from instead of the synthetic surrogates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectorySource {
    pub speech_dir: PathBuf,
    pub noise_dir: PathBuf,
    /// Noise for the unseen test split; the seen noise directory is used when absent.
    pub unseen_noise_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub sample_rate: u32,
    /// Length of every clip in seconds.
    pub clip_seconds: f64,
    /// SPEECH-target pairs (M) across train and dev.
    pub speech_pairs: usize,
    /// NOISE-target pairs (O) across train and dev.
    pub noise_pairs: usize,
    pub dev_fraction: f64,
    pub test_seen_items: usize,
    pub test_unseen_items: usize,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub seen_noise: Vec<NoiseKind>,
    pub unseen_noise: Vec<NoiseKind>,
    /// Reuse the mixture of SPEECH pair j for NOISE pair j instead of mixing afresh.
    pub shared_mixtures: bool,
    pub norm_low_percentile: f64,
    pub norm_high_percentile: f64,
    pub directories: Option<DirectorySource>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sample_rate: 16_000,
            clip_seconds: 1.27,
            speech_pairs: 100,
            noise_pairs: 30,
            dev_fraction: 0.05,
            test_seen_items: 10,
            test_unseen_items: 10,
            snr_min_db: -5.0,
            snr_max_db: 15.0,
            seen_noise: vec![NoiseKind::White, NoiseKind::Pink, NoiseKind::BabbleSurrogate],
            unseen_noise: vec![NoiseKind::Impulsive, NoiseKind::Hum],
            shared_mixtures: false,
            norm_low_percentile: 0.5,
            norm_high_percentile: 99.5,
            directories: None,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.clip_seconds > 0.0) {
            return bad(format!("clip_seconds must be positive, got {}", self.clip_seconds));
        }
        if !(-5.0 <= self.snr_min_db && self.snr_min_db <= self.snr_max_db && self.snr_max_db <= 15.0) {
            return bad(format!(
                "SNR range [{}, {}] must lie within [-5, 15] dB",
                self.snr_min_db, self.snr_max_db
            ));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return bad(format!("dev_fraction {} must lie in [0, 1)", self.dev_fraction));
        }
        if self.directories.is_none() {
            if self.seen_noise.is_empty() {
                return bad("seen_noise must name at least one kind".into());
            }
            if self.test_unseen_items > 0 && self.unseen_noise.is_empty() {
                return bad("unseen_noise is empty but test_unseen_items > 0".into());
            }
            if let Some(k) = self.seen_noise.iter().find(|k| self.unseen_noise.contains(k)) {
                return bad(format!("noise kind {k} is both seen and unseen"));
            }
        }
        if self.shared_mixtures && self.noise_pairs > self.speech_pairs {
            return bad("shared mixtures need noise_pairs <= speech_pairs".into());
        }
        if !(0.0 <= self.norm_low_percentile
            && self.norm_low_percentile < self.norm_high_percentile
            && self.norm_high_percentile <= 100.0)
        {
            return bad("normalization percentiles must satisfy 0 <= low < high <= 100".into());
        }
        Ok(())
    }

    fn clip_len(&self) -> usize {
        ((self.clip_seconds * self.sample_rate as f64).round() as usize).max(1)
    }
}

/// The four split manifests produced by one corpus build.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifests {
    pub train: Manifest,
    pub dev: Manifest,
    pub test_seen: Manifest,
    pub test_unseen: Manifest,
}

impl CorpusManifests {
    pub fn get(&self, split: Split) -> &Manifest {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::TestSeen => &self.test_seen,
            Split::TestUnseen => &self.test_unseen,
        }
    }
}

/// Where clean and noise clips come from.
enum Sources {
    Synthetic {
        seen: Vec<NoiseKind>,
        unseen: Vec<NoiseKind>,
    },
    Files {
        speech: Vec<(String, Waveform)>,
        seen: Vec<(String, Waveform)>,
        unseen: Vec<(String, Waveform)>,
    },
}

fn labelled(files: Vec<(PathBuf, Waveform)>) -> Vec<(String, Waveform)> {
    files
        .into_iter()
        .map(|(p, w)| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            (format!("FILE:{stem}"), w)
        })
        .collect()
}

impl Sources {
    fn new(cfg: &CorpusConfig) -> Result<Self> {
        Ok(match &cfg.directories {
            None => Sources::Synthetic {
                seen: cfg.seen_noise.clone(),
                unseen: cfg.unseen_noise.clone(),
            },
            Some(d) => {
                let seen = labelled(load_wav_directory(&d.noise_dir, cfg.sample_rate)?);
                let unseen = match &d.unseen_noise_dir {
                    Some(u) => labelled(load_wav_directory(u, cfg.sample_rate)?),
                    None => seen.clone(),
                };
                Sources::Files {
                    speech: labelled(load_wav_directory(&d.speech_dir, cfg.sample_rate)?),
                    seen,
                    unseen,
                }
            }
        })
    }

    fn kind_labels(&self, unseen: bool) -> Vec<String> {
        match self {
            Sources::Synthetic { seen, unseen: u } => {
                let ks = if unseen { u } else { seen };
                ks.iter().map(|k| k.to_string()).collect()
            }
            Sources::Files { seen, unseen: u, .. } => {
                let fs = if unseen { u } else { seen };
                fs.iter().map(|(l, _)| l.clone()).collect()
            }
        }
    }
}

/// Deterministic `len`-sample excerpt of `w` (tiled when shorter).
fn excerpt(w: &Waveform, len: usize, rng: &mut ChaCha8Rng) -> Result<Waveform> {
    let src = w.samples();
    if src.is_empty() {
        return Err(Error::InvalidInput("empty source recording".into()));
    }
    let start = if src.len() > len { rng.random_range(0..=src.len() - len) } else { 0 };
    let x = (0..len).map(|i| src[(start + i) % src.len()]).collect();
    Waveform::new(x, w.sample_rate())
}

/// A stored mixture: quantized clean, scaled noise, and their exact sum.
struct Mixture {
    clean: Vec<i16>,
    noise: Vec<i16>,
    noisy: Vec<i16>,
    snr_db: f64,
    noise_label: String,
}

fn mixture(cfg: &CorpusConfig, sources: &Sources, seed: u64, unseen: bool) -> Result<Mixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.clip_len();
    let labels = sources.kind_labels(unseen);
    let pick = rng.random_range(0..labels.len());
    let snr_db = if cfg.snr_max_db > cfg.snr_min_db {
        rng.random_range(cfg.snr_min_db..=cfg.snr_max_db)
    } else {
        cfg.snr_min_db
    };
    let (clean, noise) = match sources {
        Sources::Synthetic { seen, unseen: u } => {
            let kind = if unseen { u[pick] } else { seen[pick] };
            let dur = n as f64 / cfg.sample_rate as f64;
            (
                synthesize_clean(derive_seed(seed, "clean", 0), dur, cfg.sample_rate)?,
                synthesize_noise(kind, derive_seed(seed, "noise", 0), dur, cfg.sample_rate)?,
            )
        }
        Sources::Files { speech, seen, unseen: u } => {
            let pool = if unseen { u } else { seen };
            let s = rng.random_range(0..speech.len());
            (excerpt(&speech[s].1, n, &mut rng)?, excerpt(&pool[pick].1, n, &mut rng)?)
        }
    };
    let mix = MixedPair::new(&clean, &noise, snr_db)?;
    let peak = mix.noisy.samples().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let headroom = if peak > MIX_PEAK { MIX_PEAK / peak } else { 1.0 };
    let clean: Vec<i16> = clean.samples().iter().map(|v| quantize(v * headroom)).collect();
    let noise: Vec<i16> = mix.scaled_noise.samples().iter().map(|v| quantize(v * headroom)).collect();
    let noisy = clean
        .iter()
        .zip(&noise)
        .map(|(a, b)| a.saturating_add(*b))
        .collect();
    Ok(Mixture {
        clean,
        noise,
        noisy,
        snr_db,
        noise_label: labels[pick].clone(),
    })
}

fn to_waveform(q: &[i16], sr: u32) -> Waveform {
    Waveform::new(q.iter().map(|v| dequantize(*v)).collect(), sr).expect("dequantized samples are finite")
}

/// Regenerates the noisy waveform of a stored pair from its seed and the corpus config.
pub fn remix(cfg: &CorpusConfig, split: Split, pair: &TrainingPair) -> Result<Waveform> {
    let sources = Sources::new(cfg)?;
    let m = mixture(cfg, &sources, pair.seed, split == Split::TestUnseen)?;
    Ok(to_waveform(&m.noisy, cfg.sample_rate))
}

/// One mixture to generate, and the pairs that reference it.
struct Plan {
    split: Split,
    id: String,
    seed: u64,
    kinds: Vec<TargetKind>,
}

fn plan(cfg: &CorpusConfig) -> Vec<Plan> {
    let mut plans = Vec::new();
    let split_of = |i: usize, total: usize| {
        let dev = (total as f64 * cfg.dev_fraction).round() as usize;
        if i >= total - dev {
            Split::Dev
        } else {
            Split::Train
        }
    };
    for i in 0..cfg.speech_pairs {
        let mut kinds = vec![TargetKind::Speech];
        if cfg.shared_mixtures && i < cfg.noise_pairs {
            kinds.push(TargetKind::Noise);
        }
        plans.push(Plan {
            split: split_of(i, cfg.speech_pairs),
            id: format!("s{i:05}"),
            seed: derive_seed(cfg.seed, "speech-pair", i as u64),
            kinds,
        });
    }
    if !cfg.shared_mixtures {
        for i in 0..cfg.noise_pairs {
            plans.push(Plan {
                split: split_of(i, cfg.noise_pairs),
                id: format!("n{i:05}"),
                seed: derive_seed(cfg.seed, "noise-pair", i as u64),
                kinds: vec![TargetKind::Noise],
            });
        }
    }
    for (split, count, label) in [
        (Split::TestSeen, cfg.test_seen_items, "test-seen"),
        (Split::TestUnseen, cfg.test_unseen_items, "test-unseen"),
    ] {
        for i in 0..count {
            plans.push(Plan {
                split,
                id: format!("{}{i:05}", if split == Split::TestSeen { "ts" } else { "tu" }),
                seed: derive_seed(cfg.seed, label, i as u64),
                kinds: vec![TargetKind::Speech],
            });
        }
    }
    plans
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((q / 100.0) * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Generates every clip, writes WAVs under `out_dir/audio` and one manifest per split
/// (`train.jsonl`, `dev.jsonl`, `test-seen.jsonl`, `test-unseen.jsonl`), plus the
/// corpus configuration as `corpus.json`.
///
/// Normalization statistics are percentiles of the natural-log mel power of all
/// training clips (noisy, clean and noise).
pub fn build_manifest(
    cfg: &CorpusConfig,
    frame: &FrameConfig,
    mel: &MelConfig,
    out_dir: &Path,
) -> Result<CorpusManifests> {
    cfg.validate()?;
    frame.validate()?;
    mel.validate(cfg.sample_rate)?;
    let audio_dir = out_dir.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let sources = Sources::new(cfg)?;
    let plans = plan(cfg);
    let identity = MelConfig {
        norm_scale: 1.0,
        norm_shift: 0.0,
        ..*mel
    };
    let sr = cfg.sample_rate;

    let results = parallel::map_indexed(plans.len(), |i| -> Result<(Mixture, Vec<f64>)> {
        let p = &plans[i];
        let m = mixture(cfg, &sources, p.seed, p.split == Split::TestUnseen)?;
        for (suffix, q) in [("noisy", &m.noisy), ("clean", &m.clean), ("noise", &m.noise)] {
            write_wav(&audio_dir.join(format!("{}_{suffix}.wav", p.id)), &to_waveform(q, sr))?;
        }
        let mut logs = Vec::new();
        if p.split == Split::Train {
            for q in [&m.noisy, &m.clean, &m.noise] {
                let ms = mel_spectrogram(&to_waveform(q, sr), frame, &identity)?;
                logs.extend(ms.values.iter().copied());
            }
        }
        Ok((m, logs))
    });
    let mut mixtures = Vec::with_capacity(results.len());
    let mut logs = Vec::new();
    for r in results {
        let (m, l) = r?;
        mixtures.push(m);
        logs.extend(l);
    }
    if logs.is_empty() {
        for m in &mixtures {
            let ms = mel_spectrogram(&to_waveform(&m.noisy, sr), frame, &identity)?;
            logs.extend(ms.values.iter().copied());
        }
    }
    logs.sort_by(|a, b| a.total_cmp(b));
    let norm = NormStats::from_percentiles(
        percentile(&logs, cfg.norm_low_percentile),
        percentile(&logs, cfg.norm_high_percentile),
    )?;
    let mel_norm = norm.apply(mel);

    let make = |split: Split| -> Manifest {
        let mut entries = Vec::new();
        for kind in [TargetKind::Speech, TargetKind::Noise] {
            for (p, m) in plans.iter().zip(&mixtures) {
                if p.split != split || !p.kinds.contains(&kind) {
                    continue;
                }
                let file = |s: &str| format!("audio/{}_{s}.wav", p.id);
                let (id, target) = match kind {
                    TargetKind::Speech => (p.id.clone(), file("clean")),
                    TargetKind::Noise if p.kinds.len() > 1 => (format!("{}-noise", p.id), file("noise")),
                    TargetKind::Noise => (p.id.clone(), file("noise")),
                };
                entries.push(TrainingPair {
                    id,
                    noisy_path: file("noisy"),
                    target_path: target,
                    target_kind: kind,
                    instruction: kind.instruction(),
                    snr_db: m.snr_db,
                    seed: p.seed,
                    noise_kind: m.noise_label.clone(),
                    clean_path: file("clean"),
                    noise_path: file("noise"),
                });
            }
        }
        let count = |k: TargetKind| entries.iter().filter(|e| e.target_kind == k).count();
        Manifest {
            header: ManifestHeader {
                schema_version: MANIFEST_SCHEMA_VERSION,
                corpus_seed: cfg.seed,
                split,
                m: count(TargetKind::Speech),
                o: count(TargetKind::Noise),
                sample_rate: sr,
                frame: *frame,
                mel: mel_norm,
                norm,
                noise_kinds: sources.kind_labels(split == Split::TestUnseen),
            },
            entries,
            root: out_dir.to_path_buf(),
        }
    };
    let out = CorpusManifests {
        train: make(Split::Train),
        dev: make(Split::Dev),
        test_seen: make(Split::TestSeen),
        test_unseen: make(Split::TestUnseen),
    };
    for split in Split::ALL {
        out.get(split).write(&out_dir.join(split.file_name()))?;
    }
    let cfg_path = out_dir.join("corpus.json");
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    std::fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::wav::read_wav;

    fn small() -> CorpusConfig {
        CorpusConfig {
            seed: 5,
            clip_seconds: 0.25,
            speech_pairs: 20,
            noise_pairs: 6,
            dev_fraction: 0.1,
            test_seen_items: 3,
            test_unseen_items: 3,
            ..Default::default()
        }
    }

    fn build(cfg: &CorpusConfig, dir: &Path) -> CorpusManifests {
        build_manifest(cfg, &FrameConfig::default(), &MelConfig::default(), dir).unwrap()
    }

    #[test]
    fn counts_echo_config() {
        let dir = tempfile::tempdir().unwrap();
        let c = build(&small(), dir.path());
        assert_eq!(c.train.header.m + c.dev.header.m, 20);
        assert_eq!(c.train.header.o + c.dev.header.o, 6);
        assert_eq!(c.dev.header.m, 2);
        let loaded = Manifest::load(&dir.path().join("train.jsonl")).unwrap();
        assert_eq!(loaded.entries, c.train.entries);
        assert_eq!(loaded.to_jsonl(), std::fs::read_to_string(dir.path().join("train.jsonl")).unwrap());
        for e in &c.train.entries {
            assert!((-5.0..=15.0).contains(&e.snr_db));
        }
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        build(&small(), a.path());
        build(&small(), b.path());
        for split in Split::ALL {
            let fa = std::fs::read(a.path().join(split.file_name())).unwrap();
            let fb = std::fs::read(b.path().join(split.file_name())).unwrap();
            assert_eq!(fa, fb);
        }
        let wa = std::fs::read(a.path().join("audio/s00003_noisy.wav")).unwrap();
        let wb = std::fs::read(b.path().join("audio/s00003_noisy.wav")).unwrap();
        assert_eq!(wa, wb);
    }

    #[test]
    fn seen_and_unseen_kinds_are_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let c = build(&small(), dir.path());
        let unseen: Vec<_> = c.test_unseen.entries.iter().map(|e| e.noise_kind.clone()).collect();
        for e in c.train.entries.iter().chain(&c.dev.entries) {
            assert!(!unseen.contains(&e.noise_kind));
            assert!(["WHITE", "PINK", "BABBLE_SURROGATE"].contains(&e.noise_kind.as_str()));
        }
        assert!(unseen.iter().all(|k| k == "IMPULSIVE" || k == "HUM"));
    }

    #[test]
    fn noisy_files_are_exact_sums_and_remixable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let c = build(&cfg, dir.path());
        for (split, m) in [(Split::Train, &c.train), (Split::TestUnseen, &c.test_unseen)] {
            for e in m.entries.iter().take(6) {
                let noisy = read_wav(&m.resolve(&e.noisy_path)).unwrap();
                let clean = read_wav(&m.resolve(&e.clean_path)).unwrap();
                let noise = read_wav(&m.resolve(&e.noise_path)).unwrap();
                for ((y, x), n) in noisy.samples().iter().zip(clean.samples()).zip(noise.samples()) {
                    assert_eq!(*y, x + n);
                }
                assert_eq!(remix(&cfg, split, e).unwrap(), noisy);
            }
        }
    }

    #[test]
    fn shared_mixtures_pair_up() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            speech_pairs: 4,
            noise_pairs: 4,
            dev_fraction: 0.0,
            shared_mixtures: true,
            test_seen_items: 0,
            test_unseen_items: 0,
            ..small()
        };
        let c = build(&cfg, dir.path());
        assert_eq!((c.train.header.m, c.train.header.o), (4, 4));
        let speech: Vec<_> = c.train.pairs_of(TargetKind::Speech).collect();
        let noise: Vec<_> = c.train.pairs_of(TargetKind::Noise).collect();
        for (s, n) in speech.iter().zip(&noise) {
            assert_eq!(s.noisy_path, n.noisy_path);
            assert_eq!(n.target_path, s.noise_path);
        }
    }

    #[test]
    fn normalization_spans_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let c = build(&small(), dir.path());
        let mel = c.train.header.mel;
        assert!((mel.normalize_power(c.train.header.norm.log_power_high.exp()) - 1.0).abs() < 1e-9);
        assert!(mel.norm_scale > 0.0);
    }

    #[test]
    fn overlapping_kinds_are_rejected() {
        let cfg = CorpusConfig {
            unseen_noise: vec![NoiseKind::White],
            ..small()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = CorpusConfig {
            snr_min_db: -10.0,
            ..small()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn directory_source_is_ingested() {
        let src = tempfile::tempdir().unwrap();
        let (sp, nz) = (src.path().join("speech"), src.path().join("noise"));
        std::fs::create_dir_all(&sp).unwrap();
        std::fs::create_dir_all(&nz).unwrap();
        write_wav(&sp.join("talk.wav"), &synthesize_clean(1, 0.5, 8000).unwrap()).unwrap();
        write_wav(&nz.join("fan.wav"), &synthesize_noise(NoiseKind::Pink, 1, 0.3, 16000).unwrap()).unwrap();
        let cfg = CorpusConfig {
            speech_pairs: 3,
            noise_pairs: 2,
            dev_fraction: 0.0,
            test_unseen_items: 1,
            test_seen_items: 1,
            directories: Some(DirectorySource {
                speech_dir: sp,
                noise_dir: nz,
                unseen_noise_dir: None,
            }),
            ..small()
        };
        let out = tempfile::tempdir().unwrap();
        let c = build(&cfg, out.path());
        assert_eq!(c.train.header.m, 3);
        assert!(c.train.entries.iter().all(|e| e.noise_kind == "FILE:fan"));
        let w = read_wav(&c.train.resolve(&c.train.entries[0].noisy_path)).unwrap();
        assert_eq!(w.len(), 4000);
    }
}
