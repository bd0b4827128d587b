//! Batch evaluation of a trained pipeline over a manifest split.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::audio::wav::read_wav;
use crate::checkpoint::write_atomic;
use crate::data::{InstructionId, Manifest, Split, TargetKind, TrainingPair};
use crate::enhance::{EnhanceConfig, Pipeline};
use crate::error::{Error, Result};
use crate::metrics::{lsd, mean, median, pearson, si_sdr};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One evaluated item. Metric fields are `None` when the item failed; `pesq` and
/// `estoi` are left for external scorers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub noise_kind: String,
    pub snr_db: f64,
    pub si_sdr_noisy: Option<f64>,
    pub si_sdr_enhanced: Option<f64>,
    pub lsd_noisy: Option<f64>,
    pub lsd_enhanced: Option<f64>,
    pub rtf: Option<f64>,
    pub pesq: Option<f64>,
    pub estoi: Option<f64>,
    pub error: Option<String>,
}

impl EvalItem {
    pub fn is_complete(&self) -> bool {
        self.error.is_none()
    }

    pub fn improvement(&self) -> Option<f64> {
        Some(self.si_sdr_enhanced? - self.si_sdr_noisy?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub items: usize,
    pub failed: usize,
    pub si_sdr_noisy_mean: Option<f64>,
    pub si_sdr_enhanced_mean: Option<f64>,
    pub si_sdr_enhanced_median: Option<f64>,
    pub si_sdr_improvement_mean: Option<f64>,
    /// Fraction of complete items whose SI-SDR improved.
    pub improved_fraction: Option<f64>,
    pub lsd_noisy_mean: Option<f64>,
    pub lsd_enhanced_mean: Option<f64>,
    pub lsd_enhanced_median: Option<f64>,
    pub rtf_mean: Option<f64>,
}

impl Aggregate {
    /// Aggregates over the complete rows of `items`; `None` where no row is complete.
    pub fn of<'a>(items: impl IntoIterator<Item = &'a EvalItem>) -> Self {
        let items: Vec<&EvalItem> = items.into_iter().collect();
        let ok: Vec<&EvalItem> = items.iter().copied().filter(|i| i.is_complete()).collect();
        let col = |f: fn(&EvalItem) -> Option<f64>| ok.iter().filter_map(|i| f(i)).collect::<Vec<f64>>();
        let stat = |xs: &[f64], f: fn(&[f64]) -> f64| (!xs.is_empty()).then(|| f(xs));
        let noisy = col(|i| i.si_sdr_noisy);
        let enh = col(|i| i.si_sdr_enhanced);
        let gain = col(|i| i.improvement());
        let lsd_n = col(|i| i.lsd_noisy);
        let lsd_e = col(|i| i.lsd_enhanced);
        let rtf = col(|i| i.rtf);
        let improved = gain.iter().filter(|&&g| g > 0.0).count();
        Aggregate {
            items: items.len(),
            failed: items.len() - ok.len(),
            si_sdr_noisy_mean: stat(&noisy, mean),
            si_sdr_enhanced_mean: stat(&enh, mean),
            si_sdr_enhanced_median: stat(&enh, median),
            si_sdr_improvement_mean: stat(&gain, mean),
            improved_fraction: (!gain.is_empty()).then(|| improved as f64 / gain.len() as f64),
            lsd_noisy_mean: stat(&lsd_n, mean),
            lsd_enhanced_mean: stat(&lsd_e, mean),
            lsd_enhanced_median: stat(&lsd_e, median),
            rtf_mean: stat(&rtf, mean),
        }
    }
}

/// First line of a report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub schema_version: u32,
    pub split: Split,
    pub steps: usize,
    pub seed: u64,
    pub fingerprint: String,
    pub config: serde_json::Value,
    pub overall: Aggregate,
    pub per_noise_kind: BTreeMap<String, Aggregate>,
    /// Rows whose enhancement or scoring failed.
    pub incomplete: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub items: Vec<EvalItem>,
}

impl EvalReport {
    pub fn new(split: Split, cfg: &EnhanceConfig, fingerprint: String, config: serde_json::Value, items: Vec<EvalItem>) -> Self {
        let mut kinds: BTreeMap<String, Vec<&EvalItem>> = BTreeMap::new();
        for it in &items {
            kinds.entry(it.noise_kind.clone()).or_default().push(it);
        }
        let summary = EvalSummary {
            schema_version: REPORT_SCHEMA_VERSION,
            split,
            steps: cfg.steps,
            seed: cfg.seed,
            fingerprint,
            config,
            overall: Aggregate::of(&items),
            per_noise_kind: kinds.into_iter().map(|(k, v)| (k, Aggregate::of(v))).collect(),
            incomplete: items.iter().filter(|i| !i.is_complete()).map(|i| i.id.clone()).collect(),
        };
        Self { summary, items }
    }

    /// Summary line followed by one line per item.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.summary).expect("summary serializes");
        out.push('\n');
        for it in &self.items {
            out.push_str(&serde_json::to_string(it).expect("item serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse = |line: usize, e: serde_json::Error| Error::Parse {
            path: path.to_path_buf(),
            detail: format!("line {line}: {e}"),
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let summary: EvalSummary = serde_json::from_str(lines.next().ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            detail: "empty report".into(),
        })?)
        .map_err(|e| parse(1, e))?;
        if summary.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                detail: format!("report schema {} is not {REPORT_SCHEMA_VERSION}", summary.schema_version),
            });
        }
        let items = lines
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| parse(i + 2, e)))
            .collect::<Result<Vec<EvalItem>>>()?;
        Ok(Self { summary, items })
    }
}

fn score(p: &Pipeline, m: &Manifest, pair: &TrainingPair, cfg: &EnhanceConfig) -> Result<EvalItem> {
    let noisy = read_wav(&m.resolve(&pair.noisy_path))?;
    let clean = read_wav(&m.resolve(&pair.clean_path))?;
    let t0 = Instant::now();
    let enhanced = p.enhance(&noisy, cfg)?;
    let wall = t0.elapsed().as_secs_f64();
    let clean_mel = p.mel(&clean)?;
    Ok(EvalItem {
        id: pair.id.clone(),
        noise_kind: pair.noise_kind.clone(),
        snr_db: pair.snr_db,
        si_sdr_noisy: Some(si_sdr(&noisy, &clean)?),
        si_sdr_enhanced: Some(si_sdr(&enhanced, &clean)?),
        lsd_noisy: Some(lsd(&p.mel(&noisy)?, &clean_mel)?),
        lsd_enhanced: Some(lsd(&p.mel(&enhanced)?, &clean_mel)?),
        rtf: Some(wall / noisy.duration_s()),
        pesq: None,
        estoi: None,
        error: None,
    })
}

/// Enhances every SPEECH-target item of `m` and scores it against its clean reference.
/// Items are processed in parallel; a failing item becomes an incomplete row.
pub fn evaluate_set(
    p: &Pipeline,
    m: &Manifest,
    cfg: &EnhanceConfig,
    fingerprint: String,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let pairs: Vec<&TrainingPair> = m.pairs_of(TargetKind::Speech).collect();
    if pairs.is_empty() {
        return Err(Error::InvalidInput(format!("{} split has no speech items", m.header.split)));
    }
    let items = crate::parallel::map_slice(&pairs, |pair| {
        score(p, m, pair, cfg).unwrap_or_else(|e| {
            log::warn!("item {} failed: {e}", pair.id);
            EvalItem {
                id: pair.id.clone(),
                noise_kind: pair.noise_kind.clone(),
                snr_db: pair.snr_db,
                si_sdr_noisy: None,
                si_sdr_enhanced: None,
                lsd_noisy: None,
                lsd_enhanced: None,
                rtf: None,
                pesq: None,
                estoi: None,
                error: Some(e.to_string()),
            }
        })
    });
    Ok(EvalReport::new(m.header.split, cfg, fingerprint, config, items))
}

/// Pearson correlations of a generated mel with the clean and noise reference mels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextCorrelation {
    pub r_clean: f64,
    pub r_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminationItem {
    pub id: String,
    pub speech: ContextCorrelation,
    pub noise: ContextCorrelation,
    /// Mean absolute difference between the two generated (normalized) mels.
    pub mel_l1: f64,
}

impl DiscriminationItem {
    /// Instruction A output is closer to the clean reference than to the noise.
    pub fn speech_correct(&self) -> bool {
        self.speech.r_clean > self.speech.r_noise
    }

    /// Instruction B output is closer to the noise reference than to the clean speech.
    pub fn noise_correct(&self) -> bool {
        self.noise.r_noise > self.noise.r_clean
    }
}

/// Generates mels under both instructions for every SPEECH item and correlates them
/// (in normalized log-mel units) with both references.
pub fn discrimination(p: &Pipeline, m: &Manifest, cfg: &EnhanceConfig) -> Result<Vec<DiscriminationItem>> {
    let pairs: Vec<&TrainingPair> = m.pairs_of(TargetKind::Speech).collect();
    crate::parallel::map_slice(&pairs, |pair| {
        let noisy = read_wav(&m.resolve(&pair.noisy_path))?;
        let clean = p.mel(&read_wav(&m.resolve(&pair.clean_path))?)?;
        let noise = p.mel(&read_wav(&m.resolve(&pair.noise_path))?)?;
        let gen = |instruction| {
            p.generate_mel(&noisy, &EnhanceConfig { instruction, ..cfg.clone() }, cfg.seed)
        };
        let a = gen(InstructionId::InstructA)?;
        let b = gen(InstructionId::InstructB)?;
        let flat = |m: &crate::audio::MelSpectrogram| m.values.iter().copied().collect::<Vec<f64>>();
        let (clean, noise) = (flat(&clean), flat(&noise));
        let corr = |g: &crate::audio::MelSpectrogram| -> Result<ContextCorrelation> {
            let v = flat(g);
            Ok(ContextCorrelation {
                r_clean: pearson(&v, &clean)?,
                r_noise: pearson(&v, &noise)?,
            })
        };
        let l1 = a.values.iter().zip(b.values.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.values.len() as f64;
        Ok(DiscriminationItem {
            id: pair.id.clone(),
            speech: corr(&a)?,
            noise: corr(&b)?,
            mel_l1: l1,
        })
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, kind: &str, noisy: f64, enh: Option<f64>) -> EvalItem {
        EvalItem {
            id: id.into(),
            noise_kind: kind.into(),
            snr_db: 0.0,
            si_sdr_noisy: Some(noisy),
            si_sdr_enhanced: enh,
            lsd_noisy: Some(5.0),
            lsd_enhanced: enh.map(|_| 3.0),
            rtf: enh.map(|_| 0.5),
            pesq: None,
            estoi: None,
            error: enh.is_none().then(|| "boom".to_string()),
        }
    }

    #[test]
    fn aggregates_skip_failed_rows_and_split_by_kind() {
        let items = vec![
            item("a", "WHITE", 1.0, Some(4.0)),
            item("b", "WHITE", 2.0, Some(1.0)),
            item("c", "HUM", 0.0, None),
            item("d", "HUM", -1.0, Some(2.5)),
        ];
        let r = EvalReport::new(Split::TestSeen, &EnhanceConfig::default(), "fp".into(), serde_json::json!({}), items);
        let o = &r.summary.overall;
        assert_eq!((o.items, o.failed), (4, 1));
        assert!((o.si_sdr_enhanced_mean.unwrap() - 2.5).abs() < 1e-12);
        assert!((o.improved_fraction.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.summary.incomplete, vec!["c".to_string()]);
        assert_eq!(r.summary.per_noise_kind["HUM"].failed, 1);
        assert!((r.summary.per_noise_kind["WHITE"].si_sdr_improvement_mean.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(Aggregate::of(&r.items[2..3]).rtf_mean, None);
    }

    #[test]
    fn report_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let items = vec![item("a", "PINK", 1.0, Some(4.0)), item("b", "PINK", 1.0, None)];
        let r = EvalReport::new(Split::TestUnseen, &EnhanceConfig::default(), "fp".into(), serde_json::json!({"k": 1}), items);
        let path = dir.path().join("report.jsonl");
        r.write(&path).unwrap();
        assert_eq!(EvalReport::read(&path).unwrap(), r);
    }
}
