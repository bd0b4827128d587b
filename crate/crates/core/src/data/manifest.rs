use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{FrameConfig, MelConfig};
use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// One of the two fixed instructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InstructionId {
    #[serde(rename = "INSTRUCT_A")]
    InstructA,
    #[serde(rename = "INSTRUCT_B")]
    InstructB,
}

impl InstructionId {
    pub const ALL: [InstructionId; 2] = [InstructionId::InstructA, InstructionId::InstructB];

    pub fn text(self) -> &'static str {
        match self {
            InstructionId::InstructA => "Speech enhancement",
            InstructionId::InstructB => "Background noise estimation",
        }
    }

    /// Row of the instruction table.
    pub fn index(self) -> usize {
        match self {
            InstructionId::InstructA => 0,
            InstructionId::InstructB => 1,
        }
    }

    pub fn target_kind(self) -> TargetKind {
        match self {
            InstructionId::InstructA => TargetKind::Speech,
            InstructionId::InstructB => TargetKind::Noise,
        }
    }
}

/// What the diffusion target of a pair is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TargetKind {
    Speech,
    Noise,
}

impl TargetKind {
    pub fn instruction(self) -> InstructionId {
        match self {
            TargetKind::Speech => InstructionId::InstructA,
            TargetKind::Noise => InstructionId::InstructB,
        }
    }
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetKind::Speech => "SPEECH",
            TargetKind::Noise => "NOISE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Dev,
    TestSeen,
    TestUnseen,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Dev, Split::TestSeen, Split::TestUnseen];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::TestSeen => "test-seen",
            Split::TestUnseen => "test-unseen",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s.trim().to_ascii_lowercase().replace('_', "-"))
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Affine map from natural-log mel power to roughly [-1, 1], estimated on training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub norm_scale: f64,
    pub norm_shift: f64,
    /// Log-power percentiles the map sends to -1 and +1.
    pub log_power_low: f64,
    pub log_power_high: f64,
}

impl NormStats {
    pub fn from_percentiles(low: f64, high: f64) -> Result<Self> {
        if !(high > low) {
            return Err(Error::InvalidInput(format!(
                "degenerate log-power range [{low}, {high}]"
            )));
        }
        Ok(Self {
            norm_scale: 2.0 / (high - low),
            norm_shift: -0.5 * (high + low),
            log_power_low: low,
            log_power_high: high,
        })
    }

    pub fn apply(&self, mel: &MelConfig) -> MelConfig {
        MelConfig {
            norm_scale: self.norm_scale,
            norm_shift: self.norm_shift,
            ..*mel
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub schema_version: u32,
    pub corpus_seed: u64,
    pub split: Split,
    /// Number of SPEECH-target pairs.
    pub m: usize,
    /// Number of NOISE-target pairs.
    pub o: usize,
    pub sample_rate: u32,
    pub frame: FrameConfig,
    /// Mel configuration with the corpus normalization already applied.
    pub mel: MelConfig,
    pub norm: NormStats,
    pub noise_kinds: Vec<String>,
}

/// One noisy/target pair. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingPair {
    pub id: String,
    pub noisy_path: String,
    pub target_path: String,
    pub target_kind: TargetKind,
    pub instruction: InstructionId,
    pub snr_db: f64,
    /// Mixture seed; clean and noise seeds derive from it.
    pub seed: u64,
    pub noise_kind: String,
    pub clean_path: String,
    pub noise_path: String,
}

impl TrainingPair {
    pub fn check(&self) -> Result<()> {
        if self.instruction != self.target_kind.instruction() {
            return Err(Error::InvalidInput(format!(
                "pair {}: instruction {:?} does not match target kind {}",
                self.id, self.instruction, self.target_kind
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub entries: Vec<TrainingPair>,
    /// Directory the relative paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn pairs_of(&self, kind: TargetKind) -> impl Iterator<Item = &TrainingPair> {
        self.entries.iter().filter(move |p| p.target_kind == kind)
    }

    pub fn count(&self, kind: TargetKind) -> usize {
        self.pairs_of(kind).count()
    }

    /// Line-delimited JSON: the header, then one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str, root: PathBuf, origin: &Path) -> Result<Self> {
        let parse_err = |line: usize, e: serde_json::Error| Error::Parse {
            path: origin.to_path_buf(),
            detail: format!("line {}: {e}", line + 1),
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (i, first) = lines.next().ok_or_else(|| Error::Parse {
            path: origin.to_path_buf(),
            detail: "empty manifest".into(),
        })?;
        let header: ManifestHeader = serde_json::from_str(first).map_err(|e| parse_err(i, e))?;
        if header.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                detail: format!("unsupported schema version {}", header.schema_version),
            });
        }
        let entries = lines
            .map(|(i, l)| serde_json::from_str::<TrainingPair>(l).map_err(|e| parse_err(i, e)))
            .collect::<Result<Vec<_>>>()?;
        let m = Self {
            header,
            entries,
            root,
        };
        m.validate()?;
        Ok(m)
    }

    /// Reads a manifest and checks counts, labels, and that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::parse(&text, root, path)?;
        for e in &m.entries {
            for rel in [&e.noisy_path, &e.target_path, &e.clean_path, &e.noise_path] {
                let p = m.resolve(rel);
                if !p.is_file() {
                    return Err(Error::io(
                        p,
                        std::io::Error::new(std::io::ErrorKind::NotFound, format!("referenced by {}", e.id)),
                    ));
                }
            }
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            e.check()?;
        }
        let (m, o) = (self.count(TargetKind::Speech), self.count(TargetKind::Noise));
        if m != self.header.m || o != self.header.o {
            return Err(Error::InvalidInput(format!(
                "manifest header says M={}, O={} but records give M={m}, O={o}",
                self.header.m, self.header.o
            )));
        }
        Ok(())
    }
}
