#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A configuration small enough for the whole CLI pipeline to run in seconds.
pub const TINY_CONFIG: &str = r#"
[corpus]
speech_pairs = 4
noise_pairs = 4
dev_fraction = 0.25
test_seen_items = 1
test_unseen_items = 1
clip_seconds = 0.64

[vae]
block_channels = [8, 8, 8, 8]

[vae_train]
steps = 4
batch_size = 2
crop_frames = 16
eval_every = 2

[denoiser]
block_channels = [8, 16, 16, 16]
attention_heads = 2
cross_attention_dim = 16
embed_dim = 16
timestep_embed_dim = 32

[train]
steps = 6
batch_size = 2
segment_seconds = 0.64
eval_every = 3
checkpoint_every = 3

[enhance]
steps = 5
"#;

pub fn lse_raw(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lse"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("lse binary runs")
}

pub fn lse(args: &[&str], cwd: &Path) -> Result<Output, String> {
    let out = lse_raw(args, cwd);
    if out.status.success() {
        Ok(out)
    } else {
        Err(format!("lse {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

/// Writes the tiny config into `dir`, then runs make-data, train-vae and train-cldm.
/// Returns the config path.
pub fn tiny_models(dir: &Path) -> Result<PathBuf, String> {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let c = cfg.to_str().unwrap();
    lse(&["--config", c, "make-data", "--out", "data"], dir)?;
    lse(&["--config", c, "train-vae", "--data", "data", "--out", "vae"], dir)?;
    lse(&["--config", c, "train-cldm", "--data", "data", "--vae", "vae/vae.ckpt", "--out", "cldm"], dir)?;
    Ok(cfg)
}

/// Relative paths of every file under `dir`, sorted.
pub fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}
