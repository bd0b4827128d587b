use std::path::{Path, PathBuf};

use rubato::audioadapter_buffers::direct::InterleavedSlice;
use rubato::{Fft, FixedSync, Resampler};

use crate::audio::wav::read_wav;
use crate::audio::Waveform;
use crate::error::{Error, Result};

/// Band-limited resampling to `target_rate` (FFT-based synchronous resampler).
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if w.sample_rate() == target_rate || w.is_empty() {
        return Waveform::new(w.samples().to_vec(), target_rate);
    }
    let mut r = Fft::<f64>::new(
        w.sample_rate() as usize,
        target_rate as usize,
        1024,
        1,
        FixedSync::Input,
    )
    .map_err(|e| Error::Config(format!("resampler: {e}")))?;
    let input = InterleavedSlice::new(w.samples(), 1, w.len())
        .map_err(|e| Error::InvalidInput(format!("resampler input: {e}")))?;
    let out = r
        .process_all(&input, w.len(), None)
        .map_err(|e| Error::numeric("resampler", e.to_string()))?;
    Waveform::new(out.take_data(), target_rate)
}

/// Loads every `.wav` file directly inside `dir` (sorted by name), downmixed to mono and
/// resampled to `sample_rate`.
pub fn load_wav_directory(dir: &Path, sample_rate: u32) -> Result<Vec<(PathBuf, Waveform)>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|x| x.eq_ignore_ascii_case("wav"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no .wav files in {}",
            dir.display()
        )));
    }
    paths
        .into_iter()
        .map(|p| {
            let w = read_wav(&p)?;
            let w = resample(&w, sample_rate)?;
            Ok((p, w))
        })
        .collect()
}
