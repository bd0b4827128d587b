use crate::audio::Waveform;
use crate::error::{Error, Result};

/// Gain applied to the noise so that the mixture has the requested SNR:
/// `(rms(x)/rms(n))·10^(-snr/20)`.
pub fn noise_gain(clean_rms: f64, noise_rms: f64, snr_db: f64) -> f64 {
    clean_rms / noise_rms * 10f64.powf(-snr_db / 20.0)
}

/// A mixture together with the noise exactly as it appears inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedPair {
    pub noisy: Waveform,
    pub scaled_noise: Waveform,
    pub gain: f64,
}

fn check(clean: &Waveform, noise: &Waveform) -> Result<()> {
    if clean.len() != noise.len() || clean.sample_rate() != noise.sample_rate() {
        return Err(Error::InvalidInput(format!(
            "clean ({} samples @ {} Hz) and noise ({} samples @ {} Hz) differ",
            clean.len(),
            clean.sample_rate(),
            noise.len(),
            noise.sample_rate()
        )));
    }
    if !(clean.rms() > 0.0) {
        return Err(Error::InvalidInput("clean signal is silent".into()));
    }
    if !(noise.rms() > 0.0) {
        return Err(Error::InvalidInput("noise signal is silent".into()));
    }
    Ok(())
}

/// Returns `x + g·n` with `g` from [`noise_gain`]. No clipping or renormalization.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    Ok(MixedPair::new(clean, noise, snr_db)?.noisy)
}

impl MixedPair {
    pub fn new(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Self> {
        check(clean, noise)?;
        let gain = noise_gain(clean.rms(), noise.rms(), snr_db);
        let scaled_noise = noise.scaled(gain);
        let noisy: Vec<f64> = clean
            .samples()
            .iter()
            .zip(scaled_noise.samples())
            .map(|(x, n)| x + n)
            .collect();
        Ok(Self {
            noisy: Waveform::new(noisy, clean.sample_rate())?,
            scaled_noise,
            gain,
        })
    }
}
