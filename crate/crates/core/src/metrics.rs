//! Objective quality measures.

use crate::audio::{MelSpectrogram, Waveform};
use crate::error::{Error, Result};

/// Upper bound reported by [`si_sdr`]; also used symmetrically as the lower bound.
pub const SI_SDR_CAP_DB: f64 = 60.0;

/// Scale-invariant signal-to-distortion ratio of `est` against `reference`, in dB.
///
/// The estimate is projected onto the reference; the residual energy carries a
/// guard of 1e-12 relative to the projected energy, and results are clamped to
/// ±60 dB.
pub fn si_sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    si_sdr_slices(est.samples(), reference.samples())
}

pub fn si_sdr_slices(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: estimate {} vs reference {}",
            est.len(),
            reference.len()
        )));
    }
    let ref_energy: f64 = reference.iter().map(|r| r * r).sum();
    if !(ref_energy > 0.0) {
        return Err(Error::InvalidInput("reference has zero energy".into()));
    }
    let dot: f64 = est.iter().zip(reference).map(|(e, r)| e * r).sum();
    let alpha = dot / ref_energy;
    let target_energy = alpha * alpha * ref_energy;
    let residual: f64 = est
        .iter()
        .zip(reference)
        .map(|(e, r)| {
            let d = e - alpha * r;
            d * d
        })
        .sum();
    if target_energy == 0.0 {
        return Ok(-SI_SDR_CAP_DB);
    }
    let db = 10.0 * (target_energy / (residual + 1e-12 * target_energy)).log10();
    Ok(db.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

/// Log-spectral distance between two mel-spectrograms, in dB: the mean over frames of
/// the RMS over bands of the de-normalized log-power difference.
pub fn lsd(est: &MelSpectrogram, reference: &MelSpectrogram) -> Result<f64> {
    if est.values.dim() != reference.values.dim() {
        return Err(Error::InvalidInput(format!(
            "shape mismatch: {:?} vs {:?}",
            est.values.dim(),
            reference.values.dim()
        )));
    }
    let a = est.db();
    let b = reference.db();
    let frames = a.nrows();
    let total: f64 = a
        .rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| {
            let ms = x
                .iter()
                .zip(y.iter())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                / x.len() as f64;
            ms.sqrt()
        })
        .sum();
    Ok(total / frames as f64)
}

/// Pearson correlation of two equally sized value sequences. Returns 0 when either
/// side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidInput(format!(
            "pearson needs equal non-empty inputs, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok(sab / (saa * sbb).sqrt())
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{FrameConfig, MelConfig};
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn w(x: Vec<f64>) -> Waveform {
        Waveform::new(x, 16000).unwrap()
    }

    fn sine(n: usize) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * 0.031).sin()).collect()
    }

    #[test]
    fn collinear_estimate_hits_cap() {
        let r = sine(1000);
        let e: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_sdr(&w(e), &w(r)).unwrap(), SI_SDR_CAP_DB);
    }

    #[test]
    fn orthogonal_equal_power_is_zero_db() {
        let n = 1000;
        let r: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let noise: Vec<f64> = (0..n).map(|i| if i % 2 == 1 { 1.0 } else { 0.0 }).collect();
        let e: Vec<f64> = r.iter().zip(&noise).map(|(a, b)| a + b).collect();
        assert!(si_sdr(&w(e), &w(r)).unwrap().abs() < 1e-9);
    }

    #[test]
    fn zero_reference_is_rejected() {
        let err = si_sdr(&w(vec![1.0; 10]), &w(vec![0.0; 10])).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn white_noise_at_10db() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = sine(16000);
        let rms_r = crate::audio::rms(&r);
        let mut n: Vec<f64> = (0..16000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let g = rms_r / crate::audio::rms(&n) * 10f64.powf(-10.0 / 20.0);
        n.iter_mut().for_each(|v| *v *= g);
        let e: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + b).collect();
        let d = si_sdr(&w(e), &w(r)).unwrap();
        assert!((d - 10.0).abs() < 0.5, "{d}");
    }

    fn mel(values: Array2<f64>, scale: f64, shift: f64) -> MelSpectrogram {
        let cfg = MelConfig {
            n_mels: values.ncols(),
            norm_scale: scale,
            norm_shift: shift,
            ..Default::default()
        };
        MelSpectrogram::new(values, FrameConfig::default(), cfg, 16000).unwrap()
    }

    #[test]
    fn lsd_identity_offset_symmetry() {
        let v = Array2::from_shape_fn((5, 8), |(i, j)| ((i * 8 + j) as f64 * 0.37).sin());
        let a = mel(v.clone(), 0.5, 1.0);
        assert_eq!(lsd(&a, &a).unwrap(), 0.0);
        // scaling power by 10 shifts natural-log power by ln 10
        let b = mel(v.mapv(|x| x + 0.5 * 10f64.ln()), 0.5, 1.0);
        assert!((lsd(&b, &a).unwrap() - 10.0).abs() < 1e-9);
        let c = mel(v.mapv(|x| x * 1.3 - 0.2), 0.5, 1.0);
        assert_eq!(lsd(&a, &c).unwrap(), lsd(&c, &a).unwrap());
    }

    #[test]
    fn lsd_shape_mismatch() {
        let a = mel(Array2::zeros((4, 8)), 1.0, 0.0);
        let b = mel(Array2::zeros((5, 8)), 1.0, 0.0);
        assert!(matches!(lsd(&a, &b), Err(Error::InvalidInput(_))));
    }

    proptest! {
        #[test]
        fn si_sdr_scale_invariant(c in 0.01f64..100.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = sine(512);
            let e: Vec<f64> = r.iter().map(|v| { let z: f64 = StandardNormal.sample(&mut rng); v + 0.3 * z }).collect();
            let ce: Vec<f64> = e.iter().map(|v| v * c).collect();
            let a = si_sdr_slices(&e, &r).unwrap();
            let b = si_sdr_slices(&ce, &r).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn si_sdr_decreases_with_orthogonal_noise(a1 in 0.05f64..2.0, da in 0.01f64..2.0) {
            let n = 256;
            let r: Vec<f64> = (0..n).map(|i| if i < n / 2 { 1.0 } else { 0.0 }).collect();
            let noise: Vec<f64> = (0..n).map(|i| if i >= n / 2 { ((i as f64) * 0.7).sin() } else { 0.0 }).collect();
            let mk = |alpha: f64| r.iter().zip(&noise).map(|(x, y)| x + alpha * y).collect::<Vec<f64>>();
            let s1 = si_sdr_slices(&mk(a1), &r).unwrap();
            let s2 = si_sdr_slices(&mk(a1 + da), &r).unwrap();
            prop_assert!(s2 < s1);
        }
    }
}
