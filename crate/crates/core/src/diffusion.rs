//! Noise schedules, forward marginals, the reverse ancestral step and respacing.
//!
//! Timesteps are 1-based: `t` ranges over `1..=T` and `alpha_bar(0) == 1`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.kind, self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    /// Original timestep of each respaced index, when respaced.
    timestep_map: Option<Vec<usize>>,
}

/// Linear β from `beta_start` to `beta_end` over `steps` steps.
pub fn make_schedule(
    kind: ScheduleKind,
    steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start ({beta_start}) <= beta_end ({beta_end}) < 1"
        )));
    }
    let beta = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    DiffusionSchedule::from_betas(beta)
}

impl DiffusionSchedule {
    /// Schedule from explicit β values, each in (0, 1).
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let mut acc = 1.0;
        let alpha_bar = beta
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self {
            beta,
            alpha_bar,
            timestep_map: None,
        })
    }

    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn timestep_map(&self) -> Option<&[usize]> {
        self.timestep_map.as_deref()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::Domain(format!("timestep {t} outside 1..={}", self.len())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.beta[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta(t)?)
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    /// Timestep of the original schedule that index `t` stands for.
    pub fn original_t(&self, t: usize) -> Result<usize> {
        self.check(t)?;
        Ok(self.timestep_map.as_ref().map_or(t, |m| m[t - 1]))
    }
}

fn check_shapes(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "{what}: length {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
pub fn forward_sample(z0: &[f64], t: usize, eps: &[f64], s: &DiffusionSchedule) -> Result<Vec<f64>> {
    check_shapes(z0, eps, "forward_sample")?;
    let ab = s.alpha_bar(t)?;
    s.check(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
}

/// One forward transition `z_t = √α_t·z_{t−1} + √β_t·ε`.
pub fn forward_transition(z_prev: &[f64], t: usize, eps: &[f64], s: &DiffusionSchedule) -> Result<Vec<f64>> {
    check_shapes(z_prev, eps, "forward_transition")?;
    let beta = s.beta(t)?;
    let (a, b) = ((1.0 - beta).sqrt(), beta.sqrt());
    Ok(z_prev.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
}

/// Mean and variance of `p(z_{t−1} | z_t)` given the predicted noise.
pub fn posterior_params(
    z_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    s: &DiffusionSchedule,
) -> Result<(Vec<f64>, f64)> {
    check_shapes(z_t, eps_hat, "posterior_params")?;
    let beta = s.beta(t)?;
    let ab = s.alpha_bar(t)?;
    let ab_prev = s.alpha_bar(t - 1)?;
    let coef = beta / (1.0 - ab).sqrt();
    let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
    let mu = z_t
        .iter()
        .zip(eps_hat)
        .map(|(z, e)| inv_sqrt_alpha * (z - coef * e))
        .collect();
    let sigma2 = (1.0 - ab_prev) / (1.0 - ab) * beta;
    Ok((mu, sigma2))
}

/// Ancestral step `z_{t−1} = µ + σ·ξ`. At `t = 1` no noise is drawn.
pub fn reverse_step<R: Rng + ?Sized>(
    z_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    s: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let (mut mu, sigma2) = posterior_params(z_t, eps_hat, t, s)?;
    if t > 1 {
        let sigma = sigma2.sqrt();
        for m in mu.iter_mut() {
            let xi: f64 = StandardNormal.sample(rng);
            *m += sigma * xi;
        }
    }
    Ok(mu)
}

/// Respaced timesteps `τ_k = round(k·T/K)` for `k = 1..=K` (ties round up).
pub fn respaced_steps(t_total: usize, k: usize) -> Vec<usize> {
    (1..=k).map(|i| (2 * i * t_total + k) / (2 * k)).collect()
}

/// Schedule over `K` of the original steps, always ending at `T`.
///
/// `β̃_k = 1 − ᾱ_{τ_k}/ᾱ_{τ_{k−1}}`; the original β is kept where `τ_k` directly
/// follows `τ_{k−1}`, and `ᾱ` values are copied, not recomputed.
pub fn respace(s: &DiffusionSchedule, k: usize) -> Result<DiffusionSchedule> {
    let t_total = s.len();
    if k == 0 || k > t_total {
        return Err(Error::Domain(format!("respacing to {k} steps needs 1 <= K <= {t_total}")));
    }
    let taus = respaced_steps(t_total, k);
    let mut beta = Vec::with_capacity(k);
    let mut alpha_bar = Vec::with_capacity(k);
    let mut prev = 0;
    for &tau in &taus {
        let b = if tau == prev + 1 {
            s.beta[tau - 1]
        } else {
            1.0 - s.alpha_bar(tau)? / s.alpha_bar(prev)?
        };
        beta.push(b);
        alpha_bar.push(s.alpha_bar[tau - 1]);
        prev = tau;
    }
    let map = match &s.timestep_map {
        Some(m) => taus.iter().map(|t| m[t - 1]).collect(),
        None => taus,
    };
    Ok(DiffusionSchedule {
        beta,
        alpha_bar,
        timestep_map: Some(map),
    })
}

/// Per-step loss weights `γ_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma: Vec<f64>,
}

impl LossWeights {
    pub fn uniform(steps: usize) -> Self {
        Self {
            gamma: vec![1.0; steps],
        }
    }

    pub fn new(gamma: Vec<f64>) -> Result<Self> {
        if gamma.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(Self { gamma })
    }

    pub fn get(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.gamma.len() {
            return Err(Error::Domain(format!("timestep {t} outside 1..={}", self.gamma.len())));
        }
        Ok(self.gamma[t - 1])
    }
}

/// How the per-item noise-prediction error is reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `γ_t · mean((ε − ε̂)²)`.
    #[default]
    Squared,
    /// `γ_t · sqrt(mean((ε − ε̂)²))`.
    Unsquared,
}

/// `γ_t · mean((ε − ε̂)²)`.
pub fn diffusion_loss(eps: &[f64], eps_hat: &[f64], t: usize, w: &LossWeights) -> Result<f64> {
    check_shapes(eps, eps_hat, "diffusion_loss")?;
    if eps.is_empty() {
        return Err(Error::InvalidInput("diffusion_loss on empty tensors".into()));
    }
    if eps.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("diffusion_loss", "non-finite target noise"));
    }
    if eps_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("diffusion_loss", "non-finite predicted noise"));
    }
    let ms = eps.iter().zip(eps_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / eps.len() as f64;
    Ok(w.get(t)? * ms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hand() -> DiffusionSchedule {
        make_schedule(ScheduleKind::Linear, 2, 0.1, 0.2).unwrap()
    }

    fn default_schedule() -> DiffusionSchedule {
        ScheduleConfig::default().build().unwrap()
    }

    #[test]
    fn hand_schedule_products() {
        let s = hand();
        assert!((s.alpha_bar(1).unwrap() - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2).unwrap() - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }

    #[test]
    fn default_schedule_reaches_prior() {
        let s = default_schedule();
        assert!(s.alpha_bar(1000).unwrap() < 1e-4);
        assert!(s.betas().windows(2).all(|w| w[0] < w[1]));
        assert!(s.alpha_bars().windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn invalid_configs() {
        assert!(matches!(make_schedule(ScheduleKind::Linear, 0, 0.1, 0.2), Err(Error::Config(_))));
        assert!(matches!(make_schedule(ScheduleKind::Linear, 5, 0.3, 0.2), Err(Error::Config(_))));
        assert!(matches!(make_schedule(ScheduleKind::Linear, 5, 0.1, 1.0), Err(Error::Config(_))));
        assert!(matches!(hand().beta(3), Err(Error::Domain(_))));
    }

    #[test]
    fn forward_sample_closed_forms() {
        let s = hand();
        let z = forward_sample(&[1.0], 2, &[0.0], &s).unwrap();
        assert!((z[0] - 0.72f64.sqrt()).abs() < 1e-15);
        assert!((z[0] - 0.848_528_137_423_857).abs() < 1e-12);
        let z = forward_sample(&[0.0], 1, &[1.0], &s).unwrap();
        assert!((z[0] - 0.316_227_766_016_838).abs() < 1e-12);
        assert!(matches!(forward_sample(&[0.0], 0, &[1.0], &s), Err(Error::Domain(_))));
        assert!(matches!(forward_sample(&[0.0], 3, &[1.0], &s), Err(Error::Domain(_))));
    }

    #[test]
    fn forward_sample_at_t_max_is_standard_normal() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let z0: Vec<f64> = (0..n).map(|i| ((i % 7) as f64 - 3.0) * 0.5).collect();
        let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z = forward_sample(&z0, 1000, &eps, &s).unwrap();
        let mean = z.iter().sum::<f64>() / n as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((0.95..=1.05).contains(&var), "{var}");
    }

    #[test]
    fn posterior_values() {
        let s = hand();
        let (_, s1) = posterior_params(&[0.3], &[0.1], 1, &s).unwrap();
        assert_eq!(s1, 0.0);
        let (_, s2) = posterior_params(&[0.3], &[0.1], 2, &s).unwrap();
        assert!((s2 - 0.1 / 0.28 * 0.2).abs() < 1e-15);
        assert!((s2 - 0.071_428_571_428_571).abs() < 1e-9);
    }

    #[test]
    fn t1_perfect_denoiser_recovers_z0() {
        let s = default_schedule();
        let z0 = [0.7, -1.3, 2.0];
        let eps = [0.4, 1.1, -0.6];
        let z1 = forward_sample(&z0, 1, &eps, &s).unwrap();
        let (mu, _) = posterior_params(&z1, &eps, 1, &s).unwrap();
        for (m, z) in mu.iter().zip(&z0) {
            assert!((m - z).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(reverse_step(&z1, &eps, 1, &s, &mut rng).unwrap(), mu);
    }

    #[test]
    fn reverse_step_variance_matches() {
        let s = hand();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 10_000;
        let z = vec![0.5; n];
        let e = vec![0.2; n];
        let (mu, s2) = posterior_params(&z, &e, 2, &s).unwrap();
        let out = reverse_step(&z, &e, 2, &s, &mut rng).unwrap();
        let d: Vec<f64> = out.iter().zip(&mu).map(|(a, b)| a - b).collect();
        let m = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var / s2 - 1.0).abs() < 0.05, "{var} vs {s2}");
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            reverse_step(&z, &e, 2, &s, &mut r1).unwrap(),
            reverse_step(&z, &e, 2, &s, &mut r2).unwrap()
        );
    }

    #[test]
    fn marginal_consistency() {
        let s = make_schedule(ScheduleKind::Linear, 50, 1e-3, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 10_000;
        let z0 = 1.5;
        let mut z = vec![z0; n];
        for t in 1..=50 {
            let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            z = forward_transition(&z, t, &eps, &s).unwrap();
            if [1, 5, 25, 50].contains(&t) {
                let ab = s.alpha_bar(t).unwrap();
                let (em, ev) = (ab.sqrt() * z0, 1.0 - ab);
                let m = z.iter().sum::<f64>() / n as f64;
                let v = z.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                let se_m = (ev / n as f64).sqrt();
                let se_v = ev * (2.0 / (n - 1) as f64).sqrt();
                assert!((m - em).abs() < 3.0 * se_m, "t={t} mean {m} vs {em}");
                assert!((v - ev).abs() < 3.0 * se_v, "t={t} var {v} vs {ev}");
            }
        }
    }

    #[test]
    fn respace_identity_and_single_step() {
        let s = default_schedule();
        let id = respace(&s, 1000).unwrap();
        for (a, b) in id.betas().iter().zip(s.betas()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(id.alpha_bars(), s.alpha_bars());
        let one = respace(&s, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.original_t(1).unwrap(), 1000);
        assert!((one.beta(1).unwrap() - (1.0 - s.alpha_bar(1000).unwrap())).abs() < 1e-15);
        assert!(matches!(respace(&s, 1001), Err(Error::Domain(_))));
        assert!(matches!(respace(&s, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn respace_fifty() {
        let s = default_schedule();
        let r = respace(&s, 50).unwrap();
        assert_eq!(r.len(), 50);
        assert_eq!(r.original_t(50).unwrap(), 1000);
        assert!(r.betas().iter().all(|b| *b > 0.0 && *b < 1.0));
        for k in 1..=50 {
            let t = r.original_t(k).unwrap();
            assert!((r.alpha_bar(k).unwrap() - s.alpha_bar(t).unwrap()).abs() < 1e-12);
        }
        let map = r.timestep_map().unwrap();
        assert!(map.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn respace_composition_is_exact() {
        let s = default_schedule();
        for k in [1, 7, 10, 50, 333, 1000] {
            let a = respace(&respace(&s, 1000).unwrap(), k).unwrap();
            let b = respace(&s, k).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn loss_examples() {
        let w = LossWeights::uniform(10);
        assert_eq!(diffusion_loss(&[1.0, -2.0], &[1.0, -2.0], 3, &w).unwrap(), 0.0);
        assert_eq!(diffusion_loss(&[1.0, 0.0], &[0.0, 0.0], 3, &w).unwrap(), 0.5);
        let w3 = LossWeights::new(vec![3.0; 10]).unwrap();
        assert_eq!(diffusion_loss(&[1.0, 0.0], &[0.0, 0.0], 3, &w3).unwrap(), 1.5);
        assert!(matches!(
            diffusion_loss(&[f64::NAN], &[0.0], 1, &w),
            Err(Error::Numeric { .. })
        ));
        assert!(LossWeights::new(vec![-1.0]).is_err());
    }

    proptest! {
        #[test]
        fn coefficients_are_unit_norm(t in 1usize..=1000) {
            let s = default_schedule();
            let ab = s.alpha_bar(t).unwrap();
            prop_assert!((ab.sqrt().powi(2) + (1.0 - ab).sqrt().powi(2) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn perfect_denoiser_matches_true_posterior(
            z0 in -3.0f64..3.0, eps in -3.0f64..3.0, t in 2usize..=1000,
        ) {
            let s = default_schedule();
            let zt = forward_sample(&[z0], t, &[eps], &s).unwrap();
            let (mu, _) = posterior_params(&zt, &[eps], t, &s).unwrap();
            let (b, ab, abp) = (s.beta(t).unwrap(), s.alpha_bar(t).unwrap(), s.alpha_bar(t - 1).unwrap());
            let expect = abp.sqrt() * b / (1.0 - ab) * z0 + (1.0 - b).sqrt() * (1.0 - abp) / (1.0 - ab) * zt[0];
            prop_assert!((mu[0] - expect).abs() < 1e-9);
        }

        #[test]
        fn loss_is_linear_in_gamma(c in 0.0f64..50.0, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let base = diffusion_loss(&[a, b], &[b, a], 1, &LossWeights::uniform(1)).unwrap();
            let scaled = diffusion_loss(&[a, b], &[b, a], 1, &LossWeights::new(vec![c]).unwrap()).unwrap();
            prop_assert!((scaled - c * base).abs() <= 1e-12 * scaled.abs().max(1.0));
        }
    }
}
