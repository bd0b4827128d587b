//! Central finite-difference checks of [`Graph::backward`].

use rand::seq::index::sample;
use rand::Rng;

use super::{Graph, Tensor, Var};

/// Result of comparing analytic and numeric gradients on sampled coordinates.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `(tensor index, flat index, analytic, numeric)` for every sampled coordinate.
    pub samples: Vec<(usize, usize, f64, f64)>,
}

impl GradCheck {
    /// Largest `|a − n| / max(|a|, |n|, floor)` over the samples.
    pub fn max_rel_error(&self, floor: f64) -> f64 {
        self.samples
            .iter()
            .map(|&(_, _, a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}

/// Evaluates `f` on leaves built from `params`, then compares its gradient with
/// central differences of step `h` at `count` coordinates drawn uniformly from
/// the concatenation of all parameters (all coordinates if `count` covers them).
pub fn finite_difference_check<R, F>(params: &[Tensor], f: F, count: usize, h: f64, rng: &mut R) -> GradCheck
where
    R: Rng + ?Sized,
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |ps: &[Tensor]| {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = ps.iter().map(|p| g.input(p.clone())).collect();
        let l = f(&mut g, &vars);
        g.value(l).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss);

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let o = *acc;
            *acc += p.len();
            Some(o)
        })
        .collect();
    let total: usize = params.iter().map(Tensor::len).sum();
    let picks: Vec<usize> = if count >= total {
        (0..total).collect()
    } else {
        let mut v = sample(rng, total, count).into_vec();
        v.sort_unstable();
        v
    };
    let mut work = params.to_vec();
    let mut samples = Vec::with_capacity(picks.len());
    for flat in picks {
        let t = offsets.partition_point(|&o| o <= flat) - 1;
        let j = flat - offsets[t];
        let analytic = grads.get(vars[t]).map_or(0.0, |g| g[j]);
        let orig = work[t].data()[j];
        work[t].data_mut()[j] = orig + h;
        let plus = eval(&work);
        work[t].data_mut()[j] = orig - h;
        let minus = eval(&work);
        work[t].data_mut()[j] = orig;
        samples.push((t, j, analytic, (plus - minus) / (2.0 * h)));
    }
    GradCheck { samples }
}

/// Checks every coordinate of small inputs to tight tolerance.
#[cfg(test)]
pub(crate) fn check_gradients<F>(params: &[Tensor], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let r = finite_difference_check(params, f, usize::MAX, 1e-5, &mut rng);
    for &(t, j, a, n) in &r.samples {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
        assert!(err < 1e-5, "tensor {t} index {j}: analytic {a} numeric {n}");
    }
}
