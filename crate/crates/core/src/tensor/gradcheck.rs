use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

fn eval_loss<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let loss = f(&mut g)?;
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(Error::shape("grad_check", format!("loss must be scalar, got {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Central-difference check of every coordinate of every parameter in
/// `store`. `f` builds the scalar loss from parameters fetched with
/// [`Graph::param`]; inputs under test should be stored as parameters too.
pub fn grad_check<F>(store: &ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let coords = store
        .iter()
        .map(|(n, t)| (n.to_string(), (0..t.numel()).collect()))
        .collect();
    check_coords(store, eps, &f, coords)
}

/// Like [`grad_check`] but probes at most `per_param` coordinates of each
/// parameter, chosen by a seeded generator.
pub fn grad_check_sampled<F>(store: &ParamStore, eps: f64, per_param: usize, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = store
        .iter()
        .map(|(n, t)| {
            let k = per_param.min(t.numel());
            let mut idx = sample(&mut rng, t.numel(), k).into_vec();
            idx.sort_unstable();
            (n.to_string(), idx)
        })
        .collect();
    check_coords(store, eps, &f, coords)
}

fn check_coords<F>(store: &ParamStore, eps: f64, f: &F, coords: Vec<(String, Vec<usize>)>) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g)?;
        let grads = g.backward(loss)?;
        coords
            .iter()
            .map(|(name, idx)| {
                let grad = grads.param(name);
                idx.iter().map(|&i| grad.map_or(0.0, |t| t.data()[i])).collect::<Vec<f64>>()
            })
            .collect::<Vec<_>>()
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for ((name, idx), analytic) in coords.iter().zip(analytic) {
        for (&i, a) in idx.iter().zip(analytic) {
            let orig = probe.get(name).expect("coordinate of a stored parameter").data()[i];
            let set = |p: &mut ParamStore, v: f64| p.get_mut(name).expect("stored").data_mut()[i] = v;
            set(&mut probe, orig + eps);
            let plus = eval_loss(&probe, f)?;
            set(&mut probe, orig - eps);
            let minus = eval_loss(&probe, f)?;
            set(&mut probe, orig);
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
