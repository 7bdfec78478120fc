//! Central finite-difference verification of backward gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Mode, Var};
use super::params::ParamStore;
use super::AutodiffError;

/// Which coordinates to probe.
#[derive(Clone, Debug)]
pub enum Probe {
    All,
    /// Up to `per_tensor` distinct coordinates from every parameter tensor,
    /// chosen with a seeded RNG.
    Sample { per_tensor: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct WorstCoordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    pub worst: Option<WorstCoordinate>,
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the backward gradient of the scalar built by `f` against
/// `(f(θ + eps·e) − f(θ − eps·e)) / (2·eps)` at every probed coordinate.
///
/// `f` is rebuilt from scratch for each probe on a graph with the given
/// `mode`; training mode replays identical dropout masks on every rebuild.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    eps: f64,
    mode: Mode,
    probe: &Probe,
    f: F,
) -> Result<GradCheckReport, AutodiffError>
where
    F: for<'g, 'p> Fn(&'g mut Graph<'p, f64>) -> Result<Var, AutodiffError>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(AutodiffError::Config(format!("eps must be positive, got {eps}")));
    }
    let eval = |s: &ParamStore<f64>| -> Result<f64, AutodiffError> {
        let mut g = Graph::with_params(s, mode);
        let out = f(&mut g)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(AutodiffError::Numeric { op: "grad_check probe" });
        }
        Ok(v)
    };

    let analytic = {
        let mut g = Graph::with_params(store, mode);
        let out = f(&mut g)?;
        g.backward(out)?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(match probe {
        Probe::Sample { seed, .. } => *seed,
        Probe::All => 0,
    });
    let mut report = GradCheckReport { max_rel_error: 0.0, probes: 0, worst: None };
    let mut perturbed = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in &names {
        let n = store.get(name).map_or(0, |t| t.numel());
        let coords: Vec<usize> = match probe {
            Probe::All => (0..n).collect(),
            Probe::Sample { per_tensor, .. } => {
                let mut c = sample(&mut rng, n, (*per_tensor).min(n)).into_vec();
                c.sort_unstable();
                c
            }
        };
        let grad = analytic.param(name);
        for idx in coords {
            let a = grad.as_ref().map_or(0.0, |g| g.data()[idx]);
            let base = store.get(name).unwrap().data()[idx];
            perturbed.get_mut(name).unwrap().data_mut()[idx] = base + eps;
            let plus = eval(&perturbed)?;
            perturbed.get_mut(name).unwrap().data_mut()[idx] = base - eps;
            let minus = eval(&perturbed)?;
            perturbed.get_mut(name).unwrap().data_mut()[idx] = base;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(a, numeric);
            report.probes += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some(WorstCoordinate {
                        param: name.clone(),
                        index: idx,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
    }
    Ok(report)
}
