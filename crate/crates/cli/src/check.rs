use dynamo_core::dataset::TauWeights;
use dynamo_core::density::{fit_kde, BandwidthRule};
use dynamo_core::duality::{g_lower, g_lower_grad, solve_lambda, Divergence, PenaltyConfig, SolverConfig};
use dynamo_core::optimizers::sobol_init;
use dynamo_core::runner::{self, RunConfig};

type Check = (&'static str, fn() -> Result<String, String>);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Deterministic spread of values in [lo, hi] from a Sobol column.
fn spread(n: usize, lo: f64, hi: f64, seed: u64) -> Result<Vec<f64>, String> {
    let m = sobol_init(1, n, &[lo], &[hi], seed).map_err(err)?;
    Ok(m.iter_rows().map(|r| r[0]).collect())
}

fn tau_weights() -> Result<String, String> {
    let scores = spread(50, 0.0, 1.0, 1)?;
    for tau in [0.0, 0.1, 1.0, 100.0] {
        let tw = TauWeights::from_scores(&scores, tau).map_err(err)?;
        let total: f64 = tw.weights().iter().sum();
        ensure((total - 1.0).abs() < 1e-12, format!("weights sum to {total} at tau {tau}"))?;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if scores[i] > scores[j] {
                    ensure(
                        tw.weights()[i] >= tw.weights()[j] - 1e-15,
                        format!("weights not monotone at tau {tau}"),
                    )?;
                }
            }
        }
    }
    Ok("normalized and monotone for 4 temperatures".into())
}

fn dual_solver() -> Result<String, String> {
    let scores = spread(40, 0.0, 1.0, 2)?;
    let critic = spread(40, -1.0, 1.0, 3)?;
    let tw = TauWeights::from_scores(&scores, 1.0).map_err(err)?;
    let solver = SolverConfig::default();
    let mut cases = 0;
    for divergence in [Divergence::Kl, Divergence::MixedChi2] {
        for w0 in [-0.5, 0.0, 0.3] {
            let cfg = PenaltyConfig { w0, divergence, ..PenaltyConfig::default() };
            let sol = solve_lambda(&critic, &tw, &cfg, &solver).map_err(err)?;
            let g = |l: f64| g_lower(l, &critic, &tw, &cfg).map_err(err);
            let mut grid_best = f64::NEG_INFINITY;
            for i in 0..=2000 {
                grid_best = grid_best.max(g(i as f64 * 0.005)?);
            }
            ensure(
                sol.g_value >= grid_best - 1e-6 * (1.0 + grid_best.abs()),
                format!("solver value {} below grid {grid_best}", sol.g_value),
            )?;
            for l in [0.1, 1.0, 3.0] {
                let mid = g(l)?;
                ensure(mid >= 0.5 * (g(l - 0.05)? + g(l + 0.05)?) - 1e-12, "dual is not concave")?;
                let fd = (g(l + 1e-6)? - g(l - 1e-6)?) / 2e-6;
                let an = g_lower_grad(l, &critic, &tw, &cfg).map_err(err)?;
                ensure((fd - an).abs() <= 1e-5 * (1.0 + an.abs()), format!("dual gradient {an} vs {fd}"))?;
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} instances match a grid search"))
}

fn kde_gradient() -> Result<String, String> {
    let pts = sobol_init(2, 64, &[-2.0, -2.0], &[2.0, 2.0], 4).map_err(err)?;
    let kde = fit_kde(&pts, &vec![1.0 / 64.0; 64], BandwidthRule::Silverman).map_err(err)?;
    let probes = sobol_init(2, 16, &[-3.0, -3.0], &[3.0, 3.0], 5).map_err(err)?;
    let h = 1e-6;
    for x in probes.iter_rows() {
        let (_, grad) = kde.log_density_and_grad(x).map_err(err)?;
        for j in 0..2 {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[j] += h;
            b[j] -= h;
            let fd = (kde.log_density(&a).map_err(err)? - kde.log_density(&b).map_err(err)?) / (2.0 * h);
            ensure((fd - grad[j]).abs() <= 1e-5 * (1.0 + fd.abs()), format!("kde gradient {} vs {fd}", grad[j]))?;
        }
    }
    Ok("analytic gradient matches finite differences at 16 points".into())
}

fn sobol_bounds() -> Result<String, String> {
    let lo = [-5.0, 0.0, 10.0];
    let hi = [10.0, 15.0, 11.0];
    let a = sobol_init(3, 128, &lo, &hi, 9).map_err(err)?;
    let b = sobol_init(3, 128, &lo, &hi, 9).map_err(err)?;
    ensure(a == b, "same seed gave different points")?;
    for r in a.iter_rows() {
        for j in 0..3 {
            ensure(r[j] >= lo[j] && r[j] <= hi[j], "point outside the box")?;
        }
    }
    Ok("128 points reproducible and inside the box".into())
}

fn small_run() -> Result<String, String> {
    let cfg = RunConfig {
        max_iterations: 4,
        batch_size: 16,
        k: 8,
        data: runner::DataConfig { n: 200, ..Default::default() },
        ..RunConfig::default()
    };
    let r = runner::run(&cfg).map_err(err)?;
    ensure(r.oracle_calls == cfg.k as u64, format!("{} oracle calls for k = {}", r.oracle_calls, cfg.k))?;
    ensure(r.candidates.len() == cfg.k, "wrong number of candidates")?;
    ensure(r.metrics.best_at_k.is_finite() && r.metrics.pairwise_diversity >= 0.0, "non-finite metrics")?;
    let again = runner::run(&cfg).map_err(err)?;
    ensure(again.candidates.designs == r.candidates.designs, "run is not reproducible")?;
    Ok(format!("best {:.4}, pd {:.4}, reproducible", r.metrics.best_at_k, r.metrics.pairwise_diversity))
}

const CHECKS: [Check; 5] = [
    ("tau weights", tau_weights),
    ("dual solver", dual_solver),
    ("kde gradient", kde_gradient),
    ("sobol bounds", sobol_bounds),
    ("small run", small_run),
];

pub fn run() -> anyhow::Result<()> {
    let mut failed = 0;
    for (name, f) in CHECKS {
        match f() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(e) => {
                failed += 1;
                println!("FAIL {name}: {e}");
            }
        }
    }
    if failed > 0 {
        anyhow::bail!("{failed} of {} checks failed", CHECKS.len());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    #[test]
    fn fast_checks_pass() {
        for (name, f) in super::CHECKS.iter().take(4) {
            assert!(f().is_ok(), "{name}: {:?}", f());
        }
    }
}
