use std::time::Instant;
use supercc::sim::{calibrate_baseline, run_replicate, Method, SimConfig};

fn main() {
    let config = SimConfig::default();
    let t0 = Instant::now();
    let beta0 = calibrate_baseline(&config);
    eprintln!("calibrate_baseline: {:.2}s (beta0 = {beta0:.4})", t0.elapsed().as_secs_f64());
    for method in [
        Method::Full,
        Method::CaseCohort,
        Method::Mice,
        Method::MiceRss,
        Method::MiceIss,
        Method::Smc,
        Method::SmcRss,
        Method::SmcIss,
    ] {
        let t = Instant::now();
        let r = run_replicate(&config, beta0, method, 0);
        eprintln!(
            "{:<9} {:.2}s  err={:?} flagged={} z1={:.3}",
            method.label(),
            t.elapsed().as_secs_f64(),
            r.error,
            r.flagged,
            r.estimate.first().copied().unwrap_or(f64::NAN)
        );
    }
}
