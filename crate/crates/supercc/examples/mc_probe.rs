use std::time::Instant;
use supercc::sim::{run_study, Method, SimConfig};

fn main() {
    let config = SimConfig { replicates: 200, ..SimConfig::default() };
    let methods = [
        Method::Full,
        Method::CaseCohort,
        Method::Mice,
        Method::MiceRss,
        Method::MiceIss,
        Method::SmcRss,
        Method::SmcIss,
    ];
    let t0 = Instant::now();
    let study = run_study(&config, &methods).unwrap();
    eprintln!("total: {:.1}s", t0.elapsed().as_secs_f64());
    for m in &study.metrics.methods {
        let c0 = &m.coefficients[0];
        eprintln!(
            "{:<9} used={} failed={} flagged={}  z1: bias={:+.3} mc_se={:.3} mean_se={:.3} cover={:.2} releff={:?}",
            m.method, m.replicates_used, m.replicates_failed, m.flagged,
            c0.bias, c0.mc_se, c0.mean_se, c0.coverage,
            c0.rel_eff.map(|r| (r * 100.0).round() / 100.0)
        );
    }
    // Criterion (a): per-coefficient |bias| <= 2*mc_se/sqrt(200) + 0.03.
    for label in ["mice_iss", "smc_iss"] {
        let m = study.metrics.method(label).unwrap();
        for c in &m.coefficients {
            let bound = 2.0 * c.mc_se / (200f64).sqrt() + 0.03;
            let ok = c.bias.abs() <= bound;
            eprintln!(
                "{label} {:<6} |bias|={:.4} bound={:.4} {}  cover={:.3}",
                c.term,
                c.bias.abs(),
                bound,
                if ok { "ok" } else { "FAIL" },
                c.coverage
            );
        }
    }
    // Criterion (b): ISS mc_se <= RSS mc_se on low-cost terms; (d): rel-eff ratio.
    for (iss, rss) in [("mice_iss", "mice_rss"), ("smc_iss", "smc_rss")] {
        let a = study.metrics.method(iss).unwrap();
        let b = study.metrics.method(rss).unwrap();
        for j in 0..4 {
            eprintln!(
                "{} vs {} {}: mc_se {:.4} vs {:.4}  ({})",
                iss,
                rss,
                a.coefficients[j].term,
                a.coefficients[j].mc_se,
                b.coefficients[j].mc_se,
                if a.coefficients[j].mc_se <= b.coefficients[j].mc_se {
                    "ISS <= RSS"
                } else {
                    "ISS > RSS"
                }
            );
        }
        let (ra, rb) = (a.coefficients[0].rel_eff.unwrap(), b.coefficients[0].rel_eff.unwrap());
        eprintln!("{iss} rel-eff(z1) {:.3} vs {rss} {:.3}: ratio {:.2} (need >= 2)", ra, rb, ra / rb);
    }
}
