use supercc::sim::{run_study, Method, SimConfig};

fn main() {
    let config = SimConfig {
        replicates: 200,
        target_case_fraction: 0.03,
        ..SimConfig::default()
    };
    let methods = [Method::Full, Method::Mice, Method::MiceIss, Method::SmcIss];
    let study = run_study(&config, &methods).unwrap();
    for m in &study.metrics.methods {
        let c0 = &m.coefficients[0];
        let bound = 2.0 * c0.mc_se / (200f64).sqrt() + 0.03;
        eprintln!(
            "{:<9} z1: bias={:+.4} bound={:.4} mc_se={:.3} cover={:.2}",
            m.method, c0.bias, bound, c0.mc_se, c0.coverage
        );
    }
}
