//! The chi-square tail quantile against Monte Carlo: the fraction of
//! standard-normal draws with `‖z‖² ≥ Q` must match `p`.

use nfad_core::ndmath::{chi2_tail_quantile, RngState};

#[test]
fn empirical_tail_mass_matches_p() {
    let n = 1_000_000usize;
    for d in [1usize, 2, 8] {
        for p in [0.5, 0.1, 0.01] {
            let q = chi2_tail_quantile(p, d).unwrap();
            let mut rng = RngState::new(1000 * d as u64 + (p * 1000.0) as u64);
            let hits = (0..n)
                .filter(|_| (0..d).map(|_| rng.std_normal().powi(2)).sum::<f64>() >= q)
                .count();
            let phat = hits as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((phat - p).abs() < 4.0 * se, "d {d} p {p}: empirical {phat}, 4se {}", 4.0 * se);
        }
    }
}
