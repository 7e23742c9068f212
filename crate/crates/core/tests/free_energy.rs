use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rmppi_core::sampling::free_energy_mc;

// S = c v^2 with v ~ N(0, s^2) has F = (λ/2) ln(1 + 2 c s^2 / λ).
#[test]
fn monte_carlo_free_energy_matches_gaussian_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (c, s, lambda) in [(1.0, 1.0, 1.0), (0.5, 2.0, 3.0), (4.0, 0.3, 0.5)] {
        let costs: Vec<f64> = (0..400_000)
            .map(|_| {
                let v: f64 = rng.sample::<f64, _>(StandardNormal) * s;
                c * v * v
            })
            .collect();
        let f = free_energy_mc(&costs, lambda).unwrap().value;
        let exact = 0.5 * lambda * (1.0 + 2.0 * c * s * s / lambda).ln();
        assert!((f - exact).abs() < 0.01 * exact.max(0.1), "c={c} s={s} λ={lambda}: {f} vs {exact}");
    }
}

#[test]
fn free_energy_survives_huge_costs() {
    let costs = [1e300, 1e300 + 1e290, 1e299];
    let f = free_energy_mc(&costs, 1e-3).unwrap().value;
    assert!(f.is_finite());
    assert!((f - 1e299).abs() <= 1e299 * 1e-12 + 1e-3 * 3f64.ln());
}
