//! Seeded sampling helpers shared by data generation and model init.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Standard normal draw via Box-Muller. Consumes two uniforms per call so
/// the stream layout stays simple and reproducible.
pub(crate) fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
