//! Seeded Gaussian noise with one independent stream per purpose.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dynamics::ControlInput;

/// Stream indices derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Thrust = 0,
    Rates = 1,
    Identification = 2,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Noise source for the realized actuator input.
#[derive(Debug, Clone)]
pub struct ActuatorNoise {
    thrust: ChaCha8Rng,
    rates: ChaCha8Rng,
}

impl ActuatorNoise {
    pub fn new(seed: u64) -> Self {
        Self {
            thrust: stream_rng(seed, Stream::Thrust),
            rates: stream_rng(seed, Stream::Rates),
        }
    }
}

/// `T + n_T`, `ω + n_ω` with independent zero-mean Gaussian draws. A zero
/// sigma leaves its channel untouched and draws nothing.
pub fn apply_actuator_noise(u: &ControlInput, sigma_t: f64, sigma_w: f64, noise: &mut ActuatorNoise) -> ControlInput {
    let mut out = *u;
    if sigma_t > 0.0 {
        let n: f64 = StandardNormal.sample(&mut noise.thrust);
        out.thrust += sigma_t * n;
    }
    if sigma_w > 0.0 {
        for i in 0..3 {
            let n: f64 = StandardNormal.sample(&mut noise.rates);
            out.omega[i] += sigma_w * n;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn zero_sigma_is_identity() {
        let u = ControlInput::new(9.81, Vector3::new(0.1, 0.2, 0.3));
        let mut noise = ActuatorNoise::new(1);
        assert_eq!(apply_actuator_noise(&u, 0.0, 0.0, &mut noise), u);
    }

    #[test]
    fn fixed_seed_repeats() {
        let u = ControlInput::hover(&Default::default());
        let mut a = ActuatorNoise::new(42);
        let mut b = ActuatorNoise::new(42);
        for _ in 0..100 {
            assert_eq!(apply_actuator_noise(&u, 0.2, 0.2, &mut a), apply_actuator_noise(&u, 0.2, 0.2, &mut b));
        }
    }

    #[test]
    fn streams_are_independent() {
        let u = ControlInput::hover(&Default::default());
        let mut both = ActuatorNoise::new(3);
        let mut thrust_only = ActuatorNoise::new(3);
        for _ in 0..50 {
            let a = apply_actuator_noise(&u, 0.2, 0.2, &mut both);
            let b = apply_actuator_noise(&u, 0.2, 0.0, &mut thrust_only);
            assert_eq!(a.thrust, b.thrust);
        }
    }

    #[test]
    fn empirical_std_matches_sigma() {
        let u = ControlInput::default();
        let mut noise = ActuatorNoise::new(7);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| apply_actuator_noise(&u, 0.2, 0.0, &mut noise).thrust).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var.sqrt() - 0.2).abs() < 0.02 * 0.2, "std {}", var.sqrt());
    }
}
