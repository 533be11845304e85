use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Open-loop control input `u(t)`, bounded componentwise by its amplitude.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlSignal {
    Zero,
    Constant {
        values: Vec<f64>,
    },
    Sinusoid {
        amplitude: Vec<f64>,
        frequency_hz: Vec<f64>,
    },
    /// Independent uniform draws in `[-amplitude, amplitude]`, held for `hold` seconds.
    PiecewiseConstantRandom {
        amplitude: Vec<f64>,
        hold: f64,
        seed: u64,
    },
}

impl ControlSignal {
    pub fn eval(&self, t: f64, n_u: usize) -> Vec<f64> {
        match self {
            ControlSignal::Zero => vec![0.0; n_u],
            ControlSignal::Constant { values } => (0..n_u).map(|i| pick(values, i)).collect(),
            ControlSignal::Sinusoid {
                amplitude,
                frequency_hz,
            } => (0..n_u)
                .map(|i| {
                    let w = 2.0 * std::f64::consts::PI * pick(frequency_hz, i);
                    pick(amplitude, i) * (w * t).sin()
                })
                .collect(),
            ControlSignal::PiecewiseConstantRandom {
                amplitude,
                hold,
                seed,
            } => {
                let segment = (t.max(0.0) / hold).floor() as u128;
                let mut rng = ChaCha20Rng::seed_from_u64(*seed);
                // Each u64 draw consumes two 32-bit words of the keystream.
                rng.set_word_pos(segment * n_u as u128 * 2);
                (0..n_u)
                    .map(|i| {
                        let a = pick(amplitude, i);
                        let x: f64 = rng.gen::<u64>() as f64 / u64::MAX as f64;
                        a * (2.0 * x - 1.0)
                    })
                    .collect()
            }
        }
    }

    /// Same signal with its random stream re-seeded; deterministic signals are unchanged.
    pub fn reseeded(&self, seed: u64) -> Self {
        match self {
            ControlSignal::PiecewiseConstantRandom {
                amplitude, hold, ..
            } => ControlSignal::PiecewiseConstantRandom {
                amplitude: amplitude.clone(),
                hold: *hold,
                seed,
            },
            other => other.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let amps = match self {
            ControlSignal::Zero => return Ok(()),
            ControlSignal::Constant { values } => values,
            ControlSignal::Sinusoid { amplitude, .. } => amplitude,
            ControlSignal::PiecewiseConstantRandom {
                amplitude, hold, ..
            } => {
                if !(*hold > 0.0) {
                    return Err(format!("control hold must be positive, got {hold}"));
                }
                amplitude
            }
        };
        if amps.is_empty() || amps.iter().any(|a| !a.is_finite()) {
            return Err("control amplitudes must be non-empty and finite".into());
        }
        Ok(())
    }
}

/// Broadcasts a single value to every channel.
fn pick(v: &[f64], i: usize) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        _ => v[i.min(v.len() - 1)],
    }
}
