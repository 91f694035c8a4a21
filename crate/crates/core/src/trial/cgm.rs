use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

// libm float methods under no_std; std shadows them in test builds
#[allow(unused_imports)]
use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CgmConfig {
    /// Lag-one autocorrelation of the sensor error.
    pub coefficient: f64,
    /// Stationary standard deviation [mmol/L].
    pub sd: f64,
    /// Smallest reported value [mmol/L].
    pub floor: f64,
}

impl Default for CgmConfig {
    fn default() -> Self {
        Self {
            coefficient: 0.7,
            sd: 0.25,
            floor: 0.1,
        }
    }
}

/// Sensor error as a stationary AR(1) process added to interstitial glucose.
#[derive(Debug, Clone)]
pub struct CgmNoise {
    config: CgmConfig,
    error: f64,
    started: bool,
    rng: ChaCha8Rng,
}

impl CgmNoise {
    pub fn new(config: CgmConfig, seed: u64) -> Self {
        Self {
            config,
            error: 0.0,
            started: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Next reading for interstitial glucose `gi`.
    pub fn sample(&mut self, gi: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        let c = &self.config;
        self.error = if self.started {
            c.coefficient * self.error + c.sd * (1.0 - c.coefficient * c.coefficient).sqrt() * z
        } else {
            self.started = true;
            c.sd * z
        };
        (gi + self.error).max(c.floor)
    }
}
