//! Virtual clinical trial: protocols, cohort generation, CGM noise, the
//! closed-loop simulation and glycemic statistics.

mod cgm;
mod closed_loop;
mod cohort;
mod scenario;
mod stats;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cgm::{CgmConfig, CgmNoise};
pub use closed_loop::{
    run_closed_loop, CommandSource, ControllerSetup, IntervalLog, TrialConfig, TrialRecord,
};
pub use cohort::{generate_cohort, CohortConfig, IcrRule, VirtualPatient};
pub use scenario::{generate_identification_data, IdentificationScenario, ScenarioRecord};
pub use stats::{tir_stats, GlycemicBands, TirStats};

/// Derives an independent 64-bit seed for `stream` from `master`
/// (SplitMix64 finaliser over the combined words).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Event {
    /// Carbohydrate intake [g] at `t` [min], eaten within one interval.
    Meal {
        t: f64,
        grams: f64,
        #[serde(default = "announced_default")]
        announced: bool,
    },
    /// Exercise between `t` and `end` [min] at `intensity` BPM above rest.
    Exercise { t: f64, end: f64, intensity: f64 },
}

fn announced_default() -> bool {
    true
}

impl Event {
    pub fn time(&self) -> f64 {
        match self {
            Event::Meal { t, .. } | Event::Exercise { t, .. } => *t,
        }
    }
}

/// Scripted events over a trial of `duration` minutes starting at t = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub duration: f64,
    pub events: Vec<Event>,
}

impl Protocol {
    /// 26 h starting at 17:00: dinner 75 g at 18:00, breakfast 50 g at
    /// 07:00, lunch 75 g at 12:00, snack 15 g at 15:00 and 45 min of moderate
    /// exercise (+50 BPM) from 17:00.
    pub fn default_trial() -> Self {
        let meal = |t: f64, grams: f64| Event::Meal {
            t,
            grams,
            announced: true,
        };
        Self {
            duration: 1560.0,
            events: vec![
                meal(60.0, 75.0),
                meal(840.0, 50.0),
                meal(1140.0, 75.0),
                meal(1320.0, 15.0),
                Event::Exercise {
                    t: 1440.0,
                    end: 1485.0,
                    intensity: 50.0,
                },
            ],
        }
    }

    /// A protocol without any events.
    pub fn quiet(duration: f64) -> Self {
        Self {
            duration,
            events: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Protocol("duration must be positive".into()));
        }
        let mut last = f64::NEG_INFINITY;
        for (i, e) in self.events.iter().enumerate() {
            let t = e.time();
            if !(t.is_finite() && t >= 0.0 && t < self.duration) {
                return Err(Error::Protocol(format!("event {i} at t = {t} lies outside the trial")));
            }
            if t < last {
                return Err(Error::Protocol(format!("event {i} is out of time order")));
            }
            last = t;
            match *e {
                Event::Meal { grams, .. } if !(grams >= 0.0) => {
                    return Err(Error::Protocol(format!("event {i} has a negative meal size")));
                }
                Event::Exercise { t, end, intensity } if !(end > t && intensity.is_finite()) => {
                    return Err(Error::Protocol(format!("event {i} has an empty exercise window")));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Meal eaten in `[t, t + interval)`: grams and whether it was announced.
    pub fn meal_in(&self, t: f64, interval: f64) -> Option<(f64, bool)> {
        let mut total = 0.0;
        let mut announced = false;
        let mut any = false;
        for e in &self.events {
            if let Event::Meal {
                t: tm,
                grams,
                announced: a,
            } = *e
            {
                if tm >= t && tm < t + interval {
                    total += grams;
                    announced |= a;
                    any = true;
                }
            }
        }
        any.then_some((total, announced))
    }

    /// Heart rate above rest at time `t` [BPM].
    pub fn exercise_intensity(&self, t: f64) -> f64 {
        self.events
            .iter()
            .filter_map(|e| match *e {
                Event::Exercise { t: ts, end, intensity } if t >= ts && t < end => Some(intensity),
                _ => None,
            })
            .sum()
    }

    /// Exercise start or end falling in `[t, t + interval)`.
    pub fn exercise_event_in(&self, t: f64, interval: f64) -> Option<crate::dosing::ExerciseEvent> {
        use crate::dosing::ExerciseEvent;
        let inside = |x: f64| x >= t && x < t + interval;
        self.events.iter().find_map(|e| match *e {
            Event::Exercise { t: ts, .. } if inside(ts) => Some(ExerciseEvent::Start),
            Event::Exercise { end, .. } if inside(end) => Some(ExerciseEvent::End),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dosing::ExerciseEvent;

    #[test]
    fn default_protocol_is_valid() {
        let p = Protocol::default_trial();
        assert!(p.validate().is_ok());
        assert_eq!(p.meal_in(60.0, 5.0), Some((75.0, true)));
        assert_eq!(p.meal_in(65.0, 5.0), None);
        assert_eq!(p.exercise_intensity(1450.0), 50.0);
        assert_eq!(p.exercise_intensity(1485.0), 0.0);
        assert_eq!(p.exercise_event_in(1440.0, 5.0), Some(ExerciseEvent::Start));
        assert_eq!(p.exercise_event_in(1485.0, 5.0), Some(ExerciseEvent::End));
    }

    #[test]
    fn rejects_unsorted_or_outside_events() {
        let mut p = Protocol::default_trial();
        p.events.swap(0, 1);
        assert!(p.validate().is_err());
        let mut p = Protocol::default_trial();
        p.duration = 1000.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let a: Vec<u64> = (0..100).map(|i| derive_seed(7, i)).collect();
        let mut b = a.clone();
        b.sort_unstable();
        b.dedup();
        assert_eq!(b.len(), 100);
        assert_ne!(derive_seed(7, 0), derive_seed(8, 0));
    }
}
