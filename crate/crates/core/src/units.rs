//! Unit conventions shared by the plant, the controller and the pump.

/// Control and sampling interval [min].
pub const SAMPLE_TIME: f64 = 5.0;

/// Molar mass of glucose [g/mol].
pub const GLUCOSE_MOLAR_MASS: f64 = 180.0;

/// Converts carbohydrate grams to mmol of glucose.
pub fn grams_to_mmol(grams: f64) -> f64 {
    grams * 1000.0 / GLUCOSE_MOLAR_MASS
}

/// Rate [mmol/min] of a meal of `grams` spread as a rectangular pulse over `interval` minutes.
pub fn meal_rate(grams: f64, interval: f64) -> f64 {
    grams_to_mmol(grams) / interval
}

/// Insulin rate [mU/min] to [U/h].
pub fn mu_per_min_to_u_per_h(rate: f64) -> f64 {
    rate * 60.0 / 1000.0
}

pub fn u_per_h_to_mu_per_min(rate: f64) -> f64 {
    rate * 1000.0 / 60.0
}

/// Amount [U] delivered by `rate` [mU/min] over `interval` minutes.
pub fn mu_per_min_to_units(rate: f64, interval: f64) -> f64 {
    rate * interval / 1000.0
}

pub fn units_to_mu_per_min(units: f64, interval: f64) -> f64 {
    units * 1000.0 / interval
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meal_pulse_conversion() {
        // 90 g = 500 mmol, spread over one 5-min interval
        assert!((meal_rate(90.0, 5.0) - 100.0).abs() < 1e-12);
        assert!((mu_per_min_to_units(units_to_mu_per_min(0.7, 5.0), 5.0) - 0.7).abs() < 1e-15);
        assert!((u_per_h_to_mu_per_min(mu_per_min_to_u_per_h(12.5)) - 12.5).abs() < 1e-12);
    }
}
