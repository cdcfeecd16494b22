/// Teacher-mixing weight: `decay^(index / every)` while that is at least
/// `floor`, exactly 0 afterwards. `index` counts updates from the start of
/// the main phase.
pub fn lambda_at(index: u64, decay: f64, every: f64, floor: f64) -> f64 {
    let v = decay.powf(index as f64 / every);
    if v < floor {
        0.0
    } else {
        v
    }
}

/// The default schedule: 0.8 per 1000 updates, cut to 0 below 0.05.
pub fn lambda_schedule(index: u64) -> f64 {
    lambda_at(index, 0.8, 1000.0, 0.05)
}
