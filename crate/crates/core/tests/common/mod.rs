//! Fixtures shared by the integration tests.

#![allow(dead_code)]

use gridveil_core::meterdata::{EnergyQuantity, FeederDataset, MeterId, ReadingSeries};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub const HOUR: u32 = 3600;
/// 2024-01-01T00:00:00Z
pub const FIXTURE_START: i64 = 1_704_067_200;
pub const FIXTURE_DAYS: usize = 14;
pub const DELTA_MAX_MILLI: i64 = 5000;

/// Nominal hourly kWh of the night-heavy group.
pub fn night_heavy(hour: usize) -> f64 {
    if !(6..20).contains(&hour) {
        2.0
    } else {
        0.4
    }
}

/// Nominal hourly kWh of the day-heavy group.
pub fn day_heavy(hour: usize) -> f64 {
    if (8..18).contains(&hour) {
        1.8
    } else {
        0.3
    }
}

pub struct TwoClusterFixture {
    pub dataset: FeederDataset,
    /// Group of each series in dataset order; `true` is night-heavy.
    pub night: Vec<bool>,
}

/// Hourly data for `households` meters split at random between a night-heavy
/// and a day-heavy profile. Each household has a persistent scale factor in
/// [0.8, 1.2] and each reading 15% multiplicative noise, capped at 5 kWh.
pub fn two_cluster_fixture(households: usize, days: usize, seed: u64) -> TwoClusterFixture {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut series = Vec::with_capacity(households);
    let mut night = Vec::with_capacity(households);
    for i in 0..households {
        let is_night = rng.gen_bool(0.5);
        let scale = rng.gen_range(0.8..1.2);
        let energies: Vec<EnergyQuantity> = (0..days * 24)
            .map(|t| {
                let base = if is_night { night_heavy(t % 24) } else { day_heavy(t % 24) };
                let z: f64 = rng.sample(StandardNormal);
                let kwh = (base * scale * (1.0 + 0.15 * z)).clamp(0.0, DELTA_MAX_MILLI as f64 / 1000.0);
                EnergyQuantity::from_kwh_f64(kwh)
            })
            .collect();
        series.push(
            ReadingSeries::from_energies(MeterId::new(format!("hh-{i:05}")), FIXTURE_START, HOUR, energies).unwrap(),
        );
        night.push(is_night);
    }
    // Ids are zero-padded, so dataset order equals generation order.
    let dataset = FeederDataset::new(series, HOUR, EnergyQuantity::from_milli_kwh(DELTA_MAX_MILLI)).unwrap();
    TwoClusterFixture { dataset, night }
}

/// `meters` meters each reporting `kwh` at one timestamp.
pub fn flat_feeder(meters: usize, kwh: f64) -> FeederDataset {
    let series = (0..meters)
        .map(|i| {
            ReadingSeries::from_energies(
                MeterId::new(format!("m{i:05}")),
                FIXTURE_START,
                HOUR,
                [EnergyQuantity::from_kwh_f64(kwh)],
            )
            .unwrap()
        })
        .collect();
    FeederDataset::new(series, HOUR, EnergyQuantity::from_milli_kwh(DELTA_MAX_MILLI)).unwrap()
}
