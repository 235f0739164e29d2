//! Synthetic load profiles from cluster statistics plus appliance events.
//!
//! [`fit`] clusters meters by their average daily profile and records, per
//! cluster and hour of day, the mean and standard deviation of interval
//! energy. [`generate`] draws a cluster per household and samples each
//! interval independently, adding Poisson-arriving appliance events.
//! [`fidelity_report`] and [`privacy_check`] measure how close the output is
//! to the real data in aggregate and per record.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::meterdata::{
    day_index, hour_of_day, EnergyQuantity, FeederDataset, MeterDataError, MeterId, ReadingSeries,
};

pub const HOURS: usize = 24;
pub const SECONDS_PER_DAY: i64 = 86_400;
/// Lloyd iterations in [`fit`].
pub const KMEANS_ITERATIONS: usize = 50;
/// Histogram bins for [`FidelityReport::hist_l1`].
pub const HIST_BINS: usize = 50;
/// Denominator floor (kWh) for relative errors.
pub const REL_ERR_FLOOR_KWH: f64 = 0.001;
/// Suggested memorization threshold in normalized RMS units; operator policy.
pub const DEFAULT_MEMORIZATION_THRESHOLD: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("need at least {needed} series, found {found}")]
    TooFewSeries { needed: usize, found: usize },
    #[error("series {0} is empty")]
    EmptySeries(String),
    #[error("series {0} does not cover every hour of a day")]
    ShortSeries(String),
    #[error("n_clusters must be at least 1")]
    InvalidClusterCount,
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("dataset has no readings")]
    EmptyDataset,
    #[error("interval mismatch: {real}s vs {synth}s")]
    IntervalMismatch { real: u32, synth: u32 },
    #[error(transparent)]
    Data(#[from] MeterDataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterProfile {
    pub weight: f64,
    /// Mean energy per interval (kWh) for intervals starting in each hour.
    pub hourly_mean: [f64; HOURS],
    pub hourly_std: [f64; HOURS],
}

impl ClusterProfile {
    /// Expected daily total in kWh, ignoring clamping.
    pub fn daily_mean(&self, intervals_per_hour: f64) -> f64 {
        self.hourly_mean.iter().sum::<f64>() * intervals_per_hour
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApplianceEvents {
    pub rate_per_day: f64,
    /// Energy added to each interval the event covers.
    pub magnitude_kwh: f64,
    pub duration_intervals: u32,
}

impl ApplianceEvents {
    pub const NONE: ApplianceEvents = ApplianceEvents { rate_per_day: 0.0, magnitude_kwh: 1.0, duration_intervals: 1 };

    pub fn new(rate_per_day: f64, magnitude_kwh: f64, duration_intervals: u32) -> Result<Self, SynthError> {
        if !(rate_per_day.is_finite() && rate_per_day >= 0.0) {
            return Err(SynthError::InvalidModel("rate_per_day must be non-negative".into()));
        }
        if !(magnitude_kwh.is_finite() && magnitude_kwh > 0.0) {
            return Err(SynthError::InvalidModel("magnitude_kwh must be positive".into()));
        }
        if duration_intervals == 0 {
            return Err(SynthError::InvalidModel("duration_intervals must be positive".into()));
        }
        Ok(ApplianceEvents { rate_per_day, magnitude_kwh, duration_intervals })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorModel {
    clusters: Vec<ClusterProfile>,
    appliance_events: ApplianceEvents,
    interval_s: u32,
    delta_max: EnergyQuantity,
    /// First synthetic timestamp; a UTC midnight.
    start: i64,
    /// Uniform post-generation jitter of ± this many milli-kWh.
    jitter_milli_kwh: u32,
}

fn intervals_per_day(interval_s: u32) -> Result<usize, SynthError> {
    if interval_s == 0 || SECONDS_PER_DAY % i64::from(interval_s) != 0 {
        return Err(SynthError::InvalidModel(format!("interval {interval_s}s does not divide a day")));
    }
    Ok((SECONDS_PER_DAY / i64::from(interval_s)) as usize)
}

impl GeneratorModel {
    pub fn new(
        clusters: Vec<ClusterProfile>,
        appliance_events: ApplianceEvents,
        interval_s: u32,
        delta_max: EnergyQuantity,
        start: i64,
    ) -> Result<Self, SynthError> {
        if clusters.is_empty() {
            return Err(SynthError::InvalidClusterCount);
        }
        intervals_per_day(interval_s)?;
        let total: f64 = clusters.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 || clusters.iter().any(|c| c.weight.is_nan() || c.weight < 0.0) {
            return Err(SynthError::InvalidModel(format!("cluster weights sum to {total}")));
        }
        for c in &clusters {
            if c.hourly_mean.iter().any(|m| !m.is_finite()) {
                return Err(SynthError::InvalidModel("hourly means must be finite".into()));
            }
            if c.hourly_std.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
                return Err(SynthError::InvalidModel("hourly stds must be finite and non-negative".into()));
            }
        }
        if delta_max.milli_kwh() <= 0 {
            return Err(SynthError::InvalidModel("delta_max must be positive".into()));
        }
        ApplianceEvents::new(appliance_events.rate_per_day, appliance_events.magnitude_kwh, appliance_events.duration_intervals)?;
        Ok(GeneratorModel { clusters, appliance_events, interval_s, delta_max, start, jitter_milli_kwh: 0 })
    }

    pub fn with_appliance_events(mut self, events: ApplianceEvents) -> Self {
        self.appliance_events = events;
        self
    }

    pub fn with_jitter(mut self, jitter_milli_kwh: u32) -> Self {
        self.jitter_milli_kwh = jitter_milli_kwh;
        self
    }

    pub fn clusters(&self) -> &[ClusterProfile] {
        &self.clusters
    }

    pub fn appliance_events(&self) -> ApplianceEvents {
        self.appliance_events
    }

    pub fn interval_s(&self) -> u32 {
        self.interval_s
    }

    pub fn delta_max(&self) -> EnergyQuantity {
        self.delta_max
    }

    pub fn start(&self) -> i64 {
        self.start
    }

    pub fn jitter_milli_kwh(&self) -> u32 {
        self.jitter_milli_kwh
    }
}

fn sub_seed(tag: &[u8], seed: u64, index: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(tag);
    h.update(seed.to_be_bytes());
    h.update(index.to_be_bytes());
    h.finalize().into()
}

fn sq_dist(a: &[f64; HOURS], b: &[f64; HOURS]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64; HOURS], centroids: &[[f64; HOURS]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations. Empty clusters are
/// reseeded with the point farthest from its centroid.
fn kmeans(points: &[[f64; HOURS]], k: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())]];
    while centroids.len() < k {
        let d: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[nearest(p, &centroids)])).collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = d.len() - 1;
            for (i, di) in d.iter().enumerate() {
                if target < *di {
                    idx = i;
                    break;
                }
                target -= di;
            }
            idx
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[pick]);
    }

    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    for _ in 0..KMEANS_ITERATIONS {
        let mut sums = vec![[0.0; HOURS]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .max_by(|&i, &j| {
                        let di = sq_dist(&points[i], &centroids[assign[i]]);
                        let dj = sq_dist(&points[j], &centroids[assign[j]]);
                        di.total_cmp(&dj).then(j.cmp(&i))
                    })
                    .expect("points is non-empty");
                centroids[c] = points[far];
                assign[far] = c;
            } else {
                centroids[c] = sums[c].map(|s| s / counts[c] as f64);
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    assign
}

fn average_daily_profile(series: &ReadingSeries) -> Result<[f64; HOURS], SynthError> {
    let mut sums = [0.0; HOURS];
    let mut counts = [0usize; HOURS];
    for r in series.readings() {
        let h = r.hour_of_day();
        sums[h] += r.energy().kwh();
        counts[h] += 1;
    }
    if counts.contains(&0) {
        return Err(SynthError::ShortSeries(series.meter_id().to_string()));
    }
    let mut out = [0.0; HOURS];
    for h in 0..HOURS {
        out[h] = sums[h] / counts[h] as f64;
    }
    Ok(out)
}

/// Clusters meters by average daily profile and summarizes each cluster.
///
/// Clusters come back ordered by expected daily total. Appliance events are
/// not estimated; the fitted model has none until
/// [`GeneratorModel::with_appliance_events`] is applied.
pub fn fit(real: &FeederDataset, n_clusters: usize, seed: u64) -> Result<GeneratorModel, SynthError> {
    if n_clusters == 0 {
        return Err(SynthError::InvalidClusterCount);
    }
    let series = real.series();
    if series.len() < n_clusters {
        return Err(SynthError::TooFewSeries { needed: n_clusters, found: series.len() });
    }
    let ipd = intervals_per_day(real.interval_s())?;
    let mut profiles = Vec::with_capacity(series.len());
    for s in series {
        if s.is_empty() {
            return Err(SynthError::EmptySeries(s.meter_id().to_string()));
        }
        if s.len() < ipd {
            return Err(SynthError::ShortSeries(s.meter_id().to_string()));
        }
        profiles.push(average_daily_profile(s)?);
    }
    let mut rng = ChaCha20Rng::from_seed(sub_seed(b"gridveil/synth/fit", seed, 0));
    let assign = kmeans(&profiles, n_clusters, &mut rng);

    let mut clusters = Vec::new();
    for c in 0..n_clusters {
        let members: Vec<&ReadingSeries> = series.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(s, _)| s).collect();
        if members.is_empty() {
            continue;
        }
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); HOURS];
        for s in &members {
            for r in s.readings() {
                values[r.hour_of_day()].push(r.energy().kwh());
            }
        }
        let mut hourly_mean = [0.0; HOURS];
        let mut hourly_std = [0.0; HOURS];
        for h in 0..HOURS {
            let v = &values[h];
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
            hourly_mean[h] = mean;
            hourly_std[h] = var.sqrt();
        }
        clusters.push(ClusterProfile { weight: members.len() as f64 / series.len() as f64, hourly_mean, hourly_std });
    }
    clusters.sort_by(|a, b| a.hourly_mean.iter().sum::<f64>().total_cmp(&b.hourly_mean.iter().sum::<f64>()));
    // Renormalize so rounding in member fractions cannot break the weight invariant.
    let total: f64 = clusters.iter().map(|c| c.weight).sum();
    for c in &mut clusters {
        c.weight /= total;
    }

    let first_ts = series.iter().filter_map(|s| s.readings().first()).map(|r| r.timestamp()).min().unwrap_or(0);
    let start = day_index(first_ts) * SECONDS_PER_DAY;
    GeneratorModel::new(clusters, ApplianceEvents::NONE, real.interval_s(), real.delta_max(), start)
}

fn pick_cluster(clusters: &[ClusterProfile], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, c) in clusters.iter().enumerate() {
        acc += c.weight;
        if u < acc {
            return i;
        }
    }
    clusters.len() - 1
}

fn generate_household(model: &GeneratorModel, index: usize, n_days: usize, seed: u64) -> Result<ReadingSeries, SynthError> {
    let mut rng = ChaCha20Rng::from_seed(sub_seed(b"gridveil/synth/household", seed, index as u64));
    let ipd = intervals_per_day(model.interval_s)?;
    let n = ipd * n_days;
    let cluster = &model.clusters[pick_cluster(&model.clusters, rng.gen::<f64>())];

    let interval = i64::from(model.interval_s);
    let mut kwh: Vec<f64> = (0..n)
        .map(|i| {
            let h = hour_of_day(model.start + i as i64 * interval);
            let z: f64 = StandardNormal.sample(&mut rng);
            (cluster.hourly_mean[h] + cluster.hourly_std[h] * z).max(0.0)
        })
        .collect();

    let ev = model.appliance_events;
    if ev.rate_per_day > 0.0 {
        let gap = Exp::new(ev.rate_per_day).map_err(|e| SynthError::InvalidModel(e.to_string()))?;
        let mut t = 0.0;
        loop {
            t += gap.sample(&mut rng);
            if t >= n_days as f64 {
                break;
            }
            let first = ((t * ipd as f64) as usize).min(n - 1);
            for v in kwh.iter_mut().skip(first).take(ev.duration_intervals as usize) {
                *v += ev.magnitude_kwh;
            }
        }
    }

    let cap = model.delta_max.milli_kwh();
    let jitter = i64::from(model.jitter_milli_kwh);
    let energies: Vec<EnergyQuantity> = kwh
        .into_iter()
        .map(|v| {
            let mut milli = EnergyQuantity::from_kwh_f64(v).milli_kwh();
            if jitter > 0 {
                milli += rng.gen_range(-jitter..=jitter);
            }
            EnergyQuantity::from_milli_kwh(milli.clamp(0, cap))
        })
        .collect();
    let id = MeterId::new(format!("synth-{:06}", index + 1));
    Ok(ReadingSeries::from_energies(id, model.start, model.interval_s, energies)?)
}

/// Samples `n_households` households for `n_days` days.
///
/// Each household draws from its own stream derived from (seed, index).
/// Values are clamped into [0, delta_max] so the output is a valid dataset.
pub fn generate(model: &GeneratorModel, n_households: usize, n_days: usize, seed: u64) -> Result<FeederDataset, SynthError> {
    let series = (0..n_households)
        .map(|i| generate_household(model, i, n_days, seed))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FeederDataset::new(series, model.interval_s, model.delta_max)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub per_hour_mean_rel_err: [f64; HOURS],
    pub hist_l1: f64,
    pub peak_dist_rel_err: f64,
}

impl FidelityReport {
    pub fn max_hourly_rel_err(&self) -> f64 {
        self.per_hour_mean_rel_err.iter().copied().fold(0.0, f64::max)
    }
}

fn hourly_means(d: &FeederDataset) -> [f64; HOURS] {
    let mut sums = [0i64; HOURS];
    let mut counts = [0usize; HOURS];
    for r in d.readings() {
        sums[r.hour_of_day()] += r.energy().milli_kwh();
        counts[r.hour_of_day()] += 1;
    }
    let mut out = [0.0; HOURS];
    for h in 0..HOURS {
        if counts[h] > 0 {
            out[h] = sums[h] as f64 / 1000.0 / counts[h] as f64;
        }
    }
    out
}

fn histogram(d: &FeederDataset, cap_milli: i64) -> Vec<f64> {
    let mut bins = vec![0usize; HIST_BINS];
    let mut total = 0usize;
    for r in d.readings() {
        let v = r.energy().milli_kwh().clamp(0, cap_milli);
        let b = ((v as i128 * HIST_BINS as i128) / cap_milli as i128) as usize;
        bins[b.min(HIST_BINS - 1)] += 1;
        total += 1;
    }
    bins.into_iter().map(|c| c as f64 / total as f64).collect()
}

fn mean_daily_peak(d: &FeederDataset) -> f64 {
    let mut peaks: BTreeMap<(&MeterId, i64), i64> = BTreeMap::new();
    for r in d.readings() {
        let e = peaks.entry((r.meter_id(), day_index(r.timestamp()))).or_insert(i64::MIN);
        *e = (*e).max(r.energy().milli_kwh());
    }
    peaks.values().map(|&p| p as f64 / 1000.0).sum::<f64>() / peaks.len() as f64
}

fn rel_err(synth: f64, real: f64) -> f64 {
    (synth - real).abs() / real.max(REL_ERR_FLOOR_KWH)
}

/// Aggregate distributional distance between real and synthetic data.
pub fn fidelity_report(real: &FeederDataset, synth: &FeederDataset) -> Result<FidelityReport, SynthError> {
    if real.interval_s() != synth.interval_s() {
        return Err(SynthError::IntervalMismatch { real: real.interval_s(), synth: synth.interval_s() });
    }
    if real.reading_count() == 0 || synth.reading_count() == 0 {
        return Err(SynthError::EmptyDataset);
    }
    let mr = hourly_means(real);
    let ms = hourly_means(synth);
    let mut per_hour_mean_rel_err = [0.0; HOURS];
    for h in 0..HOURS {
        per_hour_mean_rel_err[h] = rel_err(ms[h], mr[h]);
    }
    let cap = real.delta_max().milli_kwh().max(synth.delta_max().milli_kwh());
    let hr = histogram(real, cap);
    let hs = histogram(synth, cap);
    let hist_l1 = hr.iter().zip(&hs).map(|(a, b)| (a - b).abs()).sum();
    let peak_dist_rel_err = rel_err(mean_daily_peak(synth), mean_daily_peak(real));
    Ok(FidelityReport { per_hour_mean_rel_err, hist_l1, peak_dist_rel_err })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyCheckReport {
    pub min_nn_distance: f64,
    pub memorization_flag: bool,
    pub distinguisher_auc: f64,
}

/// RMS over the aligned prefix, normalized by `scale_kwh`.
pub fn normalized_rms(a: &[f64], b: &[f64], scale_kwh: f64) -> Option<f64> {
    let n = a.len().min(b.len());
    if n == 0 {
        return None;
    }
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Some((ss / n as f64).sqrt() / scale_kwh)
}

/// P(x < y) + ½·P(x = y) for x drawn from `lower`, y from `higher`.
pub fn mann_whitney_auc(lower: &[f64], higher: &[f64]) -> Option<f64> {
    if lower.is_empty() || higher.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for x in lower {
        for y in higher {
            if x < y {
                wins += 1.0;
            } else if x == y {
                wins += 0.5;
            }
        }
    }
    Some(wins / (lower.len() * higher.len()) as f64)
}

fn kwh_rows(d: &FeederDataset) -> Vec<Vec<f64>> {
    d.series().iter().filter(|s| !s.is_empty()).map(|s| s.energies().map(|e| e.kwh()).collect()).collect()
}

/// Real series at even positions (by meter id); the "member" half used by the
/// membership test in [`privacy_check`]. Fit on this half to make the test
/// meaningful.
pub fn member_split(real: &FeederDataset) -> Result<(FeederDataset, FeederDataset), SynthError> {
    let (mut even, mut odd) = (Vec::new(), Vec::new());
    for (i, s) in real.series().iter().enumerate() {
        if i % 2 == 0 { even.push(s.clone()) } else { odd.push(s.clone()) }
    }
    Ok((
        FeederDataset::new(even, real.interval_s(), real.delta_max())?,
        FeederDataset::new(odd, real.interval_s(), real.delta_max())?,
    ))
}

/// Record-level similarity between real and synthetic data.
///
/// `min_nn_distance` is the smallest normalized RMS distance from any
/// synthetic series to any real one; the flag is set when it is at or below
/// `threshold`. The distinguisher is a 1-NN membership test: every real series
/// is scored by its distance to the nearest synthetic series, and the AUC
/// measures how often members (even positions) sit closer than non-members
/// (odd positions). 0.5 means the synthetic set does not favour members.
pub fn privacy_check(real: &FeederDataset, synth: &FeederDataset, threshold: f64) -> Result<PrivacyCheckReport, SynthError> {
    if real.interval_s() != synth.interval_s() {
        return Err(SynthError::IntervalMismatch { real: real.interval_s(), synth: synth.interval_s() });
    }
    let r = kwh_rows(real);
    let s = kwh_rows(synth);
    if r.is_empty() || s.is_empty() {
        return Err(SynthError::EmptyDataset);
    }
    let scale = real.delta_max().kwh();
    let nn_to_synth: Vec<f64> = r
        .iter()
        .map(|row| s.iter().filter_map(|srow| normalized_rms(row, srow, scale)).fold(f64::INFINITY, f64::min))
        .collect();
    let min_nn_distance = nn_to_synth.iter().copied().fold(f64::INFINITY, f64::min);
    if !min_nn_distance.is_finite() {
        return Err(SynthError::EmptyDataset);
    }
    let members: Vec<f64> = nn_to_synth.iter().step_by(2).copied().collect();
    let non_members: Vec<f64> = nn_to_synth.iter().skip(1).step_by(2).copied().collect();
    let distinguisher_auc = mann_whitney_auc(&members, &non_members).unwrap_or(0.5);
    Ok(PrivacyCheckReport { min_nn_distance, memorization_flag: min_nn_distance <= threshold, distinguisher_auc })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;

    const HOUR: u32 = 3600;
    const CAP: i64 = 5000;

    fn dataset(rows: Vec<Vec<f64>>) -> FeederDataset {
        let series = rows
            .into_iter()
            .enumerate()
            .map(|(i, kwh)| {
                ReadingSeries::from_energies(
                    MeterId::new(format!("m{i:04}")),
                    0,
                    HOUR,
                    kwh.into_iter().map(EnergyQuantity::from_kwh_f64),
                )
                .unwrap()
            })
            .collect();
        FeederDataset::new(series, HOUR, EnergyQuantity::from_milli_kwh(CAP)).unwrap()
    }

    fn profile(night: f64, day: f64) -> [f64; HOURS] {
        std::array::from_fn(|h| if (7..19).contains(&h) { day } else { night })
    }

    /// Night-heavy meters at even positions, day-heavy at odd.
    fn two_groups(n: usize, days: usize, seed: u64) -> FeederDataset {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        dataset(
            (0..n)
                .map(|i| {
                    let p = if i % 2 == 0 { profile(2.0, 0.4) } else { profile(0.3, 1.8) };
                    (0..days * 24).map(|t| (p[t % 24] + rng.gen_range(-0.2..0.2)).max(0.0)).collect()
                })
                .collect(),
        )
    }

    fn single_cluster(mean: f64, std: f64) -> GeneratorModel {
        let c = ClusterProfile { weight: 1.0, hourly_mean: [mean; HOURS], hourly_std: [std; HOURS] };
        GeneratorModel::new(vec![c], ApplianceEvents::NONE, HOUR, EnergyQuantity::from_milli_kwh(CAP), 0).unwrap()
    }

    #[test]
    fn fit_constant_meters() {
        let model = fit(&dataset(vec![vec![1.0; 48]; 5]), 1, 3).unwrap();
        assert_eq!(model.clusters().len(), 1);
        let c = &model.clusters()[0];
        assert_eq!(c.weight, 1.0);
        assert_eq!(c.hourly_mean, [1.0; HOURS]);
        assert_eq!(c.hourly_std, [0.0; HOURS]);
    }

    #[test]
    fn fit_errors() {
        let d = dataset(vec![vec![1.0; 48]; 2]);
        assert_eq!(fit(&d, 3, 0), Err(SynthError::TooFewSeries { needed: 3, found: 2 }));
        assert_eq!(fit(&d, 0, 0), Err(SynthError::InvalidClusterCount));
        assert!(matches!(fit(&dataset(vec![vec![1.0; 10]]), 1, 0), Err(SynthError::ShortSeries(_))));
    }

    #[test]
    fn fit_separates_groups() {
        let d = two_groups(40, 7, 11);
        let model = fit(&d, 2, 5).unwrap();
        let [day_heavy, night_heavy] = [&model.clusters()[0], &model.clusters()[1]];
        let group_mean = |parity: usize, h: usize| {
            let (sum, n) = d
                .series()
                .iter()
                .enumerate()
                .filter(|(i, _)| i % 2 == parity)
                .flat_map(|(_, s)| s.readings().iter().filter(|r| r.hour_of_day() == h))
                .fold((0.0, 0), |(s, n), r| (s + r.energy().kwh(), n + 1));
            sum / n as f64
        };
        for h in 0..HOURS {
            assert!((night_heavy.hourly_mean[h] - group_mean(0, h)).abs() <= 0.01 * group_mean(0, h));
            assert!((day_heavy.hourly_mean[h] - group_mean(1, h)).abs() <= 0.01 * group_mean(1, h));
        }
        assert_eq!(day_heavy.weight, 0.5);
        assert_eq!(fit(&d, 2, 5).unwrap(), model);
    }

    #[test]
    fn generate_degenerate_and_deterministic() {
        let model = single_cluster(1.0, 0.0);
        let d = generate(&model, 3, 2, 1).unwrap();
        assert_eq!(d.series().len(), 3);
        assert_eq!(d.series()[0].meter_id().as_str(), "synth-000001");
        assert!(d.readings().all(|r| r.energy() == EnergyQuantity::from_milli_kwh(1000)));

        let noisy = single_cluster(1.0, 0.5).with_appliance_events(ApplianceEvents::new(3.0, 1.5, 2).unwrap());
        let a = crate::meterdata::to_csv_string(&generate(&noisy, 5, 3, 9).unwrap());
        let b = crate::meterdata::to_csv_string(&generate(&noisy, 5, 3, 9).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, crate::meterdata::to_csv_string(&generate(&noisy, 5, 3, 10).unwrap()));
    }

    #[test]
    fn appliance_events_raise_consumption() {
        let base = single_cluster(0.5, 0.0);
        let with = base.clone().with_appliance_events(ApplianceEvents::new(2.0, 1.0, 3).unwrap());
        let total = |m: &GeneratorModel| generate(m, 200, 10, 4).unwrap().readings().map(|r| r.energy().kwh()).sum::<f64>();
        // 2 events/day × 3 intervals × 1 kWh, minus a little for events running past the horizon.
        let extra_per_day = (total(&with) - total(&base)) / 2000.0;
        assert!((extra_per_day - 6.0).abs() < 0.3, "{extra_per_day}");
    }

    #[test]
    fn daily_totals_match_analytic_mean() {
        let mut c = ClusterProfile { weight: 1.0, hourly_mean: profile(0.8, 1.4), hourly_std: [0.2; HOURS] };
        c.hourly_mean[18] = 2.5;
        let expected = c.daily_mean(1.0);
        let model = GeneratorModel::new(vec![c], ApplianceEvents::NONE, HOUR, EnergyQuantity::from_milli_kwh(CAP), 0).unwrap();
        let d = generate(&model, 10_000, 1, 77).unwrap();
        let mean_total = d.series().iter().map(|s| s.energies().map(|e| e.kwh()).sum::<f64>()).sum::<f64>() / 10_000.0;
        assert!((mean_total - expected).abs() <= 0.02 * expected, "{mean_total} vs {expected}");
    }

    #[test]
    fn model_validation() {
        let c = ClusterProfile { weight: 0.7, hourly_mean: [1.0; HOURS], hourly_std: [0.0; HOURS] };
        let cap = EnergyQuantity::from_milli_kwh(CAP);
        assert!(GeneratorModel::new(vec![c.clone()], ApplianceEvents::NONE, HOUR, cap, 0).is_err());
        let mut neg = ClusterProfile { weight: 1.0, ..c };
        neg.hourly_std[3] = -0.1;
        assert!(GeneratorModel::new(vec![neg], ApplianceEvents::NONE, HOUR, cap, 0).is_err());
        assert!(GeneratorModel::new(vec![], ApplianceEvents::NONE, HOUR, cap, 0).is_err());
        assert!(ApplianceEvents::new(1.0, 0.0, 1).is_err());
        assert!(ApplianceEvents::new(1.0, 1.0, 0).is_err());
    }

    #[test]
    fn fidelity_identity_and_scaling() {
        let d = two_groups(10, 3, 2);
        let same = fidelity_report(&d, &d).unwrap();
        assert_eq!(same.per_hour_mean_rel_err, [0.0; HOURS]);
        assert_eq!(same.hist_l1, 0.0);
        assert_eq!(same.peak_dist_rel_err, 0.0);

        let halves = dataset(vec![[0.5, 1.0, 1.5, 2.0].repeat(12); 3]);
        let doubled = dataset(vec![[1.0, 2.0, 3.0, 4.0].repeat(12); 3]);
        let r = fidelity_report(&halves, &doubled).unwrap();
        assert_eq!(r.per_hour_mean_rel_err, [1.0; HOURS]);
        assert_eq!(r.peak_dist_rel_err, 1.0);
        // Values 1.0 and 2.0 occur in both, so half the mass overlaps.
        assert_eq!(r.hist_l1, 1.0);

        let empty = FeederDataset::new(vec![], HOUR, EnergyQuantity::from_milli_kwh(CAP)).unwrap();
        assert_eq!(fidelity_report(&d, &empty), Err(SynthError::EmptyDataset));
    }

    #[test]
    fn privacy_check_examples() {
        let real = two_groups(20, 2, 3);
        let model = fit(&real, 2, 1).unwrap();
        let synth = generate(&model, 20, 2, 99).unwrap();
        let clean = privacy_check(&real, &synth, DEFAULT_MEMORIZATION_THRESHOLD).unwrap();
        assert!(clean.min_nn_distance > 0.0);
        assert!(!clean.memorization_flag);
        assert!((0.0..=1.0).contains(&clean.distinguisher_auc));

        let mut leaked = synth.series().to_vec();
        leaked.push(real.series()[4].relabel(MeterId::new("synth-leak")));
        let leaked = FeederDataset::new(leaked, HOUR, real.delta_max()).unwrap();
        let report = privacy_check(&real, &leaked, DEFAULT_MEMORIZATION_THRESHOLD).unwrap();
        assert_eq!(report.min_nn_distance, 0.0);
        assert!(report.memorization_flag);
        assert!(privacy_check(&real, &leaked, 0.0).unwrap().memorization_flag);
        assert!(!privacy_check(&real, &synth, 0.0).unwrap().memorization_flag);
    }

    #[test]
    fn auc_oracle() {
        assert_eq!(mann_whitney_auc(&[1.0, 2.0], &[3.0, 4.0]), Some(1.0));
        assert_eq!(mann_whitney_auc(&[3.0, 4.0], &[1.0, 2.0]), Some(0.0));
        assert_eq!(mann_whitney_auc(&[1.0, 3.0], &[2.0, 3.0]), Some(0.625));
        assert_eq!(mann_whitney_auc(&[], &[1.0]), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn generated_data_is_valid_and_weights_sum_to_one(seed in any::<u64>(), mean in 0.0f64..6.0, std in 0.0f64..3.0) {
            let model = single_cluster(mean, std).with_appliance_events(ApplianceEvents::new(1.0, 2.0, 2).unwrap()).with_jitter(50);
            let d = generate(&model, 4, 1, seed).unwrap();
            prop_assert!(d.readings().all(|r| !r.energy().is_negative() && r.energy().milli_kwh() <= CAP));
            let fitted = fit(&d, 2, seed).unwrap();
            let total: f64 = fitted.clusters().iter().map(|c| c.weight).sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn memorization_flag_monotone_in_threshold(seed in any::<u64>(), t1 in 0.0f64..0.5, t2 in 0.0f64..0.5) {
            let real = two_groups(6, 1, seed);
            let synth = generate(&single_cluster(1.0, 0.5), 6, 1, seed).unwrap();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = privacy_check(&real, &synth, lo).unwrap();
            let b = privacy_check(&real, &synth, hi).unwrap();
            prop_assert!(!a.memorization_flag || b.memorization_flag);
        }
    }
}
