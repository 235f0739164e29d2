//! Interval meter readings in fixed-point milli-kWh.
//!
//! Every other module treats the types here as ground truth: exact integer
//! energies, UTC epoch-second timestamps aligned to the dataset interval, and
//! a per-reading cap that doubles as the sensitivity bound for DP queries.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Sub};
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fixed-point milli-kWh per kWh.
pub const MILLI_PER_KWH: i64 = 1000;

/// CSV header expected on meter data files.
pub const CSV_HEADER: [&str; 3] = ["meter_id", "timestamp", "kwh"];

const SECONDS_PER_HOUR: i64 = 3600;
const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MeterDataError {
    #[error("malformed row at line {line}: {detail}")]
    MalformedRow { line: u64, detail: String },
    #[error("negative energy at line {line}")]
    NegativeEnergy { line: u64 },
    #[error("timestamp at line {line} is not a multiple of the interval")]
    MisalignedTimestamp { line: u64 },
    #[error("reading at line {line} exceeds the per-reading cap")]
    ExceedsCap { line: u64 },
    #[error("meter {meter_id} has two readings at timestamp {timestamp}")]
    DuplicateTimestamp { meter_id: String, timestamp: i64 },
    #[error("meter {meter_id} does not share the dataset interval")]
    MixedInterval { meter_id: String },
    #[error("series for meter {meter_id} is not strictly increasing")]
    Unordered { meter_id: String },
    #[error("invalid reading: {0}")]
    InvalidReading(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("csv i/o: {0}")]
    Io(String),
}

/// Energy in integer milli-kWh.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct EnergyQuantity(i64);

impl EnergyQuantity {
    pub const ZERO: EnergyQuantity = EnergyQuantity(0);

    pub const fn from_milli_kwh(milli_kwh: i64) -> Self {
        EnergyQuantity(milli_kwh)
    }

    pub const fn milli_kwh(self) -> i64 {
        self.0
    }

    /// Nearest milli-kWh to a real kWh value (half away from zero).
    pub fn from_kwh_f64(kwh: f64) -> Self {
        EnergyQuantity((kwh * MILLI_PER_KWH as f64).round() as i64)
    }

    pub fn kwh(self) -> f64 {
        self.0 as f64 / MILLI_PER_KWH as f64
    }

    pub fn is_negative(self) -> bool {
        self.0 < 0
    }

    pub fn checked_add(self, rhs: Self) -> Option<Self> {
        self.0.checked_add(rhs.0).map(EnergyQuantity)
    }
}

impl Add for EnergyQuantity {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        EnergyQuantity(self.0 + rhs.0)
    }
}

impl AddAssign for EnergyQuantity {
    fn add_assign(&mut self, rhs: Self) {
        self.0 += rhs.0;
    }
}

impl Sub for EnergyQuantity {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        EnergyQuantity(self.0 - rhs.0)
    }
}

impl Sum for EnergyQuantity {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(EnergyQuantity::ZERO, Add::add)
    }
}

impl<'a> Sum<&'a EnergyQuantity> for EnergyQuantity {
    fn sum<I: Iterator<Item = &'a Self>>(iter: I) -> Self {
        iter.copied().sum()
    }
}

impl fmt::Display for EnergyQuantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        let per = MILLI_PER_KWH as u64;
        write!(f, "{sign}{}.{:03}", abs / per, abs % per)
    }
}

/// Parses a decimal kWh string with at most three fractional digits, exactly.
impl FromStr for EnergyQuantity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (negative, body) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s.strip_prefix('+').unwrap_or(s)),
        };
        let (int_part, frac_part) = match body.split_once('.') {
            Some((i, f)) => (i, f),
            None => (body, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(format!("empty energy value {s:?}"));
        }
        if frac_part.len() > 3 {
            return Err(format!("more than 3 fractional digits in {s:?}"));
        }
        let digits_ok = |p: &str| p.bytes().all(|b| b.is_ascii_digit());
        if !digits_ok(int_part) || !digits_ok(frac_part) {
            return Err(format!("not a decimal number: {s:?}"));
        }
        let whole: i64 = if int_part.is_empty() {
            0
        } else {
            int_part.parse().map_err(|_| format!("out of range: {s:?}"))?
        };
        let mut frac: i64 = 0;
        for (i, b) in frac_part.bytes().enumerate() {
            frac += i64::from(b - b'0') * 10_i64.pow(2 - i as u32);
        }
        let magnitude = whole
            .checked_mul(MILLI_PER_KWH)
            .and_then(|w| w.checked_add(frac))
            .ok_or_else(|| format!("out of range: {s:?}"))?;
        Ok(EnergyQuantity(if negative { -magnitude } else { magnitude }))
    }
}

/// Opaque (already pseudonymous) meter identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MeterId(String);

impl MeterId {
    pub fn new(id: impl Into<String>) -> Self {
        MeterId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for MeterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for MeterId {
    fn from(s: &str) -> Self {
        MeterId(s.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeterReading {
    meter_id: MeterId,
    timestamp: i64,
    interval_s: u32,
    energy: EnergyQuantity,
}

impl MeterReading {
    pub fn new(
        meter_id: MeterId,
        timestamp: i64,
        interval_s: u32,
        energy: EnergyQuantity,
    ) -> Result<Self, MeterDataError> {
        if interval_s == 0 {
            return Err(MeterDataError::InvalidReading("interval must be positive".into()));
        }
        if energy.is_negative() {
            return Err(MeterDataError::InvalidReading(format!(
                "negative energy {energy} for {meter_id}"
            )));
        }
        if timestamp.rem_euclid(i64::from(interval_s)) != 0 {
            return Err(MeterDataError::InvalidReading(format!(
                "timestamp {timestamp} not aligned to {interval_s}s"
            )));
        }
        Ok(MeterReading { meter_id, timestamp, interval_s, energy })
    }

    pub fn meter_id(&self) -> &MeterId {
        &self.meter_id
    }

    pub fn timestamp(&self) -> i64 {
        self.timestamp
    }

    pub fn interval_s(&self) -> u32 {
        self.interval_s
    }

    pub fn energy(&self) -> EnergyQuantity {
        self.energy
    }

    pub fn hour_of_day(&self) -> usize {
        hour_of_day(self.timestamp)
    }
}

/// Hour of the (UTC) day, 0..24.
pub fn hour_of_day(timestamp: i64) -> usize {
    (timestamp.rem_euclid(SECONDS_PER_DAY) / SECONDS_PER_HOUR) as usize
}

/// Day index since the epoch.
pub fn day_index(timestamp: i64) -> i64 {
    timestamp.div_euclid(SECONDS_PER_DAY)
}

/// All readings of one meter, strictly increasing in time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadingSeries {
    meter_id: MeterId,
    readings: Vec<MeterReading>,
}

impl ReadingSeries {
    pub fn new(meter_id: MeterId, readings: Vec<MeterReading>) -> Result<Self, MeterDataError> {
        if let Some(first) = readings.first() {
            let interval = first.interval_s;
            for r in &readings {
                if r.meter_id != meter_id {
                    return Err(MeterDataError::InvalidReading(format!(
                        "reading for {} placed in series {meter_id}",
                        r.meter_id
                    )));
                }
                if r.interval_s != interval {
                    return Err(MeterDataError::MixedInterval { meter_id: meter_id.0.clone() });
                }
            }
            for pair in readings.windows(2) {
                if pair[1].timestamp <= pair[0].timestamp {
                    return Err(MeterDataError::Unordered { meter_id: meter_id.0.clone() });
                }
            }
        }
        Ok(ReadingSeries { meter_id, readings })
    }

    /// Builds a series from energies at consecutive intervals starting at `start`.
    pub fn from_energies(
        meter_id: MeterId,
        start: i64,
        interval_s: u32,
        energies: impl IntoIterator<Item = EnergyQuantity>,
    ) -> Result<Self, MeterDataError> {
        let readings = energies
            .into_iter()
            .enumerate()
            .map(|(i, e)| {
                MeterReading::new(meter_id.clone(), start + i as i64 * i64::from(interval_s), interval_s, e)
            })
            .collect::<Result<Vec<_>, _>>()?;
        ReadingSeries::new(meter_id, readings)
    }

    pub fn meter_id(&self) -> &MeterId {
        &self.meter_id
    }

    pub fn readings(&self) -> &[MeterReading] {
        &self.readings
    }

    pub fn len(&self) -> usize {
        self.readings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.readings.is_empty()
    }

    pub fn interval_s(&self) -> Option<u32> {
        self.readings.first().map(|r| r.interval_s)
    }

    pub fn energies(&self) -> impl Iterator<Item = EnergyQuantity> + '_ {
        self.readings.iter().map(|r| r.energy)
    }

    /// Same readings under a different meter id.
    pub fn relabel(&self, meter_id: MeterId) -> ReadingSeries {
        let readings = self
            .readings
            .iter()
            .map(|r| MeterReading { meter_id: meter_id.clone(), ..r.clone() })
            .collect();
        ReadingSeries { meter_id, readings }
    }
}

/// Interval length and per-reading cap for ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub interval_s: u32,
    pub delta_max: EnergyQuantity,
}

impl IngestConfig {
    pub fn new(interval_s: u32, delta_max: EnergyQuantity) -> Result<Self, MeterDataError> {
        if interval_s == 0 {
            return Err(MeterDataError::InvalidConfig("interval_s must be positive".into()));
        }
        if delta_max.milli_kwh() <= 0 {
            return Err(MeterDataError::InvalidConfig("delta_max must be positive".into()));
        }
        Ok(IngestConfig { interval_s, delta_max })
    }
}

/// A feeder's worth of meter series sharing one interval and one reading cap.
///
/// Series are kept sorted by meter id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeederDataset {
    series: Vec<ReadingSeries>,
    interval_s: u32,
    delta_max: EnergyQuantity,
}

impl FeederDataset {
    pub fn new(
        mut series: Vec<ReadingSeries>,
        interval_s: u32,
        delta_max: EnergyQuantity,
    ) -> Result<Self, MeterDataError> {
        IngestConfig::new(interval_s, delta_max)?;
        series.sort_by(|a, b| a.meter_id.cmp(&b.meter_id));
        for pair in series.windows(2) {
            if pair[0].meter_id == pair[1].meter_id {
                return Err(MeterDataError::InvalidReading(format!(
                    "meter {} appears in two series",
                    pair[0].meter_id
                )));
            }
        }
        for s in &series {
            if s.interval_s().is_some_and(|i| i != interval_s) {
                return Err(MeterDataError::MixedInterval { meter_id: s.meter_id.0.clone() });
            }
            if s.readings.iter().any(|r| r.energy > delta_max) {
                return Err(MeterDataError::InvalidReading(format!(
                    "meter {} has a reading above the cap {delta_max}",
                    s.meter_id
                )));
            }
        }
        Ok(FeederDataset { series, interval_s, delta_max })
    }

    pub fn empty(config: IngestConfig) -> Self {
        FeederDataset { series: Vec::new(), interval_s: config.interval_s, delta_max: config.delta_max }
    }

    pub fn series(&self) -> &[ReadingSeries] {
        &self.series
    }

    pub fn into_series(self) -> Vec<ReadingSeries> {
        self.series
    }

    pub fn interval_s(&self) -> u32 {
        self.interval_s
    }

    pub fn delta_max(&self) -> EnergyQuantity {
        self.delta_max
    }

    pub fn config(&self) -> IngestConfig {
        IngestConfig { interval_s: self.interval_s, delta_max: self.delta_max }
    }

    pub fn readings(&self) -> impl Iterator<Item = &MeterReading> {
        self.series.iter().flat_map(|s| s.readings.iter())
    }

    pub fn reading_count(&self) -> usize {
        self.series.iter().map(ReadingSeries::len).sum()
    }

    pub fn find(&self, meter_id: &MeterId) -> Option<&ReadingSeries> {
        self.series
            .binary_search_by(|s| s.meter_id.cmp(meter_id))
            .ok()
            .map(|i| &self.series[i])
    }

    /// Readings at exactly `timestamp`, one per meter that has one.
    pub fn readings_at(&self, timestamp: i64) -> impl Iterator<Item = &MeterReading> {
        self.series.iter().filter_map(move |s| {
            s.readings
                .binary_search_by_key(&timestamp, |r| r.timestamp)
                .ok()
                .map(|i| &s.readings[i])
        })
    }
}

/// Parses a UTC timestamp with a `Z` suffix into epoch seconds.
pub fn parse_timestamp(raw: &str) -> Option<i64> {
    let raw = raw.trim();
    if !raw.ends_with('Z') {
        return None;
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.timestamp());
    }
    // Minute precision without seconds, e.g. 2021-07-01T00:15Z.
    NaiveDateTime::parse_from_str(raw, "%Y-%m-%dT%H:%MZ")
        .ok()
        .map(|n| n.and_utc().timestamp())
}

pub fn format_timestamp(timestamp: i64) -> String {
    DateTime::<Utc>::from_timestamp(timestamp, 0)
        .map(|dt| dt.format("%Y-%m-%dT%H:%M:%SZ").to_string())
        .unwrap_or_else(|| timestamp.to_string())
}

/// Parses `meter_id,timestamp,kwh` CSV into a dataset.
///
/// The header row is skipped when present. Rows may appear in any order; each
/// meter's readings are sorted by time. Readings above `config.delta_max` are
/// rejected, never clipped.
pub fn parse_csv<R: Read>(input: R, config: &IngestConfig) -> Result<FeederDataset, MeterDataError> {
    IngestConfig::new(config.interval_s, config.delta_max)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);

    let interval = i64::from(config.interval_s);
    let mut by_meter: BTreeMap<MeterId, Vec<MeterReading>> = BTreeMap::new();
    let mut record = csv::StringRecord::new();
    let mut first = true;
    loop {
        let more = reader
            .read_record(&mut record)
            .map_err(|e| MeterDataError::Io(e.to_string()))?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line());
        if first {
            first = false;
            if record.iter().eq(CSV_HEADER.iter().copied()) {
                continue;
            }
        }
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != 3 {
            return Err(MeterDataError::MalformedRow {
                line,
                detail: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let meter = &record[0];
        if meter.is_empty() {
            return Err(MeterDataError::MalformedRow { line, detail: "empty meter_id".into() });
        }
        let timestamp = parse_timestamp(&record[1]).ok_or_else(|| MeterDataError::MalformedRow {
            line,
            detail: format!("bad timestamp {:?}", &record[1]),
        })?;
        let energy: EnergyQuantity = record[2]
            .parse()
            .map_err(|detail| MeterDataError::MalformedRow { line, detail })?;
        if energy.is_negative() {
            return Err(MeterDataError::NegativeEnergy { line });
        }
        if timestamp.rem_euclid(interval) != 0 {
            return Err(MeterDataError::MisalignedTimestamp { line });
        }
        if energy > config.delta_max {
            return Err(MeterDataError::ExceedsCap { line });
        }
        let meter_id = MeterId::new(meter);
        by_meter.entry(meter_id.clone()).or_default().push(MeterReading {
            meter_id,
            timestamp,
            interval_s: config.interval_s,
            energy,
        });
    }

    let mut series = Vec::with_capacity(by_meter.len());
    for (meter_id, mut readings) in by_meter {
        readings.sort_by_key(|r| r.timestamp);
        if let Some(dup) = readings.windows(2).find(|w| w[0].timestamp == w[1].timestamp) {
            return Err(MeterDataError::DuplicateTimestamp {
                meter_id: meter_id.0,
                timestamp: dup[0].timestamp,
            });
        }
        series.push(ReadingSeries { meter_id, readings });
    }
    Ok(FeederDataset { series, interval_s: config.interval_s, delta_max: config.delta_max })
}

/// Writes a dataset in the same CSV schema `parse_csv` reads.
pub fn write_csv<W: Write>(dataset: &FeederDataset, output: W) -> Result<(), MeterDataError> {
    let mut writer = csv::Writer::from_writer(output);
    let io = |e: csv::Error| MeterDataError::Io(e.to_string());
    writer.write_record(CSV_HEADER).map_err(io)?;
    for r in dataset.readings() {
        writer
            .write_record([r.meter_id.as_str(), &format_timestamp(r.timestamp), &r.energy.to_string()])
            .map_err(io)?;
    }
    writer.flush().map_err(|e| MeterDataError::Io(e.to_string()))?;
    Ok(())
}

pub fn to_csv_string(dataset: &FeederDataset) -> String {
    let mut buf = Vec::new();
    write_csv(dataset, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("csv output is utf-8")
}

/// Exact per-timestamp totals across every series with a reading there.
pub fn interval_totals(dataset: &FeederDataset) -> BTreeMap<i64, EnergyQuantity> {
    let mut totals: BTreeMap<i64, EnergyQuantity> = BTreeMap::new();
    for r in dataset.readings() {
        *totals.entry(r.timestamp).or_default() += r.energy;
    }
    totals
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> IngestConfig {
        IngestConfig::new(900, EnergyQuantity::from_milli_kwh(5000)).unwrap()
    }

    #[test]
    fn parses_two_rows_without_header() {
        let text = "m1,2021-07-01T00:00:00Z,1.500\nm1,2021-07-01T00:15:00Z,2.000";
        let d = parse_csv(text.as_bytes(), &cfg()).unwrap();
        assert_eq!(d.series().len(), 1);
        let e: Vec<i64> = d.series()[0].energies().map(EnergyQuantity::milli_kwh).collect();
        assert_eq!(e, vec![1500, 2000]);
    }

    #[test]
    fn header_is_skipped_and_rows_sorted() {
        let text = "meter_id,timestamp,kwh\nb,2021-07-01T00:15:00Z,1\nb,2021-07-01T00:00:00Z,2\na,2021-07-01T00:00:00Z,0.25\n";
        let d = parse_csv(text.as_bytes(), &cfg()).unwrap();
        assert_eq!(d.series().len(), 2);
        assert_eq!(d.series()[0].meter_id().as_str(), "a");
        let b = &d.series()[1];
        assert!(b.readings()[0].timestamp() < b.readings()[1].timestamp());
        assert_eq!(b.readings()[0].energy().milli_kwh(), 2000);
    }

    #[test]
    fn empty_input_is_empty_dataset() {
        let d = parse_csv("".as_bytes(), &cfg()).unwrap();
        assert!(d.series().is_empty());
        let d = parse_csv("meter_id,timestamp,kwh\n".as_bytes(), &cfg()).unwrap();
        assert_eq!(d.reading_count(), 0);
    }

    #[test]
    fn row_errors_carry_line_numbers() {
        let neg = "meter_id,timestamp,kwh\nm1,2021-07-01T00:00:00Z,-0.5";
        assert_eq!(parse_csv(neg.as_bytes(), &cfg()), Err(MeterDataError::NegativeEnergy { line: 2 }));

        let misaligned = "m1,2021-07-01T00:07:00Z,1.0";
        assert_eq!(
            parse_csv(misaligned.as_bytes(), &cfg()),
            Err(MeterDataError::MisalignedTimestamp { line: 1 })
        );

        let over = "m1,2021-07-01T00:00:00Z,5.001";
        assert_eq!(parse_csv(over.as_bytes(), &cfg()), Err(MeterDataError::ExceedsCap { line: 1 }));

        for bad in [
            "m1,2021-07-01T00:00:00Z",
            "m1,2021-07-01 00:00:00,1.0",
            "m1,2021-07-01T00:00:00+01:00,1.0",
            "m1,2021-07-01T00:00:00Z,1.2345",
            "m1,2021-07-01T00:00:00Z,abc",
            ",2021-07-01T00:00:00Z,1.0",
        ] {
            assert!(
                matches!(parse_csv(bad.as_bytes(), &cfg()), Err(MeterDataError::MalformedRow { line: 1, .. })),
                "{bad}"
            );
        }
    }

    #[test]
    fn duplicate_timestamp_rejected() {
        let text = "m1,2021-07-01T00:00:00Z,1\nm1,2021-07-01T00:00:00Z,2";
        assert!(matches!(
            parse_csv(text.as_bytes(), &cfg()),
            Err(MeterDataError::DuplicateTimestamp { .. })
        ));
    }

    #[test]
    fn mixed_interval_rejected_when_assembling() {
        let a = ReadingSeries::from_energies("a".into(), 0, 900, [EnergyQuantity::ZERO]).unwrap();
        let b = ReadingSeries::from_energies("b".into(), 0, 3600, [EnergyQuantity::ZERO]).unwrap();
        assert_eq!(
            FeederDataset::new(vec![a, b], 900, EnergyQuantity::from_milli_kwh(5000)),
            Err(MeterDataError::MixedInterval { meter_id: "b".into() })
        );
    }

    #[test]
    fn energy_decimal_round_trip() {
        for (s, milli) in [("1.5", 1500), ("0.001", 1), ("2", 2000), (".25", 250), ("-0.5", -500), ("12.340", 12340)] {
            let e: EnergyQuantity = s.parse().unwrap();
            assert_eq!(e.milli_kwh(), milli, "{s}");
            assert_eq!(e.to_string().parse::<EnergyQuantity>().unwrap(), e);
        }
        assert_eq!(EnergyQuantity::from_milli_kwh(-1).to_string(), "-0.001");
        let big = EnergyQuantity::from_milli_kwh(1 << 62);
        assert_eq!(big.to_string().parse::<EnergyQuantity>().unwrap(), big);
    }

    #[test]
    fn totals_sum_per_timestamp() {
        let text = "a,2021-07-01T00:00:00Z,2.0\nb,2021-07-01T00:00:00Z,3.0\nb,2021-07-01T00:15:00Z,1.0";
        let d = parse_csv(text.as_bytes(), &cfg()).unwrap();
        let totals = interval_totals(&d);
        let t0 = 1_625_097_600;
        assert_eq!(totals[&t0].milli_kwh(), 5000);
        assert_eq!(totals[&(t0 + 900)].milli_kwh(), 1000);
    }

    #[test]
    fn single_meter_totals_equal_series() {
        let s = ReadingSeries::from_energies(
            "only".into(),
            0,
            900,
            [1200, 0, 4999].map(EnergyQuantity::from_milli_kwh),
        )
        .unwrap();
        let d = FeederDataset::new(vec![s.clone()], 900, EnergyQuantity::from_milli_kwh(5000)).unwrap();
        let totals: Vec<_> = interval_totals(&d).into_values().collect();
        assert_eq!(totals, s.energies().collect::<Vec<_>>());
    }

    #[test]
    fn worst_case_feeder_total_fits() {
        // 10^6 meters at the 5 kWh cap.
        let per = EnergyQuantity::from_milli_kwh(5000);
        let total = (0..1_000_000).try_fold(EnergyQuantity::ZERO, |acc, _| acc.checked_add(per));
        assert_eq!(total, Some(EnergyQuantity::from_milli_kwh(5_000_000_000)));
    }
}
