//! De-identification primitives: rotating keyed pseudonyms, value
//! generalization, minimum-count aggregation and k-anonymity checking.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use crate::meterdata::{EnergyQuantity, CSV_HEADER};

type HmacSha256 = Hmac<Sha256>;

/// Pseudonyms are the first 16 bytes of the PRF output, hex encoded.
pub const PSEUDONYM_BYTES: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnonymizeError {
    #[error("identifier is empty")]
    EmptyIdentifier,
    #[error("generalization step must be positive")]
    InvalidGranularity,
    #[error("min_count must be at least 1")]
    InvalidMinCount,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("record {index} has {found} attributes, expected {expected}")]
    ArityMismatch { index: usize, expected: usize, found: usize },
    #[error("key must be exactly 32 bytes, got {0}")]
    BadKeyLength(usize),
    #[error("csv: {0}")]
    Csv(String),
}

/// Secret for pseudonym derivation plus the rotation epoch it is used in.
///
/// Deliberately neither `Serialize` nor `Display`; `Debug` redacts the secret.
#[derive(Clone)]
pub struct PseudonymKey {
    secret: [u8; 32],
    epoch: u64,
}

impl PseudonymKey {
    pub fn new(secret: [u8; 32], epoch: u64) -> Self {
        PseudonymKey { secret, epoch }
    }

    /// Reads a key from raw bytes as stored in a key file.
    pub fn from_bytes(bytes: &[u8], epoch: u64) -> Result<Self, AnonymizeError> {
        let secret: [u8; 32] =
            bytes.try_into().map_err(|_| AnonymizeError::BadKeyLength(bytes.len()))?;
        Ok(PseudonymKey { secret, epoch })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn with_epoch(&self, epoch: u64) -> Self {
        PseudonymKey { secret: self.secret, epoch }
    }
}

impl fmt::Debug for PseudonymKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PseudonymKey")
            .field("secret", &"<redacted>")
            .field("epoch", &self.epoch)
            .finish()
    }
}

/// HMAC-SHA256 over `epoch (8 bytes, big endian) ‖ real_id`, truncated to
/// 128 bits and hex encoded.
pub fn pseudonymize(real_id: &str, key: &PseudonymKey) -> Result<String, AnonymizeError> {
    if real_id.is_empty() {
        return Err(AnonymizeError::EmptyIdentifier);
    }
    let mut mac = HmacSha256::new_from_slice(&key.secret).expect("hmac accepts any key length");
    mac.update(&key.epoch.to_be_bytes());
    mac.update(real_id.as_bytes());
    let tag = mac.finalize().into_bytes();
    Ok(hex::encode(&tag[..PSEUDONYM_BYTES]))
}

/// Rewrites the `meter_id` column of a meter CSV with pseudonyms.
///
/// Other columns are copied verbatim. Returns the number of rows written.
pub fn pseudonymize_csv<R: Read, W: Write>(
    input: R,
    output: W,
    key: &PseudonymKey,
) -> Result<usize, AnonymizeError> {
    let csv_err = |e: csv::Error| AnonymizeError::Csv(e.to_string());
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut writer = csv::Writer::from_writer(output);
    writer.write_record(CSV_HEADER).map_err(csv_err)?;
    let mut rows = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if i == 0 && rec.iter().eq(CSV_HEADER.iter().copied()) {
            continue;
        }
        if rec.len() != CSV_HEADER.len() {
            return Err(AnonymizeError::Csv(format!(
                "row {} has {} fields",
                i + 1,
                rec.len()
            )));
        }
        let pseudonym = pseudonymize(rec[0].trim(), key)?;
        writer.write_record([pseudonym.as_str(), &rec[1], &rec[2]]).map_err(csv_err)?;
        rows += 1;
    }
    writer.flush().map_err(|e| AnonymizeError::Csv(e.to_string()))?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneralizationRule {
    energy_granularity: EnergyQuantity,
    zip_prefix_len: usize,
}

impl GeneralizationRule {
    pub fn new(energy_granularity: EnergyQuantity, zip_prefix_len: usize) -> Result<Self, AnonymizeError> {
        if energy_granularity.milli_kwh() <= 0 {
            return Err(AnonymizeError::InvalidGranularity);
        }
        Ok(GeneralizationRule { energy_granularity, zip_prefix_len })
    }

    pub fn energy_granularity(&self) -> EnergyQuantity {
        self.energy_granularity
    }

    pub fn zip_prefix_len(&self) -> usize {
        self.zip_prefix_len
    }
}

/// Rounds to the nearest multiple of the rule's step, ties away from zero.
pub fn generalize(energy: EnergyQuantity, rule: &GeneralizationRule) -> EnergyQuantity {
    let step = rule.energy_granularity.milli_kwh();
    let value = energy.milli_kwh();
    let q = value / step;
    let rem = value % step;
    // |rem| * 2 >= step means at or past the midpoint.
    let q = if rem.unsigned_abs() * 2 >= step as u64 { q + value.signum() } else { q };
    EnergyQuantity::from_milli_kwh(q * step)
}

/// Keeps the first `zip_prefix_len` characters and masks the rest with `*`.
pub fn generalize_zip(zip: &str, rule: &GeneralizationRule) -> String {
    zip.chars()
        .enumerate()
        .map(|(i, c)| if i < rule.zip_prefix_len { c } else { '*' })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationPolicy {
    min_count: usize,
}

impl AggregationPolicy {
    pub fn new(min_count: usize) -> Result<Self, AnonymizeError> {
        if min_count == 0 {
            return Err(AnonymizeError::InvalidMinCount);
        }
        Ok(AggregationPolicy { min_count })
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }
}

/// Outcome for one group under a minimum-count policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GroupOutcome {
    Aggregate { count: usize, sum: EnergyQuantity, mean_kwh: f64 },
    Suppressed,
}

impl GroupOutcome {
    pub fn is_suppressed(&self) -> bool {
        matches!(self, GroupOutcome::Suppressed)
    }
}

/// Aggregates every group with at least `min_count` members and marks the
/// rest as suppressed. Every input key appears in the output.
pub fn aggregate_threshold<K: Ord + Clone>(
    groups: &BTreeMap<K, Vec<EnergyQuantity>>,
    policy: &AggregationPolicy,
) -> BTreeMap<K, GroupOutcome> {
    groups
        .iter()
        .map(|(key, members)| {
            let outcome = if members.len() >= policy.min_count {
                let sum: EnergyQuantity = members.iter().sum();
                GroupOutcome::Aggregate {
                    count: members.len(),
                    sum,
                    mean_kwh: sum.kwh() / members.len() as f64,
                }
            } else {
                GroupOutcome::Suppressed
            };
            (key.clone(), outcome)
        })
        .collect()
}

/// Categorical quasi-identifier tuple, e.g. (coarsened zip, customer class).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QuasiIdentifierRecord {
    pub attributes: Vec<String>,
}

impl QuasiIdentifierRecord {
    pub fn new<I, S>(attributes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        QuasiIdentifierRecord { attributes: attributes.into_iter().map(Into::into).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KAnonymityReport {
    pub pass: bool,
    /// Equivalence classes smaller than k, with their sizes, in attribute order.
    pub violating_classes: Vec<(Vec<String>, usize)>,
}

pub fn check_k_anonymity(
    records: &[QuasiIdentifierRecord],
    k: usize,
) -> Result<KAnonymityReport, AnonymizeError> {
    if k == 0 {
        return Err(AnonymizeError::InvalidK);
    }
    if let Some(first) = records.first() {
        let expected = first.attributes.len();
        if let Some((index, r)) = records.iter().enumerate().find(|(_, r)| r.attributes.len() != expected) {
            return Err(AnonymizeError::ArityMismatch { index, expected, found: r.attributes.len() });
        }
    }
    let mut classes: BTreeMap<&[String], usize> = BTreeMap::new();
    for r in records {
        *classes.entry(r.attributes.as_slice()).or_default() += 1;
    }
    let violating_classes: Vec<_> = classes
        .into_iter()
        .filter(|&(_, size)| size < k)
        .map(|(attrs, size)| (attrs.to_vec(), size))
        .collect();
    Ok(KAnonymityReport { pass: violating_classes.is_empty(), violating_classes })
}
