//! Client-side exposure detection.
//!
//! Downloaded keys are expanded to their RPIs. A sighting of an RPI counts
//! only if it was observed within two hours of the interval that RPI belongs
//! to. Matching sightings of one key merge into exposure windows, and windows
//! shorter than ten minutes do not contribute to the risk score.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{self, Write};

use num_traits::Zero;
use thiserror::Error;

use crate::ble::Advertisement;
use crate::crypto::{decrypt_aem, expand_tek, Aem, IntervalNumber, Rpi, TekExpansion, TemporaryExposureKey};
use crate::rational::{fixed, int, Q};
use crate::sim::CaptureRecord;

/// Allowed distance between a sighting and its RPI's interval, both ways.
pub const TOLERANCE_SECONDS: i64 = 2 * 3600;
/// Windows shorter than this score zero.
pub const MIN_WINDOW_SECONDS: i64 = 600;

/// Distance in seconds from `t` to the half-open interval window
/// `[600 j, 600 (j + 1))`; zero inside it.
pub fn distance_to_interval(interval: IntervalNumber, t: i64) -> i64 {
    if t < interval.start_unix() {
        interval.start_unix() - t
    } else if t >= interval.end_unix() {
        t - interval.end_unix()
    } else {
        0
    }
}

pub fn within_tolerance(interval: IntervalNumber, t: i64) -> bool {
    distance_to_interval(interval, t) <= TOLERANCE_SECONDS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sighting {
    pub rpi: Rpi,
    pub aem: Aem,
    pub timestamp: i64,
    pub rssi: i32,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("sighting at {got} precedes the last stored sighting at {last}")]
    OutOfOrder { last: i64, got: i64 },
}

/// A device's local record of observed advertisements.
#[derive(Debug, Clone, Default)]
pub struct SightingStore {
    records: Vec<Sighting>,
    seen: HashSet<(Rpi, i64)>,
}

impl SightingStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a sighting. Exact `(rpi, timestamp)` repeats are ignored.
    pub fn ingest(&mut self, adv: &Advertisement, timestamp: i64, rssi: i32) -> Result<bool, StoreError> {
        if self.seen.contains(&(adv.rpi, timestamp)) {
            return Ok(false);
        }
        if let Some(last) = self.records.last() {
            if timestamp < last.timestamp {
                return Err(StoreError::OutOfOrder {
                    last: last.timestamp,
                    got: timestamp,
                });
            }
        }
        self.seen.insert((adv.rpi, timestamp));
        self.records.push(Sighting {
            rpi: adv.rpi,
            aem: adv.aem,
            timestamp,
            rssi,
        });
        Ok(true)
    }

    /// Builds a store from capture-log records (any station), sorted by time.
    pub fn from_captures(records: &[CaptureRecord]) -> Self {
        let mut sorted: Vec<&CaptureRecord> = records.iter().collect();
        sorted.sort_by_key(|r| r.timestamp);
        let mut store = Self::new();
        for r in sorted {
            store
                .ingest(&Advertisement::new(r.rpi, r.aem), r.timestamp, r.rssi)
                .expect("sorted input");
        }
        store
    }

    pub fn records(&self) -> &[Sighting] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    pub merge_gap_s: i64,
    /// Total score at or above which the result is high risk.
    pub high_risk_threshold: Q,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            merge_gap_s: 600,
            high_risk_threshold: int(15),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExposureWindow {
    pub tek: TemporaryExposureKey,
    pub day: u32,
    pub first_match: i64,
    pub last_match: i64,
    pub matched_count: usize,
    pub min_rssi: i32,
    pub max_rssi: i32,
    /// Mean of decrypted tx power minus RSSI over matches whose metadata opened.
    pub mean_attenuation_db: Option<f64>,
}

impl ExposureWindow {
    pub fn duration_s(&self) -> i64 {
        self.last_match - self.first_match
    }
}

/// Exact-byte lookup from RPI to the key and interval that produce it.
#[derive(Debug, Clone, Default)]
pub struct DiagnosisIndex {
    expansions: Vec<TekExpansion>,
    by_rpi: HashMap<Rpi, (usize, IntervalNumber)>,
}

impl DiagnosisIndex {
    pub fn new(teks: &[TemporaryExposureKey]) -> Self {
        let mut index = Self::default();
        for tek in teks {
            let exp = expand_tek(tek);
            let slot = index.expansions.len();
            for (interval, rpi) in &exp.slots {
                index.by_rpi.insert(*rpi, (slot, *interval));
            }
            index.expansions.push(exp);
        }
        index
    }

    pub fn lookup(&self, rpi: &Rpi) -> Option<(&TekExpansion, IntervalNumber)> {
        self.by_rpi
            .get(rpi)
            .map(|(slot, interval)| (&self.expansions[*slot], *interval))
    }

    pub fn len(&self) -> usize {
        self.by_rpi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_rpi.is_empty()
    }
}

/// Matches the store against diagnosis keys.
pub fn match_exposures(
    store: &SightingStore,
    teks: &[TemporaryExposureKey],
    config: &MatchConfig,
) -> Vec<ExposureWindow> {
    match_with_index(store, &DiagnosisIndex::new(teks), config)
}

pub fn match_with_index(
    store: &SightingStore,
    index: &DiagnosisIndex,
    config: &MatchConfig,
) -> Vec<ExposureWindow> {
    // per key slot, time-ordered matching sightings with attenuation
    let mut per_key: BTreeMap<usize, Vec<(&Sighting, Option<i32>)>> = BTreeMap::new();
    for s in store.records() {
        let Some(&(slot, interval)) = index.by_rpi.get(&s.rpi) else {
            continue;
        };
        if !within_tolerance(interval, s.timestamp) {
            continue;
        }
        let exp = &index.expansions[slot];
        let attenuation = decrypt_aem(&exp.aemk, &s.rpi, &s.aem)
            .ok()
            .map(|m| i32::from(m.tx_power()) - s.rssi);
        per_key.entry(slot).or_default().push((s, attenuation));
    }

    let mut windows = Vec::new();
    for (slot, mut hits) in per_key {
        hits.sort_by_key(|(s, _)| s.timestamp);
        let tek = index.expansions[slot].tek;
        let mut current: Option<(ExposureWindow, Vec<i32>)> = None;
        for (s, att) in hits {
            match current.as_mut() {
                Some((w, atts)) if s.timestamp - w.last_match <= config.merge_gap_s => {
                    w.last_match = s.timestamp;
                    w.matched_count += 1;
                    w.min_rssi = w.min_rssi.min(s.rssi);
                    w.max_rssi = w.max_rssi.max(s.rssi);
                    atts.extend(att);
                }
                _ => {
                    if let Some(done) = current.take() {
                        windows.push(finish(done));
                    }
                    current = Some((
                        ExposureWindow {
                            tek,
                            day: tek.day(),
                            first_match: s.timestamp,
                            last_match: s.timestamp,
                            matched_count: 1,
                            min_rssi: s.rssi,
                            max_rssi: s.rssi,
                            mean_attenuation_db: None,
                        },
                        att.into_iter().collect(),
                    ));
                }
            }
        }
        if let Some(done) = current {
            windows.push(finish(done));
        }
    }
    windows.sort_by_key(|w| (w.first_match, w.tek.key));
    windows
}

fn finish((mut w, atts): (ExposureWindow, Vec<i32>)) -> ExposureWindow {
    if !atts.is_empty() {
        w.mean_attenuation_db = Some(atts.iter().map(|a| f64::from(*a)).sum::<f64>() / atts.len() as f64);
    }
    w
}

/// Weight of a transmission risk level; level 0 ("unknown") counts as the
/// lowest risk, equal to level 1.
pub fn risk_weight(level: u8) -> Q {
    int(i128::from(level.max(1)))
}

/// Contribution of a single window: zero below ten minutes, otherwise
/// duration in minutes times the key's risk weight.
pub fn window_score(w: &ExposureWindow) -> Q {
    if w.duration_s() < MIN_WINDOW_SECONDS {
        return Q::zero();
    }
    Q::new(i128::from(w.duration_s()), 60) * risk_weight(w.tek.transmission_risk_level)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskResult {
    pub windows: Vec<ExposureWindow>,
    pub score: Q,
    pub high_risk: bool,
}

pub fn score(windows: Vec<ExposureWindow>, config: &MatchConfig) -> RiskResult {
    let score = windows.iter().map(window_score).fold(Q::zero(), |a, b| a + b);
    RiskResult {
        high_risk: !score.is_zero() && score >= config.high_risk_threshold,
        windows,
        score,
    }
}

/// `tek_hex,day,first,last,count,duration_s,score`
pub fn write_windows_csv<W: Write>(mut out: W, windows: &[ExposureWindow]) -> io::Result<()> {
    writeln!(out, "tek_hex,day,first,last,count,duration_s,score")?;
    for w in windows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            w.tek.key,
            w.day,
            w.first_match,
            w.last_match,
            w.matched_count,
            w.duration_s(),
            fixed(&window_score(w), 2)
        )?;
    }
    out.flush()
}
