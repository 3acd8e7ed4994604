//! Attacker-side analytics over published diagnosis keys and sniffer logs.
//!
//! Diagnosis keys are public, so anyone can expand them into every RPI the
//! diagnosed device sent and look those up in captures from their own
//! stations. A subject is one key-day: the profiler only links days through
//! route similarity.

mod report;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use chrono::DateTime;
use thiserror::Error;

use crate::crypto::{expand_tek, IntervalNumber, KeyMaterial, Rpi, TemporaryExposureKey};
use crate::matcher::within_tolerance;
use crate::sim::{read_capture_dir, CaptureParseError, CaptureRecord};

pub use report::{emit_report, REPORT_FILES};

pub const DEFAULT_MERGE_GAP_S: i64 = 600;
pub const DEFAULT_MIN_OVERLAP_S: i64 = 60;
pub const DEFAULT_LINK_THRESHOLD: f64 = 0.5;
/// Time-of-day difference at which two visits stop counting as similar.
pub const TIME_OF_DAY_SCALE_S: i64 = 4 * 3600;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("RPI {rpi} is produced by two different keys")]
    Collision { rpi: Rpi },
    #[error(transparent)]
    Capture(#[from] CaptureParseError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A diagnosed device on one day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Subject {
    pub day: u32,
    pub key: KeyMaterial,
}

impl Subject {
    pub fn of(tek: &TemporaryExposureKey) -> Self {
        Self {
            day: tek.day(),
            key: tek.key,
        }
    }

    pub fn day_start_unix(&self) -> i64 {
        i64::from(self.day) * 86_400
    }
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let date = DateTime::from_timestamp(self.day_start_unix(), 0)
            .map(|d| d.format("%Y-%m-%d").to_string())
            .unwrap_or_else(|| self.day.to_string());
        write!(f, "{}@{date}", &self.key.to_hex()[..8])
    }
}

/// Exact-byte lookup from every published RPI to its key and interval.
#[derive(Debug, Clone, Default)]
pub struct RpiIndex {
    entries: HashMap<Rpi, (Subject, IntervalNumber)>,
}

impl RpiIndex {
    pub fn lookup(&self, rpi: &Rpi) -> Option<(Subject, IntervalNumber)> {
        self.entries.get(rpi).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Expands every key. The same key uploaded twice is indexed once; two
/// different keys yielding one RPI is an error.
pub fn build_index(teks: &[TemporaryExposureKey]) -> Result<RpiIndex, ProfileError> {
    let mut unique: Vec<TemporaryExposureKey> = teks.to_vec();
    unique.sort_by_key(|t| (t.rolling_start, t.key));
    unique.dedup_by_key(|t| (t.rolling_start, t.key));
    let mut index = RpiIndex::default();
    for tek in &unique {
        let subject = Subject::of(tek);
        for (interval, rpi) in expand_tek(tek).slots {
            if index.entries.insert(rpi, (subject, interval)).is_some() {
                return Err(ProfileError::Collision { rpi });
            }
        }
    }
    Ok(index)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributedSighting {
    pub subject: Subject,
    pub station_id: String,
    pub timestamp: i64,
    pub interval: IntervalNumber,
    pub rssi: i32,
}

/// Attributes every record whose RPI is published and whose timestamp lies
/// within the matching tolerance of the RPI's interval. Output is ordered by
/// `(subject, timestamp, station)`.
pub fn match_logs(index: &RpiIndex, records: &[CaptureRecord]) -> Vec<AttributedSighting> {
    let mut out: Vec<AttributedSighting> = records
        .iter()
        .filter_map(|r| {
            let (subject, interval) = index.lookup(&r.rpi)?;
            within_tolerance(interval, r.timestamp).then(|| AttributedSighting {
                subject,
                station_id: r.station_id.clone(),
                timestamp: r.timestamp,
                interval,
                rssi: r.rssi,
            })
        })
        .collect();
    out.sort_by(|a, b| (a.subject, a.timestamp, &a.station_id).cmp(&(b.subject, b.timestamp, &b.station_id)));
    out
}

/// Reads a capture file or directory and matches it.
pub fn match_log_path(index: &RpiIndex, path: &Path) -> Result<Vec<AttributedSighting>, ProfileError> {
    Ok(match_logs(index, &read_capture_dir(path)?))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisitSegment {
    pub subject: Subject,
    pub station_id: String,
    pub first_seen: i64,
    pub last_seen: i64,
    pub sighting_count: usize,
}

impl VisitSegment {
    pub fn duration_s(&self) -> i64 {
        self.last_seen - self.first_seen
    }
}

/// Merges each subject's consecutive sightings at one station when they are
/// at most `gap_s` apart. Ordered by `(subject, first_seen)`.
pub fn build_timeline(sightings: &[AttributedSighting], gap_s: i64) -> Vec<VisitSegment> {
    let mut sorted: Vec<&AttributedSighting> = sightings.iter().collect();
    sorted.sort_by(|a, b| (a.subject, a.timestamp, &a.station_id).cmp(&(b.subject, b.timestamp, &b.station_id)));
    let mut out: Vec<VisitSegment> = Vec::new();
    for s in sorted {
        if let Some(seg) = out.last_mut() {
            if seg.subject == s.subject && seg.station_id == s.station_id && s.timestamp - seg.last_seen <= gap_s {
                seg.last_seen = s.timestamp;
                seg.sighting_count += 1;
                continue;
            }
        }
        out.push(VisitSegment {
            subject: s.subject,
            station_id: s.station_id.clone(),
            first_seen: s.timestamp,
            last_seen: s.timestamp,
            sighting_count: 1,
        });
    }
    out
}

/// Segments grouped per subject, each list in time order.
pub fn timelines(segments: &[VisitSegment]) -> BTreeMap<Subject, Vec<VisitSegment>> {
    let mut map: BTreeMap<Subject, Vec<VisitSegment>> = BTreeMap::new();
    for s in segments {
        map.entry(s.subject).or_default().push(s.clone());
    }
    for v in map.values_mut() {
        v.sort_by_key(|s| s.first_seen);
    }
    map
}

/// Station ids in chronological order.
pub fn route(timeline: &[VisitSegment]) -> Vec<String> {
    let mut segs: Vec<&VisitSegment> = timeline.iter().collect();
    segs.sort_by_key(|s| s.first_seen);
    segs.into_iter().map(|s| s.station_id.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SocialEdge {
    /// Always the smaller subject.
    pub a: Subject,
    pub b: Subject,
    pub shared_stations: BTreeSet<String>,
    pub overlap_s: i64,
}

impl SocialEdge {
    pub fn involves(&self, s: Subject) -> bool {
        self.a == s || self.b == s
    }
}

/// Total overlap of two timelines, counting only stations where the
/// intervals intersect for a positive length.
pub fn overlap(a: &[VisitSegment], b: &[VisitSegment]) -> (i64, BTreeSet<String>) {
    let mut total = 0;
    let mut shared = BTreeSet::new();
    for x in a {
        for y in b.iter().filter(|y| y.station_id == x.station_id) {
            let o = x.last_seen.min(y.last_seen) - x.first_seen.max(y.first_seen);
            if o > 0 {
                total += o;
                shared.insert(x.station_id.clone());
            }
        }
    }
    (total, shared)
}

/// Pairs of subjects whose timelines overlap for at least `min_overlap_s`.
pub fn co_location(segments: &[VisitSegment], min_overlap_s: i64) -> Vec<SocialEdge> {
    let lines = timelines(segments);
    let subjects: Vec<&Subject> = lines.keys().collect();
    let mut edges = Vec::new();
    for (i, a) in subjects.iter().enumerate() {
        for b in &subjects[i + 1..] {
            let (total, shared) = overlap(&lines[a], &lines[b]);
            if total > 0 && total >= min_overlap_s {
                edges.push(SocialEdge {
                    a: **a,
                    b: **b,
                    shared_stations: shared,
                    overlap_s: total,
                });
            }
        }
    }
    edges
}

fn time_of_day(t: i64) -> i64 {
    t.rem_euclid(86_400)
}

fn visit_weight(x: &VisitSegment, y: &VisitSegment) -> f64 {
    if x.station_id != y.station_id {
        return 0.0;
    }
    let d = (time_of_day(x.first_seen) - time_of_day(y.first_seen)).abs();
    let d = d.min(86_400 - d);
    1.0 - d.min(TIME_OF_DAY_SCALE_S) as f64 / TIME_OF_DAY_SCALE_S as f64
}

/// Weighted longest common subsequence of two routes, divided by the longer
/// route's length. A pair of visits counts when the station matches, weighted
/// by how close their arrival times of day are.
pub fn route_similarity(a: &[VisitSegment], b: &[VisitSegment]) -> f64 {
    let n = a.len().max(b.len());
    if n == 0 {
        return 0.0;
    }
    let mut dp = vec![vec![0.0f64; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let diag = dp[i - 1][j - 1] + visit_weight(&a[i - 1], &b[j - 1]);
            dp[i][j] = diag.max(dp[i - 1][j]).max(dp[i][j - 1]);
        }
    }
    dp[a.len()][b.len()] / n as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossDayLink {
    pub earlier: Subject,
    pub later: Subject,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkMatrix {
    pub subjects: Vec<Subject>,
    /// `similarity[i][j]`, zero for subjects on the same day.
    pub similarity: Vec<Vec<f64>>,
}

impl LinkMatrix {
    /// Cross-day pairs at or above `threshold`, best first.
    pub fn links(&self, threshold: f64) -> Vec<CrossDayLink> {
        let mut out = Vec::new();
        for i in 0..self.subjects.len() {
            for j in i + 1..self.subjects.len() {
                let sim = self.similarity[i][j];
                if self.subjects[i].day != self.subjects[j].day && sim >= threshold && sim > 0.0 {
                    let (earlier, later) = if self.subjects[i].day < self.subjects[j].day {
                        (self.subjects[i], self.subjects[j])
                    } else {
                        (self.subjects[j], self.subjects[i])
                    };
                    out.push(CrossDayLink {
                        earlier,
                        later,
                        similarity: sim,
                    });
                }
            }
        }
        out.sort_by(|x, y| {
            y.similarity
                .total_cmp(&x.similarity)
                .then((x.earlier, x.later).cmp(&(y.earlier, y.later)))
        });
        out
    }

    /// For `subject`, the most similar subject on another day.
    pub fn best_match(&self, subject: Subject) -> Option<(Subject, f64)> {
        let i = self.subjects.iter().position(|s| *s == subject)?;
        (0..self.subjects.len())
            .filter(|&j| self.subjects[j].day != subject.day && self.similarity[i][j] > 0.0)
            .map(|j| (self.subjects[j], self.similarity[i][j]))
            .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)))
    }
}

/// Similarity between every pair of subjects seen on different days.
pub fn cross_day_link(segments: &[VisitSegment]) -> LinkMatrix {
    let lines = timelines(segments);
    let subjects: Vec<Subject> = lines.keys().copied().collect();
    let n = subjects.len();
    let mut similarity = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            if subjects[i].day == subjects[j].day {
                continue;
            }
            let s = route_similarity(&lines[&subjects[i]], &lines[&subjects[j]]);
            similarity[i][j] = s;
            similarity[j][i] = s;
        }
    }
    LinkMatrix { subjects, similarity }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileConfig {
    pub merge_gap_s: i64,
    pub min_overlap_s: i64,
    pub link_threshold: f64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            merge_gap_s: DEFAULT_MERGE_GAP_S,
            min_overlap_s: DEFAULT_MIN_OVERLAP_S,
            link_threshold: DEFAULT_LINK_THRESHOLD,
        }
    }
}

/// Everything the profiler derives from keys and captures.
#[derive(Debug, Clone)]
pub struct ProfileReport {
    pub indexed_rpis: usize,
    pub records_read: usize,
    pub sightings: Vec<AttributedSighting>,
    pub segments: Vec<VisitSegment>,
    pub routes: BTreeMap<Subject, Vec<String>>,
    pub edges: Vec<SocialEdge>,
    pub links: LinkMatrix,
    pub config: ProfileConfig,
}

impl ProfileReport {
    pub fn subjects(&self) -> Vec<Subject> {
        self.routes.keys().copied().collect()
    }

    /// Subjects whose route equals `stations`.
    pub fn subjects_with_route(&self, stations: &[&str]) -> Vec<Subject> {
        self.routes
            .iter()
            .filter(|(_, r)| r.iter().map(String::as_str).eq(stations.iter().copied()))
            .map(|(s, _)| *s)
            .collect()
    }
}

pub fn profile(
    teks: &[TemporaryExposureKey],
    records: &[CaptureRecord],
    config: ProfileConfig,
) -> Result<ProfileReport, ProfileError> {
    let index = build_index(teks)?;
    let sightings = match_logs(&index, records);
    let segments = build_timeline(&sightings, config.merge_gap_s);
    let routes = timelines(&segments)
        .into_iter()
        .map(|(s, line)| (s, route(&line)))
        .collect();
    let edges = co_location(&segments, config.min_overlap_s);
    let links = cross_day_link(&segments);
    Ok(ProfileReport {
        indexed_rpis: index.len(),
        records_read: records.len(),
        sightings,
        segments,
        routes,
        edges,
        links,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{derive_rpi, derive_rpik};
    use crate::sim::{commuter_scenario, fig5_scenario, run_scenario};

    fn tek(byte: u8, day: u32) -> TemporaryExposureKey {
        TemporaryExposureKey::new(KeyMaterial([byte; 16]), IntervalNumber(day * 144), 3).unwrap()
    }

    fn seg(subject: Subject, station: &str, first: i64, last: i64) -> VisitSegment {
        VisitSegment {
            subject,
            station_id: station.into(),
            first_seen: first,
            last_seen: last,
            sighting_count: 1,
        }
    }

    #[test]
    fn index_size_and_lookup() {
        let day = 1_594_080_000 / 86_400;
        let one = build_index(&[tek(1, day as u32)]).unwrap();
        assert_eq!(one.len(), 144);
        let fourteen: Vec<_> = (0..14).map(|d| tek(d as u8 + 1, day as u32 - d)).collect();
        let idx = build_index(&fourteen).unwrap();
        assert_eq!(idx.len(), 2016);
        let t = fourteen[3];
        let i = t.rolling_start.offset(17);
        let rpi = derive_rpi(&derive_rpik(&t), i).unwrap();
        assert_eq!(idx.lookup(&rpi), Some((Subject::of(&t), i)));
        // re-uploads of an identical key are not collisions
        assert_eq!(build_index(&[t, t]).unwrap().len(), 144);
    }

    #[test]
    fn timeline_merges_by_gap() {
        let s = Subject::of(&tek(1, 18450));
        let sight = |t, st: &str| AttributedSighting {
            subject: s,
            station_id: st.into(),
            timestamp: t,
            interval: IntervalNumber(0),
            rssi: -60,
        };
        let one = build_timeline(&[sight(100, "A")], 600);
        assert_eq!((one.len(), one[0].duration_s()), (1, 0));
        let bursts = [sight(0, "A"), sight(60, "A"), sight(1860, "A"), sight(1900, "A")];
        assert_eq!(build_timeline(&bursts, 600).len(), 2);
        let edge = [sight(0, "A"), sight(600, "A"), sight(1201, "A")];
        assert_eq!(build_timeline(&edge, 600).len(), 2);
        assert!(route(&[]).is_empty());
    }

    #[test]
    fn co_location_threshold_and_symmetry() {
        let a = Subject::of(&tek(1, 18450));
        let b = Subject::of(&tek(2, 18450));
        let segs = vec![seg(a, "B", 0, 100), seg(b, "B", 40, 300), seg(b, "C", 0, 100)];
        let edges = co_location(&segs, 60);
        assert_eq!(edges.len(), 1);
        assert_eq!(edges[0].overlap_s, 60);
        assert_eq!(edges[0].shared_stations, BTreeSet::from(["B".to_string()]));
        assert!(co_location(&segs, 61).is_empty());
        let swapped = vec![segs[1].clone(), segs[2].clone(), segs[0].clone()];
        assert_eq!(co_location(&swapped, 60), edges);
        assert_eq!(overlap(&segs[..1], &segs[1..]).0, overlap(&segs[1..], &segs[..1]).0);
        // touching intervals share no time
        assert!(co_location(&[seg(a, "B", 0, 100), seg(b, "B", 100, 200)], 0).is_empty());
    }

    #[test]
    fn similarity_extremes() {
        let d1 = Subject::of(&tek(1, 18450));
        let d2 = Subject::of(&tek(2, 18451));
        let day = 86_400;
        let r1 = vec![seg(d1, "A", 8 * 3600, 9 * 3600), seg(d1, "B", 10 * 3600, 11 * 3600)];
        let r2: Vec<_> = r1
            .iter()
            .map(|s| seg(d2, &s.station_id, s.first_seen + day, s.last_seen + day))
            .collect();
        assert!((route_similarity(&r1, &r2) - 1.0).abs() < 1e-12);
        let r3 = vec![seg(d2, "C", day, day + 10), seg(d2, "D", day + 20, day + 30)];
        assert_eq!(route_similarity(&r1, &r3), 0.0);
        assert_eq!(route_similarity(&[], &[]), 0.0);
    }

    #[test]
    fn fig5_routes_and_social_edge() {
        let sim = run_scenario(&fig5_scenario(11)).unwrap();
        let report = profile(
            &sim.registry.diagnosis_keys(),
            &sim.all_captures(),
            ProfileConfig::default(),
        )
        .unwrap();
        let user1 = Subject::of(&sim.registry.keys_of("User 1")[0]);
        let user2 = Subject::of(&sim.registry.keys_of("User 2")[0]);
        assert_eq!(report.routes[&user1], ["A", "D", "C", "B", "E", "A"]);
        assert_eq!(report.routes[&user2], ["B", "E", "F"]);
        assert_eq!(report.routes.len(), 2);
        assert_eq!(report.edges.len(), 1);
        assert_eq!(
            report.edges[0].shared_stations,
            BTreeSet::from(["B".to_string(), "E".to_string()])
        );
        assert!(report.edges[0].involves(user1) && report.edges[0].involves(user2));
    }

    #[test]
    fn commuter_days_link_to_themselves() {
        let sim = run_scenario(&commuter_scenario(5)).unwrap();
        let report = profile(
            &sim.registry.diagnosis_keys(),
            &sim.all_captures(),
            ProfileConfig::default(),
        )
        .unwrap();
        for who in ["Commuter", "Shopper"] {
            let keys = sim.registry.keys_of(who);
            let (d0, d1) = (Subject::of(&keys[0]), Subject::of(&keys[1]));
            assert_eq!(report.links.best_match(d0).unwrap().0, d1);
        }
        let links = report.links.links(DEFAULT_LINK_THRESHOLD);
        assert_eq!(links.len(), 2);
    }
}
