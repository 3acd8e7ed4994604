//! Deterministic discrete-event simulation of devices beaconing at sniffer
//! stations.
//!
//! Agents teleport between stations following an itinerary. While present,
//! an agent's device emits its current RPI every advertising period; every
//! station whose range covers the agent captures the beacon with a fixed
//! probability. Events are ordered by `(time, agent id, stop)` so the output
//! does not depend on declaration order.

mod capture;
mod config;
pub mod scenarios;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::crypto::{
    encrypt_aem, expand_tek, generate_tek, Aem, IntervalNumber, Metadata, Rpi, TekExpansion, TemporaryExposureKey,
    INTERVAL_SECONDS, TEK_ROLLING_PERIOD,
};

pub use capture::{
    export_captures, import_captures, read_capture_dir, read_captures, write_captures, write_station_logs,
    CaptureParseError, CAPTURE_HEADER,
};
pub use config::{load_scenario, parse_scenario, ScenarioFile};
pub use scenarios::{commuter_scenario, fig5_scenario, FIG5_DAY_START};

const SECONDS_PER_DAY: i64 = INTERVAL_SECONDS * TEK_ROLLING_PERIOD as i64;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("agent {agent}: itinerary entry {index} overlaps or precedes the previous one")]
    Overlap { agent: String, index: usize },
    #[error("scenario config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Station {
    pub id: String,
    pub label: String,
    pub position: (f64, f64),
    pub range_m: f64,
    /// Fraction of each minute the station listens, starting at second 0.
    pub duty_cycle: f64,
}

impl Station {
    pub fn new(id: &str, label: &str, position: (f64, f64), range_m: f64) -> Self {
        Self {
            id: id.to_string(),
            label: label.to_string(),
            position,
            range_m,
            duty_cycle: 1.0,
        }
    }

    fn listening_at(&self, t: i64) -> bool {
        self.duty_cycle >= 1.0 || (t.rem_euclid(60) as f64) < self.duty_cycle * 60.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stop {
    pub station: String,
    pub arrive: i64,
    pub depart: i64,
    /// Distance from the station antenna while present.
    pub distance_m: f64,
}

impl Stop {
    pub fn new(station: &str, arrive: i64, depart: i64) -> Self {
        Self {
            station: station.to_string(),
            arrive,
            depart,
            distance_m: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub id: String,
    pub itinerary: Vec<Stop>,
    pub diagnosed: bool,
    pub transmission_risk_level: u8,
    pub metadata: Metadata,
}

impl Agent {
    pub fn new(id: &str, itinerary: Vec<Stop>) -> Self {
        Self {
            id: id.to_string(),
            itinerary,
            diagnosed: false,
            transmission_risk_level: 4,
            metadata: Metadata::default(),
        }
    }

    pub fn diagnosed(mut self, level: u8) -> Self {
        self.diagnosed = true;
        self.transmission_risk_level = level;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub stations: Vec<Station>,
    pub agents: Vec<Agent>,
    pub start: i64,
    pub end: i64,
    pub advertise_period_s: u32,
    pub rx_probability: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.start < 0 || self.end <= self.start {
            return Err(SimError::Invalid(format!(
                "horizon [{}, {}) is empty or negative",
                self.start, self.end
            )));
        }
        if self.advertise_period_s == 0 {
            return Err(SimError::Invalid("advertise_period_s must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rx_probability) {
            return Err(SimError::Invalid(format!(
                "rx_probability {} outside [0, 1]",
                self.rx_probability
            )));
        }
        let mut ids = std::collections::HashSet::new();
        for s in &self.stations {
            if s.id.is_empty() || s.id.chars().any(char::is_whitespace) {
                return Err(SimError::Invalid(format!("bad station id {:?}", s.id)));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(SimError::Invalid(format!("duplicate station id {}", s.id)));
            }
            if s.range_m.is_nan() || s.range_m <= 0.0 {
                return Err(SimError::Invalid(format!("station {} range must be positive", s.id)));
            }
            if !(0.0..=1.0).contains(&s.duty_cycle) {
                return Err(SimError::Invalid(format!("station {} duty cycle outside [0, 1]", s.id)));
            }
        }
        let mut agent_ids = std::collections::HashSet::new();
        for a in &self.agents {
            if !agent_ids.insert(a.id.as_str()) {
                return Err(SimError::Invalid(format!("duplicate agent id {}", a.id)));
            }
            if a.transmission_risk_level > crate::crypto::MAX_TRANSMISSION_RISK_LEVEL {
                return Err(SimError::Invalid(format!("agent {} risk level > 8", a.id)));
            }
            let mut prev_depart = i64::MIN;
            for (i, stop) in a.itinerary.iter().enumerate() {
                if !ids.contains(stop.station.as_str()) {
                    return Err(SimError::Invalid(format!(
                        "agent {} visits unknown station {}",
                        a.id, stop.station
                    )));
                }
                if stop.depart <= stop.arrive {
                    return Err(SimError::Invalid(format!(
                        "agent {} entry {i}: depart must follow arrive",
                        a.id
                    )));
                }
                if stop.arrive < prev_depart {
                    return Err(SimError::Overlap {
                        agent: a.id.clone(),
                        index: i,
                    });
                }
                prev_depart = stop.depart;
            }
        }
        Ok(())
    }

    pub fn station(&self, id: &str) -> Option<&Station> {
        self.stations.iter().find(|s| s.id == id)
    }

    pub fn agent(&self, id: &str) -> Option<&Agent> {
        self.agents.iter().find(|a| a.id == id)
    }
}

/// One sniffed advertisement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureRecord {
    pub station_id: String,
    pub timestamp: i64,
    pub rpi: Rpi,
    pub aem: Aem,
    pub rssi: i32,
}

/// A device's key schedule: one TEK per UTC day of the scenario.
#[derive(Debug, Clone)]
pub struct DeviceKeys {
    pub metadata: Metadata,
    expansions: Vec<TekExpansion>,
}

impl DeviceKeys {
    pub fn teks(&self) -> Vec<TemporaryExposureKey> {
        self.expansions.iter().map(|e| e.tek).collect()
    }

    /// RPI and AEM broadcast at unix time `t`, if a key covers it.
    pub fn beacon_at(&self, t: i64) -> Option<(Rpi, Aem)> {
        let interval = IntervalNumber::from_unix(t).ok()?;
        let exp = self.expansions.iter().find(|e| e.tek.covers(interval))?;
        let rpi = exp.rpi_at(interval)?;
        let aem = encrypt_aem(&exp.aemk, &rpi, &self.metadata).ok()?;
        Some((rpi, aem))
    }
}

fn agent_rng(seed: u64, agent_id: &str) -> ChaCha20Rng {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(agent_id.as_bytes())
        .finalize();
    ChaCha20Rng::from_seed(digest.into())
}

/// Generates the key schedule an agent's device uses over `[start, end)`.
pub fn device_keys(seed: u64, agent: &Agent, start: i64, end: i64) -> DeviceKeys {
    let mut rng = agent_rng(seed, agent.id.as_str());
    let first_day = start.div_euclid(SECONDS_PER_DAY);
    let last_day = (end - 1).div_euclid(SECONDS_PER_DAY);
    let expansions = (first_day..=last_day)
        .map(|day| {
            let day_start = IntervalNumber((day * TEK_ROLLING_PERIOD as i64) as u32);
            let mut tek = generate_tek(&mut rng, day_start).expect("day-aligned interval");
            tek.transmission_risk_level = agent.transmission_risk_level;
            expand_tek(&tek)
        })
        .collect();
    DeviceKeys {
        metadata: agent.metadata,
        expansions,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruthVisit {
    pub agent: String,
    pub station: String,
    pub arrive: i64,
    pub depart: i64,
}

/// What actually happened. Only tests and scenario drivers read this.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    pub visits: Vec<TruthVisit>,
    pub emissions: usize,
    pub emitter: HashMap<Rpi, String>,
}

/// Every agent's TEKs, keyed by agent id.
#[derive(Debug, Clone, Default)]
pub struct TekRegistry {
    pub keys: BTreeMap<String, Vec<TemporaryExposureKey>>,
    pub diagnosed: Vec<String>,
}

impl TekRegistry {
    /// The keys diagnosed agents would upload.
    pub fn diagnosis_keys(&self) -> Vec<TemporaryExposureKey> {
        self.diagnosed
            .iter()
            .flat_map(|id| self.keys.get(id).cloned().unwrap_or_default())
            .collect()
    }

    pub fn keys_of(&self, agent: &str) -> &[TemporaryExposureKey] {
        self.keys.get(agent).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    /// Capture records per station, time-ordered.
    pub logs: BTreeMap<String, Vec<CaptureRecord>>,
    pub truth: GroundTruth,
    pub registry: TekRegistry,
}

impl SimOutput {
    /// All captures across stations ordered by `(timestamp, station)`.
    pub fn all_captures(&self) -> Vec<CaptureRecord> {
        let mut all: Vec<_> = self.logs.values().flatten().cloned().collect();
        all.sort_by(|a, b| (a.timestamp, &a.station_id).cmp(&(b.timestamp, &b.station_id)));
        all
    }
}

fn synth_rssi(distance_m: f64, noise: i32) -> i32 {
    -60 - (2.0 * distance_m).round() as i32 + noise
}

fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

pub fn run_scenario(scenario: &Scenario) -> Result<SimOutput, SimError> {
    scenario.validate()?;
    let period = i64::from(scenario.advertise_period_s);

    let mut agents: Vec<&Agent> = scenario.agents.iter().collect();
    agents.sort_by(|a, b| a.id.cmp(&b.id));
    let mut stations: Vec<&Station> = scenario.stations.iter().collect();
    stations.sort_by(|a, b| a.id.cmp(&b.id));

    let mut registry = TekRegistry::default();
    let mut devices = HashMap::new();
    let mut queue = BinaryHeap::new();
    let mut truth = GroundTruth::default();

    for agent in &agents {
        let keys = device_keys(scenario.seed, agent, scenario.start, scenario.end);
        registry.keys.insert(agent.id.clone(), keys.teks());
        if agent.diagnosed {
            registry.diagnosed.push(agent.id.clone());
        }
        let mut phase_rng = agent_rng(scenario.seed ^ 0x0050_4841_5345, &agent.id);
        for (idx, stop) in agent.itinerary.iter().enumerate() {
            truth.visits.push(TruthVisit {
                agent: agent.id.clone(),
                station: stop.station.clone(),
                arrive: stop.arrive,
                depart: stop.depart,
            });
            let phase = phase_rng.gen_range(0..period);
            queue.push(Reverse((stop.arrive + phase, agent.id.clone(), idx)));
        }
        devices.insert(agent.id.clone(), (keys, *agent));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(scenario.seed);
    let mut logs: BTreeMap<String, Vec<CaptureRecord>> =
        stations.iter().map(|s| (s.id.clone(), Vec::new())).collect();

    while let Some(Reverse((t, agent_id, idx))) = queue.pop() {
        let (keys, agent) = &devices[&agent_id];
        let stop = &agent.itinerary[idx];
        if t >= stop.depart || t >= scenario.end {
            continue;
        }
        queue.push(Reverse((t + period, agent_id.clone(), idx)));
        if t < scenario.start {
            continue;
        }
        let Some((rpi, aem)) = keys.beacon_at(t) else {
            continue;
        };
        truth.emissions += 1;
        truth.emitter.insert(rpi, agent_id.clone());
        let home = scenario.station(&stop.station).expect("validated").position;
        let pos = (home.0 + stop.distance_m, home.1);
        for station in &stations {
            let d = distance(pos, station.position);
            if d > station.range_m || !station.listening_at(t) {
                continue;
            }
            let heard = rng.gen_bool(scenario.rx_probability);
            let noise = rng.gen_range(-3..=3);
            if heard {
                logs.get_mut(&station.id).expect("station log").push(CaptureRecord {
                    station_id: station.id.clone(),
                    timestamp: t,
                    rpi,
                    aem,
                    rssi: synth_rssi(d, noise),
                });
            }
        }
    }

    truth
        .visits
        .sort_by(|a, b| (a.arrive, &a.agent).cmp(&(b.arrive, &b.agent)));
    Ok(SimOutput { logs, truth, registry })
}
