//! Declarative scenario files (TOML).
//!
//! ```toml
//! name = "fig5"
//! start = "2020-07-07T00:00:00Z"    # RFC 3339 or unix seconds
//! end = "2020-07-08T00:00:00Z"
//! seed = 7                          # optional, the CLI --seed wins
//! advertise_period_s = 2            # optional, default 2
//! rx_probability = 1.0              # optional, default 1.0
//!
//! [[stations]]
//! id = "A"
//! label = "A residential area"
//! x = 0.0
//! y = 0.0
//! range_m = 6.0                     # optional, default 6
//! duty_cycle = 1.0                  # optional, default always on
//!
//! [[agents]]
//! id = "User 1"
//! diagnosed = true                  # optional, default false
//! transmission_risk_level = 5       # optional, default 4
//! metadata = "40f80000"             # optional AEM plaintext, hex
//! itinerary = [
//!   { station = "A", arrive = "08:00", depart = "08:40" },
//!   { station = "D", arrive = "d0 09:00", depart = 1594114200, distance_m = 2.0 },
//! ]
//! ```
//!
//! Itinerary times are unix seconds, RFC 3339 strings, or `[dN ]HH:MM[:SS]`
//! offsets from the start of the horizon (day `N`, zero-based).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Agent, Scenario, SimError, Station, Stop};
use crate::crypto::Metadata;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeSpec {
    Unix(i64),
    Text(String),
}

impl TimeSpec {
    fn resolve(&self, origin: Option<i64>) -> Result<i64, SimError> {
        match self {
            TimeSpec::Unix(t) => Ok(*t),
            TimeSpec::Text(s) => parse_time_text(s, origin),
        }
    }
}

fn parse_time_text(s: &str, origin: Option<i64>) -> Result<i64, SimError> {
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
        return Ok(dt.timestamp());
    }
    let bad = || SimError::Config(format!("cannot parse time {s:?}"));
    let origin = origin.ok_or_else(bad)?;
    let (day, clock) = match s.trim().split_once(' ') {
        Some((d, rest)) => {
            let n = d.strip_prefix('d').ok_or_else(bad)?.parse::<i64>().map_err(|_| bad())?;
            (n, rest.trim())
        }
        None => (0, s.trim()),
    };
    let parts: Vec<i64> = clock
        .split(':')
        .map(|p| p.parse::<i64>().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    let secs = match parts.as_slice() {
        [h, m] => h * 3600 + m * 60,
        [h, m, sec] => h * 3600 + m * 60 + sec,
        _ => return Err(bad()),
    };
    Ok(origin + day * 86400 + secs)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationSpec {
    pub id: String,
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub x: f64,
    #[serde(default)]
    pub y: f64,
    #[serde(default = "default_range")]
    pub range_m: f64,
    #[serde(default = "default_one")]
    pub duty_cycle: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopSpec {
    pub station: String,
    pub arrive: TimeSpec,
    pub depart: TimeSpec,
    #[serde(default = "default_distance")]
    pub distance_m: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub id: String,
    #[serde(default)]
    pub diagnosed: bool,
    #[serde(default = "default_risk")]
    pub transmission_risk_level: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<String>,
    #[serde(default)]
    pub itinerary: Vec<StopSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub name: String,
    pub start: TimeSpec,
    pub end: TimeSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_period")]
    pub advertise_period_s: u32,
    #[serde(default = "default_one")]
    pub rx_probability: f64,
    #[serde(default)]
    pub stations: Vec<StationSpec>,
    #[serde(default)]
    pub agents: Vec<AgentSpec>,
}

fn default_range() -> f64 {
    6.0
}
fn default_one() -> f64 {
    1.0
}
fn default_distance() -> f64 {
    1.5
}
fn default_risk() -> u8 {
    4
}
fn default_period() -> u32 {
    2
}

impl ScenarioFile {
    /// Builds the scenario; `seed` overrides the file's seed.
    pub fn into_scenario(self, seed: Option<u64>) -> Result<Scenario, SimError> {
        let start = self.start.resolve(None)?;
        let end = self.end.resolve(Some(start))?;
        let stations = self
            .stations
            .into_iter()
            .map(|s| Station {
                id: s.id,
                label: s.label,
                position: (s.x, s.y),
                range_m: s.range_m,
                duty_cycle: s.duty_cycle,
            })
            .collect();
        let agents = self
            .agents
            .into_iter()
            .map(|a| {
                let metadata = match a.metadata {
                    Some(hex) => Metadata::from_hex(&hex)
                        .map_err(|e| SimError::Config(format!("agent {}: metadata {e}", a.id)))?,
                    None => Metadata::default(),
                };
                let itinerary = a
                    .itinerary
                    .into_iter()
                    .map(|s| {
                        Ok(Stop {
                            station: s.station,
                            arrive: s.arrive.resolve(Some(start))?,
                            depart: s.depart.resolve(Some(start))?,
                            distance_m: s.distance_m,
                        })
                    })
                    .collect::<Result<_, SimError>>()?;
                Ok(Agent {
                    id: a.id,
                    itinerary,
                    diagnosed: a.diagnosed,
                    transmission_risk_level: a.transmission_risk_level,
                    metadata,
                })
            })
            .collect::<Result<_, SimError>>()?;
        let scenario = Scenario {
            name: self.name,
            stations,
            agents,
            start,
            end,
            advertise_period_s: self.advertise_period_s,
            rx_probability: self.rx_probability,
            seed: seed.or(self.seed).unwrap_or(0),
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_scenario(s: &Scenario) -> Self {
        Self {
            name: s.name.clone(),
            start: TimeSpec::Unix(s.start),
            end: TimeSpec::Unix(s.end),
            seed: Some(s.seed),
            advertise_period_s: s.advertise_period_s,
            rx_probability: s.rx_probability,
            stations: s
                .stations
                .iter()
                .map(|st| StationSpec {
                    id: st.id.clone(),
                    label: st.label.clone(),
                    x: st.position.0,
                    y: st.position.1,
                    range_m: st.range_m,
                    duty_cycle: st.duty_cycle,
                })
                .collect(),
            agents: s
                .agents
                .iter()
                .map(|a| AgentSpec {
                    id: a.id.clone(),
                    diagnosed: a.diagnosed,
                    transmission_risk_level: a.transmission_risk_level,
                    metadata: Some(a.metadata.to_hex()),
                    itinerary: a
                        .itinerary
                        .iter()
                        .map(|st| StopSpec {
                            station: st.station.clone(),
                            arrive: TimeSpec::Unix(st.arrive),
                            depart: TimeSpec::Unix(st.depart),
                            distance_m: st.distance_m,
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }
}

pub fn parse_scenario(text: &str, seed: Option<u64>) -> Result<Scenario, SimError> {
    let file: ScenarioFile = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
    file.into_scenario(seed)
}

pub fn load_scenario(path: &Path, seed: Option<u64>) -> Result<Scenario, SimError> {
    parse_scenario(&std::fs::read_to_string(path)?, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::fig5_scenario;

    const DOC_EXAMPLE: &str = r#"
name = "doc"
start = "2020-07-07T00:00:00Z"
end = "d1 00:00"
advertise_period_s = 2

[[stations]]
id = "A"
label = "A residential area"
x = 0.0
y = 0.0

[[stations]]
id = "D"
x = 300.0
y = 0.0

[[agents]]
id = "User 1"
diagnosed = true
transmission_risk_level = 5
metadata = "40f80000"
itinerary = [
  { station = "A", arrive = "08:00", depart = "08:40" },
  { station = "D", arrive = "d0 09:00", depart = 1594114200, distance_m = 2.0 },
]
"#;

    #[test]
    fn parses_documented_schema() {
        let s = parse_scenario(DOC_EXAMPLE, Some(9)).unwrap();
        assert_eq!(s.start, 1594080000);
        assert_eq!(s.end, 1594080000 + 86400);
        assert_eq!(s.seed, 9);
        assert_eq!(s.stations[0].range_m, 6.0);
        let u = &s.agents[0];
        assert_eq!(u.itinerary[0].arrive, 1594080000 + 8 * 3600);
        assert_eq!(u.itinerary[1].arrive, 1594080000 + 9 * 3600);
        assert_eq!(u.itinerary[1].depart, 1594114200);
        assert_eq!(u.metadata.tx_power(), -8);
    }

    #[test]
    fn rejects_unknown_keys_and_overlaps() {
        let bad = DOC_EXAMPLE.replace("advertise_period_s = 2", "advertise_period = 2");
        assert!(matches!(parse_scenario(&bad, None), Err(SimError::Config(_))));
        let overlap = DOC_EXAMPLE.replace("d0 09:00", "08:30");
        assert!(matches!(parse_scenario(&overlap, None), Err(SimError::Overlap { .. })));
    }

    #[test]
    fn builtin_round_trips_through_toml() {
        let s = fig5_scenario(7);
        let text = ScenarioFile::from_scenario(&s).to_toml();
        assert_eq!(parse_scenario(&text, None).unwrap(), s);
    }
}
