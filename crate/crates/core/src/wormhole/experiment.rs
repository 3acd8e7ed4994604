//! End-to-end relay attack between two distant sites.
//!
//! An infected person spends half an hour near node X. Node X relays what it
//! hears through a real TCP broker to node Y, 40 km away, which replays it next
//! to a victim's phone. The person later uploads their keys; the victim
//! downloads them, matches, and scores. Relay transport runs over sockets,
//! while capture and replay timestamps run in simulated time.

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use ed25519_dalek::SigningKey;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{
    broker_serve, rebroadcast_loop, sniff_and_publish, BrokerClient, Emission, NodeLog, Rebroadcaster, Sniffer,
    WormholeError, WormholeMessage, DEFAULT_CADENCE_S, DEFAULT_REPLAY_WINDOW_S,
};
use crate::ble::{encode_advertisement, Advertisement, EXPOSURE_NOTIFICATION_UUID, SERVICE_PAYLOAD_LEN};
use crate::clock::ManualClock;
use crate::keyserver::KeyServer;
use crate::matcher::{match_exposures, score, ExposureWindow, MatchConfig, RiskResult, SightingStore};
use crate::sim::scenarios::FIG5_DAY_START;
use crate::sim::{run_scenario, Agent, Scenario, SimError, Station, Stop};

const HOUR: i64 = 3600;

#[derive(Debug, Clone, PartialEq)]
pub struct WormholeExperiment {
    pub seed: u64,
    /// With the relay disabled the run is the control: nothing crosses sites.
    pub enabled: bool,
    /// Extra delay between capture at X and arrival at Y.
    pub replay_delay_s: i64,
    /// Transport delay added to every arrival, rounded up to whole seconds.
    pub network_delay_ms: u64,
    pub replay_window_s: i64,
    pub cadence_s: i64,
    /// Chance that the victim's phone records a single replayed frame.
    pub victim_rx_probability: f64,
}

impl Default for WormholeExperiment {
    fn default() -> Self {
        Self {
            seed: 7,
            enabled: true,
            replay_delay_s: 0,
            network_delay_ms: 50,
            replay_window_s: DEFAULT_REPLAY_WINDOW_S,
            cadence_s: DEFAULT_CADENCE_S,
            victim_rx_probability: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttackReport {
    pub experiment: WormholeExperiment,
    pub sniffed_frames: usize,
    pub published: usize,
    pub relayed: usize,
    pub emissions: usize,
    pub victim_sightings: usize,
    pub replayed_sightings: usize,
    /// Wall-clock time from publish at X to receipt at Y, per message.
    pub relay_latency_ms: Vec<f64>,
    pub windows: Vec<ExposureWindow>,
    pub risk: RiskResult,
    pub log_x: Vec<String>,
    pub log_y: Vec<String>,
    pub broker_log: Vec<String>,
    pub sniffed_payloads: BTreeSet<[u8; SERVICE_PAYLOAD_LEN]>,
    pub replayed_payloads: BTreeSet<[u8; SERVICE_PAYLOAD_LEN]>,
}

impl AttackReport {
    pub fn exposed(&self) -> bool {
        !self.windows.is_empty()
    }
}

/// Site X at the origin, site Y (node plus victim) 40 km east.
pub fn two_site_scenario(seed: u64) -> Scenario {
    let d = FIG5_DAY_START;
    let patient = Agent::new("patient", vec![Stop::new("X", d + 10 * HOUR, d + 10 * HOUR + 1800)]).diagnosed(5);
    let neighbor = Agent::new("neighbor", vec![Stop::new("Y", d + 10 * HOUR, d + 10 * HOUR + 1800)]);
    Scenario {
        name: "wormhole".into(),
        stations: vec![
            Station::new("X", "Node X", (0.0, 0.0), 6.0),
            Station::new("Y", "Victim at node Y", (40_000.0, 0.0), 6.0),
        ],
        agents: vec![patient, neighbor],
        start: d + 9 * HOUR,
        end: d + 11 * HOUR,
        advertise_period_s: 2,
        rx_probability: 1.0,
        seed,
    }
}

fn sim_error(e: SimError) -> WormholeError {
    WormholeError::Protocol(format!("scenario: {e}"))
}

fn arrival(msg: &WormholeMessage, exp: &WormholeExperiment) -> i64 {
    let net = exp.network_delay_ms.div_ceil(1000) as i64;
    msg.captured_at + exp.replay_delay_s + net
}

pub fn run_end_to_end(exp: &WormholeExperiment) -> Result<AttackReport, WormholeError> {
    let scenario = two_site_scenario(exp.seed);
    let sim = run_scenario(&scenario).map_err(sim_error)?;
    let at_x = sim.logs.get("X").cloned().unwrap_or_default();
    let at_y = sim.logs.get("Y").cloned().unwrap_or_default();

    let mut log_x = NodeLog::new("node-x");
    let mut log_y = NodeLog::new("node-y");
    let broker_log = Arc::new(Mutex::new(Vec::new()));
    let mut emissions: Vec<Emission> = Vec::new();
    let mut published = 0;
    let mut relayed = 0;
    let mut relay_latency_ms = Vec::new();
    let mut sniffed_payloads = BTreeSet::new();

    if exp.enabled {
        let clock = ManualClock::new(scenario.start);
        let sink = Arc::clone(&broker_log);
        let broker = broker_serve("127.0.0.1:0", Arc::new(clock.clone()), move |line| {
            sink.lock().expect("log lock").push(line);
        })?;
        let addr = broker.local_addr().to_string();
        let mut node_x = BrokerClient::connect(&addr, "node-x")?;
        let node_y = BrokerClient::connect(&addr, "node-y")?;
        // Both hellos must be registered before X publishes; Y also gets
        // retained messages, so this only shortens the wait.
        let deadline = Instant::now() + Duration::from_secs(5);
        while broker.connections() < 2 && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(5));
        }

        let mut sniffer = Sniffer::new("node-x", exp.replay_window_s);
        let mut received = Vec::new();
        for rec in &at_x {
            clock.set(rec.timestamp);
            let adv = Advertisement::new(rec.rpi, rec.aem);
            let mut out: Vec<WormholeMessage> = Vec::new();
            sniff_and_publish(
                &mut sniffer,
                [(rec.timestamp, encode_advertisement(&adv))],
                &mut out,
                &mut log_x,
            )?;
            for msg in out {
                let sent = Instant::now();
                super::Publish::publish(&mut node_x, &msg)?;
                sniffed_payloads.insert(msg.payload()?);
                published += 1;
                let got = node_y.recv_n(1, Duration::from_secs(5))?;
                relay_latency_ms.push(sent.elapsed().as_secs_f64() * 1000.0);
                received.extend(got);
            }
        }
        relayed = received.len();
        node_x.close();
        node_y.close();
        broker.shutdown();

        let mut rebroadcaster = Rebroadcaster::new(exp.cadence_s, EXPOSURE_NOTIFICATION_UUID);
        let incoming = received.into_iter().map(|m| (arrival(&m, exp), m));
        let until = scenario.end + exp.replay_delay_s + exp.replay_window_s + HOUR;
        emissions = rebroadcast_loop(&mut rebroadcaster, incoming, until, &mut log_y);
    }

    // The victim's phone hears its neighbor directly and any replays nearby.
    let mut rng = ChaCha20Rng::seed_from_u64(exp.seed ^ 0x5649_4354_494d);
    let mut heard: Vec<(i64, Advertisement, i32)> = at_y
        .iter()
        .map(|r| (r.timestamp, Advertisement::new(r.rpi, r.aem), r.rssi))
        .collect();
    let mut replayed_payloads = BTreeSet::new();
    let mut replayed_sightings = 0;
    for e in &emissions {
        if rng.gen_bool(exp.victim_rx_probability.clamp(0.0, 1.0)) {
            let rssi = -68 + rng.gen_range(-3..=3);
            heard.push((e.at, e.advertisement, rssi));
            replayed_payloads.insert(e.advertisement.payload());
            replayed_sightings += 1;
        }
    }
    heard.sort_by_key(|(t, a, _)| (*t, a.payload()));
    let mut store = SightingStore::new();
    for (t, adv, rssi) in &heard {
        store
            .ingest(adv, *t, *rssi)
            .map_err(|e| WormholeError::Protocol(e.to_string()))?;
    }

    // The patient tests positive and uploads; the victim downloads and matches.
    let upload_at = FIG5_DAY_START + 86_400 + 9 * HOUR;
    let mut server = KeyServer::new(SigningKey::from_bytes(&[0x42; 32]), "health-authority");
    let ks = |e: crate::keyserver::KeyServerError| WormholeError::Protocol(e.to_string());
    let tan = server.issue_tan("health-authority", upload_at).map_err(ks)?;
    server
        .upload(sim.registry.diagnosis_keys(), &tan.token, upload_at)
        .map_err(ks)?;
    let body = server
        .download(0, upload_at + HOUR)
        .verify(&server.verifying_key())
        .map_err(ks)?;
    let config = MatchConfig::default();
    let windows = match_exposures(&store, &body.teks(), &config);
    let risk = score(windows.clone(), &config);

    let broker_log = broker_log.lock().expect("log lock").clone();
    Ok(AttackReport {
        experiment: exp.clone(),
        sniffed_frames: at_x.len(),
        published,
        relayed,
        emissions: emissions.len(),
        victim_sightings: store.len(),
        replayed_sightings,
        relay_latency_ms,
        windows,
        risk,
        log_x: log_x.lines,
        log_y: log_y.lines,
        broker_log,
        sniffed_payloads,
        replayed_payloads,
    })
}
