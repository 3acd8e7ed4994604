//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the lines always print. A criterion
//! listed in `KNOWN_RED` is reported as FAIL with its reason but does not
//! fail the run; if it ever passes, the run fails so the list gets updated.

use std::collections::HashSet;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ed25519_dalek::SigningKey;
use gap_lab::ble::{AirtimeModel, LinkBudget};
use gap_lab::clock::{Clock, ManualClock};
use gap_lab::crypto::{
    decrypt_aem, derive_aemk, derive_rpi, derive_rpik, encrypt_aem, expand_tek, generate_tek, Aem, IntervalNumber,
    KeyMaterial, Metadata, Rpi, TemporaryExposureKey,
};
use gap_lab::feasibility::{
    collection_rate, coverage_total, parse_duration, replay_exposures, rpis_per_positive, targeted_reach,
    test_center, theoretical_vs_effective, wormhole_devices_needed, CollectionParams, CoveragePlan,
    EpidemicParams,
};
use gap_lab::keyserver::{KeyServer, KeyServerError, RETENTION_DAYS};
use gap_lab::matcher::{match_with_index, window_score, DiagnosisIndex, MatchConfig, SightingStore};
use gap_lab::profiler::{profile, ProfileConfig, Subject};
use gap_lab::rational::{fixed, grouped, int, round_half_up, Q};
use gap_lab::sim::{fig5_scenario, run_scenario, write_captures};
use gap_lab::wormhole::{
    broker_serve, run_end_to_end, BrokerClient, Publish, Rebroadcaster, WormholeExperiment, WormholeMessage,
};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Criteria expected to fail, with the reason.
const KNOWN_RED: &[(u32, &str)] = &[(
    4,
    "549 in 25:49 is 21.2653 per minute: half-up gives 21.27, truncation gives 21.26 but turns 30.4286 into 30.42, so no one rule yields both",
)];

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn within(limit: Duration, started: Instant) -> Result<(), String> {
    let took = started.elapsed();
    check(took < limit, format!("took {took:.2?}, limit {limit:?}"))
}

fn crypto_vectors() -> Outcome {
    let started = Instant::now();
    let tek = TemporaryExposureKey::new(
        KeyMaterial::from_hex("fd3df1b125a21a28f1d7746fd5a46538").unwrap(),
        IntervalNumber(2_656_656),
        0,
    )
    .unwrap();
    let rpik = derive_rpik(&tek);
    let aemk = derive_aemk(&tek);
    let mut metadata = Vec::new();
    for (interval, rpi_hex, aem_hex) in [
        (2_656_788, "9386bead6a0212d6205c665db64ccfe4", "a4e4489c"),
        (2_656_789, "3b65333a5383d8c4d6344672a14963de", "3d167031"),
    ] {
        let rpi = derive_rpi(&rpik, IntervalNumber(interval)).unwrap();
        check(
            rpi.to_hex() == rpi_hex,
            format!("interval {interval}: rpi {}", rpi.to_hex()),
        )?;
        let aem = Aem::from_hex(aem_hex).unwrap();
        // Bytewise brute force: CTR mode lets each plaintext byte be found alone.
        let found: [u8; 4] = std::array::from_fn(|pos| {
            (0..=255u8)
                .find(|c| {
                    let mut trial = [0u8; 4];
                    trial[pos] = *c;
                    encrypt_aem(&aemk, &rpi, &Metadata(trial)).unwrap().0[pos] == aem.0[pos]
                })
                .unwrap()
        });
        check(
            encrypt_aem(&aemk, &rpi, &Metadata(found)).unwrap() == aem,
            format!("interval {interval}: recovered metadata does not re-encrypt"),
        )?;
        check(
            decrypt_aem(&aemk, &rpi, &aem).unwrap().0 == found,
            "decrypt disagrees with brute force",
        )?;
        metadata.push(hex::encode(found));
    }
    check(
        metadata[0] == metadata[1],
        format!("metadata differs per interval: {metadata:?}"),
    )?;
    within(Duration::from_secs(1), started)?;
    Ok(format!(
        "both RPIs byte-exact, both AEMs reproduce from metadata {}",
        metadata[0]
    ))
}

fn interval_arithmetic() -> Outcome {
    let t = chrono::DateTime::parse_from_rfc3339("2020-07-07T00:00:00+02:00")
        .unwrap()
        .timestamp();
    let n = IntervalNumber::from_unix(t).unwrap().value();
    check(n == 2_656_788, format!("got {n}"))?;
    Ok(format!("{t} -> {n}"))
}

fn airtime_chain() -> Outcome {
    let r = theoretical_vs_effective(&AirtimeModel::default(), &LinkBudget::default()).unwrap();
    let got = (
        fixed(&r.on_air_us, 0),
        fixed(&r.max_per_second, 0),
        fixed(&r.max_per_second, 2),
        r.effective_rounded(),
        fixed(&(r.rx_fraction * int(100)), 1),
    );
    let want = (
        "376".to_string(),
        "1901".to_string(),
        "1901.14".to_string(),
        82,
        "4.3".to_string(),
    );
    check(got == want, format!("got {got:?}"))?;
    Ok(format!(
        "{} us on air, {}/s theoretical, {}/s at {}%",
        got.0, got.2, got.3, got.4
    ))
}

fn feasibility_suite() -> Outcome {
    let started = Instant::now();
    let d2 = |q: &Q| fixed(q, 2);
    let germany = EpidemicParams::germany_2020();
    let rate = Q::new(3043, 100);
    let high = EpidemicParams {
        incidence_per_100k_week: Q::new(454, 10),
        ..germany
    };
    let mexico = EpidemicParams {
        positive_test_rate: Q::new(41, 100),
        ..germany
    };
    let tc_de = test_center(&germany, int(300)).unwrap();
    let tc_mx = test_center(&mexico, int(300)).unwrap();
    let replay = |tc: &gap_lab::feasibility::TestCenter| {
        replay_exposures(round_half_up(&tc.uploads_per_hour, 2), int(120)).unwrap()
    };
    let (lo, hi) = coverage_total(&CoveragePlan::city_estimate()).unwrap();

    let items: Vec<(&str, String, &str)> = vec![
        (
            "collection rate 549 in 25:49",
            d2(&collection_rate(549, parse_duration("25:49").unwrap()).unwrap()),
            "21.26",
        ),
        (
            "collection rate 142 in 4:40",
            d2(&collection_rate(142, parse_duration("4:40").unwrap()).unwrap()),
            "30.43",
        ),
        (
            "RPIs per positive",
            fixed(&rpis_per_positive(&germany).unwrap(), 0),
            "9804",
        ),
        (
            "devices at 5.1",
            wormhole_devices_needed(&germany, &CollectionParams::new(rate))
                .unwrap()
                .rounded
                .to_string(),
            "65",
        ),
        (
            "devices at 45.4",
            wormhole_devices_needed(&high, &CollectionParams::new(rate))
                .unwrap()
                .rounded
                .to_string(),
            "8",
        ),
        ("infected per hour", d2(&tc_de.infected_per_hour), "10.86"),
        ("uploads per hour", d2(&tc_de.uploads_per_hour), "1.07"),
        ("replayable positives", d2(&replay(&tc_de)), "2.14"),
        ("infected per hour at 41%", fixed(&tc_mx.infected_per_hour, 0), "123"),
        ("uploads per hour at 41%", d2(&tc_mx.uploads_per_hour), "12.10"),
        ("replayable positives at 41%", d2(&replay(&tc_mx)), "24.20"),
        (
            "targeted reach",
            grouped(targeted_reach(rate, 12, 14).unwrap().total),
            "306,600",
        ),
        ("coverage", format!("{lo}-{hi}"), "395-465"),
    ];
    let misses: Vec<String> = items
        .iter()
        .filter(|(_, got, want)| got != want)
        .map(|(name, got, want)| format!("{name}: got {got}, expected {want}"))
        .collect();
    within(Duration::from_secs(1), started)?;
    if misses.is_empty() {
        Ok(format!("{} figures reproduced", items.len()))
    } else {
        Err(format!(
            "{} of {} figures reproduced; {}",
            items.len() - misses.len(),
            items.len(),
            misses.join("; ")
        ))
    }
}

fn profiling_end_to_end() -> Outcome {
    let started = Instant::now();
    let scenario = fig5_scenario(7);
    let sim = run_scenario(&scenario).unwrap();
    let report = profile(
        &sim.registry.diagnosis_keys(),
        &sim.all_captures(),
        ProfileConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let subject_of = |agent: &str| Subject::of(&sim.registry.keys_of(agent)[0]);
    let (u1, u2) = (subject_of("User 1"), subject_of("User 2"));
    let route = |s: Subject| report.routes.get(&s).cloned().unwrap_or_default().join(",");
    check(route(u1) == "A,D,C,B,E,A", format!("User 1 route {}", route(u1)))?;
    check(route(u2) == "B,E,F", format!("User 2 route {}", route(u2)))?;
    let edge = report
        .edges
        .iter()
        .find(|e| e.involves(u1) && e.involves(u2))
        .ok_or("no User 1 / User 2 edge")?;
    let shared: Vec<&str> = edge.shared_stations.iter().map(String::as_str).collect();
    check(shared == ["B", "E"], format!("edge over {shared:?}"))?;

    let tol = i64::from(scenario.advertise_period_s);
    let mut worst = 0;
    for v in sim.truth.visits.iter().filter(|v| v.agent.starts_with("User")) {
        let s = subject_of(&v.agent);
        let seg = report
            .segments
            .iter()
            .find(|g| {
                g.subject == s && g.station_id == v.station && g.first_seen < v.depart && g.last_seen > v.arrive
            })
            .ok_or_else(|| format!("visit {} at {} not reconstructed", v.agent, v.station))?;
        worst = worst
            .max((seg.first_seen - v.arrive).abs())
            .max((seg.last_seen - v.depart).abs());
    }
    check(
        worst <= tol,
        format!("arrive/leave off by {worst} s, tolerance {tol} s"),
    )?;
    within(Duration::from_secs(10), started)?;
    Ok(format!(
        "routes exact, edge over B,E ({} s), worst arrive/leave error {worst} s",
        edge.overlap_s
    ))
}

fn wormhole_end_to_end() -> Outcome {
    let started = Instant::now();
    let attack = run_end_to_end(&WormholeExperiment::default()).map_err(|e| e.to_string())?;
    let best = attack.windows.iter().map(|w| w.duration_s()).max().unwrap_or(0);
    check(best >= 600, format!("longest window {best} s"))?;
    check(
        attack.windows.iter().any(|w| window_score(w) > Q::from_integer(0)),
        "no window scores above zero",
    )?;
    let control = run_end_to_end(&WormholeExperiment {
        enabled: false,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    check(
        control.windows.is_empty(),
        format!("control has {} windows", control.windows.len()),
    )?;
    let late = run_end_to_end(&WormholeExperiment {
        replay_delay_s: 2 * 3600 + 60,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    check(
        late.windows.is_empty(),
        format!("late replay has {} windows", late.windows.len()),
    )?;
    within(Duration::from_secs(30), started)?;
    Ok(format!(
        "attack window {best} s score {}; control 0 windows; replay after 2 h 0 windows",
        fixed(&attack.risk.score, 2)
    ))
}

fn property_suites() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(7);

    // Matcher false positives.
    let day = IntervalNumber(2_656_656);
    let teks: Vec<_> = (0..14)
        .map(|i| generate_tek(&mut rng, day.offset(144 * i)).unwrap())
        .collect();
    let index = DiagnosisIndex::new(&teks);
    let mut store = SightingStore::new();
    for i in 0..1_000_000i64 {
        let mut rpi = [0u8; 16];
        rng.fill_bytes(&mut rpi);
        store
            .ingest(
                &gap_lab::ble::Advertisement::new(Rpi(rpi), Aem(rng.gen())),
                day.start_unix() + i,
                -70,
            )
            .unwrap();
    }
    let fp = match_with_index(&store, &index, &MatchConfig::default()).len();
    check(fp == 0, format!("{fp} false-positive windows"))?;

    // Collision sweep.
    let mut seen = HashSet::new();
    for _ in 0..10_000 {
        let tek = generate_tek(&mut rng, day).unwrap();
        for (_, rpi) in expand_tek(&tek).slots {
            check(seen.insert(rpi), "RPI collision")?;
        }
    }

    // Simulator determinism.
    let logs = |seed| {
        let mut bytes = Vec::new();
        write_captures(&mut bytes, &run_scenario(&fig5_scenario(seed)).unwrap().all_captures()).unwrap();
        bytes
    };
    check(logs(11) == logs(11), "same seed gave different logs")?;

    // Broker fan-out and dedup.
    let clock = ManualClock::new(1_594_116_000);
    let broker = broker_serve("127.0.0.1:0", Arc::new(clock.clone()), |_| {}).map_err(|e| e.to_string())?;
    let addr = broker.local_addr().to_string();
    let mut x = BrokerClient::connect(&addr, "x").map_err(|e| e.to_string())?;
    let y = BrokerClient::connect(&addr, "y").map_err(|e| e.to_string())?;
    let z = BrokerClient::connect(&addr, "z").map_err(|e| e.to_string())?;
    let deadline = Instant::now() + Duration::from_secs(5);
    while broker.connections() < 3 && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(5));
    }
    let adv = |b: u8| gap_lab::ble::Advertisement::new(Rpi([b; 16]), Aem([b; 4]));
    for seq in 0..20u64 {
        let m = WormholeMessage::new("x", seq, &adv(seq as u8), clock.now(), 600);
        x.publish(&m).map_err(|e| e.to_string())?;
        x.publish(&m).map_err(|e| e.to_string())?;
    }
    for peer in [&y, &z] {
        let got = peer.recv_n(20, Duration::from_secs(5)).map_err(|e| e.to_string())?;
        let keys: HashSet<_> = got.iter().map(WormholeMessage::key).collect();
        check(keys.len() == 20, "duplicate delivered")?;
        check(
            peer.recv_timeout(Duration::from_millis(200))
                .map_err(|e| e.to_string())?
                .is_none(),
            "extra delivery",
        )?;
    }
    check(
        x.recv_timeout(Duration::from_millis(100))
            .map_err(|e| e.to_string())?
            .is_none(),
        "sender got its own message",
    )?;
    broker.shutdown();

    // Rebroadcaster expiry.
    let mut emissions = 0;
    for trial in 0..500u64 {
        let cadence = rng.gen_range(1..30);
        let mut rb = Rebroadcaster::new(cadence, gap_lab::ble::EXPOSURE_NOTIFICATION_UUID);
        let captured = rng.gen_range(0..1000);
        let window = rng.gen_range(1..600);
        let arrival = captured + rng.gen_range(0..700);
        let msg = WormholeMessage::new("x", trial, &adv(trial as u8), captured, window);
        let expires = msg.expires_at;
        rb.accept(msg, arrival);
        let mut now = arrival;
        while now < arrival + 2000 {
            for e in rb.due(now) {
                check(e.at < expires, format!("replayed at {} after expiry {expires}", e.at))?;
                emissions += 1;
            }
            now += rng.gen_range(1..40);
        }
    }

    within(Duration::from_secs(120), started)?;
    Ok(format!(
        "0 of 10^6 random RPIs matched, {} RPIs without collision, logs byte-identical, fan-out exact, {emissions} replays all before expiry",
        seen.len()
    ))
}

fn keyserver_contract() -> Outcome {
    const NOW: i64 = 1_594_080_000 + 12 * 3600;
    let tek = |days_ago: i64, b: u8| {
        let day = NOW.div_euclid(86_400) - days_ago;
        TemporaryExposureKey::new(KeyMaterial([b; 16]), IntervalNumber((day * 144) as u32), 4).unwrap()
    };
    let mut ks = KeyServer::new(SigningKey::from_bytes(&[5; 32]), "admin");
    let tan = ks.issue_tan("admin", NOW).map_err(|e| e.to_string())?;
    ks.upload(vec![tek(RETENTION_DAYS, 1)], &tan.token, NOW)
        .map_err(|e| e.to_string())?;
    check(
        matches!(
            ks.upload(vec![tek(1, 2)], &tan.token, NOW),
            Err(KeyServerError::ReplayedTan)
        ),
        "TAN accepted twice",
    )?;
    let tan = ks.issue_tan("admin", NOW).map_err(|e| e.to_string())?;
    check(
        matches!(
            ks.upload(vec![tek(RETENTION_DAYS + 1, 3)], &tan.token, NOW),
            Err(KeyServerError::MalformedBundle(_))
        ),
        "key older than retention accepted",
    )?;
    check(ks.purge(NOW).unwrap() == 0, "purged a key still inside retention")?;
    check(ks.purge(NOW + 86_400).unwrap() == 1, "key past retention not purged")?;

    let tan = ks.issue_tan("admin", NOW).map_err(|e| e.to_string())?;
    ks.upload(vec![tek(1, 4), tek(2, 5)], &tan.token, NOW)
        .map_err(|e| e.to_string())?;
    let agg = ks.download(0, NOW);
    let key = ks.verifying_key();
    agg.verify(&key).map_err(|e| e.to_string())?;
    let mut tampered = 0;
    for i in 0..agg.payload.len() {
        let mut bytes = agg.payload.clone().into_bytes();
        bytes[i] ^= 1;
        let mut t = agg.clone();
        t.payload = String::from_utf8(bytes).unwrap();
        check(t.verify(&key).is_err(), format!("tampered byte {i} verified"))?;
        tampered += 1;
    }
    Ok(format!(
        "TAN single-use, {RETENTION_DAYS}-day boundary exact, all {tampered} tampered payloads rejected"
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        (1, "crypto vector pinning", crypto_vectors),
        (2, "interval arithmetic", interval_arithmetic),
        (3, "airtime chain", airtime_chain),
        (4, "feasibility suite", feasibility_suite),
        (5, "profiling end-to-end", profiling_end_to_end),
        (6, "wormhole end-to-end", wormhole_end_to_end),
        (7, "property suites", property_suites),
        (8, "key-server contract", keyserver_contract),
    ];
    let mut unexpected = 0;
    for (n, name, run) in criteria {
        let started = Instant::now();
        let outcome = run();
        let took = started.elapsed();
        let known = KNOWN_RED.iter().find(|(k, _)| *k == n).map(|(_, why)| *why);
        match (&outcome, known) {
            (Ok(detail), None) => println!("criterion {n} {name}: PASS ({detail}) [{took:.2?}]"),
            (Err(why), Some(reason)) => {
                println!("criterion {n} {name}: FAIL known ({why}) [{reason}] [{took:.2?}]")
            }
            (Err(why), None) => {
                unexpected += 1;
                println!("criterion {n} {name}: FAIL ({why}) [{took:.2?}]");
            }
            (Ok(detail), Some(_)) => {
                unexpected += 1;
                println!(
                    "criterion {n} {name}: PASS but listed as known red; update KNOWN_RED ({detail}) [{took:.2?}]"
                );
            }
        }
    }
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
