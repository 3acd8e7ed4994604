use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{
    load_teks, Builtin, Calc, CliError, Command, DemoArgs, FeasibilityArgs, KeygenArgs, MatchArgs, NodeArgs,
    ProfileArgs, ReportArgs, ServeKeysArgs, SimulateArgs, UploadArgs, WormholeCommand,
};
use crate::ble::{AirtimeModel, LinkBudget};
use crate::clock::{Clock, OffsetClock, SystemClock};
use crate::crypto::{expand_tek, generate_tek, IntervalNumber, TemporaryExposureKey};
use crate::feasibility::{self as fz, Calculation, CollectionParams, CoveragePlan, EpidemicParams};
use crate::keyserver::{load_or_create_signing_key, parse_public_key, serve_keys, KeyServer, KeyServerClient};
use crate::matcher::{match_exposures, score, write_windows_csv, MatchConfig, SightingStore};
use crate::profiler::{emit_report, profile, ProfileConfig};
use crate::rational::{fixed, parse_decimal, Q};
use crate::sim::{
    commuter_scenario, fig5_scenario, load_scenario, read_capture_dir, run_scenario, write_station_logs,
    ScenarioFile,
};
use crate::wormhole::{broker_serve, run_end_to_end, run_node, AttackReport, NodeConfig, WormholeExperiment};

type Out<'a> = &'a mut dyn Write;

pub(super) fn dispatch(cmd: Command, out: Out, err: Out) -> Result<(), CliError> {
    match cmd {
        Command::Keygen(a) => keygen(a, out),
        Command::Simulate(a) => simulate(a, out),
        Command::ServeKeys(a) => serve(a, out),
        Command::Upload(a) => upload(a, out),
        Command::Download(a) => download(a, out),
        Command::Match(a) => match_cmd(a, out),
        Command::Wormhole(WormholeCommand::Broker(a)) => broker(a.listen, a.run_for, out, err),
        Command::Wormhole(WormholeCommand::Node(a)) => node(a, out),
        Command::Wormhole(WormholeCommand::Demo(a)) => demo(a, out),
        Command::Profile(a) => profile_cmd(a, out),
        Command::Feasibility(a) => feasibility(a, out),
        Command::Report(a) => report(a, out),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn decimal(name: &str, s: &str) -> Result<Q, CliError> {
    parse_decimal(s).map_err(|_| usage(format!("--{name}: not a decimal number: {s:?}")))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn keygen(a: KeygenArgs, out: Out) -> Result<(), CliError> {
    if let Some(path) = a.signing_key {
        let key = load_or_create_signing_key(&path)?;
        writeln!(out, "signing key: {}", path.display())?;
        writeln!(out, "public key:  {}", hex::encode(key.verifying_key().to_bytes()))?;
        return Ok(());
    }
    if a.days == 0 || a.days > 14 {
        return Err(usage("--days must be between 1 and 14"));
    }
    let first_day = match &a.day {
        Some(d) => NaiveDate::parse_from_str(d, "%Y-%m-%d")
            .map_err(|e| usage(format!("--day {d:?}: {e}")))?
            .and_hms_opt(0, 0, 0)
            .expect("midnight")
            .and_utc()
            .timestamp(),
        None => SystemClock.now().div_euclid(86_400) * 86_400,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(a.seed.seed);
    let mut teks = Vec::new();
    for d in 0..a.days {
        let start = IntervalNumber::from_unix(first_day + i64::from(d) * 86_400)?;
        let mut tek = generate_tek(&mut rng, start)?;
        tek.transmission_risk_level = a.risk;
        tek.validate()?;
        teks.push(tek);
    }
    match &a.out {
        Some(path) => {
            write_json(path, &teks)?;
            writeln!(out, "wrote {} key(s) to {}", teks.len(), path.display())?;
        }
        None => writeln!(out, "{}", serde_json::to_string_pretty(&teks)?)?,
    }
    if a.list_rpis {
        for tek in &teks {
            writeln!(out, "TEK: {}", tek.key)?;
            for (interval, rpi) in expand_tek(tek).slots {
                writeln!(out, "{interval} {rpi}")?;
            }
        }
    }
    Ok(())
}

fn simulate(a: SimulateArgs, out: Out) -> Result<(), CliError> {
    let seed = a.seed.seed;
    let scenario = match (&a.scenario, a.builtin) {
        (Some(path), _) => load_scenario(path, Some(seed))?,
        (None, Some(Builtin::Fig5)) => fig5_scenario(seed),
        (None, Some(Builtin::Commuter)) => commuter_scenario(seed),
        (None, None) => return Err(usage("one of --scenario or --builtin is required")),
    };
    if let Some(path) = &a.dump_scenario {
        fs::write(path, ScenarioFile::from_scenario(&scenario).to_toml())?;
        writeln!(out, "scenario written to {}", path.display())?;
    }
    let sim = run_scenario(&scenario)?;
    let mut logs = sim.logs.clone();
    for st in &scenario.stations {
        logs.entry(st.id.clone()).or_default();
    }
    let paths = write_station_logs(&logs, &a.out)?;
    let keys_path = a.out.join("keys.json");
    write_json(&keys_path, &sim.registry.diagnosis_keys())?;
    writeln!(out, "scenario {} seed {seed}", scenario.name)?;
    for (p, (station, records)) in paths.iter().zip(&logs) {
        writeln!(out, "  {station}: {} records -> {}", records.len(), p.display())?;
    }
    for agent in &sim.registry.diagnosed {
        let path = a.out.join(format!("keys-{}.json", file_stem(agent)));
        write_json(&path, &sim.registry.keys_of(agent))?;
        writeln!(out, "  keys of {agent} -> {}", path.display())?;
    }
    writeln!(
        out,
        "  {} diagnosis key(s) -> {}",
        sim.registry.diagnosis_keys().len(),
        keys_path.display()
    )?;
    Ok(())
}

/// `User 1` becomes `user-1`.
fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect()
}

fn serve(a: ServeKeysArgs, out: Out) -> Result<(), CliError> {
    let key = load_or_create_signing_key(&a.signing_key)?;
    let server = KeyServer::open(key, &a.admin_token, &a.store)?;
    let clock: Arc<dyn Clock> = match a.clock {
        Some(t) => Arc::new(OffsetClock::starting_at(t)),
        None => Arc::new(SystemClock),
    };
    let public = server.public_key_hex();
    let handle = serve_keys(&a.listen, server, clock)?;
    writeln!(out, "key server listening on {}", handle.local_addr())?;
    writeln!(out, "public key {public}")?;
    out.flush()?;
    match a.run_for {
        Some(secs) => {
            std::thread::sleep(Duration::from_secs(secs));
            handle.shutdown();
        }
        None => handle.wait(),
    }
    Ok(())
}

fn upload(a: UploadArgs, out: Out) -> Result<(), CliError> {
    let keys = load_teks(&a.keys, None)?;
    let mut client = KeyServerClient::connect(a.server.as_str())?;
    let tan = match (a.tan, a.admin_token) {
        (Some(t), _) => t,
        (None, Some(admin)) => client.issue_tan(&admin)?.token,
        (None, None) => return Err(usage("one of --tan or --admin-token is required")),
    };
    let receipt = client.upload(&keys.teks, &tan)?;
    writeln!(out, "{}", serde_json::to_string(&receipt)?)?;
    Ok(())
}

fn download(a: super::DownloadArgs, out: Out) -> Result<(), CliError> {
    let mut client = KeyServerClient::connect(a.server.as_str())?;
    let key_hex = match a.server_key {
        Some(k) => k,
        None => client.public_key()?,
    };
    let key = parse_public_key(&key_hex)?;
    let agg = client.download(a.since)?;
    let body = agg.verify(&key)?;
    write_json(&a.out, &agg)?;
    writeln!(
        out,
        "{} bundle(s), {} key(s), signature ok -> {}",
        body.bundles.len(),
        body.teks().len(),
        a.out.display()
    )?;
    Ok(())
}

fn match_cmd(a: MatchArgs, out: Out) -> Result<(), CliError> {
    let keys = load_teks(&a.bundles, a.server_key.as_deref())?;
    let mut records = read_capture_dir(&a.captures)?;
    if let Some(st) = &a.station {
        records.retain(|r| &r.station_id == st);
    }
    let store = SightingStore::from_captures(&records);
    let config = MatchConfig {
        merge_gap_s: a.merge_gap,
        high_risk_threshold: decimal("threshold", &a.threshold)?,
    };
    let windows = match_exposures(&store, &keys.teks, &config);
    let result = score(windows, &config);
    write_windows_csv(&mut *out, &result.windows)?;
    if let Some(path) = &a.out {
        write_windows_csv(BufWriter::new(fs::File::create(path)?), &result.windows)?;
    }
    writeln!(
        out,
        "sightings {} keys {} windows {} score {} high_risk {}",
        store.len(),
        keys.teks.len(),
        result.windows.len(),
        fixed(&result.score, 2),
        result.high_risk
    )?;
    Ok(())
}

fn broker(listen: String, run_for: Option<u64>, out: Out, _err: Out) -> Result<(), CliError> {
    let handle = broker_serve(&listen, Arc::new(SystemClock), |line| eprintln!("{line}"))?;
    writeln!(out, "broker listening on {}", handle.local_addr())?;
    out.flush()?;
    match run_for {
        Some(secs) => {
            std::thread::sleep(Duration::from_secs(secs));
            handle.shutdown();
        }
        None => handle.wait(),
    }
    Ok(())
}

fn node(a: NodeArgs, out: Out) -> Result<(), CliError> {
    let role = a.role.parse().map_err(usage)?;
    if a.cadence <= 0 || a.window <= 0 {
        return Err(usage("--cadence and --window must be positive"));
    }
    let mut config = NodeConfig::new(&a.id, &a.broker, role);
    config.replay_cadence_s = a.cadence;
    config.replay_window_s = a.window;
    let input: Option<Box<dyn io::BufRead + Send>> = match &a.input {
        None => None,
        Some(p) if p.as_os_str() == "-" => Some(Box::new(BufReader::new(io::stdin()))),
        Some(p) => Some(Box::new(BufReader::new(fs::File::open(p)?))),
    };
    let summary = run_node(
        &config,
        input,
        Duration::from_secs(a.run_for),
        Arc::new(SystemClock),
        out,
    )?;
    writeln!(
        out,
        "frames {} published {} received {} emitted {}",
        summary.frames_read, summary.published, summary.received, summary.emitted
    )?;
    Ok(())
}

fn print_attack(r: &AttackReport, out: Out) -> io::Result<()> {
    let e = &r.experiment;
    writeln!(
        out,
        "wormhole {} replay_delay {}s network_delay {}ms window {}s cadence {}s",
        if e.enabled { "on" } else { "off" },
        e.replay_delay_s,
        e.network_delay_ms,
        e.replay_window_s,
        e.cadence_s
    )?;
    writeln!(
        out,
        "sniffed {} frames, published {}, relayed {}, replayed {} times, victim recorded {} sightings ({} replayed)",
        r.sniffed_frames, r.published, r.relayed, r.emissions, r.victim_sightings, r.replayed_sightings
    )?;
    if !r.relay_latency_ms.is_empty() {
        let max = r.relay_latency_ms.iter().copied().fold(0.0, f64::max);
        writeln!(
            out,
            "relay latency max {max:.2} ms over {} messages",
            r.relay_latency_ms.len()
        )?;
    }
    for w in &r.windows {
        writeln!(
            out,
            "window tek {} {}..{} duration {}s matches {}",
            w.tek.key,
            w.first_match,
            w.last_match,
            w.duration_s(),
            w.matched_count
        )?;
    }
    writeln!(
        out,
        "windows {} score {} high_risk {}",
        r.windows.len(),
        fixed(&r.risk.score, 2),
        r.risk.high_risk
    )
}

fn write_attack_files(r: &AttackReport, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("node-x.log"), r.log_x.join("\n") + "\n")?;
    fs::write(dir.join("node-y.log"), r.log_y.join("\n") + "\n")?;
    write_windows_csv(
        BufWriter::new(fs::File::create(dir.join("victim-windows.csv"))?),
        &r.windows,
    )?;
    Ok(())
}

fn demo(a: DemoArgs, out: Out) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&a.victim_rx) {
        return Err(usage("--victim-rx must be within [0, 1]"));
    }
    if a.cadence <= 0 || a.window <= 0 {
        return Err(usage("--cadence and --window must be positive"));
    }
    let exp = WormholeExperiment {
        seed: a.seed.seed,
        enabled: !a.no_wormhole,
        replay_delay_s: a.replay_delay,
        network_delay_ms: a.network_delay_ms,
        replay_window_s: a.window,
        cadence_s: a.cadence,
        victim_rx_probability: a.victim_rx,
    };
    let r = run_end_to_end(&exp)?;
    for line in r.log_x.iter().take(4).chain(r.log_y.iter().take(4)) {
        writeln!(out, "{line}")?;
    }
    print_attack(&r, out)?;
    if let Some(dir) = &a.out {
        write_attack_files(&r, dir)?;
    }
    Ok(())
}

fn profile_cmd(a: ProfileArgs, out: Out) -> Result<(), CliError> {
    let keys = load_teks(&a.bundles, a.server_key.as_deref())?;
    let records = read_capture_dir(&a.captures)?;
    let config = ProfileConfig {
        merge_gap_s: a.merge_gap,
        min_overlap_s: a.min_overlap,
        link_threshold: a.link_threshold,
    };
    let report = profile(&keys.teks, &records, config)?;
    let paths = emit_report(&report, &a.out)?;
    writeln!(
        out,
        "{} records, {} attributed to {} subject(s) via {} indexed RPIs",
        report.records_read,
        report.sightings.len(),
        report.routes.len(),
        report.indexed_rpis
    )?;
    out.write_all(&fs::read(a.out.join("routes.txt"))?)?;
    for e in &report.edges {
        let shared: Vec<&str> = e.shared_stations.iter().map(String::as_str).collect();
        writeln!(
            out,
            "co-located {} {} at {} for {} s",
            e.a,
            e.b,
            shared.join(","),
            e.overlap_s
        )?;
    }
    for p in paths {
        writeln!(out, "wrote {}", p.display())?;
    }
    Ok(())
}

fn epidemic(incidence: Option<&str>) -> Result<EpidemicParams, CliError> {
    let mut p = EpidemicParams::germany_2020();
    if let Some(i) = incidence {
        p.incidence_per_100k_week = decimal("incidence", i)?;
    }
    Ok(p)
}

fn parse_category(s: &str) -> Result<(String, u32, u32), CliError> {
    let bad = || usage(format!("--category {s:?}: expected name=lo-hi or name=n"));
    let (name, range) = s.split_once('=').ok_or_else(bad)?;
    let (lo, hi) = range.split_once('-').unwrap_or((range, range));
    Ok((
        name.trim().to_string(),
        lo.trim().parse().map_err(|_| bad())?,
        hi.trim().parse().map_err(|_| bad())?,
    ))
}

fn calculations(calc: &Calc) -> Result<Vec<Calculation>, CliError> {
    Ok(match calc {
        Calc::CollectionRate { rpis, duration } => {
            vec![fz::collection_chain(
                *rpis,
                fz::parse_duration(duration).map_err(|e| usage(e.to_string()))?,
            )?]
        }
        Calc::RpisPerPositive { incidence } => {
            let p = epidemic(Some(incidence))?;
            let v = fz::rpis_per_positive(&p)?;
            vec![Calculation {
                calc: "rpis-per-positive".into(),
                steps: vec![fz::Step {
                    label: "rpis_per_positive".into(),
                    expression: format!("1 / ({} / 100000 / 7 * 14)", fixed(&p.incidence_per_100k_week, 2)),
                    value: fixed(&v, 2),
                    exact: v.to_string(),
                }],
            }]
        }
        Calc::WormholeDevices {
            incidence,
            rate,
            validity,
        } => {
            let mut c = CollectionParams::new(decimal("rate", rate)?);
            c.avg_rpi_validity_min = decimal("validity", validity)?;
            vec![fz::devices_chain(&epidemic(Some(incidence))?, &c)?]
        }
        Calc::TestCenter {
            tests,
            positive_rate,
            upload_share,
            window,
        } => {
            let p = EpidemicParams {
                positive_test_rate: decimal("positive-rate", positive_rate)?,
                upload_share: decimal("upload-share", upload_share)?,
                ..EpidemicParams::germany_2020()
            };
            vec![fz::test_center_chain(
                &p,
                decimal("tests", tests)?,
                decimal("window", window)?,
            )?]
        }
        Calc::ReplayExposures { uploads, window } => {
            let (u, w) = (decimal("uploads", uploads)?, decimal("window", window)?);
            let v = fz::replay_exposures(u, w)?;
            vec![Calculation {
                calc: "replay-exposures".into(),
                steps: vec![fz::Step {
                    label: "replayable_positives".into(),
                    expression: format!("{} / 60 * {}", fixed(&u, 2), fixed(&w, 2)),
                    value: fixed(&v, 2),
                    exact: v.to_string(),
                }],
            }]
        }
        Calc::Targeted { rate, hours, days } => vec![fz::targeted_chain(decimal("rate", rate)?, *hours, *days)?],
        Calc::Coverage { categories } => {
            let plan = if categories.is_empty() {
                CoveragePlan::city_estimate()
            } else {
                CoveragePlan {
                    categories: categories.iter().map(|c| parse_category(c)).collect::<Result<_, _>>()?,
                }
            };
            vec![fz::coverage_chain(&plan)?]
        }
        Calc::Airtime {
            phy_rate,
            ifs,
            rx_fraction,
        } => {
            let model = AirtimeModel::default()
                .with_phy_rate(*phy_rate)
                .with_inter_frame_space(*ifs);
            let budget = LinkBudget {
                rx_fraction: decimal("rx-fraction", rx_fraction)?,
                ..LinkBudget::default()
            };
            vec![fz::airtime_chain(&model, &budget)?]
        }
        Calc::All => fz::all_chains(),
    })
}

fn feasibility(a: FeasibilityArgs, out: Out) -> Result<(), CliError> {
    let calcs = calculations(&a.calc)?;
    if a.json {
        let value = if calcs.len() == 1 {
            serde_json::to_value(&calcs[0])?
        } else {
            serde_json::to_value(&calcs)?
        };
        writeln!(out, "{}", serde_json::to_string_pretty(&value)?)?;
    } else {
        for c in &calcs {
            write!(out, "{}", c.to_text())?;
            if let Some(last) = c.steps.last() {
                writeln!(out, "  result: {}", last.value)?;
            }
        }
    }
    Ok(())
}

fn report(a: ReportArgs, out: Out) -> Result<(), CliError> {
    let seed = a.seed.seed;
    let dir = &a.out;
    fs::create_dir_all(dir)?;

    let scenario = fig5_scenario(seed);
    let sim = run_scenario(&scenario)?;
    let caps = dir.join("captures");
    write_station_logs(&sim.logs, &caps)?;
    let keys: Vec<TemporaryExposureKey> = sim.registry.diagnosis_keys();
    write_json(&dir.join("keys.json"), &keys)?;
    let prof = profile(&keys, &sim.all_captures(), ProfileConfig::default())?;
    emit_report(&prof, &dir.join("profile"))?;
    writeln!(out, "# profiling (fig5, seed {seed})")?;
    out.write_all(&fs::read(dir.join("profile").join("routes.txt"))?)?;

    let commuter = run_scenario(&commuter_scenario(seed))?;
    let cprof = profile(
        &commuter.registry.diagnosis_keys(),
        &commuter.all_captures(),
        ProfileConfig::default(),
    )?;
    emit_report(&cprof, &dir.join("profile-commuter"))?;
    writeln!(out, "# cross-day links (commuter, seed {seed})")?;
    for l in cprof.links.links(cprof.config.link_threshold) {
        writeln!(out, "{} ~ {} {:.3}", l.earlier, l.later, l.similarity)?;
    }

    for (name, exp) in [
        (
            "wormhole",
            WormholeExperiment {
                seed,
                ..WormholeExperiment::default()
            },
        ),
        (
            "wormhole-control",
            WormholeExperiment {
                seed,
                enabled: false,
                ..WormholeExperiment::default()
            },
        ),
        (
            "wormhole-late",
            WormholeExperiment {
                seed,
                replay_delay_s: 3 * 3600,
                ..WormholeExperiment::default()
            },
        ),
    ] {
        let r = run_end_to_end(&exp)?;
        writeln!(out, "# {name}")?;
        print_attack(&r, out)?;
        write_attack_files(&r, &dir.join(name))?;
    }

    let chains = fz::all_chains();
    write_json(&dir.join("feasibility.json"), &chains)?;
    let text: String = chains.iter().map(Calculation::to_text).collect();
    fs::write(dir.join("feasibility.txt"), &text)?;
    writeln!(out, "# feasibility")?;
    write!(out, "{text}")?;
    writeln!(out, "# wrote {}", dir.display())?;
    Ok(())
}
