//! Attributes sniffer captures to published keys, then rebuilds each
//! subject's movements, who met whom, and which subjects on different days
//! are probably the same person.
//!
//! Run with `cargo run --example profiling`.

use gap_lab::profiler::{profile, timelines, ProfileConfig};
use gap_lab::sim::{commuter_scenario, fig5_scenario, run_scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sim = run_scenario(&fig5_scenario(7))?;
    let report = profile(
        &sim.registry.diagnosis_keys(),
        &sim.all_captures(),
        ProfileConfig::default(),
    )?;
    println!(
        "{} RPIs indexed, {} of {} captures attributed",
        report.indexed_rpis,
        report.sightings.len(),
        report.records_read
    );
    for (subject, line) in timelines(&report.segments) {
        println!("{subject}: {}", report.routes[&subject].join(" -> "));
        for seg in line {
            println!(
                "    {} {} .. {} ({} sightings)",
                seg.station_id, seg.first_seen, seg.last_seen, seg.sighting_count
            );
        }
    }
    for edge in &report.edges {
        let shared: Vec<&str> = edge.shared_stations.iter().map(String::as_str).collect();
        println!(
            "met: {} -- {} at {} for {} s",
            edge.a,
            edge.b,
            shared.join(","),
            edge.overlap_s
        );
    }

    let sim = run_scenario(&commuter_scenario(7))?;
    let report = profile(
        &sim.registry.diagnosis_keys(),
        &sim.all_captures(),
        ProfileConfig::default(),
    )?;
    println!("\nroutines over two days:");
    for link in report.links.links(report.config.link_threshold) {
        println!("  {} ~ {} similarity {:.3}", link.earlier, link.later, link.similarity);
    }
    Ok(())
}
