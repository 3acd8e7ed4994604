//! A phone's view: it records advertisements, downloads published keys and
//! decides whether it was exposed.
//!
//! Run with `cargo run --example matcher`.

use gap_lab::matcher::{match_exposures, score, window_score, MatchConfig, SightingStore};
use gap_lab::rational::fixed;
use gap_lab::sim::{fig5_scenario, run_scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sim = run_scenario(&fig5_scenario(7))?;
    let published = sim.registry.diagnosis_keys();
    let config = MatchConfig::default();

    // Each station stands in for a phone that stayed put all day.
    for (station, log) in &sim.logs {
        let store = SightingStore::from_captures(log);
        let result = score(match_exposures(&store, &published, &config), &config);
        println!(
            "phone at {station}: {} sightings, {} windows, score {}, high risk {}",
            store.len(),
            result.windows.len(),
            fixed(&result.score, 2),
            result.high_risk
        );
        for w in &result.windows {
            println!(
                "    key {} {} .. {} ({} s, {} matches, score {})",
                &w.tek.key.to_hex()[..8],
                w.first_match,
                w.last_match,
                w.duration_s(),
                w.matched_count,
                fixed(&window_score(w), 2)
            );
        }
    }
    Ok(())
}
