//! Relays advertisements captured at one site to a second site 40 km away
//! through a TCP broker, and shows the victim at the second site being told
//! it was exposed. A control run and a late replay show the opposite.
//!
//! Run with `cargo run --example wormhole_attack`.

use gap_lab::rational::fixed;
use gap_lab::wormhole::{run_end_to_end, WormholeExperiment};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let runs = [
        ("attack", WormholeExperiment::default()),
        (
            "control",
            WormholeExperiment {
                enabled: false,
                ..Default::default()
            },
        ),
        (
            "replay 3 h late",
            WormholeExperiment {
                replay_delay_s: 3 * 3600,
                ..Default::default()
            },
        ),
    ];
    for (label, exp) in runs {
        let report = run_end_to_end(&exp)?;
        println!(
            "{label}: sniffed {} frames, published {}, relayed {}, replayed {} times",
            report.sniffed_frames, report.published, report.relayed, report.emissions
        );
        println!(
            "    victim store {} sightings ({} replayed), {} windows, score {}, high risk {}",
            report.victim_sightings,
            report.replayed_sightings,
            report.windows.len(),
            fixed(&report.risk.score, 2),
            report.risk.high_risk
        );
        for w in &report.windows {
            println!(
                "    window {} .. {} ({} s)",
                w.first_match,
                w.last_match,
                w.duration_s()
            );
        }
        if label == "attack" {
            for line in report.log_x.iter().take(2).chain(report.log_y.iter().take(3)) {
                println!("    | {line}");
            }
        }
    }
    Ok(())
}
