//! Prints every attack-feasibility calculation with its intermediate steps,
//! then one what-if: how many relay devices a lower incidence would need.
//!
//! Run with `cargo run --example feasibility`.

use gap_lab::feasibility::{all_chains, wormhole_devices_needed, CollectionParams, EpidemicParams};
use gap_lab::rational::{fixed, parse_decimal};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for calc in all_chains() {
        print!("{}", calc.to_text());
        println!();
    }

    let collection = CollectionParams::new(parse_decimal("30.43")?);
    for incidence in ["5.1", "25", "50"] {
        let params = EpidemicParams {
            incidence_per_100k_week: parse_decimal(incidence)?,
            ..EpidemicParams::germany_2020()
        };
        let needed = wormhole_devices_needed(&params, &collection)?;
        println!(
            "incidence {incidence:>4}: {} devices ({} exact)",
            needed.rounded,
            fixed(&needed.raw, 2)
        );
    }
    Ok(())
}
