//! Starts a key server on a local port, uploads two diagnosed users' keys
//! with single-use TANs, downloads the signed aggregate and verifies it.
//!
//! Run with `cargo run --example keyserver`.

use std::sync::Arc;

use ed25519_dalek::SigningKey;
use gap_lab::clock::ManualClock;
use gap_lab::keyserver::{parse_public_key, serve_keys, KeyServer, KeyServerClient};
use gap_lab::sim::{fig5_scenario, run_scenario, FIG5_DAY_START};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sim = run_scenario(&fig5_scenario(7))?;

    // The day after the scenario, 09:00 UTC.
    let clock = ManualClock::new(FIG5_DAY_START + 86_400 + 9 * 3600);
    let server = KeyServer::new(SigningKey::from_bytes(&[7; 32]), "admin-secret");
    let handle = serve_keys("127.0.0.1:0", server, Arc::new(clock.clone()))?;
    println!("key server on {}", handle.local_addr());

    let mut client = KeyServerClient::connect(handle.local_addr())?;
    for user in &sim.registry.diagnosed {
        let tan = client.issue_tan("admin-secret")?;
        let receipt = client.upload(sim.registry.keys_of(user), &tan.token)?;
        println!(
            "{user}: bundle {} with {} keys",
            receipt.bundle_id, receipt.accepted_keys
        );
        match client.upload(sim.registry.keys_of(user), &tan.token) {
            Err(e) => println!("{user}: reusing the TAN is refused ({e})"),
            Ok(_) => println!("{user}: TAN accepted twice, which should not happen"),
        }
    }

    let public_key = parse_public_key(&client.public_key()?)?;
    let aggregate = client.download(0)?;
    let body = aggregate.verify(&public_key)?;
    println!(
        "downloaded {} bundles, {} keys, signature valid",
        body.bundles.len(),
        body.teks().len()
    );

    let mut bytes = aggregate.payload.clone().into_bytes();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    let mut tampered = aggregate.clone();
    tampered.payload = String::from_utf8(bytes)?;
    println!("tampered aggregate verifies: {}", tampered.verify(&public_key).is_ok());

    handle.shutdown();
    Ok(())
}
