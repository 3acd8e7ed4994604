//! Derives identifiers from a published key, then recovers the 4-byte
//! metadata plaintext behind two captured AEMs.
//!
//! Run with `cargo run --example key_schedule`.

use gap_lab::crypto::{
    derive_aemk, derive_rpi, derive_rpik, encrypt_aem, Aem, DerivedKey, IntervalNumber, KeyMaterial, Metadata,
    Rpi, TemporaryExposureKey,
};

/// AES-CTR is a bytewise XOR, so each metadata byte can be found on its own:
/// 4 x 256 trial encryptions cover the whole plaintext space.
fn recover_metadata(aemk: &DerivedKey, rpi: &Rpi, aem: &Aem) -> Metadata {
    let mut found = [0u8; 4];
    for (pos, slot) in found.iter_mut().enumerate() {
        for candidate in 0..=255u8 {
            let mut trial = [0u8; 4];
            trial[pos] = candidate;
            let out = encrypt_aem(aemk, rpi, &Metadata(trial)).expect("aem key");
            if out.0[pos] == aem.0[pos] {
                *slot = candidate;
                break;
            }
        }
    }
    Metadata(found)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let start = IntervalNumber::from_unix(1_594_072_800)?;
    println!("2020-07-07 00:00 GMT+2 -> interval {}", start.value());

    let tek = TemporaryExposureKey::new(
        KeyMaterial::from_hex("fd3df1b125a21a28f1d7746fd5a46538")?,
        start.day_start(),
        0,
    )?;
    let rpik = derive_rpik(&tek);
    let aemk = derive_aemk(&tek);

    let captured = [(2_656_788, "a4e4489c"), (2_656_789, "3d167031")];
    for (interval, aem_hex) in captured {
        let rpi = derive_rpi(&rpik, IntervalNumber(interval))?;
        let aem = Aem::from_hex(aem_hex)?;
        let metadata = recover_metadata(&aemk, &rpi, &aem);
        let check = encrypt_aem(&aemk, &rpi, &metadata)?;
        println!(
            "interval {interval}: rpi {} aem {} metadata {} (re-encrypts to {})",
            rpi.to_hex(),
            aem.to_hex(),
            metadata.to_hex(),
            check.to_hex()
        );
    }
    Ok(())
}
