//! Encodes one advertisement, decodes it back, and works out how many
//! advertisements a single sniffer can hear per second.
//!
//! Run with `cargo run --example ble_airtime`.

use gap_lab::ble::{
    decode_advertisement, effective_adverts_per_second, encode_advertisement, Advertisement, AirtimeModel,
    LinkBudget,
};
use gap_lab::crypto::{beacon_for, colon_hex, IntervalNumber, KeyMaterial, Metadata, TemporaryExposureKey};
use gap_lab::rational::fixed;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tek = TemporaryExposureKey::new(
        KeyMaterial::from_hex("fd3df1b125a21a28f1d7746fd5a46538")?,
        IntervalNumber(2_656_656),
        0,
    )?;
    let (rpi, aem) = beacon_for(&tek, IntervalNumber(2_656_788), &Metadata::default());
    let adv = Advertisement::new(rpi, aem);
    let frame = encode_advertisement(&adv);
    println!("frame ({} bytes): {}", frame.len(), colon_hex(&frame));
    let back = decode_advertisement(&frame)?;
    println!(
        "decoded {} rpi {} aem {}",
        back.kind(),
        back.rpi.to_hex(),
        back.aem.to_hex()
    );

    let budget = LinkBudget::default();
    for (label, model) in [
        ("1M PHY, 150 us IFS", AirtimeModel::default()),
        ("1M PHY, no IFS", AirtimeModel::default().with_inter_frame_space(0)),
        ("2M PHY, 150 us IFS", AirtimeModel::default().with_phy_rate(2_000_000)),
    ] {
        let effective = effective_adverts_per_second(&model, &budget)?;
        println!(
            "{label:<20} on-air {:>6} us  max {:>8}/s  at {}% reception {:>6}/s",
            fixed(&model.on_air_us(), 0),
            fixed(&model.max_adverts_per_second(), 2),
            fixed(&(budget.rx_fraction * gap_lab::rational::int(100)), 1),
            fixed(&effective, 0),
        );
    }
    Ok(())
}
