//! Exposure-notification advertisements on the BLE link layer.
//!
//! The codec writes the three AD structures an exposure-notification beacon
//! carries (flags, complete 16-bit service UUID list, service data) for a
//! 31-byte advertising payload. The airtime model uses the 26/39/47-byte
//! accounting (service payload, advertising PDU, on-air packet).

use num_traits::{One, Zero};
use thiserror::Error;

use crate::crypto::{Aem, Rpi};
use crate::rational::{int, Q};

/// Google/Apple exposure notification service.
pub const EXPOSURE_NOTIFICATION_UUID: u16 = 0xFD6F;
/// DP-3T prestandard sample app service.
pub const DP3T_PRESTANDARD_UUID: u16 = 0xFD68;

const AD_FLAGS: u8 = 0x01;
const AD_COMPLETE_UUID16: u8 = 0x03;
const AD_SERVICE_DATA_UUID16: u8 = 0x16;
/// LE General Discoverable, BR/EDR not supported, simultaneous LE/BR-EDR bits.
const FLAGS_VALUE: u8 = 0x1A;

/// Length of `rpi || aem` inside the service data.
pub const SERVICE_PAYLOAD_LEN: usize = 20;
/// Length of the encoded advertising payload.
pub const ENCODED_LEN: usize = 31;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("malformed advertising frame: {0}")]
    MalformedFrame(String),
    #[error("service 0x{0:04X} is not an exposure notification service")]
    NotExposureService(u16),
    #[error("field {field} must be {expected} bytes, got {actual}")]
    FieldLength {
        field: &'static str,
        expected: usize,
        actual: usize,
    },
}

pub fn is_exposure_service(uuid: u16) -> bool {
    uuid == EXPOSURE_NOTIFICATION_UUID || uuid == DP3T_PRESTANDARD_UUID
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Advertisement {
    pub rpi: Rpi,
    pub aem: Aem,
    pub service_uuid: u16,
}

impl Advertisement {
    pub fn new(rpi: Rpi, aem: Aem) -> Self {
        Self {
            rpi,
            aem,
            service_uuid: EXPOSURE_NOTIFICATION_UUID,
        }
    }

    /// Builds an advertisement from `rpi || aem`.
    pub fn from_payload(payload: &[u8], service_uuid: u16) -> Result<Self, FrameError> {
        if payload.len() != SERVICE_PAYLOAD_LEN {
            return Err(FrameError::FieldLength {
                field: "payload",
                expected: SERVICE_PAYLOAD_LEN,
                actual: payload.len(),
            });
        }
        let mut rpi = [0u8; 16];
        let mut aem = [0u8; 4];
        rpi.copy_from_slice(&payload[..16]);
        aem.copy_from_slice(&payload[16..]);
        Ok(Self {
            rpi: Rpi(rpi),
            aem: Aem(aem),
            service_uuid,
        })
    }

    pub fn payload(&self) -> [u8; SERVICE_PAYLOAD_LEN] {
        let mut out = [0u8; SERVICE_PAYLOAD_LEN];
        out[..16].copy_from_slice(self.rpi.as_bytes());
        out[16..].copy_from_slice(self.aem.as_bytes());
        out
    }

    /// Label used in node logs.
    pub fn kind(&self) -> &'static str {
        if self.service_uuid == DP3T_PRESTANDARD_UUID {
            "Dp3t_ScanResponse"
        } else {
            "ExposureNotification"
        }
    }
}

pub fn encode_advertisement(adv: &Advertisement) -> Vec<u8> {
    let uuid = adv.service_uuid.to_le_bytes();
    let mut out = Vec::with_capacity(ENCODED_LEN);
    out.extend_from_slice(&[0x02, AD_FLAGS, FLAGS_VALUE]);
    out.extend_from_slice(&[0x03, AD_COMPLETE_UUID16, uuid[0], uuid[1]]);
    out.push((1 + 2 + SERVICE_PAYLOAD_LEN) as u8);
    out.push(AD_SERVICE_DATA_UUID16);
    out.extend_from_slice(&uuid);
    out.extend_from_slice(&adv.payload());
    out
}

/// Encodes from raw slices, checking field lengths.
pub fn encode_fields(rpi: &[u8], aem: &[u8], service_uuid: u16) -> Result<Vec<u8>, FrameError> {
    if rpi.len() != 16 {
        return Err(FrameError::FieldLength {
            field: "rpi",
            expected: 16,
            actual: rpi.len(),
        });
    }
    if aem.len() != 4 {
        return Err(FrameError::FieldLength {
            field: "aem",
            expected: 4,
            actual: aem.len(),
        });
    }
    let mut payload = Vec::with_capacity(SERVICE_PAYLOAD_LEN);
    payload.extend_from_slice(rpi);
    payload.extend_from_slice(aem);
    Ok(encode_advertisement(&Advertisement::from_payload(
        &payload,
        service_uuid,
    )?))
}

pub fn decode_advertisement(bytes: &[u8]) -> Result<Advertisement, FrameError> {
    let mut pos = 0;
    let mut foreign = None;
    let mut found = None;
    while pos < bytes.len() {
        let len = bytes[pos] as usize;
        if len == 0 {
            // zero padding terminates the significant part
            break;
        }
        let end = pos + 1 + len;
        if end > bytes.len() {
            return Err(FrameError::MalformedFrame(format!(
                "structure at offset {pos} declares {len} bytes, {} remain",
                bytes.len() - pos - 1
            )));
        }
        let ad_type = bytes[pos + 1];
        let data = &bytes[pos + 2..end];
        if ad_type == AD_SERVICE_DATA_UUID16 {
            if data.len() < 2 {
                return Err(FrameError::MalformedFrame("service data shorter than its UUID".into()));
            }
            let uuid = u16::from_le_bytes([data[0], data[1]]);
            if is_exposure_service(uuid) {
                if found.is_some() {
                    return Err(FrameError::MalformedFrame("duplicate exposure service data".into()));
                }
                found = Some(Advertisement::from_payload(&data[2..], uuid).map_err(|_| {
                    FrameError::MalformedFrame(format!(
                        "exposure service data carries {} bytes, expected {SERVICE_PAYLOAD_LEN}",
                        data.len() - 2
                    ))
                })?);
            } else {
                foreign.get_or_insert(uuid);
            }
        }
        pos = end;
    }
    match (found, foreign) {
        (Some(adv), _) => Ok(adv),
        (None, Some(uuid)) => Err(FrameError::NotExposureService(uuid)),
        (None, None) => Err(FrameError::MalformedFrame("no service data".into())),
    }
}

/// Size and rate constants for undirected advertising on the 1M PHY.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AirtimeModel {
    pub payload_bytes: u32,
    pub advertisement_bytes: u32,
    pub pdu_bytes: u32,
    pub phy_rate_bps: u64,
    pub inter_frame_space_us: u32,
}

impl Default for AirtimeModel {
    fn default() -> Self {
        Self {
            payload_bytes: 26,
            advertisement_bytes: 39,
            pdu_bytes: 47,
            phy_rate_bps: 1_000_000,
            inter_frame_space_us: 150,
        }
    }
}

impl AirtimeModel {
    /// Preamble (1) + access address (4) + CRC (3) around the advertising PDU.
    pub const LINK_OVERHEAD_BYTES: u32 = 8;

    pub fn with_phy_rate(mut self, bps: u64) -> Self {
        self.phy_rate_bps = bps;
        self
    }

    pub fn with_inter_frame_space(mut self, us: u32) -> Self {
        self.inter_frame_space_us = us;
        self
    }

    pub fn is_valid(&self) -> bool {
        self.phy_rate_bps > 0 && self.pdu_bytes == self.advertisement_bytes + Self::LINK_OVERHEAD_BYTES
    }

    pub fn pdu_bits(&self) -> u32 {
        self.pdu_bytes * 8
    }

    pub fn on_air_us(&self) -> Q {
        Q::new(i128::from(self.pdu_bits()) * 1_000_000, i128::from(self.phy_rate_bps))
    }

    pub fn max_adverts_per_second(&self) -> Q {
        int(1_000_000) / (self.on_air_us() + int(i128::from(self.inter_frame_space_us)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBudget {
    pub range_m: f64,
    pub rx_fraction: Q,
    pub advertise_period_s: u32,
}

impl Default for LinkBudget {
    fn default() -> Self {
        Self {
            range_m: 6.0,
            rx_fraction: Q::new(43, 1000),
            advertise_period_s: 2,
        }
    }
}

impl LinkBudget {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.rx_fraction > Q::zero() && self.rx_fraction <= Q::one()) {
            return Err(format!("rx_fraction {} must be in (0, 1]", self.rx_fraction));
        }
        if self.advertise_period_s == 0 {
            return Err("advertise_period_s must be positive".into());
        }
        if self.range_m.is_nan() || self.range_m <= 0.0 {
            return Err(format!("range_m {} must be positive", self.range_m));
        }
        Ok(())
    }
}

pub fn max_adverts_per_second(model: &AirtimeModel) -> Q {
    model.max_adverts_per_second()
}

pub fn effective_adverts_per_second(model: &AirtimeModel, budget: &LinkBudget) -> Result<Q, String> {
    budget.validate()?;
    Ok(model.max_adverts_per_second() * budget.rx_fraction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::{floor_int, round_half_up};

    fn listing_adv() -> Advertisement {
        Advertisement::new(
            Rpi::from_hex("9386bead6a0212d6205c665db64ccfe4").unwrap(),
            Aem::from_hex("a4e4489c").unwrap(),
        )
    }

    #[test]
    fn encoding_contains_listing_payload() {
        let frame = encode_advertisement(&listing_adv());
        assert_eq!(frame.len(), ENCODED_LEN);
        let payload = hex::decode("9386bead6a0212d6205c665db64ccfe4a4e4489c").unwrap();
        assert!(frame.windows(20).any(|w| w == payload.as_slice()));
        assert_eq!(
            &frame[..11],
            &[0x02, 0x01, 0x1A, 0x03, 0x03, 0x6F, 0xFD, 0x17, 0x16, 0x6F, 0xFD]
        );
        assert_eq!(decode_advertisement(&frame).unwrap(), listing_adv());
    }

    #[test]
    fn decode_errors() {
        let frame = encode_advertisement(&listing_adv());
        assert!(matches!(
            decode_advertisement(&frame[..10]),
            Err(FrameError::MalformedFrame(_))
        ));
        let mut battery = listing_adv();
        battery.service_uuid = 0x180F;
        assert_eq!(
            decode_advertisement(&encode_advertisement(&battery)),
            Err(FrameError::NotExposureService(0x180F))
        );
        assert!(decode_advertisement(&[]).is_err());
        // exposure UUID with a short payload
        assert!(matches!(
            decode_advertisement(&[0x05, 0x16, 0x6F, 0xFD, 1, 2]),
            Err(FrameError::MalformedFrame(_))
        ));
    }

    #[test]
    fn decode_skips_unknown_structures_and_padding() {
        let mut frame = vec![0x04, 0xFF, 0x4C, 0x00, 0x01];
        frame.extend(encode_advertisement(&listing_adv()).into_iter().skip(3));
        frame.extend([0, 0, 0]);
        assert_eq!(decode_advertisement(&frame).unwrap(), listing_adv());
    }

    #[test]
    fn dp3t_uuid_round_trips() {
        let mut adv = listing_adv();
        adv.service_uuid = DP3T_PRESTANDARD_UUID;
        let back = decode_advertisement(&encode_advertisement(&adv)).unwrap();
        assert_eq!(back, adv);
        assert_eq!(back.kind(), "Dp3t_ScanResponse");
    }

    #[test]
    fn field_lengths_checked() {
        assert!(matches!(
            encode_fields(&[0; 15], &[0; 4], EXPOSURE_NOTIFICATION_UUID),
            Err(FrameError::FieldLength { field: "rpi", .. })
        ));
        assert!(matches!(
            encode_fields(&[0; 16], &[0; 5], EXPOSURE_NOTIFICATION_UUID),
            Err(FrameError::FieldLength { field: "aem", .. })
        ));
        assert_eq!(
            encode_fields(&[0; 16], &[0; 4], EXPOSURE_NOTIFICATION_UUID)
                .unwrap()
                .len(),
            31
        );
    }

    #[test]
    fn airtime_defaults() {
        let m = AirtimeModel::default();
        assert!(m.is_valid());
        assert_eq!(m.on_air_us(), int(376));
        assert_eq!(floor_int(&m.max_adverts_per_second()), 1901);
        let eff = effective_adverts_per_second(&m, &LinkBudget::default()).unwrap();
        assert_eq!(round_half_up(&eff, 0), int(82));
        let full = LinkBudget {
            rx_fraction: int(1),
            ..LinkBudget::default()
        };
        assert_eq!(
            effective_adverts_per_second(&m, &full).unwrap(),
            m.max_adverts_per_second()
        );
        let none = LinkBudget {
            rx_fraction: int(0),
            ..LinkBudget::default()
        };
        assert!(effective_adverts_per_second(&m, &none).is_err());
    }

    #[test]
    fn halving_phy_rate() {
        let m = AirtimeModel::default();
        let slow = m.with_phy_rate(500_000);
        assert_eq!(slow.on_air_us(), m.on_air_us() * int(2));
        // the inter-frame space does not scale with the PHY rate, so the
        // rate drops but stays above half
        assert!(slow.max_adverts_per_second() < m.max_adverts_per_second());
        assert!(slow.max_adverts_per_second() > m.max_adverts_per_second() / int(2));
    }
}
