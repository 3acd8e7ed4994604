//! Exposure-notification key schedule.
//!
//! A device draws one [`TemporaryExposureKey`] per day. Two purpose keys are
//! derived from it with HKDF-SHA256 (empty salt, 16-byte output): the RPI key
//! (`"EN-RPIK"`) and the metadata key (`"EN-AEMK"`). The RPI for interval `j`
//! is one AES-128 block over `"EN-RPI" || 0x00 * 6 || le32(j)`; the metadata is
//! encrypted with AES-128-CTR keyed by the metadata key, using the RPI as the
//! initial counter block.

use std::fmt;

use aes::cipher::{BlockEncrypt, KeyInit, KeyIvInit, StreamCipher};
use aes::Aes128;
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

type Aes128Ctr = ctr::Ctr128BE<Aes128>;

/// Length in seconds of one rolling interval.
pub const INTERVAL_SECONDS: i64 = 600;
/// Intervals per TEK (one day).
pub const TEK_ROLLING_PERIOD: u32 = 144;
/// Highest valid transmission risk level.
pub const MAX_TRANSMISSION_RISK_LEVEL: u8 = 8;

const RPIK_INFO: &[u8] = b"EN-RPIK";
const AEMK_INFO: &[u8] = b"EN-AEMK";
const RPI_PREFIX: &[u8; 6] = b"EN-RPI";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("timestamp {0} is before the unix epoch")]
    NegativeTimestamp(i64),
    #[error("timestamp {0} overflows the 32-bit interval counter")]
    IntervalOverflow(i64),
    #[error("rolling start {start} is not aligned to the rolling period {period}")]
    Misaligned { start: u32, period: u32 },
    #[error("expected a {expected:?} key, got a {actual:?} key")]
    WrongPurpose { expected: KeyPurpose, actual: KeyPurpose },
    #[error("transmission risk level {0} out of range 0..=8")]
    RiskLevel(u8),
    #[error("invalid hex: {0}")]
    Hex(String),
    #[error("expected {expected} bytes, got {actual}")]
    Length { expected: usize, actual: usize },
}

/// Number of 10-minute epochs since the unix epoch (`ENIntervalNumber`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IntervalNumber(pub u32);

impl IntervalNumber {
    pub fn from_unix(unix_seconds: i64) -> Result<Self, CryptoError> {
        if unix_seconds < 0 {
            return Err(CryptoError::NegativeTimestamp(unix_seconds));
        }
        u32::try_from(unix_seconds / INTERVAL_SECONDS)
            .map(Self)
            .map_err(|_| CryptoError::IntervalOverflow(unix_seconds))
    }

    pub fn value(self) -> u32 {
        self.0
    }

    /// First second covered by this interval.
    pub fn start_unix(self) -> i64 {
        i64::from(self.0) * INTERVAL_SECONDS
    }

    /// First second after this interval.
    pub fn end_unix(self) -> i64 {
        self.start_unix() + INTERVAL_SECONDS
    }

    /// The day-aligned interval this one belongs to.
    pub fn day_start(self) -> Self {
        Self(self.0 - self.0 % TEK_ROLLING_PERIOD)
    }

    pub fn offset(self, intervals: u32) -> Self {
        Self(self.0 + intervals)
    }
}

impl fmt::Display for IntervalNumber {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Shorthand for [`IntervalNumber::from_unix`].
pub fn interval_number(unix_seconds: i64) -> Result<IntervalNumber, CryptoError> {
    IntervalNumber::from_unix(unix_seconds)
}

macro_rules! hex_bytes {
    ($name:ident, $len:expr) => {
        impl $name {
            pub const LEN: usize = $len;

            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
                Ok(Self(parse_hex_array(s)?))
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.to_hex())
            }
        }

        impl From<[u8; $len]> for $name {
            fn from(bytes: [u8; $len]) -> Self {
                Self(bytes)
            }
        }
    };
}

/// Raw 16-byte TEK material.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyMaterial(pub [u8; 16]);
hex_bytes!(KeyMaterial, 16);

/// A 16-byte rolling proximity identifier.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rpi(pub [u8; 16]);
hex_bytes!(Rpi, 16);

/// Four bytes of associated encrypted metadata.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Aem(pub [u8; 4]);
hex_bytes!(Aem, 4);

/// Plaintext metadata carried in the AEM: version byte, signed tx power, two
/// reserved bytes. The reserved bytes are not forced to zero because real
/// devices have been observed sending other values.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Metadata(pub [u8; 4]);
hex_bytes!(Metadata, 4);

impl Metadata {
    pub fn new(version: u8, tx_power_dbm: i8) -> Self {
        Self([version, tx_power_dbm as u8, 0, 0])
    }

    pub fn version(&self) -> u8 {
        self.0[0]
    }

    pub fn major_version(&self) -> u8 {
        self.0[0] >> 6
    }

    pub fn tx_power(&self) -> i8 {
        self.0[1] as i8
    }
}

impl Default for Metadata {
    /// Version 1.0 with a -8 dBm calibrated tx power.
    fn default() -> Self {
        Self::new(0x40, -8)
    }
}

fn parse_hex_array<const N: usize>(s: &str) -> Result<[u8; N], CryptoError> {
    let cleaned: String = s.chars().filter(|c| *c != ':').collect();
    let bytes = hex::decode(cleaned.trim()).map_err(|e| CryptoError::Hex(e.to_string()))?;
    <[u8; N]>::try_from(bytes.as_slice()).map_err(|_| CryptoError::Length {
        expected: N,
        actual: bytes.len(),
    })
}

/// Lowercase hex with a colon between bytes, as printed in capture logs.
pub fn colon_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect::<Vec<_>>().join(":")
}

/// A daily key, the unit of diagnosis publication. Formerly known as the
/// Daily Tracing Key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemporaryExposureKey {
    #[serde(rename = "key", with = "serde_hex16")]
    pub key: KeyMaterial,
    pub rolling_start: IntervalNumber,
    pub rolling_period: u32,
    pub transmission_risk_level: u8,
}

impl TemporaryExposureKey {
    pub fn new(
        key: KeyMaterial,
        rolling_start: IntervalNumber,
        transmission_risk_level: u8,
    ) -> Result<Self, CryptoError> {
        let tek = Self {
            key,
            rolling_start,
            rolling_period: TEK_ROLLING_PERIOD,
            transmission_risk_level,
        };
        tek.validate()?;
        Ok(tek)
    }

    pub fn validate(&self) -> Result<(), CryptoError> {
        if self.rolling_period == 0 || !self.rolling_start.0.is_multiple_of(self.rolling_period) {
            return Err(CryptoError::Misaligned {
                start: self.rolling_start.0,
                period: self.rolling_period,
            });
        }
        if self.transmission_risk_level > MAX_TRANSMISSION_RISK_LEVEL {
            return Err(CryptoError::RiskLevel(self.transmission_risk_level));
        }
        Ok(())
    }

    /// Whether `interval` lies in `[rolling_start, rolling_start + rolling_period)`.
    pub fn covers(&self, interval: IntervalNumber) -> bool {
        interval >= self.rolling_start && interval.0 < self.rolling_start.0 + self.rolling_period
    }

    /// Day index (days since the unix epoch) of this key.
    pub fn day(&self) -> u32 {
        self.rolling_start.0 / TEK_ROLLING_PERIOD
    }
}

mod serde_hex16 {
    use super::KeyMaterial;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(key: &KeyMaterial, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&key.to_hex())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<KeyMaterial, D::Error> {
        let s = String::deserialize(d)?;
        KeyMaterial::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Draws a fresh TEK for the day starting at `day_start`.
pub fn generate_tek<R: RngCore + CryptoRng>(
    rng: &mut R,
    day_start: IntervalNumber,
) -> Result<TemporaryExposureKey, CryptoError> {
    if !day_start.0.is_multiple_of(TEK_ROLLING_PERIOD) {
        return Err(CryptoError::Misaligned {
            start: day_start.0,
            period: TEK_ROLLING_PERIOD,
        });
    }
    let mut key = [0u8; 16];
    rng.fill_bytes(&mut key);
    TemporaryExposureKey::new(KeyMaterial(key), day_start, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KeyPurpose {
    Rpik,
    Aemk,
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct DerivedKey {
    purpose: KeyPurpose,
    bytes: [u8; 16],
}

impl DerivedKey {
    pub fn purpose(&self) -> KeyPurpose {
        self.purpose
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.bytes
    }

    fn expect(&self, purpose: KeyPurpose) -> Result<(), CryptoError> {
        if self.purpose == purpose {
            Ok(())
        } else {
            Err(CryptoError::WrongPurpose {
                expected: purpose,
                actual: self.purpose,
            })
        }
    }
}

impl fmt::Debug for DerivedKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DerivedKey({:?}, {})", self.purpose, hex::encode(self.bytes))
    }
}

fn hkdf16(tek: &TemporaryExposureKey, info: &[u8]) -> [u8; 16] {
    let mut out = [0u8; 16];
    Hkdf::<Sha256>::new(None, tek.key.as_bytes())
        .expand(info, &mut out)
        .expect("16 bytes is a valid HKDF-SHA256 output length");
    out
}

pub fn derive_rpik(tek: &TemporaryExposureKey) -> DerivedKey {
    DerivedKey {
        purpose: KeyPurpose::Rpik,
        bytes: hkdf16(tek, RPIK_INFO),
    }
}

pub fn derive_aemk(tek: &TemporaryExposureKey) -> DerivedKey {
    DerivedKey {
        purpose: KeyPurpose::Aemk,
        bytes: hkdf16(tek, AEMK_INFO),
    }
}

fn padded_data(interval: IntervalNumber) -> [u8; 16] {
    let mut block = [0u8; 16];
    block[..6].copy_from_slice(RPI_PREFIX);
    block[12..].copy_from_slice(&interval.0.to_le_bytes());
    block
}

pub fn derive_rpi(rpik: &DerivedKey, interval: IntervalNumber) -> Result<Rpi, CryptoError> {
    rpik.expect(KeyPurpose::Rpik)?;
    let cipher = Aes128::new(rpik.bytes.as_ref().into());
    let mut block = padded_data(interval).into();
    cipher.encrypt_block(&mut block);
    Ok(Rpi(block.into()))
}

fn apply_aem_keystream(aemk: &DerivedKey, rpi: &Rpi, data: &mut [u8; 4]) -> Result<(), CryptoError> {
    aemk.expect(KeyPurpose::Aemk)?;
    let mut cipher = Aes128Ctr::new(aemk.bytes.as_ref().into(), rpi.0.as_ref().into());
    cipher.apply_keystream(data);
    Ok(())
}

pub fn encrypt_aem(aemk: &DerivedKey, rpi: &Rpi, metadata: &Metadata) -> Result<Aem, CryptoError> {
    let mut data = metadata.0;
    apply_aem_keystream(aemk, rpi, &mut data)?;
    Ok(Aem(data))
}

pub fn decrypt_aem(aemk: &DerivedKey, rpi: &Rpi, aem: &Aem) -> Result<Metadata, CryptoError> {
    let mut data = aem.0;
    apply_aem_keystream(aemk, rpi, &mut data)?;
    Ok(Metadata(data))
}

/// All identifiers a TEK produces over its validity, plus the key needed to
/// open their metadata.
#[derive(Debug, Clone)]
pub struct TekExpansion {
    pub tek: TemporaryExposureKey,
    pub aemk: DerivedKey,
    pub slots: Vec<(IntervalNumber, Rpi)>,
}

impl TekExpansion {
    pub fn rpi_at(&self, interval: IntervalNumber) -> Option<Rpi> {
        let idx = interval.0.checked_sub(self.tek.rolling_start.0)? as usize;
        self.slots.get(idx).map(|(_, rpi)| *rpi)
    }
}

pub fn expand_tek(tek: &TemporaryExposureKey) -> TekExpansion {
    let rpik = derive_rpik(tek);
    let slots = (0..tek.rolling_period)
        .map(|i| {
            let interval = tek.rolling_start.offset(i);
            let rpi = derive_rpi(&rpik, interval).expect("key derived for RPI purpose");
            (interval, rpi)
        })
        .collect();
    TekExpansion {
        tek: *tek,
        aemk: derive_aemk(tek),
        slots,
    }
}

/// What a device broadcasts for `interval` under `tek`.
pub fn beacon_for(tek: &TemporaryExposureKey, interval: IntervalNumber, metadata: &Metadata) -> (Rpi, Aem) {
    let rpi = derive_rpi(&derive_rpik(tek), interval).expect("key derived for RPI purpose");
    let aem = encrypt_aem(&derive_aemk(tek), &rpi, metadata).expect("key derived for AEM purpose");
    (rpi, aem)
}
