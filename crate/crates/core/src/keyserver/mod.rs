//! Diagnosis key server.
//!
//! Diagnosed users upload up to 14 daily keys, gated by a single-use TAN
//! issued by an administrator. Anyone can download the published keys as an
//! Ed25519-signed aggregate. Keys older than the retention window are purged.

mod service;
mod store;

use std::collections::HashMap;
use std::path::Path;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{TemporaryExposureKey, TEK_ROLLING_PERIOD};

pub use service::{serve_keys, KeyServerClient, Request, Response};
pub use store::StoreFile;

/// Most keys a single upload may carry.
pub const MAX_KEYS_PER_BUNDLE: usize = 14;
/// Keys this many days old are still published; older ones are dropped.
pub const RETENTION_DAYS: i64 = 14;

const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Error)]
pub enum KeyServerError {
    #[error("unauthorized")]
    Unauthorized,
    #[error("unknown TAN")]
    InvalidTan,
    #[error("TAN already used")]
    ReplayedTan,
    #[error("malformed bundle: {0}")]
    MalformedBundle(String),
    #[error("signature verification failed")]
    BadSignature,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("store: {0}")]
    Store(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl KeyServerError {
    pub fn kind(&self) -> &'static str {
        match self {
            KeyServerError::Unauthorized => "Unauthorized",
            KeyServerError::InvalidTan => "InvalidTan",
            KeyServerError::ReplayedTan => "ReplayedTan",
            KeyServerError::MalformedBundle(_) => "MalformedBundle",
            KeyServerError::BadSignature => "BadSignature",
            KeyServerError::Protocol(_) => "Protocol",
            KeyServerError::Store(_) => "Store",
            KeyServerError::Io(_) => "Io",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tan {
    pub token: String,
    pub issued_at: i64,
    pub used: bool,
}

/// A stored upload, signed by the server when accepted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisBundle {
    pub id: u64,
    pub submitted_at: i64,
    pub teks: Vec<TemporaryExposureKey>,
    pub signature: String,
}

#[derive(Serialize)]
struct BundleBody<'a> {
    id: u64,
    submitted_at: i64,
    teks: &'a [TemporaryExposureKey],
}

impl DiagnosisBundle {
    fn canonical(&self) -> Vec<u8> {
        serde_json::to_vec(&BundleBody {
            id: self.id,
            submitted_at: self.submitted_at,
            teks: &self.teks,
        })
        .expect("bundle serializes")
    }

    pub fn verify(&self, key: &VerifyingKey) -> Result<(), KeyServerError> {
        verify_hex(key, &self.canonical(), &self.signature)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateBody {
    pub generated_at: i64,
    pub since: i64,
    pub bundles: Vec<DiagnosisBundle>,
}

impl AggregateBody {
    pub fn teks(&self) -> Vec<TemporaryExposureKey> {
        self.bundles.iter().flat_map(|b| b.teks.iter().copied()).collect()
    }
}

/// Download response: the exact signed bytes plus a detached signature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedAggregate {
    pub payload: String,
    pub signature: String,
}

impl SignedAggregate {
    pub fn verify(&self, key: &VerifyingKey) -> Result<AggregateBody, KeyServerError> {
        verify_hex(key, self.payload.as_bytes(), &self.signature)?;
        serde_json::from_str(&self.payload).map_err(|e| KeyServerError::Protocol(e.to_string()))
    }

    /// Reads the body without checking the signature.
    pub fn body_unverified(&self) -> Result<AggregateBody, KeyServerError> {
        serde_json::from_str(&self.payload).map_err(|e| KeyServerError::Protocol(e.to_string()))
    }
}

fn verify_hex(key: &VerifyingKey, msg: &[u8], sig_hex: &str) -> Result<(), KeyServerError> {
    let bytes = hex::decode(sig_hex).map_err(|_| KeyServerError::BadSignature)?;
    let sig = Signature::from_slice(&bytes).map_err(|_| KeyServerError::BadSignature)?;
    key.verify(msg, &sig).map_err(|_| KeyServerError::BadSignature)
}

pub fn parse_public_key(hex_key: &str) -> Result<VerifyingKey, KeyServerError> {
    let bytes: [u8; 32] = hex::decode(hex_key.trim())
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| KeyServerError::Protocol("public key must be 32 hex bytes".into()))?;
    VerifyingKey::from_bytes(&bytes).map_err(|e| KeyServerError::Protocol(e.to_string()))
}

/// Loads the signing key at `path` (hex seed), creating it with fresh
/// entropy on first boot. The public key is written next to it as
/// `<path>.pub`.
pub fn load_or_create_signing_key(path: &Path) -> Result<SigningKey, KeyServerError> {
    let key = if path.exists() {
        let text = std::fs::read_to_string(path)?;
        let seed: [u8; 32] = hex::decode(text.trim())
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| KeyServerError::Store(format!("{}: bad signing key", path.display())))?;
        SigningKey::from_bytes(&seed)
    } else {
        let mut seed = [0u8; 32];
        ChaCha20Rng::from_entropy().fill_bytes(&mut seed);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, hex::encode(seed))?;
        SigningKey::from_bytes(&seed)
    };
    let mut pub_path = path.as_os_str().to_owned();
    pub_path.push(".pub");
    std::fs::write(pub_path, hex::encode(key.verifying_key().to_bytes()))?;
    Ok(key)
}

fn day_of(unix: i64) -> i64 {
    unix.div_euclid(SECONDS_PER_DAY)
}

fn tek_age_days(tek: &TemporaryExposureKey, now: i64) -> i64 {
    day_of(now) - i64::from(tek.day())
}

/// Checks an upload: at most 14 valid day-aligned keys on distinct days, none
/// from the future and none older than the retention window.
pub fn validate_upload(teks: &[TemporaryExposureKey], now: i64) -> Result<(), KeyServerError> {
    let bad = |m: String| Err(KeyServerError::MalformedBundle(m));
    if teks.is_empty() {
        return bad("no keys".into());
    }
    if teks.len() > MAX_KEYS_PER_BUNDLE {
        return bad(format!("{} keys, at most {MAX_KEYS_PER_BUNDLE} allowed", teks.len()));
    }
    let mut days = std::collections::HashSet::new();
    for tek in teks {
        if tek.rolling_period != TEK_ROLLING_PERIOD {
            return bad(format!("rolling period {} != {TEK_ROLLING_PERIOD}", tek.rolling_period));
        }
        if let Err(e) = tek.validate() {
            return bad(e.to_string());
        }
        if !days.insert(tek.day()) {
            return bad(format!("two keys for day {}", tek.day()));
        }
        let age = tek_age_days(tek, now);
        if age < 0 {
            return bad(format!("key for day {} is in the future", tek.day()));
        }
        if age > RETENTION_DAYS {
            return bad(format!("key is {age} days old, retention is {RETENTION_DAYS}"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadReceipt {
    pub bundle_id: u64,
    pub accepted_keys: usize,
}

pub struct KeyServer {
    signing_key: SigningKey,
    admin_token: String,
    tans: HashMap<String, Tan>,
    bundles: Vec<DiagnosisBundle>,
    next_id: u64,
    rng: ChaCha20Rng,
    store: Option<StoreFile>,
}

impl std::fmt::Debug for KeyServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyServer")
            .field("public_key", &self.public_key_hex())
            .field("bundles", &self.bundles.len())
            .field("tans", &self.tans.len())
            .finish()
    }
}

impl KeyServer {
    /// An in-memory server. TANs are drawn from OS entropy.
    pub fn new(signing_key: SigningKey, admin_token: &str) -> Self {
        Self {
            signing_key,
            admin_token: admin_token.to_string(),
            tans: HashMap::new(),
            bundles: Vec::new(),
            next_id: 1,
            rng: ChaCha20Rng::from_entropy(),
            store: None,
        }
    }

    /// A server whose state lives in an append-only file at `path`.
    pub fn open(signing_key: SigningKey, admin_token: &str, path: &Path) -> Result<Self, KeyServerError> {
        let mut server = Self::new(signing_key, admin_token);
        let (store, events) = StoreFile::open(path)?;
        for event in events {
            server.apply(event);
        }
        server.store = Some(store);
        Ok(server)
    }

    fn apply(&mut self, event: store::Event) {
        match event {
            store::Event::Tan(tan) => {
                self.tans.insert(tan.token.clone(), tan);
            }
            store::Event::TanUsed { token } => {
                if let Some(t) = self.tans.get_mut(&token) {
                    t.used = true;
                }
            }
            store::Event::Bundle(b) => {
                self.next_id = self.next_id.max(b.id + 1);
                self.bundles.push(b);
            }
        }
    }

    fn record(&mut self, event: store::Event) -> Result<(), KeyServerError> {
        if let Some(store) = self.store.as_mut() {
            store.append(&event)?;
        }
        self.apply(event);
        Ok(())
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.signing_key.verifying_key()
    }

    pub fn public_key_hex(&self) -> String {
        hex::encode(self.verifying_key().to_bytes())
    }

    pub fn issue_tan(&mut self, credential: &str, now: i64) -> Result<Tan, KeyServerError> {
        if credential != self.admin_token || self.admin_token.is_empty() {
            return Err(KeyServerError::Unauthorized);
        }
        let mut bytes = [0u8; 16];
        self.rng.fill_bytes(&mut bytes);
        let tan = Tan {
            token: hex::encode(bytes),
            issued_at: now,
            used: false,
        };
        self.record(store::Event::Tan(tan.clone()))?;
        Ok(tan)
    }

    pub fn upload(
        &mut self,
        teks: Vec<TemporaryExposureKey>,
        tan: &str,
        now: i64,
    ) -> Result<UploadReceipt, KeyServerError> {
        match self.tans.get(tan) {
            None => return Err(KeyServerError::InvalidTan),
            Some(t) if t.used => return Err(KeyServerError::ReplayedTan),
            Some(_) => {}
        }
        validate_upload(&teks, now)?;
        let mut bundle = DiagnosisBundle {
            id: self.next_id,
            submitted_at: now,
            teks,
            signature: String::new(),
        };
        bundle.signature = hex::encode(self.signing_key.sign(&bundle.canonical()).to_bytes());
        let receipt = UploadReceipt {
            bundle_id: bundle.id,
            accepted_keys: bundle.teks.len(),
        };
        self.record(store::Event::TanUsed { token: tan.to_string() })?;
        self.record(store::Event::Bundle(bundle))?;
        Ok(receipt)
    }

    /// Bundles submitted strictly after `since`, signed as one aggregate.
    pub fn download(&self, since: i64, now: i64) -> SignedAggregate {
        let body = AggregateBody {
            generated_at: now,
            since,
            bundles: self
                .bundles
                .iter()
                .filter(|b| b.submitted_at > since)
                .cloned()
                .collect(),
        };
        let payload = serde_json::to_string(&body).expect("aggregate serializes");
        let signature = hex::encode(self.signing_key.sign(payload.as_bytes()).to_bytes());
        SignedAggregate { payload, signature }
    }

    /// Drops keys older than the retention window and compacts the store.
    /// Returns the number of keys removed.
    pub fn purge(&mut self, now: i64) -> Result<usize, KeyServerError> {
        let mut removed = 0;
        for b in &mut self.bundles {
            let before = b.teks.len();
            b.teks.retain(|t| tek_age_days(t, now) <= RETENTION_DAYS);
            if b.teks.len() != before {
                removed += before - b.teks.len();
                b.signature = hex::encode(self.signing_key.sign(&b.canonical()).to_bytes());
            }
        }
        self.bundles.retain(|b| !b.teks.is_empty());
        if removed > 0 {
            if let Some(store) = self.store.as_mut() {
                let mut events: Vec<store::Event> = self.tans.values().cloned().map(store::Event::Tan).collect();
                events.sort_by_key(|e| e.sort_key());
                events.extend(self.bundles.iter().cloned().map(store::Event::Bundle));
                store.compact(&events)?;
            }
        }
        Ok(removed)
    }

    pub fn bundle_count(&self) -> usize {
        self.bundles.len()
    }
}
