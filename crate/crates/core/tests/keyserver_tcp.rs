//! The key server contract over TCP: TANs are single-use, keys are kept for
//! exactly the retention window, and any tampered byte breaks the signature.

use std::sync::Arc;

use ed25519_dalek::SigningKey;
use gap_lab::clock::ManualClock;
use gap_lab::crypto::{IntervalNumber, KeyMaterial, TemporaryExposureKey};
use gap_lab::keyserver::{
    parse_public_key, serve_keys, KeyServer, KeyServerClient, KeyServerError, RETENTION_DAYS,
};
use gap_lab::net::ServerHandle;

const DAY: i64 = 86_400;
/// 2020-07-07 12:00 UTC.
const NOW: i64 = 1_594_080_000 + 12 * 3600;

fn tek(days_ago: i64, byte: u8) -> TemporaryExposureKey {
    let day = NOW.div_euclid(DAY) - days_ago;
    TemporaryExposureKey::new(KeyMaterial([byte; 16]), IntervalNumber((day * 144) as u32), 4).unwrap()
}

fn start(server: KeyServer) -> (ServerHandle, ManualClock, KeyServerClient) {
    let clock = ManualClock::new(NOW);
    let handle = serve_keys("127.0.0.1:0", server, Arc::new(clock.clone())).unwrap();
    let client = KeyServerClient::connect(handle.local_addr()).unwrap();
    (handle, clock, client)
}

fn server() -> KeyServer {
    KeyServer::new(SigningKey::from_bytes(&[3; 32]), "admin")
}

#[test]
fn tans_are_single_use_and_admin_gated() {
    let (handle, _clock, mut c) = start(server());
    assert!(matches!(c.issue_tan("guess"), Err(KeyServerError::Unauthorized)));
    assert!(matches!(
        c.upload(&[tek(1, 1)], "not-a-tan"),
        Err(KeyServerError::InvalidTan)
    ));

    let tan = c.issue_tan("admin").unwrap();
    assert_eq!(c.upload(&[tek(1, 1)], &tan.token).unwrap().accepted_keys, 1);
    assert!(matches!(
        c.upload(&[tek(2, 2)], &tan.token),
        Err(KeyServerError::ReplayedTan)
    ));

    // A rejected upload does not burn the TAN.
    let tan = c.issue_tan("admin").unwrap();
    assert!(matches!(
        c.upload(&[tek(-1, 3)], &tan.token),
        Err(KeyServerError::MalformedBundle(_))
    ));
    assert!(c.upload(&[tek(0, 3)], &tan.token).is_ok());
    handle.shutdown();
}

#[test]
fn used_tans_stay_used_across_restarts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.jsonl");
    let key = SigningKey::from_bytes(&[4; 32]);
    let (handle, _clock, mut c) = start(KeyServer::open(key.clone(), "admin", &path).unwrap());
    let tan = c.issue_tan("admin").unwrap();
    c.upload(&[tek(1, 1)], &tan.token).unwrap();
    drop(c);
    handle.shutdown();

    let (handle, _clock, mut c) = start(KeyServer::open(key, "admin", &path).unwrap());
    assert!(matches!(
        c.upload(&[tek(2, 2)], &tan.token),
        Err(KeyServerError::ReplayedTan)
    ));
    assert_eq!(c.download(0).unwrap().body_unverified().unwrap().bundles.len(), 1);
    handle.shutdown();
}

#[test]
fn retention_boundary_is_fourteen_days() {
    let (handle, clock, mut c) = start(server());
    let tan = c.issue_tan("admin").unwrap();
    assert!(matches!(
        c.upload(&[tek(RETENTION_DAYS + 1, 1)], &tan.token),
        Err(KeyServerError::MalformedBundle(_))
    ));
    let receipt = c.upload(&[tek(RETENTION_DAYS, 1), tek(3, 2)], &tan.token).unwrap();
    assert_eq!(receipt.accepted_keys, 2);

    assert_eq!(c.purge("admin").unwrap(), 0);
    clock.advance(DAY);
    assert!(matches!(c.purge("guess"), Err(KeyServerError::Unauthorized)));
    assert_eq!(c.purge("admin").unwrap(), 1);

    let public = parse_public_key(&c.public_key().unwrap()).unwrap();
    let body = c.download(0).unwrap().verify(&public).unwrap();
    assert_eq!(body.teks(), vec![tek(3, 2)]);
    for bundle in &body.bundles {
        bundle.verify(&public).unwrap();
    }
    handle.shutdown();
}

#[test]
fn any_tampered_byte_fails_verification() {
    let (handle, _clock, mut c) = start(server());
    let tan = c.issue_tan("admin").unwrap();
    c.upload(&[tek(1, 1), tek(2, 2)], &tan.token).unwrap();
    let public = parse_public_key(&c.public_key().unwrap()).unwrap();
    let agg = c.download(0).unwrap();
    agg.verify(&public).unwrap();

    for i in 0..agg.payload.len() {
        let mut bytes = agg.payload.clone().into_bytes();
        bytes[i] ^= 0x01;
        let mut t = agg.clone();
        t.payload = String::from_utf8(bytes).unwrap();
        assert!(
            matches!(t.verify(&public), Err(KeyServerError::BadSignature)),
            "payload byte {i}"
        );
    }
    let sig = hex::decode(&agg.signature).unwrap();
    for i in 0..sig.len() {
        let mut s = sig.clone();
        s[i] ^= 0x80;
        let mut t = agg.clone();
        t.signature = hex::encode(s);
        assert!(
            matches!(t.verify(&public), Err(KeyServerError::BadSignature)),
            "signature byte {i}"
        );
    }
    let other = SigningKey::from_bytes(&[9; 32]).verifying_key();
    assert!(matches!(agg.verify(&other), Err(KeyServerError::BadSignature)));
    handle.shutdown();
}
