//! The relay broker over real sockets: fan-out, replay to late joiners,
//! reconnects and malformed input.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use gap_lab::ble::Advertisement;
use gap_lab::clock::ManualClock;
use gap_lab::crypto::{Aem, Rpi};
use gap_lab::wormhole::{broker_serve, BrokerClient, BrokerHandle, Publish, WormholeMessage};

const NOW: i64 = 1_594_116_000;
const SHORT: Duration = Duration::from_millis(300);
const LONG: Duration = Duration::from_secs(5);

fn start() -> (BrokerHandle, ManualClock, String, Arc<Mutex<Vec<String>>>) {
    let clock = ManualClock::new(NOW);
    let lines = Arc::new(Mutex::new(Vec::new()));
    let sink = Arc::clone(&lines);
    let handle = broker_serve("127.0.0.1:0", Arc::new(clock.clone()), move |l| {
        sink.lock().unwrap().push(l)
    })
    .unwrap();
    let addr = handle.local_addr().to_string();
    (handle, clock, addr, lines)
}

fn msg(origin: &str, seq: u64, window: i64) -> WormholeMessage {
    let b = seq as u8;
    WormholeMessage::new(origin, seq, &Advertisement::new(Rpi([b; 16]), Aem([b; 4])), NOW, window)
}

fn wait_until(what: &str, mut f: impl FnMut() -> bool) {
    let deadline = Instant::now() + LONG;
    while !f() {
        assert!(Instant::now() < deadline, "timed out waiting for {what}");
        std::thread::sleep(Duration::from_millis(5));
    }
}

fn raw_frame(body: &[u8]) -> Vec<u8> {
    let mut out = (body.len() as u32).to_be_bytes().to_vec();
    out.extend_from_slice(body);
    out
}

#[test]
fn fan_out_reaches_everyone_but_the_sender() {
    let (handle, _clock, addr, _) = start();
    let mut x = BrokerClient::connect(&addr, "x").unwrap();
    let y = BrokerClient::connect(&addr, "y").unwrap();
    let z = BrokerClient::connect(&addr, "z").unwrap();
    wait_until("three connections", || handle.connections() == 3);
    for seq in 0..5 {
        x.publish(&msg("x", seq, 600)).unwrap();
    }
    // A repeated message is accepted once.
    x.publish(&msg("x", 2, 600)).unwrap();
    for peer in [&y, &z] {
        let got = peer.recv_n(5, LONG).unwrap();
        assert_eq!(got.iter().map(|m| m.seq).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert!(peer.recv_timeout(SHORT).unwrap().is_none());
    }
    assert!(x.recv_timeout(SHORT).unwrap().is_none());
    assert_eq!(handle.published(), 5);
    handle.shutdown();
}

#[test]
fn late_joiner_gets_unexpired_backlog_only() {
    let (handle, clock, addr, _) = start();
    let mut x = BrokerClient::connect(&addr, "x").unwrap();
    x.publish(&msg("x", 0, 60)).unwrap();
    x.publish(&msg("x", 1, 600)).unwrap();
    wait_until("two published", || handle.published() == 2);
    clock.advance(120);
    let y = BrokerClient::connect(&addr, "y").unwrap();
    let got = y.recv_n(1, LONG).unwrap();
    assert_eq!(got[0].seq, 1);
    assert!(y.recv_timeout(SHORT).unwrap().is_none());
    handle.shutdown();
}

#[test]
fn reconnecting_node_sees_no_duplicates() {
    let (handle, _clock, addr, _) = start();
    let mut x = BrokerClient::connect(&addr, "x").unwrap();
    let y = BrokerClient::connect(&addr, "y").unwrap();
    wait_until("two connections", || handle.connections() == 2);
    for seq in 0..3 {
        x.publish(&msg("x", seq, 600)).unwrap();
    }
    assert_eq!(y.recv_n(3, LONG).unwrap().len(), 3);
    y.close();
    wait_until("y gone", || handle.connections() == 1);

    for seq in 3..5 {
        x.publish(&msg("x", seq, 600)).unwrap();
    }
    wait_until("five published", || handle.published() == 5);
    let y = BrokerClient::connect(&addr, "y").unwrap();
    let mut seqs: Vec<u64> = y.recv_n(2, LONG).unwrap().iter().map(|m| m.seq).collect();
    seqs.sort_unstable();
    assert_eq!(seqs, vec![3, 4]);
    assert!(y.recv_timeout(SHORT).unwrap().is_none());
    handle.shutdown();
}

#[test]
fn malformed_frames_drop_only_that_connection() {
    let (handle, _clock, addr, lines) = start();
    let mut x = BrokerClient::connect(&addr, "x").unwrap();
    let y = BrokerClient::connect(&addr, "y").unwrap();

    let cases: [Vec<u8>; 4] = [
        raw_frame(br#"{"origin":"x","seq":0,"payload_hex":"00","captured_at":0,"expires_at":1}"#),
        [raw_frame(br#"{"hello":"bad"}"#), raw_frame(b"not json")].concat(),
        [raw_frame(br#"{"hello":"bad"}"#), u32::MAX.to_be_bytes().to_vec()].concat(),
        [
            raw_frame(br#"{"hello":"bad"}"#),
            raw_frame(br#"{"origin":"bad","seq":0,"payload_hex":"zz","captured_at":0,"expires_at":9}"#),
        ]
        .concat(),
    ];
    for bytes in cases {
        let mut raw = TcpStream::connect(&addr).unwrap();
        raw.set_read_timeout(Some(LONG)).unwrap();
        raw.write_all(&bytes).unwrap();
        let mut buf = [0u8; 64];
        // The broker closes the socket; any pending backlog is discarded.
        loop {
            match raw.read(&mut buf) {
                Ok(0) => break,
                Ok(_) => continue,
                Err(e) => panic!("broker kept a malformed connection open: {e}"),
            }
        }
    }

    x.publish(&msg("x", 7, 600)).unwrap();
    assert_eq!(y.recv_n(1, LONG).unwrap()[0].seq, 7);
    wait_until("warnings logged", || {
        lines.lock().unwrap().iter().filter(|l| l.contains("[WARN]")).count() >= 3
    });
    handle.shutdown();
}
