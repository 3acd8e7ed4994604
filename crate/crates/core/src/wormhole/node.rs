//! Sniffer and rebroadcaster halves of a wormhole node.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use chrono::DateTime;

use super::{read_frame, write_frame, Frame, NodeConfig, WormholeError, WormholeMessage};
use crate::ble::{decode_advertisement, encode_advertisement, Advertisement, SERVICE_PAYLOAD_LEN};
use crate::clock::Clock;
use crate::crypto::colon_hex;

/// Turns raw advertising frames into broker messages.
#[derive(Debug, Clone)]
pub struct Sniffer {
    node_id: String,
    window_s: i64,
    next_seq: u64,
    /// Payload to the expiry of the message that already carried it.
    recent: HashMap<[u8; SERVICE_PAYLOAD_LEN], i64>,
}

impl Sniffer {
    pub fn new(node_id: &str, window_s: i64) -> Self {
        Self {
            node_id: node_id.to_string(),
            window_s,
            next_seq: 0,
            recent: HashMap::new(),
        }
    }

    /// Decodes a frame captured at `now`. Returns `None` for frames that are
    /// not exposure notifications and for payloads already forwarded and still
    /// valid.
    pub fn on_frame(&mut self, bytes: &[u8], now: i64) -> Option<WormholeMessage> {
        let adv = decode_advertisement(bytes).ok()?;
        self.on_advertisement(&adv, now)
    }

    pub fn on_advertisement(&mut self, adv: &Advertisement, now: i64) -> Option<WormholeMessage> {
        self.recent.retain(|_, exp| *exp > now);
        let payload = adv.payload();
        if self.recent.contains_key(&payload) {
            return None;
        }
        let msg = WormholeMessage::new(&self.node_id, self.next_seq, adv, now, self.window_s);
        self.next_seq += 1;
        self.recent.insert(payload, msg.expires_at);
        Some(msg)
    }

    pub fn sent(&self) -> u64 {
        self.next_seq
    }
}

/// One replayed advertisement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Emission {
    pub at: i64,
    pub advertisement: Advertisement,
    pub origin: String,
    pub seq: u64,
}

impl Emission {
    pub fn frame(&self) -> Vec<u8> {
        encode_advertisement(&self.advertisement)
    }
}

#[derive(Debug, Clone)]
struct Entry {
    msg: WormholeMessage,
    adv: Advertisement,
    next_at: i64,
}

/// Replays received advertisements at a fixed cadence until they expire.
#[derive(Debug, Clone)]
pub struct Rebroadcaster {
    cadence_s: i64,
    service_uuid: u16,
    entries: Vec<Entry>,
    seen: HashSet<(String, u64)>,
}

impl Rebroadcaster {
    pub fn new(cadence_s: i64, service_uuid: u16) -> Self {
        assert!(cadence_s > 0, "cadence must be positive");
        Self {
            cadence_s,
            service_uuid,
            entries: Vec::new(),
            seen: HashSet::new(),
        }
    }

    /// Queues `msg` for replay starting at `arrival`. Messages that are
    /// already expired, repeated, or carry a payload that is still being
    /// replayed are dropped.
    pub fn accept(&mut self, msg: WormholeMessage, arrival: i64) -> bool {
        if arrival >= msg.expires_at || !self.seen.insert(msg.key()) {
            return false;
        }
        let Ok(adv) = msg.advertisement(self.service_uuid) else {
            return false;
        };
        if self
            .entries
            .iter()
            .any(|e| e.adv.payload() == adv.payload() && e.msg.expires_at > arrival)
        {
            return false;
        }
        self.entries.push(Entry {
            msg,
            adv,
            next_at: arrival,
        });
        true
    }

    /// Every emission scheduled at or before `now`, oldest first.
    pub fn due(&mut self, now: i64) -> Vec<Emission> {
        let mut out = Vec::new();
        for e in &mut self.entries {
            while e.next_at <= now && e.next_at < e.msg.expires_at {
                out.push(Emission {
                    at: e.next_at,
                    advertisement: e.adv,
                    origin: e.msg.origin.clone(),
                    seq: e.msg.seq,
                });
                e.next_at += self.cadence_s;
            }
        }
        self.entries.retain(|e| e.next_at < e.msg.expires_at);
        out.sort_by(|a, b| (a.at, &a.origin, a.seq).cmp(&(b.at, &b.origin, b.seq)));
        out
    }

    pub fn next_due(&self) -> Option<i64> {
        self.entries.iter().map(|e| e.next_at).min()
    }

    pub fn active(&self) -> usize {
        self.entries.len()
    }
}

/// Human-readable node log in syslog style.
#[derive(Debug, Clone, Default)]
pub struct NodeLog {
    pub node_id: String,
    pub lines: Vec<String>,
}

impl NodeLog {
    pub fn new(node_id: &str) -> Self {
        Self {
            node_id: node_id.to_string(),
            lines: Vec::new(),
        }
    }

    fn push(&mut self, at: i64, tag: &str, id: &str, adv: &Advertisement) -> &str {
        let ts = DateTime::from_timestamp(at, 0)
            .map(|d| d.format("%b %d %H:%M:%S").to_string())
            .unwrap_or_else(|| at.to_string());
        self.lines.push(format!(
            "{ts} {} wormhole: [{tag:<12}] [INFO] [{id}] [{}] {:04x} {}",
            self.node_id,
            adv.kind(),
            adv.service_uuid,
            colon_hex(&adv.payload()),
        ));
        self.lines.last().expect("just pushed")
    }

    /// A frame heard on the local radio.
    pub fn provider_in(&mut self, at: i64, adv: &Advertisement) -> &str {
        self.push(at, "provider", "in ", adv)
    }

    /// A frame sent on the local radio.
    pub fn provider_out(&mut self, at: i64, adv: &Advertisement) -> &str {
        self.push(at, "provider", "out", adv)
    }

    pub fn wormhole_out(&mut self, at: i64, msg: &WormholeMessage, adv: &Advertisement) -> &str {
        self.push(at, "wormhole-out", &msg.seq.to_string(), adv)
    }

    pub fn wormhole_in(&mut self, at: i64, msg: &WormholeMessage, adv: &Advertisement) -> &str {
        self.push(at, "wormhole-in", &format!("{}#{}", msg.origin, msg.seq), adv)
    }
}

/// Anything a sniffer can hand its messages to.
pub trait Publish {
    fn publish(&mut self, msg: &WormholeMessage) -> Result<(), WormholeError>;
}

impl Publish for Vec<WormholeMessage> {
    fn publish(&mut self, msg: &WormholeMessage) -> Result<(), WormholeError> {
        self.push(msg.clone());
        Ok(())
    }
}

/// A broker connection. Received messages are deduplicated by
/// `(origin, seq)` on a background thread.
#[derive(Debug)]
pub struct BrokerClient {
    writer: BufWriter<TcpStream>,
    stream: TcpStream,
    rx: Receiver<Result<WormholeMessage, String>>,
    reader: Option<JoinHandle<()>>,
}

impl BrokerClient {
    pub fn connect(addr: &str, node_id: &str) -> Result<Self, WormholeError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut writer = BufWriter::new(stream.try_clone()?);
        write_frame(
            &mut writer,
            &Frame::Hello {
                hello: node_id.to_string(),
            },
        )?;
        let (tx, rx) = mpsc::channel();
        let mut input = BufReader::new(stream.try_clone()?);
        let reader = thread::spawn(move || {
            let mut seen = HashSet::new();
            loop {
                match read_frame(&mut input) {
                    Ok(Some(Frame::Message(m))) => {
                        if seen.insert(m.key()) && tx.send(Ok(m)).is_err() {
                            break;
                        }
                    }
                    Ok(Some(Frame::Hello { .. })) => {
                        let _ = tx.send(Err("unexpected hello from broker".into()));
                        break;
                    }
                    Ok(None) => break,
                    Err(e) => {
                        let _ = tx.send(Err(e.to_string()));
                        break;
                    }
                }
            }
        });
        Ok(Self {
            writer,
            stream,
            rx,
            reader: Some(reader),
        })
    }

    /// Waits up to `timeout` for the next message; `Ok(None)` on timeout.
    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<WormholeMessage>, WormholeError> {
        match self.rx.recv_timeout(timeout) {
            Ok(Ok(m)) => Ok(Some(m)),
            Ok(Err(e)) => Err(WormholeError::Protocol(e)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => {
                Err(WormholeError::Protocol("broker closed the connection".into()))
            }
        }
    }

    /// Collects messages until `n` arrived or `timeout` passed in total.
    pub fn recv_n(&self, n: usize, timeout: Duration) -> Result<Vec<WormholeMessage>, WormholeError> {
        let deadline = Instant::now() + timeout;
        let mut out = Vec::new();
        while out.len() < n {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(WormholeError::Timeout);
            }
            if let Some(m) = self.recv_timeout(left)? {
                out.push(m);
            }
        }
        Ok(out)
    }

    pub fn close(mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
    }
}

impl Publish for BrokerClient {
    fn publish(&mut self, msg: &WormholeMessage) -> Result<(), WormholeError> {
        write_frame(&mut self.writer, &Frame::Message(msg.clone()))?;
        Ok(())
    }
}

impl Drop for BrokerClient {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

/// Feeds captured `(timestamp, frame)` pairs through `sniffer` and publishes
/// the resulting messages. Returns how many were published.
pub fn sniff_and_publish<I, P>(
    sniffer: &mut Sniffer,
    frames: I,
    publisher: &mut P,
    log: &mut NodeLog,
) -> Result<usize, WormholeError>
where
    I: IntoIterator<Item = (i64, Vec<u8>)>,
    P: Publish + ?Sized,
{
    let mut published = 0;
    for (at, bytes) in frames {
        let Ok(adv) = decode_advertisement(&bytes) else {
            continue;
        };
        log.provider_in(at, &adv);
        if let Some(msg) = sniffer.on_advertisement(&adv, at) {
            publisher.publish(&msg)?;
            log.wormhole_out(at, &msg, &adv);
            published += 1;
        }
    }
    Ok(published)
}

/// Drives a rebroadcaster in virtual time: each `(arrival, message)` is
/// accepted in arrival order and every emission due before `until` is
/// returned.
pub fn rebroadcast_loop<I>(
    rebroadcaster: &mut Rebroadcaster,
    incoming: I,
    until: i64,
    log: &mut NodeLog,
) -> Vec<Emission>
where
    I: IntoIterator<Item = (i64, WormholeMessage)>,
{
    let mut incoming: Vec<_> = incoming.into_iter().collect();
    incoming.sort_by_key(|(at, msg)| (*at, msg.key()));
    let mut out = Vec::new();
    let emit = |rb: &mut Rebroadcaster, now: i64, log: &mut NodeLog, out: &mut Vec<Emission>| {
        for e in rb.due(now) {
            log.provider_out(e.at, &e.advertisement);
            out.push(e);
        }
    };
    for (arrival, msg) in incoming {
        if arrival >= until {
            break;
        }
        emit(rebroadcaster, arrival - 1, log, &mut out);
        if let Ok(adv) = msg.advertisement(rebroadcaster.service_uuid) {
            log.wormhole_in(arrival, &msg, &adv);
        }
        rebroadcaster.accept(msg, arrival);
    }
    emit(rebroadcaster, until - 1, log, &mut out);
    out
}

/// Summary of a real-time node run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NodeRunSummary {
    pub frames_read: usize,
    pub published: usize,
    pub received: usize,
    pub emitted: usize,
}

/// One input line as an advertising frame: either the frame in hex (colons
/// allowed) or a capture-log record. Blank lines and comments yield `None`.
pub fn parse_input_line(line: &str) -> Option<Vec<u8>> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return None;
    }
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() == 5 {
        let rpi = crate::crypto::Rpi::from_hex(fields[2]).ok()?;
        let aem = crate::crypto::Aem::from_hex(fields[3]).ok()?;
        return Some(encode_advertisement(&Advertisement::new(rpi, aem)));
    }
    hex::decode(line.replace(':', "")).ok()
}

/// Runs a node against a live broker in wall-clock time.
///
/// A sniffing node reads one captured frame per input line (see
/// [`parse_input_line`]) and stamps it with its own clock, as a live radio
/// would. A rebroadcasting node writes one log line per replay. The node
/// stops after `duration`, or when its input ends if it only sniffs.
pub fn run_node(
    config: &NodeConfig,
    input: Option<Box<dyn BufRead + Send>>,
    duration: Duration,
    clock: Arc<dyn Clock>,
    out: &mut dyn Write,
) -> Result<NodeRunSummary, WormholeError> {
    let mut client = BrokerClient::connect(&config.broker, &config.node_id)?;
    let mut sniffer = Sniffer::new(&config.node_id, config.replay_window_s);
    let mut rebroadcaster = Rebroadcaster::new(config.replay_cadence_s, config.service_uuid);
    let mut log = NodeLog::new(&config.node_id);
    let mut summary = NodeRunSummary::default();

    let (frame_tx, frame_rx) = mpsc::channel::<String>();
    let mut input_open = false;
    if config.role.sniffs() {
        if let Some(input) = input {
            input_open = true;
            thread::spawn(move || {
                for line in input.lines().map_while(Result::ok) {
                    if frame_tx.send(line).is_err() {
                        break;
                    }
                }
            });
        }
    }

    let deadline = Instant::now() + duration;
    let tick = Duration::from_millis(50);
    let mut flushed = 0;
    loop {
        if input_open {
            loop {
                match frame_rx.try_recv() {
                    Ok(line) => {
                        let Some(bytes) = parse_input_line(&line) else { continue };
                        summary.frames_read += 1;
                        let at = clock.now();
                        summary.published +=
                            sniff_and_publish(&mut sniffer, [(at, bytes)], &mut client, &mut log)?;
                    }
                    Err(mpsc::TryRecvError::Empty) => break,
                    Err(mpsc::TryRecvError::Disconnected) => {
                        input_open = false;
                        break;
                    }
                }
            }
        }
        if config.role.rebroadcasts() {
            while let Some(msg) = client.recv_timeout(Duration::ZERO)? {
                let now = clock.now();
                summary.received += 1;
                if let Ok(adv) = msg.advertisement(config.service_uuid) {
                    log.wormhole_in(now, &msg, &adv);
                }
                rebroadcaster.accept(msg, now);
            }
            for e in rebroadcaster.due(clock.now()) {
                log.provider_out(e.at, &e.advertisement);
                summary.emitted += 1;
            }
        }
        for line in &log.lines[flushed..] {
            writeln!(out, "{line}")?;
        }
        flushed = log.lines.len();
        out.flush()?;

        let input_done = !input_open && !config.role.rebroadcasts();
        if input_done || Instant::now() >= deadline {
            break;
        }
        thread::sleep(tick);
    }
    client.close();
    Ok(summary)
}
