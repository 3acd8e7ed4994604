//! Relay ("wormhole") attack on exposure-notification beacons.
//!
//! Sniffer nodes capture advertisements and publish them, stamped with an
//! expiry, to a broker. The broker fans every message out to all other
//! connected nodes. Rebroadcaster nodes replay each received advertisement at
//! a fixed cadence until it expires, so devices near them record contacts with
//! people who were never nearby.
//!
//! Broker frames are a 4-byte big-endian length followed by a JSON body. A
//! node opens with `{"hello": "<node id>"}`; every later frame in either
//! direction is a message
//! `{"origin", "seq", "payload_hex", "captured_at", "expires_at"}`.

mod broker;
mod experiment;
mod node;

use std::io::{self, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ble::{Advertisement, EXPOSURE_NOTIFICATION_UUID, SERVICE_PAYLOAD_LEN};

pub use broker::{broker_serve, BrokerHandle};
pub use experiment::{run_end_to_end, AttackReport, WormholeExperiment};
pub use node::{
    parse_input_line, rebroadcast_loop, run_node, sniff_and_publish, BrokerClient, Emission, NodeLog, Publish,
    Rebroadcaster, Sniffer,
};

/// Default replay window: the matching tolerance.
pub const DEFAULT_REPLAY_WINDOW_S: i64 = 7200;
/// Default replay cadence: the usual advertising interval of phones.
pub const DEFAULT_CADENCE_S: i64 = 2;
/// Largest frame body accepted from the network.
pub const MAX_FRAME_LEN: u32 = 64 * 1024;

#[derive(Debug, Error)]
pub enum WormholeError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("timed out waiting for broker traffic")]
    Timeout,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A captured advertisement in transit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WormholeMessage {
    pub origin: String,
    pub seq: u64,
    pub payload_hex: String,
    pub captured_at: i64,
    pub expires_at: i64,
}

impl WormholeMessage {
    pub fn new(origin: &str, seq: u64, adv: &Advertisement, captured_at: i64, window_s: i64) -> Self {
        Self {
            origin: origin.to_string(),
            seq,
            payload_hex: hex::encode(adv.payload()),
            captured_at,
            expires_at: captured_at + window_s,
        }
    }

    pub fn payload(&self) -> Result<[u8; SERVICE_PAYLOAD_LEN], WormholeError> {
        hex::decode(&self.payload_hex)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| WormholeError::Protocol(format!("payload must be {SERVICE_PAYLOAD_LEN} hex bytes")))
    }

    pub fn advertisement(&self, service_uuid: u16) -> Result<Advertisement, WormholeError> {
        Advertisement::from_payload(&self.payload()?, service_uuid)
            .map_err(|e| WormholeError::Protocol(e.to_string()))
    }

    pub fn key(&self) -> (String, u64) {
        (self.origin.clone(), self.seq)
    }

    pub fn validate(&self) -> Result<(), WormholeError> {
        self.payload()?;
        if self.expires_at < self.captured_at {
            return Err(WormholeError::Protocol("expires before capture".into()));
        }
        if self.origin.is_empty() {
            return Err(WormholeError::Protocol("empty origin".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub(crate) enum Frame {
    Hello { hello: String },
    Message(WormholeMessage),
}

pub(crate) fn write_frame<W: Write>(out: &mut W, frame: &Frame) -> io::Result<()> {
    let body = serde_json::to_vec(frame).expect("frame serializes");
    let mut buf = Vec::with_capacity(4 + body.len());
    buf.extend_from_slice(&(body.len() as u32).to_be_bytes());
    buf.extend_from_slice(&body);
    out.write_all(&buf)?;
    out.flush()
}

/// Reads one frame; `Ok(None)` on clean end of stream.
pub(crate) fn read_frame<R: Read>(input: &mut R) -> Result<Option<Frame>, WormholeError> {
    let mut len = [0u8; 4];
    match input.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len);
    if len == 0 || len > MAX_FRAME_LEN {
        return Err(WormholeError::Protocol(format!("frame length {len}")));
    }
    let mut body = vec![0u8; len as usize];
    input.read_exact(&mut body)?;
    let frame: Frame = serde_json::from_slice(&body).map_err(|e| WormholeError::Protocol(e.to_string()))?;
    if let Frame::Message(m) = &frame {
        m.validate()?;
    }
    Ok(Some(frame))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRole {
    Sniffer,
    Rebroadcaster,
    Both,
}

impl NodeRole {
    pub fn sniffs(self) -> bool {
        matches!(self, NodeRole::Sniffer | NodeRole::Both)
    }

    pub fn rebroadcasts(self) -> bool {
        matches!(self, NodeRole::Rebroadcaster | NodeRole::Both)
    }
}

impl FromStr for NodeRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sniffer" => Ok(NodeRole::Sniffer),
            "rebroadcaster" => Ok(NodeRole::Rebroadcaster),
            "both" => Ok(NodeRole::Both),
            other => Err(format!("unknown role {other:?} (sniffer | rebroadcaster | both)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeConfig {
    pub node_id: String,
    pub broker: String,
    pub role: NodeRole,
    pub replay_cadence_s: i64,
    pub replay_window_s: i64,
    pub service_uuid: u16,
}

impl NodeConfig {
    pub fn new(node_id: &str, broker: &str, role: NodeRole) -> Self {
        Self {
            node_id: node_id.to_string(),
            broker: broker.to_string(),
            role,
            replay_cadence_s: DEFAULT_CADENCE_S,
            replay_window_s: DEFAULT_REPLAY_WINDOW_S,
            service_uuid: EXPOSURE_NOTIFICATION_UUID,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{Aem, Rpi};

    #[test]
    fn frame_round_trip_and_limits() {
        let adv = Advertisement::new(Rpi([7; 16]), Aem([1, 2, 3, 4]));
        let msg = WormholeMessage::new("node-x", 3, &adv, 1000, DEFAULT_REPLAY_WINDOW_S);
        assert_eq!(msg.expires_at, 8200);
        let mut buf = Vec::new();
        write_frame(&mut buf, &Frame::Message(msg.clone())).unwrap();
        assert_eq!(u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize, buf.len() - 4);
        let body: serde_json::Value = serde_json::from_slice(&buf[4..]).unwrap();
        assert_eq!(body["payload_hex"], hex::encode(adv.payload()));
        assert_eq!(
            read_frame(&mut buf.as_slice()).unwrap(),
            Some(Frame::Message(msg.clone()))
        );
        assert_eq!(msg.advertisement(EXPOSURE_NOTIFICATION_UUID).unwrap(), adv);

        let mut hello = Vec::new();
        write_frame(&mut hello, &Frame::Hello { hello: "n".into() }).unwrap();
        assert_eq!(
            read_frame(&mut hello.as_slice()).unwrap(),
            Some(Frame::Hello { hello: "n".into() })
        );

        assert!(read_frame(&mut [0u8; 0].as_slice()).unwrap().is_none());
        assert!(read_frame(&mut [0xff, 0xff, 0xff, 0xff].as_slice()).is_err());
        let mut junk = 5u32.to_be_bytes().to_vec();
        junk.extend_from_slice(b"{nope");
        assert!(read_frame(&mut junk.as_slice()).is_err());
        let mut short = Vec::new();
        let mut bad = msg;
        bad.payload_hex = "00".into();
        write_frame(&mut short, &Frame::Message(bad)).unwrap();
        assert!(read_frame(&mut short.as_slice()).is_err());
    }

    #[test]
    fn roles_parse() {
        assert_eq!("both".parse::<NodeRole>().unwrap(), NodeRole::Both);
        assert!(NodeRole::Both.sniffs() && NodeRole::Both.rebroadcasts());
        assert!(!NodeRole::Sniffer.rebroadcasts());
        assert!("relay".parse::<NodeRole>().is_err());
    }
}
