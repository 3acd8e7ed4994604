//! Fan-out broker.

use std::collections::{HashMap, HashSet};
use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpStream};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread;

use super::{read_frame, write_frame, Frame, WormholeError, WormholeMessage};
use crate::clock::Clock;
use crate::net::{serve, ServerHandle};

#[derive(Default)]
struct State {
    next_conn: u64,
    conns: HashMap<u64, Conn>,
    /// Per node id, every (origin, seq) already handed to that node.
    delivered: HashMap<String, HashSet<(String, u64)>>,
    /// Messages kept for nodes that connect later, until they expire.
    retained: Vec<WormholeMessage>,
    seen: HashSet<(String, u64)>,
    published: u64,
}

struct Conn {
    node_id: String,
    tx: Sender<Arc<Frame>>,
    stream: TcpStream,
}

impl State {
    fn deliver(&mut self, conn_id: u64, msg: &WormholeMessage) {
        let frame = Arc::new(Frame::Message(msg.clone()));
        let Some(conn) = self.conns.get(&conn_id) else { return };
        if conn.node_id == msg.origin {
            return;
        }
        let delivered = self.delivered.entry(conn.node_id.clone()).or_default();
        if delivered.insert(msg.key()) {
            let _ = conn.tx.send(frame);
        }
    }

    fn publish(&mut self, msg: WormholeMessage, now: i64) {
        if !self.seen.insert(msg.key()) {
            return;
        }
        self.published += 1;
        let ids: Vec<u64> = self.conns.keys().copied().collect();
        for id in ids {
            self.deliver(id, &msg);
        }
        self.retained.retain(|m| m.expires_at > now);
        if msg.expires_at > now {
            self.retained.push(msg);
        }
    }
}

/// Handle to a running broker.
#[derive(Debug)]
pub struct BrokerHandle {
    server: ServerHandle,
    state: Arc<Mutex<State>>,
}

impl std::fmt::Debug for State {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("State")
            .field("connections", &self.conns.len())
            .field("published", &self.published)
            .finish()
    }
}

impl BrokerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.server.local_addr()
    }

    /// Distinct messages accepted from publishers so far.
    pub fn published(&self) -> u64 {
        self.state.lock().expect("broker lock").published
    }

    pub fn connections(&self) -> usize {
        self.state.lock().expect("broker lock").conns.len()
    }

    /// Stops accepting and closes every open connection.
    pub fn shutdown(self) {
        {
            let mut st = self.state.lock().expect("broker lock");
            for conn in st.conns.values() {
                let _ = conn.stream.shutdown(Shutdown::Both);
            }
            st.conns.clear();
        }
        self.server.shutdown();
    }

    /// Blocks until the broker stops.
    pub fn wait(self) {
        self.server.wait();
    }
}

fn handle_connection(
    stream: TcpStream,
    state: &Mutex<State>,
    clock: &dyn Clock,
    log: &(dyn Fn(String) + Send + Sync),
) -> Result<(), WormholeError> {
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
    let mut reader = BufReader::new(stream.try_clone()?);
    let node_id = match read_frame(&mut reader)? {
        Some(Frame::Hello { hello }) if !hello.is_empty() => hello,
        Some(_) => return Err(WormholeError::Protocol("expected hello".into())),
        None => return Ok(()),
    };

    let (tx, rx) = mpsc::channel::<Arc<Frame>>();
    let mut writer = BufWriter::new(stream.try_clone()?);
    let writer_thread = thread::spawn(move || {
        for frame in rx {
            if write_frame(&mut writer, &frame).is_err() {
                break;
            }
        }
    });

    let conn_id = {
        let mut st = state.lock().expect("broker lock");
        let id = st.next_conn;
        st.next_conn += 1;
        st.conns.insert(
            id,
            Conn {
                node_id: node_id.clone(),
                tx,
                stream: stream.try_clone()?,
            },
        );
        let now = clock.now();
        let backlog: Vec<WormholeMessage> = st.retained.iter().filter(|m| m.expires_at > now).cloned().collect();
        for m in &backlog {
            st.deliver(id, m);
        }
        id
    };
    log(format!("[broker      ] [INFO] [con] [{node_id}] {peer}"));

    let result = loop {
        match read_frame(&mut reader) {
            Ok(Some(Frame::Message(msg))) => {
                let now = clock.now();
                state.lock().expect("broker lock").publish(msg, now);
            }
            Ok(Some(Frame::Hello { .. })) => break Err(WormholeError::Protocol("duplicate hello".into())),
            Ok(None) => break Ok(()),
            Err(e) => break Err(e),
        }
    };

    state.lock().expect("broker lock").conns.remove(&conn_id);
    let _ = stream.shutdown(Shutdown::Both);
    let _ = writer_thread.join();
    match &result {
        Ok(()) => log(format!("[broker      ] [INFO] [dis] [{node_id}] {peer}")),
        Err(e) => log(format!("[broker      ] [WARN] [err] [{node_id}] {peer} {e}")),
    }
    result
}

/// Starts a broker on `listen`. `log` receives one line per connection event.
pub fn broker_serve<L>(listen: &str, clock: Arc<dyn Clock>, log: L) -> std::io::Result<BrokerHandle>
where
    L: Fn(String) + Send + Sync + 'static,
{
    let state = Arc::new(Mutex::new(State::default()));
    let shared = Arc::clone(&state);
    let log = Arc::new(log);
    let server = serve(listen, "broker", move |stream| {
        let _ = handle_connection(stream, &shared, clock.as_ref(), log.as_ref());
    })?;
    Ok(BrokerHandle { server, state })
}
