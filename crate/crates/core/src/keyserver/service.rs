//! Newline-delimited JSON over TCP.
//!
//! Each request is one line `{"op": ..., "payload": {...}}`; each response is
//! one line `{"ok": true, "result": ...}` or
//! `{"ok": false, "error": {"kind": ..., "message": ...}}`.
//!
//! | op           | payload                          | result                         |
//! |--------------|----------------------------------|--------------------------------|
//! | `issue_tan`  | `{"credential": str}`            | `Tan`                          |
//! | `upload`     | `{"tan": str, "teks": [TEK...]}` | `{"bundle_id", "accepted_keys"}` |
//! | `download`   | `{"since": unix_s}`              | `{"payload", "signature"}`     |
//! | `public_key` | `{}`                             | hex string                     |
//! | `purge`      | `{"credential": str}`            | number of keys removed         |

use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{KeyServer, KeyServerError, SignedAggregate, Tan, UploadReceipt};
use crate::clock::Clock;
use crate::crypto::TemporaryExposureKey;
use crate::net::{serve, ServerHandle};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Request {
    pub op: String,
    #[serde(default)]
    pub payload: Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

impl Response {
    fn ok(result: Value) -> Self {
        Self {
            ok: true,
            result: Some(result),
            error: None,
        }
    }

    fn err(e: &KeyServerError) -> Self {
        Self {
            ok: false,
            result: None,
            error: Some(ErrorBody {
                kind: e.kind().to_string(),
                message: e.to_string(),
            }),
        }
    }
}

#[derive(Deserialize)]
struct CredentialPayload {
    credential: String,
}

#[derive(Deserialize)]
struct UploadPayload {
    tan: String,
    teks: Vec<TemporaryExposureKey>,
}

#[derive(Deserialize)]
struct DownloadPayload {
    #[serde(default)]
    since: i64,
}

fn payload<T: for<'de> Deserialize<'de>>(v: Value) -> Result<T, KeyServerError> {
    serde_json::from_value(v).map_err(|e| KeyServerError::Protocol(format!("bad payload: {e}")))
}

fn to_value<T: Serialize>(v: T) -> Value {
    serde_json::to_value(v).expect("response serializes")
}

fn handle(server: &Mutex<KeyServer>, clock: &dyn Clock, req: Request) -> Result<Value, KeyServerError> {
    let now = clock.now();
    let mut server = server.lock().expect("key server lock");
    match req.op.as_str() {
        "issue_tan" => {
            let p: CredentialPayload = payload(req.payload)?;
            Ok(to_value(server.issue_tan(&p.credential, now)?))
        }
        "upload" => {
            let p: UploadPayload = payload(req.payload)?;
            Ok(to_value(server.upload(p.teks, &p.tan, now)?))
        }
        "download" => {
            let p: DownloadPayload = payload(req.payload)?;
            Ok(to_value(server.download(p.since, now)))
        }
        "public_key" => Ok(Value::String(server.public_key_hex())),
        "purge" => {
            let p: CredentialPayload = payload(req.payload)?;
            if p.credential != server.admin_token {
                return Err(KeyServerError::Unauthorized);
            }
            Ok(json!(server.purge(now)?))
        }
        other => Err(KeyServerError::Protocol(format!("unknown op {other:?}"))),
    }
}

fn serve_connection(stream: TcpStream, server: &Mutex<KeyServer>, clock: &dyn Clock) -> io::Result<()> {
    let mut writer = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Request>(&line) {
            Ok(req) => match handle(server, clock, req) {
                Ok(v) => Response::ok(v),
                Err(e) => Response::err(&e),
            },
            Err(e) => Response::err(&KeyServerError::Protocol(e.to_string())),
        };
        let mut out = serde_json::to_vec(&response).expect("response serializes");
        out.push(b'\n');
        writer.write_all(&out)?;
    }
    Ok(())
}

/// Serves `server` on `listen` until the handle is shut down or dropped.
pub fn serve_keys(listen: &str, server: KeyServer, clock: Arc<dyn Clock>) -> io::Result<ServerHandle> {
    let server = Arc::new(Mutex::new(server));
    serve(listen, "keyserver", move |stream| {
        let _ = serve_connection(stream, &server, clock.as_ref());
    })
}

/// Blocking client keeping one connection open.
#[derive(Debug)]
pub struct KeyServerClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl KeyServerClient {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        Ok(Self {
            writer: stream.try_clone()?,
            reader: BufReader::new(stream),
        })
    }

    pub fn call(&mut self, op: &str, payload: Value) -> Result<Value, KeyServerError> {
        let mut line = serde_json::to_vec(&Request {
            op: op.to_string(),
            payload,
        })
        .expect("request serializes");
        line.push(b'\n');
        self.writer.write_all(&line)?;
        let mut reply = String::new();
        if self.reader.read_line(&mut reply)? == 0 {
            return Err(KeyServerError::Protocol("connection closed".into()));
        }
        let resp: Response = serde_json::from_str(&reply).map_err(|e| KeyServerError::Protocol(e.to_string()))?;
        if resp.ok {
            Ok(resp.result.unwrap_or(Value::Null))
        } else {
            let e = resp.error.unwrap_or(ErrorBody {
                kind: "Protocol".into(),
                message: "missing error".into(),
            });
            Err(match e.kind.as_str() {
                "Unauthorized" => KeyServerError::Unauthorized,
                "InvalidTan" => KeyServerError::InvalidTan,
                "ReplayedTan" => KeyServerError::ReplayedTan,
                "MalformedBundle" => KeyServerError::MalformedBundle(
                    e.message
                        .strip_prefix("malformed bundle: ")
                        .map(str::to_string)
                        .unwrap_or(e.message),
                ),
                "BadSignature" => KeyServerError::BadSignature,
                _ => KeyServerError::Protocol(e.message),
            })
        }
    }

    fn decode<T: for<'de> Deserialize<'de>>(v: Value) -> Result<T, KeyServerError> {
        serde_json::from_value(v).map_err(|e| KeyServerError::Protocol(e.to_string()))
    }

    pub fn issue_tan(&mut self, credential: &str) -> Result<Tan, KeyServerError> {
        Self::decode(self.call("issue_tan", json!({ "credential": credential }))?)
    }

    pub fn upload(&mut self, teks: &[TemporaryExposureKey], tan: &str) -> Result<UploadReceipt, KeyServerError> {
        Self::decode(self.call("upload", json!({ "tan": tan, "teks": teks }))?)
    }

    pub fn download(&mut self, since: i64) -> Result<SignedAggregate, KeyServerError> {
        Self::decode(self.call("download", json!({ "since": since }))?)
    }

    pub fn public_key(&mut self) -> Result<String, KeyServerError> {
        Self::decode(self.call("public_key", json!({}))?)
    }

    pub fn purge(&mut self, credential: &str) -> Result<usize, KeyServerError> {
        Self::decode(self.call("purge", json!({ "credential": credential }))?)
    }
}
