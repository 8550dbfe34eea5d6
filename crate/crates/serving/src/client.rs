//! Blocking client for the model server, direct or through a broker.

use std::io::{self, BufReader};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde_json::Value;
use thiserror::Error;

use crate::frame::{read_frame, write_frame, FrameError, Message};
use crate::{reply_topic, REQUEST_TOPIC};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot connect to {addr}: {source}")]
    Connect {
        addr: String,
        #[source]
        source: io::Error,
    },
    #[error("no response within {0:?}")]
    Timeout(Duration),
    #[error("{code}: {message}")]
    Remote { code: String, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Io(io::Error),
}

impl ClientError {
    pub fn code(&self) -> &str {
        match self {
            ClientError::Connect { .. } => "connect",
            ClientError::Timeout(_) => "timeout",
            ClientError::Remote { code, .. } => code,
            ClientError::Protocol(_) => "protocol",
            ClientError::Io(_) => "io",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastResponse {
    pub id: String,
    pub forecast: Vec<f64>,
    pub model_version: String,
}

#[derive(Debug, Clone)]
pub enum Target {
    Direct(String),
    Broker { address: String, topic: String },
}

impl Target {
    pub fn broker(address: impl Into<String>) -> Self {
        Target::Broker {
            address: address.into(),
            topic: REQUEST_TOPIC.to_string(),
        }
    }
}

/// Process-unique request id.
pub fn next_id() -> String {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_nanos());
    format!(
        "{}-{nanos:x}-{}",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    )
}

/// One framed connection with a deadline applied to every read and write.
pub struct Connection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    deadline: Instant,
    timeout: Duration,
}

impl Connection {
    pub fn open(addr: &str, timeout: Duration) -> Result<Self, ClientError> {
        let deadline = Instant::now() + timeout;
        let connect_err = |source| ClientError::Connect {
            addr: addr.to_string(),
            source,
        };
        let addrs: Vec<SocketAddr> = addr.to_socket_addrs().map_err(connect_err)?.collect();
        let mut last = io::Error::new(io::ErrorKind::AddrNotAvailable, "address resolved to nothing");
        for a in addrs {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(ClientError::Timeout(timeout));
            }
            match TcpStream::connect_timeout(&a, left) {
                Ok(stream) => {
                    stream.set_nodelay(true).map_err(ClientError::Io)?;
                    let writer = stream.try_clone().map_err(ClientError::Io)?;
                    return Ok(Self {
                        reader: BufReader::new(stream),
                        writer,
                        deadline,
                        timeout,
                    });
                }
                Err(e) if e.kind() == io::ErrorKind::TimedOut => return Err(ClientError::Timeout(timeout)),
                Err(e) => last = e,
            }
        }
        Err(connect_err(last))
    }

    fn remaining(&self) -> Result<Duration, ClientError> {
        let left = self.deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            Err(ClientError::Timeout(self.timeout))
        } else {
            Ok(left)
        }
    }

    fn map(&self, e: FrameError) -> ClientError {
        match e {
            FrameError::Io(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                ClientError::Timeout(self.timeout)
            }
            FrameError::Io(e) => ClientError::Io(e),
            other => ClientError::Protocol(other.to_string()),
        }
    }

    pub fn send(&mut self, msg: &Message) -> Result<(), ClientError> {
        let left = self.remaining()?;
        self.writer.set_write_timeout(Some(left)).map_err(ClientError::Io)?;
        write_frame(&mut self.writer, msg).map_err(|e| self.map(e))
    }

    pub fn recv(&mut self) -> Result<Message, ClientError> {
        let left = self.remaining()?;
        self.reader.get_ref().set_read_timeout(Some(left)).map_err(ClientError::Io)?;
        match read_frame(&mut self.reader) {
            Ok(Some(m)) => Ok(m),
            Ok(None) => Err(ClientError::Protocol("connection closed".into())),
            Err(e) => Err(self.map(e)),
        }
    }

    pub fn call(&mut self, msg: &Message) -> Result<Message, ClientError> {
        self.send(msg)?;
        self.recv()
    }
}

/// Broker-side publish and fetch over one connection.
pub struct BrokerClient {
    conn: Connection,
}

impl BrokerClient {
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, ClientError> {
        Ok(Self {
            conn: Connection::open(addr, timeout)?,
        })
    }

    pub fn publish(&mut self, topic: &str, payload: Value) -> Result<(), ClientError> {
        let id = next_id();
        let reply = self.conn.call(&Message::Publish {
            id: id.clone(),
            topic: topic.to_string(),
            payload,
        })?;
        match reply {
            Message::Publish { id: got, .. } if got == id => Ok(()),
            other => Err(unexpected(other)),
        }
    }

    /// `Ok(None)` when nothing arrived within `wait`.
    pub fn fetch(&mut self, topic: &str, wait: Duration) -> Result<Option<Value>, ClientError> {
        let id = next_id();
        let reply = self.conn.call(&Message::Fetch {
            id: id.clone(),
            topic: topic.to_string(),
            timeout_ms: Some(wait.as_millis() as u64),
            payload: None,
            empty: false,
        })?;
        match reply {
            Message::Fetch { id: got, payload, .. } if got == id => Ok(payload),
            other => Err(unexpected(other)),
        }
    }
}

fn unexpected(msg: Message) -> ClientError {
    match msg {
        Message::Error { code, message, .. } => ClientError::Remote { code, message },
        other => ClientError::Protocol(format!("unexpected reply {other:?}")),
    }
}

fn into_response(msg: Message, id: &str) -> Result<ForecastResponse, ClientError> {
    match msg {
        Message::ForecastResp {
            id: got,
            forecast,
            model_version,
        } if got == id => Ok(ForecastResponse {
            id: got,
            forecast,
            model_version,
        }),
        Message::Error { id: got, code, message } if got == id || got.is_empty() => {
            Err(ClientError::Remote { code, message })
        }
        other => Err(ClientError::Protocol(format!("reply does not match request {id}: {other:?}"))),
    }
}

pub fn client_request(
    target: &Target,
    model: &str,
    history: &[f64],
    horizon: usize,
    timeout: Duration,
) -> Result<ForecastResponse, ClientError> {
    request_with_id(target, &next_id(), model, history, horizon, timeout)
}

pub fn request_with_id(
    target: &Target,
    id: &str,
    model: &str,
    history: &[f64],
    horizon: usize,
    timeout: Duration,
) -> Result<ForecastResponse, ClientError> {
    match target {
        Target::Direct(addr) => {
            let mut conn = Connection::open(addr, timeout)?;
            let reply = conn.call(&Message::ForecastReq {
                id: id.to_string(),
                model: model.to_string(),
                horizon,
                history: history.to_vec(),
                reply_topic: None,
            })?;
            into_response(reply, id)
        }
        Target::Broker { address, topic } => {
            let started = Instant::now();
            let mut broker = BrokerClient::connect(address, timeout)?;
            let reply_to = reply_topic(id);
            let req = Message::ForecastReq {
                id: id.to_string(),
                model: model.to_string(),
                horizon,
                history: history.to_vec(),
                reply_topic: Some(reply_to.clone()),
            };
            broker.publish(topic, req.to_value())?;
            // leave headroom for the FETCH reply itself
            let wait = timeout.saturating_sub(started.elapsed()).saturating_sub(Duration::from_millis(20));
            match broker.fetch(&reply_to, wait)? {
                Some(payload) => {
                    let msg = Message::from_value(payload).map_err(|e| ClientError::Protocol(e.to_string()))?;
                    into_response(msg, id)
                }
                None => Err(ClientError::Timeout(timeout)),
            }
        }
    }
}
