//! Client side of a wire connection: request/response multiplexing over one
//! TCP stream.
//!
//! Any number of threads may issue requests concurrently; each gets a fresh
//! correlation id and waits for the response carrying it, so responses can
//! arrive in any order. A dedicated reader thread routes incoming frames.

use std::collections::HashMap;
use std::io::BufReader;
use std::net::{Shutdown, SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex, Weak};
use std::time::Duration;

use crate::error::{ComError, Result};
use crate::object::next_identity_token;
use crate::wire::frame::{read_message, write_message, MsgType, Payload, WireMessage};
use crate::wire::proxy::ProxyObject;

static NEXT_CONNECTION: AtomicU64 = AtomicU64::new(1);

pub(crate) fn next_connection_id() -> u64 {
    NEXT_CONNECTION.fetch_add(1, Ordering::Relaxed)
}

type Waiter = Sender<Result<WireMessage>>;

struct Pending {
    waiters: HashMap<u32, Waiter>,
    closed: bool,
}

/// How a remote object was first named to us; used to hand out one stable
/// local identity token per remote object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) enum RemoteIdentity {
    /// The server's own identity token for the object.
    Token(u64),
    /// A factory named only by its remote object id.
    Factory(u64),
}

pub struct Connection {
    id: u64,
    peer: String,
    writer: Mutex<TcpStream>,
    pending: Mutex<Pending>,
    next_correlation: AtomicU32,
    pub(crate) proxies: Mutex<HashMap<u64, Weak<ProxyObject>>>,
    identities: Mutex<HashMap<RemoteIdentity, u64>>,
}

impl Connection {
    pub fn connect(addr: &str, timeout: Duration) -> Result<Arc<Connection>> {
        let addrs: Vec<SocketAddr> = addr
            .to_socket_addrs()
            .map_err(|e| ComError::ServerNotFound(format!("{addr}: {e}")))?
            .collect();
        let mut last = None;
        for a in addrs {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(stream) => return Connection::from_stream(stream),
                Err(e) => last = Some(e),
            }
        }
        Err(ComError::ServerNotFound(match last {
            Some(e) => format!("{addr}: {e}"),
            None => format!("{addr}: no addresses"),
        }))
    }

    /// Wraps an established stream and starts the reader thread.
    pub fn from_stream(stream: TcpStream) -> Result<Arc<Connection>> {
        stream.set_nodelay(true)?;
        let peer = stream
            .peer_addr()
            .map(|a| a.to_string())
            .unwrap_or_else(|_| String::from("?"));
        let reader = stream.try_clone()?;
        let conn = Arc::new(Connection {
            id: next_connection_id(),
            peer,
            writer: Mutex::new(stream),
            pending: Mutex::new(Pending {
                waiters: HashMap::new(),
                closed: false,
            }),
            next_correlation: AtomicU32::new(1),
            proxies: Mutex::new(HashMap::new()),
            identities: Mutex::new(HashMap::new()),
        });
        let weak = Arc::downgrade(&conn);
        std::thread::Builder::new()
            .name(format!("microcom-conn-{}", conn.id))
            .spawn(move || read_loop(reader, weak))?;
        Ok(conn)
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn peer(&self) -> &str {
        &self.peer
    }

    pub fn is_closed(&self) -> bool {
        self.pending.lock().unwrap().closed
    }

    /// Sends `payload` and waits for the matching response.
    pub fn request(&self, payload: Payload, timeout: Option<Duration>) -> Result<Payload> {
        let expected = match payload.msg_type() {
            MsgType::ActivateReq => MsgType::ActivateResp,
            MsgType::CallReq => MsgType::CallResp,
            MsgType::AddRef | MsgType::Release => MsgType::CountResp,
            MsgType::QueryReq => MsgType::QueryResp,
            other => {
                return Err(ComError::ProtocolError(format!(
                    "{other:?} is not a request"
                )))
            }
        };
        let (tx, rx) = mpsc::channel();
        let correlation = {
            let mut pending = self.pending.lock().unwrap();
            if pending.closed {
                return Err(ComError::ConnectionLost);
            }
            let mut c = self.next_correlation.fetch_add(1, Ordering::Relaxed);
            while c == 0 || pending.waiters.contains_key(&c) {
                c = self.next_correlation.fetch_add(1, Ordering::Relaxed);
            }
            pending.waiters.insert(c, tx);
            c
        };
        let message = payload.into_message(correlation)?;
        if let Err(e) = write_message(&mut *self.writer.lock().unwrap(), &message) {
            self.pending.lock().unwrap().waiters.remove(&correlation);
            log::debug!("connection {} write failed: {e}", self.id);
            self.fail_all();
            return Err(ComError::ConnectionLost);
        }
        let reply = match timeout {
            Some(t) => match rx.recv_timeout(t) {
                Ok(r) => r,
                Err(RecvTimeoutError::Timeout) => {
                    self.pending.lock().unwrap().waiters.remove(&correlation);
                    return Err(ComError::ActivationTimeout);
                }
                Err(RecvTimeoutError::Disconnected) => Err(ComError::ConnectionLost),
            },
            None => rx.recv().unwrap_or(Err(ComError::ConnectionLost)),
        }?;
        if reply.msg_type != expected {
            return Err(ComError::ProtocolError(format!(
                "expected {expected:?}, got {:?}",
                reply.msg_type
            )));
        }
        Payload::parse(&reply)
    }

    /// Says goodbye to the peer and tears the stream down.
    pub fn close(&self) {
        {
            let pending = self.pending.lock().unwrap();
            if pending.closed {
                return;
            }
        }
        let mut w = self.writer.lock().unwrap();
        let _ = write_message(&mut *w, &WireMessage::bye());
        let _ = w.shutdown(Shutdown::Both);
        drop(w);
        self.fail_all();
    }

    fn fail_all(&self) {
        let waiters = {
            let mut pending = self.pending.lock().unwrap();
            pending.closed = true;
            std::mem::take(&mut pending.waiters)
        };
        for (_, w) in waiters {
            let _ = w.send(Err(ComError::ConnectionLost));
        }
    }

    fn deliver(&self, message: WireMessage) {
        let waiter = self
            .pending
            .lock()
            .unwrap()
            .waiters
            .remove(&message.correlation_id);
        match waiter {
            Some(w) => {
                let _ = w.send(Ok(message));
            }
            None => log::warn!(
                "connection {}: response for unknown correlation id {}",
                self.id,
                message.correlation_id
            ),
        }
    }

    /// Local identity token for a remote object, minted on first sight.
    pub(crate) fn identity_for(&self, remote: RemoteIdentity) -> u64 {
        *self
            .identities
            .lock()
            .unwrap()
            .entry(remote)
            .or_insert_with(next_identity_token)
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        let w = self.writer.get_mut().unwrap();
        if !self.pending.get_mut().unwrap().closed {
            let _ = write_message(w, &WireMessage::bye());
        }
        let _ = w.shutdown(Shutdown::Both);
    }
}

impl std::fmt::Debug for Connection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Connection")
            .field("id", &self.id)
            .field("peer", &self.peer)
            .finish()
    }
}

fn read_loop(stream: TcpStream, weak: Weak<Connection>) {
    let mut reader = BufReader::new(stream);
    loop {
        let result = read_message(&mut reader);
        let Some(conn) = weak.upgrade() else { return };
        match result {
            Ok(Some(m)) if m.msg_type == MsgType::Bye => {
                log::debug!("connection {}: peer said goodbye", conn.id);
                break conn.fail_all();
            }
            Ok(Some(m)) if m.msg_type.is_response() => conn.deliver(m),
            Ok(Some(m)) => {
                log::warn!(
                    "connection {}: unexpected {:?} on a client connection",
                    conn.id,
                    m.msg_type
                );
                break conn.fail_all();
            }
            Ok(None) => break conn.fail_all(),
            Err(e) => {
                log::debug!("connection {}: read failed: {e}", conn.id);
                break conn.fail_all();
            }
        }
    }
}
