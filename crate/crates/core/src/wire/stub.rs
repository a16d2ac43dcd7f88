//! Server side of a wire connection: the per-connection stub table and the
//! request loop that dispatches into it.

use std::collections::{BTreeMap, HashMap};
use std::io::BufReader;
use std::net::{Shutdown, TcpStream};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use crate::error::{ComError, Result};
use crate::guid::Guid;
use crate::interfaces::IID_ICLASSFACTORY;
use crate::object::InterfaceHandle;
use crate::wire::connection::next_connection_id;
use crate::wire::frame::{read_message, write_message, MsgType, Payload, WireMessage};
use crate::wire::proxy::encode_created;
use crate::wire::value::WireValue;

/// Produces class factories for `ACTIVATE_REQ` frames.
pub trait Activator: Send + Sync {
    fn activate(&self, clsid: Guid, iid: Guid, connection: u64) -> Result<InterfaceHandle>;
}

struct StubEntry {
    handle: InterfaceHandle,
    count: u32,
}

struct StubInner {
    next_id: u64,
    entries: BTreeMap<u64, StubEntry>,
    by_key: HashMap<(u64, Guid), u64>,
    empty_since: Option<Instant>,
}

/// Snapshot of one stub table row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StubInfo {
    pub object_id: u64,
    pub iid: Guid,
    pub identity: u64,
    pub count: u32,
}

/// References one connection holds on local (or further proxied) objects,
/// keyed by the object ids handed to the peer. Ids are never reused.
pub struct StubTable {
    connection: u64,
    inner: Mutex<StubInner>,
}

impl StubTable {
    pub fn new(connection: u64) -> Arc<StubTable> {
        Arc::new(StubTable {
            connection,
            inner: Mutex::new(StubInner {
                next_id: 1,
                entries: BTreeMap::new(),
                by_key: HashMap::new(),
                empty_since: Some(Instant::now()),
            }),
        })
    }

    pub fn connection(&self) -> u64 {
        self.connection
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// When the table last became empty, if it is empty now.
    pub fn empty_since(&self) -> Option<Instant> {
        self.inner.lock().unwrap().empty_since
    }

    pub fn entries(&self) -> Vec<StubInfo> {
        self.inner
            .lock()
            .unwrap()
            .entries
            .iter()
            .map(|(&object_id, e)| StubInfo {
                object_id,
                iid: e.handle.iid(),
                identity: e.handle.identity_token(),
                count: e.count,
            })
            .collect()
    }

    /// Sum of per-connection counts over every entry.
    pub fn total_count(&self) -> u64 {
        self.inner
            .lock()
            .unwrap()
            .entries
            .values()
            .map(|e| e.count as u64)
            .sum()
    }

    /// Takes ownership of every reference carried by `handle` and returns
    /// the object id naming it on this connection. A handle on an interface
    /// already in the table is merged into the existing row.
    pub fn register(&self, handle: InterfaceHandle) -> u64 {
        let key = (handle.identity_token(), handle.iid());
        let refs = handle.issued_refs();
        let mut inner = self.inner.lock().unwrap();
        if let Some(&id) = inner.by_key.get(&key) {
            let entry = inner.entries.get_mut(&id).unwrap();
            if entry.handle.absorb(handle.clone()).is_ok() {
                entry.count += refs;
                return id;
            }
        }
        let id = inner.next_id;
        inner.next_id += 1;
        inner.by_key.insert(key, id);
        inner.entries.insert(
            id,
            StubEntry {
                handle,
                count: refs,
            },
        );
        inner.empty_since = None;
        id
    }

    fn handle(&self, object_id: u64) -> Result<InterfaceHandle> {
        self.inner
            .lock()
            .unwrap()
            .entries
            .get(&object_id)
            .map(|e| e.handle.clone())
            .ok_or(ComError::UnknownObject(object_id))
    }

    fn add_ref(&self, object_id: u64) -> Result<u32> {
        let handle = self.handle(object_id)?;
        let count = handle.add_ref()?;
        if let Some(e) = self.inner.lock().unwrap().entries.get_mut(&object_id) {
            e.count += 1;
        }
        Ok(count)
    }

    fn release(&self, object_id: u64) -> Result<u32> {
        let handle = {
            let mut inner = self.inner.lock().unwrap();
            let entry = inner
                .entries
                .get_mut(&object_id)
                .ok_or(ComError::UnknownObject(object_id))?;
            entry.count -= 1;
            let handle = entry.handle.clone();
            if entry.count == 0 {
                inner.entries.remove(&object_id);
                inner.by_key.retain(|_, id| *id != object_id);
                if inner.entries.is_empty() {
                    inner.empty_since = Some(Instant::now());
                }
            }
            handle
        };
        handle.release()
    }

    /// Executes one request and builds its response payload.
    pub fn dispatch(&self, request: Payload) -> Payload {
        match request {
            Payload::QueryReq { object_id, iid } => {
                let result = self
                    .handle(object_id)
                    .and_then(|h| h.query_interface(iid))
                    .map(|h| self.register(h));
                match result {
                    Ok(object_id) => Payload::QueryResp {
                        status: 0,
                        object_id,
                    },
                    Err(e) => Payload::QueryResp {
                        status: e.status(),
                        object_id: 0,
                    },
                }
            }
            Payload::AddRef { object_id } => count_response(self.add_ref(object_id)),
            Payload::Release { object_id } => count_response(self.release(object_id)),
            Payload::CallReq {
                object_id,
                iid,
                ordinal,
                args,
            } => {
                let result = self.call(object_id, iid, ordinal, args);
                match result {
                    Ok(value) => Payload::CallResp { status: 0, value },
                    Err(e) => Payload::CallResp {
                        status: e.status(),
                        value: WireValue::Null,
                    },
                }
            }
            other => Payload::CallResp {
                status: ComError::ProtocolError(String::new()).status(),
                value: WireValue::Str(format!("{:?} is not a stub request", other.msg_type())),
            },
        }
    }

    fn call(
        &self,
        object_id: u64,
        iid: Guid,
        ordinal: u16,
        args: Vec<WireValue>,
    ) -> Result<WireValue> {
        let handle = self.handle(object_id)?;
        if handle.iid() != iid {
            return Err(ComError::NoInterface);
        }
        if iid == IID_ICLASSFACTORY && ordinal == 0 {
            if args.len() != 1 {
                return Err(ComError::BadArity {
                    expected: 1,
                    got: args.len(),
                });
            }
            let requested = args[0]
                .as_guid()
                .ok_or_else(|| ComError::ComponentError("create_instance takes a guid".into()))?;
            let instance = handle.create_instance(requested)?;
            let identity = instance.identity_token();
            let id = self.register(instance);
            return Ok(encode_created(id, identity));
        }
        handle.call(ordinal, args)
    }

    /// Releases every reference this connection holds and empties the
    /// table. Returns how many references were released; a second call
    /// releases nothing.
    pub fn rundown(&self) -> u64 {
        let entries = {
            let mut inner = self.inner.lock().unwrap();
            inner.by_key.clear();
            if !inner.entries.is_empty() {
                inner.empty_since = Some(Instant::now());
            }
            std::mem::take(&mut inner.entries)
        };
        let mut released = 0;
        for (id, entry) in entries {
            for _ in 0..entry.count {
                if let Err(e) = entry.handle.release() {
                    log::debug!(
                        "rundown of object {id} on connection {}: {e}",
                        self.connection
                    );
                    break;
                }
                released += 1;
            }
        }
        released
    }
}

fn count_response(result: Result<u32>) -> Payload {
    match result {
        Ok(count) => Payload::CountResp { status: 0, count },
        Err(e) => Payload::CountResp {
            status: e.status(),
            count: 0,
        },
    }
}

/// The serving end of one connection.
pub struct StubServer {
    id: u64,
    stream: TcpStream,
    writer: Mutex<TcpStream>,
    stubs: Arc<StubTable>,
}

impl StubServer {
    pub fn new(stream: TcpStream) -> Result<Arc<StubServer>> {
        stream.set_nodelay(true)?;
        let writer = stream.try_clone()?;
        let id = next_connection_id();
        Ok(Arc::new(StubServer {
            id,
            stream,
            writer: Mutex::new(writer),
            stubs: StubTable::new(id),
        }))
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn stubs(&self) -> &Arc<StubTable> {
        &self.stubs
    }

    /// Sends BYE and closes the stream; the request loop then winds down.
    pub fn shutdown(&self) {
        let mut w = self.writer.lock().unwrap();
        let _ = write_message(&mut *w, &WireMessage::bye());
        let _ = w.shutdown(Shutdown::Both);
    }

    /// Serves requests in arrival order until the peer leaves, says BYE or
    /// sends something malformed, then runs the connection down.
    pub fn run(&self, activator: &dyn Activator) -> Result<()> {
        let result = self.serve(activator);
        let released = self.stubs.rundown();
        if released > 0 {
            log::info!(
                "connection {}: rundown released {released} reference(s)",
                self.id
            );
        }
        let _ = self.stream.shutdown(Shutdown::Both);
        result
    }

    fn serve(&self, activator: &dyn Activator) -> Result<()> {
        let mut reader = BufReader::new(self.stream.try_clone()?);
        loop {
            let message = match read_message(&mut reader) {
                Ok(Some(m)) => m,
                Ok(None) => return Ok(()),
                Err(ComError::IoFailure(_)) => return Ok(()),
                Err(e) => {
                    log::warn!("connection {}: {e}", self.id);
                    return Err(e);
                }
            };
            if message.msg_type == MsgType::Bye {
                return Ok(());
            }
            let request = Payload::parse(&message).inspect_err(|e| {
                log::warn!("connection {}: {e}", self.id);
            })?;
            let response = match request {
                Payload::ActivateReq { clsid, iid } => {
                    match activator.activate(clsid, iid, self.id) {
                        Ok(factory) => Payload::ActivateResp {
                            status: 0,
                            object_id: self.stubs.register(factory),
                        },
                        Err(e) => {
                            log::info!("activation of {clsid} failed: {e}");
                            Payload::ActivateResp {
                                status: e.status(),
                                object_id: 0,
                            }
                        }
                    }
                }
                req @ (Payload::QueryReq { .. }
                | Payload::AddRef { .. }
                | Payload::Release { .. }
                | Payload::CallReq { .. }) => self.stubs.dispatch(req),
                other => {
                    let e = ComError::ProtocolError(format!(
                        "unexpected {:?} from client",
                        other.msg_type()
                    ));
                    log::warn!("connection {}: {e}", self.id);
                    return Err(e);
                }
            };
            let reply = match response.into_message(message.correlation_id) {
                Ok(m) => m,
                // A result too large or too deep to encode.
                Err(e) => Payload::CallResp {
                    status: e.status(),
                    value: WireValue::Null,
                }
                .into_message(message.correlation_id)?,
            };
            if write_message(&mut *self.writer.lock().unwrap(), &reply).is_err() {
                return Ok(());
            }
        }
    }
}
