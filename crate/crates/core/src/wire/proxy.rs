//! Client-side forwarders for objects living behind a connection.

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use crate::error::{ComError, Result};
use crate::guid::Guid;
use crate::interfaces::IID_ICLASSFACTORY;
use crate::object::{InterfaceHandle, Target};
use crate::wire::connection::{Connection, RemoteIdentity};
use crate::wire::frame::Payload;
use crate::wire::value::WireValue;

/// One remote interface as seen through one connection. `held` counts the
/// references this process holds on it, which always equals the peer's
/// per-connection stub count for `remote_id`.
pub struct ProxyObject {
    conn: Arc<Connection>,
    remote_id: u64,
    identity: u64,
    held: AtomicU32,
}

fn check(status: u32) -> Result<()> {
    match status {
        0 => Ok(()),
        s => Err(ComError::from_status(s)),
    }
}

impl ProxyObject {
    /// Records one freshly issued reference on `remote_id`, reusing the proxy
    /// already bound to it when there is one.
    pub(crate) fn attach(
        conn: &Arc<Connection>,
        remote_id: u64,
        identity: u64,
    ) -> Arc<ProxyObject> {
        let mut proxies = conn.proxies.lock().unwrap();
        if let Some(existing) = proxies.get(&remote_id).and_then(|w| w.upgrade()) {
            if existing.held.fetch_add(1, Ordering::AcqRel) > 0 {
                return existing;
            }
            // Fully released earlier; the peer never reuses ids, so this is a
            // stale binding. Undo and rebind.
            existing.held.fetch_sub(1, Ordering::AcqRel);
        }
        proxies.retain(|_, w| w.strong_count() > 0);
        let proxy = Arc::new(ProxyObject {
            conn: conn.clone(),
            remote_id,
            identity,
            held: AtomicU32::new(1),
        });
        proxies.insert(remote_id, Arc::downgrade(&proxy));
        proxy
    }

    /// Binds the factory returned by an activation on `conn`.
    pub(crate) fn attach_factory(conn: &Arc<Connection>, remote_id: u64) -> Arc<ProxyObject> {
        let identity = conn.identity_for(RemoteIdentity::Factory(remote_id));
        ProxyObject::attach(conn, remote_id, identity)
    }

    pub fn remote_id(&self) -> u64 {
        self.remote_id
    }

    pub fn connection_id(&self) -> u64 {
        self.conn.id()
    }

    pub fn identity(&self) -> u64 {
        self.identity
    }

    pub(crate) fn is_held(&self) -> bool {
        self.held.load(Ordering::Acquire) > 0 && !self.conn.is_closed()
    }

    fn count_request(&self, payload: Payload) -> Result<u32> {
        match self.conn.request(payload, None)? {
            Payload::CountResp { status, count } => check(status).map(|_| count),
            other => Err(ComError::ProtocolError(format!("unexpected {other:?}"))),
        }
    }

    pub(crate) fn add_ref(&self) -> Result<u32> {
        let count = self.count_request(Payload::AddRef {
            object_id: self.remote_id,
        })?;
        self.held.fetch_add(1, Ordering::AcqRel);
        Ok(count)
    }

    /// Takes a reference only while this process still holds one.
    pub(crate) fn try_retain(&self) -> Result<u32> {
        self.held
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |h| {
                (h > 0).then_some(h + 1)
            })
            .map_err(|_| ComError::HandleDead)?;
        let result = self.count_request(Payload::AddRef {
            object_id: self.remote_id,
        });
        if result.is_err() {
            self.held.fetch_sub(1, Ordering::AcqRel);
        }
        result
    }

    pub(crate) fn release(&self) -> Result<u32> {
        let _ = self
            .held
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |h| h.checked_sub(1));
        self.count_request(Payload::Release {
            object_id: self.remote_id,
        })
    }

    pub(crate) fn query_interface(&self, iid: Guid) -> Result<Arc<ProxyObject>> {
        let reply = self.conn.request(
            Payload::QueryReq {
                object_id: self.remote_id,
                iid,
            },
            None,
        )?;
        match reply {
            Payload::QueryResp { status, object_id } => {
                check(status)?;
                Ok(ProxyObject::attach(&self.conn, object_id, self.identity))
            }
            other => Err(ComError::ProtocolError(format!("unexpected {other:?}"))),
        }
    }

    pub(crate) fn call(&self, iid: Guid, ordinal: u16, args: Vec<WireValue>) -> Result<WireValue> {
        let reply = self.conn.request(
            Payload::CallReq {
                object_id: self.remote_id,
                iid,
                ordinal,
                args,
            },
            None,
        )?;
        match reply {
            Payload::CallResp { status, value } => check(status).map(|_| value),
            other => Err(ComError::ProtocolError(format!("unexpected {other:?}"))),
        }
    }

    pub(crate) fn create_instance(&self, iid: Guid) -> Result<Arc<ProxyObject>> {
        let value = self.call(IID_ICLASSFACTORY, 0, vec![WireValue::Guid(iid)])?;
        let (object_id, token) = decode_created(&value)?;
        let identity = self.conn.identity_for(RemoteIdentity::Token(token));
        Ok(ProxyObject::attach(&self.conn, object_id, identity))
    }
}

/// A counted `IClassFactory` handle on the factory an activation returned.
pub(crate) fn factory_handle(conn: &Arc<Connection>, remote_id: u64) -> InterfaceHandle {
    InterfaceHandle::from_target(
        IID_ICLASSFACTORY,
        Target::Proxy(ProxyObject::attach_factory(conn, remote_id)),
    )
}

/// A new instance crosses the wire as `list:[i64 object_id, i64 identity]`.
pub(crate) fn encode_created(object_id: u64, identity: u64) -> WireValue {
    WireValue::List(vec![
        WireValue::I64(object_id as i64),
        WireValue::I64(identity as i64),
    ])
}

fn decode_created(v: &WireValue) -> Result<(u64, u64)> {
    match v {
        WireValue::List(items) if items.len() == 2 => {
            match (items[0].as_i64(), items[1].as_i64()) {
                (Some(id), Some(token)) => Ok((id as u64, token as u64)),
                _ => Err(ComError::ProtocolError(
                    "malformed instance reference".into(),
                )),
            }
        }
        _ => Err(ComError::ProtocolError(
            "malformed instance reference".into(),
        )),
    }
}
