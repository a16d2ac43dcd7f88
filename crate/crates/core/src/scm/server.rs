//! The listening side of an SCM: accepts peers and serves each on its own
//! thread.

use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crate::error::{ComError, Result};
use crate::wire::{StubInfo, StubServer};

use super::Scm;

struct Shared {
    scm: Scm,
    connections: Mutex<BTreeMap<u64, Arc<StubServer>>>,
    stopping: AtomicBool,
}

/// A running SCM endpoint. Dropping it stops accepting and closes every
/// connection, running each one down.
pub struct ScmServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl Scm {
    /// Binds `endpoint` and starts serving activation and object traffic.
    pub fn serve(&self, endpoint: &str) -> Result<ScmServer> {
        let listener = TcpListener::bind(endpoint)
            .map_err(|e| ComError::BindFailure(format!("{endpoint}: {e}")))?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            scm: self.clone(),
            connections: Mutex::new(BTreeMap::new()),
            stopping: AtomicBool::new(false),
        });
        let accept = {
            let shared = shared.clone();
            std::thread::Builder::new()
                .name(format!("microcom-scm-{}", addr.port()))
                .spawn(move || accept_loop(listener, shared))?
        };
        log::info!("serving on {addr}");
        Ok(ScmServer {
            addr,
            shared,
            accept: Some(accept),
        })
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.stopping.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let server = match StubServer::new(stream) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("dropping connection: {e}");
                continue;
            }
        };
        shared
            .connections
            .lock()
            .unwrap()
            .insert(server.id(), server.clone());
        let shared = shared.clone();
        let spawned = std::thread::Builder::new()
            .name(format!("microcom-peer-{}", server.id()))
            .spawn(move || {
                if let Err(e) = server.run(&shared.scm) {
                    log::warn!("connection {} closed: {e}", server.id());
                }
                shared.connections.lock().unwrap().remove(&server.id());
            });
        if let Err(e) = spawned {
            log::error!("cannot serve connection: {e}");
        }
    }
}

impl ScmServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn port(&self) -> u16 {
        self.addr.port()
    }

    pub fn scm(&self) -> &Scm {
        &self.shared.scm
    }

    /// Connections currently being served.
    pub fn connections(&self) -> Vec<Arc<StubServer>> {
        self.shared
            .connections
            .lock()
            .unwrap()
            .values()
            .cloned()
            .collect()
    }

    /// Stub table contents per open connection.
    pub fn stub_entries(&self) -> Vec<(u64, Vec<StubInfo>)> {
        self.connections()
            .iter()
            .map(|c| (c.id(), c.stubs().entries()))
            .collect()
    }

    /// Sum of stub counts over every open connection.
    pub fn total_stub_count(&self) -> u64 {
        self.connections()
            .iter()
            .map(|c| c.stubs().total_count())
            .sum()
    }

    pub fn shutdown(&self) {
        if self.shared.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        let mut wake = self.addr;
        if wake.ip().is_unspecified() {
            wake.set_ip(std::net::Ipv4Addr::LOCALHOST.into());
        }
        let _ = TcpStream::connect(wake);
        for c in self.connections() {
            c.shutdown();
        }
    }

    /// Blocks until the server stops accepting.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ScmServer {
    fn drop(&mut self) {
        self.shutdown();
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}
