//! The service control manager: finds the server implementing a class and
//! hands back its class factory.
//!
//! In-process classes come from the built-in catalog (or a dynamic module),
//! local classes from a spawned server executable that connects back over the
//! wire protocol, and remote classes from a peer SCM reached over TCP.

mod catalog;
mod server;

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, Weak};
use std::time::{Duration, Instant, SystemTime};

pub use catalog::{BuiltinCatalog, ENTRY_SYMBOL};
pub use server::ScmServer;

use crate::error::{ComError, Result};
use crate::guid::Guid;
use crate::interfaces::{IID_ICLASSFACTORY, IID_IUNKNOWN};
use crate::object::{new_class_factory, InterfaceHandle, WeakHandle};
use crate::registry::{Registry, ServerRegistration, ServerType};
use crate::wire::proxy::factory_handle;
use crate::wire::{Activator, Connection, Payload};

/// Environment variable through which a spawned server learns its linger
/// timeout, in milliseconds.
pub const LINGER_ENV: &str = "MICROCOM_LINGER_MS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScmConfig {
    /// How long a spawned local server has to connect back and register.
    pub spawn_timeout: Duration,
    /// Connect timeout for remote peers.
    pub connect_timeout: Duration,
    /// How long a local server waits after its last reference goes away.
    pub linger: Duration,
}

impl Default for ScmConfig {
    fn default() -> Self {
        ScmConfig {
            spawn_timeout: Duration::from_secs(5),
            connect_timeout: Duration::from_secs(3),
            linger: Duration::from_secs(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    LocalClient,
    RemotePeer(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActivationRequest {
    pub clsid: Guid,
    pub iid: Guid,
    pub origin: Origin,
}

impl ActivationRequest {
    pub fn local(clsid: Guid, iid: Guid) -> Self {
        ActivationRequest {
            clsid,
            iid,
            origin: Origin::LocalClient,
        }
    }
}

/// Who serves a running class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ServerIdentity {
    InProcess,
    Process(u32),
    Connection(u64),
}

impl ServerIdentity {
    pub fn kind(self) -> ServerType {
        match self {
            ServerIdentity::InProcess => ServerType::InProcess,
            ServerIdentity::Process(_) => ServerType::Local,
            ServerIdentity::Connection(_) => ServerType::Remote,
        }
    }
}

/// Snapshot of one running-class entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunningClass {
    pub clsid: Guid,
    pub kind: ServerType,
    pub server: ServerIdentity,
    pub activations: u64,
}

struct RunningEntry {
    factory: WeakHandle,
    server: ServerIdentity,
    activations: u64,
}

/// Factories currently being served, at most one per CLSID. Entries do not
/// keep their factory alive; dead ones are dropped whenever the table is
/// consulted.
#[derive(Default)]
pub struct RunningClassTable {
    entries: Mutex<BTreeMap<Guid, RunningEntry>>,
}

impl RunningClassTable {
    /// Records a running factory. Fails if a live factory from another
    /// server is already registered for `clsid`.
    pub fn register(
        &self,
        clsid: Guid,
        factory: &InterfaceHandle,
        server: ServerIdentity,
    ) -> Result<()> {
        self.insert(clsid, factory, server, 0)
    }

    fn insert(
        &self,
        clsid: Guid,
        factory: &InterfaceHandle,
        server: ServerIdentity,
        activations: u64,
    ) -> Result<()> {
        let mut entries = self.entries.lock().unwrap();
        if let Some(e) = entries.get(&clsid) {
            if e.server != server && e.factory.is_alive() {
                return Err(ComError::DuplicateRegistration(clsid));
            }
        }
        entries.insert(
            clsid,
            RunningEntry {
                factory: factory.downgrade(),
                server,
                activations,
            },
        );
        Ok(())
    }

    /// A fresh reference on the running factory for `clsid`, if it is alive.
    fn reuse(&self, clsid: Guid) -> Option<InterfaceHandle> {
        let mut entries = self.entries.lock().unwrap();
        let entry = entries.get_mut(&clsid)?;
        match entry.factory.upgrade() {
            Some(h) => {
                entry.activations += 1;
                Some(h)
            }
            None => {
                entries.remove(&clsid);
                None
            }
        }
    }

    fn forget_server(&self, server: ServerIdentity) {
        self.entries
            .lock()
            .unwrap()
            .retain(|_, e| e.server != server);
    }

    pub fn snapshot(&self) -> Vec<RunningClass> {
        let mut entries = self.entries.lock().unwrap();
        entries.retain(|_, e| e.factory.is_alive());
        entries
            .iter()
            .map(|(&clsid, e)| RunningClass {
                clsid,
                kind: e.server.kind(),
                server: e.server,
                activations: e.activations,
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.snapshot().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Modification time, length and file id. Saves replace the file by rename,
/// so the id changes even when time and length do not.
type Stamp = Option<(SystemTime, u64, u64)>;

enum RegistrySource {
    File {
        path: PathBuf,
        stamp: Option<Stamp>,
        cached: Registry,
    },
    Fixed(Registry),
}

fn stamp(path: &Path) -> Stamp {
    let meta = std::fs::metadata(path).ok()?;
    #[cfg(unix)]
    let id = std::os::unix::fs::MetadataExt::ino(&meta);
    #[cfg(not(unix))]
    let id = 0;
    Some((meta.modified().ok()?, meta.len(), id))
}

impl RegistrySource {
    fn current(&mut self) -> Result<&Registry> {
        match self {
            RegistrySource::Fixed(r) => Ok(r),
            RegistrySource::File {
                path,
                stamp: seen,
                cached,
            } => {
                let now = stamp(path);
                if seen.as_ref() != Some(&now) {
                    *cached = Registry::load(&*path)?;
                    *seen = Some(now);
                    log::debug!(
                        "loaded registry {} ({} entries)",
                        path.display(),
                        cached.len()
                    );
                }
                Ok(cached)
            }
        }
    }
}

struct ChildServer {
    pid: u32,
    conn: Arc<Connection>,
}

struct Inner {
    registry: Mutex<RegistrySource>,
    catalog: BuiltinCatalog,
    config: ScmConfig,
    running: RunningClassTable,
    class_locks: Mutex<HashMap<Guid, Arc<Mutex<()>>>>,
    children: Mutex<HashMap<Guid, ChildServer>>,
    peers: Mutex<HashMap<String, Arc<Connection>>>,
    spawns: AtomicUsize,
}

/// A shared handle on one service control manager.
#[derive(Clone)]
pub struct Scm {
    inner: Arc<Inner>,
}

impl Scm {
    /// An SCM backed by the registry file at `path`, re-read whenever the
    /// file changes.
    pub fn new(path: impl Into<PathBuf>, config: ScmConfig) -> Scm {
        Scm::with_catalog(path, config, BuiltinCatalog::default())
    }

    pub fn with_catalog(
        path: impl Into<PathBuf>,
        config: ScmConfig,
        catalog: BuiltinCatalog,
    ) -> Scm {
        let path = path.into();
        Scm::build(
            RegistrySource::File {
                cached: Registry::empty(path.clone()),
                path,
                stamp: None,
            },
            config,
            catalog,
        )
    }

    /// An SCM over a fixed in-memory registry.
    pub fn from_registry(registry: Registry, config: ScmConfig) -> Scm {
        Scm::build(
            RegistrySource::Fixed(registry),
            config,
            BuiltinCatalog::default(),
        )
    }

    fn build(source: RegistrySource, config: ScmConfig, catalog: BuiltinCatalog) -> Scm {
        Scm {
            inner: Arc::new(Inner {
                registry: Mutex::new(source),
                catalog,
                config,
                running: RunningClassTable::default(),
                class_locks: Mutex::new(HashMap::new()),
                children: Mutex::new(HashMap::new()),
                peers: Mutex::new(HashMap::new()),
                spawns: AtomicUsize::new(0),
            }),
        }
    }

    pub fn config(&self) -> &ScmConfig {
        &self.inner.config
    }

    pub fn catalog(&self) -> &BuiltinCatalog {
        &self.inner.catalog
    }

    pub fn lookup(&self, clsid: Guid) -> Result<ServerRegistration> {
        let mut source = self.inner.registry.lock().unwrap();
        source.current()?.lookup_class(&clsid).cloned()
    }

    pub fn running_classes(&self) -> Vec<RunningClass> {
        self.inner.running.snapshot()
    }

    pub fn running_table(&self) -> &RunningClassTable {
        &self.inner.running
    }

    /// Announces a running factory, typically by a server at startup.
    pub fn register_running_factory(
        &self,
        clsid: Guid,
        factory: &InterfaceHandle,
        server: ServerIdentity,
    ) -> Result<()> {
        self.inner.running.register(clsid, factory, server)
    }

    /// Number of local server processes this SCM has started.
    pub fn spawn_count(&self) -> usize {
        self.inner.spawns.load(Ordering::SeqCst)
    }

    /// Process ids of local servers still connected to this SCM.
    pub fn child_pids(&self) -> Vec<u32> {
        self.inner
            .children
            .lock()
            .unwrap()
            .values()
            .filter(|c| !c.conn.is_closed())
            .map(|c| c.pid)
            .collect()
    }

    /// Produces a class factory for `req.clsid`, reusing a running one when
    /// possible. Activations of one CLSID are serialized.
    pub fn activate(&self, req: &ActivationRequest) -> Result<InterfaceHandle> {
        if req.iid != IID_ICLASSFACTORY && req.iid != IID_IUNKNOWN {
            return Err(ComError::NoInterface);
        }
        let reg = self.lookup(req.clsid)?;
        let lock = self
            .inner
            .class_locks
            .lock()
            .unwrap()
            .entry(req.clsid)
            .or_default()
            .clone();
        let _serialized = lock.lock().unwrap();
        let factory = match self.inner.running.reuse(req.clsid) {
            Some(f) => f,
            None => {
                let (f, server) = match reg.server_type {
                    ServerType::InProcess => self.activate_in_process(&reg)?,
                    ServerType::Local => self.activate_local(&reg)?,
                    ServerType::Remote => self.activate_remote(&reg)?,
                };
                self.inner.running.insert(req.clsid, &f, server, 1)?;
                f
            }
        };
        log::debug!("activated {} for {:?}", req.clsid, req.origin);
        if req.iid == factory.iid() {
            return Ok(factory);
        }
        let requested = factory.query_interface(req.iid);
        factory.release()?;
        requested
    }

    fn activate_in_process(
        &self,
        reg: &ServerRegistration,
    ) -> Result<(InterfaceHandle, ServerIdentity)> {
        let class = self.inner.catalog.resolve(&reg.location, reg.clsid)?;
        Ok((new_class_factory(class), ServerIdentity::InProcess))
    }

    fn activate_local(
        &self,
        reg: &ServerRegistration,
    ) -> Result<(InterfaceHandle, ServerIdentity)> {
        let config = self.inner.config;
        let existing = self
            .inner
            .children
            .lock()
            .unwrap()
            .get(&reg.clsid)
            .map(|c| (c.pid, c.conn.clone()));
        if let Some((pid, conn)) = existing {
            if !conn.is_closed() {
                match request_factory(&conn, reg.clsid, config.spawn_timeout) {
                    Ok(f) => return Ok((f, ServerIdentity::Process(pid))),
                    Err(e) => log::debug!("server {pid} did not reactivate {}: {e}", reg.clsid),
                }
            }
        }

        let path = Path::new(&reg.location);
        if !path.is_file() {
            return Err(ComError::ServerNotFound(format!(
                "{} does not exist",
                path.display()
            )));
        }
        let listener = TcpListener::bind("127.0.0.1:0")
            .map_err(|e| ComError::ServerNotFound(format!("control endpoint: {e}")))?;
        let control = listener.local_addr()?;
        let mut child = Command::new(path)
            .arg("--serve")
            .arg("--clsid")
            .arg(reg.clsid.to_string())
            .arg("--control")
            .arg(control.to_string())
            .env(LINGER_ENV, config.linger.as_millis().to_string())
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ComError::ServerNotFound(format!("{}: {e}", path.display())))?;
        self.inner.spawns.fetch_add(1, Ordering::SeqCst);
        let pid = child.id();
        log::info!("started {} as process {pid}", path.display());

        let deadline = Instant::now() + config.spawn_timeout;
        let handshake = accept_child(&listener, &mut child, deadline).and_then(|stream| {
            let conn = Connection::from_stream(stream)?;
            let left = deadline.saturating_duration_since(Instant::now());
            let factory = request_factory(&conn, reg.clsid, left.max(Duration::from_millis(1)))?;
            Ok((conn, factory))
        });
        let (conn, factory) = match handshake {
            Ok(r) => r,
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(e);
            }
        };

        if let Some(stdout) = child.stdout.take() {
            let _ = std::thread::Builder::new()
                .name(format!("microcom-child-{pid}-out"))
                .spawn(move || {
                    for line in BufReader::new(stdout).lines().map_while(|l| l.ok()) {
                        log::debug!("server {pid}: {line}");
                    }
                });
        }
        self.inner
            .children
            .lock()
            .unwrap()
            .insert(reg.clsid, ChildServer { pid, conn });
        let weak = Arc::downgrade(&self.inner);
        let _ = std::thread::Builder::new()
            .name(format!("microcom-child-{pid}-wait"))
            .spawn(move || reap(child, weak));
        Ok((factory, ServerIdentity::Process(pid)))
    }

    fn activate_remote(
        &self,
        reg: &ServerRegistration,
    ) -> Result<(InterfaceHandle, ServerIdentity)> {
        let config = self.inner.config;
        let request = Payload::ActivateReq {
            clsid: reg.effective_remote_clsid(),
            iid: IID_ICLASSFACTORY,
        };
        let timeout = config.spawn_timeout + config.connect_timeout;
        let mut retried = false;
        loop {
            let conn = self.peer(&reg.location)?;
            match conn.request(request.clone(), Some(timeout)) {
                Ok(Payload::ActivateResp {
                    status: 0,
                    object_id,
                }) => {
                    return Ok((
                        factory_handle(&conn, object_id),
                        ServerIdentity::Connection(conn.id()),
                    ))
                }
                Ok(Payload::ActivateResp { status, .. }) => {
                    return Err(ComError::RemoteFault(status))
                }
                Ok(other) => return Err(ComError::ProtocolError(format!("unexpected {other:?}"))),
                // A cached connection the peer has since dropped.
                Err(ComError::ConnectionLost) if !retried => {
                    retried = true;
                    let mut peers = self.inner.peers.lock().unwrap();
                    if peers
                        .get(&reg.location)
                        .is_some_and(|c| c.id() == conn.id())
                    {
                        peers.remove(&reg.location);
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn peer(&self, location: &str) -> Result<Arc<Connection>> {
        let mut peers = self.inner.peers.lock().unwrap();
        if let Some(c) = peers.get(location) {
            if !c.is_closed() {
                return Ok(c.clone());
            }
        }
        let conn = Connection::connect(location, self.inner.config.connect_timeout)?;
        peers.insert(location.to_string(), conn.clone());
        Ok(conn)
    }
}

impl Activator for Scm {
    fn activate(&self, clsid: Guid, iid: Guid, connection: u64) -> Result<InterfaceHandle> {
        Scm::activate(
            self,
            &ActivationRequest {
                clsid,
                iid,
                origin: Origin::RemotePeer(connection),
            },
        )
    }
}

fn accept_child(listener: &TcpListener, child: &mut Child, deadline: Instant) -> Result<TcpStream> {
    listener.set_nonblocking(true)?;
    loop {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                return Ok(stream);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {}
            Err(e) => return Err(e.into()),
        }
        if let Some(status) = child.try_wait()? {
            return Err(ComError::ServerNotFound(format!(
                "server exited before registering ({status})"
            )));
        }
        if Instant::now() >= deadline {
            return Err(ComError::ActivationTimeout);
        }
        std::thread::sleep(Duration::from_millis(10));
    }
}

/// Asks a server on `conn` for its class factory; the reply is the server's
/// factory registration.
fn request_factory(
    conn: &Arc<Connection>,
    clsid: Guid,
    timeout: Duration,
) -> Result<InterfaceHandle> {
    let reply = conn.request(
        Payload::ActivateReq {
            clsid,
            iid: IID_ICLASSFACTORY,
        },
        Some(timeout),
    )?;
    match reply {
        Payload::ActivateResp {
            status: 0,
            object_id,
        } => Ok(factory_handle(conn, object_id)),
        Payload::ActivateResp { status, .. } => Err(ComError::ServerNotFound(format!(
            "server refused activation of {clsid}: {}",
            ComError::from_status(status).code_name()
        ))),
        other => Err(ComError::ProtocolError(format!("unexpected {other:?}"))),
    }
}

fn reap(mut child: Child, scm: Weak<Inner>) {
    let pid = child.id();
    match child.wait() {
        Ok(status) => log::info!("server {pid} exited ({status})"),
        Err(e) => log::warn!("waiting for server {pid}: {e}"),
    }
    if let Some(inner) = scm.upgrade() {
        inner.children.lock().unwrap().retain(|_, c| c.pid != pid);
        inner.running.forget_server(ServerIdentity::Process(pid));
    }
}
