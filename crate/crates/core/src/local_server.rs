//! Runtime for a local server executable started by an SCM.
//!
//! The server connects back to the control endpoint it was given, answers the
//! SCM's activation with its class factory and then serves object traffic on
//! that connection. It leaves once the SCM disconnects, or once nothing has
//! been referenced through the connection for the linger timeout.

use std::io::Write;
use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Once};
use std::time::{Duration, Instant};

use crate::components::class_by_clsid;
use crate::error::{ComError, Result};
use crate::guid::Guid;
use crate::interfaces::{IID_ICLASSFACTORY, IID_IUNKNOWN};
use crate::object::{new_class_factory, ClassInfo, InterfaceHandle};
use crate::scm::{ScmConfig, LINGER_ENV};
use crate::wire::{Activator, StubServer};

/// Give up on an SCM that never activates us.
const STARTUP_GRACE: Duration = Duration::from_secs(10);

#[derive(Debug, Clone)]
pub struct LocalServerOptions {
    pub clsid: Guid,
    pub control: String,
    pub linger: Duration,
}

/// Linger timeout from the environment, else the default.
pub fn linger_from_env() -> Duration {
    std::env::var(LINGER_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .map(Duration::from_millis)
        .unwrap_or(ScmConfig::default().linger)
}

struct ServedClass {
    class: &'static ClassInfo,
    ready: Once,
    activated: AtomicBool,
}

impl Activator for ServedClass {
    fn activate(&self, clsid: Guid, iid: Guid, _connection: u64) -> Result<InterfaceHandle> {
        if clsid != self.class.clsid {
            return Err(ComError::ClassNotRegistered(clsid));
        }
        let factory = new_class_factory(self.class);
        let factory = match iid {
            IID_ICLASSFACTORY => factory,
            IID_IUNKNOWN => {
                let unknown = factory.query_interface(iid);
                factory.release()?;
                unknown?
            }
            _ => {
                factory.release()?;
                return Err(ComError::NoInterface);
            }
        };
        self.activated.store(true, Ordering::SeqCst);
        self.ready.call_once(|| {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "READY");
            let _ = out.flush();
        });
        Ok(factory)
    }
}

/// Serves `options.clsid` to the SCM at `options.control` until told to stop.
pub fn run_local_server(options: &LocalServerOptions) -> Result<()> {
    let class =
        class_by_clsid(&options.clsid).ok_or(ComError::ClassNotRegistered(options.clsid))?;
    let stream = TcpStream::connect(&options.control)
        .map_err(|e| ComError::ServerNotFound(format!("{}: {e}", options.control)))?;
    let server = StubServer::new(stream)?;
    let served = Arc::new(ServedClass {
        class,
        ready: Once::new(),
        activated: AtomicBool::new(false),
    });
    let done = Arc::new(AtomicBool::new(false));

    let watcher = {
        let (server, served, done) = (server.clone(), served.clone(), done.clone());
        let linger = options.linger;
        let tick = (linger / 4).clamp(Duration::from_millis(5), Duration::from_millis(50));
        let started = Instant::now();
        std::thread::spawn(move || {
            while !done.load(Ordering::SeqCst) {
                std::thread::sleep(tick);
                let armed =
                    served.activated.load(Ordering::SeqCst) || started.elapsed() > STARTUP_GRACE;
                let idle = server
                    .stubs()
                    .empty_since()
                    .is_some_and(|t| t.elapsed() >= linger);
                if armed && idle {
                    log::info!("no outstanding references for {linger:?}; exiting");
                    server.shutdown();
                    break;
                }
            }
        })
    };

    let result = server.run(&*served);
    done.store(true, Ordering::SeqCst);
    let _ = watcher.join();
    result
}
