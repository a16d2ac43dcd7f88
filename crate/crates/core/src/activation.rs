//! The client library: version gate, class-object acquisition and instance
//! creation.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};

use crate::error::{ComError, Result};
use crate::guid::Guid;
use crate::interfaces::{IID_ICLASSFACTORY, IID_IUNKNOWN};
use crate::object::InterfaceHandle;
use crate::scm::{ActivationRequest, Scm, ScmConfig};
use crate::wire::WireValue;

pub const LIBRARY_VERSION: u32 = 1;

pub const REGISTRY_ENV: &str = "MICROCOM_REGISTRY";
pub const DEFAULT_REGISTRY: &str = "./microcom.reg";

/// Registry path from `MICROCOM_REGISTRY`, else `./microcom.reg`.
pub fn default_registry_path() -> PathBuf {
    std::env::var_os(REGISTRY_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_REGISTRY))
}

struct Shared {
    version: u32,
    scm: Scm,
    initialized: AtomicBool,
}

/// One instance of the runtime library, bound to an SCM.
pub struct Library {
    shared: Arc<Shared>,
}

impl Library {
    pub fn new(scm: Scm) -> Library {
        Library {
            shared: Arc::new(Shared {
                version: LIBRARY_VERSION,
                scm,
                initialized: AtomicBool::new(false),
            }),
        }
    }

    pub fn version(&self) -> u32 {
        self.shared.version
    }

    /// Initializes the library for callers needing at least
    /// `required_version` (0 accepts any). Repeated calls return a context
    /// on the same library.
    pub fn init(&self, required_version: u32) -> Result<LibraryContext> {
        if required_version > self.shared.version {
            return Err(ComError::VersionTooOld {
                required: required_version,
                available: self.shared.version,
            });
        }
        self.shared.initialized.store(true, Ordering::SeqCst);
        Ok(LibraryContext {
            shared: self.shared.clone(),
        })
    }
}

/// The process-wide library, using the default registry path.
pub fn library_init(required_version: u32) -> Result<LibraryContext> {
    static DEFAULT: OnceLock<Library> = OnceLock::new();
    DEFAULT
        .get_or_init(|| Library::new(Scm::new(default_registry_path(), ScmConfig::default())))
        .init(required_version)
}

#[derive(Clone)]
pub struct LibraryContext {
    shared: Arc<Shared>,
}

impl LibraryContext {
    pub fn library_version(&self) -> u32 {
        self.shared.version
    }

    pub fn is_initialized(&self) -> bool {
        self.shared.initialized.load(Ordering::SeqCst)
    }

    pub fn scm(&self) -> &Scm {
        &self.shared.scm
    }

    pub fn same_library(&self, other: &LibraryContext) -> bool {
        Arc::ptr_eq(&self.shared, &other.shared)
    }

    /// Later activation calls fail with `NotInitialized`. Handles already
    /// given to clients stay valid. A second call does nothing.
    pub fn shutdown(&self) {
        self.shared.initialized.store(false, Ordering::SeqCst);
    }

    fn ensure_initialized(&self) -> Result<()> {
        if self.is_initialized() {
            Ok(())
        } else {
            Err(ComError::NotInitialized)
        }
    }

    /// The class factory for `clsid`, located by the SCM.
    pub fn get_class_object(&self, clsid: Guid, iid: Guid) -> Result<InterfaceHandle> {
        self.ensure_initialized()?;
        if iid != IID_ICLASSFACTORY && iid != IID_IUNKNOWN {
            return Err(ComError::NoInterface);
        }
        self.shared
            .scm
            .activate(&ActivationRequest::local(clsid, iid))
    }

    /// One new, uninitialized object of `clsid` exposing `iid`.
    pub fn create_instance(&self, clsid: Guid, iid: Guid) -> Result<InterfaceHandle> {
        let factory = self.get_class_object(clsid, IID_ICLASSFACTORY)?;
        let instance = factory_create_instance(&factory, iid);
        let released = factory.release();
        let instance = instance?;
        if let Err(e) = released {
            let _ = instance.release();
            return Err(e);
        }
        Ok(instance)
    }
}

/// Asks `factory` for a new, uninitialized object exposing `iid`.
pub fn factory_create_instance(factory: &InterfaceHandle, iid: Guid) -> Result<InterfaceHandle> {
    factory.create_instance(iid)
}

/// Runs the object's one-time initialization with `args`.
pub fn initialize_object(h: &InterfaceHandle, args: Vec<WireValue>) -> Result<()> {
    h.initialize(args)
}
