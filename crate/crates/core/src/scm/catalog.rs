//! Resolution of in-process server locations to component classes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::components::SAMPLE_CLASSES;
use crate::error::{ComError, Result};
use crate::guid::Guid;
use crate::object::ClassInfo;
use crate::registry::BUILTIN_PREFIX;

/// Name of the symbol a dynamic component module must export. Its signature
/// is `extern "C" fn(clsid: *const [u8; 16]) -> *const ClassInfo`, returning
/// null for classes the module does not implement.
pub const ENTRY_SYMBOL: &str = "microcom_get_class_factory";

/// Components compiled into this binary, addressed as `builtin:<name>`.
#[derive(Debug, Clone)]
pub struct BuiltinCatalog {
    entries: BTreeMap<&'static str, &'static ClassInfo>,
}

impl Default for BuiltinCatalog {
    fn default() -> Self {
        BuiltinCatalog {
            entries: SAMPLE_CLASSES.iter().copied().collect(),
        }
    }
}

impl BuiltinCatalog {
    pub fn empty() -> Self {
        BuiltinCatalog {
            entries: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: &'static str, class: &'static ClassInfo) -> Self {
        self.entries.insert(name, class);
        self
    }

    pub fn get(&self, name: &str) -> Option<&'static ClassInfo> {
        self.entries.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }

    /// Resolves an in-process location: a `builtin:` name or a module path.
    pub fn resolve(&self, location: &str, clsid: Guid) -> Result<&'static ClassInfo> {
        match location.strip_prefix(BUILTIN_PREFIX) {
            Some(name) => self
                .get(name)
                .ok_or_else(|| ComError::ServerNotFound(format!("no builtin component {name:?}"))),
            None => load_module(Path::new(location), clsid),
        }
    }
}

#[cfg(feature = "dynamic-modules")]
fn load_module(path: &Path, clsid: Guid) -> Result<&'static ClassInfo> {
    type EntryPoint = unsafe extern "C" fn(*const [u8; 16]) -> *const ClassInfo;
    if !path.exists() {
        return Err(ComError::ServerNotFound(format!(
            "{} does not exist",
            path.display()
        )));
    }
    // SAFETY: loading runs the module's initializers; registering a module
    // path is an explicit statement of trust in it.
    let library = unsafe { libloading::Library::new(path) }
        .map_err(|e| ComError::ServerNotFound(format!("{}: {e}", path.display())))?;
    // Modules stay loaded for the life of the process: the classes they hand
    // out are 'static.
    let library: &'static libloading::Library = Box::leak(Box::new(library));
    let class = unsafe {
        let entry: libloading::Symbol<EntryPoint> = library
            .get(ENTRY_SYMBOL.as_bytes())
            .map_err(|e| ComError::ServerNotFound(format!("{}: {e}", path.display())))?;
        entry(clsid.as_bytes())
    };
    // SAFETY: the entry point contract returns null or a pointer to a
    // ClassInfo that lives as long as the module.
    unsafe { class.as_ref() }.ok_or_else(|| {
        ComError::ServerNotFound(format!("{} does not implement {clsid}", path.display()))
    })
}

#[cfg(not(feature = "dynamic-modules"))]
fn load_module(path: &Path, _clsid: Guid) -> Result<&'static ClassInfo> {
    if !path.exists() {
        return Err(ComError::ServerNotFound(format!(
            "{} does not exist",
            path.display()
        )));
    }
    Err(ComError::ServerNotFound(format!(
        "{}: dynamic component modules are not enabled in this build",
        path.display()
    )))
}
