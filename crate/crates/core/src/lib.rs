//! A small component-object runtime.
//!
//! Classes and interfaces are named by 128-bit [`Guid`]s. Clients obtain a
//! class factory through the service control manager ([`scm::Scm`]), create
//! objects from it, initialize them, talk to them through reference-counted
//! [`InterfaceHandle`]s and release them when done. Servers may live in the
//! client's process, in a spawned local process, or behind a peer SCM on
//! another machine; the client-visible contract is the same for all three.

pub mod activation;
pub mod cli;
pub mod components;
pub mod error;
pub mod guid;
pub mod interfaces;
pub mod local_server;
pub mod object;
pub mod registry;
pub mod scm;
pub mod wire;

pub use activation::{
    factory_create_instance, initialize_object, library_init, Library, LibraryContext,
    LIBRARY_VERSION,
};
pub use error::{ComError, Result};
pub use guid::{Guid, GuidGenerator};
pub use object::{ClassInfo, Component, DestructionWatch, InterfaceHandle, Route, WeakHandle};
pub use registry::{Registry, ServerRegistration, ServerType};
pub use scm::{ActivationRequest, Origin, RunningClassTable, Scm, ScmConfig, ScmServer};
pub use wire::WireValue;
