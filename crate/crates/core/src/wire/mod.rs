//! The binary wire protocol and the proxy/stub machinery built on it.
//!
//! All remote interaction is request/response over a reliable stream.
//! Clients hold [`Connection`]s and reach remote objects through proxies;
//! servers run a [`StubServer`] per accepted stream, whose [`StubTable`]
//! holds the references the peer owns and releases them on rundown.

pub mod connection;
pub mod frame;
pub mod proxy;
pub mod stub;
pub mod value;

pub use connection::Connection;
pub use frame::{read_message, write_message, MsgType, Payload, WireMessage};
pub use stub::{Activator, StubInfo, StubServer, StubTable};
pub use value::{parse_value, parse_value_list, WireValue};

/// Default port of a remote SCM.
pub const DEFAULT_PORT: u16 = 7700;
