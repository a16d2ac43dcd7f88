use crate::guid::Guid;

pub type Result<T, E = ComError> = std::result::Result<T, E>;

/// Every failure the runtime can report.
///
/// Errors that cross the wire are reduced to a numeric status (see
/// [`ComError::status`]) and rebuilt on the other side with
/// [`ComError::from_status`], so codes survive a proxy round trip even when
/// the detail text does not.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ComError {
    #[error("interface not supported")]
    NoInterface,
    #[error("class {0} is not registered")]
    ClassNotRegistered(Guid),
    #[error("server not found: {0}")]
    ServerNotFound(String),
    #[error("object is not initialized")]
    NotInitialized,
    #[error("object is already initialized")]
    AlreadyInitialized,
    #[error("unknown remote object id {0}")]
    UnknownObject(u64),
    #[error("no method with ordinal {0}")]
    NoSuchMethod(u16),
    #[error("expected {expected} argument(s), got {got}")]
    BadArity { expected: usize, got: usize },
    #[error("reference count would exceed 2^32-1")]
    CountOverflow,
    #[error("remote fault (status {0})")]
    RemoteFault(u32),
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("library version {available} is older than required {required}")]
    VersionTooOld { required: u32, available: u32 },
    #[error("alarm {0} not found")]
    AlarmNotFound(i64),
    #[error("timer already running")]
    TimerAlreadyRunning,
    #[error("timer not running")]
    TimerNotRunning,
    #[error("component error: {0}")]
    ComponentError(String),
    #[error("factory failure: {0}")]
    FactoryFailure(String),
    #[error("activation timed out")]
    ActivationTimeout,
    #[error("handle already released")]
    HandleDead,
    #[error("connection lost")]
    ConnectionLost,
    #[error("class {0} already has a running factory from another server")]
    DuplicateRegistration(Guid),
    #[error("malformed guid: {0:?}")]
    MalformedGuid(String),
    #[error("randomness source unavailable")]
    RandomnessUnavailable,
    #[error("registry corrupt at line {line}: {reason}")]
    RegistryCorrupt { line: usize, reason: String },
    #[error("invalid registration: {0}")]
    InvalidRegistration(String),
    #[error("i/o failure: {0}")]
    IoFailure(String),
    #[error("cannot bind: {0}")]
    BindFailure(String),
}

impl ComError {
    /// Numeric status used on the wire. 0 is reserved for success.
    pub fn status(&self) -> u32 {
        match self {
            ComError::NoInterface => 1,
            ComError::ClassNotRegistered(_) => 2,
            ComError::ServerNotFound(_) => 3,
            ComError::NotInitialized => 4,
            ComError::AlreadyInitialized => 5,
            ComError::UnknownObject(_) => 6,
            ComError::NoSuchMethod(_) => 7,
            ComError::BadArity { .. } => 8,
            ComError::CountOverflow => 9,
            ComError::RemoteFault(_) => 10,
            ComError::ProtocolError(_) => 11,
            ComError::VersionTooOld { .. } => 12,
            ComError::AlarmNotFound(_) => 13,
            ComError::TimerAlreadyRunning => 14,
            ComError::TimerNotRunning => 15,
            ComError::ComponentError(_) => 16,
            ComError::FactoryFailure(_) => 17,
            ComError::ActivationTimeout => 18,
            ComError::HandleDead => 19,
            ComError::ConnectionLost => 20,
            ComError::DuplicateRegistration(_) => 21,
            ComError::MalformedGuid(_) => 22,
            ComError::RandomnessUnavailable => 23,
            ComError::RegistryCorrupt { .. } => 24,
            ComError::InvalidRegistration(_) => 25,
            ComError::IoFailure(_) => 26,
            ComError::BindFailure(_) => 27,
        }
    }

    /// Short stable name of the error kind, used in CLI output.
    pub fn code_name(&self) -> &'static str {
        match self {
            ComError::NoInterface => "NoInterface",
            ComError::ClassNotRegistered(_) => "ClassNotRegistered",
            ComError::ServerNotFound(_) => "ServerNotFound",
            ComError::NotInitialized => "NotInitialized",
            ComError::AlreadyInitialized => "AlreadyInitialized",
            ComError::UnknownObject(_) => "UnknownObject",
            ComError::NoSuchMethod(_) => "NoSuchMethod",
            ComError::BadArity { .. } => "BadArity",
            ComError::CountOverflow => "CountOverflow",
            ComError::RemoteFault(_) => "RemoteFault",
            ComError::ProtocolError(_) => "ProtocolError",
            ComError::VersionTooOld { .. } => "VersionTooOld",
            ComError::AlarmNotFound(_) => "AlarmNotFound",
            ComError::TimerAlreadyRunning => "TimerAlreadyRunning",
            ComError::TimerNotRunning => "TimerNotRunning",
            ComError::ComponentError(_) => "ComponentError",
            ComError::FactoryFailure(_) => "FactoryFailure",
            ComError::ActivationTimeout => "ActivationTimeout",
            ComError::HandleDead => "HandleDead",
            ComError::ConnectionLost => "ConnectionLost",
            ComError::DuplicateRegistration(_) => "DuplicateRegistration",
            ComError::MalformedGuid(_) => "MalformedGuid",
            ComError::RandomnessUnavailable => "RandomnessUnavailable",
            ComError::RegistryCorrupt { .. } => "RegistryCorrupt",
            ComError::InvalidRegistration(_) => "InvalidRegistration",
            ComError::IoFailure(_) => "IoFailure",
            ComError::BindFailure(_) => "BindFailure",
        }
    }

    /// Rebuild an error from a wire status. Detail payloads that are not
    /// carried on the wire come back empty or zeroed; statuses this runtime
    /// does not know become [`ComError::RemoteFault`].
    pub fn from_status(status: u32) -> ComError {
        match status {
            1 => ComError::NoInterface,
            2 => ComError::ClassNotRegistered(Guid::NIL),
            3 => ComError::ServerNotFound(String::from("remote")),
            4 => ComError::NotInitialized,
            5 => ComError::AlreadyInitialized,
            6 => ComError::UnknownObject(0),
            7 => ComError::NoSuchMethod(0),
            8 => ComError::BadArity {
                expected: 0,
                got: 0,
            },
            9 => ComError::CountOverflow,
            11 => ComError::ProtocolError(String::from("reported by peer")),
            12 => ComError::VersionTooOld {
                required: 0,
                available: 0,
            },
            13 => ComError::AlarmNotFound(0),
            14 => ComError::TimerAlreadyRunning,
            15 => ComError::TimerNotRunning,
            16 => ComError::ComponentError(String::from("reported by peer")),
            17 => ComError::FactoryFailure(String::from("reported by peer")),
            18 => ComError::ActivationTimeout,
            19 => ComError::HandleDead,
            20 => ComError::ConnectionLost,
            21 => ComError::DuplicateRegistration(Guid::NIL),
            other => ComError::RemoteFault(other),
        }
    }
}

impl From<std::io::Error> for ComError {
    fn from(e: std::io::Error) -> Self {
        ComError::IoFailure(e.to_string())
    }
}
