use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the platform can report. The `code()` string is the stable
/// identifier used in HTTP error envelopes and mapped to FFI status codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("permission denied: {0}")]
    PermissionDenied(String),
    #[error("{kind} not found: {id}")]
    NotFound { kind: &'static str, id: String },
    #[error("username already taken: {0}")]
    DuplicateUsername(String),
    #[error("invalid floor plan dimensions: {0}")]
    InvalidDimensions(String),
    #[error("cell ({col},{row}) is outside the plan bounds")]
    OutOfBounds { col: i64, row: i64 },
    #[error("coordinate ({x},{y}) is outside the plan bounds")]
    CoordinateOutOfBounds { x: f64, y: f64 },
    #[error("member already holds an open seat on this plan: {0}")]
    SeatConflict(String),
    #[error("member has no open seat assignment")]
    NoSeat,
    #[error("device id already registered: {0}")]
    DuplicateDeviceId(String),
    #[error("active devices must declare at least one field")]
    EmptyFieldSchema,
    #[error("invalid field spec: {0}")]
    InvalidFieldSpec(String),
    #[error("malformed batch: {0}")]
    MalformedBatch(String),
    #[error("invalid time range: {0}")]
    InvalidRange(String),
    #[error("unknown aggregate: {0}")]
    UnknownAggregate(String),
    #[error("series is empty or too short")]
    EmptySeries,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("assignment already exists for this member, template and open time")]
    DuplicateAssignment,
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("unknown anonymous id")]
    UnknownId,
    #[error("survey window closed: {0}")]
    WindowClosed(String),
    #[error("assignment already completed")]
    AlreadyCompleted,
    #[error("no field of this device declares an expected interval")]
    NoExpectedInterval,
    #[error("points carry no integer counter field")]
    NoCounterField,
    #[error("at least two points are required")]
    TooFewPoints,
    #[error("insufficient history: {0}")]
    InsufficientHistory(String),
    #[error("field spec has no valid range")]
    NoRangeSpec,
    #[error("fewer than three devices report this field on the plan")]
    TooFewNeighbors,
    #[error("dashboard already exists for {0}")]
    AlreadyExists(String),
    #[error("module disabled: {0}")]
    ModuleDisabled(&'static str),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot bind {0}")]
    Bind(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("target unreachable: {0}")]
    TargetUnreachable(String),
    #[error("ingest rejected: {0}")]
    IngestRejected(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn not_found(kind: &'static str, id: impl Into<String>) -> Self {
        Error::NotFound { kind, id: id.into() }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Error::PermissionDenied(_) => "PermissionDenied",
            Error::NotFound { .. } => "NotFound",
            Error::DuplicateUsername(_) => "DuplicateUsername",
            Error::InvalidDimensions(_) => "InvalidDimensions",
            Error::OutOfBounds { .. } | Error::CoordinateOutOfBounds { .. } => "OutOfBounds",
            Error::SeatConflict(_) => "SeatConflict",
            Error::NoSeat => "NoSeat",
            Error::DuplicateDeviceId(_) => "DuplicateDeviceId",
            Error::EmptyFieldSchema => "EmptyFieldSchema",
            Error::InvalidFieldSpec(_) => "InvalidFieldSpec",
            Error::MalformedBatch(_) => "MalformedBatch",
            Error::InvalidRange(_) => "InvalidRange",
            Error::UnknownAggregate(_) => "UnknownAggregate",
            Error::EmptySeries => "EmptySeries",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::DuplicateAssignment => "DuplicateAssignment",
            Error::InvalidWindow(_) => "InvalidWindow",
            Error::UnknownId => "UnknownId",
            Error::WindowClosed(_) => "WindowClosed",
            Error::AlreadyCompleted => "AlreadyCompleted",
            Error::NoExpectedInterval => "NoExpectedInterval",
            Error::NoCounterField => "NoCounterField",
            Error::TooFewPoints => "TooFewPoints",
            Error::InsufficientHistory(_) => "InsufficientHistory",
            Error::NoRangeSpec => "NoRangeSpec",
            Error::TooFewNeighbors => "TooFewNeighbors",
            Error::AlreadyExists(_) => "AlreadyExists",
            Error::ModuleDisabled(_) => "ModuleDisabled",
            Error::Config(_) => "ConfigError",
            Error::Bind(_) => "BindError",
            Error::InvalidScenario(_) => "InvalidScenario",
            Error::TargetUnreachable(_) => "TargetUnreachable",
            Error::IngestRejected(_) => "IngestRejected",
            Error::Io(_) => "IoError",
            Error::Serde(_) => "SerializationError",
        }
    }
}
