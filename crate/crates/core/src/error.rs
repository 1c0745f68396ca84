use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: expected {expected} channels, found {found}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid layer: {0}")]
    InvalidLayer(String),

    #[error("batch norm channel {channel} has non-positive std {value}")]
    NonPositiveStd { channel: usize, value: f64 },

    #[error("statistics pooling needs at least one frame")]
    EmptyFrames,

    #[error("layer {layer}, node {node}: {source}")]
    AtNode {
        layer: usize,
        node: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(
        "model is flagged as training-mode; only inference-mode parameters can be re-parameterized"
    )]
    TrainingMode,

    #[error("bad magic: expected \"CSRP\", found {0:02x?}")]
    BadMagic([u8; 4]),

    #[error("unsupported container version {0} (expected 1)")]
    VersionMismatch(u32),

    #[error("truncated payload: needed {needed} bytes, found {found}")]
    TruncatedPayload { needed: usize, found: usize },

    #[error("topology/payload length mismatch: {0}")]
    PayloadMismatch(String),

    #[error("malformed topology document: {0}")]
    Topology(String),

    #[error("element type mismatch: file holds {found}, requested {requested}")]
    DtypeMismatch {
        found: &'static str,
        requested: &'static str,
    },

    #[error("config parse error at line {line}, column {column}: {message}")]
    ConfigParse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("score file line {line}: {message}")]
    ScoreParse { line: usize, message: String },

    #[error("scores must contain at least one target and one non-target trial")]
    SingleClass,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_node(self, layer: usize, node: usize) -> Self {
        Error::AtNode {
            layer,
            node,
            source: Box::new(self),
        }
    }
}
