fn shape(s: &(usize, usize)) -> String {
    format!("{}x{}", s.0, s.1)
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {} and {}", shape(.lhs), shape(.rhs))]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    Length { rows: usize, cols: usize, len: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
