use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    Length { shape: Vec<usize>, expected: usize, actual: usize },
    #[error("{op}: axis {axis} is out of range for shape {shape:?}")]
    Axis { op: &'static str, axis: usize, shape: Vec<usize> },
    #[error("{op}: axis {axis} of shape {shape:?} is empty")]
    EmptyAxis { op: &'static str, axis: usize, shape: Vec<usize> },
    #[error("{op}: index {index} out of bounds for extent {extent}")]
    Index { op: &'static str, index: usize, extent: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward was already run on this graph; record a new one")]
    AlreadyBackpropagated,
    #[error("tensor is frozen and cannot accumulate gradient")]
    Frozen,
    #[error("{0}")]
    Invalid(String),
}
