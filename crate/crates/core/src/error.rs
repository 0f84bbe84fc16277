use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("window of {window} slices exceeds volume of {slices} slices")]
    Window { window: usize, slices: usize },
    #[error("crop {crop}x{crop} does not fit in a {height}x{width} slice")]
    Geometry {
        crop: usize,
        height: usize,
        width: usize,
    },
    #[error("invalid augmentation policy: {0}")]
    Policy(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("activation cache does not belong to the current model parameters")]
    StaleCache,
    #[error("backward requires a forward pass in train mode")]
    EvalCache,
    #[error("optimizer refused step: {0}")]
    Optimizer(String),
    #[error("volume has no slices")]
    EmptyVolume,
    #[error("AUC is undefined without both positive and negative labels")]
    UndefinedAuc,
    #[error("class weights need both classes present")]
    DegenerateWeights,
    #[error("labels must be 0 or 1, got {0}")]
    Label(u8),
}

pub type Result<T> = core::result::Result<T, Error>;
