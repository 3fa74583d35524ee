use thiserror::Error;

/// Errors raised by the simulator, the geometry builders and the controller.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("precondition violated: {0}")]
    PreconditionViolated(String),

    #[error("step rejected: state left the simplex by {excess:.3e} (reduce the step)")]
    StepRejected { excess: f64 },

    #[error("horizon exceeded: stop condition not reached by t = {max_time}")]
    HorizonExceeded { max_time: f64 },

    #[error("incomplete trajectory: tail cost cannot be certified zero")]
    IncompleteTrajectory,

    #[error("infeasible start: y0 = {y0} exceeds the threshold {ybar}")]
    InfeasibleStart { y0: f64, ybar: f64 },

    #[error("invalid control: {0}")]
    InvalidControl(String),

    #[error("calibration failed: {0}")]
    CalibrationFailed(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
