//! Scalar abstraction shared by the numeric parts of the crate.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar used for probabilities, scores and statistics.
pub trait Real: Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static {
    /// Lossy conversion from `f64`; every `Real` can represent at least an approximation.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl<T> Real for T where T: Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static {}
