//! Fixtures shared by the criterion benches.

use ctuq_core::prior::Architecture;
use ctuq_core::{Image, PriorModel};

/// Smooth digit-like test target on the 28x28 grid.
pub fn phantom() -> Image {
    Image::from_fn(28, 28, |r, c| {
        let (y, x) = (r as f64 - 14.0, c as f64 - 13.5);
        let d = ((x / 6.0).powi(2) + (y / 9.0).powi(2)).sqrt();
        if (0.7..1.0).contains(&d) {
            1.0
        } else {
            0.0
        }
    })
}

/// Untrained prior with the default architecture.
pub fn random_prior() -> PriorModel {
    PriorModel::random(Architecture::default(), 7).expect("default architecture is valid")
}
