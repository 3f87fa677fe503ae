use std::time::Instant;

use serde::{Deserialize, Serialize};

/// Work done in one phase of inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCost {
    pub forward: u64,
    pub backward: u64,
    /// Text sequences pushed through the encoder.
    pub encoder_invocations: u64,
    pub wall_nanos: u64,
}

impl PhaseCost {
    /// Same counts, wall-clock cleared; used to compare runs.
    pub fn counts(&self) -> PhaseCost {
        PhaseCost { wall_nanos: 0, ..*self }
    }
}

/// Inference cost split into a one-off setup phase and the per-image phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostMeter {
    pub images: u64,
    pub setup: PhaseCost,
    pub inference: PhaseCost,
}

impl CostMeter {
    pub fn counts(&self) -> CostMeter {
        CostMeter {
            images: self.images,
            setup: self.setup.counts(),
            inference: self.inference.counts(),
        }
    }

    fn per_image(&self, v: u64) -> f64 {
        if self.images == 0 {
            0.0
        } else {
            v as f64 / self.images as f64
        }
    }

    pub fn backward_per_image(&self) -> f64 {
        self.per_image(self.inference.backward)
    }

    pub fn forward_per_image(&self) -> f64 {
        self.per_image(self.inference.forward)
    }

    /// Total wall-clock (setup included) per image, in nanoseconds.
    pub fn wall_nanos_per_image(&self) -> f64 {
        self.per_image(self.setup.wall_nanos + self.inference.wall_nanos)
    }
}

pub(crate) struct Stopwatch(Instant);

impl Stopwatch {
    pub(crate) fn start() -> Self {
        Self(Instant::now())
    }

    pub(crate) fn stop_into(self, phase: &mut PhaseCost) {
        phase.wall_nanos += self.0.elapsed().as_nanos() as u64;
    }
}
