//! Frozen backbone, low-rank adapters, temporal cores and their gradients.

mod adapter;
mod core;
mod network;
mod shared;

pub use self::adapter::{
    compose_delta, AdapterTape, Adapted, AdaptedModel, DeltaSource, LoraModel, LoraPair, MatLoraModel,
    MultiLoraModel, Predictor, SharedAdapters, SharedBasisAdapter, StaticAdapters,
};
pub use self::core::{
    CoreTape, CoreVariant, LinDynCore, MarkovCore, NonLinCore, TemporalCore, MARKOV_HIDDEN,
    MARKOV_MAX_STEPS, NONLIN_HIDDEN,
};
pub use self::network::{
    argmax_rows, backward, forward, softmax, softmax_cross_entropy, Backbone, Dense, ForwardCache,
    NetGrads,
};
pub use self::shared::{
    build_shared_bases, core_sequence_from_pairs, project_onto_bases, CoreTarget, Projection,
    SharedBases,
};

use crate::linalg::Matrix;

/// Uniform access to the trainable matrices of a parameter container.
///
/// A value of the same type with every entry zeroed serves as its gradient.
pub trait Params: Clone {
    fn params(&self) -> Vec<&Matrix>;
    fn params_mut(&mut self) -> Vec<&mut Matrix>;
    fn param_names(&self) -> Vec<String>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.params_mut().into_iter().for_each(|m| m.fill(0.0));
        z
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|m| m.as_slice().len()).sum()
    }

    /// `self += scale · other`, entry by entry.
    fn axpy(&mut self, scale: f64, other: &Self) {
        let src = other.params();
        for (dst, src) in self.params_mut().into_iter().zip(src) {
            dst.add_scaled(src, scale);
        }
    }

    fn all_finite(&self) -> bool {
        self.params().iter().all(|m| m.is_finite())
    }
}
