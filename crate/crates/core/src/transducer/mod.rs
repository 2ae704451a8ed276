//! Single-talker transducer: unlearned features, encoder (offline or
//! chunk-masked streaming), prediction and joint networks, the posterior
//! lattice and the transducer loss.

mod features;
mod lattice;
mod loss;
mod mask;
mod model;

pub use features::{extract_features, FeatureConfig, FeatureSequence};
pub use lattice::PosteriorLattice;
pub use loss::{forward_backward, rnnt_loss, ForwardBackward};
pub use mask::{build_chunk_mask, chunk_window};
pub use model::{
    encode, joint_lattice, predict, subsample, AsrModel, EncodedSequence, EncoderCache, EncoderNet, JointNet,
    PredictorNet, StreamingConfig, TransducerCache, TransducerConfig, TransducerModel, TransducerNet, TRANSDUCER_KIND,
};
