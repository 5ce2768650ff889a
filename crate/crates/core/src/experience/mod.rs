//! Off-policy experience storage: a ring replay buffer for actor-critic
//! training and a persistent store of whole learning trajectories used as
//! opponent-model training data.

mod replay;
mod trajectory;

pub use replay::{Batch, BufferError, OmSnapshot, ReplayBuffer, Transition};
pub use trajectory::{
    export_jsonl, store_read, store_write, Event, StoreError, TrajectoryMeta, TrajectoryRecord,
    TrajectoryStore,
};
