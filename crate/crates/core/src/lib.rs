//! LeMOL laboratory: MADDPG agents, learning-process opponent models, a
//! Keep-Away particle game, and the experiment harness that ties them
//! together.

pub mod checkpoint;
pub mod env;
pub mod experience;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;
