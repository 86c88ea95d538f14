//! Explicit FEM simulation of the soft gripper grasping a rigid object.

mod episode;
mod material;
mod press;
mod sim;

pub use episode::{
    evaluate_success, run_episode, EpisodeTrace, FrameRecord, GraspOutcome, MotionScript, Phase,
};
pub use material::{lame, map_stiffness, MaterialMap, StableNeoHookean, StiffnessVector};
pub use press::{plate_press, PressParams, PressResult};
pub use sim::{Controls, Scene, SimParams, SimState, Simulator};
