//! Planar racetrack world: geometry, vehicle model, LiDAR and the episode loop.

pub mod bundled;
pub mod episode;
pub mod geometry;
pub mod lidar;
pub mod track;
pub mod vehicle;

pub use episode::{
    run_episode, CollisionMode, ConstantSteer, EpisodeConfig, EpisodeLog, Observation, Outcome, Policy,
    PreviousStep, StepRecord,
};
pub use geometry::{wrap_angle, Segment, Vec2};
pub use lidar::{beam_angles, check_collision, raycast_scan, Scan, HALF_FOV};
pub use track::{track_from_centerline, Pose, TrackMap};
pub use vehicle::{step_dynamics, ControlCommand, VehicleParams, VehicleState, MAX_STEER};
pub use bundled::{bundled_names, bundled_track, resolve_track, TRAINING_TRACKS, UNSEEN_TRACK};
