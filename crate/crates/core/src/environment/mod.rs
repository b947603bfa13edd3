//! Video sources and the tracking decision process.

pub mod dataset;
mod mdp;
pub mod synthetic;
mod video;

pub use dataset::{load_dataset, write_dataset};
pub use mdp::{
    make_state, omega, reward, reward_from_iou, CropConfig, State, TrackingMdp, Transition,
    REWARD_IOU_THRESHOLD,
};
pub use synthetic::{generate_dataset, generate_synthetic_video, MotionModel, SyntheticSpec, Texture};
pub use video::Video;
