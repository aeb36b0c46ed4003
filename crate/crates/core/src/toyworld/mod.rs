//! Procedurally generated toy driving world: analytic SDF scenes, simulated
//! LiDAR and cameras, template captions, and the dataset container.

pub mod caption;
pub mod dataset;
pub mod geom;
pub mod scene;
pub mod sensors;

pub use caption::{caption, PROMPT};
pub use dataset::{
    make_dataset, read_dataset, supervision_rays, write_dataset, Dataset, DatasetError,
    DatasetManifest, FrameRays, FrameSample,
};
pub use geom::{Pose2, Vec3};
pub use scene::{generate_scene, raycast, BoxClass, HitClass, SceneBox, SceneError, SceneGraph};
pub use sensors::{
    cloud_from_returns, render_views, simulate_lidar, CameraSpec, LidarReturn, LidarSpec,
    IMG_CHANNELS, N_VIEWS,
};
