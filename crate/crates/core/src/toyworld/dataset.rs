//! Dataset assembly and the on-disk container format.
//!
//! File layout: magic "HWM1", u32-length-prefixed JSON manifest, then one
//! block per scene. Float blocks are little-endian f32 with a u32 element
//! count; strings are u32-length-prefixed UTF-8. Blocks appear in declared
//! order: images, point clouds (one per frame), ego motions, prompt, answer.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::WorldConfig;

use super::caption::caption;
use super::geom::Vec3;
use super::scene::{generate_scene, SceneError};
use super::sensors::{cloud_from_returns, render_views, simulate_lidar, CameraSpec, LidarSpec};

const MAGIC: &[u8; 4] = b"HWM1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes; not a dataset file")]
    BadMagic,
    #[error("unsupported dataset format version {0}")]
    Version(u32),
    #[error("truncated dataset file")]
    Truncated,
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// One scene's training sample. All float payloads are f32: that is what the
/// file stores, and the pipeline converts to its scalar type on use.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    /// Multi-view features at frame 0: [view][u][v][channel].
    pub images: Vec<f32>,
    /// Ground-truth clouds for frames 0..=delta_t, each in its own ego frame.
    pub clouds: Vec<Vec<[f32; 3]>>,
    /// (dx, dy, dyaw) of each future frame relative to frame 0.
    pub ego_motion: Vec<[f32; 3]>,
    pub prompt: String,
    pub answer: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub scene_count: usize,
    pub seeds: Vec<u64>,
    pub world: WorldConfig,
    pub delta_t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<FrameSample>,
}

/// Per-scene seeds derive from the master seed by fixed offsets, so datasets
/// built from different master seeds use disjoint scene seeds.
pub fn scene_seed(master: u64, index: usize) -> u64 {
    master.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(index as u64)
}

/// Generate `count` scenes and assemble their samples.
pub fn make_dataset(
    master_seed: u64,
    count: usize,
    world: &WorldConfig,
    delta_t: usize,
) -> Result<Dataset, DatasetError> {
    let lidar = LidarSpec::from_world(world);
    let cams = CameraSpec::from_world(world);
    let seeds: Vec<u64> = (0..count).map(|i| scene_seed(master_seed, i)).collect();
    let mut samples = Vec::with_capacity(count);
    for &seed in &seeds {
        let scene = generate_scene(seed, world, delta_t)?;
        let images = render_views(&scene, 0, &cams, scene.ego[0]);
        let mut clouds = Vec::with_capacity(delta_t + 1);
        for frame in 0..=delta_t {
            let returns = simulate_lidar(&scene, frame, &lidar, scene.ego[frame]);
            let cloud = cloud_from_returns(&returns, &lidar)
                .into_iter()
                .map(|p| [p[0] as f32, p[1] as f32, p[2] as f32])
                .collect();
            clouds.push(cloud);
        }
        let ego_motion = (1..=delta_t)
            .map(|f| {
                let (dx, dy, dyaw) = scene.ego_motion(f);
                [dx as f32, dy as f32, dyaw as f32]
            })
            .collect();
        let (prompt, answer) = caption(&scene, 0, world.near_threshold);
        samples.push(FrameSample { images, clouds, ego_motion, prompt, answer });
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            version: FORMAT_VERSION,
            scene_count: count,
            seeds,
            world: world.clone(),
            delta_t,
        },
        samples,
    })
}

/// Ground-truth supervision for one frame, expressed in frame-0 coordinates.
#[derive(Debug, Clone)]
pub struct FrameRays {
    /// Ray origins in frame-0 ego coordinates.
    pub origins: Vec<[f64; 3]>,
    pub dirs: Vec<[f64; 3]>,
    pub depths: Vec<f64>,
    /// Bin ids (azimuth * rows + elevation) of the returning rays.
    pub bins: Vec<usize>,
}

impl FrameRays {
    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }
}

/// Reconstruct the returning rays of `frame` from its stored point cloud.
///
/// Points are stored in the frame's own ego coordinates; the LiDAR grid is
/// fixed, so each point maps back to a unique (azimuth, elevation) bin. The
/// result is expressed in frame-0 coordinates via the ego-motion triple.
pub fn supervision_rays(sample: &FrameSample, lidar: &LidarSpec, frame: usize) -> FrameRays {
    let cloud = &sample.clouds[frame];
    let (dx, dy, dyaw) = if frame == 0 {
        (0.0, 0.0, 0.0)
    } else {
        let m = sample.ego_motion[frame - 1];
        (m[0] as f64, m[1] as f64, m[2] as f64)
    };
    let mount = Vec3::new(0.0, 0.0, lidar.mount_height);
    let mut rays = FrameRays {
        origins: Vec::with_capacity(cloud.len()),
        dirs: Vec::with_capacity(cloud.len()),
        depths: Vec::with_capacity(cloud.len()),
        bins: Vec::with_capacity(cloud.len()),
    };
    for p in cloud {
        let v = Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64).sub(mount);
        let depth = v.norm();
        if depth <= 0.0 {
            continue;
        }
        let dir_own = v.scale(1.0 / depth);
        let (a, e) = lidar.bin_of(dir_own);
        let origin0 = mount.rot_z(dyaw).add(Vec3::new(dx, dy, 0.0));
        let dir0 = dir_own.rot_z(dyaw);
        rays.origins.push([origin0.x, origin0.y, origin0.z]);
        rays.dirs.push([dir0.x, dir0.y, dir0.z]);
        rays.depths.push(depth);
        rays.bins.push(a * lidar.elevation_rows + e);
    }
    rays
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

fn write_f32_block(w: &mut impl Write, data: &[f32]) -> io::Result<()> {
    w.write_all(&(data.len() as u32).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_string(w: &mut impl Write, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32(r: &mut impl Read) -> Result<u32, DatasetError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| DatasetError::Truncated)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32_block(r: &mut impl Read) -> Result<Vec<f32>, DatasetError> {
    let n = read_u32(r)? as usize;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(|_| DatasetError::Truncated)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_string(r: &mut impl Read) -> Result<String, DatasetError> {
    let n = read_u32(r)? as usize;
    let mut bytes = vec![0u8; n];
    r.read_exact(&mut bytes).map_err(|_| DatasetError::Truncated)?;
    String::from_utf8(bytes).map_err(|_| DatasetError::Truncated)
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let manifest = serde_json::to_vec(&ds.manifest)?;
    w.write_all(&(manifest.len() as u32).to_le_bytes())?;
    w.write_all(&manifest)?;
    for s in &ds.samples {
        write_f32_block(&mut w, &s.images)?;
        for cloud in &s.clouds {
            let flat: Vec<f32> = cloud.iter().flatten().copied().collect();
            write_f32_block(&mut w, &flat)?;
        }
        let ego: Vec<f32> = s.ego_motion.iter().flatten().copied().collect();
        write_f32_block(&mut w, &ego)?;
        write_string(&mut w, &s.prompt)?;
        write_string(&mut w, &s.answer)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| DatasetError::Truncated)?;
    if &magic != MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let mlen = read_u32(&mut r)? as usize;
    let mut mbytes = vec![0u8; mlen];
    r.read_exact(&mut mbytes).map_err(|_| DatasetError::Truncated)?;
    let manifest: DatasetManifest = serde_json::from_slice(&mbytes)?;
    if manifest.version != FORMAT_VERSION {
        return Err(DatasetError::Version(manifest.version));
    }
    let mut samples = Vec::with_capacity(manifest.scene_count);
    for _ in 0..manifest.scene_count {
        let images = read_f32_block(&mut r)?;
        let mut clouds = Vec::with_capacity(manifest.delta_t + 1);
        for _ in 0..=manifest.delta_t {
            let flat = read_f32_block(&mut r)?;
            if flat.len() % 3 != 0 {
                return Err(DatasetError::Truncated);
            }
            clouds.push(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect());
        }
        let ego_flat = read_f32_block(&mut r)?;
        if ego_flat.len() != 3 * manifest.delta_t {
            return Err(DatasetError::Truncated);
        }
        let ego_motion = ego_flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let prompt = read_string(&mut r)?;
        let answer = read_string(&mut r)?;
        samples.push(FrameSample { images, clouds, ego_motion, prompt, answer });
    }
    Ok(Dataset { manifest, samples })
}
