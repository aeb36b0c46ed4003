//! Small planar-pose and vector helpers (f64; ground truth is precision-fixed).

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn scale(self, s: f64) -> Self {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn add(self, o: Vec3) -> Self {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Vec3) -> Self {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        assert!(n > 0.0, "cannot normalize a zero vector");
        self.scale(1.0 / n)
    }

    /// Rotate about +z by `yaw`.
    pub fn rot_z(self, yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Vec3::new(c * self.x - s * self.y, s * self.x + c * self.y, self.z)
    }
}

/// Planar pose (x, y, yaw); z is always the ground plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2 {
    pub fn identity() -> Self {
        Pose2 { x: 0.0, y: 0.0, yaw: 0.0 }
    }

    pub fn to_world(self, p: Vec3) -> Vec3 {
        p.rot_z(self.yaw).add(Vec3::new(self.x, self.y, 0.0))
    }

    pub fn to_local(self, p: Vec3) -> Vec3 {
        p.sub(Vec3::new(self.x, self.y, 0.0)).rot_z(-self.yaw)
    }

    /// Pose of `other` expressed in this frame: the ego-motion triple.
    pub fn relative(self, other: Pose2) -> (f64, f64, f64) {
        let p = self.to_local(Vec3::new(other.x, other.y, 0.0));
        (p.x, p.y, other.yaw - self.yaw)
    }
}
