//! Procedural turntable scenes: primitive soups, orbit rendering, and edits.
//!
//! Object space is the cube |x|,|y|,|z| <= 1 with +z up. The camera sits on
//! the +y axis looking at the origin; +x maps to image right and +z to image
//! up. View i shows the scene rotated by (360/N)*i degrees about the vertical
//! axis, so the ring of views walks once around the object.

mod edit;
mod random;
mod raster;

pub use edit::{apply_edit, EditSpec, PaletteMap};
pub use random::{
    sample_back_insert_edit, sample_random_scene, sample_visible_back_insert_edit, Difficulty,
};
pub use raster::{render_orbit, render_view, render_view_periodic};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    /// Camera-facing filled circle. Its silhouette ignores rotation, which
    /// makes centered disks axisymmetric on the turntable.
    Disk,
    /// A cube of half-extent `size`, rotated with the scene.
    Box,
    /// An upright equilateral triangle of circumradius `size`, lying in a
    /// vertical plane. Seen edge-on it vanishes.
    Triangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub center: [f64; 3],
    pub size: f64,
    /// Rotation of the primitive's own geometry about the vertical axis,
    /// in degrees. Disks ignore it.
    #[serde(default)]
    pub yaw_deg: f64,
    pub color: [f64; 3],
    pub tag: String,
}

impl Primitive {
    pub fn validate(&self) -> Result<()> {
        if !(self.size > 0.0) {
            return Err(Error::Scene(format!(
                "primitive '{}' has non-positive size {}",
                self.tag, self.size
            )));
        }
        for c in self.center {
            if !c.is_finite() || c.abs() > 1.0 {
                return Err(Error::Scene(format!(
                    "primitive '{}' center {:?} leaves the unit cube",
                    self.tag, self.center
                )));
            }
        }
        for c in self.color {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Scene(format!(
                    "primitive '{}' color {:?} outside [0, 1]",
                    self.tag, self.color
                )));
            }
        }
        if !self.yaw_deg.is_finite() {
            return Err(Error::Scene(format!("primitive '{}' has a non-finite yaw", self.tag)));
        }
        if self.tag.is_empty() {
            return Err(Error::Scene("primitive tag must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::Scene("scene has no primitives".into()));
        }
        let mut tags = std::collections::BTreeSet::new();
        for p in &self.primitives {
            p.validate()?;
            if !tags.insert(p.tag.as_str()) {
                return Err(Error::Scene(format!("duplicate primitive tag '{}'", p.tag)));
            }
        }
        for c in self.background {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Scene(format!(
                    "background color {:?} outside [0, 1]",
                    self.background
                )));
            }
        }
        Ok(())
    }

    pub fn primitive(&self, tag: &str) -> Option<&Primitive> {
        self.primitives.iter().find(|p| p.tag == tag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitParams {
    pub n_views: usize,
    pub resolution: usize,
    pub channels: usize,
    /// Linear supersampling factor for antialiasing; each output pixel
    /// averages supersample^2 samples.
    #[serde(default = "default_supersample")]
    pub supersample: usize,
}

fn default_supersample() -> usize {
    2
}

impl Default for OrbitParams {
    fn default() -> Self {
        OrbitParams { n_views: 8, resolution: 32, channels: 3, supersample: 2 }
    }
}

impl OrbitParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_views < 4 {
            return Err(Error::Config(format!(
                "orbit needs at least 4 views, got {}",
                self.n_views
            )));
        }
        if self.resolution < 4 {
            return Err(Error::Config(format!(
                "orbit resolution must be at least 4, got {}",
                self.resolution
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!(
                "orbit channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.supersample == 0 {
            return Err(Error::Config("supersample factor must be positive".into()));
        }
        Ok(())
    }

    pub fn view_angle_deg(&self, view: usize) -> f64 {
        360.0 * view as f64 / self.n_views as f64
    }
}

/// Rotates a point in the horizontal plane by `deg` degrees.
pub(crate) fn rotate_xy(x: f64, y: f64, deg: f64) -> (f64, f64) {
    let rad = deg.to_radians();
    let (s, c) = rad.sin_cos();
    (x * c - y * s, x * s + y * c)
}

/// Returns the scene with every primitive rotated by `deg` degrees about the
/// vertical axis: centers move along the turntable, yaws advance in step.
pub fn rotate_scene(scene: &SceneSpec, deg: f64) -> SceneSpec {
    let mut out = scene.clone();
    for p in &mut out.primitives {
        let (x, y) = rotate_xy(p.center[0], p.center[1], deg);
        p.center[0] = x;
        p.center[1] = y;
        p.yaw_deg += deg;
    }
    out
}
