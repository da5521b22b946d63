//! An ordered ring of rendered or generated views.

use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::{Array3, Array4, ArrayView3, ArrayViewD, Axis};

use crate::error::{Error, Result};
use crate::util;

/// N frames of an orbit, stored as (view, row, col, channel) with values
/// in [0, 1]. Frame i sits at azimuth (360/N)*i degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSequence {
    frames: Array4<f64>,
}

impl ViewSequence {
    pub fn new(frames: Array4<f64>) -> Result<ViewSequence> {
        let (n, h, w, c) = frames.dim();
        if n == 0 || h == 0 || h != w || (c != 1 && c != 3) {
            return Err(Error::Shape {
                expected: "(n_views, r, r, 1|3) with square frames".into(),
                got: format!("({n}, {h}, {w}, {c})"),
            });
        }
        Ok(ViewSequence { frames })
    }

    pub fn n_views(&self) -> usize {
        self.frames.dim().0
    }

    pub fn resolution(&self) -> usize {
        self.frames.dim().1
    }

    pub fn channels(&self) -> usize {
        self.frames.dim().3
    }

    pub fn frames(&self) -> &Array4<f64> {
        &self.frames
    }

    pub fn into_frames(self) -> Array4<f64> {
        self.frames
    }

    pub fn frame(&self, view: usize) -> Result<ArrayView3<'_, f64>> {
        if view >= self.n_views() {
            return Err(Error::ViewIndex { index: view, n_views: self.n_views() });
        }
        Ok(self.frames.index_axis(Axis(0), view))
    }

    pub fn frame_owned(&self, view: usize) -> Result<Array3<f64>> {
        Ok(self.frame(view)?.to_owned())
    }

    /// Quantizes to 8-bit and back. Ground truth is stored on disk at 8 bits,
    /// so running this before comparisons keeps in-memory and reloaded
    /// sequences identical.
    pub fn quantized(&self) -> ViewSequence {
        let frames = self.frames.mapv(|v| quantize(v) as f64 / 255.0);
        ViewSequence { frames }
    }

    pub fn to_u8(&self) -> Array4<u8> {
        self.frames.mapv(quantize)
    }

    pub fn from_u8(frames: &ArrayViewD<'_, u8>) -> Result<ViewSequence> {
        let shape = frames.shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape {
                expected: "4 axes (view, row, col, channel)".into(),
                got: format!("{} axes", shape.len()),
            });
        }
        let f = frames.mapv(|v| v as f64 / 255.0);
        let f4 = f
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|e| Error::Shape { expected: "4 axes".into(), got: e.to_string() })?;
        ViewSequence::new(f4)
    }

    pub fn save_npy(&self, path: &Path) -> Result<()> {
        util::write_npy_u8(path, self.to_u8().into_dyn().view())
    }

    pub fn load_npy(path: &Path) -> Result<ViewSequence> {
        let arr = util::read_npy_u8(path)?;
        ViewSequence::from_u8(&arr.view())
    }

    /// Renders the sequence as one horizontal strip image, frames in ring order.
    pub fn save_strip_png(&self, path: &Path) -> Result<()> {
        let (n, r, _, c) = self.frames.dim();
        let mut img = ImageBuffer::<Rgb<u8>, Vec<u8>>::new((n * r) as u32, r as u32);
        for (view, frame) in self.frames.axis_iter(Axis(0)).enumerate() {
            for y in 0..r {
                for x in 0..r {
                    let px = if c == 1 {
                        let g = quantize(frame[[y, x, 0]]);
                        [g, g, g]
                    } else {
                        [
                            quantize(frame[[y, x, 0]]),
                            quantize(frame[[y, x, 1]]),
                            quantize(frame[[y, x, 2]]),
                        ]
                    };
                    img.put_pixel((view * r + x) as u32, y as u32, Rgb(px));
                }
            }
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        img.save(path)?;
        Ok(())
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Pixels whose values moved by less than this after quantization are treated
/// as unchanged when measuring edit visibility.
pub const VISIBILITY_THRESHOLD: f64 = 0.5 / 255.0;

/// Per-view count of pixels that differ visibly between two sequences.
pub fn visibility_table(a: &ViewSequence, b: &ViewSequence) -> Result<Vec<usize>> {
    if a.frames().dim() != b.frames().dim() {
        return Err(Error::Shape {
            expected: format!("{:?}", a.frames().dim()),
            got: format!("{:?}", b.frames().dim()),
        });
    }
    let (n, h, w, c) = a.frames().dim();
    let mut counts = vec![0usize; n];
    for vi in 0..n {
        for y in 0..h {
            for x in 0..w {
                let changed = (0..c).any(|ch| {
                    (a.frames()[[vi, y, x, ch]] - b.frames()[[vi, y, x, ch]]).abs()
                        > VISIBILITY_THRESHOLD
                });
                if changed {
                    counts[vi] += 1;
                }
            }
        }
    }
    Ok(counts)
}
