//! Orthographic turntable rasterizer with painter's-algorithm compositing.

use ndarray::{Array3, Array4};

use super::{rotate_scene, rotate_xy, OrbitParams, PrimitiveKind, SceneSpec};
use crate::error::{Error, Result};
use crate::sequence::ViewSequence;

/// Renders one view of the scene. `view` must lie in `0..n_views`.
pub fn render_view(scene: &SceneSpec, orbit: &OrbitParams, view: usize) -> Result<Array3<f64>> {
    scene.validate()?;
    orbit.validate()?;
    if view >= orbit.n_views {
        return Err(Error::ViewIndex { index: view, n_views: orbit.n_views });
    }
    let rotated = rotate_scene(scene, orbit.view_angle_deg(view));
    Ok(raster_scene(&rotated, orbit))
}

/// Like [`render_view`] but accepts any integer index and reduces it into the
/// ring, so view i and view i+N produce identical frames.
pub fn render_view_periodic(scene: &SceneSpec, orbit: &OrbitParams, view: i64) -> Result<Array3<f64>> {
    orbit.validate()?;
    let idx = view.rem_euclid(orbit.n_views as i64) as usize;
    render_view(scene, orbit, idx)
}

/// Renders the full ring of views.
pub fn render_orbit(scene: &SceneSpec, orbit: &OrbitParams) -> Result<ViewSequence> {
    scene.validate()?;
    orbit.validate()?;
    let r = orbit.resolution;
    let c = orbit.channels;
    let mut frames = Array4::zeros((orbit.n_views, r, r, c));
    for view in 0..orbit.n_views {
        let frame = render_view(scene, orbit, view)?;
        frames.index_axis_mut(ndarray::Axis(0), view).assign(&frame);
    }
    ViewSequence::new(frames)
}

enum Footprint {
    Circle { cu: f64, cv: f64, r: f64 },
    /// Convex polygon in counterclockwise order.
    Poly(Vec<(f64, f64)>),
}

impl Footprint {
    fn bbox(&self, w: usize) -> (usize, usize, usize, usize) {
        let (min_u, max_u, min_v, max_v) = match self {
            Footprint::Circle { cu, cv, r } => (cu - r, cu + r, cv - r, cv + r),
            Footprint::Poly(pts) => {
                let mut min_u = f64::INFINITY;
                let mut max_u = f64::NEG_INFINITY;
                let mut min_v = f64::INFINITY;
                let mut max_v = f64::NEG_INFINITY;
                for &(u, v) in pts {
                    min_u = min_u.min(u);
                    max_u = max_u.max(u);
                    min_v = min_v.min(v);
                    max_v = max_v.max(v);
                }
                (min_u, max_u, min_v, max_v)
            }
        };
        let clamp = |x: f64| x.clamp(0.0, w as f64);
        (
            clamp(min_u.floor()) as usize,
            clamp(max_u.ceil()) as usize,
            clamp(min_v.floor()) as usize,
            clamp(max_v.ceil()) as usize,
        )
    }

    fn covers(&self, u: f64, v: f64) -> bool {
        match self {
            Footprint::Circle { cu, cv, r } => {
                let du = u - cu;
                let dv = v - cv;
                du * du + dv * dv <= r * r
            }
            Footprint::Poly(pts) => {
                let n = pts.len();
                for i in 0..n {
                    let (ax, ay) = pts[i];
                    let (bx, by) = pts[(i + 1) % n];
                    if (bx - ax) * (v - ay) - (by - ay) * (u - ax) < 0.0 {
                        return false;
                    }
                }
                true
            }
        }
    }
}

/// Convex hull via the monotone chain, oriented so the coverage test's
/// cross-product sign convention sees the interior as non-negative.
/// Returns fewer than 3 points for degenerate (collinear) input.
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let chain = |iter: &mut dyn Iterator<Item = (f64, f64)>| {
        let mut half: Vec<(f64, f64)> = Vec::new();
        for p in iter {
            while half.len() >= 2 && cross(half[half.len() - 2], half[half.len() - 1], p) <= 0.0 {
                half.pop();
            }
            half.push(p);
        }
        half.pop();
        half
    };
    let mut hull = chain(&mut pts.iter().copied());
    hull.extend(chain(&mut pts.iter().rev().copied()));
    if hull.len() < 3 {
        return Vec::new();
    }
    hull
}

fn raster_scene(scene: &SceneSpec, orbit: &OrbitParams) -> Array3<f64> {
    let s = orbit.supersample;
    let w = orbit.resolution * s;
    let c = orbit.channels;
    let half = w as f64 / 2.0;
    let project = |x: f64, z: f64| ((x + 1.0) * half, (1.0 - z) * half);

    let px_color = |color: &[f64; 3]| -> Vec<f64> {
        if c == 1 {
            vec![(color[0] + color[1] + color[2]) / 3.0]
        } else {
            color.to_vec()
        }
    };

    let mut buf = Array3::from_shape_fn((w, w, c), |(_, _, ch)| px_color(&scene.background)[ch]);

    // Painter's algorithm: larger y is nearer the fixed camera on +y, so sort
    // far-to-near and let later primitives overwrite. The sort is stable, so
    // primitives at equal depth keep their scene order.
    let mut order: Vec<usize> = (0..scene.primitives.len()).collect();
    order.sort_by(|&a, &b| {
        scene.primitives[a].center[1]
            .partial_cmp(&scene.primitives[b].center[1])
            .unwrap()
    });

    for idx in order {
        let prim = &scene.primitives[idx];
        let (cu, cv) = project(prim.center[0], prim.center[2]);
        let footprint = match prim.kind {
            PrimitiveKind::Disk => Footprint::Circle { cu, cv, r: prim.size * half },
            PrimitiveKind::Box => {
                let mut pts = Vec::with_capacity(8);
                for dx in [-prim.size, prim.size] {
                    for dy in [-prim.size, prim.size] {
                        let (ox, _) = rotate_xy(dx, dy, prim.yaw_deg);
                        for dz in [-prim.size, prim.size] {
                            pts.push(project(prim.center[0] + ox, prim.center[2] + dz));
                        }
                    }
                }
                let hull = convex_hull(pts);
                if hull.len() < 3 {
                    continue;
                }
                Footprint::Poly(hull)
            }
            PrimitiveKind::Triangle => {
                let h = 3f64.sqrt() / 2.0;
                let local = [
                    (0.0, prim.size),
                    (-prim.size * h, -prim.size / 2.0),
                    (prim.size * h, -prim.size / 2.0),
                ];
                let pts: Vec<(f64, f64)> = local
                    .iter()
                    .map(|&(dx, dz)| {
                        let (ox, _) = rotate_xy(dx, 0.0, prim.yaw_deg);
                        project(prim.center[0] + ox, prim.center[2] + dz)
                    })
                    .collect();
                let hull = convex_hull(pts);
                if hull.len() < 3 {
                    continue;
                }
                Footprint::Poly(hull)
            }
        };

        let color = px_color(&prim.color);
        let (u0, u1, v0, v1) = footprint.bbox(w);
        for v in v0..v1 {
            for u in u0..u1 {
                if footprint.covers(u as f64 + 0.5, v as f64 + 0.5) {
                    for (ch, &val) in color.iter().enumerate() {
                        buf[[v, u, ch]] = val;
                    }
                }
            }
        }
    }

    if s == 1 {
        return buf;
    }
    let r = orbit.resolution;
    let inv = 1.0 / (s * s) as f64;
    Array3::from_shape_fn((r, r, c), |(y, x, ch)| {
        let mut acc = 0.0;
        for dy in 0..s {
            for dx in 0..s {
                acc += buf[[y * s + dy, x * s + dx, ch]];
            }
        }
        acc * inv
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::Primitive;

    fn scene_with(primitives: Vec<Primitive>) -> SceneSpec {
        SceneSpec { primitives, background: [0.05, 0.05, 0.05], seed: 0 }
    }

    fn disk(tag: &str, center: [f64; 3], size: f64, color: [f64; 3]) -> Primitive {
        Primitive { kind: PrimitiveKind::Disk, center, size, yaw_deg: 0.0, color, tag: tag.into() }
    }

    fn orbit(n: usize, r: usize) -> OrbitParams {
        OrbitParams { n_views: n, resolution: r, channels: 3, supersample: 2 }
    }

    /// Column index of the frame's colored center of mass.
    fn centroid_col(frame: &Array3<f64>) -> f64 {
        let (r, _, _) = frame.dim();
        let mut num = 0.0;
        let mut den = 0.0;
        for y in 0..r {
            for x in 0..r {
                let m = (frame[[y, x, 0]] - 0.05).abs()
                    + (frame[[y, x, 1]] - 0.05).abs()
                    + (frame[[y, x, 2]] - 0.05).abs();
                num += m * x as f64;
                den += m;
            }
        }
        num / den
    }

    #[test]
    fn view_index_out_of_range_is_an_error() {
        let scene = scene_with(vec![disk("a", [0.0; 3], 0.3, [0.9, 0.1, 0.1])]);
        let orbit = orbit(8, 16);
        assert!(render_view(&scene, &orbit, 7).is_ok());
        assert!(matches!(
            render_view(&scene, &orbit, 8),
            Err(Error::ViewIndex { index: 8, n_views: 8 })
        ));
    }

    #[test]
    fn periodic_views_are_bitwise_identical() {
        let scene = scene_with(vec![
            disk("a", [0.3, 0.1, 0.0], 0.25, [0.9, 0.2, 0.1]),
            disk("b", [-0.2, -0.3, 0.2], 0.15, [0.1, 0.8, 0.3]),
        ]);
        let orbit = orbit(8, 16);
        for i in 0..orbit.n_views as i64 {
            let a = render_view_periodic(&scene, &orbit, i).unwrap();
            let b = render_view_periodic(&scene, &orbit, i + 8).unwrap();
            let c = render_view_periodic(&scene, &orbit, i - 8).unwrap();
            assert_eq!(a, b);
            assert_eq!(a, c);
        }
    }

    #[test]
    fn centered_disk_orbit_is_constant() {
        let scene = scene_with(vec![disk("a", [0.0, 0.0, 0.0], 0.4, [0.9, 0.4, 0.1])]);
        let orbit = orbit(4, 16);
        let seq = render_orbit(&scene, &orbit).unwrap();
        let first = seq.frame_owned(0).unwrap();
        for i in 1..4 {
            assert_eq!(first, seq.frame_owned(i).unwrap(), "view {i} differs");
        }
    }

    #[test]
    fn offset_disk_mirrors_between_front_and_back_views() {
        let scene = scene_with(vec![disk("a", [0.3, 0.0, 0.0], 0.15, [0.9, 0.2, 0.2])]);
        let orbit = orbit(8, 32);
        let front = render_view(&scene, &orbit, 0).unwrap();
        let back = render_view(&scene, &orbit, 4).unwrap();
        let center = (orbit.resolution as f64 - 1.0) / 2.0;
        let cf = centroid_col(&front);
        let cb = centroid_col(&back);
        assert!(
            (cf - center) > 2.0,
            "front view should sit right of center, centroid {cf}"
        );
        assert!(
            ((cf - center) + (cb - center)).abs() < 0.75,
            "views should mirror about the center: {cf} vs {cb}"
        );
    }

    #[test]
    fn nearer_primitive_occludes_farther_one() {
        // Two disks on the depth axis: the +y one faces the camera at view 0.
        let near = disk("near", [0.0, 0.4, 0.0], 0.2, [0.1, 0.9, 0.1]);
        let far = disk("far", [0.0, -0.4, 0.0], 0.2, [0.9, 0.1, 0.1]);
        let scene = scene_with(vec![far.clone(), near.clone()]);
        let orbit = orbit(8, 32);
        let frame = render_view(&scene, &orbit, 0).unwrap();
        let mid = orbit.resolution / 2;
        assert!((frame[[mid, mid, 1]] - 0.9).abs() < 0.05, "front view shows the near disk");
        // Order in the primitive list must not matter when depths differ.
        let swapped = scene_with(vec![near, far]);
        let frame2 = render_view(&swapped, &orbit, 0).unwrap();
        assert_eq!(frame, frame2);
    }

    #[test]
    fn half_turn_swaps_occlusion_order() {
        let near = disk("near", [0.0, 0.4, 0.0], 0.2, [0.1, 0.9, 0.1]);
        let far = disk("far", [0.0, -0.4, 0.0], 0.2, [0.9, 0.1, 0.1]);
        let scene = scene_with(vec![far, near]);
        let orbit = orbit(8, 32);
        let frame = render_view(&scene, &orbit, 4).unwrap();
        let mid = orbit.resolution / 2;
        assert!((frame[[mid, mid, 0]] - 0.9).abs() < 0.05, "back view shows the far disk");
    }

    #[test]
    fn edge_on_triangle_vanishes() {
        let tri = Primitive {
            kind: PrimitiveKind::Triangle,
            center: [0.0, 0.0, 0.0],
            size: 0.3,
            yaw_deg: 90.0,
            color: [0.9, 0.9, 0.1],
            tag: "t".into(),
        };
        let scene = scene_with(vec![tri]);
        let orbit = orbit(8, 32);
        let frame = render_view(&scene, &orbit, 0).unwrap();
        let bg = 0.05;
        let max_dev = frame.iter().map(|v| (v - bg).abs()).fold(0.0, f64::max);
        assert!(max_dev < 1e-9, "edge-on triangle should leave only background, dev {max_dev}");
    }

    #[test]
    fn supersampling_softens_disk_edges() {
        let scene = scene_with(vec![disk("a", [0.0; 3], 0.31, [1.0, 1.0, 1.0])]);
        let hard = OrbitParams { supersample: 1, ..orbit(4, 32) };
        let soft = OrbitParams { supersample: 2, ..orbit(4, 32) };
        let f_hard = render_view(&scene, &hard, 0).unwrap();
        let f_soft = render_view(&scene, &soft, 0).unwrap();
        let fractional = |f: &Array3<f64>| {
            f.iter().filter(|&&v| v > 0.1 && v < 0.9).count()
        };
        assert_eq!(fractional(&f_hard), 0);
        assert!(fractional(&f_soft) > 0);
    }

    #[test]
    fn grayscale_rendering_averages_channels() {
        let scene = scene_with(vec![disk("a", [0.0; 3], 0.4, [0.9, 0.3, 0.0])]);
        let o = OrbitParams { channels: 1, ..orbit(4, 16) };
        let frame = render_view(&scene, &o, 0).unwrap();
        let mid = 8;
        assert!((frame[[mid, mid, 0]] - 0.4).abs() < 1e-9);
    }
}
