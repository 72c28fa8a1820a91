//! PathFinder stimulus generator: two long locally-aligned main paths,
//! short distractor paths, and two circular disks. Label 1 iff both
//! disks sit on endpoints of the same main path.
//!
//! All drawn elements keep a 2 px Chebyshev clearance from each other
//! (disks may touch their own path), so pixel connectivity matches the
//! label and an independent union-find oracle over the geometry is
//! well-defined.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::substream;
use crate::error::{AdrnnError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PathFinderSpec {
    pub image_px: usize,
    /// Segments per main path; the difficulty parameter.
    pub path_len: usize,
    pub n_distractors: usize,
    pub segment_px: f64,
    pub max_turn_deg: f64,
    pub disk_radius_px: f64,
    pub count: usize,
    pub seed: u64,
}

impl PathFinderSpec {
    pub fn desk(path_len: usize, count: usize, seed: u64) -> Self {
        PathFinderSpec {
            image_px: 64,
            path_len,
            n_distractors: 8,
            segment_px: 5.0,
            max_turn_deg: 25.0,
            disk_radius_px: 2.0,
            count,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.path_len == 0 || self.image_px < 16 {
            return Err(AdrnnError::InvalidArgument {
                op: "gen_pathfinder",
                msg: format!(
                    "need path_len >= 1 and image_px >= 16, got {} / {}",
                    self.path_len, self.image_px
                ),
            });
        }
        Ok(())
    }
}

/// Polylines and disk placement; enough to re-derive the label
/// independently of the generator's bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathGeometry {
    /// paths[0], paths[1] are the main paths; the rest are distractors.
    pub paths: Vec<Vec<(f64, f64)>>,
    pub disk_centers: [(f64, f64); 2],
    /// Index into `paths` each disk was attached to.
    pub disk_on_path: [usize; 2],
    pub disk_radius_px: f64,
}

#[derive(Debug, Clone)]
pub struct PathFinderSample {
    /// [S, S], values in {0, 1}.
    pub image: Array2<f32>,
    pub label: u8,
    /// path_len.
    pub difficulty: u32,
    pub geometry: PathGeometry,
}

const CLEARANCE: i64 = 2;
const ATTEMPT_BUDGET: usize = 1000;

pub fn gen_pathfinder(spec: &PathFinderSpec, index: u64) -> Result<PathFinderSample> {
    spec.validate()?;
    // Alternating label keeps classes exactly balanced by construction.
    let label = (index % 2) as u8;
    let mut rng = substream(spec.seed, index, 1);
    let mut attempts = 0usize;
    loop {
        attempts += 1;
        if attempts > ATTEMPT_BUDGET {
            return Err(AdrnnError::GenerationBudgetExceeded { attempts });
        }
        if let Some(sample) = try_build(spec, label, &mut rng) {
            return Ok(sample);
        }
    }
}

struct Canvas {
    s: usize,
    /// Element id per lit pixel, -1 empty. Main paths are 0 and 1,
    /// distractors 2.., disks 100+.
    occ: Vec<i32>,
    /// Segment index per pixel of the path currently being grown.
    seg_of_pixel: Vec<i32>,
}

impl Canvas {
    fn new(s: usize) -> Self {
        Canvas {
            s,
            occ: vec![-1; s * s],
            seg_of_pixel: vec![-1; s * s],
        }
    }

    fn clear_violation(&self, px: &[(i64, i64)], allow: &[i32], seg_idx: i32) -> bool {
        for &(x, y) in px {
            for dy in -CLEARANCE..=CLEARANCE {
                for dx in -CLEARANCE..=CLEARANCE {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= self.s as i64 || ny >= self.s as i64 {
                        continue;
                    }
                    let i = ny as usize * self.s + nx as usize;
                    let id = self.occ[i];
                    if id >= 0 && !allow.contains(&id) {
                        return true;
                    }
                    // Self-clearance: only the previous segment of the
                    // growing path may be adjacent.
                    if seg_idx >= 0 {
                        let sp = self.seg_of_pixel[i];
                        if sp >= 0 && sp < seg_idx - 1 {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }

    fn stamp(&mut self, px: &[(i64, i64)], id: i32, seg_idx: i32) {
        for &(x, y) in px {
            let i = y as usize * self.s + x as usize;
            self.occ[i] = id;
            if seg_idx >= 0 {
                self.seg_of_pixel[i] = seg_idx;
            }
        }
    }

    fn reset_seg_map(&mut self) {
        for v in &mut self.seg_of_pixel {
            *v = -1;
        }
    }

    fn erase(&mut self, px: &[(i64, i64)]) {
        for &(x, y) in px {
            let i = y as usize * self.s + x as usize;
            self.occ[i] = -1;
            self.seg_of_pixel[i] = -1;
        }
    }
}

fn try_build(spec: &PathFinderSpec, label: u8, rng: &mut ChaCha8Rng) -> Option<PathFinderSample> {
    let s = spec.image_px;
    let mut canvas = Canvas::new(s);
    let mut paths: Vec<Vec<(f64, f64)>> = Vec::new();

    for id in 0..2 {
        let poly = grow_path(spec, spec.path_len, id as i32, &mut canvas, rng)?;
        paths.push(poly);
    }
    let distractor_len = (spec.path_len / 3).max(1);
    for d in 0..spec.n_distractors {
        // Distractors are best-effort: a crowded canvas may reject some.
        if let Some(poly) = grow_path(spec, distractor_len, 2 + d as i32, &mut canvas, rng) {
            paths.push(poly);
        }
    }

    // Disk placement.
    let (on_path, ends): ([usize; 2], [usize; 2]) = if label == 1 {
        let p = rng.gen_range(0..2usize);
        ([p, p], [0, 1])
    } else {
        ([0, 1], [rng.gen_range(0..2usize), rng.gen_range(0..2usize)])
    };
    let mut centers = [(0.0, 0.0); 2];
    for i in 0..2 {
        let poly = &paths[on_path[i]];
        let c = if ends[i] == 0 { poly[0] } else { *poly.last().expect("nonempty") };
        let px = disk_pixels(c, spec.disk_radius_px, s);
        if px.is_empty() {
            return None;
        }
        if canvas.clear_violation(&px, &[on_path[i] as i32, 100 + i as i32], -1) {
            return None;
        }
        canvas.stamp(&px, 100 + i as i32, -1);
        centers[i] = c;
    }

    let mut image = Array2::<f32>::zeros((s, s));
    for (i, &id) in canvas.occ.iter().enumerate() {
        if id >= 0 {
            image[(i / s, i % s)] = 1.0;
        }
    }
    Some(PathFinderSample {
        image,
        label,
        difficulty: spec.path_len as u32,
        geometry: PathGeometry {
            paths,
            disk_centers: centers,
            disk_on_path: on_path,
            disk_radius_px: spec.disk_radius_px,
        },
    })
}

/// Grow one path segment-by-segment with bounded heading changes,
/// enforcing clearance against everything drawn so far. Returns the
/// polyline on success.
fn grow_path(
    spec: &PathFinderSpec,
    len: usize,
    id: i32,
    canvas: &mut Canvas,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<(f64, f64)>> {
    let s = spec.image_px as f64;
    let margin = spec.disk_radius_px + 4.0;
    let max_turn = spec.max_turn_deg.to_radians();
    for _ in 0..40 {
        canvas.reset_seg_map();
        let mut pts = vec![(
            rng.gen_range(margin..s - margin),
            rng.gen_range(margin..s - margin),
        )];
        let mut heading = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut stamped: Vec<(i64, i64)> = Vec::new();
        let mut ok = true;
        for i in 0..len {
            heading += rng.gen_range(-max_turn..max_turn);
            let last = *pts.last().expect("nonempty");
            let next = (
                last.0 + spec.segment_px * heading.cos(),
                last.1 + spec.segment_px * heading.sin(),
            );
            if next.0 < margin || next.0 > s - margin || next.1 < margin || next.1 > s - margin {
                ok = false;
                break;
            }
            let px = line_pixels(last, next);
            if canvas.clear_violation(&px, &[id], i as i32) {
                ok = false;
                break;
            }
            canvas.stamp(&px, id, i as i32);
            stamped.extend_from_slice(&px);
            pts.push(next);
        }
        if ok {
            return Some(pts);
        }
        canvas.erase(&stamped);
    }
    None
}

/// Bresenham rasterization between rounded endpoints.
pub fn line_pixels(a: (f64, f64), b: (f64, f64)) -> Vec<(i64, i64)> {
    let (mut x0, mut y0) = (a.0.round() as i64, a.1.round() as i64);
    let (x1, y1) = (b.0.round() as i64, b.1.round() as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::new();
    loop {
        out.push((x0, y0));
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
    out
}

pub fn disk_pixels(center: (f64, f64), radius: f64, s: usize) -> Vec<(i64, i64)> {
    let (cx, cy) = center;
    let r = radius.ceil() as i64;
    let mut out = Vec::new();
    for y in (cy as i64 - r)..=(cy as i64 + r) {
        for x in (cx as i64 - r)..=(cx as i64 + r) {
            if x < 0 || y < 0 || x >= s as i64 || y >= s as i64 {
                continue;
            }
            let (fx, fy) = (x as f64 - cx, y as f64 - cy);
            if fx * fx + fy * fy <= radius * radius {
                out.push((x, y));
            }
        }
    }
    out
}
