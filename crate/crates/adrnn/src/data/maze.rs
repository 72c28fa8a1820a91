//! Maze generation: randomized depth-first search on a cell grid
//! yields a perfect maze (corridor graph is a spanning tree), so the
//! route between any start/end pair is unique.
//!
//! Lattice layout: `grid_n` is odd; corridor cells sit at even lattice
//! coordinates, wall cells between them are opened as the DFS carves.
//! Rendering uses 2x2 px per lattice cell and a 3 px border, so the
//! image side is `2*grid_n + 6` (9x9 grid -> 24x24 px).

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::substream;
use crate::error::{AdrnnError, Result};

pub const CELL_PX: usize = 2;
pub const BORDER_PX: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct MazeSpec {
    /// Lattice cells per side (walls included); odd, >= 5.
    pub grid_n: usize,
    pub count: usize,
    pub seed: u64,
}

impl MazeSpec {
    pub fn image_px(&self) -> usize {
        CELL_PX * self.grid_n + 2 * BORDER_PX
    }

    /// Corridor cells per side.
    pub fn corridor_n(&self) -> usize {
        (self.grid_n + 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_n < 5 || self.grid_n % 2 == 0 {
            return Err(AdrnnError::InvalidArgument {
                op: "gen_maze",
                msg: format!("grid_n must be odd and >= 5, got {}", self.grid_n),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MazeSample {
    /// [3, S, S]; walls black, corridors white, start green, end red.
    pub image: Array3<f32>,
    /// [S, S] binary route from start to end (inclusive).
    pub mask: Array2<f32>,
    /// grid_n.
    pub difficulty: u32,
    /// Count of 1-pixels in the mask; the per-sample difficulty proxy.
    pub solution_len_px: u32,
}

/// Open lattice cells of one maze; `open[r][c]` true means corridor.
pub struct MazeLattice {
    pub n: usize,
    pub open: Vec<bool>,
    pub start: (usize, usize),
    pub end: (usize, usize),
    /// Lattice cells of the unique start->end route.
    pub path: Vec<(usize, usize)>,
}

pub fn gen_maze(spec: &MazeSpec, index: u64) -> Result<MazeSample> {
    spec.validate()?;
    let lattice = carve(spec, index);
    Ok(render(spec, &lattice))
}

/// DFS spanning structure + uniform start/end + unique path.
pub fn carve(spec: &MazeSpec, index: u64) -> MazeLattice {
    let mut rng = substream(spec.seed, index, 0);
    let n = spec.grid_n;
    let m = spec.corridor_n();
    let mut open = vec![false; n * n];
    for r in 0..m {
        for c in 0..m {
            open[2 * r * n + 2 * c] = true;
        }
    }
    // Randomized DFS over corridor cells.
    let mut visited = vec![false; m * m];
    let start_cell = rng.gen_range(0..m * m);
    visited[start_cell] = true;
    let mut stack = vec![start_cell];
    while let Some(&cur) = stack.last() {
        let (r, c) = (cur / m, cur % m);
        let mut cands: Vec<(usize, usize)> = Vec::with_capacity(4);
        if r > 0 && !visited[cur - m] {
            cands.push((cur - m, (2 * r - 1) * n + 2 * c));
        }
        if r + 1 < m && !visited[cur + m] {
            cands.push((cur + m, (2 * r + 1) * n + 2 * c));
        }
        if c > 0 && !visited[cur - 1] {
            cands.push((cur - 1, 2 * r * n + 2 * c - 1));
        }
        if c + 1 < m && !visited[cur + 1] {
            cands.push((cur + 1, 2 * r * n + 2 * c + 1));
        }
        if cands.is_empty() {
            stack.pop();
            continue;
        }
        let (next, wall) = cands[rng.gen_range(0..cands.len())];
        open[wall] = true;
        visited[next] = true;
        stack.push(next);
    }

    // Start/end: distinct corridor cells, uniform.
    let s = rng.gen_range(0..m * m);
    let e = loop {
        let e = rng.gen_range(0..m * m);
        if e != s {
            break e;
        }
    };
    let path = unique_path(&open, n, m, s, e);
    MazeLattice {
        n,
        open,
        start: (2 * (s / m), 2 * (s % m)),
        end: (2 * (e / m), 2 * (e % m)),
        path,
    }
}

/// DFS on the corridor tree from s to e; returns lattice cells of the
/// route including the wall cells between consecutive corridor cells.
fn unique_path(open: &[bool], n: usize, m: usize, s: usize, e: usize) -> Vec<(usize, usize)> {
    let mut parent = vec![usize::MAX; m * m];
    let mut stack = vec![s];
    let mut seen = vec![false; m * m];
    seen[s] = true;
    while let Some(cur) = stack.pop() {
        if cur == e {
            break;
        }
        let (r, c) = (cur / m, cur % m);
        let try_nb = |nb: usize, wall: usize, stack: &mut Vec<usize>, seen: &mut Vec<bool>, parent: &mut Vec<usize>| {
            if open[wall] && !seen[nb] {
                seen[nb] = true;
                parent[nb] = cur;
                stack.push(nb);
            }
        };
        if r > 0 {
            try_nb(cur - m, (2 * r - 1) * n + 2 * c, &mut stack, &mut seen, &mut parent);
        }
        if r + 1 < m {
            try_nb(cur + m, (2 * r + 1) * n + 2 * c, &mut stack, &mut seen, &mut parent);
        }
        if c > 0 {
            try_nb(cur - 1, 2 * r * n + 2 * c - 1, &mut stack, &mut seen, &mut parent);
        }
        if c + 1 < m {
            try_nb(cur + 1, 2 * r * n + 2 * c + 1, &mut stack, &mut seen, &mut parent);
        }
    }
    let mut cells = Vec::new();
    let mut cur = e;
    loop {
        cells.push((2 * (cur / m), 2 * (cur % m)));
        if cur == s {
            break;
        }
        let p = parent[cur];
        debug_assert_ne!(p, usize::MAX, "end unreachable in a spanning tree");
        // Wall cell between cur and p.
        let (r1, c1) = (2 * (cur / m), 2 * (cur % m));
        let (r2, c2) = (2 * (p / m), 2 * (p % m));
        cells.push(((r1 + r2) / 2, (c1 + c2) / 2));
        cur = p;
    }
    cells.reverse();
    cells
}

fn render(spec: &MazeSpec, lat: &MazeLattice) -> MazeSample {
    let s_px = spec.image_px();
    let n = lat.n;
    let mut image = Array3::<f32>::zeros((3, s_px, s_px));
    let mut mask = Array2::<f32>::zeros((s_px, s_px));
    let paint = |img: &mut Array3<f32>, r: usize, c: usize, rgb: [f32; 3]| {
        for dy in 0..CELL_PX {
            for dx in 0..CELL_PX {
                for ch in 0..3 {
                    img[(ch, BORDER_PX + CELL_PX * r + dy, BORDER_PX + CELL_PX * c + dx)] = rgb[ch];
                }
            }
        }
    };
    for r in 0..n {
        for c in 0..n {
            if lat.open[r * n + c] {
                paint(&mut image, r, c, [1.0, 1.0, 1.0]);
            }
        }
    }
    paint(&mut image, lat.start.0, lat.start.1, [0.0, 1.0, 0.0]);
    paint(&mut image, lat.end.0, lat.end.1, [1.0, 0.0, 0.0]);
    for &(r, c) in &lat.path {
        for dy in 0..CELL_PX {
            for dx in 0..CELL_PX {
                mask[(BORDER_PX + CELL_PX * r + dy, BORDER_PX + CELL_PX * c + dx)] = 1.0;
            }
        }
    }
    let solution_len_px = lat.path.len() as u32 * (CELL_PX * CELL_PX) as u32;
    MazeSample {
        image,
        mask,
        difficulty: spec.grid_n as u32,
        solution_len_px,
    }
}

/// Number of open wall cells; a perfect maze has exactly m^2 - 1.
pub fn open_wall_count(lat: &MazeLattice) -> usize {
    let n = lat.n;
    let mut cnt = 0;
    for r in 0..n {
        for c in 0..n {
            if lat.open[r * n + c] && (r % 2 == 1 || c % 2 == 1) {
                cnt += 1;
            }
        }
    }
    cnt
}
