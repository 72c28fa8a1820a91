//! Generator correctness against independent oracles: BFS route
//! reconstruction and spanning-tree checks for mazes, pixel union-find
//! connectivity for PathFinder, and shard format round-trips.

mod common;

use adrnn::data::maze::{carve, gen_maze, open_wall_count, MazeSpec, BORDER_PX, CELL_PX};
use adrnn::data::pathfinder::{gen_pathfinder, PathFinderSpec};
use adrnn::data::shard::{generate_maze_shard, generate_pathfinder_shard, Shard};
use adrnn::error::AdrnnError;
use ndarray::Array2;
use std::collections::VecDeque;

// ---- union-find ----

struct Dsu {
    parent: Vec<usize>,
}

impl Dsu {
    fn new(n: usize) -> Self {
        Dsu {
            parent: (0..n).collect(),
        }
    }
    fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            let r = self.find(self.parent[x]);
            self.parent[x] = r;
        }
        self.parent[x]
    }
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra] = rb;
        true
    }
}

// ---- mazes ----

/// BFS shortest path over open lattice cells; in a perfect maze this is
/// the unique route.
fn bfs_route(open: &[bool], n: usize, start: (usize, usize), end: (usize, usize)) -> Vec<(usize, usize)> {
    let idx = |r: usize, c: usize| r * n + c;
    let mut prev = vec![usize::MAX; n * n];
    let mut seen = vec![false; n * n];
    let mut q = VecDeque::new();
    seen[idx(start.0, start.1)] = true;
    q.push_back(idx(start.0, start.1));
    while let Some(cur) = q.pop_front() {
        if cur == idx(end.0, end.1) {
            break;
        }
        let (r, c) = (cur / n, cur % n);
        let push = |nr: usize, nc: usize, q: &mut VecDeque<usize>, seen: &mut Vec<bool>, prev: &mut Vec<usize>| {
            let i = idx(nr, nc);
            if open[i] && !seen[i] {
                seen[i] = true;
                prev[i] = cur;
                q.push_back(i);
            }
        };
        if r > 0 {
            push(r - 1, c, &mut q, &mut seen, &mut prev);
        }
        if r + 1 < n {
            push(r + 1, c, &mut q, &mut seen, &mut prev);
        }
        if c > 0 {
            push(r, c - 1, &mut q, &mut seen, &mut prev);
        }
        if c + 1 < n {
            push(r, c + 1, &mut q, &mut seen, &mut prev);
        }
    }
    let mut route = Vec::new();
    let mut cur = idx(end.0, end.1);
    assert!(seen[cur], "end reachable");
    loop {
        route.push((cur / n, cur % n));
        if cur == idx(start.0, start.1) {
            break;
        }
        cur = prev[cur];
    }
    route.reverse();
    route
}

#[test]
fn maze_corridor_graph_is_a_tree() {
    for i in 0..200u64 {
        let spec = MazeSpec {
            grid_n: if i % 2 == 0 { 5 } else { 9 },
            count: 1,
            seed: 7,
        };
        let lat = carve(&spec, i);
        let m = spec.corridor_n();
        // A perfect maze opens exactly m^2 - 1 walls...
        assert_eq!(open_wall_count(&lat), m * m - 1, "maze {i}");
        // ...and union-find over corridor edges confirms acyclicity and
        // full connectivity.
        let mut dsu = Dsu::new(m * m);
        let mut edges = 0;
        for r in 0..m {
            for c in 0..m {
                if c + 1 < m && lat.open[2 * r * lat.n + 2 * c + 1] {
                    assert!(dsu.union(r * m + c, r * m + c + 1), "cycle at maze {i}");
                    edges += 1;
                }
                if r + 1 < m && lat.open[(2 * r + 1) * lat.n + 2 * c] {
                    assert!(dsu.union(r * m + c, (r + 1) * m + c), "cycle at maze {i}");
                    edges += 1;
                }
            }
        }
        assert_eq!(edges, m * m - 1);
        let root = dsu.find(0);
        for v in 1..m * m {
            assert_eq!(dsu.find(v), root, "disconnected at maze {i}");
        }
    }
}

#[test]
fn maze_mask_matches_bfs_oracle() {
    for i in 0..200u64 {
        let spec = MazeSpec {
            grid_n: if i % 3 == 0 { 7 } else { 5 },
            count: 1,
            seed: 13,
        };
        let lat = carve(&spec, i);
        let sample = gen_maze(&spec, i).unwrap();
        let route = bfs_route(&lat.open, lat.n, lat.start, lat.end);
        // Render the BFS route with the same painting rule.
        let s_px = spec.image_px();
        let mut mask = Array2::<f32>::zeros((s_px, s_px));
        for &(r, c) in &route {
            for dy in 0..CELL_PX {
                for dx in 0..CELL_PX {
                    mask[(BORDER_PX + CELL_PX * r + dy, BORDER_PX + CELL_PX * c + dx)] = 1.0;
                }
            }
        }
        assert_eq!(sample.mask, mask, "maze {i}: mask differs from BFS oracle");
        assert_eq!(
            sample.solution_len_px,
            route.len() as u32 * (CELL_PX * CELL_PX) as u32
        );
    }
}

#[test]
fn maze_rendering_colors() {
    let spec = MazeSpec {
        grid_n: 9,
        count: 1,
        seed: 3,
    };
    let sample = gen_maze(&spec, 0).unwrap();
    let s = spec.image_px();
    assert_eq!(s, 24, "9-cell lattice renders at 24 px");
    let img = &sample.image;
    // Border stays black.
    for x in 0..s {
        for ch in 0..3 {
            assert_eq!(img[(ch, 0, x)], 0.0);
            assert_eq!(img[(ch, s - 1, x)], 0.0);
        }
    }
    // Exactly one 2x2 green cell and one red cell.
    let mut green = 0;
    let mut red = 0;
    for y in 0..s {
        for x in 0..s {
            let (r, g, b) = (img[(0, y, x)], img[(1, y, x)], img[(2, y, x)]);
            if (r, g, b) == (0.0, 1.0, 0.0) {
                green += 1;
            }
            if (r, g, b) == (1.0, 0.0, 0.0) {
                red += 1;
            }
        }
    }
    assert_eq!(green, CELL_PX * CELL_PX);
    assert_eq!(red, CELL_PX * CELL_PX);
}

#[test]
fn maze_spec_validation() {
    for bad in [4usize, 3, 0, 6] {
        let spec = MazeSpec {
            grid_n: bad,
            count: 1,
            seed: 0,
        };
        assert!(
            matches!(gen_maze(&spec, 0), Err(AdrnnError::InvalidArgument { .. })),
            "grid_n {bad} must be rejected"
        );
    }
}

#[test]
fn maze_difficulty_grows_with_grid() {
    let mut means = Vec::new();
    for grid in [5usize, 9] {
        let spec = MazeSpec {
            grid_n: grid,
            count: 1,
            seed: 21,
        };
        let total: u32 = (0..100)
            .map(|i| gen_maze(&spec, i).unwrap().solution_len_px)
            .sum();
        means.push(total as f64 / 100.0);
    }
    assert!(
        means[1] > means[0],
        "larger mazes have longer solutions on average: {means:?}"
    );
}

// ---- pathfinder ----

/// Union-find connectivity over lit pixels (8-connected); the oracle
/// uses only the rendered image plus the disk centers.
fn disks_connected(image: &Array2<f32>, centers: [(f64, f64); 2]) -> bool {
    let s = image.shape()[0];
    let idx = |y: usize, x: usize| y * s + x;
    let mut dsu = Dsu::new(s * s);
    for y in 0..s {
        for x in 0..s {
            if image[(y, x)] < 0.5 {
                continue;
            }
            for (dy, dx) in [(0i64, 1i64), (1, -1), (1, 0), (1, 1)] {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny < 0 || nx < 0 || ny >= s as i64 || nx >= s as i64 {
                    continue;
                }
                if image[(ny as usize, nx as usize)] >= 0.5 {
                    dsu.union(idx(y, x), idx(ny as usize, nx as usize));
                }
            }
        }
    }
    let a = (centers[0].1.round() as usize, centers[0].0.round() as usize);
    let b = (centers[1].1.round() as usize, centers[1].0.round() as usize);
    assert!(image[(a.0, a.1)] >= 0.5, "disk center lit");
    assert!(image[(b.0, b.1)] >= 0.5, "disk center lit");
    dsu.find(idx(a.0, a.1)) == dsu.find(idx(b.0, b.1))
}

#[test]
fn pathfinder_labels_match_connectivity_oracle() {
    let spec = PathFinderSpec::desk(5, 200, 11);
    for i in 0..200u64 {
        let sample = gen_pathfinder(&spec, i).unwrap();
        let connected = disks_connected(&sample.image, sample.geometry.disk_centers);
        assert_eq!(
            connected,
            sample.label == 1,
            "sample {i}: pixel connectivity disagrees with label"
        );
    }
}

#[test]
fn pathfinder_geometry_invariants() {
    let spec = PathFinderSpec::desk(7, 50, 5);
    for i in 0..50u64 {
        let s = gen_pathfinder(&spec, i).unwrap();
        assert_eq!(s.label, (i % 2) as u8, "alternating labels");
        let g = &s.geometry;
        assert_eq!(g.paths[0].len(), spec.path_len + 1);
        assert_eq!(g.paths[1].len(), spec.path_len + 1);
        // Segment lengths are fixed.
        for p in &g.paths[..2] {
            for w in p.windows(2) {
                let d = ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
                assert!((d - spec.segment_px).abs() < 1e-9);
            }
        }
        // Each disk sits on an endpoint of its declared path.
        for di in 0..2 {
            let p = &g.paths[g.disk_on_path[di]];
            let c = g.disk_centers[di];
            let at_end = c == p[0] || c == *p.last().unwrap();
            assert!(at_end, "disk {di} not at an endpoint");
        }
        if s.label == 1 {
            assert_eq!(g.disk_on_path[0], g.disk_on_path[1]);
        } else {
            assert_ne!(g.disk_on_path[0], g.disk_on_path[1]);
        }
    }
}

#[test]
fn pathfinder_determinism() {
    let spec = PathFinderSpec::desk(5, 10, 99);
    for i in 0..10u64 {
        let a = gen_pathfinder(&spec, i).unwrap();
        let b = gen_pathfinder(&spec, i).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.label, b.label);
    }
}

// ---- shards ----

#[test]
fn shard_round_trip_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let spec = MazeSpec {
        grid_n: 5,
        count: 20,
        seed: 17,
    };
    let shard = generate_maze_shard(&spec).unwrap();
    let shard2 = generate_maze_shard(&spec).unwrap();
    assert_eq!(shard.images, shard2.images, "generation is deterministic");
    shard.write(dir.path()).unwrap();
    let back = Shard::read(dir.path()).unwrap();
    assert_eq!(back.images, shard.images);
    assert_eq!(back.labels, shard.labels);
    assert_eq!(back.difficulty, shard.difficulty);
    assert_eq!(back.manifest.count, 20);
}

#[test]
fn shard_detects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PathFinderSpec::desk(3, 4, 1);
    let shard = generate_pathfinder_shard(&spec).unwrap();
    shard.write(dir.path()).unwrap();
    // Flip one byte in the images blob.
    let p = dir.path().join("images.bin");
    let mut bytes = std::fs::read(&p).unwrap();
    bytes[10] ^= 0xFF;
    std::fs::write(&p, bytes).unwrap();
    assert!(matches!(
        Shard::read(dir.path()),
        Err(AdrnnError::ChecksumFailure { .. })
    ));
}

#[test]
fn shard_rejects_unknown_version() {
    let dir = tempfile::tempdir().unwrap();
    let spec = MazeSpec {
        grid_n: 5,
        count: 2,
        seed: 1,
    };
    generate_maze_shard(&spec).unwrap().write(dir.path()).unwrap();
    let mp = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&mp)
        .unwrap()
        .replace("\"format_version\": 1", "\"format_version\": 99");
    std::fs::write(&mp, text).unwrap();
    assert!(matches!(
        Shard::read(dir.path()),
        Err(AdrnnError::FormatVersion { found: 99, .. })
    ));
}

#[test]
fn pathfinder_shard_is_balanced() {
    let spec = PathFinderSpec::desk(3, 30, 2);
    let shard = generate_pathfinder_shard(&spec).unwrap();
    let pos: usize = shard.labels.iter().filter(|&&l| l > 0.5).count();
    assert_eq!(pos, 15, "alternating labels give exact balance");
}
