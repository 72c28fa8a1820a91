use adrnn::data::pathfinder::PathFinderSpec;
use adrnn::data::shard::generate_pathfinder_shard;
use std::time::Instant;

fn main() {
    let count: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    for len in [3usize, 9] {
        let t = Instant::now();
        let shard = generate_pathfinder_shard(&PathFinderSpec::desk(len, count, 77)).unwrap();
        let secs = t.elapsed().as_secs_f64();
        let bytes = shard.images.len() * 4 + shard.labels.len() * 4;
        println!("len {len}: {count} samples in {secs:.1}s ({:.2} ms/sample), {:.1} MB",
            1000.0 * secs / count as f64, bytes as f64 / 1e6);
    }
}
