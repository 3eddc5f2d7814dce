//! Benchmark clouds shipped with the crate.

use std::sync::Arc;

use crate::cloud::PointCloud;

pub const LINE2: &str = include_str!("../fixtures/line2.csv");
pub const LINE8: &str = include_str!("../fixtures/line8.csv");
pub const TWO_CLUSTER8: &str = include_str!("../fixtures/two_cluster8.csv");
pub const GRID64: &str = include_str!("../fixtures/grid64.csv");

fn parse(text: &str) -> Arc<PointCloud> {
    Arc::new(PointCloud::read_csv(text.as_bytes()).expect("bundled fixture parses"))
}

/// 1D `{-1, +1}`.
pub fn line2() -> Arc<PointCloud> {
    parse(LINE2)
}

/// 1D, 8 irregularly spaced points.
pub fn line8() -> Arc<PointCloud> {
    parse(LINE8)
}

/// 2D, two labeled clusters of 4 on opposite sides of the origin.
pub fn two_cluster8() -> Arc<PointCloud> {
    parse(TWO_CLUSTER8)
}

/// 2D square annulus: a 10x10 lattice of spacing 0.5 without its central 6x6
/// block, so the support has a hole.
pub fn grid64() -> Arc<PointCloud> {
    parse(GRID64)
}

/// Name lookup for the command line.
pub fn by_name(name: &str) -> Option<Arc<PointCloud>> {
    match name {
        "line2" => Some(line2()),
        "line8" => Some(line8()),
        "two_cluster8" => Some(two_cluster8()),
        "grid64" => Some(grid64()),
        _ => None,
    }
}

pub const NAMES: [&str; 4] = ["line2", "line8", "two_cluster8", "grid64"];
