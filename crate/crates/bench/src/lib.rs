//! Fixed inputs shared by the benchmarks.

use snapdoa_core::sigsim::{synthesize, Modulation, SourceConfig};
use snapdoa_core::{ArrayGeometry, CMatrix};

/// `t` snapshots of three 16QAM sources at 10 dB on `geometry`.
pub fn snapshots(geometry: &str, t: usize) -> (ArrayGeometry, CMatrix) {
    let geom = ArrayGeometry::preset(geometry).expect("known preset");
    let cfg = SourceConfig::new(vec![0.9, 1.3, 2.0], vec![1.0, 0.5, 2.0], Modulation::Qam16).expect("valid sources");
    let y = synthesize(&geom, &cfg, t, 10.0, 7).expect("synthesis").y;
    (geom, y)
}
