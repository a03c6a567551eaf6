//! Return panels, rolling snapshots, correlation repair and the synthetic corpus.

mod corr;
mod panel;
mod snapshot;
mod synth;

pub use corr::{
    check_correlation, nearest_correlation, nearest_correlation_trace, symmetrize, CorrelationMatrix, NearestConfig,
    NearestTrace, EIGEN_TOL, SYMMETRY_TOL,
};
pub use panel::{ingest_returns, AssetKind, ReturnPanel};
pub use snapshot::{
    build_snapshots, read_jsonl, records_to_matrices, records_to_snapshots, write_jsonl, MarketSnapshot,
    SnapshotConfig, SnapshotRecord, WEEKS_PER_YEAR,
};
pub use synth::{synth_corpus, CorpusConfig, Regime};
