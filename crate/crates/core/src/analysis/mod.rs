//! Post-hoc analyses of trained networks: pruning frontiers, knockouts,
//! group representations, probes, weight statistics and closed-form export.

mod expr;
mod features;
mod knockout;
mod probe;
mod prune;
mod representation;

use std::path::Path;

use serde::Serialize;

pub use expr::{
    export_expression, silu_approx_check, silu_approximations, ExportOptions, ExpressionExport, Formula, SiluApprox,
    SILU_LIPSCHITZ,
};
pub use features::{count_above, top_features, weight_sign_ranks, Feature, SignRankRow, SignRanks};
pub use knockout::{knockout_table, KnockoutRow, Module};
pub use probe::{best_correlated, correlation_probe, pearson, ProbeResult};
pub use prune::{prune, prune_frontier, FrontierPoint, PruneFrontier};
pub use representation::{
    active_embedding_neurons, embedding_matrix, linearity_loss, linearity_test, normalized_embedding,
    representation_matrix, representation_metrics, s4_true_representation, tetrahedron, LinearityConfig,
    LinearityMethod, LinearityTestResult, NormalizedEmbedding, RepresentationAnalysis, TrueRepresentation,
};

use crate::error::{Error, Result};

/// Writes serializable rows as a headed CSV file.
pub fn write_csv<T: Serialize>(path: &Path, headers: &[&str], rows: &[T]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
    w.write_record(headers)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
