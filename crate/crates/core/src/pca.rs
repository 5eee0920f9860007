//! Explained-variance analysis of the numeric flow features.

use crate::error::{Error, Result};
use crate::ingest::FlowTable;
use crate::linalg::{symmetric_eigen, Matrix, Standardizer};

#[derive(Clone, Debug, PartialEq)]
pub struct PcaResult {
    /// Share of total variance per component, descending.
    pub explained_variance_ratio: Vec<f64>,
    /// Running sum of `explained_variance_ratio`.
    pub cumulative: Vec<f64>,
    /// Columns that entered the analysis, in order.
    pub columns: Vec<String>,
}

/// PCA on the standardized usable numeric columns of `table`, keeping at most
/// `max_components` components.
pub fn pca_explained_variance(table: &FlowTable, max_components: usize) -> Result<PcaResult> {
    let columns: Vec<String> = table
        .usable_numeric()
        .into_iter()
        .filter(|c| {
            let col = table.numeric_column(&c.name).unwrap_or_default();
            col.iter().any(|&v| v != col[0])
        })
        .map(|c| c.name.clone())
        .collect();
    if columns.len() < 2 {
        return Err(Error::Degenerate(format!(
            "PCA needs at least 2 usable numeric columns, found {}",
            columns.len()
        )));
    }
    let names: Vec<&str> = columns.iter().map(String::as_str).collect();
    let m = table.select_numeric(&names)?;
    let mut result = pca_matrix(&m, max_components)?;
    result.columns = columns;
    Ok(result)
}

/// Explained-variance ratios of the correlation matrix of `m`.
pub fn pca_matrix(m: &Matrix, max_components: usize) -> Result<PcaResult> {
    if m.cols() < 2 || m.rows() < 2 {
        return Err(Error::Degenerate(format!(
            "PCA needs at least 2 rows and 2 columns, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let z = Standardizer::fit(m)?.transform(m);
    let eig = symmetric_eigen(&z.covariance()?)?;
    // Round-off can leave tiny negative eigenvalues on rank-deficient data.
    let values: Vec<f64> = eig.values.iter().map(|v| v.max(0.0)).collect();
    let trace: f64 = values.iter().sum();
    let mut ratios: Vec<f64> = values.iter().map(|v| v / trace).collect();
    ratios.truncate(max_components.max(1));
    let cumulative = ratios
        .iter()
        .scan(0.0, |acc, r| {
            *acc += r;
            Some(*acc)
        })
        .collect();
    Ok(PcaResult {
        explained_variance_ratio: ratios,
        cumulative,
        columns: (0..m.cols()).map(|j| format!("x{j}")).collect(),
    })
}

/// Componentwise |a − b|, padding the shorter vector with zeros.
pub fn ratio_drift(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| (a.get(i).copied().unwrap_or(0.0) - b.get(i).copied().unwrap_or(0.0)).abs())
        .collect()
}
