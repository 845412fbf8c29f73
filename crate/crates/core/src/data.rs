use nalgebra::{DMatrix, DVector};

use crate::error::{QlsError, Result};

/// Observations for a linear model with one endogenous regressor.
///
/// `controls` are the included exogenous regressors Z₁ (no intercept column,
/// the estimators add it), `instruments` the excluded instruments Z₂.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub outcome: DVector<f64>,
    pub endogenous: DVector<f64>,
    pub controls: DMatrix<f64>,
    pub instruments: DMatrix<f64>,
    /// Dense cluster ids in `0..n_clusters`, if clustering was requested.
    pub clusters: Option<Vec<usize>>,
    pub control_names: Vec<String>,
    pub instrument_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        outcome: DVector<f64>,
        endogenous: DVector<f64>,
        controls: DMatrix<f64>,
        instruments: DMatrix<f64>,
    ) -> Result<Self> {
        let n = endogenous.len();
        if outcome.len() != n || controls.nrows() != n || instruments.nrows() != n {
            return Err(QlsError::Dimension(format!(
                "row counts differ: outcome {}, endogenous {}, controls {}, instruments {}",
                outcome.len(),
                n,
                controls.nrows(),
                instruments.nrows()
            )));
        }
        let control_names = (1..=controls.ncols()).map(|j| format!("z1_{j}")).collect();
        let instrument_names = (1..=instruments.ncols())
            .map(|j| format!("z2_{j}"))
            .collect();
        Ok(Self {
            outcome,
            endogenous,
            controls,
            instruments,
            clusters: None,
            control_names,
            instrument_names,
        })
    }

    /// Attach column names; lengths must match the matrices.
    pub fn with_names(mut self, controls: Vec<String>, instruments: Vec<String>) -> Result<Self> {
        if controls.len() != self.controls.ncols() || instruments.len() != self.instruments.ncols()
        {
            return Err(QlsError::Dimension("column name count mismatch".into()));
        }
        self.control_names = controls;
        self.instrument_names = instruments;
        Ok(self)
    }

    /// Attach cluster labels. Arbitrary labels are mapped to dense ids in
    /// order of first appearance.
    pub fn with_clusters<L: AsRef<str>>(mut self, labels: &[L]) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(QlsError::Dimension(format!(
                "{} cluster labels for {} rows",
                labels.len(),
                self.len()
            )));
        }
        let mut ids = std::collections::HashMap::new();
        let dense = labels
            .iter()
            .map(|l| {
                let next = ids.len();
                *ids.entry(l.as_ref().to_owned()).or_insert(next)
            })
            .collect();
        self.clusters = Some(dense);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.endogenous.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[1, Z₁]`, the always-included exogenous block.
    pub fn exogenous_block(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, 1 + self.controls.ncols());
        m.column_mut(0).fill(1.0);
        m.view_mut((0, 1), (n, self.controls.ncols()))
            .copy_from(&self.controls);
        m
    }
}
