//! Linear observation operators, diagonal error models and seeded synthetic
//! observations for twin experiments.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleMatrix;
use crate::error::{check_dim, Error, Result};

/// Linear observation operator `H`.
#[derive(Debug, Clone, PartialEq)]
pub enum ObsOperator {
    /// Picks state components by (0-based) index, in the given order.
    Selection { n_state: usize, indices: Vec<usize> },
    /// Arbitrary dense `L x N` matrix.
    Dense(DMatrix<f64>),
}

/// Which half of the grid an every-other-point network observes, in 1-based
/// gridpoint numbering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    /// Gridpoints 1, 3, 5, ... (0-based 0, 2, 4, ...).
    #[default]
    Odd,
    /// Gridpoints 2, 4, 6, ...
    Even,
}

impl ObsOperator {
    pub fn selection(n_state: usize, indices: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; n_state];
        for &i in &indices {
            if i >= n_state {
                return Err(Error::InvalidParameter(format!(
                    "observed index {i} out of range for state of size {n_state}"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidParameter(format!(
                    "observed index {i} listed twice"
                )));
            }
        }
        Ok(Self::Selection { n_state, indices })
    }

    pub fn identity(n_state: usize) -> Self {
        Self::Selection {
            n_state,
            indices: (0..n_state).collect(),
        }
    }

    pub fn every_other(n_state: usize, parity: Parity) -> Self {
        let start = match parity {
            Parity::Odd => 0,
            Parity::Even => 1,
        };
        Self::Selection {
            n_state,
            indices: (start..n_state).step_by(2).collect(),
        }
    }

    pub fn n_obs(&self) -> usize {
        match self {
            Self::Selection { indices, .. } => indices.len(),
            Self::Dense(h) => h.nrows(),
        }
    }

    pub fn n_state(&self) -> usize {
        match self {
            Self::Selection { n_state, .. } => *n_state,
            Self::Dense(h) => h.ncols(),
        }
    }

    /// Gridpoint of each observation; only selection operators have one.
    pub fn locations(&self) -> Option<&[usize]> {
        match self {
            Self::Selection { indices, .. } => Some(indices),
            Self::Dense(_) => None,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Self::Selection { n_state, indices } => {
                let mut h = DMatrix::zeros(indices.len(), *n_state);
                for (row, &i) in indices.iter().enumerate() {
                    h[(row, i)] = 1.0;
                }
                h
            }
            Self::Dense(h) => h.clone(),
        }
    }

    /// `H A` for any `N x K` matrix.
    pub fn apply(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("observation operator input", self.n_state(), a.nrows())?;
        Ok(match self {
            Self::Selection { indices, .. } => a.select_rows(indices.iter()),
            Self::Dense(h) => h * a,
        })
    }

    pub fn apply_vector(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("observation operator input", self.n_state(), x.len())?;
        Ok(match self {
            Self::Selection { indices, .. } => DVector::from_iterator(
                indices.len(),
                indices.iter().map(|&i| x[i]),
            ),
            Self::Dense(h) => h * x,
        })
    }
}

/// `H X`: `Y^b` for perturbations, `Ȳ^b` for a full ensemble.
pub fn project_to_obs(h: &ObsOperator, ens: &EnsembleMatrix) -> Result<DMatrix<f64>> {
    h.apply(ens.matrix())
}

/// Diagonal observation-error covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsErrorModel {
    variances: DVector<f64>,
}

impl ObsErrorModel {
    pub fn new(variances: DVector<f64>) -> Result<Self> {
        if let Some(v) = variances.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "observation error variances must be positive and finite, got {v}"
            )));
        }
        Ok(Self { variances })
    }

    pub fn uniform(n_obs: usize, variance: f64) -> Result<Self> {
        Self::new(DVector::from_element(n_obs, variance))
    }

    pub fn variances(&self) -> &DVector<f64> {
        &self.variances
    }

    pub fn len(&self) -> usize {
        self.variances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variances.is_empty()
    }

    pub fn inverse(&self) -> DVector<f64> {
        self.variances.map(|v| 1.0 / v)
    }
}

/// Observations valid at one analysis time.
#[derive(Debug, Clone)]
pub struct ObservationBatch {
    pub y: DVector<f64>,
    pub cycle: usize,
    pub operator: Arc<ObsOperator>,
    pub errors: Arc<ObsErrorModel>,
}

impl ObservationBatch {
    pub fn new(
        y: DVector<f64>,
        cycle: usize,
        operator: Arc<ObsOperator>,
        errors: Arc<ObsErrorModel>,
    ) -> Result<Self> {
        check_dim("observation values", operator.n_obs(), y.len())?;
        check_dim("observation errors", operator.n_obs(), errors.len())?;
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("observations"));
        }
        Ok(Self {
            y,
            cycle,
            operator,
            errors,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamLabel {
    NatureInit,
    ObsNoise,
    EnsembleInit,
    Gridpoint(u32),
}

impl StreamLabel {
    fn stream_id(self) -> u64 {
        match self {
            Self::NatureInit => 1,
            Self::ObsNoise => 2,
            Self::EnsembleInit => 3,
            Self::Gridpoint(k) => (1 << 32) | u64::from(k),
        }
    }
}

/// Labeled, seeded source of standard normal draws.
///
/// Each `(label, seed)` pair maps to its own ChaCha20 stream, so draws on one
/// label never shift another. Cloning captures the current position.
#[derive(Debug, Clone)]
pub struct SeededStream {
    label: StreamLabel,
    seed: u64,
    draws: u64,
    rng: ChaCha20Rng,
}

impl SeededStream {
    pub fn new(label: StreamLabel, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(label.stream_id());
        Self {
            label,
            seed,
            draws: 0,
            rng,
        }
    }

    pub fn label(&self) -> StreamLabel {
        self.label
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.draws += 1;
        StandardNormal.sample(&mut self.rng)
    }

    pub fn normal_vector(&mut self, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| self.standard_normal())
    }
}

/// `y = H x_t + ε` with `ε_i ~ N(0, r_i)` drawn from `stream`.
pub fn synthesize_observations(
    truth: &DVector<f64>,
    h: &Arc<ObsOperator>,
    r: &Arc<ObsErrorModel>,
    stream: &mut SeededStream,
    cycle: usize,
) -> Result<ObservationBatch> {
    check_dim("observation errors", h.n_obs(), r.len())?;
    let mut y = h.apply_vector(truth)?;
    for (yi, var) in y.iter_mut().zip(r.variances().iter()) {
        *yi += var.sqrt() * stream.standard_normal();
    }
    ObservationBatch::new(y, cycle, Arc::clone(h), Arc::clone(r))
}

/// One row of the observation CSV dump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub cycle: usize,
    pub obs_index: usize,
    pub value: f64,
}

pub fn write_observations_csv(path: &Path, batches: &[ObservationBatch]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["cycle", "obs_index", "value"])
        .map_err(csv_err)?;
    for batch in batches {
        for (obs_index, value) in batch.y.iter().enumerate() {
            w.write_record(&[
                batch.cycle.to_string(),
                obs_index.to_string(),
                value.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_observations_csv(path: &Path) -> Result<Vec<ObservationRecord>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|rec| rec.map_err(csv_err)).collect()
}

/// Groups CSV records back into batches sharing one operator and error model.
pub fn batches_from_records(
    records: &[ObservationRecord],
    h: &Arc<ObsOperator>,
    r: &Arc<ObsErrorModel>,
) -> Result<Vec<ObservationBatch>> {
    let mut out: Vec<ObservationBatch> = Vec::new();
    let mut start = 0;
    while start < records.len() {
        let cycle = records[start].cycle;
        let end = records[start..]
            .iter()
            .position(|rec| rec.cycle != cycle)
            .map_or(records.len(), |p| start + p);
        let mut y = DVector::zeros(h.n_obs());
        let mut seen = vec![false; h.n_obs()];
        for rec in &records[start..end] {
            if rec.obs_index >= h.n_obs() {
                return Err(Error::InvalidParameter(format!(
                    "obs_index {} out of range in cycle {cycle}",
                    rec.obs_index
                )));
            }
            y[rec.obs_index] = rec.value;
            seen[rec.obs_index] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidParameter(format!(
                "cycle {cycle} is missing observations"
            )));
        }
        out.push(ObservationBatch::new(y, cycle, Arc::clone(h), Arc::clone(r))?);
        start = end;
    }
    Ok(out)
}
