//! Gaussian process regression with an anisotropic squared-exponential
//! kernel, one independent model per spatial axis of the handover location.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INPUT_DIM: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparameters {
    pub signal_variance: f64,
    pub length_scales: [f64; INPUT_DIM],
    pub noise_variance: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self { signal_variance: 0.05, length_scales: [0.3, 0.3, 0.3, 0.5, 0.5, 0.5], noise_variance: 1e-4 }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| Error::Validation { field: field.into(), message: message.into() };
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return Err(bad("signal_variance", "must be positive"));
        }
        if !self.length_scales.iter().all(|l| *l > 0.0 && l.is_finite()) {
            return Err(bad("length_scales", "must be positive"));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(bad("noise_variance", "must be non-negative"));
        }
        Ok(())
    }

    pub fn kernel(&self, a: &[f64; INPUT_DIM], b: &[f64; INPUT_DIM]) -> f64 {
        let mut d2 = 0.0;
        for k in 0..INPUT_DIM {
            let d = (a[k] - b[k]) / self.length_scales[k];
            d2 += d * d;
        }
        self.signal_variance * (-0.5 * d2).exp()
    }
}

/// Training inputs (hand position and velocity) with one scalar target each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<[f64; INPUT_DIM]>,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn new(inputs: Vec<[f64; INPUT_DIM]>, targets: Vec<f64>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::InvalidModel("dataset is empty".into()));
        }
        if inputs.len() != targets.len() {
            return Err(Error::DimensionMismatch { expected: inputs.len(), got: targets.len() });
        }
        let finite = inputs.iter().flatten().chain(targets.iter()).all(|x| x.is_finite());
        if !finite {
            return Err(Error::InvalidModel("dataset contains non-finite values".into()));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

pub fn kernel_matrix(hp: &Hyperparameters, inputs: &[[f64; INPUT_DIM]]) -> DMatrix<f64> {
    let n = inputs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = hp.signal_variance;
        for j in 0..i {
            let v = hp.kernel(&inputs[i], &inputs[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// A fitted single-output GP. Immutable after [`fit`].
#[derive(Debug, Clone)]
pub struct TrainedModel {
    data: Dataset,
    hp: Hyperparameters,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

pub fn fit(data: Dataset, hp: Hyperparameters) -> Result<TrainedModel> {
    hp.validate()?;
    let mut k = kernel_matrix(&hp, &data.inputs);
    for i in 0..data.len() {
        k[(i, i)] += hp.noise_variance;
    }
    let chol = Cholesky::new(k).ok_or(Error::NotPositiveDefinite)?;
    if chol.l_dirty().diagonal().iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(Error::NotPositiveDefinite);
    }
    let alpha = chol.solve(&DVector::from_column_slice(&data.targets));
    Ok(TrainedModel { data, hp, chol, alpha })
}

impl TrainedModel {
    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.hp
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Lower-triangular factor of `K + noise * I`.
    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    fn k_test(&self, x: &[f64; INPUT_DIM]) -> DVector<f64> {
        DVector::from_iterator(self.data.len(), self.data.inputs.iter().map(|xi| self.hp.kernel(x, xi)))
    }

    /// Predictive mean and variance at `x`.
    pub fn predict(&self, x: &[f64; INPUT_DIM]) -> (f64, f64) {
        let k = self.k_test(x);
        let mean = k.dot(&self.alpha);
        let mut v = k;
        let solved = self.chol.l_dirty().solve_lower_triangular_mut(&mut v);
        debug_assert!(solved);
        let var = (self.hp.signal_variance - v.norm_squared()).clamp(0.0, self.hp.signal_variance);
        (mean, var)
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.data.len() as f64;
        let y = DVector::from_column_slice(&self.data.targets);
        let log_det: f64 = self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        -0.5 * y.dot(&self.alpha) - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Hand observations paired with the handover location they led to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub inputs: Vec<[f64; INPUT_DIM]>,
    pub goals: Vec<[f64; 3]>,
}

pub const TRAINING_HEADER: [&str; 9] = ["px", "py", "pz", "vx", "vy", "vz", "gx", "gy", "gz"];

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Dataset for one spatial axis (0 = x, 1 = y, 2 = z).
    pub fn axis(&self, j: usize) -> Result<Dataset> {
        Dataset::new(self.inputs.clone(), self.goals.iter().map(|g| g[j]).collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        w.write_record(TRAINING_HEADER).map_err(|e| Error::Io(e.to_string()))?;
        for (x, g) in self.inputs.iter().zip(&self.goals) {
            let row: Vec<String> = x.iter().chain(g.iter()).map(|v| format!("{v:?}")).collect();
            w.write_record(&row).map_err(|e| Error::Io(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let header = r.headers().map_err(|e| Error::Io(e.to_string()))?.clone();
        if header.iter().collect::<Vec<_>>() != TRAINING_HEADER {
            return Err(Error::Parse { location: format!("{}:1", path.display()), message: "unexpected header".into() });
        }
        let mut set = TrainingSet { inputs: Vec::new(), goals: Vec::new() };
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::Io(e.to_string()))?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse { location: format!("{}:{}", path.display(), line + 2), message: e.to_string() })?;
            if vals.len() != 9 {
                return Err(Error::Parse {
                    location: format!("{}:{}", path.display(), line + 2),
                    message: format!("expected 9 columns, got {}", vals.len()),
                });
            }
            set.inputs.push([vals[0], vals[1], vals[2], vals[3], vals[4], vals[5]]);
            set.goals.push([vals[6], vals[7], vals[8]]);
        }
        Ok(set)
    }
}

/// Three per-axis models sharing hyperparameters.
#[derive(Debug, Clone)]
pub struct HandoverModel {
    pub axes: [TrainedModel; 3],
}

impl HandoverModel {
    pub fn fit(set: &TrainingSet, hp: &Hyperparameters) -> Result<Self> {
        Ok(Self { axes: [fit(set.axis(0)?, hp.clone())?, fit(set.axis(1)?, hp.clone())?, fit(set.axis(2)?, hp.clone())?] })
    }

    pub fn training_set(&self) -> TrainingSet {
        let d = self.axes[0].dataset();
        let goals = (0..d.len())
            .map(|i| [self.axes[0].data.targets[i], self.axes[1].data.targets[i], self.axes[2].data.targets[i]])
            .collect();
        TrainingSet { inputs: d.inputs.clone(), goals }
    }
}

/// On-disk form of a trained model; the factorization is rebuilt on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub hyperparameters: Hyperparameters,
    pub training: TrainingSet,
}

impl SavedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self).map_err(|e| Error::Io(e.to_string()))?;
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&s).map_err(|e| Error::Parse { location: path.display().to_string(), message: e.to_string() })
    }

    pub fn fit(&self) -> Result<HandoverModel> {
        HandoverModel::fit(&self.training, &self.hyperparameters)
    }
}
