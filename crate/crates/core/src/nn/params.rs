//! Named parameter storage, seeded initialisation and a serialisable snapshot form.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Matrix,
    trainable: bool,
}

/// All parameters of one model, addressed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    /// Glorot-uniform initialised `rows x cols` matrix.
    pub fn push_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound));
        self.push(name, value, true)
    }

    /// Uniform `[-scale, scale]` matrix.
    pub fn push_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut R,
    ) -> ParamId {
        let value = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale));
        self.push(name, value, true)
    }

    pub fn push_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.push(name, Array2::zeros((rows, cols)), true)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn to_snapshot(&self) -> Vec<ParamSnapshot> {
        self.params
            .iter()
            .map(|p| ParamSnapshot {
                name: p.name.clone(),
                rows: p.value.nrows(),
                cols: p.value.ncols(),
                data: p.value.iter().cloned().collect(),
            })
            .collect()
    }

    /// Overwrites values from a snapshot. Every parameter must be present with a
    /// matching shape.
    pub fn load_snapshot(&mut self, snapshot: &[ParamSnapshot]) -> Result<(), String> {
        if snapshot.len() != self.params.len() {
            return Err(format!(
                "expected {} parameters, checkpoint has {}",
                self.params.len(),
                snapshot.len()
            ));
        }
        for p in &mut self.params {
            let snap = snapshot
                .iter()
                .find(|s| s.name == p.name)
                .ok_or_else(|| format!("parameter {} missing from checkpoint", p.name))?;
            if (snap.rows, snap.cols) != p.value.dim() || snap.data.len() != snap.rows * snap.cols {
                return Err(format!(
                    "parameter {} has shape {}x{} in checkpoint, model expects {:?}",
                    p.name, snap.rows, snap.cols, p.value.dim()
                ));
            }
            p.value = Array2::from_shape_vec((snap.rows, snap.cols), snap.data.clone())
                .map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}
