use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

/// Where the points of a bag came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Synthetic { seed: u64, index: u64 },
    StockDay { ticker: String, date: String },
    Pooled { parts: usize },
    Subset { parent: Box<Provenance>, part: usize },
}

/// M paired points `(x_k, y_k)` with `x_k` in R^W.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBag {
    pub inputs: Array2<f64>,
    pub targets: Vec<f64>,
    pub provenance: Provenance,
}

impl SampleBag {
    pub fn new(inputs: Array2<f64>, targets: Vec<f64>, provenance: Provenance) -> Self {
        assert_eq!(inputs.nrows(), targets.len(), "inputs and targets disagree on M");
        Self { inputs, targets, provenance }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn width(&self) -> usize {
        self.inputs.ncols()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> SampleBag {
        SampleBag {
            inputs: self.inputs.select(Axis(0), indices),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Concatenates bags of equal width.
    pub fn concat(bags: &[SampleBag]) -> Option<SampleBag> {
        let first = bags.first()?;
        let views: Vec<_> = bags.iter().map(|b| b.inputs.view()).collect();
        let inputs = ndarray::concatenate(Axis(0), &views).ok()?;
        let targets = bags.iter().flat_map(|b| b.targets.iter().copied()).collect();
        let provenance = if bags.len() == 1 {
            first.provenance.clone()
        } else {
            Provenance::Pooled { parts: bags.len() }
        };
        Some(SampleBag { inputs, targets, provenance })
    }
}
