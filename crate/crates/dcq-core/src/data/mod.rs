//! Dataset ingestion, synthetic data generation, checkpoint persistence, and
//! metrics emission.

mod checkpoint;
mod metrics;
mod mnist;
mod synthetic;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Metadata, CHECKPOINT_VERSION};
pub use metrics::{read_metrics, write_metrics};
pub use mnist::load_mnist_idx;
pub use synthetic::{gaussian_blobs, random_chain_net, random_net_teacher, BlobsParams, ChainNetParams, RandomNetParams};

use serde::{Deserialize, Serialize};

use crate::error::{DcqError, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Labeled inputs, batched along the leading axis.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl<T: Element> Dataset<T> {
    pub fn new(
        inputs: Tensor<T>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if inputs.batch_size() != labels.len() {
            return Err(DcqError::Shape(format!(
                "{} inputs vs {} labels",
                inputs.batch_size(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(DcqError::Empty("dataset with no items".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DcqError::Config(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { inputs, labels, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `n` items (or all of them if fewer).
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let inputs = crate::network::slice_batch(&self.inputs, 0, n)?;
        Self::new(inputs, self.labels[..n].to_vec(), self.num_classes, self.split)
    }
}
