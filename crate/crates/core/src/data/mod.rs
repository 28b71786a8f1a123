//! Vertically partitioned datasets: one table per party, aligned on sample id.

mod export;
mod ham;
mod split;
mod synthetic;

pub use export::export_ham_layout;
pub use ham::{load_ham_style, HamOptions, Preprocessing, HAM_CLASSES};
pub use split::{split, Splits, SplitOutcome};
pub use synthetic::{generate_synthetic, SyntheticLatents, SyntheticSpec};

use crate::error::{Error, Result};
use crate::federation::FeatureStore;
use crate::tensor::Tensor;

/// Images `[N, 3, H, W]` in `[0, 1]`, held by the image client only.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageParty {
    pub ids: Vec<u32>,
    pub images: Tensor,
}

/// Feature rows `[N, p]`, held by the tabular client only.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularParty {
    pub ids: Vec<u32>,
    pub features: Tensor,
    pub columns: Vec<String>,
}

/// One-hot labels `[N, K]`, held by the server only.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelParty {
    pub ids: Vec<u32>,
    pub labels: Tensor,
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerticalDataset {
    pub image: ImageParty,
    pub tabular: TabularParty,
    pub labels: LabelParty,
    pub splits: Splits,
    /// Generator state for synthetic data; `None` for loaded data.
    pub latents: Option<SyntheticLatents>,
    /// Fitted statistics for loaded data.
    pub preprocessing: Option<Preprocessing>,
}

impl VerticalDataset {
    pub fn len(&self) -> usize {
        self.labels.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> &[u32] {
        &self.labels.ids
    }

    pub fn num_classes(&self) -> usize {
        self.labels.labels.shape()[1]
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.image.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn tabular_width(&self) -> usize {
        self.tabular.features.shape()[1]
    }

    /// Class index of every row.
    pub fn class_indices(&self) -> Vec<usize> {
        self.labels.labels.argmax_rows()
    }

    /// Sample ids at the given row positions.
    pub fn ids_at(&self, rows: &[usize]) -> Vec<u32> {
        rows.iter().map(|&r| self.labels.ids[r]).collect()
    }

    /// Checks id alignment, one-hot labels and split coverage.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.image.ids != self.labels.ids || self.tabular.ids != self.labels.ids {
            return Err(Error::Alignment("party id lists differ".into()));
        }
        if self.image.images.rank() != 4
            || self.image.images.shape()[0] != n
            || self.image.images.shape()[1] != 3
        {
            return Err(Error::Validation(format!("image table has shape {:?}", self.image.images.shape())));
        }
        if self.tabular.features.rank() != 2 || self.tabular.features.shape()[0] != n {
            return Err(Error::Validation(format!(
                "tabular table has shape {:?}",
                self.tabular.features.shape()
            )));
        }
        if self.tabular.columns.len() != self.tabular_width() {
            return Err(Error::Validation("tabular column names do not match width".into()));
        }
        crate::nn::validate_one_hot(&self.labels.labels)?;
        self.splits.validate(n)
    }

    pub fn image_store(&self) -> Result<FeatureStore> {
        FeatureStore::new(self.image.ids.clone(), self.image.images.clone())
    }

    pub fn tabular_store(&self) -> Result<FeatureStore> {
        FeatureStore::new(self.tabular.ids.clone(), self.tabular.features.clone())
    }

    pub fn label_store(&self) -> Result<FeatureStore> {
        FeatureStore::new(self.labels.ids.clone(), self.labels.labels.clone())
    }

    /// Hands each party its own table and nothing else.
    pub fn into_parties(self) -> (ImageParty, TabularParty, LabelParty) {
        (self.image, self.tabular, self.labels)
    }
}

pub(crate) fn one_hot(classes: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[classes.len(), k]);
    for (i, &c) in classes.iter().enumerate() {
        t.data_mut()[i * k + c] = 1.0;
    }
    t
}
