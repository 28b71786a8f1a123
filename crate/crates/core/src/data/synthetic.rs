use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::split::{split, Splits};
use super::{one_hot, ImageParty, LabelParty, TabularParty, VerticalDataset};

/// Parameters of the synthetic two-modality task.
///
/// Every sample has an image pattern `a` and a tabular cluster `c`. A
/// fraction `interaction_strength` of samples is labeled `(a + c) mod K`,
/// which neither modality determines alone; the rest have `a = c = label`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n: usize,
    pub k: usize,
    pub height: usize,
    pub width: usize,
    pub tabular_width: usize,
    pub interaction_strength: f64,
    /// Standard deviation of the Gaussian noise on pixels and features.
    pub noise: f64,
    pub seed: u64,
    pub split_fractions: [f64; 3],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 2000,
            k: 7,
            height: 28,
            width: 28,
            tabular_width: 20,
            interaction_strength: 0.5,
            noise: 0.1,
            seed: 0,
            split_fractions: [0.7, 0.15, 0.15],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.k)));
        }
        if self.n < self.k {
            return Err(Error::Config(format!("N = {} is smaller than K = {}", self.n, self.k)));
        }
        if !(0.0..=1.0).contains(&self.interaction_strength) {
            return Err(Error::Config(format!(
                "interaction strength {} outside [0, 1]",
                self.interaction_strength
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise level {} must be non-negative", self.noise)));
        }
        if self.height < 4 || self.width < 4 || self.tabular_width == 0 {
            return Err(Error::Config("image must be at least 4×4 and tabular width positive".into()));
        }
        Ok(())
    }
}

/// Per-sample generator state, kept for probes and export.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticLatents {
    pub pattern: Vec<usize>,
    pub cluster: Vec<usize>,
    pub interaction: Vec<bool>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<VerticalDataset> {
    spec.validate()?;
    let (n, k, h, w, p) = (spec.n, spec.k, spec.height, spec.width, spec.tabular_width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let classes: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_inter = (spec.interaction_strength * n as f64).round() as usize;
    let mut interaction = vec![false; n];
    for &i in &order[..n_inter] {
        interaction[i] = true;
    }
    let mut pattern = Vec::with_capacity(n);
    let mut cluster = Vec::with_capacity(n);
    for i in 0..n {
        let y = classes[i];
        if interaction[i] {
            let a = rng.gen_range(0..k);
            pattern.push(a);
            cluster.push((y + k - a) % k);
        } else {
            pattern.push(y);
            cluster.push(y);
        }
    }

    let templates: Vec<Vec<f64>> = (0..k).map(|a| image_template(a, k, h, w)).collect();
    let prototypes: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..p).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();

    let pixels = 3 * h * w;
    let mut images = Vec::with_capacity(n * pixels);
    let mut features = Vec::with_capacity(n * p);
    for i in 0..n {
        for &v in &templates[pattern[i]] {
            let e: f64 = StandardNormal.sample(&mut rng);
            images.push((v + spec.noise * e).clamp(0.0, 1.0));
        }
        for &v in &prototypes[cluster[i]] {
            let e: f64 = StandardNormal.sample(&mut rng);
            features.push(v + spec.noise * e);
        }
    }

    let ids: Vec<u32> = (0..n as u32).collect();
    let splits = if spec.split_fractions == [1.0, 0.0, 0.0] {
        Splits::all_train(n)
    } else {
        split(&classes, spec.split_fractions, spec.seed)?.splits
    };
    let class_names = if k == super::HAM_CLASSES.len() {
        super::HAM_CLASSES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..k).map(|c| format!("class{c}")).collect()
    };
    Ok(VerticalDataset {
        image: ImageParty {
            ids: ids.clone(),
            images: Tensor::new(vec![n, 3, h, w], images)?,
        },
        tabular: TabularParty {
            ids: ids.clone(),
            features: Tensor::new(vec![n, p], features)?,
            columns: (0..p).map(|j| format!("f{j}")).collect(),
        },
        labels: LabelParty {
            ids,
            labels: one_hot(&classes, k),
            class_names,
        },
        splits,
        latents: Some(SyntheticLatents {
            pattern,
            cluster,
            interaction,
        }),
        preprocessing: None,
    })
}

/// Gaussian blob on a ring, position and tint set by the pattern index.
fn image_template(a: usize, k: usize, h: usize, w: usize) -> Vec<f64> {
    let angle = 2.0 * PI * a as f64 / k as f64;
    let (cy, cx) = (
        (h as f64 - 1.0) / 2.0 + 0.3 * h as f64 * angle.sin(),
        (w as f64 - 1.0) / 2.0 + 0.3 * w as f64 * angle.cos(),
    );
    let sigma = 0.12 * h.min(w) as f64;
    let mut out = Vec::with_capacity(3 * h * w);
    for ch in 0..3 {
        let tint = if a % 3 == ch { 0.9 } else { 0.5 };
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                out.push(0.1 + tint * (-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
    }
    out
}
