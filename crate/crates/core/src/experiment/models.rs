use crate::autodiff::{Graph, NodeId};
use crate::encoders::{ImageEncoderConfig, ImageSpine, TabularEncoderConfig, TabularSpine};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, LayerParams, Parameterized};
use crate::tensor::Tensor;

/// Single-process baseline: image spine, optionally a tabular spine, and a
/// linear softmax classifier over their concatenated features.
#[derive(Clone, Debug, PartialEq)]
pub struct CentralModel {
    pub image: ImageSpine,
    pub tabular: Option<TabularSpine>,
    pub classifier: LayerParams,
}

impl CentralModel {
    pub fn image_only(icfg: &ImageEncoderConfig, num_classes: usize, seed: u64) -> Result<Self> {
        Ok(CentralModel {
            image: ImageSpine::new(icfg, seed)?,
            tabular: None,
            classifier: LayerParams::linear("central.classifier", icfg.hidden, num_classes, seed),
        })
    }

    pub fn multimodal(
        icfg: &ImageEncoderConfig,
        tcfg: &TabularEncoderConfig,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(CentralModel {
            image: ImageSpine::new(icfg, seed)?,
            tabular: Some(TabularSpine::new(tcfg, seed)),
            classifier: LayerParams::linear("central.classifier", icfg.hidden + tcfg.hidden, num_classes, seed),
        })
    }

    /// Class probabilities and the bound parameters in [`Parameterized::layers`] order.
    pub fn forward(&self, g: &mut Graph, x_image: NodeId, x_tabular: Option<NodeId>) -> Result<(NodeId, Vec<Bound>)> {
        let (mut h, mut bound) = self.image.forward(g, x_image)?;
        match (&self.tabular, x_tabular) {
            (Some(spine), Some(xt)) => {
                let (ht, bt) = spine.forward(g, xt)?;
                h = g.concat(&[h, ht], 1)?;
                bound.extend(bt);
            }
            (None, _) => {}
            (Some(_), None) => return Err(Error::Contract("multimodal model needs tabular input".into())),
        }
        let bc = self.classifier.bind(g);
        let logits = nn::linear(g, h, &bc)?;
        bound.push(bc);
        Ok((g.softmax(logits, 1)?, bound))
    }

    /// One SGD step on a batch; returns the cross-entropy before the update.
    pub fn train_step(&mut self, x_image: &Tensor, x_tabular: &Tensor, labels: &Tensor, lr: f64) -> Result<f64> {
        let mut g = Graph::new();
        let (loss, bound) = self.loss_graph(&mut g, x_image, x_tabular, labels)?;
        let grads = g.backward(loss)?;
        let per_layer: Vec<Vec<Tensor>> = bound.iter().map(|b| b.grads(&grads)).collect();
        self.apply_sgd(&per_layer, lr)?;
        Ok(g.value(loss).item())
    }

    pub fn loss(&self, x_image: &Tensor, x_tabular: &Tensor, labels: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let (loss, _) = self.loss_graph(&mut g, x_image, x_tabular, labels)?;
        Ok(g.value(loss).item())
    }

    pub fn predict(&self, x_image: &Tensor, x_tabular: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let (xi, xt) = self.inputs(&mut g, x_image, x_tabular);
        let (p, _) = self.forward(&mut g, xi, xt)?;
        Ok(g.value(p).clone())
    }

    fn inputs(&self, g: &mut Graph, x_image: &Tensor, x_tabular: &Tensor) -> (NodeId, Option<NodeId>) {
        let xi = g.constant(x_image.clone());
        let xt = self.tabular.as_ref().map(|_| g.constant(x_tabular.clone()));
        (xi, xt)
    }

    fn loss_graph(&self, g: &mut Graph, x_image: &Tensor, x_tabular: &Tensor, labels: &Tensor) -> Result<(NodeId, Vec<Bound>)> {
        let (xi, xt) = self.inputs(g, x_image, x_tabular);
        let (p, bound) = self.forward(g, xi, xt)?;
        Ok((nn::cross_entropy(g, p, labels)?, bound))
    }
}

impl Parameterized for CentralModel {
    fn layers(&self) -> Vec<&LayerParams> {
        let mut v = self.image.layers();
        if let Some(t) = &self.tabular {
            v.extend(t.layers());
        }
        v.push(&self.classifier);
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut LayerParams> {
        let mut v = self.image.layers_mut();
        if let Some(t) = &mut self.tabular {
            v.extend(t.layers_mut());
        }
        v.push(&mut self.classifier);
        v
    }
}
