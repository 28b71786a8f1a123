use crate::autodiff::Graph;
use crate::encoders::ClientEncoder;
use crate::error::Result;
use crate::fusion::ServerModel;
use crate::tensor::Tensor;

/// One SGD step of the same model built as a single graph, with no
/// parties, threads or serialization. Returns the loss before the update.
pub fn monolithic_step(
    image: &mut dyn ClientEncoder,
    tabular: &mut dyn ClientEncoder,
    server: &mut dyn ServerModel,
    x_image: &Tensor,
    x_tabular: &Tensor,
    labels: &Tensor,
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let xi = g.constant(x_image.clone());
    let xt = g.constant(x_tabular.clone());
    let img = image.forward(&mut g, xi)?;
    let tab = tabular.forward(&mut g, xt)?;
    let out = server.forward(&mut g, img.nodes, tab.nodes, labels)?;
    let grads = g.backward(out.loss)?;
    let collect = |bound: &[crate::nn::Bound]| bound.iter().map(|b| b.grads(&grads)).collect::<Vec<_>>();
    let (gi, gt, gs) = (collect(&img.bound), collect(&tab.bound), collect(&out.bound));
    image.apply_sgd(&gi, lr)?;
    tabular.apply_sgd(&gt, lr)?;
    server.apply_sgd(&gs, lr)?;
    Ok(g.value(out.loss).item())
}
