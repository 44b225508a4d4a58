//! Compares the backward pass of a small hybrid model against central
//! differences on a handful of parameters.

use hft::autograd::Graph;
use hft::geometry::{BevGridSpec, CameraIntrinsics};
use hft::losses::{objective, LossWeights, SchemeConfig, Targets};
use hft::net::{Mode, Model, ModelConfig};
use hft::Tensor;

fn loss(model: &Model<f64>, intr: &CameraIntrinsics, image: &Tensor<f64>, labels: &Tensor<f64>, valid: &[bool]) -> hft::Result<(f64, hft::autograd::ParamGrads<f64>)> {
    let rows: Vec<usize> = (0..model.grid.extents.len()).map(|e| model.grid.extent_depth_cells(e)).collect();
    let mut g = Graph::new(&model.params);
    let fwd = model.forward_graph(&mut g, image, intr, Mode::Hybrid)?;
    let targets = Targets { labels, validity: valid };
    let lw = LossWeights::with_class_weights(vec![1.0, 1.0]);
    let (node, parts) = objective(&mut g, &fwd, &targets, &lw, &SchemeConfig::default(), &rows)?;
    Ok((parts.total, g.backward(node)?.into_param_grads(&model.params)))
}

fn main() -> hft::Result<()> {
    let intr = CameraIntrinsics::new(16.0, 16.0, 16.0, 10.0, 1.6, 32, 32)?;
    let grid = BevGridSpec::with_extent_cells(8, 1.0, 1.0, &[2, 2, 4])?;
    let config = ModelConfig {
        num_classes: 2,
        encoder_channels: vec![4, 4, 4],
        bev_channels: 4,
        fused_channels: 4,
        decoder_channels: 4,
        ..ModelConfig::default()
    };
    let mut model = Model::<f64>::new(config, grid.clone(), &intr, 1)?;
    let image = Tensor::from_vec(&[3, 32, 32], (0..3 * 32 * 32).map(|i| ((i * 37) % 101) as f64 / 100.0).collect())?;
    let labels = Tensor::from_vec(&[2, 8, 8], (0..128).map(|i| if i % 7 == 0 { 1.0 } else { 0.0 }).collect())?;
    let valid = grid.frustum_mask(&intr);

    let (_, grads) = loss(&model, &intr, &image, &labels, &valid)?;
    let h = 1e-6;
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids.into_iter().step_by(3) {
        let orig = model.params.get(id).data()[0];
        model.params.get_mut(id).data_mut()[0] = orig + h;
        let up = loss(&model, &intr, &image, &labels, &valid)?.0;
        model.params.get_mut(id).data_mut()[0] = orig - h;
        let down = loss(&model, &intr, &image, &labels, &valid)?.0;
        model.params.get_mut(id).data_mut()[0] = orig;
        let analytic = grads.get(id).map_or(0.0, |t| t.data()[0]);
        println!(
            "{:<24} analytic {analytic:+.6e} numeric {:+.6e}",
            model.params.name(id),
            (up - down) / (2.0 * h)
        );
    }
    Ok(())
}
