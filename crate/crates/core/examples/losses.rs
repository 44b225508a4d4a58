//! Evaluates each loss term on small hand-made tensors.

use hft::losses::*;
use hft::net::BevFeatureSet;
use hft::Tensor;

fn main() -> hft::Result<()> {
    let scores = Tensor::from_vec(&[2, 1, 4], vec![0.9, 0.2, 0.6, 0.1, 0.3, 0.8, 0.05, 0.4])?;
    let labels = Tensor::from_vec(&[2, 1, 4], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0])?;
    let lw = LossWeights::with_class_weights(vec![0.8, 1.2]);

    let s = semantic_loss(&scores, &labels, None, &lw.class_weights)?;
    println!("semantic {:.5} ({} positives, {} mined negatives)", s.value, s.n_pos, s.n_mined);
    let (u, _) = uncertainty_loss(&scores)?;
    println!("uncertainty {u:.5}");

    let ramp = |k: f64| Tensor::from_vec(&[3, 2, 4], (0..24).map(|i| (i as f64 * k).sin()).collect());
    let geo = BevFeatureSet::new(vec![ramp(0.7)?, ramp(1.3)?])?;
    let glo = BevFeatureSet::new(vec![ramp(0.9)?, ramp(1.1)?])?;
    for kind in [Distance::L2, Distance::L1, Distance::Kl] {
        let m = mutual_learning_loss(&geo, &glo, &lw, kind)?;
        println!("mutual ({}) {:.5}", kind.name(), m.value);
    }
    let m = mutual_learning_loss(&geo, &glo, &lw, Distance::L2)?.value;
    println!("total {:.5}", total_loss(s.value, u, m, &lw)?);
    Ok(())
}
