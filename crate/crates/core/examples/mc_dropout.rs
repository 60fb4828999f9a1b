//! Monte Carlo dropout: a residual network with dropout after each block,
//! trained on Gaussian NLL and queried with dropout left on.

use uqkit::bnn::mc_dropout_predict;
use uqkit::data::{gen_toy_1d, standardize};
use uqkit::nnet::{Loss, Network, NetworkSpec, ResNetOptions, TrainConfig};
use uqkit::numerics::{rng_from_seed, Matrix};

fn main() -> uqkit::Result<()> {
    let raw = gen_toy_1d(60, (-3.0, 3.0), 0.1, 5)?;
    let (ds, _) = standardize(&raw)?;
    let spec = NetworkSpec::resnet(1, &ResNetOptions { width: 32, blocks: 2, dropout_rate: Some(0.1), ..ResNetOptions::default() });
    let mut net = Network::new(spec, 11)?;
    let cfg = TrainConfig { epochs: 600, learning_rate: 3e-3, loss: Loss::Nll, seed: 12, ..TrainConfig::default() };
    let report = net.train(&ds.x, &ds.y, &cfg)?;
    println!(
        "loss {:.3} -> {:.3} after {} epochs",
        report.loss_history[0],
        report.loss_history.last().unwrap(),
        report.loss_history.len() - 1
    );

    let probes = Matrix::from_column_slice(5, 1, &[-4.0, -1.0, 0.0, 1.0, 4.0]);
    let preds = mc_dropout_predict(&net, &probes, 200, &mut rng_from_seed(13))?;
    println!("\n     x    mean  aleatory σ  epistemic σ");
    for (i, p) in preds.iter().enumerate() {
        println!(
            "{:>6.2} {:>7.3} {:>11.3} {:>12.3}",
            probes[(i, 0)],
            p.mean,
            p.variance_aleatory.sqrt(),
            p.variance_epistemic.sqrt()
        );
    }
    Ok(())
}
