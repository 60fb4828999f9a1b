//! Distance-aware deterministic models on the 2D toy problem: SNGP with a
//! random Fourier feature head, and an exact GP on learned features.

use uqkit::data::{gen_toy_2d_clusters, gen_toy_2d_ood, Standardization};
use uqkit::gpr::FitOptions;
use uqkit::kernels::KernelSpec;
use uqkit::nnet::{Loss, Network, NetworkSpec, ResNetOptions, TrainConfig};
use uqkit::numerics::rng_from_seed;
use uqkit::sngp::{extractor_lipschitz_bound, DnnGpr, SngpConfig, SngpModel, DEFAULT_SPECTRAL_BOUND};
use uqkit::GaussianPrediction;

fn mean_std(preds: &[GaussianPrediction]) -> f64 {
    preds.iter().map(GaussianPrediction::std).sum::<f64>() / preds.len() as f64
}

fn main() -> uqkit::Result<()> {
    let train = gen_toy_2d_clusters(200, 1, false)?;
    let held_out = gen_toy_2d_clusters(50, 2, false)?;
    let ood = gen_toy_2d_ood(100, 3, false)?;
    let st = Standardization::fit(&train)?;
    let z = st.apply(&train)?;
    let (zi, zo) = (st.apply_x(&held_out.x)?, st.apply_x(&ood.x)?);

    let spec = NetworkSpec::resnet(
        2,
        &ResNetOptions {
            width: 32,
            blocks: 2,
            spectral_bound: Some(DEFAULT_SPECTRAL_BOUND),
            output: uqkit::nnet::OutputKind::Scalar,
            ..ResNetOptions::default()
        },
    );
    if let Some(bound) = extractor_lipschitz_bound(&spec) {
        println!("extractor Lipschitz bound: {bound:.3}");
    }

    let cfg = SngpConfig {
        n_features: 512,
        train: TrainConfig { epochs: 100, learning_rate: 3e-3, loss: Loss::Mse, ..TrainConfig::default() },
        ..SngpConfig::default()
    };
    let sngp = SngpModel::fit(&spec, &z.x, &z.y, &cfg, 31)?;
    println!(
        "SNGP     mean std: held-out {:.3}, OOD {:.3}",
        mean_std(&sngp.predict(&zi)?),
        mean_std(&sngp.predict(&zo)?)
    );

    let mut net = Network::new(spec, 32)?;
    net.train(&z.x, &z.y, &TrainConfig { epochs: 100, learning_rate: 3e-3, loss: Loss::Mse, ..TrainConfig::default() })?;
    let fit = FitOptions { restarts: 1, max_iters: 100, ..FitOptions::default() };
    let dkl = DnnGpr::fit(net, &z.x, &z.y, KernelSpec::squared_exponential(1.0, 1.0), 0.1, &fit, &mut rng_from_seed(33))?;
    println!(
        "DNN-GPR  mean std: held-out {:.3}, OOD {:.3}",
        mean_std(&dkl.predict(&zi, true)?),
        mean_std(&dkl.predict(&zo, true)?)
    );
    Ok(())
}
