//! Three ways to approximate a Bayesian neural network posterior on the
//! same small regression problem: random-walk Metropolis-Hastings,
//! mean-field variational inference and Stein variational gradient descent.

use uqkit::bnn::{
    mfvi_fit, mh_sample, posterior_predict, svgd_fit, MfviConfig, MhOptions, NetworkPosterior, Posterior,
    PredictiveMode, SvgdConfig,
};
use uqkit::data::{gen_toy_1d, standardize};
use uqkit::nnet::{Activation, Network, NetworkSpec, OutputKind, ResNetOptions};
use uqkit::numerics::{rng_from_seed, Matrix};
use uqkit::GaussianPrediction;

fn show(name: &str, preds: &[GaussianPrediction], probes: &Matrix) {
    let cells: Vec<String> = preds
        .iter()
        .enumerate()
        .map(|(i, p)| format!("x={:>5.2}: {:>6.2} ± {:.2}", probes[(i, 0)], p.mean, p.std()))
        .collect();
    println!("{name:>5}  {}", cells.join("   "));
}

fn main() -> uqkit::Result<()> {
    let raw = gen_toy_1d(30, (-3.0, 3.0), 0.1, 4)?;
    let (ds, _) = standardize(&raw)?;
    let spec = NetworkSpec::resnet(
        1,
        &ResNetOptions {
            width: 8,
            blocks: 1,
            activation: Activation::Tanh,
            output: OutputKind::Scalar,
            ..ResNetOptions::default()
        },
    );
    let net = Network::new(spec, 7)?;
    let noise = 0.1;
    let post = NetworkPosterior::new(net.clone(), ds.x.clone(), ds.y.clone(), 1.0, noise)?;
    println!("{} network parameters, {} training points (standardized)", net.params().len(), ds.len());

    // Standardized inputs: 0 sits inside the data, ±4 well outside it.
    let probes = Matrix::from_column_slice(3, 1, &[-4.0, 0.0, 4.0]);

    let opts = MhOptions { proposal_std: 0.02, adapt_steps: 2_000, thin: 10 };
    let chain = mh_sample(&Posterior(&post), net.params(), 20_000, &opts, &mut rng_from_seed(1))?;
    let tail = chain.samples.rows(chain.samples.nrows() / 2, chain.samples.nrows() / 2).into_owned();
    println!("MH acceptance rate {:.2}, {} kept samples", chain.acceptance_rate, tail.nrows());
    show("MH", &posterior_predict(&net, &tail, &probes, noise, PredictiveMode::Predictive)?, &probes);

    let q = mfvi_fit(&post, net.params(), &MfviConfig { epochs: 1500, ..MfviConfig::default() }, &mut rng_from_seed(2))?;
    println!("MFVI final ELBO estimate {:.1}", q.elbo_history.last().copied().unwrap_or(f64::NAN));
    let draws = q.sample(200, &mut rng_from_seed(3));
    show("MFVI", &posterior_predict(&net, &draws, &probes, noise, PredictiveMode::Predictive)?, &probes);

    let particles = svgd_fit(&Posterior(&post), net.params(), &SvgdConfig::default(), &mut rng_from_seed(4))?;
    show("SVGD", &posterior_predict(&net, &particles, &probes, noise, PredictiveMode::Predictive)?, &probes);
    Ok(())
}
