//! Exact GP regression on the eight-point sine toy: hand-set versus
//! marginal-likelihood hyperparameters, then calibration on a dense test set.

use uqkit::data::toy_1d_walkthrough;
use uqkit::evaluation::{default_levels, ece, regression_calibration, CalibrationMode, Weighting};
use uqkit::gpr::{FitOptions, GpModel};
use uqkit::kernels::KernelSpec;
use uqkit::numerics::{rng_from_seed, Matrix};

fn main() -> uqkit::Result<()> {
    let (train, test) = toy_1d_walkthrough(0)?;
    let kernel = KernelSpec::squared_exponential(1.0, 1.0);
    let mut rng = rng_from_seed(1);

    let hand = GpModel::fit(train.x.clone(), train.y.clone(), kernel.clone(), 0.1, &FitOptions::fixed(), &mut rng)?;
    let mle = GpModel::fit(train.x.clone(), train.y.clone(), kernel, 0.1, &FitOptions::default(), &mut rng)?;

    for (name, gp) in [("hand-set", &hand), ("optimized", &mle)] {
        let k = gp.kernel();
        println!(
            "{name:>9}: l = {:.3}, σf = {:.3}, σε = {:.3}, log marginal likelihood = {:.3}",
            k.length_scales[0],
            k.sigma_f,
            gp.noise_std(),
            gp.log_marginal_likelihood()
        );
    }

    let probes = Matrix::from_column_slice(5, 1, &[-4.5, -2.0, 0.5, 3.0, 4.5]);
    println!("\n     x    mean   ±2σ (latent)   ±2σ (noisy)");
    let latent = hand.predict(&probes, false)?;
    let noisy = hand.predict(&probes, true)?;
    for i in 0..probes.nrows() {
        println!(
            "{:>6.2} {:>7.3} {:>13.3} {:>13.3}",
            probes[(i, 0)],
            latent[i].mean,
            2.0 * latent[i].std(),
            2.0 * noisy[i].std()
        );
    }

    let preds = hand.predict(&test.x, true)?;
    let targets: Vec<f64> = test.y.iter().copied().collect();
    let curve = regression_calibration(&preds, &targets, &default_levels(11), CalibrationMode::TwoSided)?;
    println!("\nECE over {} test points: {:.3}", targets.len(), ece(&curve, Weighting::Uniform));
    for (c, o) in curve.levels.iter().zip(&curve.observed) {
        println!("  expected {c:.1}  observed {:.2}", o.unwrap_or(f64::NAN));
    }
    Ok(())
}
