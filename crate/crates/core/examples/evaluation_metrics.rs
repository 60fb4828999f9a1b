//! Scoring predictive uncertainty: calibration curve, ECE, miscalibration
//! area, u-pooling, NLL, sparsification and isotonic recalibration. The
//! predictions are deliberately overconfident by a factor of two in σ.

use uqkit::evaluation::{
    default_levels, ece, isotonic_recalibrate, miscalibration_area, nll, regression_calibration, sparsification,
    u_pool, CalibrationMode, SparsificationOptions, Weighting,
};
use uqkit::numerics::{rng_from_seed, standard_normal};
use uqkit::GaussianPrediction;
use rand::Rng as _;

fn main() -> uqkit::Result<()> {
    let mut rng = rng_from_seed(9);
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..2000 {
        let mean = rng.random_range(-3.0..3.0);
        let true_std: f64 = rng.random_range(0.1..1.0);
        targets.push(mean + true_std * standard_normal(&mut rng));
        preds.push(GaussianPrediction::total_only(mean, (0.5 * true_std).powi(2)));
    }
    let (val, test) = (0..1000, 1000..2000);

    let levels = default_levels(11);
    let curve = regression_calibration(&preds[test.clone()], &targets[test.clone()], &levels, CalibrationMode::TwoSided)?;
    println!("ECE {:.3}, miscalibration area {:.3}", ece(&curve, Weighting::Uniform), miscalibration_area(&curve));
    let (_, area) = u_pool(&preds[test.clone()], &targets[test.clone()])?;
    println!("u-pool area {area:.3}");
    println!("NLL {:.3} (with the ½log 2π constant)", nll(&preds[test.clone()], &targets[test.clone()], true)?);

    let abs_err: Vec<f64> = preds[test.clone()].iter().zip(&targets[test.clone()]).map(|(p, y)| (p.mean - y).abs()).collect();
    let sigma: Vec<f64> = preds[test.clone()].iter().map(GaussianPrediction::std).collect();
    let sp = sparsification(&sigma, &abs_err, &SparsificationOptions::default())?;
    println!("sparsification: AUSE {:.4}, AURG {:.4}", sp.ause, sp.aurg);

    let map = isotonic_recalibrate(&preds[val.clone()], &targets[val])?;
    let after = map.calibration(&preds[test.clone()], &targets[test.clone()], &levels, CalibrationMode::TwoSided)?;
    println!("after isotonic recalibration on held-out data: ECE {:.3}", ece(&after, Weighting::Uniform));
    println!("\nlevel  before  after");
    for ((c, b), a) in levels.iter().zip(&curve.observed).zip(&after.observed) {
        println!("{c:>5.1} {:>7.3} {:>6.3}", b.unwrap_or(f64::NAN), a.unwrap_or(f64::NAN));
    }
    let (lo, hi) = map.interval(&preds[1000], 0.9);
    println!("\nrecalibrated 90% interval for the first test point: [{lo:.3}, {hi:.3}]");
    Ok(())
}
