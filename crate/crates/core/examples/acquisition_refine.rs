//! Adaptive surrogate refinement: expected improvement for global
//! minimization, then expected feasibility for a contour search.

use uqkit::acquisition::{ei, eff, refine, AcquisitionSpec, Tau};
use uqkit::gpr::{FitOptions, GpModel};
use uqkit::kernels::KernelSpec;
use uqkit::numerics::{rng_from_seed, Matrix, Vector};

fn quartic(x: f64) -> f64 {
    x.powi(4) - 3.0 * x * x + x
}

fn main() -> uqkit::Result<()> {
    println!("EI(μ = f_min, σ = 1) = {:.6}", ei(0.0, 1.0, 0.0));
    println!("EFF(μ = e, σ = 1, τ = 2σ) = {:.6}", eff(0.0, 1.0, 0.0, 2.0));

    let candidates = Matrix::from_fn(401, 1, |i, _| -2.0 + 0.01 * i as f64);
    let x0 = [-1.7, 0.3, 1.8];
    let x = Matrix::from_column_slice(3, 1, &x0);
    let y = Vector::from_iterator(3, x0.iter().map(|&v| quartic(v)));
    let fit = FitOptions { pin_noise: true, restarts: 2, ..FitOptions::default() };
    let mut rng = rng_from_seed(1);
    let gp = GpModel::fit(x, y, KernelSpec::squared_exponential(1.0, 1.0), 1e-4, &fit, &mut rng)?;

    let oracle = |x: &[f64]| Ok::<f64, String>(quartic(x[0]));
    let run = refine(&gp, oracle, &AcquisitionSpec::Ei, &candidates, 12, &fit, &mut rng)?;
    println!("\nEI refinement on x⁴ − 3x² + x");
    for row in &run.trace {
        println!("  iter {:>2}: x = {:>6.2}, EI = {:.2e}, f = {:.4}", row.iteration, row.x[0], row.acquisition, row.oracle);
    }
    println!("best observed f = {:.4}", run.model.y_train().min());

    let spec = AcquisitionSpec::Eff { threshold: 0.0, tau: Tau::SigmaMultiple(2.0) };
    let run = refine(&gp, oracle, &spec, &candidates, 8, &fit, &mut rng)?;
    println!("\nEFF refinement towards the contour f(x) = 0");
    for row in &run.trace {
        println!("  iter {:>2}: x = {:>6.2}, EFF = {:.3}, f = {:.4}", row.iteration, row.x[0], row.acquisition, row.oracle);
    }
    Ok(())
}
