//! Kernel families side by side, prior function draws and posterior draws
//! through three noise-free observations.

use uqkit::gpr::{sample_prior, GpModel};
use uqkit::kernels::KernelSpec;
use uqkit::numerics::{rng_from_seed, Matrix, Vector};

fn main() -> uqkit::Result<()> {
    let kernels = [
        ("squared exponential", KernelSpec::squared_exponential(1.0, 1.0)),
        ("matern 5/2", KernelSpec::matern(2.5, 1.0, 1.0)?),
        ("matern 3/2", KernelSpec::matern(1.5, 1.0, 1.0)?),
        ("absolute exponential", KernelSpec::absolute_exponential(1.0, 1.0)),
    ];

    println!("k(0, d) for l = 1, σf = 1");
    println!("{:>22} {:>8} {:>8} {:>8} {:>8}", "", "d=0.25", "d=1", "d=2", "d=4");
    for (name, k) in &kernels {
        let row: Vec<String> = [0.25, 1.0, 2.0, 4.0]
            .iter()
            .map(|&d| format!("{:>8.4}", k.eval(&[0.0], &[d]).unwrap()))
            .collect();
        println!("{name:>22} {}", row.join(" "));
    }

    let grid = Matrix::from_fn(9, 1, |i, _| -4.0 + i as f64);
    let mut rng = rng_from_seed(3);
    println!("\nthree prior draws on x = -4..4");
    for (name, k) in &kernels {
        let draws = sample_prior(k, &grid, 3, &mut rng)?;
        println!("{name}");
        for s in 0..draws.nrows() {
            let row: Vec<String> = draws.row(s).iter().map(|v| format!("{v:>6.2}")).collect();
            println!("  {}", row.join(" "));
        }
    }

    let x = Matrix::from_column_slice(3, 1, &[-2.0, 0.0, 1.5]);
    let y = Vector::from_column_slice(&[0.5, -1.0, 1.0]);
    let gp = GpModel::new(x, y, KernelSpec::squared_exponential(1.0, 1.0), 0.0)?;
    let draws = gp.sample_posterior(&grid, 3, &mut rng)?;
    println!("\nposterior draws through (-2, 0.5), (0, -1), (1.5, 1)");
    for s in 0..draws.nrows() {
        let row: Vec<String> = draws.row(s).iter().map(|v| format!("{v:>6.2}")).collect();
        println!("  {}", row.join(" "));
    }
    Ok(())
}
