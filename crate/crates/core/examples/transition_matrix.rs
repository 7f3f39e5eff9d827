//! Estimates the label transition matrix on a noisy phantom and prints it
//! with its regularized inverse.

use noisyseg::phantom::{generate_phantom, inject_boundary_noise};
use noisyseg::smoothing::smooth_labels;
use noisyseg::trainer::DemoConfig;
use noisyseg::transition::{estimate_transition, SquareMatrix, TransitionSample};

fn print(name: &str, m: &SquareMatrix) {
    println!("{name}:");
    for r in 0..m.order() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:>8.4}")).collect();
        println!("  {}", row.join(" "));
    }
}

fn main() -> noisyseg::Result<()> {
    let config = DemoConfig::four_shell(1);
    let phantom = generate_phantom(&config.phantom)?;
    let noisy = inject_boundary_noise(&phantom.clean, &config.noise)?;
    let smoothed = smooth_labels(&noisy, &config.noise.uncertainty_table()?)?;

    let t = estimate_transition(
        &[TransitionSample::new(&noisy, &smoothed.smoothed, &smoothed.mask)],
        1.0,
    )?;
    print("T", t.matrix());
    print("C = (T^T + I)^-1", t.corrected_inverse());

    let check = t.matrix().transpose().add_diagonal(t.lambda()).matmul(t.corrected_inverse());
    println!("max |(T^T + I) C - I| = {:e}", check.max_abs_deviation_from_identity());
    print!("\n{}", t.to_csv());
    Ok(())
}
