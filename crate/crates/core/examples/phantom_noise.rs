//! Generates a shell phantom, injects boundary noise and reports how far
//! each flipped voxel sits from the clean boundary.

use noisyseg::metrics::squared_edt;
use noisyseg::phantom::{generate_phantom, inject_boundary_noise};
use noisyseg::trainer::DemoConfig;
use noisyseg::volume::GridGeometry;

fn main() -> noisyseg::Result<()> {
    let config = DemoConfig::four_shell(1);
    let phantom = generate_phantom(&config.phantom)?;
    let noisy = inject_boundary_noise(&phantom.clean, &config.noise)?;
    let clean = phantom.clean.labels();
    let l = phantom.clean.num_labels();

    println!("label  clean   noisy   budget");
    for k in 0..l as u16 {
        println!(
            "{k:>5}  {:>6}  {:>6}  {:>6}",
            phantom.clean.count(k),
            noisy.count(k),
            config.noise.budgets[k as usize]
        );
    }

    // Distance from each flipped voxel to the nearest clean voxel of its new label.
    let unit = GridGeometry::new(phantom.clean.geometry().dims(), [1.0; 3])?;
    let mut worst = 0.0f64;
    let mut flipped = 0;
    for b in 0..l as u16 {
        let seeds: Vec<bool> = clean.iter().map(|&x| x == b).collect();
        if !seeds.iter().any(|&s| s) {
            continue;
        }
        let d2 = squared_edt(&unit, &seeds)?;
        for (i, (&c, &n)) in clean.iter().zip(noisy.labels()).enumerate() {
            if c != n && n == b {
                flipped += 1;
                worst = worst.max(d2[i].sqrt());
            }
        }
    }
    println!("{flipped} voxels flipped, farthest {worst:.3} voxels from their new label");
    Ok(())
}
