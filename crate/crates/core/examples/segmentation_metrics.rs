//! Dice, HD95 and ASSD on two parallel plates and on a noisy phantom.

use noisyseg::metrics::{evaluate, hd95_assd, MetricsOptions};
use noisyseg::phantom::{generate_phantom, inject_boundary_noise};
use noisyseg::trainer::DemoConfig;
use noisyseg::volume::{GridGeometry, LabelVolume};

fn main() -> noisyseg::Result<()> {
    // One-voxel plates at x = 2 and x = 5 on a 0.8 mm grid.
    let g = GridGeometry::new([8, 6, 6], [0.8; 3])?;
    let plate = |at: usize| LabelVolume::from_fn(g, 2, move |[x, _, _]| u16::from(x == at));
    let d = hd95_assd(&plate(2)?, &plate(5)?, 1, g.spacing())?.expect("both plates present");
    println!("plates 3 voxels apart: HD95 {:.3} mm, ASSD {:.3} mm", d.hd95_mm, d.assd_mm);

    let config = DemoConfig::four_shell(1);
    let phantom = generate_phantom(&config.phantom)?;
    let noisy = inject_boundary_noise(&phantom.clean, &config.noise)?;
    let report = evaluate(&noisy, &phantom.clean, &MetricsOptions::default())?;
    println!("noisy vs clean phantom:");
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}
