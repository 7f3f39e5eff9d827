//! Runs the full pipeline on a small phantom and prints the manifest.
//!
//! ```text
//! cargo run --release --example pipeline -- [out-dir]
//! ```

use std::path::PathBuf;

use noisyseg::phantom::{NoiseSpec, PhantomSpec};
use noisyseg::pipeline::{run_pipeline, PipelineSpec};
use noisyseg::trainer::TrainConfig;

fn main() -> noisyseg::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("noisyseg_pipeline"));
    let spec = PipelineSpec {
        phantom: PhantomSpec {
            dims: [20, 20, 20],
            spacing: [0.8; 3],
            radii: vec![9.0, 6.0, 3.0],
            seed: 5,
            intensity_means: vec![0.0, 1.0, 2.0, 3.0],
            intensity_sigma: 0.5,
        },
        noise: NoiseSpec::new(vec![0, 1, 2, 2], 9),
        train: TrainConfig {
            iterations: 300,
            ..TrainConfig::default()
        },
        seeds: 2,
        lambda: 1.0,
        alpha: 0.1,
        tau_override: None,
        no_transpose: false,
    };
    let manifest = run_pipeline(&spec, None, &out)?;
    for stage in &manifest.stages {
        println!("{:<11} {:>7.3} s", stage.name, stage.wall_clock_s);
        for f in &stage.outputs {
            println!("    {:<24} {:>9} B  {}", f.path, f.bytes, &f.sha256[..16]);
        }
    }
    println!("manifest written to {}", out.join("manifest.json").display());
    Ok(())
}
