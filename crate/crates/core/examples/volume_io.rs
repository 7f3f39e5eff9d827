//! Writes a small label volume to disk and reads it back.
//!
//! ```text
//! cargo run --example volume_io -- [dir]
//! ```

use std::path::PathBuf;

use noisyseg::volume::{read_header, read_labels, write_volume, GridGeometry, LabelVolume};

fn main() -> noisyseg::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(std::env::temp_dir);
    let geometry = GridGeometry::new([8, 6, 4], [0.8, 0.8, 1.6])?;
    let labels = LabelVolume::from_fn(geometry, 3, |[x, _, z]| {
        if z >= 2 {
            2
        } else if x >= 4 {
            1
        } else {
            0
        }
    })?;

    let path = dir.join("volume_io_example");
    write_volume(&labels, &path)?;
    let header = read_header(&path)?;
    println!("{}", serde_json::to_string_pretty(&header).expect("header serializes"));

    let back = read_labels(&path)?;
    assert_eq!(back, labels);
    for l in 0..3 {
        println!("label {l}: {} voxels", back.count(l));
    }
    Ok(())
}
