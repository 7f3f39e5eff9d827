//! Boundary-aware smoothing of a two-region volume, next to standard
//! smoothing for comparison.

use noisyseg::smoothing::{smooth_labels, standard_smooth};
use noisyseg::volume::{GridGeometry, LabelVolume, UncertaintyTable};

fn main() -> noisyseg::Result<()> {
    // Label 0 for x < 8, label 1 otherwise.
    let geometry = GridGeometry::new([16, 5, 5], [0.8; 3])?;
    let labels = LabelVolume::from_fn(geometry, 2, |[x, _, _]| u16::from(x >= 8))?;

    for budgets in [vec![2, 3], vec![0, 3]] {
        let table = UncertaintyTable::new(budgets.clone())?;
        let out = smooth_labels(&labels, &table)?;
        println!("uncertainty {budgets:?}: {} voxels altered", out.mask.count_nonzero());
        println!("   x  label  P(0)    P(1)    mask");
        for x in 2..14 {
            let i = geometry.index([x, 2, 2]);
            let row = out.smoothed.row(i);
            println!(
                "{x:>4}  {:>5}  {:.4}  {:.4}  {}",
                labels.labels()[i],
                row[0],
                row[1],
                out.mask.values()[i]
            );
        }
    }

    let standard = standard_smooth(&labels, 0.1)?;
    let i = geometry.index([10, 2, 2]);
    println!("standard smoothing (alpha 0.1) at x=10: {:?}", standard.row(i));
    Ok(())
}
