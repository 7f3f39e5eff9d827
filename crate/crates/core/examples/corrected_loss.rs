//! Corrected loss on a random instance, its reduction to plain
//! cross-entropy when `C = I`, and a finite-difference gradient check.

use noisyseg::loss::{corrected_loss, cross_entropy, finite_difference_check, random_instance, LossOptions, Reduction};
use noisyseg::transition::SquareMatrix;

fn main() -> noisyseg::Result<()> {
    let (scores, targets, mask, c) = random_instance([4, 4, 4], 4, 7)?;
    let options = LossOptions::default();

    let report = corrected_loss(&scores, &targets, &mask, &c, options)?;
    println!(
        "corrected loss {:.6} (mask-0 part {:.6}, mask-1 part {:.6})",
        report.total, report.clean_term, report.corrected_term
    );

    let identity = SquareMatrix::identity(4);
    let with_identity = corrected_loss(&scores, &targets, &mask, &identity, options)?.total;
    let ce = cross_entropy(&scores, &targets, options)?.total;
    println!("C = I: {with_identity:.12}, cross-entropy: {ce:.12}");

    for l in [2, 4, 8] {
        let (s, t, m, c) = random_instance([3, 3, 3], l, l as u64)?;
        let check = finite_difference_check(&s, &t, &m, &c, Reduction::Sum, 1e-4)?;
        println!(
            "L = {l}: {} coordinates, max relative error {:.2e}",
            check.num_coordinates, check.max_relative_error
        );
    }
    Ok(())
}
