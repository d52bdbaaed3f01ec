//! Verify every differentiable building block, and the assembled network,
//! against central finite differences.

use gla::harness::gradient_suite;
use gla::network::GlaNetConfig;

fn main() -> gla::Result<()> {
    let reports = gradient_suite(&GlaNetConfig::tiny(), 2)?;
    let mut worst: f64 = 0.0;
    for r in &reports {
        println!("{:<28} {:>12.3e}", r.name, r.max_rel_err);
        worst = worst.max(r.max_rel_err);
    }
    println!("\nworst relative error: {worst:.3e} (tolerance 1e-4)");
    assert!(worst < 1e-4);
    Ok(())
}
