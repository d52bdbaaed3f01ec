//! The class-weight scheduler in isolation: how (λ, μ) react to the current
//! misclassification counts so that the loss tracks the target F-score.

use gla::guidedloss::{
    fn_derivatives, fn_from_counts, guided_weights, verify_negative_correlation, ClassCounts,
    DerivativeMethod, FnSpec,
};

fn main() -> gla::Result<()> {
    println!("scheduling against F1 on an imbalanced pair (100 inliers, 900 outliers)\n");
    println!(
        "{:>5} {:>5} {:>8} {:>10} {:>10} {:>9} {:>9}  neg.corr",
        "X", "Y", "F1", "dF/dX", "dF/dY", "lambda", "mu"
    );
    for (x, y) in [(0, 0), (5, 20), (20, 100), (50, 400), (80, 850)] {
        let counts = ClassCounts::new(100, 900, x, y)?;
        let f1 = fn_from_counts(&counts, FnSpec::F1)?;
        let d = fn_derivatives(&counts, FnSpec::F1, DerivativeMethod::Analytic)?;
        let sched = guided_weights(&counts, FnSpec::F1)?;
        let ok = verify_negative_correlation(&counts, FnSpec::F1, &sched.weights)?;
        println!(
            "{x:>5} {y:>5} {f1:>8.4} {:>10.6} {:>10.6} {:>9.4} {:>9.4}  {}",
            d.d_x,
            d.d_y,
            sched.weights.lambda,
            sched.weights.mu,
            if ok { "holds" } else { "violated" }
        );
    }

    println!("\nunit-step probe vs exact derivative ratio (they differ by 1/(TP+1)):");
    let counts = ClassCounts::new(100, 900, 20, 100)?;
    let exact = fn_derivatives(&counts, FnSpec::F1, DerivativeMethod::Analytic)?;
    let probed = fn_derivatives(&counts, FnSpec::F1, DerivativeMethod::Algorithm1)?;
    println!("  analytic ratio  {:.6}", exact.ratio);
    println!("  unit-step ratio {:.6}", probed.ratio);

    println!("\nguidance targets shift the balance (same counts):");
    for n in [0.5, 1.0, 2.0] {
        let sched = guided_weights(&counts, FnSpec::new(n)?)?;
        println!(
            "  F{n:<4} -> lambda {:.4}, mu {:.4}",
            sched.weights.lambda, sched.weights.mu
        );
    }
    Ok(())
}
