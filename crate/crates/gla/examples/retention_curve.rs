//! Retained-correspondence sweep: sort one pair's instances by predicted
//! probability, retain the top k, and trace precision/recall/F1 over k to
//! locate the best decision boundary.

use gla::data::{generate_dataset, GenParams};
use gla::diffcore::Tape;
use gla::harness::{indexed, prf_sweep, train, LossSelector, TrainRunConfig};
use gla::network::{forward, GlaNetConfig};

fn main() -> gla::Result<()> {
    let gen = GenParams::new(50, 192, 0.25, 1e-3, 31);
    let (pairs, splits) = generate_dataset(&gen)?;
    let net = GlaNetConfig {
        channels: 16,
        crude_blocks: 3,
        fine_blocks_per_pass: 2,
        ..GlaNetConfig::default()
    };
    let config = TrainRunConfig {
        epochs: 12,
        batch_size: 16,
        learning_rate: 1e-3,
        seed: 41,
        loss: LossSelector::Guided,
        net,
    };
    let outcome = train(&indexed(&pairs, &splits.train)?, &config)?;

    let (pair_id, pair) = indexed(&pairs, &splits.test)?[0];
    let mut tape = Tape::new();
    let (trace, _) = forward(&mut tape, &outcome.params, &net, &pair.coords_matrix())?;
    let sweep = prf_sweep(&trace.final_probs, &pair.labels)?;

    println!(
        "pair {pair_id}: {} instances, {} true inliers",
        pair.n(),
        pair.inlier_count()
    );
    println!(
        "{:>6} {:>10} {:>10} {:>10}",
        "k", "precision", "recall", "f1"
    );
    for point in sweep.points.iter().step_by(16) {
        println!(
            "{:>6} {:>10.4} {:>10.4} {:>10.4}",
            point.k, point.precision, point.recall, point.f1
        );
    }
    let best = &sweep.points[sweep.best_k - 1];
    println!(
        "\nbest boundary: retain {} instances -> P {:.4} R {:.4} F1 {:.4}",
        sweep.best_k, best.precision, best.recall, best.f1
    );
    Ok(())
}
