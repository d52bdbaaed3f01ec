//! End-to-end walkthrough: synthesize data, train a small classifier with
//! the guided loss, and evaluate it on the held-out split.

use gla::data::{generate_dataset, GenParams};
use gla::harness::{evaluate, indexed, train, LossSelector, TrainRunConfig};
use gla::network::GlaNetConfig;

fn main() -> gla::Result<()> {
    let gen = GenParams::new(80, 256, 0.2, 1e-3, 11);
    let (pairs, splits) = generate_dataset(&gen)?;
    println!(
        "dataset: {} pairs, N = {}, inlier ratio {}",
        gen.pairs, gen.n, gen.inlier_ratio
    );

    let net = GlaNetConfig {
        channels: 16,
        crude_blocks: 3,
        fine_blocks_per_pass: 2,
        ..GlaNetConfig::default()
    };
    let config = TrainRunConfig {
        epochs: 10,
        batch_size: 16,
        learning_rate: 1e-3,
        seed: 5,
        loss: LossSelector::Guided,
        net,
    };

    let train_pairs = indexed(&pairs, &splits.train)?;
    let outcome = train(&train_pairs, &config)?;
    println!(
        "trained {} epochs: mean loss {:.4} -> {:.4} ({} weight-clamp events)",
        config.epochs,
        outcome.epoch_mean_loss.first().unwrap(),
        outcome.epoch_mean_loss.last().unwrap(),
        outcome.clamp_events
    );

    for (name, ids) in [("train", &splits.train), ("test", &splits.test)] {
        let subset = indexed(&pairs, ids)?;
        let report = evaluate(&outcome.params, &net, &subset)?;
        let m = report.mean;
        println!(
            "{name:>5}: P {:.3} R {:.3} F1 {:.3} e_dev {:.3}",
            m.precision, m.recall, m.f1, m.e_dev
        );
    }
    Ok(())
}
