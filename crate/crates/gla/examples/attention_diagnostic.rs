//! Do the learned indicating matrices favor inliers? Train briefly, then
//! report the mean attention weight-ratio (inlier/outlier) per block.

use gla::data::{generate_dataset, GenParams};
use gla::harness::{attention_ratios, indexed, train, LossSelector, TrainRunConfig};
use gla::network::GlaNetConfig;

fn main() -> gla::Result<()> {
    let gen = GenParams::new(80, 256, 0.25, 1e-3, 19);
    let (pairs, splits) = generate_dataset(&gen)?;
    let net = GlaNetConfig {
        channels: 16,
        crude_blocks: 4,
        fine_blocks_per_pass: 2,
        ..GlaNetConfig::default()
    };
    let config = TrainRunConfig {
        epochs: 10,
        batch_size: 16,
        learning_rate: 1e-3,
        seed: 23,
        loss: LossSelector::Guided,
        net,
    };

    let train_pairs = indexed(&pairs, &splits.train)?;
    let before = attention_ratios(
        &gla::network::GlaNetParams::init(&net, 99)?,
        &net,
        &train_pairs,
    )?;
    let outcome = train(&train_pairs, &config)?;
    let test_pairs = indexed(&pairs, &splits.test)?;
    let after = attention_ratios(&outcome.params, &net, &test_pairs)?;

    println!("mean attention weight ratio (inliers / outliers) per block:");
    println!("{:<10} {:>12} {:>12}", "block", "untrained", "trained");
    for (i, (b, a)) in before.iter().zip(after.iter()).enumerate() {
        let kind = if i < net.crude_blocks {
            "crude"
        } else {
            "fine"
        };
        println!("{kind}{:<5} {b:>12.4} {a:>12.4}", i);
    }
    let crude_above = after[..net.crude_blocks]
        .iter()
        .filter(|&&r| r > 1.0)
        .count();
    println!(
        "\n{} of {} crude blocks weight inliers above outliers after training",
        crude_above, net.crude_blocks
    );
    println!(
        "(orientation is seed-dependent: weighting either class's context can \
         separate the features, and training locks in whichever the \
         initialization favored; the externally-driven fine blocks are always \
         probability-aligned)"
    );
    Ok(())
}
