//! Synthesize a small two-view dataset, check label/geometry consistency,
//! and round-trip it through the binary on-disk format.

use gla::data::{
    generate_dataset, manifest_path, read_dataset, write_dataset, write_manifest, DatasetManifest,
    GenParams,
};
use gla::geometry::epipolar_residual;

fn main() -> gla::Result<()> {
    let params = GenParams::new(12, 256, 0.25, 1e-3, 42);
    let (pairs, splits) = generate_dataset(&params)?;

    println!(
        "generated {} pairs of {} correspondences each (inlier ratio {})",
        pairs.len(),
        params.n,
        params.inlier_ratio
    );
    println!(
        "split: {} train / {} val / {} test",
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );

    // Every label agrees with the epipolar residual against the stored
    // ground-truth model.
    let pair = &pairs[0];
    let e = pair.e_gt_matrix()?;
    let mut worst_inlier = 0.0f64;
    let mut best_outlier = f64::INFINITY;
    for (c, &label) in pair.correspondences().iter().zip(pair.labels.iter()) {
        let r = epipolar_residual(c, &e);
        if label == 1 {
            worst_inlier = worst_inlier.max(r);
        } else {
            best_outlier = best_outlier.min(r);
        }
    }
    println!(
        "pair 0: {} inliers; worst inlier residual {worst_inlier:.2e}, closest outlier {best_outlier:.2e} (threshold {:.0e})",
        pair.inlier_count(),
        params.tau_label
    );

    let dir = std::env::temp_dir();
    let path = dir.join("gla_example_dataset.glad");
    let checksum = write_dataset(&path, &pairs)?;
    write_manifest(
        manifest_path(&path),
        &DatasetManifest {
            format_version: 1,
            pair_count: pairs.len(),
            rng: "chacha8".into(),
            params,
            splits,
            checksum,
        },
    )?;
    let reloaded = read_dataset(&path)?;
    assert_eq!(pairs, reloaded);
    println!("round-trip through {} is exact", path.display());
    Ok(())
}
