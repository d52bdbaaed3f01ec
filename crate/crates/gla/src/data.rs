//! Synthetic two-view correspondence data with ground-truth geometry.
//!
//! Each pair samples a relative camera pose, projects random 3D points into
//! both views for inliers (plus Gaussian noise in normalized units) and
//! draws independent uniform coordinates for outliers. Labels are consistent
//! by construction: an instance is labeled inlier iff its stored (single
//! precision) coordinates have epipolar residual below `tau_label` under the
//! ground-truth model; outliers are re-sampled until they exceed it.
//!
//! Everything is a pure function of (seed, parameters). Per-pair seeds are
//! derived from the master seed by index, and all randomness flows through
//! ChaCha8, a counter-based generator that behaves identically across
//! platforms. The on-disk format is little-endian with an 8-byte checksum
//! footer; the manifest records splits and generation parameters as JSON.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::diffcore::Matrix;
use crate::error::{Error, Result};
use crate::geometry::{epipolar_residual, Correspondence, EssentialMatrix};
use crate::util::{checksum8, mix_seed};

const DATASET_MAGIC: &[u8; 4] = b"GLAD";
const DATASET_VERSION: u32 = 1;

/// Default labeling threshold on the squared symmetric epipolar residual,
/// in normalized-coordinate units. Sized for noise_sigma around 1e-3.
pub const TAU_LABEL_DEFAULT: f64 = 1e-4;

/// Relative pose sampling magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpread {
    /// Maximum rotation angle in degrees; the axis is uniform on the sphere.
    pub max_rotation_deg: f64,
    /// Norm of the translation (direction uniform on the sphere). Scene
    /// depths are 4–8, so 1.0 gives healthy parallax.
    pub translation: f64,
}

impl Default for CameraSpread {
    fn default() -> Self {
        CameraSpread {
            max_rotation_deg: 30.0,
            translation: 1.0,
        }
    }
}

/// Full generation recipe for one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub pairs: usize,
    /// Instances per pair.
    pub n: usize,
    pub inlier_ratio: f64,
    pub noise_sigma: f64,
    pub tau_label: f64,
    pub camera: CameraSpread,
    pub seed: u64,
    /// Train/validation/test fractions.
    pub fractions: [f64; 3],
}

impl GenParams {
    pub fn new(pairs: usize, n: usize, inlier_ratio: f64, noise_sigma: f64, seed: u64) -> Self {
        GenParams {
            pairs,
            n,
            inlier_ratio,
            noise_sigma,
            tau_label: TAU_LABEL_DEFAULT,
            camera: CameraSpread::default(),
            seed,
            fractions: [0.7, 0.15, 0.15],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs == 0 {
            return Err(Error::Config("dataset needs at least one pair".into()));
        }
        if self.n < 16 {
            return Err(Error::Config("pairs need at least 16 instances".into()));
        }
        if !(self.inlier_ratio > 0.0 && self.inlier_ratio <= 1.0) {
            return Err(Error::Config("inlier_ratio must lie in (0, 1]".into()));
        }
        if self.inlier_ratio * (self.n as f64) < 8.0 {
            return Err(Error::Config(
                "expected inlier count below 8; downstream geometry needs more".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and ≥ 0".into()));
        }
        if !(self.tau_label > 0.0) {
            return Err(Error::Config("tau_label must be positive".into()));
        }
        if !(self.camera.translation > 0.0) {
            return Err(Error::Config("camera translation must be positive".into()));
        }
        if !(0.0..90.0).contains(&self.camera.max_rotation_deg) {
            return Err(Error::Config("max rotation must lie in [0, 90)".into()));
        }
        let sum: f64 = self.fractions.iter().sum();
        if self.fractions.iter().any(|&f| f < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(
                "split fractions must be ≥ 0 and sum to 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-pair metadata stored in the dataset file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMeta {
    pub seed: u64,
    pub inlier_ratio: f32,
}

/// One image pair: N stored correspondences, labels, and the ground-truth
/// essential matrix (row-major, unit Frobenius norm).
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub coords: Vec<[f32; 4]>,
    pub labels: Vec<u8>,
    pub e_gt: [f64; 9],
    pub meta: PairMeta,
}

impl PairRecord {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn inlier_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    pub fn correspondences(&self) -> Vec<Correspondence> {
        self.coords
            .iter()
            .map(Correspondence::from_f32_row)
            .collect()
    }

    /// Coordinates widened to the f64 compute precision, N×4.
    pub fn coords_matrix(&self) -> Matrix {
        Matrix::from_fn(self.n(), 4, |r, c| self.coords[r][c] as f64)
    }

    pub fn e_gt_matrix(&self) -> Result<EssentialMatrix> {
        EssentialMatrix::from_matrix(nalgebra::Matrix3::new(
            self.e_gt[0],
            self.e_gt[1],
            self.e_gt[2],
            self.e_gt[3],
            self.e_gt[4],
            self.e_gt[5],
            self.e_gt[6],
            self.e_gt[7],
            self.e_gt[8],
        ))
    }
}

fn flatten_row_major(m: &nalgebra::Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)];
        }
    }
    out
}

/// Generate one pair deterministically from its seed.
///
/// Inliers are 3D points in a depth-4..8 frustum box projected into both
/// views with Gaussian noise; outliers are independent uniform coordinates
/// in [-1, 1]. Both kinds are re-sampled until the stored single-precision
/// coordinates sit on the correct side of `tau_label`.
pub fn synth_pair(
    seed: u64,
    n: usize,
    inlier_ratio: f64,
    noise_sigma: f64,
    camera: &CameraSpread,
    tau_label: f64,
) -> Result<PairRecord> {
    let params = GenParams {
        pairs: 1,
        n,
        inlier_ratio,
        noise_sigma,
        tau_label,
        camera: *camera,
        seed,
        fractions: [0.7, 0.15, 0.15],
    };
    params.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise =
        Normal::new(0.0, noise_sigma).map_err(|_| Error::Config("invalid noise sigma".into()))?;

    for _attempt in 0..100 {
        let axis: [f64; 3] = UnitSphere.sample(&mut rng);
        let angle = rng.gen_range(0.0..=camera.max_rotation_deg.to_radians());
        let rotation = Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::from(axis)), angle);
        let t_dir: [f64; 3] = UnitSphere.sample(&mut rng);
        let translation = Vector3::from(t_dir) * camera.translation;
        let e_gt = EssentialMatrix::from_pose(&rotation, &translation)?;

        let mut coords = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let is_inlier = rng.gen_bool(inlier_ratio);
            let row = if is_inlier {
                sample_inlier(&mut rng, &rotation, &translation, &noise, &e_gt, tau_label)?
            } else {
                sample_outlier(&mut rng, &e_gt, tau_label)?
            };
            coords.push(row);
            labels.push(u8::from(is_inlier));
        }

        // A pathological Bernoulli draw can still starve the pair of the 8
        // inliers downstream geometry needs; redraw the whole pair then.
        if labels.iter().filter(|&&l| l != 0).count() >= 8 {
            return Ok(PairRecord {
                coords,
                labels,
                e_gt: flatten_row_major(e_gt.matrix()),
                meta: PairMeta {
                    seed,
                    inlier_ratio: inlier_ratio as f32,
                },
            });
        }
    }
    Err(Error::Geometry(
        "could not draw at least 8 inliers in 100 attempts".into(),
    ))
}

fn sample_inlier(
    rng: &mut ChaCha8Rng,
    rotation: &Rotation3<f64>,
    translation: &Vector3<f64>,
    noise: &Normal<f64>,
    e_gt: &EssentialMatrix,
    tau_label: f64,
) -> Result<[f32; 4]> {
    for _ in 0..1000 {
        let z = rng.gen_range(4.0..8.0);
        let x = rng.gen_range(-0.5..0.5) * z;
        let y = rng.gen_range(-0.5..0.5) * z;
        let p = Vector3::new(x, y, z);
        let q = rotation * p + translation;
        if q.z < 0.5 {
            continue;
        }
        let (u, v) = (p.x / p.z, p.y / p.z);
        let (up, vp) = (q.x / q.z, q.y / q.z);
        if up.abs() > 1.5 || vp.abs() > 1.5 {
            continue;
        }
        let row = [
            (u + noise.sample(rng)) as f32,
            (v + noise.sample(rng)) as f32,
            (up + noise.sample(rng)) as f32,
            (vp + noise.sample(rng)) as f32,
        ];
        // Label consistency is defined on the stored f32 coordinates.
        if epipolar_residual(&Correspondence::from_f32_row(&row), e_gt) < tau_label {
            return Ok(row);
        }
    }
    Err(Error::Geometry(
        "could not place an inlier below the label threshold".into(),
    ))
}

fn sample_outlier(
    rng: &mut ChaCha8Rng,
    e_gt: &EssentialMatrix,
    tau_label: f64,
) -> Result<[f32; 4]> {
    for _ in 0..1000 {
        let row = [
            rng.gen_range(-1.0f64..1.0) as f32,
            rng.gen_range(-1.0f64..1.0) as f32,
            rng.gen_range(-1.0f64..1.0) as f32,
            rng.gen_range(-1.0f64..1.0) as f32,
        ];
        if epipolar_residual(&Correspondence::from_f32_row(&row), e_gt) >= tau_label {
            return Ok(row);
        }
    }
    Err(Error::Geometry(
        "could not place an outlier above the label threshold".into(),
    ))
}

/// Disjoint, exhaustive, seed-deterministic index split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffle pair indices and cut them by the configured fractions. The
/// validation and test counts round down; the remainder goes to train, so a
/// single-pair dataset trains on its one pair.
pub fn split(pair_count: usize, fractions: [f64; 3], seed: u64) -> Result<SplitIndices> {
    if pair_count == 0 {
        return Err(Error::contract("cannot split an empty dataset"));
    }
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| f < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::contract("fractions must be ≥ 0 and sum to 1"));
    }
    let mut indices: Vec<usize> = (0..pair_count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5B17));
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    let n_val = (fractions[1] * pair_count as f64).floor() as usize;
    let n_test = (fractions[2] * pair_count as f64).floor() as usize;
    let n_train = pair_count - n_val - n_test;
    let train = indices[..n_train].to_vec();
    let val = indices[n_train..n_train + n_val].to_vec();
    let test = indices[n_train + n_val..].to_vec();
    Ok(SplitIndices { train, val, test })
}

impl SplitIndices {
    pub fn select(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::contract(format!(
                "unknown split {other:?}; expected train, val or test"
            ))),
        }
    }
}

/// Dataset manifest: JSON sidecar with splits, generation parameters, the
/// generator name and the dataset file's checksum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub pair_count: usize,
    pub rng: String,
    pub params: GenParams,
    pub splits: SplitIndices,
    pub checksum: String,
}

/// Conventional manifest location next to a dataset file.
pub fn manifest_path(data_path: impl AsRef<Path>) -> PathBuf {
    let mut name = data_path.as_ref().as_os_str().to_os_string();
    name.push(".manifest.json");
    PathBuf::from(name)
}

/// Generate all pairs of a dataset (seeds derived per index) plus its split.
pub fn generate_dataset(params: &GenParams) -> Result<(Vec<PairRecord>, SplitIndices)> {
    params.validate()?;
    let mut pairs = Vec::with_capacity(params.pairs);
    for i in 0..params.pairs {
        let pair_seed = mix_seed(params.seed, i as u64);
        pairs.push(synth_pair(
            pair_seed,
            params.n,
            params.inlier_ratio,
            params.noise_sigma,
            &params.camera,
            params.tau_label,
        )?);
    }
    let splits = split(params.pairs, params.fractions, params.seed)?;
    Ok((pairs, splits))
}

/// Serialize pairs into the binary dataset layout; returns the checksum hex.
pub fn write_dataset(path: impl AsRef<Path>, pairs: &[PairRecord]) -> Result<String> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.write_u32::<LittleEndian>(DATASET_VERSION)?;
    buf.write_u64::<LittleEndian>(pairs.len() as u64)?;
    for pair in pairs {
        buf.write_u32::<LittleEndian>(pair.n() as u32)?;
        for row in &pair.coords {
            for &v in row {
                buf.write_f32::<LittleEndian>(v)?;
            }
        }
        buf.extend_from_slice(&pair.labels);
        for &v in &pair.e_gt {
            buf.write_f64::<LittleEndian>(v)?;
        }
        buf.write_f32::<LittleEndian>(pair.meta.inlier_ratio)?;
        buf.write_u64::<LittleEndian>(pair.meta.seed)?;
    }
    let sum = checksum8(&buf);
    buf.extend_from_slice(&sum);
    fs::write(path, buf)?;
    Ok(hex_string(&sum))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Read a dataset file back, verifying magic, version and checksum.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<PairRecord>> {
    let bytes = fs::read(&path)?;
    if bytes.len() < DATASET_MAGIC.len() + 4 + 8 + 8 {
        return Err(Error::Format("dataset file truncated".into()));
    }
    let (body, stored_sum) = bytes.split_at(bytes.len() - 8);
    if checksum8(body) != stored_sum {
        return Err(Error::Format("dataset checksum mismatch".into()));
    }
    let mut cur = Cursor::new(body);
    let mut magic = [0u8; 4];
    std::io::Read::read_exact(&mut cur, &mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let version = cur.read_u32::<LittleEndian>()?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version}"
        )));
    }
    let count = cur.read_u64::<LittleEndian>()? as usize;
    let mut pairs = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let n = cur.read_u32::<LittleEndian>()? as usize;
        if n == 0 || n > body.len() {
            return Err(Error::Format("pair instance count out of range".into()));
        }
        let mut coords = Vec::with_capacity(n);
        for _ in 0..n {
            let mut row = [0f32; 4];
            for v in &mut row {
                *v = cur.read_f32::<LittleEndian>()?;
            }
            coords.push(row);
        }
        let mut labels = vec![0u8; n];
        std::io::Read::read_exact(&mut cur, &mut labels)?;
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Format("labels must be 0 or 1".into()));
        }
        let mut e_gt = [0f64; 9];
        for v in &mut e_gt {
            *v = cur.read_f64::<LittleEndian>()?;
        }
        if e_gt.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("ground-truth matrix is not finite".into()));
        }
        let inlier_ratio = cur.read_f32::<LittleEndian>()?;
        let seed = cur.read_u64::<LittleEndian>()?;
        pairs.push(PairRecord {
            coords,
            labels,
            e_gt,
            meta: PairMeta { seed, inlier_ratio },
        });
    }
    if cur.position() as usize != body.len() {
        return Err(Error::Format("trailing bytes after last pair".into()));
    }
    Ok(pairs)
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<()> {
    let json = serde_json::to_vec_pretty(manifest)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}
