use crate::container;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::Mat;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationData {
    /// `dim × N`
    pub inputs: Mat,
    pub labels: Vec<usize>,
}

impl ClassificationData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn with_bias(&self) -> Self {
        let (dim, n) = self.inputs.shape();
        let mut inputs = self.inputs.clone().resize_vertically(dim + 1, 1.0);
        inputs.row_mut(dim).fill(1.0);
        debug_assert_eq!(inputs.ncols(), n);
        Self {
            inputs,
            labels: self.labels.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypercleanDataset {
    pub train: ClassificationData,
    /// True where the training label was corrupted.
    pub corrupted: Vec<bool>,
    pub val: ClassificationData,
    pub test: ClassificationData,
    pub classes: usize,
    pub corruption_ratio: f64,
    pub seed: u64,
}

impl HypercleanDataset {
    pub fn num_corrupted(&self) -> usize {
        self.corrupted.iter().filter(|&&c| c).count()
    }

    pub fn input_dim(&self) -> usize {
        self.train.inputs.nrows()
    }

    /// Append a constant-1 feature to every split.
    pub fn with_bias(&self) -> Self {
        Self {
            train: self.train.with_bias(),
            val: self.val.with_bias(),
            test: self.test.with_bias(),
            corrupted: self.corrupted.clone(),
            ..*self
        }
    }

    /// Split pre-loaded examples in order into train/val/test and corrupt
    /// the training labels.
    pub fn from_examples(
        data: &ClassificationData,
        classes: usize,
        sizes: (usize, usize, usize),
        noise_ratio: f64,
        seed: u64,
    ) -> Result<Self> {
        let (nt, nv, ns) = sizes;
        if nt + nv + ns > data.len() {
            return Err(Error::DimensionMismatch {
                what: "examples available for the requested splits",
                expected: nt + nv + ns,
                got: data.len(),
            });
        }
        let part = |lo: usize, n: usize| ClassificationData {
            inputs: data.inputs.columns(lo, n).into_owned(),
            labels: data.labels[lo..lo + n].to_vec(),
        };
        let mut train = part(0, nt);
        let mut rng = stream(seed, "corruption");
        let (labels, corrupted) = corrupt_labels(&train.labels, noise_ratio, classes, &mut rng)?;
        train.labels = labels;
        Ok(Self {
            train,
            corrupted,
            val: part(nt, nv),
            test: part(nt + nv, ns),
            classes,
            corruption_ratio: noise_ratio,
            seed,
        })
    }
}

/// Replace `⌊ratio·N⌋` labels, chosen uniformly without replacement, by a
/// uniformly drawn different class.
pub fn corrupt_labels<R: Rng + ?Sized>(
    labels: &[usize],
    ratio: f64,
    classes: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<bool>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("corruption ratio {ratio} outside [0, 1]")));
    }
    let n = labels.len();
    let count = ((ratio * n as f64) + 1e-9).floor() as usize;
    let mut out = labels.to_vec();
    let mut mask = vec![false; n];
    if count == 0 {
        return Ok((out, mask));
    }
    if classes < 2 {
        return Err(Error::InvalidArgument("label corruption needs at least 2 classes".into()));
    }
    for i in sample(rng, n, count).into_iter() {
        let r = rng.random_range(0..classes - 1);
        out[i] = if r >= labels[i] { r + 1 } else { r };
        mask[i] = true;
    }
    Ok((out, mask))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub classes: usize,
    pub input_dim: usize,
    /// Distance between any two class means.
    pub separation: f64,
    pub noise_ratio: f64,
    pub seed: u64,
}

fn gaussian_clusters(n: usize, cfg: &SyntheticConfig, label: &str) -> ClassificationData {
    let mut rng = stream(cfg.seed, label);
    let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
    // Fisher-Yates keeps class counts balanced
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    let offset = cfg.separation / std::f64::consts::SQRT_2;
    let mut inputs = Mat::zeros(cfg.input_dim, n);
    for (col, &y) in labels.iter().enumerate() {
        for row in 0..cfg.input_dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            inputs[(row, col)] = z + if row == y { offset } else { 0.0 };
        }
    }
    ClassificationData { inputs, labels }
}

/// Isotropic unit-variance Gaussian clusters with class `c` centred at
/// `(separation/√2) e_c`, then training-label corruption.
pub fn gen_synthetic_classification(cfg: &SyntheticConfig) -> Result<HypercleanDataset> {
    if cfg.classes < 1 {
        return Err(Error::InvalidArgument("need at least one class".into()));
    }
    for (name, n) in [("n_train", cfg.n_train), ("n_val", cfg.n_val), ("n_test", cfg.n_test)] {
        if n < cfg.classes {
            return Err(Error::InvalidArgument(format!(
                "{name} = {n} is below the class count {}",
                cfg.classes
            )));
        }
    }
    if cfg.input_dim < cfg.classes {
        return Err(Error::InvalidArgument("input_dim must be >= classes".into()));
    }
    let mut train = gaussian_clusters(cfg.n_train, cfg, "synthetic/train");
    let mut rng = stream(cfg.seed, "corruption");
    let (labels, corrupted) = corrupt_labels(&train.labels, cfg.noise_ratio, cfg.classes, &mut rng)?;
    train.labels = labels;
    Ok(HypercleanDataset {
        train,
        corrupted,
        val: gaussian_clusters(cfg.n_val, cfg, "synthetic/val"),
        test: gaussian_clusters(cfg.n_test, cfg, "synthetic/test"),
        classes: cfg.classes,
        corruption_ratio: cfg.noise_ratio,
        seed: cfg.seed,
    })
}

/// Area under the ROC curve of `scores` for detecting `positives`, with
/// tied scores counted as half.
pub fn roc_auc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::DimensionMismatch {
            what: "score count",
            expected: positives.len(),
            got: scores.len(),
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let n_pos = positives.iter().filter(|&&p| p).count() as f64;
    let n_neg = positives.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::InvalidArgument("ROC-AUC needs both classes present".into()));
    }
    let rank_sum: f64 = ranks.iter().zip(positives).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    Ok((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";

fn row_of(v: impl Iterator<Item = f64>) -> Mat {
    let vals: Vec<f64> = v.collect();
    Mat::from_row_slice(1, vals.len(), &vals)
}

/// Entries: meta `[classes, ratio, seed_hi, seed_lo]`, then inputs and labels for
/// train/val/test, with the corruption mask after the training labels.
pub fn save_dataset(path: &Path, ds: &HypercleanDataset) -> Result<()> {
    let meta = Mat::from_row_slice(
        1,
        4,
        &[
            ds.classes as f64,
            ds.corruption_ratio,
            (ds.seed >> 32) as f64,
            (ds.seed & 0xffff_ffff) as f64,
        ],
    );
    let labels = |d: &ClassificationData| row_of(d.labels.iter().map(|&l| l as f64));
    let mask = row_of(ds.corrupted.iter().map(|&c| if c { 1.0 } else { 0.0 }));
    let (ytr, yv, yte) = (labels(&ds.train), labels(&ds.val), labels(&ds.test));
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    container::write(
        file,
        TENSOR_MAGIC,
        &[
            &meta,
            &ds.train.inputs,
            &ytr,
            &mask,
            &ds.val.inputs,
            &yv,
            &ds.test.inputs,
            &yte,
        ],
    )
}

pub fn load_dataset(path: &Path) -> Result<HypercleanDataset> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let m = container::read(file, TENSOR_MAGIC)?;
    if m.len() != 8 {
        return Err(Error::Format(format!("expected 8 tensors, found {}", m.len())));
    }
    if m[0].len() != 4 {
        return Err(Error::Format("bad dataset meta entry".into()));
    }
    let to_labels = |r: &Mat| r.iter().map(|&x| x as usize).collect::<Vec<_>>();
    let split = |x: &Mat, y: &Mat| -> Result<ClassificationData> {
        if x.ncols() != y.len() {
            return Err(Error::Format("input/label count mismatch".into()));
        }
        Ok(ClassificationData {
            inputs: x.clone(),
            labels: to_labels(y),
        })
    };
    Ok(HypercleanDataset {
        train: split(&m[1], &m[2])?,
        corrupted: m[3].iter().map(|&x| x != 0.0).collect(),
        val: split(&m[4], &m[5])?,
        test: split(&m[6], &m[7])?,
        classes: m[0][(0, 0)] as usize,
        corruption_ratio: m[0][(0, 1)],
        seed: ((m[0][(0, 2)] as u64) << 32) | m[0][(0, 3)] as u64,
    })
}
