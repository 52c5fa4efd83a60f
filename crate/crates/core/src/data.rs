//! Dataset parsers, synthetic generators and one-class task construction.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CoreError, Result};
use crate::rng::{purpose, stream};

/// Labeled samples stored contiguously as `[n, C, H, W]` in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: [usize; 3],
    pub data: Vec<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(shape: [usize; 3], data: Vec<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || data.len() != per * labels.len() {
            return Err(CoreError::invalid(
                "dataset",
                format!("{} values do not fit {} samples of {shape:?}", data.len(), labels.len()),
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(CoreError::invalid("dataset", format!("label {l} >= class count {classes}")));
        }
        Ok(Dataset {
            shape,
            data,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        self.labels.iter().for_each(|&l| c[l] += 1);
        c
    }

    /// Keeps the samples whose index satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> Dataset {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in (0..self.len()).filter(|&i| keep(i)) {
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            shape: self.shape,
            data,
            labels,
            classes: self.classes,
        }
    }

    /// Repeats a single channel into three.
    pub fn expand_grayscale(&self) -> Result<Dataset> {
        let mut data = Vec::with_capacity(self.data.len() * 3);
        for i in 0..self.len() {
            data.extend(crate::augment::expand_grayscale(self.sample(i), self.shape)?);
        }
        let [_, h, w] = self.shape;
        Ok(Dataset {
            shape: [3, h, w],
            data,
            labels: self.labels.clone(),
            classes: self.classes,
        })
    }

    /// Pads height and width symmetrically with `-1` up to `size`.
    pub fn pad_to(&self, size: usize) -> Result<Dataset> {
        let [c, h, w] = self.shape;
        if size < h || size < w {
            return Err(CoreError::invalid(
                "pad_to",
                format!("cannot pad {h}x{w} down to {size}"),
            ));
        }
        let (top, left) = ((size - h) / 2, (size - w) / 2);
        let mut data = vec![-1.0f32; self.len() * c * size * size];
        for i in 0..self.len() {
            let src = self.sample(i);
            for ch in 0..c {
                for y in 0..h {
                    let dst = ((i * c + ch) * size + top + y) * size + left;
                    data[dst..dst + w].copy_from_slice(&src[(ch * h + y) * w..][..w]);
                }
            }
        }
        Ok(Dataset {
            shape: [c, size, size],
            data,
            labels: self.labels.clone(),
            classes: self.classes,
        })
    }
}

/// Maps a byte to `[-1, 1]` affinely.
pub fn normalize_byte(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Contents of an IDX file.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    /// `n` images of `rows x cols` pixels in `[-1, 1]`.
    Images { n: usize, rows: usize, cols: usize, pixels: Vec<f32> },
    Labels(Vec<u8>),
}

fn fmt_err(what: &'static str, offset: usize, detail: impl Into<String>) -> CoreError {
    CoreError::Format {
        what,
        offset,
        detail: detail.into(),
    }
}

/// Parses a big-endian IDX file holding `u8` images (magic `0x803`) or
/// labels (magic `0x801`).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    if bytes.len() < 4 {
        return Err(fmt_err("idx", bytes.len(), "truncated magic number"));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let ndim = match magic {
        0x0000_0803 => 3,
        0x0000_0801 => 1,
        _ => return Err(fmt_err("idx", 0, format!("bad magic 0x{magic:08x}"))),
    };
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(fmt_err("idx", bytes.len(), "truncated dimension header"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|d| {
            let o = 4 + 4 * d;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let need: usize = dims.iter().product();
    let have = bytes.len() - header;
    if have < need {
        return Err(fmt_err(
            "idx",
            bytes.len(),
            format!("payload ends after {have} of {need} bytes"),
        ));
    }
    if have > need {
        return Err(fmt_err(
            "idx",
            header + need,
            format!("{} trailing bytes after payload", have - need),
        ));
    }
    let payload = &bytes[header..];
    Ok(if ndim == 3 {
        IdxData::Images {
            n: dims[0],
            rows: dims[1],
            cols: dims[2],
            pixels: payload.iter().map(|&b| normalize_byte(b)).collect(),
        }
    } else {
        IdxData::Labels(payload.to_vec())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    C10,
    /// CIFAR-100 with the 20 coarse superclass labels.
    C100Coarse,
}

pub const CIFAR_PIXELS: usize = 3 * 32 * 32;

/// Parses a CIFAR binary batch into `[n, 3, 32, 32]` images and labels.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant) -> Result<(Vec<f32>, Vec<usize>)> {
    let label_bytes = match variant {
        CifarVariant::C10 => 1,
        CifarVariant::C100Coarse => 2,
    };
    let rec = label_bytes + CIFAR_PIXELS;
    if !bytes.len().is_multiple_of(rec) {
        let whole = bytes.len() / rec * rec;
        return Err(fmt_err(
            "cifar",
            whole,
            format!("length {} is not a multiple of the {rec}-byte record", bytes.len()),
        ));
    }
    let n = bytes.len() / rec;
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    let max_label = match variant {
        CifarVariant::C10 => 10,
        CifarVariant::C100Coarse => 20,
    };
    for (i, r) in bytes.chunks(rec).enumerate() {
        let label = r[0] as usize;
        if label >= max_label {
            return Err(fmt_err("cifar", i * rec, format!("label {label} out of range")));
        }
        labels.push(label);
        pixels.extend(r[label_bytes..].iter().map(|&b| normalize_byte(b)));
    }
    Ok((pixels, labels))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CoreError::io(path, e))
}

/// Loads an IDX image/label file pair.
pub fn load_idx_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = match parse_idx(&read(images)?)? {
        IdxData::Images { n, rows, cols, pixels } => (n, rows, cols, pixels),
        IdxData::Labels(_) => {
            return Err(CoreError::invalid("load_idx", format!("{} holds labels", images.display())))
        }
    };
    let labels = match parse_idx(&read(labels)?)? {
        IdxData::Labels(l) => l,
        IdxData::Images { .. } => {
            return Err(CoreError::invalid("load_idx", format!("{} holds images", labels.display())))
        }
    };
    if labels.len() != n {
        return Err(CoreError::invalid(
            "load_idx",
            format!("{n} images but {} labels", labels.len()),
        ));
    }
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new([1, rows, cols], pixels, labels, classes)
}

/// Standard MNIST-layout directory: `{train,t10k}-{images-idx3,labels-idx1}-ubyte`.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx_pair(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx_pair(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    let classes = train.classes.max(test.classes);
    Ok((
        Dataset { classes, ..train },
        Dataset { classes, ..test },
    ))
}

fn load_cifar_files(paths: &[std::path::PathBuf], variant: CifarVariant) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let (d, l) = parse_cifar(&read(p)?, variant)?;
        data.extend(d);
        labels.extend(l);
    }
    let classes = match variant {
        CifarVariant::C10 => 10,
        CifarVariant::C100Coarse => 20,
    };
    Dataset::new([3, 32, 32], data, labels, classes)
}

/// CIFAR-10 (`data_batch_{1..5}.bin`, `test_batch.bin`) or CIFAR-100
/// (`train.bin`, `test.bin`) binary directory.
pub fn load_cifar_dir(dir: &Path, variant: CifarVariant) -> Result<(Dataset, Dataset)> {
    match variant {
        CifarVariant::C10 => {
            let train: Vec<_> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            Ok((
                load_cifar_files(&train, variant)?,
                load_cifar_files(&[dir.join("test_batch.bin")], variant)?,
            ))
        }
        CifarVariant::C100Coarse => Ok((
            load_cifar_files(&[dir.join("train.bin")], variant)?,
            load_cifar_files(&[dir.join("test.bin")], variant)?,
        )),
    }
}

/// Normal-only training data plus a labeled test split.
#[derive(Debug, Clone, PartialEq)]
pub struct OneClassTask {
    pub normal_class: usize,
    pub classes: usize,
    pub train: Dataset,
    pub test: Dataset,
    /// `true` for test samples of the normal class.
    pub test_normal: Vec<bool>,
}

/// Training samples of `normal_class` only, with the full test split
/// labeled normal versus anomalous.
pub fn make_one_class_task(train: &Dataset, test: &Dataset, normal_class: usize) -> Result<OneClassTask> {
    let classes = train.classes.max(test.classes);
    if classes < 2 {
        return Err(CoreError::invalid(
            "make_one_class_task",
            format!("needs at least two classes, got {classes}"),
        ));
    }
    if normal_class >= classes {
        return Err(CoreError::invalid(
            "make_one_class_task",
            format!("class {normal_class} out of range for {classes} classes"),
        ));
    }
    if train.shape != test.shape {
        return Err(CoreError::invalid(
            "make_one_class_task",
            format!("train shape {:?} differs from test {:?}", train.shape, test.shape),
        ));
    }
    let normal_train = train.filter(|i| train.labels[i] == normal_class);
    if normal_train.is_empty() {
        return Err(CoreError::invalid(
            "make_one_class_task",
            format!("class {normal_class} has no training samples"),
        ));
    }
    Ok(OneClassTask {
        normal_class,
        classes,
        test_normal: test.labels.iter().map(|&l| l == normal_class).collect(),
        train: normal_train,
        test: test.clone(),
    })
}

/// Synthetic sources.
#[derive(Debug, Clone, PartialEq)]
pub enum SynthSpec {
    /// Isotropic Gaussian clusters in `dim` dimensions. Class 0 sits at a
    /// mean of norm `radius`; classes `1..=clusters` sit on the same sphere
    /// at Euclidean distance `separation * sigma` from it.
    GaussClusters {
        dim: usize,
        clusters: usize,
        sigma: f64,
        separation: f64,
        radius: f64,
        train_per_class: usize,
        test_normal: usize,
        test_per_anomaly: usize,
    },
    /// `size x size` single-channel images of four shape classes:
    /// disc, square, cross, ring.
    BlobsImages {
        size: usize,
        train_per_class: usize,
        test_per_class: usize,
    },
}

impl SynthSpec {
    pub fn gauss_clusters() -> Self {
        SynthSpec::GaussClusters {
            dim: 16,
            clusters: 4,
            sigma: 0.1,
            separation: 6.0,
            radius: 0.6,
            train_per_class: 2000,
            test_normal: 500,
            test_per_anomaly: 125,
        }
    }

    pub fn blobs_images() -> Self {
        SynthSpec::BlobsImages {
            size: 16,
            train_per_class: 500,
            test_per_class: 250,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "gauss-clusters" => Ok(Self::gauss_clusters()),
            "blobs-images" => Ok(Self::blobs_images()),
            _ => Err(CoreError::invalid(
                "synth_generate",
                format!("unknown generator `{name}`"),
            )),
        }
    }
}

fn gauss_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Class means for the Gaussian generator.
pub fn gauss_cluster_means(spec: &SynthSpec, seed: u64) -> Result<Vec<Vec<f64>>> {
    let SynthSpec::GaussClusters {
        dim,
        clusters,
        sigma,
        separation,
        radius,
        ..
    } = *spec
    else {
        return Err(CoreError::invalid("gauss_cluster_means", "not a gauss-clusters spec"));
    };
    if dim < 2 || clusters == 0 || !(sigma > 0.0) || !(radius > 0.0) || !(separation >= 0.0) {
        return Err(CoreError::invalid("synth_generate", "invalid gauss-clusters parameters"));
    }
    let mut rng = stream(seed, &[purpose::SYNTH, 0]);
    let m = gauss_vec(&mut rng, dim);
    let mn = norm(&m);
    let m: Vec<f64> = m.iter().map(|v| radius * v / mn).collect();
    let dist = separation * sigma;
    let theta = 2.0 * (dist / (2.0 * radius)).min(1.0).asin();
    let mut means = vec![m.clone()];
    for _ in 0..clusters {
        // Unit direction orthogonal to m, then rotate m by theta toward it.
        let d = gauss_vec(&mut rng, dim);
        let proj = d.iter().zip(&m).map(|(a, b)| a * b).sum::<f64>() / (radius * radius);
        let v: Vec<f64> = d.iter().zip(&m).map(|(a, b)| a - proj * b).collect();
        let vn = norm(&v);
        means.push(
            m.iter()
                .zip(&v)
                .map(|(a, b)| theta.cos() * a + theta.sin() * radius * b / vn)
                .collect(),
        );
    }
    Ok(means)
}

/// Deterministic synthetic (train, test) splits for `spec`.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    match *spec {
        SynthSpec::GaussClusters {
            dim,
            clusters,
            sigma,
            train_per_class,
            test_normal,
            test_per_anomaly,
            ..
        } => {
            let means = gauss_cluster_means(spec, seed)?;
            let draw = |split: u64, counts: &[usize]| {
                let mut rng = stream(seed, &[purpose::SYNTH, split]);
                let mut data = Vec::new();
                let mut labels = Vec::new();
                for (c, &count) in counts.iter().enumerate() {
                    for _ in 0..count {
                        let e = gauss_vec(&mut rng, dim);
                        data.extend(
                            means[c]
                                .iter()
                                .zip(&e)
                                .map(|(m, e)| (m + sigma * e).clamp(-1.0, 1.0) as f32),
                        );
                        labels.push(c);
                    }
                }
                Dataset::new([1, 1, dim], data, labels, clusters + 1)
            };
            let train = draw(1, &vec![train_per_class; clusters + 1])?;
            let mut test_counts = vec![test_per_anomaly; clusters + 1];
            test_counts[0] = test_normal;
            let test = draw(2, &test_counts)?;
            Ok((train, test))
        }
        SynthSpec::BlobsImages {
            size,
            train_per_class,
            test_per_class,
        } => {
            if size < 8 {
                return Err(CoreError::invalid("synth_generate", "blobs-images needs size >= 8"));
            }
            let draw = |split: u64, per: usize| {
                let mut rng = stream(seed, &[purpose::SYNTH, split]);
                let mut data = Vec::new();
                let mut labels = Vec::new();
                for class in 0..4 {
                    for _ in 0..per {
                        data.extend(blob_image(class, size, &mut rng));
                        labels.push(class);
                    }
                }
                Dataset::new([1, size, size], data, labels, 4)
            };
            Ok((draw(1, train_per_class)?, draw(2, test_per_class)?))
        }
    }
}

fn blob_image(class: usize, size: usize, rng: &mut impl Rng) -> Vec<f32> {
    let s = size as f64;
    let cx = s / 2.0 + rng.random_range(-0.15..0.15) * s;
    let cy = s / 2.0 + rng.random_range(-0.15..0.15) * s;
    let r = rng.random_range(0.2..0.32) * s;
    let intensity = rng.random_range(0.5..1.0);
    let mut img = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let inside = match class {
                0 => dx.hypot(dy) <= r,
                1 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
                2 => (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r),
                _ => {
                    let d = dx.hypot(dy);
                    d <= r && d >= r * 0.6
                }
            };
            let noise: f64 = StandardNormal.sample(rng);
            let v = if inside { intensity } else { -1.0 } + 0.05 * noise;
            img.push(v.clamp(-1.0, 1.0) as f32);
        }
    }
    img
}
