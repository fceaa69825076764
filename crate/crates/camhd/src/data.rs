//! Datasets and batching: IDX ingestion for the digit-classification runs
//! plus synthetic generators (Gaussian blobs, rotated quadratic surfaces)
//! used by the verification suites.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Targets;
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Targets,
    pub split: Split,
    /// Scale applied to raw inputs, if any (e.g. 1/255 for pixel data).
    pub input_scale: Option<f64>,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Targets, split: Split) -> Result<Self> {
        let n = inputs.rows();
        let t = match &targets {
            Targets::Labels(l) => l.len(),
            Targets::Values(v) => v.rows(),
        };
        if n != t {
            return Err(Error::Dimension(format!("{n} inputs but {t} targets")));
        }
        Ok(Dataset { inputs, targets, split, input_scale: None })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.len() / self.len().max(1)
    }

    pub fn n_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Labels(l) => l.iter().max().map(|&m| m + 1),
            Targets::Values(_) => None,
        }
    }

    /// Materializes the rows at `indices` as one batch.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Targets)> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Dimension(format!("index {i} out of range")));
            }
            data.extend_from_slice(&self.inputs.data()[i * d..(i + 1) * d]);
        }
        let x = Tensor::new(vec![indices.len(), d], data)?;
        let t = match &self.targets {
            Targets::Labels(l) => Targets::Labels(indices.iter().map(|&i| l[i]).collect()),
            Targets::Values(v) => {
                let k = v.cols();
                let mut td = Vec::with_capacity(indices.len() * k);
                for &i in indices {
                    td.extend_from_slice(&v.data()[i * k..(i + 1) * k]);
                }
                Targets::Values(Tensor::new(vec![indices.len(), k], td)?)
            }
        };
        Ok((x, t))
    }

    /// Rescales inputs into [0, 1] by the global max-abs. Applying it twice
    /// is the same as applying it once.
    pub fn normalize(&mut self) {
        let max = self.inputs.data().iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        if max > 1.0 {
            for x in self.inputs.data_mut() {
                *x /= max;
            }
            self.input_scale = Some(self.input_scale.unwrap_or(1.0) / max);
        }
    }
}

/// Yields shuffled index batches, one full pass per epoch. The order is a
/// pure function of (seed, epoch), and the last partial batch is kept.
pub struct BatchIterator {
    n: usize,
    batch_size: usize,
    seed: u64,
    pub epoch: u64,
}

impl BatchIterator {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(BatchIterator { n, batch_size, seed, epoch: 0 })
    }

    /// Batches for the next epoch, advancing the epoch counter.
    pub fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.n).collect();
        let mut rng = Rng::new(self.seed ^ self.epoch.wrapping_mul(0x9E3779B97F4A7C15));
        rng.shuffle(&mut idx);
        self.epoch += 1;
        idx.chunks(self.batch_size).map(|c| c.to_vec()).collect()
    }
}

fn read_u32_be(buf: &[u8], offset: usize) -> Result<u32> {
    buf.get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Format {
            offset: offset as u64,
            msg: "unexpected end of file".into(),
        })
}

/// Reads an IDX image file (magic 0x00000803) into an N×(rows·cols) tensor
/// with pixels scaled into [0, 1].
pub fn read_idx_images(path: &Path) -> Result<Tensor> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    let magic = read_u32_be(&buf, 0)?;
    if magic != 0x0000_0803 {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad image magic {magic:#010x}, expected 0x00000803"),
        });
    }
    let n = read_u32_be(&buf, 4)? as usize;
    let rows = read_u32_be(&buf, 8)? as usize;
    let cols = read_u32_be(&buf, 12)? as usize;
    let want = 16 + n * rows * cols;
    if buf.len() != want {
        return Err(Error::Format {
            offset: buf.len().min(want) as u64,
            msg: format!("image file is {} bytes, header implies {want}", buf.len()),
        });
    }
    let data = buf[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![n, rows * cols], data)
}

/// Reads an IDX label file (magic 0x00000801) into 0–9 class labels.
pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    let magic = read_u32_be(&buf, 0)?;
    if magic != 0x0000_0801 {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad label magic {magic:#010x}, expected 0x00000801"),
        });
    }
    let n = read_u32_be(&buf, 4)? as usize;
    let want = 8 + n;
    if buf.len() != want {
        return Err(Error::Format {
            offset: buf.len().min(want) as u64,
            msg: format!("label file is {} bytes, header implies {want}", buf.len()),
        });
    }
    for (i, &b) in buf[8..].iter().enumerate() {
        if b > 9 {
            return Err(Error::Format {
                offset: (8 + i) as u64,
                msg: format!("label {b} out of range 0-9"),
            });
        }
    }
    Ok(buf[8..].iter().map(|&b| b as usize).collect())
}

/// Loads the standard four-file IDX layout from `dir`:
/// train-images-idx3-ubyte, train-labels-idx1-ubyte, t10k-images-idx3-ubyte,
/// t10k-labels-idx1-ubyte. Returns (train, test). Validation uses the test
/// split directly.
pub fn load_mnist_idx(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train_x = read_idx_images(&dir.join("train-images-idx3-ubyte"))?;
    let train_y = read_idx_labels(&dir.join("train-labels-idx1-ubyte"))?;
    let test_x = read_idx_images(&dir.join("t10k-images-idx3-ubyte"))?;
    let test_y = read_idx_labels(&dir.join("t10k-labels-idx1-ubyte"))?;
    let mut train = Dataset::new(train_x, Targets::Labels(train_y), Split::Train)?;
    let mut test = Dataset::new(test_x, Targets::Labels(test_y), Split::Test)?;
    train.input_scale = Some(1.0 / 255.0);
    test.input_scale = Some(1.0 / 255.0);
    Ok((train, test))
}

/// Gaussian clusters with unit variance and axis-aligned means spaced
/// `separation` apart. Linearly separable when separation is a few sigma.
pub fn make_blobs(
    n: usize,
    d: usize,
    classes: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || d == 0 || classes == 0 {
        return Err(Error::Config("n, d, classes must all be >= 1".into()));
    }
    let mut rng = Rng::new(seed);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        // mean for class c: separation * (1 + c / d) along axis c mod d
        let axis = c % d;
        let shift = separation * (1.0 + (c / d) as f64);
        for j in 0..d {
            let mu = if j == axis { shift } else { 0.0 };
            data.push(mu + rng.normal());
        }
        labels.push(c);
    }
    Dataset::new(
        Tensor::new(vec![n, d], data)?,
        Targets::Labels(labels),
        Split::Train,
    )
}

/// f(theta) = 1/2 (theta - theta*)' A (theta - theta*) with symmetric
/// positive-definite A, eigenvalues in [1, condition number].
#[derive(Debug, Clone)]
pub struct Quadratic {
    a: Tensor,
    theta_star: Vec<f64>,
    /// Largest eigenvalue of A (the smoothness constant).
    pub lipschitz: f64,
}

impl Quadratic {
    pub fn d(&self) -> usize {
        self.theta_star.len()
    }

    pub fn solution(&self) -> &[f64] {
        &self.theta_star
    }

    pub fn matrix(&self) -> &Tensor {
        &self.a
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        let g = self.grad(theta);
        let diff: Vec<f64> = theta.iter().zip(&self.theta_star).map(|(t, s)| t - s).collect();
        0.5 * diff.iter().zip(&g).map(|(d, g)| d * g).sum::<f64>()
    }

    pub fn grad(&self, theta: &[f64]) -> Vec<f64> {
        let d = self.d();
        let mut out = vec![0.0; d];
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += self.a.data()[i * d + j] * (theta[j] - self.theta_star[j]);
            }
            out[i] = acc;
        }
        out
    }
}

/// Builds A by applying random Givens rotations to a diagonal of eigenvalues
/// spread evenly over [1, cond] (for d = 1, A = [cond]).
pub fn make_quadratic(d: usize, cond: f64, seed: u64) -> Result<Quadratic> {
    if d == 0 {
        return Err(Error::Config("d must be >= 1".into()));
    }
    if cond < 1.0 {
        return Err(Error::Config("condition number must be >= 1".into()));
    }
    let mut rng = Rng::new(seed);
    let mut a = Tensor::zeros(vec![d, d]);
    for i in 0..d {
        let eig = if d == 1 {
            cond
        } else {
            1.0 + (cond - 1.0) * i as f64 / (d - 1) as f64
        };
        a.set(i, i, eig);
    }
    // A <- G A G' for each adjacent pair, with a random angle per pair
    for i in 0..d.saturating_sub(1) {
        let angle = rng.uniform(0.0, std::f64::consts::PI);
        let (c, s) = (angle.cos(), angle.sin());
        let mut g = Tensor::zeros(vec![d, d]);
        for k in 0..d {
            g.set(k, k, 1.0);
        }
        g.set(i, i, c);
        g.set(i, i + 1, -s);
        g.set(i + 1, i, s);
        g.set(i + 1, i + 1, c);
        a = g.matmul(&a)?.matmul(&g.transpose()?)?;
    }
    let theta_star: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    Ok(Quadratic { a, theta_star, lipschitz: cond })
}
