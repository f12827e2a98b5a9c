//! Synthetic datasets, splitting, and teacher training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{init_params, mlp_spec, ActivationCache, ClassSpec, LearnerParams};
use crate::rng::RngStream;
use crate::tensor::Mat;
use crate::train::{fit, HardLabelCe, SgdConfig, TrainData};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub x: Mat,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub teacher_logits: Option<Mat>,
}

impl LabeledDataset {
    pub fn new(x: Mat, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let ds = Self {
            x,
            labels,
            classes,
            teacher_logits: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.x.rows() {
            return Err(Error::Data(format!(
                "{} labels for {} rows",
                self.labels.len(),
                self.x.rows()
            )));
        }
        if let Some(bad) = self.labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {})", self.classes)));
        }
        if let Some(g) = &self.teacher_logits {
            if g.rows() != self.x.rows() {
                return Err(Error::Data(format!(
                    "{} teacher logit rows for {} rows",
                    g.rows(),
                    self.x.rows()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            teacher_logits: self.teacher_logits.as_ref().map(|g| g.select_rows(idx)),
        }
    }

    pub fn teacher_logits(&self) -> Result<&Mat> {
        self.teacher_logits
            .as_ref()
            .ok_or_else(|| Error::Data("dataset has no teacher logits".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Ellipsoid,
    Cube,
}

/// Sidecar describing how a dataset was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: Generator,
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    /// Ellipsoid: label is `xᵀAx ≥ threshold`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    /// Cube: vertices in class order, `vertices.len() / classes` per class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vertices: Option<Vec<Vec<f64>>>,
}

fn uniform_points(rng: &mut RngStream, n: usize, d: usize) -> Result<Mat> {
    let data = (0..n * d).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    Mat::from_vec(n, d, data)
}

/// Points uniform in `[−1, 1]^d`, labelled by whether the quadratic form
/// `xᵀAx` (with `A = BᵀB`, `B` standard normal) reaches its sample median.
pub fn gen_ellipsoid(seed: u64, n: usize, d: usize) -> Result<(LabeledDataset, DatasetMeta)> {
    if n < 2 || d == 0 {
        return Err(Error::Config(format!(
            "ellipsoid needs n >= 2 and d >= 1, got n={n}, d={d}"
        )));
    }
    let root = RngStream::new(seed);
    let b = Mat::from_vec(d, d, root.split(0).gaussian(d * d))?;
    let x = uniform_points(&mut root.split(1), n, d)?;
    let q = quadratic_form(&b, &x)?;
    let threshold = median(&q);
    let labels = q.iter().map(|&v| usize::from(v >= threshold)).collect();
    let meta = DatasetMeta {
        generator: Generator::Ellipsoid,
        seed,
        n,
        d,
        classes: 2,
        threshold: Some(threshold),
        vertices: None,
    };
    Ok((LabeledDataset::new(x, labels, 2)?, meta))
}

/// `xᵢᵀ(BᵀB)xᵢ = ‖Bxᵢ‖²` for every row.
fn quadratic_form(b: &Mat, x: &Mat) -> Result<Vec<f64>> {
    let bx = x.matmul_t(b)?;
    Ok((0..bx.rows()).map(|i| bx.row(i).iter().map(|v| v * v).sum()).collect())
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Points uniform in `[−1, 1]^d`, labelled by the class owning the nearest
/// of `vertices` distinct cube corners (sequential equal partition).
pub fn gen_cube(
    seed: u64,
    n: usize,
    d: usize,
    classes: usize,
    vertices: usize,
) -> Result<(LabeledDataset, DatasetMeta)> {
    if classes == 0 || vertices == 0 || !vertices.is_multiple_of(classes) {
        return Err(Error::Config(format!(
            "{vertices} vertices cannot be split evenly into {classes} classes"
        )));
    }
    if d == 0 || (d < 64 && (1u64 << d) < vertices as u64) {
        return Err(Error::Config(format!("{{-1,1}}^{d} has fewer than {vertices} corners")));
    }
    let root = RngStream::new(seed);
    let mut vrng = root.split(0);
    let mut corners: Vec<Vec<f64>> = Vec::with_capacity(vertices);
    while corners.len() < vertices {
        let c: Vec<f64> = (0..d)
            .map(|_| if vrng.next_u64() & 1 == 1 { 1.0 } else { -1.0 })
            .collect();
        if !corners.contains(&c) {
            corners.push(c);
        }
    }
    let x = uniform_points(&mut root.split(1), n, d)?;
    let labels = (0..n).map(|i| cube_label(x.row(i), &corners, classes)).collect();
    let meta = DatasetMeta {
        generator: Generator::Cube,
        seed,
        n,
        d,
        classes,
        threshold: None,
        vertices: Some(corners),
    };
    Ok((LabeledDataset::new(x, labels, classes)?, meta))
}

/// Class of the nearest vertex; ties go to the lowest class index.
pub fn cube_label(x: &[f64], vertices: &[Vec<f64>], classes: usize) -> usize {
    let per_class = vertices.len() / classes;
    let mut best = (f64::INFINITY, 0);
    for (v, vertex) in vertices.iter().enumerate() {
        let dist: f64 = x.iter().zip(vertex).map(|(a, b)| (a - b) * (a - b)).sum();
        let class = v / per_class;
        if dist < best.0 || (dist == best.0 && class < best.1) {
            best = (dist, class);
        }
    }
    best.1
}

/// Recompute labels from stored generator metadata.
pub fn relabel(x: &Mat, meta: &DatasetMeta) -> Result<Vec<usize>> {
    match meta.generator {
        Generator::Cube => {
            let vertices = meta
                .vertices
                .as_ref()
                .ok_or_else(|| Error::Data("cube metadata without vertices".into()))?;
            Ok((0..x.rows())
                .map(|i| cube_label(x.row(i), vertices, meta.classes))
                .collect())
        }
        Generator::Ellipsoid => Err(Error::Data(
            "ellipsoid labels depend on the generating matrix; regenerate from the seed".into(),
        )),
    }
}

/// Deterministic shuffled split; each side keeps the original row order.
pub fn split(ds: &LabeledDataset, fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "split fraction must be in (0, 1), got {fraction}"
        )));
    }
    let n = ds.len();
    let n_train = (n as f64 * fraction).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::Data(format!(
            "{n} rows cannot be split {fraction} with both sides non-empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(seed).shuffle(&mut order);
    let (train, test) = order.split_at_mut(n_train);
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.select(train), ds.select(test)))
}

/// Train an MLP with cross-entropy on hard labels.
pub fn train_teacher(train: &LabeledDataset, widths: &[usize], recipe: &SgdConfig, seed: u64) -> Result<LearnerParams> {
    let class = ClassSpec::plain(mlp_spec(widths)?)?;
    if class.input_dim() != train.dim() || class.output_dim() != train.classes {
        return Err(Error::Config(format!(
            "teacher widths {widths:?} do not map {} features to {} classes",
            train.dim(),
            train.classes
        )));
    }
    let root = RngStream::new(seed);
    let mut params = init_params(&class, &mut root.split(0))?;
    let objective = HardLabelCe { labels: &train.labels };
    fit(
        &mut params,
        TrainData::new(&train.x, None),
        &objective,
        recipe,
        &root.split(1),
    )?;
    Ok(params)
}

/// Logits of a standalone model (no connections) on `x`.
pub fn model_logits(model: &LearnerParams, x: &Mat) -> Result<Mat> {
    model.predict(x, &ActivationCache::new())
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of rows whose argmax logit equals the label.
pub fn accuracy(logits: &Mat, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = (0..logits.rows())
        .filter(|&i| argmax(logits.row(i)) == labels[i])
        .count();
    hits as f64 / labels.len() as f64
}
