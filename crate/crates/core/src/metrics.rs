//! Similarity backends and the reproducibility / generalization scores.
//!
//! Every score is a threshold-exceedance frequency over sample pairs:
//!
//! * RP: matched pairs from two sample sets (same noise id) whose descriptor
//!   cosine exceeds `tau`.
//! * MAE: matched pairs whose mean absolute 8-bit pixel difference is below a
//!   threshold (15 by default).
//! * GL: one minus the fraction of samples whose best cosine against the
//!   training set exceeds `tau`.
//! * RP_cond / RP_between: the class-conditional variants.
//!
//! Pairing is always by id, never by position, so scores do not depend on
//! sample order.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::image::{to_8bit, Image};
use crate::tensor_file::{read_tensor, write_tensor, Tensor};

/// Descriptor vectors for [`BackendKind::ExternalEmbedding`], loaded from a
/// `(N, D)` tensor file and a newline-separated list of `N` ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    index: HashMap<String, usize>,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() != ids.len() * dim {
            return Err(Error::InvalidShape(format!(
                "{} ids with dimension {dim} need {} values, got {}",
                ids.len(),
                ids.len() * dim,
                data.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, id) in ids.into_iter().enumerate() {
            if index.insert(id.clone(), row).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate embedding id {id:?}"
                )));
            }
        }
        Ok(EmbeddingTable { index, dim, data })
    }

    pub fn load(table: impl AsRef<Path>, ids: impl AsRef<Path>) -> Result<Self> {
        let t = read_tensor(table.as_ref())?;
        let [_, dim] = t.dims.as_slice() else {
            return Err(Error::InvalidShape(format!(
                "{}: embedding table must be (N, D), got {:?}",
                table.as_ref().display(),
                t.dims
            )));
        };
        let ids_path = ids.as_ref();
        let text = fs::read_to_string(ids_path).map_err(|e| Error::io(ids_path, e))?;
        let ids: Vec<String> = text.lines().map(str::to_owned).collect();
        EmbeddingTable::new(
            ids,
            *dim as usize,
            t.data.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index
            .get(id)
            .map(|&row| &self.data[row * self.dim..(row + 1) * self.dim])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendKind {
    /// Cosine of the mean-centered flat pixel vectors.
    PixelCosine,
    /// Cosine of per-patch (mean, variance, gradient energy) features.
    PatchDescriptor { patch: usize, stride: usize },
    /// Cosine of precomputed embeddings looked up by sample key.
    ExternalEmbedding(Arc<EmbeddingTable>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBackend {
    pub kind: BackendKind,
    /// Pairs with similarity strictly above `tau` count as matches.
    pub tau: f64,
}

/// An image together with the id used for embedding lookups.
#[derive(Debug, Clone, Copy)]
pub struct Item<'a> {
    pub image: &'a Image,
    pub key: Option<&'a str>,
}

impl<'a> From<&'a Image> for Item<'a> {
    fn from(image: &'a Image) -> Self {
        Item { image, key: None }
    }
}

impl SimilarityBackend {
    pub const DEFAULT_PIXEL_TAU: f64 = 0.99;
    pub const DEFAULT_EMBEDDING_TAU: f64 = 0.6;

    pub fn pixel_cosine() -> Self {
        SimilarityBackend {
            kind: BackendKind::PixelCosine,
            tau: Self::DEFAULT_PIXEL_TAU,
        }
    }

    pub fn patch_descriptor(patch: usize, stride: usize) -> Self {
        SimilarityBackend {
            kind: BackendKind::PatchDescriptor { patch, stride },
            tau: Self::DEFAULT_PIXEL_TAU,
        }
    }

    pub fn external(table: EmbeddingTable) -> Self {
        SimilarityBackend {
            kind: BackendKind::ExternalEmbedding(Arc::new(table)),
            tau: Self::DEFAULT_EMBEDDING_TAU,
        }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "similarity threshold {} not in (0, 1)",
                self.tau
            )));
        }
        if let BackendKind::PatchDescriptor { patch, stride } = self.kind {
            if patch == 0 || stride == 0 {
                return Err(Error::InvalidArgument(
                    "patch size and stride must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    /// Unit-norm descriptor of one item.
    pub fn descriptor(&self, item: Item<'_>) -> Result<Vec<f64>> {
        let raw = match &self.kind {
            BackendKind::PixelCosine => {
                let x = item.image.data();
                if x.iter().all(|&v| v == x[0]) {
                    return Err(Error::ZeroNormDescriptor);
                }
                let m = item.image.mean();
                item.image.data().iter().map(|v| v - m).collect()
            }
            BackendKind::PatchDescriptor { patch, stride } => {
                patch_features(item.image, *patch, *stride)
            }
            BackendKind::ExternalEmbedding(table) => {
                let key = item
                    .key
                    .ok_or_else(|| Error::MissingEmbedding("<image without id>".into()))?;
                table
                    .get(key)
                    .ok_or_else(|| Error::MissingEmbedding(key.to_owned()))?
                    .to_vec()
            }
        };
        normalize(raw)
    }

    /// Cosine similarity of the two descriptors, in `[-1, 1]`.
    pub fn similarity<'a>(&self, a: impl Into<Item<'a>>, b: impl Into<Item<'a>>) -> Result<f64> {
        let (a, b) = (a.into(), b.into());
        a.image.check_same_shape(b.image)?;
        Ok(cosine(&self.descriptor(a)?, &self.descriptor(b)?))
    }
}

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroNormDescriptor);
    }
    for x in &mut v {
        *x /= norm;
    }
    Ok(v)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x * y)
        .sum::<f64>()
        .clamp(-1.0, 1.0)
}

fn patch_features(img: &Image, patch: usize, stride: usize) -> Vec<f64> {
    let s = img.shape();
    let ph = patch.min(s.height);
    let pw = patch.min(s.width);
    let x = img.data();
    let mut out = Vec::new();
    let mut r0 = 0;
    while r0 + ph <= s.height {
        let mut c0 = 0;
        while c0 + pw <= s.width {
            for ch in 0..s.channels {
                let at = |r: usize, c: usize| x[s.index(r0 + r, c0 + c, ch)];
                let n = (ph * pw) as f64;
                let mut sum = 0.0;
                let mut grad = 0.0;
                for r in 0..ph {
                    for c in 0..pw {
                        let v = at(r, c);
                        sum += v;
                        if c + 1 < pw {
                            grad += (at(r, c + 1) - v).powi(2);
                        }
                        if r + 1 < ph {
                            grad += (at(r + 1, c) - v).powi(2);
                        }
                    }
                }
                let mean = sum / n;
                let var = (0..ph)
                    .flat_map(|r| (0..pw).map(move |c| (r, c)))
                    .map(|(r, c)| (at(r, c) - mean).powi(2))
                    .sum::<f64>()
                    / n;
                out.extend([mean, var, grad / n]);
            }
            c0 += stride;
        }
        r0 += stride;
    }
    out
}

/// Generated images from one "model", tagged with the noise ids that produced
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub model_id: String,
    pub images: Vec<Image>,
    pub noise_ids: Vec<u64>,
    pub labels: Option<Vec<u32>>,
}

impl SampleSet {
    pub fn new(
        model_id: impl Into<String>,
        images: Vec<Image>,
        noise_ids: Vec<u64>,
        labels: Option<Vec<u32>>,
    ) -> Result<Self> {
        let model_id = model_id.into();
        if images.len() != noise_ids.len()
            || labels.as_ref().is_some_and(|l| l.len() != images.len())
        {
            return Err(Error::InvalidArgument(format!(
                "sample set {model_id:?}: images, noise ids and labels differ in length"
            )));
        }
        if let Some(first) = images.first() {
            for img in &images {
                first.check_same_shape(img)?;
            }
        }
        let mut seen = std::collections::HashSet::new();
        for i in 0..images.len() {
            let key = (noise_ids[i], labels.as_ref().map(|l| l[i]));
            if !seen.insert(key) {
                return Err(Error::InvalidArgument(format!(
                    "sample set {model_id:?}: duplicate noise id {}{}",
                    key.0,
                    key.1.map(|c| format!(" for class {c}")).unwrap_or_default()
                )));
            }
        }
        Ok(SampleSet {
            model_id,
            images,
            noise_ids,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Embedding-table id of sample `i`: `model/noise` or `model/noise/class`.
    pub fn key(&self, i: usize) -> String {
        match &self.labels {
            Some(l) => format!("{}/{}/{}", self.model_id, self.noise_ids[i], l[i]),
            None => format!("{}/{}", self.model_id, self.noise_ids[i]),
        }
    }

    fn item_keys(&self) -> Vec<String> {
        (0..self.len()).map(|i| self.key(i)).collect()
    }

    /// Writes `samples.drtf`, `noise_ids.txt`, `model_id.txt` and, when
    /// labelled, `labels.txt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_tensor(
            dir.join("samples.drtf"),
            &Tensor::from_images(&self.images)?,
        )?;
        let write = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(p, e))
        };
        write("noise_ids.txt", lines(&self.noise_ids))?;
        write("model_id.txt", format!("{}\n", self.model_id))?;
        if let Some(l) = &self.labels {
            write("labels.txt", lines(l))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let images = read_tensor(dir.join("samples.drtf"))?.to_images()?;
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(p, e))
        };
        let noise_ids = parse_lines(&read("noise_ids.txt")?, &dir.join("noise_ids.txt"))?;
        let model_id = match read("model_id.txt") {
            Ok(s) => s.trim().to_owned(),
            Err(_) => dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        };
        let labels_path = dir.join("labels.txt");
        let labels = if labels_path.exists() {
            Some(parse_lines(&read("labels.txt")?, &labels_path)?)
        } else {
            None
        };
        SampleSet::new(model_id, images, noise_ids, labels)
    }
}

fn lines<T: std::fmt::Display>(values: &[T]) -> String {
    values.iter().fold(String::new(), |mut s, v| {
        let _ = writeln!(s, "{v}");
        s
    })
}

fn parse_lines<T: std::str::FromStr>(text: &str, path: &Path) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse()
                .map_err(|e| Error::InvalidArgument(format!("{}: {l:?}: {e}", path.display())))
        })
        .collect()
}

/// Index pairs `(i, j)` with matching noise id (and class, when `by_class`).
fn matched_pairs(a: &SampleSet, b: &SampleSet, by_class: bool) -> Result<Vec<(usize, usize)>> {
    let class = |s: &SampleSet, i: usize| {
        if by_class {
            s.labels.as_ref().map(|l| l[i])
        } else {
            None
        }
    };
    let index: HashMap<(u64, Option<u32>), usize> = (0..b.len())
        .map(|j| ((b.noise_ids[j], class(b, j)), j))
        .collect();
    let pairs: Vec<(usize, usize)> = (0..a.len())
        .filter_map(|i| index.get(&(a.noise_ids[i], class(a, i))).map(|&j| (i, j)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::NoMatchedPairs {
            a: a.model_id.clone(),
            b: b.model_id.clone(),
        });
    }
    Ok(pairs)
}

fn set_descriptors(backend: &SimilarityBackend, set: &SampleSet) -> Result<Vec<Vec<f64>>> {
    let keys = set.item_keys();
    set.images
        .par_iter()
        .zip(keys.par_iter())
        .map(|(image, key)| {
            backend.descriptor(Item {
                image,
                key: Some(key),
            })
        })
        .collect()
}

fn train_descriptors(backend: &SimilarityBackend, train: &Dataset) -> Result<Vec<Vec<f64>>> {
    train
        .images()
        .par_iter()
        .enumerate()
        .map(|(i, image)| {
            let key = format!("train/{i}");
            backend.descriptor(Item {
                image,
                key: Some(&key),
            })
        })
        .collect()
}

fn fraction(hits: usize, total: usize) -> f64 {
    hits as f64 / total as f64
}

fn rp_with(
    a: &SampleSet,
    b: &SampleSet,
    backend: &SimilarityBackend,
    by_class: bool,
) -> Result<f64> {
    let pairs = matched_pairs(a, b, by_class)?;
    let (da, db) = (set_descriptors(backend, a)?, set_descriptors(backend, b)?);
    let hits = pairs
        .par_iter()
        .filter(|&&(i, j)| cosine(&da[i], &db[j]) > backend.tau)
        .count();
    Ok(fraction(hits, pairs.len()))
}

/// Reproducibility score: fraction of noise-matched pairs with similarity
/// above `tau`. Labelled sets are additionally matched by class.
pub fn rp_score(a: &SampleSet, b: &SampleSet, backend: &SimilarityBackend) -> Result<f64> {
    let by_class = a.labels.is_some() && b.labels.is_some();
    rp_with(a, b, backend, by_class)
}

/// Mean absolute difference of two images in 8-bit pixel space.
pub fn pixel_mae(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let total: u64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (to_8bit(*x) as i32 - to_8bit(*y) as i32).unsigned_abs() as u64)
        .sum();
    Ok(total as f64 / a.len() as f64)
}

pub const DEFAULT_MAE_THRESHOLD: f64 = 15.0;

/// Fraction of noise-matched pairs whose pixel-space MAE is below `threshold`.
pub fn mae_score(a: &SampleSet, b: &SampleSet, threshold: f64) -> Result<f64> {
    let by_class = a.labels.is_some() && b.labels.is_some();
    let pairs = matched_pairs(a, b, by_class)?;
    let maes = pairs
        .par_iter()
        .map(|&(i, j)| pixel_mae(&a.images[i], &b.images[j]))
        .collect::<Result<Vec<_>>>()?;
    Ok(fraction(
        maes.iter().filter(|&&m| m < threshold).count(),
        pairs.len(),
    ))
}

/// Generalization score: `1 - P(max_i sim(x, y_i) > tau)`.
pub fn gl_score(samples: &SampleSet, train: &Dataset, backend: &SimilarityBackend) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty(format!("sample set {:?}", samples.model_id)));
    }
    let ds = set_descriptors(backend, samples)?;
    let dt = train_descriptors(backend, train)?;
    let memorized = ds
        .par_iter()
        .filter(|d| dt.iter().any(|t| cosine(d, t) > backend.tau))
        .count();
    Ok(1.0 - fraction(memorized, samples.len()))
}

/// Per-sample best similarity to the training set and MAE to that nearest
/// neighbour, in input order.
pub fn nearest_train(
    samples: &[Image],
    train: &Dataset,
    backend: &SimilarityBackend,
) -> Result<Vec<(usize, f64, f64)>> {
    let dt = train_descriptors(backend, train)?;
    samples
        .par_iter()
        .map(|x| {
            let d = backend.descriptor(x.into())?;
            let (best, sim) = dt.iter().enumerate().map(|(i, t)| (i, cosine(&d, t))).fold(
                (0, f64::NEG_INFINITY),
                |acc, c| if c.1 > acc.1 { c } else { acc },
            );
            Ok((best, sim, pixel_mae(x, train.image(best))?))
        })
        .collect()
}

/// Smallest pixel-space MAE from each sample to any training image.
pub fn nearest_train_mae(samples: &[Image], train: &Dataset) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .map(|x| {
            train
                .images()
                .iter()
                .map(|y| pixel_mae(x, y))
                .try_fold(f64::INFINITY, |m, v| v.map(|v| m.min(v)))
        })
        .collect()
}

/// Conditional reproducibility: pairs matched on noise id and class.
pub fn rp_cond(a: &SampleSet, b: &SampleSet, backend: &SimilarityBackend) -> Result<f64> {
    for s in [a, b] {
        if s.labels.is_none() {
            return Err(Error::MissingLabels(s.model_id.clone()));
        }
    }
    rp_with(a, b, backend, true)
}

/// Between reproducibility: for each unconditional sample, whether any
/// class-conditional sample from the same noise exceeds `tau`.
pub fn rp_between(
    uncond: &SampleSet,
    cond: &SampleSet,
    backend: &SimilarityBackend,
) -> Result<f64> {
    if cond.labels.is_none() {
        return Err(Error::MissingLabels(cond.model_id.clone()));
    }
    let mut by_noise: HashMap<u64, Vec<usize>> = HashMap::new();
    for (j, &n) in cond.noise_ids.iter().enumerate() {
        by_noise.entry(n).or_default().push(j);
    }
    let groups: Vec<(usize, &Vec<usize>)> = (0..uncond.len())
        .filter_map(|i| by_noise.get(&uncond.noise_ids[i]).map(|g| (i, g)))
        .collect();
    if groups.is_empty() {
        return Err(Error::NoMatchedPairs {
            a: uncond.model_id.clone(),
            b: cond.model_id.clone(),
        });
    }
    let (du, dc) = (
        set_descriptors(backend, uncond)?,
        set_descriptors(backend, cond)?,
    );
    let hits = groups
        .par_iter()
        .filter(|(i, g)| {
            g.iter()
                .map(|&j| cosine(&du[*i], &dc[j]))
                .fold(f64::NEG_INFINITY, f64::max)
                > backend.tau
        })
        .count();
    Ok(fraction(hits, groups.len()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Rp,
    Mae { threshold: f64 },
}

/// Pairwise scores between sample sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub model_ids: Vec<String>,
    /// Row-major `k x k` entries.
    pub entries: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row][col]
    }

    /// Header row and first column hold model ids; entries use 6 decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model_id");
        for id in &self.model_ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (id, row) in self.model_ids.iter().zip(&self.entries) {
            out.push_str(id);
            for v in row {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }
}

fn id_keys(s: &SampleSet) -> std::collections::HashSet<(u64, Option<u32>)> {
    (0..s.len())
        .map(|i| (s.noise_ids[i], s.labels.as_ref().map(|l| l[i])))
        .collect()
}

/// Errors unless both sets hold exactly the same (noise id, class) keys.
pub fn check_same_ids(a: &SampleSet, b: &SampleSet) -> Result<()> {
    let (ka, kb) = (id_keys(a), id_keys(b));
    let only_a = ka.difference(&kb).count();
    let only_b = kb.difference(&ka).count();
    if only_a + only_b > 0 {
        return Err(Error::MismatchedIds {
            a: a.model_id.clone(),
            b: b.model_id.clone(),
            only_a,
            only_b,
        });
    }
    Ok(())
}

/// Pairwise scores between sample sets, which must share one id set.
pub fn score_matrix(
    sets: &[SampleSet],
    backend: &SimilarityBackend,
    metric: Metric,
) -> Result<ScoreMatrix> {
    if sets.is_empty() {
        return Err(Error::Empty("no sample sets".into()));
    }
    for (i, a) in sets.iter().enumerate() {
        for b in &sets[i + 1..] {
            check_same_ids(a, b)?;
        }
    }
    let k = sets.len();
    let mut entries = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i..k {
            let v = match metric {
                Metric::Rp => rp_score(&sets[i], &sets[j], backend)?,
                Metric::Mae { threshold } => mae_score(&sets[i], &sets[j], threshold)?,
            };
            entries[i][j] = v;
            entries[j][i] = v;
        }
    }
    Ok(ScoreMatrix {
        model_ids: sets.iter().map(|s| s.model_id.clone()).collect(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Shape;
    use crate::rng::{sample_standard_normal, SeededRng};
    use proptest::prelude::*;

    fn shape() -> Shape {
        Shape::new(4, 4, 3).unwrap()
    }

    fn noise(stream: u64) -> Image {
        sample_standard_normal(&mut SeededRng::new(77, stream), shape())
    }

    fn antipode(x: &Image) -> Image {
        let m = x.mean();
        Image::new(x.shape(), x.data().iter().map(|v| -v + 2.0 * m).collect()).unwrap()
    }

    fn one_hot(k: usize) -> Image {
        let mut img = Image::filled(shape(), -1.0);
        img.data_mut()[k] = 1.0;
        img
    }

    #[test]
    fn self_similarity_is_one_for_every_backend() {
        let x = noise(0);
        let table = EmbeddingTable::new(vec!["a".into()], 2, vec![0.3, 0.4]).unwrap();
        for b in [
            SimilarityBackend::pixel_cosine(),
            SimilarityBackend::patch_descriptor(2, 1),
        ] {
            assert!((b.similarity(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        }
        let ext = SimilarityBackend::external(table);
        let it = Item {
            image: &x,
            key: Some("a"),
        };
        assert!((ext.similarity(it, it).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pixel_cosine_antipode() {
        let x = noise(1);
        let s = SimilarityBackend::pixel_cosine()
            .similarity(&x, &antipode(&x))
            .unwrap();
        assert!((s + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pixel_cosine_ignores_positive_affine_rescaling() {
        let x = noise(2);
        let y = noise(3);
        let b = SimilarityBackend::pixel_cosine();
        let base = b.similarity(&x, &y).unwrap();
        let t = Image::new(shape(), x.data().iter().map(|v| 3.5 * v - 0.25).collect()).unwrap();
        assert!((b.similarity(&t, &y).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn external_embedding_cosines() {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let table = EmbeddingTable::new(
            vec!["e1".into(), "e2".into(), "e12".into()],
            2,
            vec![1.0, 0.0, 0.0, 1.0, r, r],
        )
        .unwrap();
        let b = SimilarityBackend::external(table);
        let x = noise(0);
        let it = |k| Item {
            image: &x,
            key: Some(k),
        };
        assert!(b.similarity(it("e1"), it("e2")).unwrap().abs() < 1e-12);
        assert!((b.similarity(it("e1"), it("e12")).unwrap() - r).abs() < 1e-12);
        assert!((b.similarity(it("e2"), it("e12")).unwrap() - r).abs() < 1e-12);
        assert!(
            matches!(b.similarity(it("e1"), it("zz")), Err(Error::MissingEmbedding(k)) if k == "zz")
        );
        assert!(b.similarity(&x, &x).is_err());
    }

    #[test]
    fn embedding_table_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_tensor(
            dir.path().join("t.drtf"),
            &Tensor::new(vec![2, 3], vec![1., 0., 0., 0., 2., 0.]).unwrap(),
        )
        .unwrap();
        fs::write(dir.path().join("ids.txt"), "m/0\nm/1\n").unwrap();
        let t =
            EmbeddingTable::load(dir.path().join("t.drtf"), dir.path().join("ids.txt")).unwrap();
        assert_eq!(t.get("m/1").unwrap(), &[0.0, 2.0, 0.0]);
        fs::write(dir.path().join("ids.txt"), "m/0\n").unwrap();
        assert!(
            EmbeddingTable::load(dir.path().join("t.drtf"), dir.path().join("ids.txt")).is_err()
        );
    }

    #[test]
    fn zero_norm_descriptor_is_an_error() {
        let flat = Image::filled(shape(), 0.3);
        assert!(matches!(
            SimilarityBackend::pixel_cosine().similarity(&flat, &noise(0)),
            Err(Error::ZeroNormDescriptor)
        ));
    }

    fn set(id: &str, images: Vec<Image>, ids: Vec<u64>) -> SampleSet {
        SampleSet::new(id, images, ids, None).unwrap()
    }

    #[test]
    fn rp_identical_sets() {
        let a = set("a", (0..5).map(noise).collect(), (0..5).collect());
        assert_eq!(
            rp_score(&a, &a, &SimilarityBackend::pixel_cosine()).unwrap(),
            1.0
        );
        assert_eq!(mae_score(&a, &a, 15.0).unwrap(), 1.0);
    }

    #[test]
    fn rp_constructed_three_of_four() {
        let imgs: Vec<Image> = (0..4).map(one_hot).collect();
        let a = set("a", imgs.clone(), vec![0, 1, 2, 3]);
        let mut b_imgs = imgs;
        b_imgs[3] = antipode(&b_imgs[3]);
        let b = set("b", b_imgs, vec![0, 1, 2, 3]);
        assert_eq!(
            rp_score(&a, &b, &SimilarityBackend::pixel_cosine()).unwrap(),
            0.75
        );
    }

    #[test]
    fn rp_of_independent_noise_is_tiny() {
        let big = Shape::new(32, 32, 3).unwrap();
        let draw = |s: u64| sample_standard_normal(&mut SeededRng::new(1, s), big);
        let a = set("a", (0..1000).map(draw).collect(), (0..1000).collect());
        let b = set("b", (1000..2000).map(draw).collect(), (0..1000).collect());
        assert!(rp_score(&a, &b, &SimilarityBackend::pixel_cosine()).unwrap() <= 0.001);
    }

    #[test]
    fn mae_offsets_and_extremes() {
        let base = Image::from_8bit(shape(), &[100u8; 48]).unwrap();
        let shifted = Image::from_8bit(shape(), &[110u8; 48]).unwrap();
        assert_eq!(pixel_mae(&base, &shifted).unwrap(), 10.0);
        let white = Image::filled(shape(), 1.0);
        let black = Image::filled(shape(), -1.0);
        assert_eq!(pixel_mae(&white, &black).unwrap(), 255.0);
        let a = set("a", vec![base, white], vec![0, 1]);
        let b = set("b", vec![shifted, black], vec![0, 1]);
        assert_eq!(mae_score(&a, &b, DEFAULT_MAE_THRESHOLD).unwrap(), 0.5);
    }

    #[test]
    fn gl_scores() {
        let train = Dataset::synthetic(8, shape(), 2).unwrap();
        let backend = SimilarityBackend::pixel_cosine();
        let copies = set("c", train.images().to_vec(), (0..8).collect());
        assert_eq!(gl_score(&copies, &train, &backend).unwrap(), 0.0);
        let noisy = set("n", (0..100).map(noise).collect(), (0..100).collect());
        assert!(gl_score(&noisy, &train, &backend).unwrap() >= 0.999);
        let mut half: Vec<Image> = train.images()[..4].to_vec();
        half.extend((0..4).map(noise));
        let half = set("h", half, (0..8).collect());
        assert!((gl_score(&half, &train, &backend).unwrap() - 0.5).abs() <= 1.0 / 8.0);
    }

    #[test]
    fn unmatched_ids_are_rejected() {
        let a = set("a", vec![noise(0)], vec![1]);
        let b = set("b", vec![noise(0)], vec![2]);
        assert!(matches!(
            rp_score(&a, &b, &SimilarityBackend::pixel_cosine()),
            Err(Error::NoMatchedPairs { .. })
        ));
        assert!(mae_score(&a, &b, 15.0).is_err());
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        assert!(SampleSet::new("a", vec![noise(0), noise(1)], vec![3, 3], None).is_err());
        assert!(
            SampleSet::new("a", vec![noise(0), noise(1)], vec![3, 3], Some(vec![0, 1])).is_ok()
        );
    }

    fn labelled(id: &str, images: Vec<Image>, ids: Vec<u64>, labels: Vec<u32>) -> SampleSet {
        SampleSet::new(id, images, ids, Some(labels)).unwrap()
    }

    #[test]
    fn conditional_scores() {
        let backend = SimilarityBackend::pixel_cosine();
        let imgs: Vec<Image> = (0..6).map(noise).collect();
        let a = labelled(
            "a",
            imgs.clone(),
            vec![0, 0, 1, 1, 2, 2],
            vec![0, 1, 0, 1, 0, 1],
        );
        assert_eq!(rp_cond(&a, &a, &backend).unwrap(), 1.0);
        let plain = set("p", imgs[..2].to_vec(), vec![0, 1]);
        assert!(matches!(
            rp_cond(&plain, &a, &backend),
            Err(Error::MissingLabels(_))
        ));
        assert!(rp_between(&a, &plain, &backend).is_err());
    }

    #[test]
    fn rp_between_picks_the_identical_class() {
        // For each noise id one class sample equals the unconditional sample,
        // the others are orthogonal one-hots.
        let backend = SimilarityBackend::pixel_cosine();
        let u_imgs: Vec<Image> = (0..3).map(one_hot).collect();
        let u = set("u", u_imgs.clone(), vec![0, 1, 2]);
        let mut c_imgs = Vec::new();
        let (mut ids, mut labels) = (Vec::new(), Vec::new());
        for n in 0..3u64 {
            for class in 0..3u32 {
                c_imgs.push(if class as u64 == n {
                    u_imgs[n as usize].clone()
                } else {
                    one_hot(10 + class as usize)
                });
                ids.push(n);
                labels.push(class);
            }
        }
        let c = labelled("c", c_imgs, ids, labels);
        assert_eq!(rp_between(&u, &c, &backend).unwrap(), 1.0);
    }

    #[test]
    fn rp_between_seven_of_ten() {
        let backend = SimilarityBackend::pixel_cosine();
        let u_imgs: Vec<Image> = (0..10).map(one_hot).collect();
        let u = set("u", u_imgs.clone(), (0..10).collect());
        let (mut imgs, mut ids, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        for n in 0..10u64 {
            for class in 0..10u32 {
                let hit = n < 7 && class == (n as u32 * 3) % 10;
                imgs.push(if hit {
                    u_imgs[n as usize].clone()
                } else {
                    one_hot(20 + (n as usize + class as usize) % 20)
                });
                ids.push(n);
                labels.push(class);
            }
        }
        let c = labelled("c", imgs, ids, labels);
        assert!((rp_between(&u, &c, &backend).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn score_matrices() {
        let backend = SimilarityBackend::pixel_cosine();
        let a = set("a", (0..4).map(one_hot).collect(), vec![0, 1, 2, 3]);
        let m = score_matrix(std::slice::from_ref(&a), &backend, Metric::Rp).unwrap();
        assert_eq!(m.entries, vec![vec![1.0]]);
        let mut b = a.clone();
        b.model_id = "b".into();
        let m = score_matrix(&[a.clone(), b.clone()], &backend, Metric::Rp).unwrap();
        assert_eq!(m.entries, vec![vec![1.0; 2]; 2]);
        assert_eq!(
            m.to_csv(),
            "model_id,a,b\na,1.000000,1.000000\nb,1.000000,1.000000\n"
        );

        // c differs from a on ids 2 and 3, and is pixel-far there too.
        let mut c_imgs: Vec<Image> = (0..4).map(one_hot).collect();
        c_imgs[2] = antipode(&c_imgs[2]);
        c_imgs[3] = Image::filled(shape(), 1.0);
        c_imgs[3].data_mut()[0] = -1.0;
        let c = set("c", c_imgs, vec![0, 1, 2, 3]);
        let m = score_matrix(&[a.clone(), b, c.clone()], &backend, Metric::Rp).unwrap();
        assert_eq!(
            m.entries,
            vec![
                vec![1.0, 1.0, 0.5],
                vec![1.0, 1.0, 0.5],
                vec![0.5, 0.5, 1.0]
            ]
        );
        let m = score_matrix(&[a, c], &backend, Metric::Mae { threshold: 15.0 }).unwrap();
        assert_eq!(m.get(0, 1), 0.5);
    }

    #[test]
    fn score_matrix_requires_identical_ids() {
        let a = set("a", (0..3).map(noise).collect(), vec![0, 1, 2]);
        let b = set("b", (0..3).map(noise).collect(), vec![0, 1, 5]);
        let err =
            score_matrix(&[a, b], &SimilarityBackend::pixel_cosine(), Metric::Rp).unwrap_err();
        assert!(matches!(
            err,
            Error::MismatchedIds {
                only_a: 1,
                only_b: 1,
                ..
            }
        ));
        assert!(err.to_string().contains("\"a\" and \"b\""));
    }

    #[test]
    fn sample_set_disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let imgs: Vec<Image> = (0..3)
            .map(|k| Image::from_8bit(shape(), &[k * 40; 48]).unwrap())
            .collect();
        let s = SampleSet::new("m1", imgs, vec![4, 5, 6], Some(vec![1, 1, 2])).unwrap();
        s.save(dir.path().join("m1")).unwrap();
        let back = SampleSet::load(dir.path().join("m1")).unwrap();
        assert_eq!(
            (&back.model_id, &back.noise_ids, &back.labels),
            (&s.model_id, &s.noise_ids, &s.labels)
        );
        for (x, y) in back.images.iter().zip(&s.images) {
            assert_eq!(x.to_8bit(), y.to_8bit());
        }
        assert_eq!(s.key(2), "m1/6/2");
    }

    fn arb_sets() -> impl Strategy<Value = (Vec<u64>, Vec<u64>, u64)> {
        (
            Just((0..12).collect::<Vec<u64>>()).prop_shuffle(),
            Just((0..12).collect::<Vec<u64>>()).prop_shuffle(),
            0u64..1000,
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn scores_are_order_invariant_symmetric_and_monotone((pa, pb, seed) in arb_sets(), tau in 0.01f64..0.98) {
            let base: Vec<Image> = (0..12).map(|k| noise(seed * 100 + k)).collect();
            let other: Vec<Image> = (0..12)
                .map(|k| if k % 3 == 0 { noise(seed * 100 + 50 + k) } else { base[k as usize].clone() })
                .collect();
            let make = |id: &str, imgs: &[Image], perm: &[u64]| {
                set(id, perm.iter().map(|&k| imgs[k as usize].clone()).collect(), perm.to_vec())
            };
            let a = make("a", &base, &pa);
            let b = make("b", &other, &pb);
            let a_sorted = make("a", &base, &(0..12).collect::<Vec<_>>());
            let backend = SimilarityBackend::pixel_cosine().with_tau(tau);
            let s = rp_score(&a, &b, &backend).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(s, rp_score(&b, &a, &backend).unwrap());
            prop_assert_eq!(s, rp_score(&a_sorted, &b, &backend).unwrap());
            prop_assert_eq!(mae_score(&a, &b, 15.0).unwrap(), mae_score(&b, &a, 15.0).unwrap());
            let stricter = backend.clone().with_tau((tau + 0.01).min(0.999));
            prop_assert!(rp_score(&a, &b, &stricter).unwrap() <= s);
        }
    }
}
