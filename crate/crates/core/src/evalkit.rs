//! Evaluation: Fréchet distance between feature distributions, pairwise
//! perceptual diversity, and image grids.

use std::io::Write;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{Rgb32FImage, RgbImage};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stylefat_autograd::{no_grad, ConvGeometry, Scalar, Tensor};

use crate::error::{ensure, Error, Result};
use crate::generator::Generator;
use crate::trainer::derive_seed;
use crate::types::ImageBatch;

/// Side length outputs are scaled to before perceptual comparison.
pub const LPIPS_SIZE: usize = 256;
/// Diagonal loading used when a covariance product is not numerically PSD.
pub const FID_EPS: f64 = 1e-6;

/// Activations of one image: `(channels, height, width, values)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    fn channel_means(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        self.data
            .chunks_exact(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect()
    }
}

/// A deterministic image network.
///
/// `activations` feeds the perceptual distance; the embedding used for the
/// Fréchet distance is the channel mean of the last activation map.
pub trait Extractor {
    /// Identity of the network; only sets with equal tags are comparable.
    fn tag(&self) -> String;
    /// Activations of one `[3, S, S]` planar image in `[-1, 1]`.
    fn activations(&self, image: &[f64], size: usize) -> Result<Vec<FeatureMap>>;

    fn embed(&self, image: &[f64], size: usize) -> Result<Vec<f64>> {
        let maps = self.activations(image, size)?;
        let last = maps
            .last()
            .ok_or_else(|| Error::Config(format!("extractor {} produced no activations", self.tag())))?;
        Ok(last.channel_means())
    }
}

/// Parameter-free stand-in: the image itself and two 2x average-pooled
/// copies. Its embedding is the per-channel pixel mean.
#[derive(Clone, Copy, Debug, Default)]
pub struct PixelExtractor;

impl Extractor for PixelExtractor {
    fn tag(&self) -> String {
        "pixel-pyramid".into()
    }

    fn activations(&self, image: &[f64], size: usize) -> Result<Vec<FeatureMap>> {
        check_planar(image, size)?;
        let mut maps = vec![FeatureMap {
            channels: 3,
            height: size,
            width: size,
            data: image.to_vec(),
        }];
        for _ in 0..2 {
            let prev = maps.last().expect("non-empty");
            if prev.height < 2 || prev.height % 2 != 0 {
                break;
            }
            let t = Tensor::<f64>::from_vec(prev.data.clone(), &[1, 3, prev.height, prev.width]);
            let pooled = t.avg_pool2x2();
            maps.push(FeatureMap {
                channels: 3,
                height: prev.height / 2,
                width: prev.width / 2,
                data: pooled.to_vec(),
            });
        }
        Ok(maps)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ConvLayerSpec {
    /// `[out, in, k, k]`.
    shape: [usize; 4],
    weight: Vec<f64>,
    bias: Vec<f64>,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ConvExtractorFile {
    tag: String,
    /// Per-channel input normalisation applied to `[-1, 1]` pixels.
    #[serde(default)]
    input_mean: Option<[f64; 3]>,
    #[serde(default)]
    input_std: Option<[f64; 3]>,
    layers: Vec<ConvLayerSpec>,
}

/// User-supplied convolution + ReLU stack loaded from a JSON weights file:
///
/// ```json
/// {"tag": "my-net", "layers": [
///   {"shape": [8, 3, 3, 3], "weight": [...], "bias": [...], "stride": 2, "padding": 1}
/// ]}
/// ```
#[derive(Clone, Debug)]
pub struct ConvExtractor {
    def: ConvExtractorFile,
    weights: Vec<(Tensor<f64>, Tensor<f64>)>,
}

impl ConvExtractor {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!(
                "cannot read extractor weights {}: {e}; export a network to the JSON layer format \
                 described in the README, or use the built-in `pixel` extractor",
                path.display()
            ))
        })?;
        let def: ConvExtractorFile = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid extractor file {}: {e}", path.display())))?;
        Self::from_def(def)
    }

    fn from_def(def: ConvExtractorFile) -> Result<Self> {
        ensure!(!def.layers.is_empty(), Config, "extractor {} has no layers", def.tag);
        let mut channels = 3;
        let mut weights = Vec::with_capacity(def.layers.len());
        for (i, l) in def.layers.iter().enumerate() {
            let [o, c, kh, kw] = l.shape;
            ensure!(
                c == channels && l.weight.len() == o * c * kh * kw && l.bias.len() == o && l.stride >= 1,
                Config,
                "extractor layer {i} is inconsistent (shape {:?}, {} weights, {} biases, input has {channels} channels)",
                l.shape,
                l.weight.len(),
                l.bias.len()
            );
            weights.push((
                Tensor::from_vec(l.weight.clone(), &l.shape),
                Tensor::from_vec(l.bias.clone(), &[1, o, 1, 1]),
            ));
            channels = o;
        }
        Ok(ConvExtractor { def, weights })
    }
}

impl Extractor for ConvExtractor {
    fn tag(&self) -> String {
        self.def.tag.clone()
    }

    fn activations(&self, image: &[f64], size: usize) -> Result<Vec<FeatureMap>> {
        check_planar(image, size)?;
        let mut x = image.to_vec();
        if let (Some(m), Some(s)) = (self.def.input_mean, self.def.input_std) {
            for (c, plane) in x.chunks_exact_mut(size * size).enumerate() {
                plane.iter_mut().for_each(|v| *v = (*v - m[c]) / s[c]);
            }
        }
        let mut h = Tensor::<f64>::from_vec(x, &[1, 3, size, size]);
        let mut maps = Vec::with_capacity(self.weights.len());
        for (l, (w, b)) in self.def.layers.iter().zip(&self.weights) {
            let geom = ConvGeometry::new(l.stride, l.padding);
            let out = geom.output_size(h.shape()[2], l.shape[2]);
            ensure!(out >= 1, InvalidInput, "image too small for extractor {}", self.def.tag);
            h = h.conv2d(w, geom).add(b).relu();
            let s = h.shape().to_vec();
            maps.push(FeatureMap {
                channels: s[1],
                height: s[2],
                width: s[3],
                data: h.to_vec(),
            });
        }
        Ok(maps)
    }
}

fn check_planar(image: &[f64], size: usize) -> Result<()> {
    ensure!(
        size > 0 && image.len() == 3 * size * size,
        Shape,
        "expected a [3, {size}, {size}] image, got {} values",
        image.len()
    );
    Ok(())
}

fn planar_images<T: Scalar>(images: &ImageBatch<T>) -> Vec<Vec<f64>> {
    let per = 3 * images.size() * images.size();
    images
        .tensor()
        .to_f64_vec()
        .chunks_exact(per)
        .map(<[f64]>::to_vec)
        .collect()
}

/// Embedding vectors `[M, d]` of an image set, tagged with the extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub vectors: Vec<Vec<f64>>,
    pub extractor: String,
}

impl FeatureSet {
    pub fn new(vectors: Vec<Vec<f64>>, extractor: impl Into<String>) -> Result<Self> {
        if let Some(first) = vectors.first() {
            ensure!(
                vectors.iter().all(|v| v.len() == first.len()),
                Shape,
                "feature vectors differ in length"
            );
        }
        Ok(FeatureSet {
            vectors,
            extractor: extractor.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }
}

pub fn extract_features<T: Scalar>(images: &ImageBatch<T>, extractor: &dyn Extractor) -> Result<FeatureSet> {
    let size = images.size();
    let vectors = planar_images(images)
        .iter()
        .map(|im| extractor.embed(im, size))
        .collect::<Result<Vec<_>>>()?;
    FeatureSet::new(vectors, extractor.tag())
}

/// Mean and (unbiased, symmetrized) covariance of a feature set.
#[derive(Clone, Debug)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianSummary {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        ensure!(
            covariance.nrows() == d && covariance.ncols() == d,
            Shape,
            "covariance must be {d}x{d}"
        );
        let covariance = (&covariance + covariance.transpose()) * 0.5;
        Ok(GaussianSummary { mean, covariance })
    }

    pub fn from_features(set: &FeatureSet) -> Result<Self> {
        let (m, d) = (set.len(), set.dim());
        ensure!(m >= 2, Contract, "a covariance needs at least 2 feature vectors, got {m}");
        let x = DMatrix::from_fn(m, d, |i, j| set.vectors[i][j]);
        let mean = DVector::from_iterator(d, x.column_iter().map(|c| c.mean()));
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (m as f64 - 1.0);
        Self::new(mean, cov)
    }
}

/// Eigenvalues are considered valid down to this multiple of the spectrum's
/// scale below zero; smaller (rounding-level) negatives are clamped.
const PSD_TOLERANCE: f64 = 1e-8;

fn psd_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
    if eig.eigenvalues.iter().any(|v| !v.is_finite() || *v < -PSD_TOLERANCE * scale) {
        return None;
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Some(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `Tr((Σa Σb)^{1/2})` through the similar symmetric matrix
/// `Σa^{1/2} Σb Σa^{1/2}`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<f64> {
    let ra = psd_sqrt(a)?;
    let m = &ra * b * &ra;
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |acc, &v| acc.max(v.abs()));
    if eig.eigenvalues.iter().any(|v| !v.is_finite() || *v < -PSD_TOLERANCE * scale) {
        return None;
    }
    Some(eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum())
}

/// Fréchet distance between two Gaussians.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    ensure!(
        a.mean.len() == b.mean.len(),
        Shape,
        "feature dimensions differ: {} vs {}",
        a.mean.len(),
        b.mean.len()
    );
    let d = a.mean.len();
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let tr = |m: &DMatrix<f64>| m.trace();
    let cross = match trace_sqrt_product(&a.covariance, &b.covariance) {
        Some(t) => t,
        None => {
            log::warn!("covariance product is not positive semi-definite; adding {FID_EPS}*I and retrying");
            let eye = DMatrix::<f64>::identity(d, d) * FID_EPS;
            trace_sqrt_product(&(&a.covariance + &eye), &(&b.covariance + &eye))
                .ok_or_else(|| Error::Numeric("matrix square root failed after regularization".into()))?
        }
    };
    let value = mean_term + tr(&a.covariance) + tr(&b.covariance) - 2.0 * cross;
    ensure!(value.is_finite(), Numeric, "Fréchet distance is not finite");
    // rounding can push identical distributions slightly below zero
    Ok(value.max(0.0))
}

/// Fréchet distance between the Gaussian fits of two feature sets.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    ensure!(
        a.extractor == b.extractor,
        Contract,
        "feature sets come from different extractors ({} vs {})",
        a.extractor,
        b.extractor
    );
    frechet_distance(&GaussianSummary::from_features(a)?, &GaussianSummary::from_features(b)?)
}

fn unit_normalize(map: &FeatureMap) -> Vec<f64> {
    let hw = map.height * map.width;
    let mut out = map.data.clone();
    for p in 0..hw {
        let norm = (0..map.channels)
            .map(|c| map.data[c * hw + p].powi(2))
            .sum::<f64>()
            .sqrt();
        for c in 0..map.channels {
            out[c * hw + p] /= norm + 1e-10;
        }
    }
    out
}

/// Perceptual distance: for every activation layer, channel vectors are
/// unit-normalized per position, and the squared difference is summed over
/// channels and averaged over positions; layers are summed.
pub fn lpips(a: &[f64], b: &[f64], size: usize, extractor: &dyn Extractor) -> Result<f64> {
    let (fa, fb) = (extractor.activations(a, size)?, extractor.activations(b, size)?);
    ensure!(fa.len() == fb.len(), Shape, "activation layer counts differ");
    let mut total = 0.0;
    for (ma, mb) in fa.iter().zip(&fb) {
        let (na, nb) = (unit_normalize(ma), unit_normalize(mb));
        let hw = (ma.height * ma.width) as f64;
        total += na.iter().zip(&nb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / hw;
    }
    Ok(total)
}

/// Bilinear resize of a planar `[3, S, S]` image to `[3, target, target]`.
pub fn resize_planar(image: &[f64], size: usize, target: usize) -> Result<Vec<f64>> {
    check_planar(image, size)?;
    if size == target {
        return Ok(image.to_vec());
    }
    let plane = size * size;
    let img = Rgb32FImage::from_fn(size as u32, size as u32, |x, y| {
        let i = y as usize * size + x as usize;
        image::Rgb([image[i] as f32, image[plane + i] as f32, image[2 * plane + i] as f32])
    });
    let big = imageops::resize(&img, target as u32, target as u32, FilterType::Triangle);
    let tp = target * target;
    let mut out = vec![0.0; 3 * tp];
    for (i, px) in big.pixels().enumerate() {
        for c in 0..3 {
            out[c * tp + i] = px[c] as f64;
        }
    }
    Ok(out)
}

/// Mean perceptual distance over all unordered pairs of `outputs`, each
/// scaled to [`LPIPS_SIZE`] first.
pub fn pairwise_lpips<T: Scalar>(outputs: &ImageBatch<T>, extractor: &dyn Extractor) -> Result<f64> {
    let k = outputs.len();
    ensure!(k >= 2, Contract, "pairwise diversity needs at least 2 outputs, got {k}");
    let scaled = planar_images(outputs)
        .iter()
        .map(|im| resize_planar(im, outputs.size(), LPIPS_SIZE))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            sum += lpips(&scaled[i], &scaled[j], LPIPS_SIZE, extractor)?;
        }
    }
    Ok(sum / (k * (k - 1) / 2) as f64)
}

/// For every photo, translates it with `k` references drawn without
/// replacement from `anime_pool`, and averages [`pairwise_lpips`] of the
/// outputs over photos.
pub fn lpips_diversity<T: Scalar>(
    model: &Generator<T>,
    photos: &ImageBatch<T>,
    anime_pool: &ImageBatch<T>,
    k: usize,
    seed: u64,
    extractor: &dyn Extractor,
) -> Result<f64> {
    ensure!(k >= 2, Contract, "diversity needs k >= 2 references, got {k}");
    ensure!(
        anime_pool.len() >= k,
        Contract,
        "reference pool has {} images, fewer than k = {k}",
        anime_pool.len()
    );
    let mut total = 0.0;
    for i in 0..photos.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 20, i as u64]));
        let refs: Vec<ImageBatch<T>> = sample(&mut rng, anime_pool.len(), k)
            .into_iter()
            .map(|j| anime_pool.get(j))
            .collect();
        let refs = ImageBatch::stack(&refs)?;
        let src = ImageBatch::stack(&vec![photos.get(i); k])?;
        let outputs = no_grad(|| model.translate(&src, &refs))?;
        total += pairwise_lpips(&outputs, extractor)?;
    }
    Ok(total / photos.len() as f64)
}

/// Translates every photo with one reference drawn at random from
/// `anime_pool` (the set compared against real anime faces by [`fid`]).
pub fn translate_with_random_references<T: Scalar>(
    model: &Generator<T>,
    photos: &ImageBatch<T>,
    anime_pool: &ImageBatch<T>,
    seed: u64,
    chunk: usize,
) -> Result<ImageBatch<T>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 21]));
    let picks: Vec<usize> = (0..photos.len()).map(|_| rng.gen_range(0..anime_pool.len())).collect();
    let mut parts = Vec::new();
    for start in (0..photos.len()).step_by(chunk.max(1)) {
        let end = (start + chunk.max(1)).min(photos.len());
        let src: Vec<_> = (start..end).map(|i| photos.get(i)).collect();
        let refs: Vec<_> = picks[start..end].iter().map(|&j| anime_pool.get(j)).collect();
        let out = no_grad(|| model.translate(&ImageBatch::stack(&src)?, &ImageBatch::stack(&refs)?))?;
        parts.push(out.detach());
    }
    ImageBatch::stack(&parts)
}

/// Writes a PNG grid with one row per triplet: the reference, the source,
/// then every output of that row. All tiles must share one size.
pub fn emit_grid(
    sources: &[RgbImage],
    references: &[RgbImage],
    outputs: &[Vec<RgbImage>],
    path: &Path,
) -> Result<()> {
    let grid = compose_grid(sources, references, outputs)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    grid.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// The image [`emit_grid`] writes.
pub fn compose_grid(sources: &[RgbImage], references: &[RgbImage], outputs: &[Vec<RgbImage>]) -> Result<RgbImage> {
    let rows = sources.len();
    ensure!(rows > 0, Contract, "grid needs at least one row");
    ensure!(
        references.len() == rows && outputs.len() == rows,
        Contract,
        "grid lists differ in length: {} sources, {} references, {} output rows",
        rows,
        references.len(),
        outputs.len()
    );
    let (tw, th) = sources[0].dimensions();
    let cols = 2 + outputs.iter().map(Vec::len).max().unwrap_or(0);
    let all_tiles = sources
        .iter()
        .chain(references)
        .chain(outputs.iter().flatten());
    for t in all_tiles {
        ensure!(t.dimensions() == (tw, th), Shape, "grid tiles differ in size");
    }
    let mut grid = RgbImage::new(tw * cols as u32, th * rows as u32);
    for r in 0..rows {
        let y = (r as u32 * th) as i64;
        imageops::replace(&mut grid, &references[r], 0, y);
        imageops::replace(&mut grid, &sources[r], tw as i64, y);
        for (c, out) in outputs[r].iter().enumerate() {
            imageops::replace(&mut grid, out, ((c + 2) as u32 * tw) as i64, y);
        }
    }
    Ok(grid)
}

/// One evaluation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub dataset: String,
    pub value: f64,
    pub n_images: usize,
    pub extractor: String,
    pub seed: u64,
}

impl MetricRecord {
    pub const CSV_HEADER: &'static str = "metric,dataset,value,n_images,extractor,seed";

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("record serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Appends one row, writing the header first if the file is new.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let fresh = !path.exists();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let io = |e| Error::io(PathBuf::from(path), e);
        if fresh {
            writeln!(f, "{}", Self::CSV_HEADER).map_err(io)?;
        }
        writeln!(
            f,
            "{},{},{:?},{},{},{}",
            self.metric, self.dataset, self.value, self.n_images, self.extractor, self.seed
        )
        .map_err(io)
    }
}
