//! Image folders, batch sampling and procedural toy data.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylefat_autograd::{Scalar, Tensor};

use crate::error::{ensure, Error, Result};
use crate::types::{DomainTag, ImageBatch};

use super::derive_seed;

/// Train/test split sizes per domain of a benchmark dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetLayout {
    pub name: &'static str,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
}

impl DatasetLayout {
    pub const FACE2ANIME: DatasetLayout = DatasetLayout {
        name: "face2anime",
        train_per_domain: 8000,
        test_per_domain: 898,
    };
    pub const SELFIE2ANIME: DatasetLayout = DatasetLayout {
        name: "selfie2anime",
        train_per_domain: 3400,
        test_per_domain: 100,
    };

    pub fn by_name(name: &str) -> Option<DatasetLayout> {
        [Self::FACE2ANIME, Self::SELFIE2ANIME]
            .into_iter()
            .find(|l| l.name == name)
    }
}

/// Decoded images of one domain, each stored as `[3, S, S]` in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    size: usize,
    images: Vec<Vec<f32>>,
    names: Vec<String>,
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// `[3, S, S]` planar values in `[-1, 1]` from an 8-bit RGB image.
pub fn image_to_planar(img: &RgbImage) -> Vec<f32> {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut out = vec![0.0; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    out
}

/// Inverse of [`image_to_planar`], clamping and rounding to 8 bits.
pub fn planar_to_image(data: &[f64], size: usize) -> RgbImage {
    let plane = size * size;
    let to_u8 = |v: f64| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let i = y as usize * size + x as usize;
        Rgb([to_u8(data[i]), to_u8(data[plane + i]), to_u8(data[2 * plane + i])])
    })
}

/// Decodes one image file, resized to `image_size` square, as `[3, S, S]`
/// planar values in `[-1, 1]`.
pub fn load_image(path: &Path, image_size: usize) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img
        .resize_exact(image_size as u32, image_size as u32, FilterType::Triangle)
        .to_rgb8();
    Ok(image_to_planar(&rgb))
}

/// Decodes every PNG/JPEG file in `dir` (sorted by file name), resized to
/// `image_size` square. Undecodable files are skipped with a warning.
pub fn load_dataset(dir: &Path, image_size: usize) -> Result<Dataset> {
    ensure!(image_size > 0, Config, "image_size must be positive");
    let entries = std::fs::read_dir(dir).map_err(|e| {
        Error::Config(format!("cannot read image directory {}: {e}", dir.display()))
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    paths.sort();
    ensure!(
        !paths.is_empty(),
        Config,
        "no PNG/JPEG images in {}",
        dir.display()
    );
    let mut images = Vec::with_capacity(paths.len());
    let mut names = Vec::with_capacity(paths.len());
    for path in &paths {
        match load_image(path, image_size) {
            Ok(img) => {
                images.push(img);
                names.push(path.file_name().unwrap_or_default().to_string_lossy().into_owned());
            }
            Err(e) => log::warn!("skipping undecodable image {}: {e}", path.display()),
        }
    }
    ensure!(
        !images.is_empty(),
        Config,
        "none of the {} image files in {} could be decoded",
        paths.len(),
        dir.display()
    );
    Ok(Dataset {
        size: image_size,
        images,
        names,
    })
}

impl Dataset {
    /// Wraps already-decoded `[3, S, S]` planar images in `[-1, 1]`.
    pub fn from_planar(size: usize, images: Vec<Vec<f32>>) -> Result<Self> {
        ensure!(!images.is_empty(), Config, "dataset is empty");
        ensure!(
            images.iter().all(|im| im.len() == 3 * size * size),
            Shape,
            "every image must hold 3 x {size} x {size} values"
        );
        let names = (0..images.len()).map(|i| format!("{i:06}")).collect();
        Ok(Dataset { size, images, names })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.size
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn planar(&self, i: usize) -> &[f32] {
        &self.images[i]
    }

    /// Stacks the given images, mirroring horizontally where `flips[j]`.
    pub fn batch<T: Scalar>(&self, indices: &[usize], flips: &[bool]) -> Result<ImageBatch<T>> {
        ensure!(
            !indices.is_empty() && flips.len() == indices.len(),
            Contract,
            "batch needs one flip flag per index"
        );
        let s = self.size;
        let mut data = Vec::with_capacity(indices.len() * 3 * s * s);
        for (&i, &flip) in indices.iter().zip(flips) {
            ensure!(i < self.len(), InvalidInput, "image index {i} out of range");
            let img = &self.images[i];
            for row in img.chunks_exact(s) {
                if flip {
                    data.extend(row.iter().rev().map(|&v| T::from_f64_lossy(v as f64)));
                } else {
                    data.extend(row.iter().map(|&v| T::from_f64_lossy(v as f64)));
                }
            }
        }
        ImageBatch::new(Tensor::from_vec(data, &[indices.len(), 3, s, s]))
    }

    /// All images in order, without augmentation.
    pub fn all<T: Scalar>(&self) -> Result<ImageBatch<T>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx, &vec![false; idx.len()])
    }
}

/// Stateless batch schedule: each domain walks through its own seeded
/// permutation per epoch, so the batch at any iteration can be recomputed
/// from `(seed, iteration)` alone (which makes resuming exact).
#[derive(Clone, Copy, Debug)]
pub struct Sampler {
    pub seed: u64,
    pub batch_size: usize,
    pub hflip: bool,
}

fn domain_index(domain: DomainTag) -> u64 {
    match domain {
        DomainTag::Photo => 0,
        DomainTag::Anime => 1,
    }
}

impl Sampler {
    fn permutation(&self, domain: DomainTag, len: usize, epoch: u64) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, 1, domain_index(domain), epoch]));
        perm.shuffle(&mut rng);
        perm
    }

    /// Dataset indices and flip flags for `domain` at `iteration`.
    pub fn draw(&self, domain: DomainTag, len: usize, iteration: u64) -> (Vec<usize>, Vec<bool>) {
        let mut indices = Vec::with_capacity(self.batch_size);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for j in 0..self.batch_size as u64 {
            let pos = iteration * self.batch_size as u64 + j;
            let (epoch, k) = (pos / len as u64, (pos % len as u64) as usize);
            if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                cached = Some((epoch, self.permutation(domain, len, epoch)));
            }
            indices.push(cached.as_ref().expect("set above").1[k]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, 2, domain_index(domain), iteration]));
        let flips = (0..self.batch_size)
            .map(|_| self.hflip && rng.gen_bool(0.5))
            .collect();
        (indices, flips)
    }

    pub fn batch<T: Scalar>(&self, data: &Dataset, domain: DomainTag, iteration: u64) -> Result<ImageBatch<T>> {
        let (indices, flips) = self.draw(domain, data.len(), iteration);
        data.batch(&indices, &flips)
    }
}

/// Procedural stand-ins for face photos and anime faces: a soft face-like
/// blob with eyes over a gradient background. Anime samples use flat,
/// saturated palettes and larger eyes; photos use muted skin tones.
pub fn synthetic_faces(domain: DomainTag, count: usize, size: usize, seed: u64) -> Vec<RgbImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 3, domain_index(domain)]));
    (0..count)
        .map(|_| {
            let anime = domain == DomainTag::Anime;
            let bg0: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.9));
            let bg1: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.9));
            let skin: [f64; 3] = if anime {
                [rng.gen_range(0.85..1.0), rng.gen_range(0.75..0.9), rng.gen_range(0.7..0.85)]
            } else {
                let t = rng.gen_range(0.3..0.8);
                [t + 0.15, t, t - 0.1]
            };
            let hair: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
            let eye: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..0.6));
            let (cx, cy) = (rng.gen_range(0.42..0.58), rng.gen_range(0.45..0.6));
            let (rx, ry) = (rng.gen_range(0.22..0.3), rng.gen_range(0.27..0.35));
            let eye_r = if anime { rng.gen_range(0.06..0.09) } else { rng.gen_range(0.03..0.045) };
            let eye_dx = rng.gen_range(0.08..0.12);
            let sm = 0.03;
            let soft = |d: f64| 1.0 / (1.0 + (d / sm).exp());
            RgbImage::from_fn(size as u32, size as u32, |px, py| {
                let (u, v) = ((px as f64 + 0.5) / size as f64, (py as f64 + 0.5) / size as f64);
                let mut c: [f64; 3] = std::array::from_fn(|k| bg0[k] * (1.0 - v) + bg1[k] * v);
                let hair_d = (((u - cx) / (rx * 1.2)).powi(2) + ((v - cy + 0.06) / (ry * 1.15)).powi(2)).sqrt() - 1.0;
                let face_d = (((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2)).sqrt() - 1.0;
                let a = soft(hair_d * 0.3);
                let b = soft(face_d * 0.3);
                for k in 0..3 {
                    c[k] = c[k] * (1.0 - a) + hair[k] * a;
                    c[k] = c[k] * (1.0 - b) + skin[k] * b;
                }
                for side in [-1.0, 1.0] {
                    let d = ((u - cx - side * eye_dx).powi(2) + (v - cy + 0.02).powi(2)).sqrt() - eye_r;
                    let e = soft(d);
                    for k in 0..3 {
                        c[k] = c[k] * (1.0 - e) + eye[k] * e;
                    }
                }
                Rgb(c.map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8))
            })
        })
        .collect()
}

/// Writes [`synthetic_faces`] as `0000.png`, `0001.png`, ... into `dir`.
pub fn write_synthetic_faces(dir: &Path, domain: DomainTag, count: usize, size: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, img) in synthetic_faces(domain, count, size, seed).iter().enumerate() {
        let path = dir.join(format!("{i:04}.png"));
        img.save(&path).map_err(|source| Error::Image { path, source })?;
    }
    Ok(())
}
