//! Scalar-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylefat::autograd::grad;
use stylefat::Tensor;

pub const EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(uniform(rng, n, -2.0, 2.0), shape)
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `[N, C, H, W]` dims of a flat row-major map.
#[derive(Clone, Copy, Debug)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn of(shape: &[usize]) -> Dims {
        Dims { n: shape[0], c: shape[1], h: shape[2], w: shape[3] }
    }

    pub fn at(&self, n: usize, c: usize, p: usize) -> usize {
        (n * self.c + c) * self.h * self.w + p
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let mut sum = 0.0;
    for v in values {
        sum += v;
    }
    let mu = sum / values.len() as f64;
    let mut sq = 0.0;
    for v in values {
        sq += (v - mu) * (v - mu);
    }
    (mu, (sq / values.len() as f64 + EPS).sqrt())
}

/// Per-(n, c) mean and stabilized std, flattened `[N * C]`.
pub fn instance_stats(z: &[f64], d: Dims) -> (Vec<f64>, Vec<f64>) {
    let mut mus = Vec::new();
    let mut sigmas = Vec::new();
    for n in 0..d.n {
        for c in 0..d.c {
            let vals: Vec<f64> = (0..d.hw()).map(|p| z[d.at(n, c, p)]).collect();
            let (m, s) = mean_std(&vals);
            mus.push(m);
            sigmas.push(s);
        }
    }
    (mus, sigmas)
}

/// Per-n mean and stabilized std over (C, H, W).
pub fn layer_stats(z: &[f64], d: Dims) -> (Vec<f64>, Vec<f64>) {
    let per = d.c * d.hw();
    (0..d.n).map(|n| mean_std(&z[n * per..(n + 1) * per])).unzip()
}

pub fn instance_norm(z: &[f64], d: Dims) -> Vec<f64> {
    let (mu, sigma) = instance_stats(z, d);
    let mut out = vec![0.0; z.len()];
    for n in 0..d.n {
        for c in 0..d.c {
            for p in 0..d.hw() {
                let i = d.at(n, c, p);
                out[i] = (z[i] - mu[n * d.c + c]) / sigma[n * d.c + c];
            }
        }
    }
    out
}

pub fn layer_norm(z: &[f64], d: Dims) -> Vec<f64> {
    let (mu, sigma) = layer_stats(z, d);
    let mut out = vec![0.0; z.len()];
    for n in 0..d.n {
        for c in 0..d.c {
            for p in 0..d.hw() {
                let i = d.at(n, c, p);
                out[i] = (z[i] - mu[n]) / sigma[n];
            }
        }
    }
    out
}

/// Normalizes, then applies `weight` ([C_out, 2C]) as a matrix product at
/// every pixel.
pub fn polin(z: &[f64], d: Dims, weight: &[f64], c_out: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let inst = instance_norm(z, d);
    let layer = layer_norm(z, d);
    let od = Dims { c: c_out, ..d };
    let mut out = vec![0.0; d.n * c_out * d.hw()];
    for n in 0..d.n {
        for p in 0..d.hw() {
            for o in 0..c_out {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for c in 0..d.c {
                    acc += weight[o * 2 * d.c + c] * inst[d.at(n, c, p)];
                    acc += weight[o * 2 * d.c + d.c + c] * layer[d.at(n, c, p)];
                }
                out[od.at(n, o, p)] = acc;
            }
        }
    }
    out
}

/// `gamma[n, c] * x + beta[n, c]`; a single gamma/beta row broadcasts over N.
pub fn affine(x: &[f64], d: Dims, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let rows = gamma.len() / d.c;
    let mut out = x.to_vec();
    for n in 0..d.n {
        let r = if rows == 1 { 0 } else { n };
        for c in 0..d.c {
            for p in 0..d.hw() {
                let i = d.at(n, c, p);
                out[i] = gamma[r * d.c + c] * x[i] + beta[r * d.c + c];
            }
        }
    }
    out
}

/// `rho[c] * IN + (1 - rho[c]) * LN`.
pub fn blend(z: &[f64], d: Dims, rho: &[f64]) -> Vec<f64> {
    let inst = instance_norm(z, d);
    let layer = layer_norm(z, d);
    let mut out = vec![0.0; z.len()];
    for n in 0..d.n {
        for c in 0..d.c {
            for p in 0..d.hw() {
                let i = d.at(n, c, p);
                out[i] = rho[c] * inst[i] + (1.0 - rho[c]) * layer[i];
            }
        }
    }
    out
}

/// Worst relative error between reverse-mode gradients of `f` and central
/// differences, over every element of every input.
///
/// The scalar objective is `sum(f(inputs) * probe)` with a fixed random
/// probe, so every output element contributes.
pub fn gradcheck(inputs: &[(Vec<f64>, Vec<usize>)], seed: u64, f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>) -> f64 {
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|(d, s)| Tensor::leaf(d.clone(), s)).collect();
    let out = f(&leaves);
    let mut r = rng(seed);
    let probe = Tensor::from_vec(uniform(&mut r, out.numel(), -1.0, 1.0), out.shape());
    let objective = |t: &Tensor<f64>| t.mul(&probe).sum();
    let refs: Vec<&Tensor<f64>> = leaves.iter().collect();
    let analytic = grad(&objective(&out), &refs, false);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, (data, _)) in inputs.iter().enumerate() {
        for j in 0..data.len() {
            let eval = |delta: f64| {
                let ts: Vec<Tensor<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, (d, s))| {
                        let mut d = d.clone();
                        if k == i {
                            d[j] += delta;
                        }
                        Tensor::from_vec(d, s)
                    })
                    .collect();
                objective(&f(&ts)).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
            worst = worst.max(err);
        }
    }
    worst
}

/// Direct-loop convolution with zero padding; `weight` is `[O, C, K, K]`.
pub fn conv(x: &[f64], d: Dims, weight: &[f64], bias: Option<&[f64]>, o: usize, k: usize, stride: usize, pad: usize) -> (Vec<f64>, Dims) {
    let ho = (d.h + 2 * pad - k) / stride + 1;
    let wo = (d.w + 2 * pad - k) / stride + 1;
    let od = Dims { n: d.n, c: o, h: ho, w: wo };
    let mut out = vec![0.0; d.n * o * ho * wo];
    for n in 0..d.n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b[oc]);
                    for ic in 0..d.c {
                        for i in 0..k {
                            for j in 0..k {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                    continue;
                                }
                                acc += x[d.at(n, ic, iy as usize * d.w + ix as usize)]
                                    * weight[((oc * d.c + ic) * k + i) * k + j];
                            }
                        }
                    }
                    out[od.at(n, oc, oy * wo + ox)] = acc;
                }
            }
        }
    }
    (out, od)
}

pub fn leaky(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v >= 0.0 { v } else { 0.2 * v }).collect()
}

pub fn upsample2(x: &[f64], d: Dims) -> (Vec<f64>, Dims) {
    let od = Dims { h: 2 * d.h, w: 2 * d.w, ..d };
    let mut out = vec![0.0; x.len() * 4];
    for n in 0..d.n {
        for c in 0..d.c {
            for y in 0..od.h {
                for xx in 0..od.w {
                    out[od.at(n, c, y * od.w + xx)] = x[d.at(n, c, (y / 2) * d.w + xx / 2)];
                }
            }
        }
    }
    (out, od)
}

/// Spatial mean per (n, c), flattened `[N * C]`.
pub fn pooled(x: &[f64], d: Dims) -> Vec<f64> {
    let mut out = Vec::new();
    for n in 0..d.n {
        for c in 0..d.c {
            out.push((0..d.hw()).map(|p| x[d.at(n, c, p)]).sum::<f64>() / d.hw() as f64);
        }
    }
    out
}

pub fn images(r: &mut ChaCha8Rng, n: usize, size: usize) -> stylefat::ImageBatch<f64> {
    let data = uniform(r, n * 3 * size * size, -1.0, 1.0);
    stylefat::ImageBatch::new(Tensor::from_vec(data, &[n, 3, size, size])).unwrap()
}

pub fn tiny_generator() -> stylefat::GeneratorConfig {
    stylefat::GeneratorConfig {
        image_size: 16,
        base_channels: 4,
        bottleneck_channels: 8,
        asc_depth: 2,
        style_dim: 8,
        ..Default::default()
    }
}

/// 16px, narrow-network training config writing into `out`.
pub fn tiny_train_config(out: &std::path::Path) -> stylefat::TrainConfig {
    let mut c = stylefat::TrainConfig::smoke();
    c.image_size = 16;
    c.batch_size = 2;
    c.iterations = 4;
    c.base_channels = 4;
    c.bottleneck_channels = 8;
    c.asc_depth = 2;
    c.style_dim = 8;
    c.disc_channels = 4;
    c.checkpoint_interval = 2;
    c.output_dir = out.to_path_buf();
    c
}

pub fn tiny_datasets(size: usize, count: usize) -> (stylefat::trainer::Dataset, stylefat::trainer::Dataset) {
    use stylefat::trainer::{image_to_planar, synthetic_faces, Dataset};
    let make = |d| Dataset::from_planar(size, synthetic_faces(d, count, size, 5).iter().map(image_to_planar).collect()).unwrap();
    (make(stylefat::DomainTag::Photo), make(stylefat::DomainTag::Anime))
}
