mod common;

use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use stylefat::evalkit::*;
use stylefat::*;

/// `2d` points `±s e_i` with `s^2 = (2d - 1) / 2`: sample mean 0 and unbiased
/// covariance exactly I.
fn identity_cloud(d: usize, offset: &[f64]) -> FeatureSet {
    let s = ((2 * d - 1) as f64 / 2.0).sqrt();
    let mut rows = Vec::new();
    for i in 0..d {
        for sign in [-1.0, 1.0] {
            let mut v = offset.to_vec();
            v[i] += sign * s;
            rows.push(v);
        }
    }
    FeatureSet::new(rows, "toy").unwrap()
}

fn random_set(r: &mut rand_chacha::ChaCha8Rng, m: usize, d: usize) -> FeatureSet {
    FeatureSet::new((0..m).map(|_| common::uniform(r, d, -1.0, 1.0)).collect(), "toy").unwrap()
}

#[test]
fn fid_of_a_set_with_itself_is_zero() {
    let mut r = common::rng(1);
    for d in [1, 3, 8] {
        let a = random_set(&mut r, 40, d);
        assert!(fid(&a, &a).unwrap() <= 1e-6);
    }
}

#[test]
fn fid_of_offset_identity_gaussians_is_squared_offset() {
    let mut r = common::rng(2);
    for _ in 0..5 {
        let d = r.gen_range(2..7);
        let offset = common::uniform(&mut r, d, -3.0, 3.0);
        let expect: f64 = offset.iter().map(|x| x * x).sum();
        let got = fid(&identity_cloud(d, &vec![0.0; d]), &identity_cloud(d, &offset)).unwrap();
        assert!((got - expect).abs() <= 0.01 * expect, "{got} vs {expect}");
    }
}

#[test]
fn frechet_distance_of_diagonal_gaussians_matches_closed_form() {
    let mut r = common::rng(3);
    let d = 4;
    let ma = common::uniform(&mut r, d, -1.0, 1.0);
    let mb = common::uniform(&mut r, d, -1.0, 1.0);
    let va = common::uniform(&mut r, d, 0.1, 2.0);
    let vb = common::uniform(&mut r, d, 0.1, 2.0);
    let mut expect = 0.0;
    for i in 0..d {
        expect += (ma[i] - mb[i]).powi(2) + va[i] + vb[i] - 2.0 * (va[i] * vb[i]).sqrt();
    }
    let g = |m: &[f64], v: &[f64]| {
        GaussianSummary::new(DVector::from_column_slice(m), DMatrix::from_diagonal(&DVector::from_column_slice(v))).unwrap()
    };
    let got = frechet_distance(&g(&ma, &va), &g(&mb, &vb)).unwrap();
    assert!((got - expect).abs() < 1e-9);
}

#[test]
fn fid_is_symmetric_and_permutation_invariant() {
    let mut r = common::rng(4);
    let a = random_set(&mut r, 30, 5);
    let b = FeatureSet::new(random_set(&mut r, 25, 5).vectors.iter().map(|v| v.iter().map(|x| x * 2.0 + 0.3).collect()).collect(), "toy").unwrap();
    let ab = fid(&a, &b).unwrap();
    assert!((ab - fid(&b, &a).unwrap()).abs() < 1e-6);
    let mut shuffled = a.vectors.clone();
    shuffled.shuffle(&mut r);
    let a2 = FeatureSet::new(shuffled, "toy").unwrap();
    assert!((ab - fid(&a2, &b).unwrap()).abs() < 1e-9);
}

#[test]
fn fid_contract_errors() {
    let mut r = common::rng(5);
    let a = random_set(&mut r, 5, 3);
    let other = FeatureSet::new(a.vectors.clone(), "other").unwrap();
    assert!(matches!(fid(&a, &other), Err(Error::Contract(_))));
    let single = FeatureSet::new(vec![vec![0.0; 3]], "toy").unwrap();
    assert!(matches!(fid(&a, &single), Err(Error::Contract(_))));
}

#[test]
fn slightly_indefinite_covariance_is_regularized() {
    let eye = GaussianSummary::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
    let near = GaussianSummary::new(DVector::zeros(2), DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, -1e-7]))).unwrap();
    let got = frechet_distance(&near, &eye).unwrap();
    assert!((got - 1.0).abs() < 1e-2);
    let bad = GaussianSummary::new(DVector::zeros(2), DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, -1.0]))).unwrap();
    assert!(matches!(frechet_distance(&bad, &eye), Err(Error::Numeric(_))));
}

#[test]
fn pixel_extractor_embeds_constant_images_as_their_value() {
    let c = 0.37;
    let img = ImageBatch::new(Tensor::<f64>::full(&[2, 3, 16, 16], c)).unwrap();
    let set = extract_features(&img, &PixelExtractor).unwrap();
    assert_eq!(set.len(), 2);
    assert_eq!(set.vectors[0], set.vectors[1]);
    assert!(set.vectors[0].iter().all(|v| (v - c).abs() < 1e-12));
    assert_eq!(set.dim(), 3);
}

/// Per-position unit normalization over channels, squared difference
/// summed over channels, averaged over positions, summed over the image and
/// its two 2x average-pooled copies.
fn pixel_lpips_oracle(a: &[f64], b: &[f64], size: usize) -> f64 {
    let pool = |x: &[f64], s: usize| {
        let h = s / 2;
        let mut out = vec![0.0; 3 * h * h];
        for c in 0..3 {
            for y in 0..h {
                for xx in 0..h {
                    let at = |dy: usize, dx: usize| x[c * s * s + (2 * y + dy) * s + 2 * xx + dx];
                    out[c * h * h + y * h + xx] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
                }
            }
        }
        out
    };
    let layer = |x: &[f64], y: &[f64], s: usize| {
        let hw = s * s;
        let mut total = 0.0;
        for p in 0..hw {
            let nx = (0..3).map(|c| x[c * hw + p].powi(2)).sum::<f64>().sqrt() + 1e-10;
            let ny = (0..3).map(|c| y[c * hw + p].powi(2)).sum::<f64>().sqrt() + 1e-10;
            for c in 0..3 {
                total += (x[c * hw + p] / nx - y[c * hw + p] / ny).powi(2);
            }
        }
        total / hw as f64
    };
    let (a1, b1) = (pool(a, size), pool(b, size));
    let (a2, b2) = (pool(&a1, size / 2), pool(&b1, size / 2));
    layer(a, b, size) + layer(&a1, &b1, size / 2) + layer(&a2, &b2, size / 4)
}

#[test]
fn lpips_matches_loop_oracle() {
    let mut r = common::rng(6);
    let a = common::uniform(&mut r, 3 * 16 * 16, -1.0, 1.0);
    let b = common::uniform(&mut r, 3 * 16 * 16, -1.0, 1.0);
    let got = lpips(&a, &b, 16, &PixelExtractor).unwrap();
    assert!((got - pixel_lpips_oracle(&a, &b, 16)).abs() < 1e-9);
    assert_eq!(lpips(&a, &a, 16, &PixelExtractor).unwrap(), 0.0);
}

#[test]
fn pairwise_lpips_of_two_outputs_is_their_distance() {
    let mut r = common::rng(7);
    let pair = common::images(&mut r, 2, 16);
    let got = pairwise_lpips(&pair, &PixelExtractor).unwrap();
    let data = pair.tensor().to_vec();
    let (a, b) = data.split_at(3 * 16 * 16);
    let big_a = resize_planar(a, 16, LPIPS_SIZE).unwrap();
    let big_b = resize_planar(b, 16, LPIPS_SIZE).unwrap();
    let expect = pixel_lpips_oracle(&big_a, &big_b, LPIPS_SIZE);
    assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    assert!(got > 0.0);
    assert!(matches!(pairwise_lpips(&pair.get(0), &PixelExtractor), Err(Error::Contract(_))));
}

#[test]
fn reference_blind_generator_has_zero_diversity() {
    let mut r = common::rng(8);
    let cfg = GeneratorConfig { use_fst_style_injection: false, bottleneck_style_injection: false, ..common::tiny_generator() };
    let g = Generator::<f64>::new(&cfg, 0).unwrap();
    let photos = common::images(&mut r, 2, 16);
    let pool = common::images(&mut r, 4, 16);
    let d = lpips_diversity(&g, &photos, &pool, 3, 0, &PixelExtractor).unwrap();
    assert!(d.abs() <= 1e-6);
    let full = Generator::<f64>::new(&common::tiny_generator(), 0).unwrap();
    assert!(lpips_diversity(&full, &photos, &pool, 3, 0, &PixelExtractor).unwrap() > 0.0);
    assert!(matches!(lpips_diversity(&g, &photos, &pool, 1, 0, &PixelExtractor), Err(Error::Contract(_))));
    assert!(matches!(lpips_diversity(&g, &photos, &pool, 5, 0, &PixelExtractor), Err(Error::Contract(_))));
}

#[test]
fn conv_extractor_loads_json_and_matches_loops() {
    let dir = tempfile::tempdir().unwrap();
    let missing = ConvExtractor::load(&dir.path().join("none.json"));
    assert!(matches!(missing, Err(Error::Config(_))));
    let mut r = common::rng(9);
    let w = common::uniform(&mut r, 4 * 3 * 9, -0.5, 0.5);
    let b = common::uniform(&mut r, 4, -0.1, 0.1);
    let json = serde_json::json!({
        "tag": "tiny",
        "layers": [{"shape": [4, 3, 3, 3], "weight": w, "bias": b, "stride": 2, "padding": 1}]
    });
    let path = dir.path().join("net.json");
    std::fs::write(&path, json.to_string()).unwrap();
    let net = ConvExtractor::load(&path).unwrap();
    assert_eq!(net.tag(), "tiny");
    let img = common::uniform(&mut r, 3 * 8 * 8, -1.0, 1.0);
    let (conv, d) = common::conv(&img, common::Dims { n: 1, c: 3, h: 8, w: 8 }, &w, Some(&b), 4, 3, 2, 1);
    let relu: Vec<f64> = conv.iter().map(|v| v.max(0.0)).collect();
    let got = net.embed(&img, 8).unwrap();
    assert!(common::max_diff(&got, &common::pooled(&relu, d)) < 1e-12);
    std::fs::write(&path, "{\"tag\": \"x\", \"layers\": []}").unwrap();
    assert!(matches!(ConvExtractor::load(&path), Err(Error::Config(_))));
}

fn tile(color: [u8; 3]) -> RgbImage {
    RgbImage::from_pixel(4, 4, Rgb(color))
}

#[test]
fn grid_layout_matches_composition_oracle() {
    let src = tile([10, 20, 30]);
    let reference = tile([200, 0, 0]);
    let outs = vec![tile([0, 255, 0]), tile([1, 2, 3])];
    let grid = compose_grid(&[src.clone()], &[reference.clone()], &[outs.clone()]).unwrap();
    assert_eq!(grid.dimensions(), (16, 4));
    let columns = [&reference, &src, &outs[0], &outs[1]];
    for (x, y, px) in grid.enumerate_pixels() {
        assert_eq!(px, columns[(x / 4) as usize].get_pixel(x % 4, y));
    }
}

#[test]
fn grid_files_and_contract() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grids/out.png");
    let rows = 3;
    let srcs: Vec<RgbImage> = (0..rows).map(|i| tile([i as u8 * 40, 0, 0])).collect();
    let refs: Vec<RgbImage> = (0..rows).map(|i| tile([0, i as u8 * 40, 0])).collect();
    let outs: Vec<Vec<RgbImage>> = (0..rows).map(|i| vec![tile([0, 0, i as u8 * 40])]).collect();
    emit_grid(&srcs, &refs, &outs, &path).unwrap();
    let decoded = image::open(&path).unwrap().to_rgb8();
    assert_eq!(decoded.dimensions(), (12, 12));
    assert!(matches!(compose_grid(&[], &[], &[]), Err(Error::Contract(_))));
    assert!(matches!(compose_grid(&srcs, &refs[..2], &outs), Err(Error::Contract(_))));
}

#[test]
fn metric_records_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let rec = MetricRecord {
        metric: "fid".into(),
        dataset: "toy".into(),
        value: 1.5,
        n_images: 3,
        extractor: "pixel-pyramid".into(),
        seed: 4,
    };
    let json = dir.path().join("m.json");
    rec.write_json(&json).unwrap();
    let back: MetricRecord = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(back, rec);
    let csv = dir.path().join("m.csv");
    rec.append_csv(&csv).unwrap();
    rec.append_csv(&csv).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines, vec![MetricRecord::CSV_HEADER, "fid,toy,1.5,3,pixel-pyramid,4", "fid,toy,1.5,3,pixel-pyramid,4"]);
}
