mod common;

use proptest::prelude::*;
use stylefat::evalkit::{fid, FeatureSet};
use stylefat::normalization::*;
use stylefat::trainer::ema_update;
use stylefat::params::{Constraint, ParamStore};
use stylefat::*;

fn shape() -> impl Strategy<Value = [usize; 4]> {
    (1usize..3, 1usize..5, 1usize..5, 2usize..5).prop_map(|(n, c, h, w)| [n, c, h, w])
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn instance_normalized_maps_have_zero_mean_unit_variance(s in shape(), seed in any::<u64>()) {
        let z = common::tensor(&mut common::rng(seed), &s);
        let out = baseline_norm(&z, BaselineMode::In, None, None).unwrap();
        let d = common::Dims::of(&s);
        let (mu, sigma) = common::instance_stats(&out.to_vec(), d);
        let (_, zsigma) = common::instance_stats(&z.to_vec(), d);
        for i in 0..mu.len() {
            prop_assert!(mu[i].abs() < 1e-9);
            // output variance is v / (v + eps) for input variance v
            let var = sigma[i] * sigma[i] - common::EPS;
            let zvar = zsigma[i] * zsigma[i] - common::EPS;
            prop_assert!((var - zvar / (zvar + common::EPS)).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_style_reduces_adapolin_to_polin(s in shape(), seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let z = common::tensor(&mut r, &s);
        let w = MixWeights::new(common::tensor(&mut r, &[s[1], 2 * s[1]]), None).unwrap();
        let a = adapolin(&z, &w, &AffineStyle::identity(s[0], s[1])).unwrap();
        let p = polin(&z, &w).unwrap();
        prop_assert!(common::max_diff(&a.to_vec(), &p.to_vec()) < 1e-12);
    }

    #[test]
    fn polin_is_invariant_to_per_sample_affine_input_changes(s in shape(), seed in any::<u64>(), scale in 0.5f64..3.0, shift in -2.0f64..2.0) {
        let mut r = common::rng(seed);
        let z = common::tensor(&mut r, &s);
        let d = common::Dims::of(&s);
        let weight = common::tensor(&mut r, &[s[1], 2 * s[1]]);
        let w = MixWeights::new(weight.clone(), None).unwrap();
        let moved = Tensor::from_vec(z.to_vec().iter().map(|v| v * scale + shift).collect(), &s);
        let a = polin(&z, &w).unwrap().to_vec();
        let b = polin(&moved, &w).unwrap().to_vec();
        // only eps breaks invariance: each normalized entry moves by at most
        // |x| * eps / (2 v) * max(1, 1 / scale^2), with |x| <= sqrt(C H W)
        let v_min = common::instance_stats(z.data(), d).1.into_iter()
            .chain(common::layer_stats(z.data(), d).1)
            .map(|sigma| sigma * sigma - common::EPS)
            .fold(f64::INFINITY, f64::min);
        prop_assume!(v_min > 1e-3);
        let row = weight.to_vec().chunks(2 * s[1]).map(|r| r.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max);
        let bound = row * ((s[1] * s[2] * s[3]) as f64).sqrt() * common::EPS / (2.0 * v_min) * (1.0f64).max(1.0 / (scale * scale));
        prop_assert!(common::max_diff(&a, &b) <= bound + 1e-12);
    }

    #[test]
    fn fid_is_symmetric_and_nonnegative(seed in any::<u64>(), d in 1usize..5, m in 3usize..12) {
        let mut r = common::rng(seed);
        let a = FeatureSet::new((0..m).map(|_| common::uniform(&mut r, d, -1.0, 1.0)).collect(), "t").unwrap();
        let b = FeatureSet::new((0..m + 2).map(|_| common::uniform(&mut r, d, -0.5, 2.0)).collect(), "t").unwrap();
        let ab = fid(&a, &b).unwrap();
        prop_assert!(ab >= -1e-9);
        prop_assert!((ab - fid(&b, &a).unwrap()).abs() < 1e-6 * (1.0 + ab));
    }

    #[test]
    fn ema_keeps_fixed_point_and_interpolates(seed in any::<u64>(), w in 0.001f64..0.999) {
        let mut r = common::rng(seed);
        let build = |v: Vec<f64>| {
            let mut s = ParamStore::<f64>::new();
            s.add("p", Tensor::from_vec(v, &[4]), Constraint::Free);
            s
        };
        let e = common::uniform(&mut r, 4, -1.0, 1.0);
        let l = common::uniform(&mut r, 4, -1.0, 1.0);
        let mut same = build(e.clone());
        ema_update(&mut same, &build(e.clone()), w).unwrap();
        prop_assert!(same.values_equal(&build(e.clone())));
        let mut ema = build(e.clone());
        ema_update(&mut ema, &build(l.clone()), w).unwrap();
        let got = ema.tensors()[0].to_vec();
        for i in 0..4 {
            let (lo, hi) = (e[i].min(l[i]), e[i].max(l[i]));
            prop_assert!(got[i] >= lo - 1e-12 && got[i] <= hi + 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn translations_stay_in_image_range(seed in any::<u64>(), amp in 0.1f64..50.0) {
        let mut r = common::rng(seed);
        let g = Generator::<f64>::new(&common::tiny_generator(), seed).unwrap();
        let x = common::images(&mut r, 1, 16);
        let y = common::images(&mut r, 1, 16);
        let loud = ImageBatch::clamped(Tensor::from_vec(y.tensor().to_vec().iter().map(|v| v * amp).collect(), y.tensor().shape())).unwrap();
        for out in [g.translate(&x, &y).unwrap(), g.translate(&x, &loud).unwrap()] {
            prop_assert!(out.tensor().to_vec().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        }
    }
}
