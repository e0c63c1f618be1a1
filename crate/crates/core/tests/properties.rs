//! Property tests for metrics, losses and the patch arithmetic.

use candle_core::{Device, Tensor};
use ndarray::Array2;
use proptest::prelude::*;

use vesselgan::data::{denormalize, normalize, PatchGrid};
use vesselgan::discriminators::FeatureTaps;
use vesselgan::eval::{auc_roc, binarize, confusion_metrics, ssim, RocCurve};
use vesselgan::losses::{
    composite, feature_matching, hinge_d, reconstruction, scalar, weighted_feature_matching, LossWeights, ScaleLosses,
};

const SIDE: usize = 16;

/// Confidence on a 1/64 lattice, ground truth and FoV, with both classes
/// present inside the FoV.
fn maps() -> impl Strategy<Value = (Array2<f32>, Array2<u8>, Array2<u8>)> {
    let n = SIDE * SIDE;
    (
        prop::collection::vec(0u8..=64, n),
        prop::collection::vec(any::<bool>(), n),
        prop::collection::vec(prop::bool::weighted(0.85), n),
    )
        .prop_map(|(c, g, f)| {
            let conf = Array2::from_shape_fn((SIDE, SIDE), |(r, q)| f32::from(c[r * SIDE + q]) / 64.0);
            let mut gt = Array2::from_shape_fn((SIDE, SIDE), |(r, q)| u8::from(g[r * SIDE + q]));
            let mut fov = Array2::from_shape_fn((SIDE, SIDE), |(r, q)| u8::from(f[r * SIDE + q]));
            fov[[0, 0]] = 1;
            fov[[0, 1]] = 1;
            gt[[0, 0]] = 1;
            gt[[0, 1]] = 0;
            (conf, gt, fov)
        })
}

fn tensor(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
}

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raising_the_threshold_trades_sensitivity_for_specificity(
        (conf, gt, fov) in maps(),
        lo in 0.01f64..0.98,
        gap in 0.0f64..0.5,
    ) {
        let hi = (lo + gap).min(0.99);
        let a = confusion_metrics(&binarize(&conf, lo).unwrap(), &gt, &fov).unwrap();
        let b = confusion_metrics(&binarize(&conf, hi).unwrap(), &gt, &fov).unwrap();
        prop_assert!(b.sensitivity <= a.sensitivity);
        prop_assert!(b.specificity >= a.specificity);
        let (ma, mb) = (binarize(&conf, lo).unwrap(), binarize(&conf, hi).unwrap());
        prop_assert!(mb.iter().zip(&ma).all(|(&h, &l)| h <= l));
    }

    #[test]
    fn auc_ignores_strictly_monotone_rescaling((conf, gt, fov) in maps()) {
        let base = auc_roc(&conf, &gt, &fov).unwrap();
        // the lattice stays distinct in f32 under both maps
        let squashed = conf.mapv(|v| 0.1 + 0.8 * v * v);
        let flipped = conf.mapv(|v| 1.0 - v);
        prop_assert!((auc_roc(&squashed, &gt, &fov).unwrap().auc - base.auc).abs() < 1e-12);
        prop_assert!((auc_roc(&flipped, &gt, &fov).unwrap().auc - (1.0 - base.auc)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&base.auc));
    }

    #[test]
    fn roc_points_are_monotone((conf, gt, fov) in maps()) {
        let curve = auc_roc(&conf, &gt, &fov).unwrap();
        let distinct: std::collections::BTreeSet<u32> = conf
            .iter()
            .zip(&fov)
            .filter(|(_, &m)| m == 1)
            .map(|(c, _)| c.to_bits())
            .collect();
        prop_assert_eq!(curve.distinct_thresholds(), distinct.len());
        for w in curve.points.windows(2) {
            prop_assert!(w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr && w[0].threshold > w[1].threshold);
        }
        let again = RocCurve::from_samples(
            conf.iter().zip(&gt).zip(&fov).filter(|(_, &m)| m == 1).map(|((&c, &g), _)| (f64::from(c), g == 1)).collect(),
        ).unwrap();
        prop_assert_eq!(again, curve);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(
        a in prop::collection::vec(0.0f64..1.0, SIDE * SIDE),
        b in prop::collection::vec(0.0f64..1.0, SIDE * SIDE),
    ) {
        let a = Array2::from_shape_vec((SIDE, SIDE), a).unwrap();
        let b = Array2::from_shape_vec((SIDE, SIDE), b).unwrap();
        let ab = ssim(&a, &b).unwrap();
        prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn losses_are_non_negative(x in values(32), y in values(32), z in values(8)) {
        let s = [2, 1, 4, 4];
        let (a, b) = (tensor(&x, &s), tensor(&y, &s));
        let c = tensor(&z, &[2, 1, 2, 2]);
        let t = FeatureTaps { enc: vec![a.clone(), c.clone()], dec: vec![b.clone()] };
        let u = FeatureTaps { enc: vec![b.clone(), c.affine(-1.0, 0.5).unwrap()], dec: vec![a.clone()] };
        prop_assert!(scalar(&feature_matching(&[a.clone(), c.clone()], &[b.clone(), c.clone()]).unwrap()).unwrap() >= 0.0);
        prop_assert!(scalar(&weighted_feature_matching(&t, &u, &LossWeights::default()).unwrap()).unwrap() >= 0.0);
        prop_assert!(scalar(&reconstruction(&a, &b).unwrap()).unwrap() >= 0.0);
        prop_assert!(scalar(&hinge_d(&a, &b).unwrap()).unwrap() >= 0.0);
    }

    #[test]
    fn composite_is_linear_in_each_weight(
        parts in prop::collection::vec((0.0f64..4.0, -2.0f64..2.0, 0.0f64..2.0, 0.0f64..2.0), 1..3),
        which in 0usize..3,
        k in 0.0f64..20.0,
    ) {
        let parts: Vec<ScaleLosses> = parts.iter().map(|&(d, g, r, f)| ScaleLosses::new(d, g, r, f)).collect();
        let with = |v: f64| {
            let mut w = LossWeights::default();
            match which {
                0 => w.lambda_adv = v,
                1 => w.lambda_rec = v,
                _ => w.lambda_wfm = v,
            }
            composite(&parts, &w).unwrap()
        };
        let (f0, fk, f2k) = (with(0.0), with(k), with(2.0 * k));
        prop_assert!(((f2k.total_g - fk.total_g) - (fk.total_g - f0.total_g)).abs() < 1e-9);
        prop_assert_eq!(f0.total_d, fk.total_d);
        prop_assert_eq!((f0.adv_g, f0.rec, f0.wfm), (fk.adv_g, fk.rec, fk.wfm));
    }

    #[test]
    fn grid_origins_fit_and_cover(h in 1usize..400, w in 1usize..400, p in 1usize..64, s in 1usize..64) {
        prop_assume!(p <= h && p <= w);
        let grid = PatchGrid::new(h, w, p, s).unwrap();
        let (ch, cw) = grid.covered_extent();
        prop_assert!(ch <= h && cw <= w && h - ch < s && w - cw < s);
        let origins = &grid.origins;
        prop_assert_eq!(origins.len(), grid.len());
        prop_assert!(origins.windows(2).all(|o| o[0] < o[1]));
        prop_assert!(origins.iter().all(|&(r, c)| r + p <= h && c + p <= w));
    }
}

#[test]
fn normalization_round_trips_every_level() {
    for v in 0..=255u8 {
        let n = normalize(v);
        assert!((-1.0..=1.0).contains(&n));
        assert_eq!(denormalize(n), v);
    }
}
