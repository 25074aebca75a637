//! Property suites run through an explicit proptest runner so the acceptance
//! target can report on them one by one.

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use triseg::data::{split, Sample, WINDOW};
use triseg::layers::{maxpool2x2_backward, maxpool2x2_forward, zero_upsample};
use triseg::metrics::{confusion, render_overlay};
use triseg::{Shape, Tensor};

pub const CASES: u32 = 1000;

fn runner() -> TestRunner {
    let config = Config { cases: CASES, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn shape(max: usize, max_c: usize) -> impl Strategy<Value = Shape> {
    (1..=max, 1..=max, 1..=max_c).prop_map(|(h, w, c)| Shape::new(h, w, c))
}

fn tensor_of(s: Shape) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-10.0..10.0f64, s.len()).prop_map(move |v| Tensor::from_vec(s, v).unwrap())
}

fn tensor(max: usize, max_c: usize) -> impl Strategy<Value = Tensor<f64>> {
    shape(max, max_c).prop_flat_map(tensor_of)
}

/// Three tensors sharing a spatial size, with independent channel counts.
fn stack() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>, Tensor<f64>)> {
    (1..=6usize, 1..=6usize, 1..=4usize, 1..=4usize, 1..=4usize).prop_flat_map(|(h, w, a, b, c)| {
        (tensor_of(Shape::new(h, w, a)), tensor_of(Shape::new(h, w, b)), tensor_of(Shape::new(h, w, c)))
    })
}

fn mask_pair() -> impl Strategy<Value = (Tensor<f32>, Tensor<f32>)> {
    (1..=12usize, 1..=12usize, 0.0..1.0f64).prop_flat_map(|(h, w, p)| {
        let bits = prop::collection::vec(prop::bool::weighted(p), h * w);
        (bits.clone(), bits).prop_map(move |(a, b)| {
            let t = |v: Vec<bool>| Tensor::from_vec(Shape::new(h, w, 1), v.iter().map(|&x| x as u8 as f32).collect());
            (t(a).unwrap(), t(b).unwrap())
        })
    })
}

fn report(r: Result<(), proptest::test_runner::TestError<impl std::fmt::Debug>>) -> Result<(), String> {
    r.map_err(|e| e.to_string())
}

pub fn tensor_roundtrips() -> Result<(), String> {
    let strat = tensor(8, 4).prop_flat_map(|t| {
        let s = t.shape();
        (Just(t), 0..s.height, 0..s.width, 0..s.channels, -100.0..100.0f64)
    });
    report(runner().run(&strat, |(t, y, x, c, v)| {
        let back = Tensor::from_vec(t.shape(), t.clone().into_vec()).unwrap();
        prop_assert_eq!(&back, &t);
        let mut u = t.clone();
        u.set(y, x, c, v).unwrap();
        prop_assert_eq!(u.get(y, x, c).unwrap(), v);
        prop_assert!(u.get(t.height(), 0, 0).is_err());
        let m = t.map(|a| a * 2.0).unwrap();
        prop_assert_eq!(m.shape(), t.shape());
        prop_assert_eq!(t.zip(&m, |a, b| b - a).unwrap(), t);
        Ok(())
    }))
}

pub fn concat_associativity() -> Result<(), String> {
    report(runner().run(&stack(), |(a, b, c)| {
        let left = Tensor::concat_channels(&[&Tensor::concat_channels(&[&a, &b]).unwrap(), &c]).unwrap();
        let right = Tensor::concat_channels(&[&a, &Tensor::concat_channels(&[&b, &c]).unwrap()]).unwrap();
        let flat = Tensor::concat_channels(&[&a, &b, &c]).unwrap();
        prop_assert_eq!(&left, &right);
        prop_assert_eq!(&left, &flat);
        let (ca, cb) = (a.channels(), b.channels());
        prop_assert_eq!(flat.slice_channels(0..ca).unwrap(), a);
        prop_assert_eq!(flat.slice_channels(ca..ca + cb).unwrap(), b);
        prop_assert_eq!(flat.slice_channels(ca + cb..flat.channels()).unwrap(), c);
        Ok(())
    }))
}

pub fn pooling_inverse() -> Result<(), String> {
    let strat = (tensor(6, 3), prop::sample::select(vec![2usize, 4]));
    report(runner().run(&strat, |(t, factor)| {
        let up = zero_upsample(&t, factor).unwrap();
        let sub = Tensor::from_fn(t.shape(), |y, x, c| up.at(y * factor, x * factor, c)).unwrap();
        prop_assert_eq!(&sub, &t);
        prop_assert_eq!(up.sum(), t.sum());
        // non-negative maps survive a pool after x2 zero insertion unchanged
        let pos = t.map(|v| v.abs()).unwrap();
        let (pooled, idx) = maxpool2x2_forward(&zero_upsample(&pos, 2).unwrap()).unwrap();
        prop_assert_eq!(&pooled, &pos);
        for y in 0..pos.height() {
            for x in 0..pos.width() {
                for c in 0..pos.channels() {
                    prop_assert_eq!(idx.argmax(y, x, c), (0, 0));
                }
            }
        }
        // routing conserves gradient mass
        let g = maxpool2x2_backward(&idx, &t).unwrap();
        prop_assert!((g.sum() - t.sum()).abs() <= 1e-9 * t.max_abs().max(1.0) * t.shape().len() as f64);
        Ok(())
    }))
}

pub fn iou_bounded_by_rates() -> Result<(), String> {
    report(runner().run(&mask_pair(), |(pred, truth)| {
        let c = confusion(&pred, &truth).unwrap();
        let (tpr, ppv) = c.rates();
        let iou = c.iou();
        prop_assert!((0.0..=1.0).contains(&iou));
        prop_assert!(iou <= tpr.min(ppv) + 1e-12, "iou {} tpr {} ppv {}", iou, tpr, ppv);
        prop_assert_eq!(c.total() as usize, pred.shape().len());
        Ok(())
    }))
}

pub fn confusion_symmetry() -> Result<(), String> {
    report(runner().run(&mask_pair(), |(pred, truth)| {
        let a = confusion(&pred, &truth).unwrap();
        let b = confusion(&truth, &pred).unwrap();
        prop_assert_eq!((a.tp, a.fp, a.fn_, a.tn), (b.tp, b.fn_, b.fp, b.tn));
        prop_assert_eq!(a.iou(), b.iou());
        Ok(())
    }))
}

pub fn overlay_recount() -> Result<(), String> {
    let strat = mask_pair().prop_flat_map(|(p, t)| {
        let n = p.shape().len();
        (Just(p), Just(t), prop::collection::vec(0.0..=1.0f32, n))
    });
    report(runner().run(&strat, |(pred, truth, gray)| {
        let image = Tensor::from_vec(pred.shape(), gray).unwrap();
        let c = confusion(&pred, &truth).unwrap();
        let o = render_overlay(&image, &pred, &truth).unwrap();
        prop_assert_eq!(super::count_overlay(&o.pixels), (c.tp, c.fp, c.fn_, c.tn));
        Ok(())
    }))
}

pub fn split_partitions() -> Result<(), String> {
    let z = Tensor::zeros(Shape::new(WINDOW, WINDOW, 1)).unwrap();
    let strat = (2..60usize, any::<u64>(), 0.05..0.95f64);
    report(runner().run(&strat, |(n, seed, ratio)| {
        let samples: Vec<Sample> =
            (0..n).map(|i| Sample { id: i.to_string(), image: z.clone(), mask: z.clone(), roi_origin: (0, 0) }).collect();
        let a = split(samples.clone(), ratio, seed).unwrap();
        let b = split(samples, ratio, seed).unwrap();
        let ids = |v: &[Sample]| v.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        prop_assert_eq!(ids(&a.train), ids(&b.train));
        let mut all: Vec<String> = ids(&a.train).into_iter().chain(ids(&a.test)).collect();
        all.sort();
        all.dedup();
        prop_assert_eq!(all.len(), n);
        prop_assert!(!a.train.is_empty() && !a.test.is_empty());
        prop_assert!((a.train.len() as f64 - ratio * n as f64).abs() <= 1.0);
        Ok(())
    }))
}

/// Every suite by name.
pub const SUITES: [(&str, fn() -> Result<(), String>); 7] = [
    ("tensor round-trips", tensor_roundtrips),
    ("concat associativity", concat_associativity),
    ("pooling inverse", pooling_inverse),
    ("IoU <= min(TPR, PPV)", iou_bounded_by_rates),
    ("confusion symmetry", confusion_symmetry),
    ("overlay recount", overlay_recount),
    ("split disjointness", split_partitions),
];
