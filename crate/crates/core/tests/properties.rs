use cdma_core::config::OptimizerConfig;
use cdma_core::data::patches::augment;
use cdma_core::data::tnsr::{decode_tnsr, encode_tnsr, TnsrMap, TnsrTensor};
use cdma_core::inference::{dsc, ji, window_grid};
use cdma_core::losses::{cdkd_loss, entropy, kl_map, t_softmax, um_loss, KlDirection};
use cdma_core::params::ParamStore;
use cdma_core::trainer::Sgd;
use cdma_core::{Graph, Tensor};
use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid_case() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..600)
        .prop_flat_map(|extent| (Just(extent), 1..=extent))
        .prop_flat_map(|(extent, window)| (Just(extent), Just(window), 1..=window))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn window_grid_covers_every_pixel((extent, window, stride) in grid_case()) {
        let starts = window_grid(extent, window, stride).unwrap();
        prop_assert_eq!(starts[0], 0);
        prop_assert_eq!(*starts.last().unwrap(), extent - window);
        for w in starts.windows(2) {
            prop_assert!(w[0] < w[1] && w[1] - w[0] <= stride);
        }
        let mut covered = vec![false; extent];
        for &s in &starts {
            covered[s..s + window].iter_mut().for_each(|c| *c = true);
        }
        prop_assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn wide_strides_still_end_flush(extent in 2usize..600, window in 1usize..50, extra in 1usize..50) {
        prop_assume!(window <= extent);
        let stride = window + extra;
        let starts = window_grid(extent, window, stride).unwrap();
        prop_assert_eq!(*starts.last().unwrap(), extent - window);
        for w in starts.windows(2) {
            prop_assert!(w[0] < w[1] && w[1] - w[0] <= stride);
        }
    }
}

fn brute(a: &[bool], b: &[bool]) -> (f64, f64) {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64;
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count() as f64;
    let sizes = (a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count()) as f64;
    if sizes == 0.0 {
        (1.0, 1.0)
    } else {
        (2.0 * inter / sizes, inter / union)
    }
}

fn to_mask(bits: &[bool]) -> Tensor<f32> {
    Tensor::new([8, 8], bits.iter().map(|&b| b as u8 as f32).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_match_pixel_counting(a in vec(any::<bool>(), 64), b in vec(any::<bool>(), 64)) {
        let (d, j) = brute(&a, &b);
        let (pa, pb) = (to_mask(&a), to_mask(&b));
        prop_assert_eq!(dsc(&pa, &pb).unwrap(), d);
        prop_assert_eq!(ji(&pa, &pb).unwrap(), j);
        let jj = ji(&pa, &pb).unwrap();
        prop_assert!((dsc(&pa, &pb).unwrap() - 2.0 * jj / (1.0 + jj)).abs() < 1e-12);
        prop_assert_eq!(dsc(&pa, &pb).unwrap(), dsc(&pb, &pa).unwrap());
    }

    #[test]
    fn tempered_softmax_is_a_distribution(z in vec(-30.0f64..30.0, 12), t in 0.1f64..50.0) {
        let mut g = Graph::<f64>::new();
        let zv = g.constant(Tensor::new([2, 3, 2, 1], z).unwrap());
        let p = t_softmax(&mut g, zv, t).unwrap();
        let d = g.value(p).data();
        for b in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|c| d[(b * 3 + c) * 2 + i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
        prop_assert!(d.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn entropy_grows_with_temperature(z in vec(-5.0f64..5.0, 6), t in 0.2f64..20.0) {
        prop_assume!((z[0] - z[3]).abs() > 1e-3 || (z[1] - z[4]).abs() > 1e-3 || (z[2] - z[5]).abs() > 1e-3);
        let ent = |t: f64| {
            let mut g = Graph::<f64>::new();
            let zv = g.constant(Tensor::new([1, 2, 1, 3], z.clone()).unwrap());
            let p = t_softmax(&mut g, zv, t).unwrap();
            let e = entropy(&mut g, p).unwrap();
            g.value(e).data().to_vec()
        };
        let (lo, hi) = (ent(t), ent(t * 1.5));
        for (a, b) in lo.iter().zip(&hi) {
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn divergences_are_non_negative(a in vec(-4.0f64..4.0, 8), b in vec(-4.0f64..4.0, 8), c in vec(-4.0f64..4.0, 8)) {
        let mut g = Graph::<f64>::new();
        let zs: Vec<_> = [a, b, c].into_iter().map(|z| g.param(Tensor::new([1, 2, 2, 2], z).unwrap())).collect();
        let ps: Vec<_> = zs.iter().map(|&z| g.softmax_channel(z).unwrap()).collect();
        let kl = kl_map(&mut g, ps[0], ps[1]).unwrap();
        prop_assert!(g.value(kl).item() >= -1e-12);
        for dir in [KlDirection::TeacherStudent, KlDirection::StudentTeacher] {
            let cd = cdkd_loss(&mut g, &zs, 10.0, dir).unwrap();
            prop_assert!(g.value(cd.total).item() >= -1e-12);
        }
        let um = um_loss(&mut g, &ps).unwrap();
        prop_assert!(g.value(um).item() >= 0.0 && g.value(um).item() <= 2f64.ln() + 1e-12);
    }

    #[test]
    fn tnsr_round_trip_is_bit_exact(
        dims in vec(1usize..5, 1..4),
        seed in any::<u64>(),
        wide in any::<bool>(),
    ) {
        let n: usize = dims.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = TnsrMap::new();
        let vals: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut rng, -1e6..1e6)).collect();
        if wide {
            m.insert("w".into(), TnsrTensor::F64(Tensor::new(dims.clone(), vals.clone()).unwrap()));
        }
        m.insert("a/b".into(), TnsrTensor::F32(Tensor::new(dims.clone(), vals.iter().map(|&v| v as f32).collect()).unwrap()));
        let bytes = encode_tnsr(&m).unwrap();
        let back = decode_tnsr(&bytes).unwrap();
        prop_assert_eq!(back.len(), m.len());
        for ((ka, va), (kb, vb)) in m.iter().zip(&back) {
            prop_assert_eq!(ka, kb);
            match (va, vb) {
                (TnsrTensor::F32(x), TnsrTensor::F32(y)) => {
                    prop_assert_eq!(x.shape(), y.shape());
                    prop_assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
                }
                (TnsrTensor::F64(x), TnsrTensor::F64(y)) => {
                    prop_assert_eq!(x.shape(), y.shape());
                    prop_assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
                }
                _ => prop_assert!(false, "dtype changed"),
            }
        }
    }

    #[test]
    fn augmentation_preserves_mask_area(bits in vec(any::<bool>(), 36), seed in any::<u64>()) {
        let mask = Tensor::new([6, 6], bits.iter().map(|&b| b as u8 as f32).collect()).unwrap();
        let img = Tensor::from_fn([3, 6, 6], |i| (i % 11) as f32 / 11.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (out, m) = augment(&img, Some(&mask), &mut rng).unwrap();
        let m = m.unwrap();
        prop_assert_eq!(m.sum(), mask.sum());
        prop_assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert_eq!(out.shape(), img.shape());
    }

    #[test]
    fn plain_sgd_is_gradient_descent(w in vec(-10.0f64..10.0, 5), g in vec(-10.0f64..10.0, 5), lr in 1e-4f64..1.0) {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new([5], w.clone()).unwrap());
        let mut gs = ParamStore::new();
        gs.insert("w", Tensor::new([5], g.clone()).unwrap());
        Sgd::new(&p, 0.0, 0.0).step(&mut p, &gs, lr).unwrap();
        for ((after, w0), g0) in p.get("w").unwrap().data().iter().zip(&w).zip(&g) {
            prop_assert_eq!(after.to_bits(), (w0 - lr * g0).to_bits());
        }
    }

    #[test]
    fn lr_never_increases(e in 0usize..1000, lr in 1e-5f64..1.0, every in 1usize..100, factor in 0.01f64..=1.0) {
        let o = OptimizerConfig { lr, decay_every: every, decay_factor: factor, ..OptimizerConfig::default() };
        prop_assert!(o.lr_at(e + 1) <= o.lr_at(e));
    }
}

#[test]
fn lr_schedule_examples() {
    let o = OptimizerConfig::default();
    assert_eq!(o.lr_at(0), 1e-3);
    assert!((o.lr_at(50) - 1e-4).abs() < 1e-18);
    assert!((o.lr_at(149) - 1e-5).abs() < 1e-18);
}
