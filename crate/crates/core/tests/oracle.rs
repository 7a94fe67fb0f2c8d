#![cfg(feature = "oracle")]

use pmkd::oracle::{self, RefAct, RefBn};
use pmkd::ops::{conv2d, cross_entropy, ConvGeometry};
use pmkd::{distill, Tensor};
use proptest::prelude::*;

fn geometry() -> impl Strategy<Value = ConvGeometry> {
    (
        prop::sample::select(vec![(3, 3, 1, 1), (1, 3, 0, 1), (3, 1, 1, 0), (1, 1, 0, 0), (3, 3, 0, 0)]),
        1usize..=2,
    )
        .prop_map(|((kh, kw, ph, pw), s)| ConvGeometry::new((kh, kw), (ph, pw), (s, s)))
}

fn values(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-2.0f32..2.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_nested_loops(
        g in geometry(),
        (n, cin, cout, h, w) in (1usize..3, 1usize..4, 1usize..4, 3usize..8, 3usize..8),
        seed in any::<u64>(),
        bias in any::<bool>(),
    ) {
        let gen = |len: usize, salt: u64| -> Vec<f32> {
            (0..len).map(|i| {
                let z = pmkd::distill::sub_seed(seed, salt * 1_000_003 + i as u64);
                (z % 2001) as f32 / 1000.0 - 1.0
            }).collect()
        };
        let x = Tensor::new(&[n, cin, h, w], gen(n * cin * h * w, 1)).unwrap();
        let wt = Tensor::new(&[cout, cin, g.kernel_h, g.kernel_w], gen(cout * cin * g.kernel_area(), 2)).unwrap();
        let b = bias.then(|| Tensor::from_vec(gen(cout, 3)));
        let y = conv2d(&x, &wt, b.as_ref(), &g).unwrap();
        let wf: Vec<f64> = wt.data().iter().map(|&v| v as f64).collect();
        let bf: Option<Vec<f64>> = b.as_ref().map(|b| b.data().iter().map(|&v| v as f64).collect());
        let r = oracle::naive_conv2d(&RefAct::from_tensor(&x), &wf, [cout, cin, g.kernel_h, g.kernel_w], bf.as_deref(), &g);
        prop_assert_eq!(y.dims(), &[n, cout, r.h, r.w][..]);
        for (a, e) in y.data().iter().zip(&r.data) {
            prop_assert!((*a as f64 - e).abs() < 1e-6, "{} vs {}", a, e);
        }
    }

    #[test]
    fn cross_entropy_matches_reference(z in values(12), labels in prop::collection::vec(0usize..4, 3)) {
        let t = Tensor::new(&[3, 4], z.clone()).unwrap();
        let zf: Vec<f64> = z.iter().map(|&v| v as f64).collect();
        let got = cross_entropy(&t, &labels).unwrap();
        prop_assert!((got - oracle::naive_cross_entropy(&zf, 4, &labels)).abs() < 1e-6);
    }

    #[test]
    fn lkd_matches_reference(t in values(10), s in values(10), tau in 0.5f32..8.0, scaled in any::<bool>()) {
        let tt = Tensor::new(&[2, 5], t.clone()).unwrap();
        let st = Tensor::new(&[2, 5], s.clone()).unwrap();
        let f = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        let scale = if scaled { (tau as f64).powi(2) } else { 1.0 };
        let want = oracle::naive_kl(&f(&t), &f(&s), 5, tau as f64, scale);
        let got = distill::loss_lkd(&tt, &st, tau, scaled).unwrap();
        prop_assert!((got - want).abs() < 1e-6 * want.abs().max(1.0), "{} vs {}", got, want);
    }

    #[test]
    fn fkd_matches_reference(a in values(24), b in values(24)) {
        let ta = vec![Tensor::new(&[1, 2, 2, 3], a[..12].to_vec()).unwrap(), Tensor::new(&[1, 3, 2, 2], a[12..].to_vec()).unwrap()];
        let tb = vec![Tensor::new(&[1, 2, 2, 3], b[..12].to_vec()).unwrap(), Tensor::new(&[1, 3, 2, 2], b[12..].to_vec()).unwrap()];
        let f = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        let want = (oracle::naive_mse(&f(&a[..12]), &f(&b[..12])) + oracle::naive_mse(&f(&a[12..]), &f(&b[12..]))) / 2.0;
        let got = distill::loss_fkd(&ta, &tb).unwrap();
        prop_assert!((got - want).abs() < 1e-6);
    }
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..6 {
        let case = oracle::random_tiny_case(seed);
        let report = oracle::gradient_check(&case, 25, seed + 100, 1e-3);
        assert!(report.fraction() >= 0.95, "seed {seed}: {report:?}");
    }
}

#[test]
fn interpreter_agrees_with_eval_forward() {
    for seed in 0..5 {
        let case = oracle::random_tiny_case(seed);
        let z = case.model.predict(&case.x, 8).unwrap();
        let r = oracle::reference_logits(&case.model, &oracle::ref_params(&case.model), &case.x, RefBn::Running);
        for (a, e) in z.data().iter().zip(&r.data) {
            assert!((*a as f64 - e).abs() < 1e-4, "{a} vs {e}");
        }
    }
}
