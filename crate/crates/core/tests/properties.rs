use mirror_cfe::camprior::{cam, csp_mix, mask_union, normalize_map, rho};
use mirror_cfe::losses::{loss_cls, tri_band, tri_hinge, TriConfig};
use mirror_cfe::mirror::{
    first_cfe, make_mirror, multiclass_reflection, position, reflector_for, sample_trajectory, Head,
    TrajectoryMode,
};
use mirror_cfe::pgm::{decode_pgm, encode_pgm, quantize};
use mirror_cfe::tensor::{argmax, softmax};
use mirror_cfe::Tensor;
use proptest::prelude::*;

fn vec_in(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

/// A `[n, c]` head with its bias, a latent and a distinct class pair.
fn head_case(n: usize, c: usize) -> impl Strategy<Value = (Tensor, Vec<f64>, Vec<f64>, usize, usize)> {
    (vec_in(n * c, -1.0, 1.0), vec_in(c, -1.0, 1.0), vec_in(n, -2.0, 2.0), 0..c, 1..c).prop_map(
        move |(w, b, z, s, off)| (Tensor::new(vec![n, c], w).unwrap(), b, z, s, (s + off) % c),
    )
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

proptest! {
    #[test]
    fn projection_lies_on_the_boundary((w, b, z, s, t) in head_case(8, 4)) {
        let m = make_mirror(&w, &b, s, t).unwrap();
        let zp = position(&z, &m, 0.5).unwrap();
        prop_assert!(m.margin(&zp).abs() < 1e-9 * (1.0 + m.margin(&z).abs()));
    }

    #[test]
    fn reflection_flips_pair_confidence((w, b, z, s, t) in head_case(8, 3)) {
        let m = make_mirror(&w, &b, s, t).unwrap();
        let zr = position(&z, &m, 1.0).unwrap();
        prop_assert!((m.pair_confidence(&zr) - (1.0 - m.pair_confidence(&z))).abs() < 1e-12);
    }

    #[test]
    fn reflection_is_an_involution((w, b, z, s, t) in head_case(8, 3)) {
        let m = make_mirror(&w, &b, s, t).unwrap();
        let back = position(&position(&z, &m, 1.0).unwrap(), &m, 1.0).unwrap();
        prop_assert!(dist(&back, &z) < 1e-9);
        prop_assert_eq!(position(&z, &m, 0.0).unwrap(), z);
    }

    #[test]
    fn pair_confidence_moves_monotonically((w, b, z, s, t) in head_case(6, 3)) {
        let m = make_mirror(&w, &b, s, t).unwrap();
        let up = m.margin(&z) < 0.0;
        let qs: Vec<f64> = (0..=10)
            .map(|i| m.pair_confidence(&position(&z, &m, i as f64 / 10.0).unwrap()))
            .collect();
        for pair in qs.windows(2) {
            if up {
                prop_assert!(pair[1] >= pair[0]);
            } else {
                prop_assert!(pair[1] <= pair[0]);
            }
        }
    }

    #[test]
    fn multiclass_midpoint_ties_source_and_target((w, b, z, s, t) in head_case(12, 4)) {
        let m = make_mirror(&w, &b, s, t).unwrap();
        let head = Head::new(&w, &b);
        let r = multiclass_reflection(&z, &m, head).unwrap();
        let before = head.logits(&z).unwrap();
        let after = head.logits(&r.z).unwrap();
        prop_assert!((after[s] - before[t]).abs() < 1e-6);
        prop_assert!((after[t] - before[s]).abs() < 1e-6);
        let refl = reflector_for(&z, m, head, TrajectoryMode::Multiclass).unwrap();
        let p = head.probs(&refl.latent_at(&z, 0.5).unwrap()).unwrap();
        prop_assert!((p[s] - p[t]).abs() < 1e-6);
    }

    #[test]
    fn first_cfe_is_the_earliest_flip((w, b, z, s, t) in head_case(8, 3)) {
        let head = Head::new(&w, &b);
        let m = make_mirror(&w, &b, s, t).unwrap();
        let refl = reflector_for(&z, m, head, TrajectoryMode::Binary).unwrap();
        let traj = sample_trajectory(&z, &refl, head, 21).unwrap();
        if let Ok(p) = first_cfe(&traj, head) {
            prop_assert_eq!(argmax(&p.p_multi), t);
            if p.k > 0.0 {
                let before = traj.point_at(head, (p.k - 1e-3).max(0.0)).unwrap();
                prop_assert_ne!(argmax(&before.p_multi), t);
            }
        } else {
            prop_assert!(traj.points.iter().all(|q| argmax(&q.p_multi) != t));
        }
    }

    #[test]
    fn cam_is_linear_in_features(
        w in vec_in(6, -1.0, 1.0),
        f1 in vec_in(3 * 4, -1.0, 1.0),
        f2 in vec_in(3 * 4, -1.0, 1.0),
        a in -2.0f64..2.0,
        c in -2.0f64..2.0,
    ) {
        let w = Tensor::new(vec![3, 2], w).unwrap();
        let t = |v: Vec<f64>| Tensor::new(vec![3, 2, 2], v).unwrap();
        let mix: Vec<f64> = f1.iter().zip(&f2).map(|(x, y)| a * x + c * y).collect();
        let (u1, u2) = (cam(&w, &t(f1)).unwrap(), cam(&w, &t(f2)).unwrap());
        let um = cam(&w, &t(mix)).unwrap();
        for i in 0..8 {
            let want = a * u1.raw.data()[i] + c * u2.raw.data()[i];
            prop_assert!((um.raw.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_maps_peak_at_one(u in vec_in(16, -1.0, 1.0)) {
        let n = normalize_map(&u);
        prop_assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
        if u.iter().any(|&v| v > 0.0) {
            prop_assert_eq!(n.iter().cloned().fold(0.0, f64::max), 1.0);
        }
    }

    #[test]
    fn masks_grow_as_the_threshold_drops(
        ns in vec_in(16, 0.0, 1.0),
        nt in vec_in(16, 0.0, 1.0),
        k1 in 0.0f64..=1.0,
        k2 in 0.0f64..=1.0,
    ) {
        let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
        let count = |k: f64| mask_union(&ns, &nt, rho(k, 0.2, 0.8).unwrap()).iter().sum::<f64>();
        prop_assert!(count(lo) <= count(hi));
    }

    #[test]
    fn csp_mix_is_idempotent(
        f in vec_in(2 * 9, -1.0, 1.0),
        u in vec_in(2 * 9, -1.0, 1.0),
        mask in prop::collection::vec(prop::bool::ANY, 9),
    ) {
        let t = |v: Vec<f64>| Tensor::new(vec![2, 3, 3], v).unwrap();
        let m: Vec<f64> = mask.iter().map(|&b| b as u8 as f64).collect();
        let (f, u) = (t(f), t(u));
        let once = csp_mix(&f, &u, &m).unwrap();
        prop_assert_eq!(csp_mix(&once, &u, &m).unwrap(), once.clone());
        prop_assert_eq!(csp_mix(&f, &u, &[0.0; 9]).unwrap(), f);
        prop_assert_eq!(csp_mix(&once, &u, &[1.0; 9]).unwrap(), u);
    }

    #[test]
    fn kld_is_nonnegative(a in vec_in(4, -3.0, 3.0), b in vec_in(4, -3.0, 3.0)) {
        let (p, q) = (softmax(&a), softmax(&b));
        prop_assert!(loss_cls(&p, &q).unwrap() >= -1e-15);
        prop_assert!(loss_cls(&p, &p).unwrap().abs() < 1e-15);
    }

    #[test]
    fn tri_hinge_shrinks_with_alpha(
        d_src in 0.0f64..1.0,
        d_ref in 0.0f64..1.0,
        ratio in 0.01f64..5.0,
        a1 in 0.0f64..=1.0,
        a2 in 0.0f64..=1.0,
    ) {
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        let at = |alpha| tri_hinge(d_src, tri_band(d_ref, ratio, &TriConfig { alpha, ..TriConfig::default() }));
        prop_assert!(at(hi) <= at(lo) + 1e-15);
        // With alpha = 1 the lower edge sits at zero.
        let one = tri_band(d_ref, ratio, &TriConfig { alpha: 1.0, ..TriConfig::default() });
        prop_assert_eq!(one.0, 0.0);
        prop_assert!(at(1.0) >= 0.0);
    }

    #[test]
    fn pgm_round_trip_quantizes(v in vec_in(12, -0.2, 1.2)) {
        let img = Tensor::new(vec![1, 3, 4], v.clone()).unwrap();
        let back = decode_pgm(&encode_pgm(&img).unwrap()).unwrap();
        for (b, x) in back.data().iter().zip(&v) {
            prop_assert_eq!(*b, quantize(*x) as f64 / 255.0);
        }
    }
}
