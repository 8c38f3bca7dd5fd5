use proptest::prelude::*;
use semsplat::camera::Camera;
use semsplat::codec::FeatureCodec;
use semsplat::deformation::{fdm_eval, SemanticTracker};
use semsplat::evalkit::{iou, psnr};
use semsplat::gaussian::GaussianCloud;
use semsplat::losses::tv_loss;
use semsplat::model::SceneModel;
use semsplat::query::{relevancy_score, QueryResult};

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Vectors of `n` components bounded away from zero length.
fn direction(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-1.0f64..1.0, n).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

fn small_cloud(n: usize, d: usize, seed: u64) -> GaussianCloud<f64> {
    use rand::{Rng, SeedableRng};
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = GaussianCloud::<f64>::zeros(n, 1, d);
    for i in 0..n {
        cloud.means[3 * i] = r.random_range(-0.5..0.5);
        cloud.means[3 * i + 1] = r.random_range(-0.5..0.5);
        cloud.means[3 * i + 2] = r.random_range(2.0..4.0);
    }
    cloud.rotations = (0..4 * n).map(|_| r.random_range(-1.0..1.0)).collect();
    cloud.normalize_rotations().unwrap();
    cloud.log_scales = (0..3 * n).map(|_| r.random_range(-3.0..-1.5)).collect();
    cloud.opacity_logits = (0..n).map(|_| r.random_range(-2.0..3.0)).collect();
    cloud.sh_coeffs = (0..cloud.sh_coeffs.len()).map(|_| r.random_range(-0.5..0.5)).collect();
    cloud.features = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
    cloud
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn score_is_half_when_every_dot_is_equal(s in -1.0f64..1.0) {
        // prompt and every canonical phrase share the same dot with the image
        let img = [1.0, 0.0];
        let a = [s, (1.0 - s * s).sqrt()];
        let b = [s, -(1.0 - s * s).sqrt()];
        let canon: Vec<&[f64]> = vec![&a, &b, &a, &b];
        prop_assert!((relevancy_score(&img, &a, &canon) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn score_lies_in_the_unit_interval(img in direction(6), text in direction(6), c in proptest::collection::vec(direction(6), 4)) {
        let (img, text) = (unit(&img), unit(&text));
        let c: Vec<Vec<f64>> = c.iter().map(|v| unit(v)).collect();
        let canon: Vec<&[f64]> = c.iter().map(|v| v.as_slice()).collect();
        let s = relevancy_score(&img, &text, &canon);
        prop_assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn mask_is_exactly_the_thresholded_score(
        rows in proptest::collection::vec(direction(4), 1..40),
        threshold in 0.0f64..1.0,
    ) {
        let text = unit(&[1.0, 0.2, 0.0, 0.0]);
        let c: Vec<Vec<f64>> = (0..4).map(|i| { let mut v = vec![0.1; 4]; v[i] = 1.0; unit(&v) }).collect();
        let canon: Vec<&[f64]> = c.iter().map(|v| v.as_slice()).collect();
        let emb: Vec<f64> = rows.iter().flat_map(|r| unit(r)).collect();
        let q = QueryResult::from_embeddings("p", &text, &canon, &emb, rows.len(), 1, threshold);
        prop_assert!(q.mask_consistent());
        for (s, m) in q.relevancy.iter().zip(&q.mask) {
            prop_assert_eq!(*m, *s >= threshold);
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in proptest::collection::vec(any::<bool>(), 1..200), seed in any::<u64>()) {
        let b: Vec<bool> = a.iter().enumerate().map(|(i, &x)| x ^ ((seed >> (i % 64)) & 1 == 1)).collect();
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        if let Some(v) = ab {
            prop_assert!((0.0..=100.0).contains(&v));
        }
    }

    #[test]
    fn psnr_falls_as_noise_grows(base in proptest::collection::vec(0.2f64..0.8, 4..64), amp in 0.001f64..0.1) {
        let noisy = |k: f64| -> Vec<f64> {
            base.iter().enumerate().map(|(i, &v)| v + if i % 2 == 0 { k } else { -k }).collect()
        };
        prop_assert!(psnr(&noisy(amp), &base) > psnr(&noisy(amp * 1.5), &base));
    }

    #[test]
    fn zero_weight_banks_give_zero_offsets(
        centers in proptest::collection::vec(0.0f64..1.0, 1..8),
        t in 0.0f64..1.0,
    ) {
        let b = centers.len();
        let widths = vec![0.2; b];
        let mut out = [1.0; 3];
        fdm_eval(&vec![0.0; 3 * b], &centers, &widths, t, &mut out);
        prop_assert_eq!(out, [0.0; 3]);
    }

    #[test]
    fn tv_is_zero_only_for_constant_maps(v in -2.0f64..2.0, w in 2usize..6, h in 2usize..6, bump in 0usize..36) {
        let mut x = vec![v; w * h];
        prop_assert_eq!(tv_loss(&x, w, h, 1).unwrap().0, 0.0);
        x[bump % (w * h)] += 0.5;
        prop_assert!(tv_loss(&x, w, h, 1).unwrap().0 > 0.0);
    }

    #[test]
    fn decoded_embeddings_have_full_dimension_and_unit_norm(seed in any::<u64>(), x in direction(16)) {
        let codec = FeatureCodec::<f64>::init(16, 3, seed);
        let z = codec.encode(&unit(&x)).unwrap();
        prop_assert_eq!(z.len(), 3);
        let y = codec.decode(&z).unwrap();
        prop_assert_eq!(y.len(), 16);
        let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn identity_deformation_renders_the_canonical_scene(seed in any::<u64>(), t in 0.0f64..1.0) {
        let cloud = small_cloud(24, 2, seed);
        let mut model = SceneModel::new(cloud, 6, seed);
        model.field.tracker = SemanticTracker::zeros(2);
        let cam = Camera::identity(48, 40, 40.0);
        prop_assert_eq!(model.render(&cam, t).unwrap(), model.render_canonical(&cam).unwrap());
    }

    #[test]
    fn rendering_is_deterministic(seed in any::<u64>(), t in 0.0f64..1.0) {
        let model = SceneModel::new(small_cloud(30, 3, seed), 8, seed);
        let cam = Camera::identity(40, 40, 35.0);
        prop_assert_eq!(model.render(&cam, t).unwrap(), model.render(&cam, t).unwrap());
    }
}

#[test]
fn score_at_the_reference_dots() {
    // dot with the prompt 1, dot with every canonical phrase −1
    let img = [1.0, 0.0];
    let text = [1.0, 0.0];
    let c = [-1.0, 0.0];
    let canon: Vec<&[f64]> = vec![&c; 4];
    let expected = 1.0 / (1.0 + (-2.0f64).exp());
    assert!((relevancy_score(&img, &text, &canon) - expected).abs() < 1e-15);
}
