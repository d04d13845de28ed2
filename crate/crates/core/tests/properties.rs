use childpredictor::arch::ArchConfig;
use childpredictor::data::{Domain, FaceImage};
use childpredictor::eval::{cosine, diversity_protocol, fid_features, mean_abs_distance};
use childpredictor::factors::{normalize_genetic, GeneticFactor};
use childpredictor::mapper::{assign_ground_truth, map_genes, MappingFunction};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mapper() -> &'static MappingFunction {
    static T: std::sync::OnceLock<MappingFunction> = std::sync::OnceLock::new();
    T.get_or_init(|| MappingFunction::new(&ArchConfig::toy(), false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap())
}

fn moments(v: &[f32]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().map(|x| f64::from(*x)).sum::<f64>() / n;
    let var = v.iter().map(|x| (f64::from(*x) - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn image(seed: u64) -> FaceImage {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FaceImage::new(16, (0..16 * 16 * 3).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mapped_genes_are_standardized(
        f in prop::collection::vec(-10.0f32..10.0, 32),
        m in prop::collection::vec(-10.0f32..10.0, 32),
    ) {
        let out = map_genes(mapper(), &GeneticFactor::new(f, Domain::Parent).unwrap(), &GeneticFactor::new(m, Domain::Parent).unwrap()).unwrap();
        prop_assert_eq!(out.len(), 4);
        for g in out {
            let (mean, sd) = moments(&g.values);
            prop_assert!(mean.abs() < 1e-5 && (sd - 1.0).abs() < 1e-5, "mean {} sd {}", mean, sd);
            prop_assert_eq!(g.domain, Domain::Child);
        }
    }

    #[test]
    fn normalization_is_shift_and_scale_invariant(
        v in prop::collection::vec(-5.0f32..5.0, 4..48),
        shift in -3.0f32..3.0,
        scale in 0.5f32..4.0,
    ) {
        prop_assume!(moments(&v).1 > 0.1);
        let a = normalize_genetic(&GeneticFactor::new(v.clone(), Domain::Parent).unwrap()).unwrap();
        let moved: Vec<f32> = v.iter().map(|x| x * scale + shift).collect();
        let b = normalize_genetic(&GeneticFactor::new(moved, Domain::Parent).unwrap()).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn cosine_is_scale_invariant_and_bounded(
        a in prop::collection::vec(-3.0f64..3.0, 8),
        b in prop::collection::vec(-3.0f64..3.0, 8),
        s in 0.01f64..100.0,
    ) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let c = cosine(&a, &b).unwrap();
        let scaled: Vec<f64> = a.iter().map(|x| x * s).collect();
        prop_assert!((c - cosine(&scaled, &b).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
    }

    #[test]
    fn fid_is_symmetric_and_non_negative(seed in 0u64..1000, shift in -2.0f64..2.0) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<Vec<f64>> = (0..30).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let b: Vec<Vec<f64>> = (0..25).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0) * 1.5 + shift).collect()).collect();
        let ab = fid_features(&a, &b, None).unwrap();
        let ba = fid_features(&b, &a, None).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0));
    }

    #[test]
    fn diversity_ignores_image_order(seeds in prop::collection::vec(0u64..10_000, 2..7), rot in 0usize..6) {
        let imgs: Vec<FaceImage> = seeds.iter().map(|s| image(*s)).collect();
        let mut rotated = imgs.clone();
        rotated.rotate_left(rot % imgs.len());
        let a = diversity_protocol(&[imgs.clone()], &mean_abs_distance).unwrap();
        let b = diversity_protocol(&[rotated], &mean_abs_distance).unwrap();
        prop_assert!((a.mean - b.mean).abs() < 1e-12);
        prop_assert_eq!(a.pairs_per_family[0], imgs.len() * (imgs.len() - 1) / 2);
    }

    #[test]
    fn padding_keeps_prefix_and_repeats_first(children in prop::collection::vec(0u32..100, 1..9)) {
        let t = assign_ground_truth(&children).unwrap().targets;
        for (j, v) in t.iter().enumerate() {
            prop_assert_eq!(*v, *children.get(j).unwrap_or(&children[0]));
        }
    }
}
