//! Randomized checks of the mathematical contracts, one proptest per invariant.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use simcond::dataset::{assemble_with, select_by_embedding, AssemblyPlan, MixSchedule, NullSink, SubjectGenerator};
use simcond::diffusion::{
    estimate_x0, forward_diffuse, m_grid, make_noise_schedule, simmat_from_similarity, MSampler, SimilarityPenalty,
};
use simcond::embedder::{cosine_similarity, IdentityEmbedding};
use simcond::eval::{fold_of, tenfold_accuracy_scores};
use simcond::fr::{augment, AugmentConfig, FrTrainConfig};
use simcond::image::ImageArray;
use simcond::manifest::DatasetManifest;
use simcond::pipeline::PipelineConfig;
use simcond::sampler::timestep_subsequence;
use simcond::similarity::{bucket_by_similarity, ScoredImage};

fn image(c: usize, h: usize, w: usize) -> impl Strategy<Value = ImageArray> {
    prop::collection::vec(-1.0f32..=1.0, c * h * w).prop_map(move |d| ImageArray::new(c, h, w, d).unwrap())
}

fn embedding(d: usize) -> impl Strategy<Value = IdentityEmbedding> {
    prop::collection::vec(-1.0f64..1.0, d)
        .prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
        .prop_map(|v| IdentityEmbedding::normalized(&v).unwrap())
}

struct Blank;

impl SubjectGenerator for Blank {
    fn generate(&self, _: &ImageArray, m_values: &[f64], _: &[u64]) -> simcond::Result<Vec<ImageArray>> {
        Ok(m_values.iter().map(|_| ImageArray::zeros(1, 1, 1)).collect())
    }

    fn describe(&self) -> String {
        "blank".into()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_is_monotone_and_consistent(t in 2usize..1000, lo in 1e-5f64..1e-2, span in 1e-4f64..0.05) {
        let s = make_noise_schedule(t, lo, lo + span).unwrap();
        let mut running = 1.0;
        for k in 1..=t {
            prop_assert!(s.beta(k) > 0.0 && s.beta(k) < 1.0);
            running *= s.alpha(k);
            let ab = s.alpha_bar(k);
            prop_assert!(ab > 0.0 && ab < 1.0);
            prop_assert!(((ab - running) / running).abs() <= 1e-12);
            if k > 1 {
                prop_assert!(ab < s.alpha_bar(k - 1));
            }
        }
    }

    #[test]
    fn x0_estimate_inverts_forward_diffusion(x0 in image(3, 4, 4), eps in image(3, 4, 4), t in 1usize..=200) {
        let s = make_noise_schedule(200, 1e-4, 0.02).unwrap();
        let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
        let back = estimate_x0(&xt, &eps, t, &s).unwrap();
        let err = back.data().iter().zip(x0.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        prop_assert!(err <= 1e-5, "max error {err} at t = {t}");
    }

    #[test]
    fn simmat_endpoints_isolate_one_target(s in -1.0f64..1.0, m1 in -1.0f64..=1.0, m2 in -1.0f64..=1.0) {
        for p in [SimilarityPenalty::Squared, SimilarityPenalty::Absolute] {
            let a = simmat_from_similarity(s, m1, 0, 200, p).unwrap();
            let b = simmat_from_similarity(s, m2, 0, 200, p).unwrap();
            prop_assert_eq!(a, b);
        }
        let end = simmat_from_similarity(s, m1, 200, 200, SimilarityPenalty::Squared).unwrap();
        prop_assert!((end - (m1 - s).powi(2)).abs() <= 1e-12);
        let start = simmat_from_similarity(s, m1, 0, 200, SimilarityPenalty::Squared).unwrap();
        prop_assert!((start - (1.0 - s).powi(2)).abs() <= 1e-12);
    }

    #[test]
    fn embeddings_are_unit_and_cosine_symmetric(a in embedding(16), b in embedding(16)) {
        prop_assert!((a.norm() - 1.0).abs() <= 1e-6);
        prop_assert_eq!(cosine_similarity(&a, &b).unwrap(), cosine_similarity(&b, &a).unwrap());
        prop_assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn tenfold_is_scale_invariant(
        pairs in prop::collection::vec((-1.0f64..1.0, any::<bool>()), 10..300),
        c in 0.01f64..100.0,
    ) {
        let (scores, labels): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
        let scaled: Vec<f64> = scores.iter().map(|s| s * c).collect();
        let a = tenfold_accuracy_scores(&scores, &labels).unwrap();
        let b = tenfold_accuracy_scores(&scaled, &labels).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn folds_are_contiguous_and_balanced(n in 10usize..2000) {
        let folds: Vec<usize> = (0..n).map(|i| fold_of(i, n)).collect();
        prop_assert!(folds.windows(2).all(|w| w[0] <= w[1]));
        let mut sizes = [0usize; 10];
        for f in folds {
            sizes[f] += 1;
        }
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
    }

    #[test]
    fn buckets_partition_with_decreasing_means(
        scores in prop::collection::vec(-1.0f64..1.0, 1..200),
        groups in 1usize..8,
    ) {
        prop_assume!(groups <= scores.len());
        let scored: Vec<ScoredImage> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| ScoredImage { subject_id: format!("s{}", i % 7), path: format!("p{i}"), similarity_to_center: s })
            .collect();
        let out = bucket_by_similarity(&scored, groups).unwrap();
        let mut seen: Vec<&str> = out.iter().flat_map(|g| g.members.iter().map(|m| m.path.as_str())).collect();
        seen.sort_unstable();
        let mut all: Vec<&str> = scored.iter().map(|s| s.path.as_str()).collect();
        all.sort_unstable();
        prop_assert_eq!(seen, all);
        let sizes: Vec<usize> = out.iter().map(|g| g.members.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert!(out.windows(2).all(|w| w[0].mean_similarity >= w[1].mean_similarity));
        let distinct = scores.iter().any(|&s| s != scores[0]);
        if distinct && groups > 1 {
            prop_assert!(out.first().unwrap().mean_similarity > out.last().unwrap().mean_similarity);
        }
    }

    #[test]
    fn filter_is_sound_and_order_preserving(
        pool in prop::collection::vec(embedding(4), 1..80),
        threshold in -0.5f64..1.0,
    ) {
        let keep = select_by_embedding(&pool, threshold).unwrap();
        prop_assert_eq!(keep.first(), Some(&0));
        prop_assert!(keep.windows(2).all(|w| w[0] < w[1]));
        for (x, &i) in keep.iter().enumerate() {
            for &j in &keep[..x] {
                prop_assert!(cosine_similarity(&pool[i], &pool[j]).unwrap() <= threshold);
            }
        }
    }

    #[test]
    fn assembly_counts_fair_and_reproducible(
        subjects in 1usize..20,
        per_subject in 1usize..30,
        oversample in 0usize..6,
        mix in prop::collection::btree_set(-50i32..=50, 1..6),
        seed in any::<u64>(),
    ) {
        let schedule = MixSchedule::new(mix.iter().map(|&v| v as f64 / 50.0).collect()).unwrap();
        let inquiries = vec![ImageArray::zeros(1, 1, 1); subjects];
        let plan = AssemblyPlan { schedule: schedule.clone(), per_subject, oversample, seed, subject_offset: 0 };
        let a = assemble_with(&inquiries, &Blank, &mut NullSink, &plan).unwrap();
        let b = assemble_with(&inquiries, &Blank, &mut NullSink, &plan).unwrap();
        prop_assert_eq!(a.len(), subjects * (per_subject + oversample));
        prop_assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
        let k = schedule.len();
        for subject in a.subjects() {
            let mut counts: BTreeMap<u64, usize> = schedule.values().iter().map(|m| (m.to_bits(), 0)).collect();
            for r in a.records_of(&subject) {
                if let Some(m) = r.m.filter(|_| r.seed.is_some()) {
                    *counts.get_mut(&m.to_bits()).unwrap() += 1;
                }
            }
            for &c in counts.values() {
                prop_assert!(c == per_subject / k || c == per_subject.div_ceil(k));
            }
        }
        let parsed = DatasetManifest::from_jsonl(&a.to_jsonl().unwrap()).unwrap();
        prop_assert_eq!(parsed, a);
    }

    #[test]
    fn augmentation_keeps_shape_and_range(img in image(3, 12, 12), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = augment(&img, &AugmentConfig::default(), &mut rng);
        prop_assert_eq!(out.dims(), img.dims());
        prop_assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn learning_rate_is_a_step_function(epochs in 3usize..80, a in 1usize..40, gap in 1usize..40) {
        prop_assume!(a + gap < epochs);
        let c = FrTrainConfig { epochs, decay_epochs: vec![a, a + gap], ..FrTrainConfig::default() };
        c.validate().unwrap();
        for e in 1..=epochs {
            let expected = match e {
                e if e >= a + gap => c.learning_rate * 0.01,
                e if e >= a => c.learning_rate * 0.1,
                _ => c.learning_rate,
            };
            prop_assert!((c.learning_rate_at(e) - expected).abs() <= 1e-15);
            prop_assert_eq!(c.learning_rate_at(e), c.learning_rate_at(e));
        }
    }

    #[test]
    fn ddim_steps_strictly_decrease_from_horizon(t in 1usize..1000, steps in 1usize..100) {
        prop_assume!(steps <= t);
        let seq = timestep_subsequence(t, steps).unwrap();
        prop_assert_eq!(seq.len(), steps);
        prop_assert_eq!(seq[0], t);
        prop_assert!(seq.windows(2).all(|w| w[0] > w[1]));
        prop_assert!(*seq.last().unwrap() >= 1);
        prop_assert!(timestep_subsequence(t, t + 1).is_err());
    }

    #[test]
    fn config_digest_tracks_each_key(value in 1usize..10_000) {
        let base = PipelineConfig::default();
        let mut changed = base.clone();
        changed.set("fr.epochs", &value.to_string()).unwrap();
        prop_assert_eq!(base.digest() == changed.digest(), value == 40);
        prop_assert!(changed.clone().set("fr.epoch", "3").is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn m_grid_is_covered(seed in any::<u64>(), interval in prop::sample::select(vec![0.02, 0.04, 0.06, 0.1, 0.5])) {
        let grid = m_grid(-1.0, 1.0, interval).unwrap();
        let sampler = MSampler::new(grid.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hit = vec![false; grid.len()];
        for _ in 0..100 * grid.len() {
            hit[sampler.index(&mut rng)] = true;
        }
        prop_assert!(hit.iter().all(|&h| h));
    }
}
