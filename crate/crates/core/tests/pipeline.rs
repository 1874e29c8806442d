use manifold_match::dataset::{self, SequenceManifest};
use manifold_match::eval::{load_labeled_sets, run_protocol};
use manifold_match::gmm::{self, select_mdl, Covariance, CovarianceKind, GaussianComponent, GaussianMixture};
use manifold_match::subspace::{msm_similarity, pca_subspace, SubspaceDim};
use manifold_match::synth::{planted_lighting_corpus, write_corpus};
use manifold_match::Rng;
use nalgebra::{DMatrix, DVector};

#[test]
fn msm_recognises_a_planted_corpus_read_back_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let sets = planted_lighting_corpus(&mut Rng::new(21), 4, &[1.0, 1.6, 0.6], 12, 10);
    write_corpus(dir.path(), &sets).unwrap();
    let manifest = SequenceManifest::load(dir.path().join("manifest.json")).unwrap();
    let loaded = load_labeled_sets(&manifest).unwrap();
    assert_eq!(loaded.len(), sets.len());
    let report = run_protocol("msm", &loaded, |a, b| {
        let ua = pca_subspace(&a.frames, SubspaceDim::Fixed(4), false)?;
        let ub = pca_subspace(&b.frames, SubspaceDim::Fixed(4), false)?;
        msm_similarity(&ua, &ub, 3)
    })
    .unwrap();
    // 3 × 3 ordered pairs; with one sequence per person and lighting the
    // same-lighting pairs have nobody left to match
    assert_eq!(report.pairs.len(), 9);
    for p in &report.pairs {
        assert_eq!(p.recognition_rate.is_none(), p.train_illumination == p.test_illumination);
    }
    // a global lighting gain leaves an uncentred subspace unchanged
    assert!(report.mean >= 0.9, "mean rate {}", report.mean);
}

#[test]
fn description_length_recovers_a_sampled_mixture_and_survives_json() {
    let comp = |prior: f64, mean: [f64; 2], var: f64| GaussianComponent {
        prior,
        mean: DVector::from_column_slice(&mean),
        cov: Covariance::Full(DMatrix::identity(2, 2) * var),
    };
    let truth = GaussianMixture { dim: 2, components: vec![comp(0.5, [0.0, 0.0], 0.3), comp(0.5, [6.0, 2.0], 0.5)], evidence: None };
    let data = gmm::sample(&truth, 400, &mut Rng::new(3));
    let (fit, dls) = select_mdl(&data, 5, CovarianceKind::Full, &mut Rng::new(4)).unwrap();
    assert_eq!(fit.n_components(), 2, "{dls:?}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    dataset::save_json(&path, &fit).unwrap();
    let back: GaussianMixture = dataset::load_json(&path).unwrap();
    assert_eq!(back, fit);
    assert_eq!(gmm::log_likelihood(&back, &data), gmm::log_likelihood(&fit, &data));
}
