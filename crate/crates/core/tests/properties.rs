use cluster_degen::cluster::{ClusterCalibration, KeyframeMotion};
use cluster_degen::degeneracy::{build_m2, classify, rank_m2, Classification, Thresholds};
use cluster_degen::jacobian::{assemble_jacobian, fd_jacobian, max_relative_difference};
use cluster_degen::measurement::{synthesize_scenario, SynthConfig};
use nalgebra::Vector3;
use proptest::prelude::*;

fn motion() -> impl Strategy<Value = KeyframeMotion> {
    (prop::array::uniform3(-0.5..0.5f64), prop::array::uniform3(-0.3..0.3f64))
        .prop_map(|(t, w)| KeyframeMotion::new(Vector3::from(t), Vector3::from(w)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn jacobian_rank_tracks_reduced_matrix_rank(
        cams in 1usize..=4, feats in 3usize..=10, m in motion(), seed in any::<u64>()
    ) {
        let cfg = SynthConfig::new(ClusterCalibration::ring(cams, 0.3), feats, m);
        let Ok(s) = synthesize_scenario(&cfg, seed) else { return Ok(()) };
        let j_full = assemble_jacobian(&s).unwrap().spectrum.rank(1e-9) == s.state_dim();
        let m_full = rank_m2(&build_m2(&s).unwrap(), 1e-9).0 == 6;
        prop_assert_eq!(j_full, m_full);
        let report = classify(&s, &Thresholds::default()).unwrap();
        prop_assert_eq!(report.classification == Classification::Degenerate, !m_full);
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences(
        cams in 2usize..=3, feats in 6usize..=9, m in motion(), seed in any::<u64>()
    ) {
        let cfg = SynthConfig::new(ClusterCalibration::ring(cams, 0.3), feats, m);
        let Ok(s) = synthesize_scenario(&cfg, seed) else { return Ok(()) };
        let a = assemble_jacobian(&s).unwrap().matrix;
        prop_assert!(max_relative_difference(&a, &fd_jacobian(&s, 1e-6).unwrap()) < 1e-5);
    }

    #[test]
    fn single_camera_clusters_are_always_degenerate(feats in 6usize..=12, m in motion(), seed in any::<u64>()) {
        let cfg = SynthConfig::new(ClusterCalibration::ring(1, 0.3), feats, m);
        let Ok(s) = synthesize_scenario(&cfg, seed) else { return Ok(()) };
        prop_assert!(rank_m2(&build_m2(&s).unwrap(), 1e-9).0 <= 5);
    }
}
