use csr_core::gradcheck::{concept_head_instance, contrastive_instance, task_head_instance, TOLERANCE};
use csr_core::CamPooling;

const INSTANCES: u64 = 100;

fn worst(errors: impl Iterator<Item = (u64, f64)>) -> (u64, f64) {
    errors.fold((0, 0.0), |acc, (s, e)| if e > acc.1 { (s, e) } else { acc })
}

#[test]
fn concept_head_max_pooling_matches_finite_differences() {
    let (seed, err) = worst((0..INSTANCES).map(|s| (s, concept_head_instance(s, CamPooling::Max).unwrap())));
    assert!(err < TOLERANCE, "seed {seed}: relative error {err:e}");
}

#[test]
fn concept_head_lse_pooling_matches_finite_differences() {
    let pooling = CamPooling::LogSumExp { sharpness: 10.0 };
    let (seed, err) = worst((0..INSTANCES).map(|s| (s, concept_head_instance(s, pooling).unwrap())));
    assert!(err < TOLERANCE, "seed {seed}: relative error {err:e}");
}

#[test]
fn contrastive_gradients_match_finite_differences() {
    for seed in 0..INSTANCES {
        let e = contrastive_instance(seed).unwrap();
        assert!(e.prototypes < TOLERANCE, "seed {seed}: prototypes {:e}", e.prototypes);
        assert!(e.projector < TOLERANCE, "seed {seed}: projector {:e}", e.projector);
    }
}

#[test]
fn task_head_matches_finite_differences() {
    let (seed, err) = worst((0..INSTANCES).map(|s| (s, task_head_instance(s).unwrap())));
    assert!(err < TOLERANCE, "seed {seed}: relative error {err:e}");
}
