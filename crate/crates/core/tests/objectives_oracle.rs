mod support;

use hcot_core::objectives::{self, EntropyOptions, LogitBatch};
use hcot_core::LabelHierarchy;
use ndarray::Array2;
use rand::Rng;
use support::oracle;

const OPTS: EntropyOptions = EntropyOptions { normalize: false };

type Check<'a> = (Array2<f64>, Box<dyn Fn(&Array2<f64>) -> f64 + 'a>);

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut rng = hcot_core::seed::rng(101);
    let mut worst = 0.0f64;
    for _ in 0..60 {
        let n = rng.random_range(1..=8);
        let k = rng.random_range(2..=12);
        let (z, labels) = oracle::random_batch(&mut rng, n, k, 3.0);
        let assignment = oracle::random_assignment(&mut rng, k);
        let h = LabelHierarchy::from_assignment(assignment.clone()).unwrap();
        let batch = LogitBatch::new(z.view(), &labels).unwrap();

        let checks: [Check; 3] = [
            (
                objectives::cross_entropy(&batch).unwrap().grad,
                Box::new(|p| oracle::cross_entropy(p, &labels)),
            ),
            (
                objectives::complement_entropy(&batch, OPTS).unwrap().grad,
                Box::new(|p| oracle::complement_entropy(p, &labels)),
            ),
            (
                objectives::hierarchical_complement_entropy(&batch, &h, OPTS)
                    .unwrap()
                    .grad,
                Box::new(|p| oracle::hierarchical_complement_entropy(p, &labels, &assignment)),
            ),
        ];
        for (analytic, f) in checks {
            let numeric = oracle::finite_difference(&z, 1e-5, f);
            worst = worst.max(oracle::max_relative_error(
                analytic.iter(),
                numeric.iter(),
                1e-3,
            ));
        }
    }
    assert!(worst < 1e-6, "max relative error {worst:e}");
}

#[test]
fn normalized_variant_gradient_matches_finite_differences() {
    let mut rng = hcot_core::seed::rng(5);
    let opts = EntropyOptions { normalize: true };
    for _ in 0..20 {
        let (z, labels) = oracle::random_batch(&mut rng, 4, 7, 2.0);
        let h = LabelHierarchy::from_assignment(oracle::random_assignment(&mut rng, 7)).unwrap();
        let batch = LogitBatch::new(z.view(), &labels).unwrap();
        let analytic = objectives::hierarchical_complement_entropy(&batch, &h, opts)
            .unwrap()
            .grad;
        let numeric = oracle::finite_difference(&z, 1e-5, |p| {
            let b = LogitBatch::new(p.view(), &labels).unwrap();
            objectives::hierarchical_complement_entropy(&b, &h, opts)
                .unwrap()
                .value
        });
        assert!(oracle::max_relative_error(analytic.iter(), numeric.iter(), 1e-3) < 1e-6);
    }
}

#[test]
fn production_values_match_loop_oracle() {
    let mut rng = hcot_core::seed::rng(202);
    for _ in 0..300 {
        let n = rng.random_range(1..=4);
        let k = rng.random_range(2..=6);
        let (z, labels) = oracle::random_batch(&mut rng, n, k, 5.0);
        let assignment = oracle::random_assignment(&mut rng, k);
        let h = LabelHierarchy::from_assignment(assignment.clone()).unwrap();
        let batch = LogitBatch::new(z.view(), &labels).unwrap();
        let xe = objectives::cross_entropy(&batch).unwrap().value;
        let ce = objectives::complement_entropy(&batch, OPTS).unwrap().value;
        let hce = objectives::hierarchical_complement_entropy(&batch, &h, OPTS)
            .unwrap()
            .value;
        assert!((xe - oracle::cross_entropy(&z, &labels)).abs() < 1e-10);
        assert!((ce - oracle::complement_entropy(&z, &labels)).abs() < 1e-10);
        assert!(
            (hce - oracle::hierarchical_complement_entropy(&z, &labels, &assignment)).abs() < 1e-10
        );
        let loss = objectives::hcot_loss(&batch, &h, OPTS).unwrap().value;
        assert!((loss - (xe - hce)).abs() < 1e-12);
    }
}

#[test]
fn flat_hierarchy_equals_complement_entropy_on_random_batches() {
    let mut rng = hcot_core::seed::rng(303);
    for _ in 0..100 {
        let k = rng.random_range(2..=12);
        let (z, labels) = oracle::random_batch(&mut rng, 6, k, 4.0);
        let batch = LogitBatch::new(z.view(), &labels).unwrap();
        let ce = objectives::complement_entropy(&batch, OPTS).unwrap();
        for h in [
            LabelHierarchy::flat(k).unwrap(),
            LabelHierarchy::identity(k).unwrap(),
        ] {
            let hce = objectives::hierarchical_complement_entropy(&batch, &h, OPTS).unwrap();
            assert!((hce.value - ce.value).abs() <= 1e-12);
            assert!(hce
                .grad
                .iter()
                .zip(ce.grad.iter())
                .all(|(a, b)| (a - b).abs() <= 1e-12));
        }
    }
}

#[test]
fn objectives_are_shift_invariant_and_bounded() {
    let mut rng = hcot_core::seed::rng(404);
    for _ in 0..100 {
        let k = rng.random_range(2..=12);
        let (z, labels) = oracle::random_batch(&mut rng, 5, k, 4.0);
        let h = LabelHierarchy::from_assignment(oracle::random_assignment(&mut rng, k)).unwrap();
        let shift = rng.random_range(-50.0..50.0);
        let shifted = &z + shift;
        let a = LogitBatch::new(z.view(), &labels).unwrap();
        let b = LogitBatch::new(shifted.view(), &labels).unwrap();
        let close = |x: f64, y: f64| (x - y).abs() < 1e-10;
        assert!(close(
            objectives::cross_entropy(&a).unwrap().value,
            objectives::cross_entropy(&b).unwrap().value
        ));
        assert!(close(
            objectives::complement_entropy(&a, OPTS).unwrap().value,
            objectives::complement_entropy(&b, OPTS).unwrap().value
        ));
        let terms = objectives::hierarchical_terms(&a, &h, OPTS).unwrap();
        let shifted_terms = objectives::hierarchical_terms(&b, &h, OPTS).unwrap();
        assert!(close(terms.total.value, shifted_terms.total.value));
        for (i, &g) in labels.iter().enumerate() {
            let s = h.slices_for(g).unwrap();
            let bound = |m: usize| if m == 0 { 0.0 } else { (m as f64).ln() };
            assert!(terms.inner[i] >= 0.0 && terms.inner[i] <= bound(s.inner.len()) + 1e-12);
            assert!(terms.outer[i] >= 0.0 && terms.outer[i] <= bound(s.outer.len()) + 1e-12);
            // no gradient on the ground truth
            assert_eq!(terms.total.grad[[i, g]], 0.0);
        }
    }
}
