//! Property tests for invariants that hold over whole input families, not
//! just hand-picked cases.

use proptest::prelude::*;

use bfmm::data::{ingest, ingest_path, ColumnTransform, IngestSpec};
use bfmm::evaluation::adjusted_rand_index;
use bfmm::postprocess::Permutation;
use bfmm::stochastic::{
    draw_dirichlet, draw_truncated_normal, RngStream, TruncationSide,
};

proptest! {
    #[test]
    fn transform_round_trips(
        raw in -1e6f64..1e6,
        mean in -1e3f64..1e3,
        sd in 1e-3f64..1e3,
    ) {
        let t = ColumnTransform { original_mean: mean, original_sd: sd, log_transformed: false };
        let back = t.invert(t.apply(raw));
        prop_assert!((back - raw).abs() <= 1e-6 * (1.0 + raw.abs()));
    }

    #[test]
    fn log_transform_round_trips(
        raw in 1e-3f64..1e6,
        mean in -5f64..5.0,
        sd in 1e-2f64..10.0,
    ) {
        let t = ColumnTransform { original_mean: mean, original_sd: sd, log_transformed: true };
        let back = t.invert(t.apply(raw));
        prop_assert!((back - raw).abs() <= 1e-6 * (1.0 + raw.abs()));
    }

    #[test]
    fn dirichlet_draws_live_on_simplex(
        alpha in prop::collection::vec(1e-2f64..50.0, 1..8),
        seed in 0u64..1000,
    ) {
        let mut rng = RngStream::new(seed);
        let draw = draw_dirichlet(&alpha, &mut rng).unwrap();
        prop_assert_eq!(draw.len(), alpha.len());
        prop_assert!(draw.iter().all(|&v| v >= 0.0));
        prop_assert!((draw.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn truncated_normal_respects_bound(
        mu in -20f64..20.0,
        sigma in 1e-2f64..10.0,
        bound in -20f64..20.0,
        above in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let mut rng = RngStream::new(seed);
        let side = if above { TruncationSide::AboveBound } else { TruncationSide::BelowBound };
        match draw_truncated_normal(mu, sigma, bound, side, &mut rng) {
            Ok(v) => match side {
                TruncationSide::AboveBound => prop_assert!(v >= bound),
                TruncationSide::BelowBound => prop_assert!(v <= bound),
            },
            // Refusal is allowed only when the truncation point sits far out
            // in the tail and the region's mass underflows.
            Err(_) => {
                let a = match side {
                    TruncationSide::AboveBound => (bound - mu) / sigma,
                    TruncationSide::BelowBound => (mu - bound) / sigma,
                };
                prop_assert!(a > 8.0, "sampler refused a reachable region: a={a}");
            }
        }
    }

    #[test]
    fn ari_is_symmetric_and_bounded(
        labels in prop::collection::vec(0usize..4, 2..60),
        other in prop::collection::vec(0usize..4, 2..60),
    ) {
        let n = labels.len().min(other.len());
        let a = &labels[..n];
        let b = &other[..n];
        let ab = adjusted_rand_index(a, b).unwrap();
        let ba = adjusted_rand_index(b, a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
        let aa = adjusted_rand_index(a, a).unwrap();
        prop_assert!((aa - 1.0).abs() < 1e-12);
    }

    #[test]
    fn permutation_inverse_composes_to_identity(
        order in prop::collection::vec(any::<u32>(), 1..10),
    ) {
        // Derive a permutation by argsorting random keys.
        let mut idx: Vec<usize> = (0..order.len()).collect();
        idx.sort_by_key(|&i| order[i]);
        let perm = Permutation(idx);
        let inv = perm.inverse();
        let composed: Vec<usize> = (0..perm.0.len()).map(|j| inv.0[perm.0[j]]).collect();
        prop_assert_eq!(composed, (0..perm.0.len()).collect::<Vec<_>>());
    }
}

/// File-backed ingest matches reader-backed ingest byte for byte.
#[test]
fn path_ingest_matches_reader_ingest() {
    let csv = "x,y,c\n1.0,<0.5,a\n2.5,3.0,b\n-1.0,>4.0,a\n";
    let spec = IngestSpec::parse("continuous=x,y\ncategorical=c\n").unwrap();
    let from_reader = ingest(csv.as_bytes(), &spec).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    std::fs::write(&path, csv).unwrap();
    let from_path = ingest_path(&path, &spec).unwrap();

    assert_eq!(from_reader.n(), from_path.n());
    assert_eq!(from_reader.continuous(), from_path.continuous());
    assert_eq!(from_reader.censored_cells(), from_path.censored_cells());
    for j in 0..from_reader.n_categorical() {
        for i in 0..from_reader.n() {
            assert_eq!(
                from_reader.categorical_code(i, j),
                from_path.categorical_code(i, j)
            );
        }
    }
}
