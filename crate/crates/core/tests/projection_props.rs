mod common;

use common::{
    argmax_scale_invariant_count, self_projection_error, single_row_projection_is_exact,
    weight_sum_deviation,
};
use proptest::prelude::*;
use synthcap::embedding::EmbeddingMatrix;
use synthcap::projection::{project, projection_weights, ProjectionConfig, SupportSet};

#[test]
fn weights_sum_to_one() {
    let dev = weight_sum_deviation(200, 1);
    assert!(dev <= 1e-6, "{dev}");
}

#[test]
fn one_row_support_is_returned_exactly() {
    assert!(single_row_projection_is_exact(50, 2));
}

#[test]
fn cold_projection_of_a_support_row_returns_it() {
    let err = self_projection_error(20, 8, 3);
    assert!(err <= 1e-3, "{err}");
}

#[test]
fn argmax_survives_query_rescaling() {
    assert_eq!(argmax_scale_invariant_count(100, 4), 100);
}

fn support_and_query() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, f64)> {
    (1usize..12, 2usize..6).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n),
            prop::collection::vec(-1.0f64..1.0, d),
            -3.0f64..1.0,
        )
    })
}

fn build(rows: &[Vec<f64>], log_tau: f64, top_k: Option<usize>) -> Option<SupportSet> {
    let d = rows[0].len();
    let m = EmbeddingMatrix::from_f64_rows(rows, d).ok()?;
    SupportSet::new(
        &m,
        ProjectionConfig {
            temperature: 10f64.powf(log_tau),
            top_k,
        },
    )
    .ok()
}

proptest! {
    #[test]
    fn output_is_the_weighted_sum_of_rows((rows, q, log_tau) in support_and_query()) {
        let Some(s) = build(&rows, log_tau, None) else { return Ok(()) };
        prop_assume!(q.iter().any(|&x| x != 0.0));
        let w = projection_weights(&q, &s).unwrap();
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let out = project(&q, &s).unwrap();
        for k in 0..out.len() {
            let expect: f64 = (0..s.len()).map(|j| w[j] * s.features().row(j)[k]).sum();
            prop_assert!((out[k] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn top_k_of_all_rows_is_full_mode((rows, q, log_tau) in support_and_query()) {
        let Some(full) = build(&rows, log_tau, None) else { return Ok(()) };
        let all = full.clone().with_top_k(Some(rows.len()));
        prop_assume!(q.iter().any(|&x| x != 0.0));
        prop_assert_eq!(project(&q, &full).unwrap(), project(&q, &all).unwrap());
    }

    #[test]
    fn positive_rescaling_keeps_the_weights(
        (rows, q, log_tau) in support_and_query(),
        log_c in -3.0f64..3.0,
    ) {
        let Some(s) = build(&rows, log_tau, None) else { return Ok(()) };
        prop_assume!(q.iter().any(|&x| x != 0.0));
        let c = 10f64.powf(log_c);
        let scaled: Vec<f64> = q.iter().map(|x| x * c).collect();
        let a = projection_weights(&q, &s).unwrap();
        let b = projection_weights(&scaled, &s).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }
}
