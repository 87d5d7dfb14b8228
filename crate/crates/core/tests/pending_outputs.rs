//! Pending-output counting against a brute-force model over randomized
//! interleavings of log appends and batch collections.

mod common;

use common::pending::{run, step, Step};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn pending_count_matches_enumeration(
        steps in prop::collection::vec(step(), 0..80),
        received in 0.0f64..=1.0,
        bbsn in 0.0f64..=1.0,
    ) {
        let (counted, brute) = run(&steps, received, bbsn);
        prop_assert_eq!(counted, brute);
    }
}

#[test]
fn sends_before_first_collection_belong_to_batch_one() {
    let steps = [
        Step::Append { thread: 0, send: true },
        Step::Append { thread: 1, send: true },
        Step::Collect,
        Step::Append { thread: 0, send: true },
        Step::Collect,
    ];
    assert_eq!(run(&steps, 1.0, 0.5), (2, 2));
    assert_eq!(run(&steps, 1.0, 1.0), (3, 3));
    assert_eq!(run(&steps, 0.5, 1.0), (2, 2));
    assert_eq!(run(&steps, 0.0, 1.0), (0, 0));
}
