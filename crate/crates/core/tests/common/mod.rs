#![allow(dead_code)]

use gdmsr::dataset::{Dataset, Provenance, SocialGraph};

/// Five users, seven items, a small friendship graph with one hub.
pub fn small() -> (Dataset, SocialGraph) {
    let train = vec![
        (0, 0),
        (0, 1),
        (0, 2),
        (1, 1),
        (1, 2),
        (2, 3),
        (2, 4),
        (2, 5),
        (2, 6),
        (3, 0),
        (4, 6),
        (4, 5),
    ];
    let d = Dataset::from_splits(5, 7, train, vec![(1, 0)], vec![(3, 1)], vec![], vec![]).unwrap();
    let g = SocialGraph::from_undirected(
        5,
        &[(0, 1), (0, 2), (0, 3), (1, 2), (2, 4)],
        Provenance::Observed,
    )
    .unwrap();
    (d, g)
}
