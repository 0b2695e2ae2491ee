mod common;

use common::fd;

#[test]
fn every_tensor_passes_finite_differences() {
    let mut failures = Vec::new();
    for (suite, reports) in fd::all() {
        assert!(!reports.is_empty());
        for r in reports {
            assert!(r.checked > 0);
            if r.max_rel_err > 1e-4 {
                failures.push(format!("{suite}: {} rel err {:.3e}", r.tensor, r.max_rel_err));
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn suites_cover_whole_inventories() {
    let suites = fd::all();
    let names = |i: usize| suites[i].1.iter().map(|r| r.tensor.clone()).collect::<Vec<_>>();
    // 2 embeddings + 2 × 16 block tensors + final norm + bias (+ projection)
    assert_eq!(names(0).len(), 2 + 32 + 3);
    assert_eq!(names(1).len(), 2 + 32 + 4);
    assert!(names(3).iter().any(|n| n == "head.dense_w"));
    assert!(!names(5).iter().any(|n| n == "head.dense_w"));
    assert_eq!(names(6).len(), 32 + 4);
}

