mod common;

#[test]
fn every_block_matches_finite_differences() {
    let mut worst = Vec::new();
    for seed in [1, 2, 3] {
        for (block, err) in common::gradient_suite(seed) {
            eprintln!("seed {seed}: {block} {err:.3e}");
            if err >= 1e-4 {
                worst.push(format!("seed {seed}: {block} relative error {err:.3e}"));
            }
        }
    }
    assert!(worst.is_empty(), "{worst:#?}");
}
