use pagnerf::assignment::{apply_id_window, forbid_stuff_slot, hungarian, CostMatrix, IdWindow};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimum total cost over every injective row → column map.
fn brute_force(c: &CostMatrix) -> f64 {
    fn go(c: &CostMatrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == c.rows {
            *best = best.min(acc);
            return;
        }
        for col in 0..c.cols {
            if !used[col] {
                used[col] = true;
                go(c, row + 1, used, acc + c.get(row, col), best);
                used[col] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(c, 0, &mut vec![false; c.cols], 0.0, &mut best);
    best
}

fn random_matrix(rng: &mut ChaCha8Rng) -> CostMatrix {
    let rows = rng.random_range(1..=7);
    let cols = rng.random_range(rows..=9);
    let integer = rng.random_bool(0.3);
    let data = (0..rows * cols)
        .map(|_| if integer { rng.random_range(0..4) as f64 } else { rng.random::<f64>() * 2.0 - 1.0 })
        .collect();
    CostMatrix::new(rows, cols, data).unwrap()
}

#[test]
fn hungarian_matches_exhaustive_enumeration() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let c = random_matrix(&mut rng);
        let a = hungarian(&c).unwrap();
        assert_eq!(a.len(), c.rows);
        let mut cols = a.clone();
        cols.sort_unstable();
        cols.dedup();
        assert_eq!(cols.len(), c.rows, "assignment must be injective");
        assert!(a.iter().all(|&j| j < c.cols));
        let best = brute_force(&c);
        assert!((c.total(&a) - best).abs() < 1e-9, "{} vs optimum {best}", c.total(&a));
    }
    assert!(start.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn forbidden_slots_are_avoided_when_possible() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let window = IdWindow::new(9, 1.5, 0.5, 0.0).unwrap();
    for _ in 0..200 {
        let rows = rng.random_range(1..=2);
        let data = (0..rows * 9).map(|_| -rng.random::<f64>()).collect();
        let mut c = CostMatrix::new(rows, 9, data).unwrap();
        let pos: Vec<f64> = (0..rows).map(|_| rng.random::<f64>() * 1.5).collect();
        forbid_stuff_slot(&mut c);
        apply_id_window(&mut c, &pos, &window).unwrap();
        let a = hungarian(&c).unwrap();
        for (r, &j) in a.iter().enumerate() {
            assert_ne!(j, 0);
            assert!(window.allowed(pos[r]).contains(&j), "row {r} at {} got slot {j}", pos[r]);
        }
    }
}

#[test]
fn window_ranges_slide_along_the_trajectory() {
    let w = IdWindow::new(17, 1.5, 0.66, 0.0).unwrap();
    assert_eq!(w.width, 7);
    let mut prev = w.allowed(0.0).start;
    assert_eq!(prev, 1);
    for k in 1..=150 {
        let r = w.allowed(k as f64 * 0.01);
        assert!(r.start >= prev && r.end <= 17 && r.len() == 7);
        prev = r.start;
    }
    // two detections more than a frustum apart share no slot
    let (a, b) = (w.allowed(0.1), w.allowed(0.1 + 0.66 + 0.1));
    assert!(a.end <= b.start);
}
