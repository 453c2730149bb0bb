//! Assigns detections to instance slots: plain Hungarian versus the
//! trajectory-dependent ID window.

use pagnerf::assignment::{apply_id_window, forbid_stuff_slot, hungarian, CostMatrix, IdWindow};

fn main() -> pagnerf::Result<()> {
    // two detections, both currently rendered mostly as slot 1
    let slots = 9;
    let mut probs = vec![0.02; 2 * slots];
    probs[1] = 0.8;
    probs[slots + 1] = 0.7;
    let cost = CostMatrix::new(2, slots, probs.iter().map(|p| -p).collect())?;

    let mut plain = cost.clone();
    forbid_stuff_slot(&mut plain);
    println!("plain assignment: {:?}", hungarian(&plain)?);

    let window = IdWindow::new(slots, 1.2, 0.4, 0.0)?;
    let positions = [0.05, 1.1];
    for &u in &positions {
        println!("u = {u:.2} m may use slots {:?}", window.allowed(u));
    }
    let mut windowed = cost;
    forbid_stuff_slot(&mut windowed);
    apply_id_window(&mut windowed, &positions, &window)?;
    println!("windowed assignment: {:?}", hungarian(&windowed)?);
    Ok(())
}
