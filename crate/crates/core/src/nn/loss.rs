use crate::error::{Error, Result};
use crate::tensor::tape::bce_value;
use crate::tensor::{Tape, Tensor, Var};

/// Binary cross-entropy of predicted P(y = 1) against label `y`, with the
/// probability clamped to [1e-7, 1 - 1e-7].
pub fn bce_loss(prob: f32, y: u8) -> f32 {
    bce_value(prob, y as f32)
}

/// Records `max(|f1-f2|_2 - |f1-f3|_2 + margin, 0) + gamma * mean|f1-f2|` on the tape.
pub fn triplet_l1_on_tape(
    tape: &mut Tape,
    f1: Var,
    f2: Var,
    f3: Var,
    margin: f32,
    gamma: f32,
) -> Result<Var> {
    let d12 = tape.sub(f1, f2)?;
    let d13 = tape.sub(f1, f3)?;
    let n12 = tape.l2_norm(d12)?;
    let n13 = tape.l2_norm(d13)?;
    let gap = tape.sub(n12, n13)?;
    let shifted = tape.add_scalar(gap, margin)?;
    let hinge = tape.relu(shifted);
    let a = tape.abs(d12);
    let l1 = tape.mean(a)?;
    let l1 = tape.scale(l1, gamma)?;
    tape.add(hinge, l1)
}

/// Value of the triplet + l1 loss for three embeddings.
pub fn triplet_l1_loss(f1: &Tensor, f2: &Tensor, f3: &Tensor, margin: f32, gamma: f32) -> Result<f32> {
    if margin <= 0.0 || gamma < 0.0 {
        return Err(Error::config(format!(
            "triplet loss needs margin > 0 and gamma >= 0, got {margin}, {gamma}"
        )));
    }
    let mut tape = Tape::new();
    let a = tape.constant(f1.clone());
    let b = tape.constant(f2.clone());
    let c = tape.constant(f3.clone());
    let l = triplet_l1_on_tape(&mut tape, a, b, c, margin, gamma)?;
    Ok(tape.value(l).data()[0])
}
