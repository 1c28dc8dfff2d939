//! Neural finite-state machine: dynamic transition tables from the
//! interaction of per-position dynamic state embeddings with the learnable
//! global state embeddings, and the propagation of current-frame phase
//! probabilities through those tables.
//!
//! Conventions: table entry `(a, b)` is the probability of moving from
//! current-frame phase hypothesis `a` to phase `b` at the target frame, so
//! propagation is the row-vector product `p_tilde = p_hat · T`. Softmax
//! normalizes each table row.

use crate::tensor::Tensor;

/// Dynamic transition table for one position: `softmax(e_dt_i · e_gᵀ / √d)`,
/// row-stochastic `[s, s]`.
pub fn transition_table(e_dt_i: &Tensor, e_g: &Tensor, d: usize) -> Tensor {
    let sa = e_dt_i.shape();
    let sb = e_g.shape();
    assert_eq!(
        sa, sb,
        "transition_table expects matching [s, d] shapes, got {sa:?} vs {sb:?}"
    );
    assert_eq!(sa[1], d, "embedding width {} does not match d {}", sa[1], d);
    e_dt_i
        .matmul(&e_g.transpose())
        .scale(1.0 / (d as f64).sqrt())
        .softmax_last()
}

/// Push the current-frame distribution through a transition table:
/// `p_tilde = p_hat · T`. A distribution times a row-stochastic matrix is
/// again a distribution.
pub fn transition_probs(table: &Tensor, p_hat: &Tensor) -> Tensor {
    let st = table.shape();
    let s = p_hat.len();
    assert_eq!(
        st,
        vec![s, s],
        "table shape {st:?} does not match distribution of length {s}"
    );
    p_hat.reshape(&[1, s]).matmul(table).reshape(&[s])
}

/// Apply [`transition_table`] and [`transition_probs`] at every position of
/// `e_dt` (`[n + m, s, d]`), returning the stacked `[n + m, s]` probability
/// rows.
pub fn transition_prob_set(e_dt: &Tensor, e_g: &Tensor, p_hat: &Tensor) -> Tensor {
    let shape = e_dt.shape();
    assert_eq!(shape.len(), 3, "e_dt must be [positions, s, d], got {shape:?}");
    let positions = shape[0];
    let d = shape[2];
    let tape = e_dt.tape();
    let rows: Vec<Tensor> = (0..positions)
        .map(|i| {
            let table = transition_table(&e_dt.index_axis0(i), e_g, d);
            transition_probs(&table, p_hat)
        })
        .collect();
    tape.stack_rows(&rows)
}

/// Transition tables for every position, as raw values (no gradient use):
/// the diagnostic path that feeds the per-video averaged table export.
pub fn transition_tables_data(e_dt: &Tensor, e_g: &Tensor) -> Vec<Vec<f64>> {
    let shape = e_dt.shape();
    let positions = shape[0];
    let d = shape[2];
    (0..positions)
        .map(|i| transition_table(&e_dt.index_axis0(i), e_g, d).data())
        .collect()
}
