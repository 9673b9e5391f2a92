//! SwiGLU experts and the dispatch → expert → combine MoE layer.
//!
//! Dispatch is an explicit permutation: token slots are sorted by expert,
//! each expert runs one batched matrix product, and the inverse permutation
//! scatters rows back to their original positions.

use super::router::{router_backward, router_forward_trace, RouterState, RouterTrace};
use super::ModelError;
use crate::matrix::{gemm, Matrix};
use crate::scalar::Scalar;

/// One expert: `fc1` widens to the gated width, SwiGLU halves it, `fc2`
/// projects back to the hidden size.
#[derive(Debug, Clone)]
pub struct Expert<T> {
    /// hidden × ffn_width
    pub fc1: Matrix<T>,
    /// ffn_out_width × hidden
    pub fc2: Matrix<T>,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

struct ExpertTrace<T> {
    input: Matrix<T>,
    pre: Matrix<T>,
    act: Matrix<T>,
}

impl<T: Scalar> Expert<T> {
    pub fn zeros(hidden: usize, ffn_width: usize) -> Self {
        Self {
            fc1: Matrix::zeros(hidden, ffn_width),
            fc2: Matrix::zeros(ffn_width / 2, hidden),
        }
    }

    fn forward_trace(&self, x: &Matrix<T>) -> Result<(Matrix<T>, ExpertTrace<T>), ModelError> {
        let pre = gemm(x, &self.fc1, false, false)?;
        let half = pre.cols() / 2;
        let act = Matrix::from_fn(pre.rows(), half, |i, j| {
            silu(pre.get(i, j)) * pre.get(i, j + half)
        });
        let out = gemm(&act, &self.fc2, false, false)?;
        Ok((
            out,
            ExpertTrace {
                input: x.clone(),
                pre,
                act,
            },
        ))
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>, ModelError> {
        Ok(self.forward_trace(x)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn backward(
        &self,
        trace: &ExpertTrace<T>,
        dout: &Matrix<T>,
    ) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>), ModelError> {
        let half = trace.pre.cols() / 2;
        let dact = gemm(dout, &self.fc2, false, true)?;
        let dfc2 = gemm(&trace.act, dout, true, false)?;
        let dpre = Matrix::from_fn(trace.pre.rows(), trace.pre.cols(), |i, j| {
            if j < half {
                dact.get(i, j) * trace.pre.get(i, j + half) * silu_grad(trace.pre.get(i, j))
            } else {
                dact.get(i, j - half) * silu(trace.pre.get(i, j - half))
            }
        });
        let dx = gemm(&dpre, &self.fc1, false, true)?;
        let dfc1 = gemm(&trace.input, &dpre, true, false)?;
        Ok((dx, dfc1, dfc2))
    }
}

/// One routed slot: `token` was sent to `expert` with mixing weight `prob`.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchSlot<T> {
    pub token: usize,
    pub expert: usize,
    pub prob: T,
}

/// The dispatch permutation: slots sorted by `(expert, token)`.
pub fn dispatch_order<T: Scalar>(chosen: &[Vec<usize>], probs: &[Vec<T>]) -> Vec<DispatchSlot<T>> {
    let mut slots: Vec<DispatchSlot<T>> = chosen
        .iter()
        .zip(probs)
        .enumerate()
        .flat_map(|(token, (experts, ps))| {
            experts
                .iter()
                .zip(ps)
                .map(move |(&expert, &prob)| DispatchSlot {
                    token,
                    expert,
                    prob,
                })
        })
        .collect();
    slots.sort_by_key(|s| (s.expert, s.token));
    slots
}

/// Saved state for [`moe_layer_backward`].
pub struct MoeTrace<T> {
    router: RouterTrace<T>,
    slots: Vec<DispatchSlot<T>>,
    expert_traces: Vec<Option<ExpertTrace<T>>>,
    expert_outputs: Vec<Option<Matrix<T>>>,
    chosen: Vec<Vec<usize>>,
}

/// Route tokens, run their experts, scale by the routing probability, and
/// scatter results back in original token order.
pub fn moe_layer_forward<T: Scalar>(
    tokens: &Matrix<T>,
    router: &mut RouterState<T>,
    experts: &[Expert<T>],
    top_k: usize,
) -> Result<(Matrix<T>, MoeTrace<T>), ModelError> {
    let (routing, rtrace) = router_forward_trace(tokens, router, top_k)?;
    for picks in &routing.chosen {
        for &e in picks {
            if e >= experts.len() {
                return Err(ModelError::ExpertOutOfRange {
                    index: e,
                    experts: experts.len(),
                });
            }
        }
    }
    let slots = dispatch_order(&routing.chosen, &routing.probs);
    let mut out = Matrix::zeros(tokens.rows(), tokens.cols());
    let mut expert_traces: Vec<Option<ExpertTrace<T>>> = (0..experts.len()).map(|_| None).collect();
    let mut expert_outputs: Vec<Option<Matrix<T>>> = (0..experts.len()).map(|_| None).collect();

    let mut i = 0;
    while i < slots.len() {
        let expert_id = slots[i].expert;
        let mut j = i;
        while j < slots.len() && slots[j].expert == expert_id {
            j += 1;
        }
        let batch = &slots[i..j];
        let gathered = Matrix::from_fn(batch.len(), tokens.cols(), |row, col| {
            tokens.get(batch[row].token, col)
        });
        let (expert_out, trace) = experts[expert_id].forward_trace(&gathered)?;
        for (row, slot) in batch.iter().enumerate() {
            for col in 0..out.cols() {
                let scaled = slot.prob * expert_out.get(row, col);
                out.set(slot.token, col, out.get(slot.token, col) + scaled);
            }
        }
        expert_traces[expert_id] = Some(trace);
        expert_outputs[expert_id] = Some(expert_out);
        i = j;
    }

    Ok((
        out,
        MoeTrace {
            router: rtrace,
            slots,
            expert_traces,
            expert_outputs,
            chosen: routing.chosen,
        },
    ))
}

/// Gradients of the MoE layer.
pub struct MoeGrads<T> {
    pub dtokens: Matrix<T>,
    pub dexperts: Vec<(Matrix<T>, Matrix<T>)>,
    pub drouter: super::router::RouterGrads<T>,
}

/// Backward through combine, experts, the routing probabilities, and the
/// router itself (selection indices are fixed).
pub fn moe_layer_backward<T: Scalar>(
    tokens: &Matrix<T>,
    router: &RouterState<T>,
    experts: &[Expert<T>],
    trace: &MoeTrace<T>,
    dout: &Matrix<T>,
) -> Result<MoeGrads<T>, ModelError> {
    let mut dtokens = Matrix::zeros(tokens.rows(), tokens.cols());
    let mut dexperts: Vec<(Matrix<T>, Matrix<T>)> = experts
        .iter()
        .map(|e| {
            (
                Matrix::zeros(e.fc1.rows(), e.fc1.cols()),
                Matrix::zeros(e.fc2.rows(), e.fc2.cols()),
            )
        })
        .collect();
    let mut dscores = Matrix::zeros(trace.router.scores.rows(), trace.router.scores.cols());

    let mut i = 0;
    while i < trace.slots.len() {
        let expert_id = trace.slots[i].expert;
        let mut j = i;
        while j < trace.slots.len() && trace.slots[j].expert == expert_id {
            j += 1;
        }
        let batch = &trace.slots[i..j];
        let etrace = trace.expert_traces[expert_id].as_ref().unwrap();
        let eout = trace.expert_outputs[expert_id].as_ref().unwrap();
        // dprob per slot and the prob-scaled upstream for the expert.
        let dexpert_out = Matrix::from_fn(batch.len(), dout.cols(), |row, col| {
            batch[row].prob * dout.get(batch[row].token, col)
        });
        for (row, slot) in batch.iter().enumerate() {
            let mut dprob = T::zero();
            for col in 0..dout.cols() {
                dprob += dout.get(slot.token, col) * eout.get(row, col);
            }
            dscores.set(
                slot.token,
                slot.expert,
                dscores.get(slot.token, slot.expert) + dprob,
            );
        }
        let (dx, dfc1, dfc2) = experts[expert_id].backward(etrace, &dexpert_out)?;
        for (row, slot) in batch.iter().enumerate() {
            for col in 0..dtokens.cols() {
                dtokens.set(
                    slot.token,
                    col,
                    dtokens.get(slot.token, col) + dx.get(row, col),
                );
            }
        }
        dexperts[expert_id].0 = dexperts[expert_id].0.add(&dfc1)?;
        dexperts[expert_id].1 = dexperts[expert_id].1.add(&dfc2)?;
        i = j;
    }

    let drouter = router_backward(&trace.router, router, &dscores)?;
    dtokens = dtokens.add(&drouter.dx)?;
    Ok(MoeGrads {
        dtokens,
        dexperts,
        drouter,
    })
}

/// The multiset of token indices dispatched, for permutation checks.
pub fn dispatched_tokens<T: Scalar>(trace: &MoeTrace<T>) -> Vec<usize> {
    trace.slots.iter().map(|s| s.token).collect()
}

/// Chosen experts per token recorded by the forward.
pub fn chosen_of_trace<T: Scalar>(trace: &MoeTrace<T>) -> &[Vec<usize>] {
    &trace.chosen
}
