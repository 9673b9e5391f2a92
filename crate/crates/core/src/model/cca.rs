//! Compressed-attention sequence mixing: low-rank projections, two short
//! causal convolutions over the query/key streams, a one-token delay on the
//! second value stream, and causal softmax attention over compressed heads.

use super::ModelError;
use crate::matrix::{gemm, Matrix};
use crate::scalar::Scalar;

/// Per-channel causal convolution along the sequence axis.
///
/// `weights` is channels × width; tap `width-1` multiplies the current token,
/// earlier taps reach back in time with zero padding at the boundary.
#[derive(Debug, Clone)]
pub struct DepthwiseConv<T> {
    pub weights: Matrix<T>,
}

impl<T: Scalar> DepthwiseConv<T> {
    /// Passes the input through unchanged (`[0, .., 0, 1]` taps).
    pub fn identity(channels: usize, width: usize) -> Self {
        Self {
            weights: Matrix::from_fn(channels, width, |_, j| {
                if j == width - 1 {
                    T::one()
                } else {
                    T::zero()
                }
            }),
        }
    }

    pub fn width(&self) -> usize {
        self.weights.cols()
    }

    pub fn channels(&self) -> usize {
        self.weights.rows()
    }

    pub fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>, ModelError> {
        if x.cols() != self.channels() {
            return Err(ModelError::Shape {
                op: "depthwise_conv",
                detail: format!("{} channels vs input {}", self.channels(), x.cols()),
            });
        }
        let w = self.width();
        Ok(Matrix::from_fn(x.rows(), x.cols(), |t, c| {
            let mut acc = T::zero();
            for j in 0..w {
                let src = t as isize - (w as isize - 1) + j as isize;
                if src >= 0 {
                    acc += self.weights.get(c, j) * x.get(src as usize, c);
                }
            }
            acc
        }))
    }

    /// VJP: gradients with respect to the input and the taps.
    pub fn backward(
        &self,
        x: &Matrix<T>,
        dy: &Matrix<T>,
    ) -> Result<(Matrix<T>, Matrix<T>), ModelError> {
        let w = self.width();
        let mut dx = Matrix::zeros(x.rows(), x.cols());
        let mut dw = Matrix::zeros(self.channels(), w);
        for t in 0..x.rows() {
            for c in 0..x.cols() {
                let g = dy.get(t, c);
                for j in 0..w {
                    let src = t as isize - (w as isize - 1) + j as isize;
                    if src >= 0 {
                        let s = src as usize;
                        dx.set(s, c, dx.get(s, c) + g * self.weights.get(c, j));
                        dw.set(c, j, dw.get(c, j) + g * x.get(s, c));
                    }
                }
            }
        }
        Ok((dx, dw))
    }
}

/// Grouped causal convolution: channels split into equal groups, each group
/// mixed by its own per-tap matrix (in-channels × out-channels, row-vector
/// convention).
#[derive(Debug, Clone)]
pub struct GroupedConv<T> {
    pub groups: usize,
    pub group_dim: usize,
    pub width: usize,
    /// Indexed `group * width + tap`.
    pub weights: Vec<Matrix<T>>,
}

impl<T: Scalar> GroupedConv<T> {
    pub fn identity(groups: usize, group_dim: usize, width: usize) -> Self {
        let weights = (0..groups * width)
            .map(|idx| {
                if idx % width == width - 1 {
                    Matrix::identity(group_dim)
                } else {
                    Matrix::zeros(group_dim, group_dim)
                }
            })
            .collect();
        Self {
            groups,
            group_dim,
            width,
            weights,
        }
    }

    pub fn channels(&self) -> usize {
        self.groups * self.group_dim
    }

    pub fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>, ModelError> {
        if x.cols() != self.channels() {
            return Err(ModelError::Shape {
                op: "grouped_conv",
                detail: format!("{} channels vs input {}", self.channels(), x.cols()),
            });
        }
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for t in 0..x.rows() {
            for g in 0..self.groups {
                let base = g * self.group_dim;
                for j in 0..self.width {
                    let src = t as isize - (self.width as isize - 1) + j as isize;
                    if src < 0 {
                        continue;
                    }
                    let wmat = &self.weights[g * self.width + j];
                    for u in 0..self.group_dim {
                        let mut acc = out.get(t, base + u);
                        for v in 0..self.group_dim {
                            acc += x.get(src as usize, base + v) * wmat.get(v, u);
                        }
                        out.set(t, base + u, acc);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn backward(
        &self,
        x: &Matrix<T>,
        dy: &Matrix<T>,
    ) -> Result<(Matrix<T>, Vec<Matrix<T>>), ModelError> {
        let mut dx = Matrix::zeros(x.rows(), x.cols());
        let mut dw: Vec<Matrix<T>> = self
            .weights
            .iter()
            .map(|w| Matrix::zeros(w.rows(), w.cols()))
            .collect();
        for t in 0..x.rows() {
            for g in 0..self.groups {
                let base = g * self.group_dim;
                for j in 0..self.width {
                    let src = t as isize - (self.width as isize - 1) + j as isize;
                    if src < 0 {
                        continue;
                    }
                    let s = src as usize;
                    let wmat = &self.weights[g * self.width + j];
                    let dwmat = &mut dw[g * self.width + j];
                    for u in 0..self.group_dim {
                        let gout = dy.get(t, base + u);
                        for v in 0..self.group_dim {
                            dx.set(s, base + v, dx.get(s, base + v) + gout * wmat.get(v, u));
                            dwmat.set(v, u, dwmat.get(v, u) + gout * x.get(s, base + v));
                        }
                    }
                }
            }
        }
        Ok((dx, dw))
    }
}

/// One-token right shift along the sequence with zero fill at the front.
pub fn shift_right<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    Matrix::from_fn(x.rows(), x.cols(), |t, c| {
        if t == 0 {
            T::zero()
        } else {
            x.get(t - 1, c)
        }
    })
}

/// Adjoint of [`shift_right`].
pub fn shift_right_backward<T: Scalar>(dy: &Matrix<T>) -> Matrix<T> {
    Matrix::from_fn(dy.rows(), dy.cols(), |t, c| {
        if t + 1 < dy.rows() {
            dy.get(t + 1, c)
        } else {
            T::zero()
        }
    })
}

/// Projection and sequence-mixing parameters of one attention block.
#[derive(Debug, Clone)]
pub struct CcaParams<T> {
    /// hidden × (query_heads · head_dim)
    pub wq: Matrix<T>,
    /// hidden × (kv_heads · head_dim)
    pub wk: Matrix<T>,
    /// hidden × (kv_heads · head_dim / 2), first value stream.
    pub wv1: Matrix<T>,
    /// hidden × (kv_heads · head_dim / 2), delayed value stream.
    pub wv2: Matrix<T>,
    /// Depthwise conv over the concatenated q‖k channels.
    pub conv0: DepthwiseConv<T>,
    /// Grouped conv over the same channels, one group per head.
    pub conv1: GroupedConv<T>,
}

impl<T: Scalar> CcaParams<T> {
    /// Combined causal reach of the two convolutions, in past tokens.
    pub fn receptive_overhang(&self) -> usize {
        (self.conv0.width() - 1) + (self.conv1.width - 1)
    }
}

/// Mixed streams ready for attention.
#[derive(Debug, Clone)]
pub struct CcaMix<T> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    /// Both value streams concatenated, the second delayed by one token.
    pub v: Matrix<T>,
}

/// Intermediates for [`cca_mix_backward`].
pub struct CcaMixTrace<T> {
    pub qk: Matrix<T>,
    pub qk_conv0: Matrix<T>,
    pub v2: Matrix<T>,
}

fn concat_cols<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    Matrix::from_fn(a.rows(), a.cols() + b.cols(), |i, j| {
        if j < a.cols() {
            a.get(i, j)
        } else {
            b.get(i, j - a.cols())
        }
    })
}

fn split_cols<T: Scalar>(m: &Matrix<T>, left: usize) -> (Matrix<T>, Matrix<T>) {
    let a = Matrix::from_fn(m.rows(), left, |i, j| m.get(i, j));
    let b = Matrix::from_fn(m.rows(), m.cols() - left, |i, j| m.get(i, j + left));
    (a, b)
}

/// Project tokens to the compressed q/k/v streams and run the sequence
/// mixing: depthwise conv, grouped conv, and the one-token value delay.
pub fn cca_mix<T: Scalar>(
    tokens: &Matrix<T>,
    params: &CcaParams<T>,
) -> Result<(CcaMix<T>, CcaMixTrace<T>), ModelError> {
    let min_seq = params.receptive_overhang() + 1;
    if tokens.rows() < min_seq {
        return Err(ModelError::SequenceTooShort {
            seq: tokens.rows(),
            field: min_seq,
        });
    }
    let q0 = gemm(tokens, &params.wq, false, false)?;
    let k0 = gemm(tokens, &params.wk, false, false)?;
    let v1 = gemm(tokens, &params.wv1, false, false)?;
    let v2 = gemm(tokens, &params.wv2, false, false)?;

    let qk = concat_cols(&q0, &k0);
    let qk_conv0 = params.conv0.apply(&qk)?;
    let qk_mixed = params.conv1.apply(&qk_conv0)?;
    let (q, k) = split_cols(&qk_mixed, q0.cols());

    let v2_shifted = shift_right(&v2);
    let v = concat_cols(&v1, &v2_shifted);
    Ok((CcaMix { q, k, v }, CcaMixTrace { qk, qk_conv0, v2 }))
}

/// Parameter and input gradients of [`cca_mix`].
pub struct CcaMixGrads<T> {
    pub dx: Matrix<T>,
    pub dwq: Matrix<T>,
    pub dwk: Matrix<T>,
    pub dwv1: Matrix<T>,
    pub dwv2: Matrix<T>,
    pub dconv0: Matrix<T>,
    pub dconv1: Vec<Matrix<T>>,
}

pub fn cca_mix_backward<T: Scalar>(
    tokens: &Matrix<T>,
    params: &CcaParams<T>,
    trace: &CcaMixTrace<T>,
    dq: &Matrix<T>,
    dk: &Matrix<T>,
    dv: &Matrix<T>,
) -> Result<CcaMixGrads<T>, ModelError> {
    let dqk_mixed = concat_cols(dq, dk);
    let (dqk_conv0, dconv1) = params.conv1.backward(&trace.qk_conv0, &dqk_mixed)?;
    let (dqk, dconv0) = params.conv0.backward(&trace.qk, &dqk_conv0)?;
    let (dq0, dk0) = split_cols(&dqk, dq.cols());

    let (dv1, dv2_shifted) = split_cols(dv, params.wv1.cols());
    let dv2 = shift_right_backward(&dv2_shifted);

    let dwq = gemm(tokens, &dq0, true, false)?;
    let dwk = gemm(tokens, &dk0, true, false)?;
    let dwv1 = gemm(tokens, &dv1, true, false)?;
    let dwv2 = gemm(tokens, &dv2, true, false)?;

    let mut dx = gemm(&dq0, &params.wq, false, true)?;
    dx = dx.add(&gemm(&dk0, &params.wk, false, true)?)?;
    dx = dx.add(&gemm(&dv1, &params.wv1, false, true)?)?;
    dx = dx.add(&gemm(&dv2, &params.wv2, false, true)?)?;
    Ok(CcaMixGrads {
        dx,
        dwq,
        dwk,
        dwv1,
        dwv2,
        dconv0,
        dconv1,
    })
}

/// Causal softmax attention over `heads_q` query heads sharing `heads_kv`
/// key/value heads (query head `i` reads kv head `i / (heads_q/heads_kv)`).
///
/// Returns the outputs and the per-row log-sum-exp (sequence × heads_q), the
/// statistic a blockwise backward needs.
pub fn attention_forward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads_q: usize,
    heads_kv: usize,
) -> Result<(Matrix<T>, Matrix<T>), ModelError> {
    let seq = q.rows();
    if !q.cols().is_multiple_of(heads_q)
        || !k.cols().is_multiple_of(heads_kv)
        || !v.cols().is_multiple_of(heads_kv)
    {
        return Err(ModelError::Shape {
            op: "attention_forward",
            detail: "head widths do not divide the stream widths".into(),
        });
    }
    let d = q.cols() / heads_q;
    let dv = v.cols() / heads_kv;
    let scale = T::from_f64_lossy(1.0 / (d as f64).sqrt());
    let mut out = Matrix::zeros(seq, heads_q * dv);
    let mut lse = Matrix::zeros(seq, heads_q);
    let group = heads_q / heads_kv;
    for hq in 0..heads_q {
        let hkv = hq / group;
        for i in 0..seq {
            let mut max = T::neg_infinity();
            let mut logits = vec![T::zero(); i + 1];
            for (j, logit) in logits.iter_mut().enumerate() {
                let mut acc = T::zero();
                for e in 0..d {
                    acc += q.get(i, hq * d + e) * k.get(j, hkv * d + e);
                }
                *logit = acc * scale;
                max = max.max(*logit);
            }
            let mut denom = T::zero();
            for logit in logits.iter_mut() {
                *logit = (*logit - max).exp();
                denom += *logit;
            }
            lse.set(i, hq, max + denom.ln());
            for e in 0..dv {
                let mut acc = T::zero();
                for (j, p) in logits.iter().enumerate() {
                    acc += *p * v.get(j, hkv * dv + e);
                }
                out.set(i, hq * dv + e, acc / denom);
            }
        }
    }
    Ok((out, lse))
}

/// Backward of causal attention; `out`/`lse` come from the forward.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn attention_backward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    out: &Matrix<T>,
    lse: &Matrix<T>,
    dout: &Matrix<T>,
    heads_q: usize,
    heads_kv: usize,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>), ModelError> {
    let seq = q.rows();
    let d = q.cols() / heads_q;
    let dv = v.cols() / heads_kv;
    let scale = T::from_f64_lossy(1.0 / (d as f64).sqrt());
    let group = heads_q / heads_kv;
    let mut dq = Matrix::zeros(seq, q.cols());
    let mut dk = Matrix::zeros(seq, k.cols());
    let mut dvm = Matrix::zeros(seq, v.cols());
    for hq in 0..heads_q {
        let hkv = hq / group;
        for i in 0..seq {
            // D = <dout_i, out_i> for this head.
            let mut dsum = T::zero();
            for e in 0..dv {
                dsum += dout.get(i, hq * dv + e) * out.get(i, hq * dv + e);
            }
            for j in 0..=i {
                let mut logit = T::zero();
                for e in 0..d {
                    logit += q.get(i, hq * d + e) * k.get(j, hkv * d + e);
                }
                let p = (logit * scale - lse.get(i, hq)).exp();
                let mut dp = T::zero();
                for e in 0..dv {
                    dp += dout.get(i, hq * dv + e) * v.get(j, hkv * dv + e);
                }
                let ds = p * (dp - dsum) * scale;
                for e in 0..d {
                    dq.set(
                        i,
                        hq * d + e,
                        dq.get(i, hq * d + e) + ds * k.get(j, hkv * d + e),
                    );
                    dk.set(
                        j,
                        hkv * d + e,
                        dk.get(j, hkv * d + e) + ds * q.get(i, hq * d + e),
                    );
                }
                for e in 0..dv {
                    dvm.set(
                        j,
                        hkv * dv + e,
                        dvm.get(j, hkv * dv + e) + p * dout.get(i, hq * dv + e),
                    );
                }
            }
        }
    }
    Ok((dq, dk, dvm))
}
