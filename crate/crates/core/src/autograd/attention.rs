//! Fused multi-head scaled dot-product attention kernels.

use crate::scalar::Scalar;

/// Layout and masking of one attention call.
///
/// Queries are `[batch * q_len, d]`, keys/values `[batch * k_len, d]`, each
/// example occupying a contiguous block of rows. Heads split the `d` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnSpec {
    pub batch: usize,
    pub heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// Key `j` is visible to query `i` only when `j <= i + q_offset`.
    pub causal: bool,
    /// Absolute position of query row 0 (incremental decoding).
    pub q_offset: usize,
    /// `batch * k_len` flags, `true` for real (non-pad) keys.
    pub key_mask: Option<Vec<bool>>,
}

impl AttnSpec {
    fn visible(&self, b: usize, i: usize, j: usize) -> bool {
        if self.causal && j > i + self.q_offset {
            return false;
        }
        match &self.key_mask {
            Some(m) => m[b * self.k_len + j],
            None => true,
        }
    }
}

#[allow(clippy::too_many_arguments)]
unsafe fn gemm_raw<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: *const S,
    rsa: usize,
    csa: usize,
    b: *const S,
    rsb: usize,
    csb: usize,
    beta: S,
    c: *mut S,
    rsc: usize,
) {
    S::gemm(
        m,
        k,
        n,
        S::one(),
        a,
        rsa as isize,
        csa as isize,
        b,
        rsb as isize,
        csb as isize,
        beta,
        c,
        rsc as isize,
        1,
    );
}

/// Returns `(output, probabilities)`; probabilities are `[batch, heads, q_len, k_len]`.
pub(crate) fn forward<S: Scalar>(
    spec: &AttnSpec,
    d: usize,
    q: &[S],
    k: &[S],
    v: &[S],
) -> (Vec<S>, Vec<S>) {
    let AttnSpec {
        batch,
        heads,
        q_len,
        k_len,
        ..
    } = *spec;
    let dh = d / heads;
    let scale = S::one() / S::lit(dh as f64).sqrt();
    let mut out = vec![S::zero(); batch * q_len * d];
    let mut probs = vec![S::zero(); batch * heads * q_len * k_len];
    for b in 0..batch {
        for h in 0..heads {
            let p_off = (b * heads + h) * q_len * k_len;
            let p = &mut probs[p_off..p_off + q_len * k_len];
            let q_ptr = unsafe { q.as_ptr().add(b * q_len * d + h * dh) };
            let k_ptr = unsafe { k.as_ptr().add(b * k_len * d + h * dh) };
            // scores = Q Kᵀ
            unsafe {
                gemm_raw(
                    q_len,
                    dh,
                    k_len,
                    q_ptr,
                    d,
                    1,
                    k_ptr,
                    1,
                    d,
                    S::zero(),
                    p.as_mut_ptr(),
                    k_len,
                );
            }
            for i in 0..q_len {
                let row = &mut p[i * k_len..(i + 1) * k_len];
                let mut max = S::neg_infinity();
                for (j, s) in row.iter_mut().enumerate() {
                    if spec.visible(b, i, j) {
                        *s = *s * scale;
                        if *s > max {
                            max = *s;
                        }
                    } else {
                        *s = S::neg_infinity();
                    }
                }
                if max == S::neg_infinity() {
                    row.iter_mut().for_each(|s| *s = S::zero());
                    continue;
                }
                let mut sum = S::zero();
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    sum = sum + *s;
                }
                let inv = S::one() / sum;
                row.iter_mut().for_each(|s| *s = *s * inv);
            }
            let v_ptr = unsafe { v.as_ptr().add(b * k_len * d + h * dh) };
            let o_ptr = unsafe { out.as_mut_ptr().add(b * q_len * d + h * dh) };
            unsafe {
                gemm_raw(
                    q_len,
                    k_len,
                    dh,
                    p.as_ptr(),
                    k_len,
                    1,
                    v_ptr,
                    d,
                    1,
                    S::zero(),
                    o_ptr,
                    d,
                );
            }
        }
    }
    (out, probs)
}

/// Gradients `(dq, dk, dv)` given the upstream gradient of the output.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<S: Scalar>(
    spec: &AttnSpec,
    d: usize,
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    dout: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let AttnSpec {
        batch,
        heads,
        q_len,
        k_len,
        ..
    } = *spec;
    let dh = d / heads;
    let scale = S::one() / S::lit(dh as f64).sqrt();
    let mut dq = vec![S::zero(); q.len()];
    let mut dk = vec![S::zero(); k.len()];
    let mut dv = vec![S::zero(); v.len()];
    let mut ds = vec![S::zero(); q_len * k_len];
    for b in 0..batch {
        for h in 0..heads {
            let p_off = (b * heads + h) * q_len * k_len;
            let p = &probs[p_off..p_off + q_len * k_len];
            let q_off = b * q_len * d + h * dh;
            let kv_off = b * k_len * d + h * dh;
            unsafe {
                // dV += Pᵀ dO
                gemm_raw(
                    k_len,
                    q_len,
                    dh,
                    p.as_ptr(),
                    1,
                    k_len,
                    dout.as_ptr().add(q_off),
                    d,
                    1,
                    S::one(),
                    dv.as_mut_ptr().add(kv_off),
                    d,
                );
                // dP = dO Vᵀ
                gemm_raw(
                    q_len,
                    dh,
                    k_len,
                    dout.as_ptr().add(q_off),
                    d,
                    1,
                    v.as_ptr().add(kv_off),
                    1,
                    d,
                    S::zero(),
                    ds.as_mut_ptr(),
                    k_len,
                );
            }
            for i in 0..q_len {
                let pr = &p[i * k_len..(i + 1) * k_len];
                let dr = &mut ds[i * k_len..(i + 1) * k_len];
                let dot: S = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for (g, &pp) in dr.iter_mut().zip(pr) {
                    *g = pp * (*g - dot) * scale;
                }
            }
            unsafe {
                // dQ += dS K
                gemm_raw(
                    q_len,
                    k_len,
                    dh,
                    ds.as_ptr(),
                    k_len,
                    1,
                    k.as_ptr().add(kv_off),
                    d,
                    1,
                    S::one(),
                    dq.as_mut_ptr().add(q_off),
                    d,
                );
                // dK += dSᵀ Q
                gemm_raw(
                    k_len,
                    q_len,
                    dh,
                    ds.as_ptr(),
                    1,
                    k_len,
                    q.as_ptr().add(q_off),
                    d,
                    1,
                    S::one(),
                    dk.as_mut_ptr().add(kv_off),
                    d,
                );
            }
        }
    }
    (dq, dk, dv)
}
