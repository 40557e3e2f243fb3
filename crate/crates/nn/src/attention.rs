//! Fused multi-head self-attention plus the adaLN modulation helpers.
//!
//! These ops collapse the slice/reshape/permute/bmm/softmax chains into
//! single nodes with hand-written backward rules; the gradcheck suite pins
//! them against both finite differences and the unfused op composition.

use ndarray::{Array2, Array3, ArrayD};

use crate::tape::{BackwardOp, NodeId, Tape};

/// Multi-head self-attention over packed qkv rows.
///
/// Input `[b*n, 3h]` (per sample-major token rows: q | k | v), output
/// `[b*n, h]` of merged head contexts. Softmax probabilities are cached for
/// the backward pass.
struct AttentionOp {
    batch: usize,
    n_tokens: usize,
    heads: usize,
    probs: Array3<f64>, // [b*heads, n, n]
}

fn attention_forward(
    qkv: &ArrayD<f64>,
    batch: usize,
    n_tokens: usize,
    heads: usize,
) -> (Array2<f64>, Array3<f64>) {
    let h = qkv.shape()[1] / 3;
    let dh = h / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qkv_s = qkv.as_slice().expect("standard layout");
    let mut out = Array2::<f64>::zeros((batch * n_tokens, h));
    let mut probs = Array3::<f64>::zeros((batch * heads, n_tokens, n_tokens));
    let row_stride = 3 * h;


    let slots = batch * heads;
    let compute = |slot_range: std::ops::Range<usize>,
                   probs_chunk: &mut [f64],
                   out_rows: &mut [f64],
                   out_row_offset: usize| {
        let start = slot_range.start;
        for slot in slot_range {
            let b = slot / heads;
            let hd = slot % heads;
            let q_off = hd * dh;
            let k_off = h + hd * dh;
            let v_off = 2 * h + hd * dh;
            let p_base = (slot - start) * n_tokens * n_tokens;
            for i in 0..n_tokens {
                let qi = &qkv_s[(b * n_tokens + i) * row_stride + q_off..][..dh];
                let prow = &mut probs_chunk[p_base + i * n_tokens..][..n_tokens];
                let mut max = f64::NEG_INFINITY;
                for (j, pj) in prow.iter_mut().enumerate() {
                    let kj = &qkv_s[(b * n_tokens + j) * row_stride + k_off..][..dh];
                    let mut acc = 0.0;
                    for d in 0..dh {
                        acc += qi[d] * kj[d];
                    }
                    let s = acc * scale;
                    *pj = s;
                    if s > max {
                        max = s;
                    }
                }
                let mut z = 0.0;
                for pj in prow.iter_mut() {
                    *pj = (*pj - max).exp();
                    z += *pj;
                }
                for pj in prow.iter_mut() {
                    *pj /= z;
                }
                let out_row = (b * n_tokens + i) - out_row_offset;
                let orow = &mut out_rows[out_row * h + hd * dh..][..dh];
                for (j, &p) in prow.iter().enumerate() {
                    let vj = &qkv_s[(b * n_tokens + j) * row_stride + v_off..][..dh];
                    for d in 0..dh {
                        orow[d] += p * vj[d];
                    }
                }
            }
        }
    };

    if batch < 2 {
        compute(
            0..slots,
            probs.as_slice_mut().unwrap(),
            out.as_slice_mut().unwrap(),
            0,
        );
    } else {
        // split on the batch boundary so output rows stay disjoint
        let mid_b = batch / 2;
        let mid_slot = mid_b * heads;
        let (p1, p2) = probs
            .as_slice_mut()
            .unwrap()
            .split_at_mut(mid_slot * n_tokens * n_tokens);
        let (o1, o2) = out
            .as_slice_mut()
            .unwrap()
            .split_at_mut(mid_b * n_tokens * h);
        rayon::join(
            || compute(0..mid_slot, p1, o1, 0),
            || compute(mid_slot..slots, p2, o2, mid_b * n_tokens),
        );
    }
    (out, probs)
}

fn attention_backward(
    grad: &ArrayD<f64>,
    qkv: &ArrayD<f64>,
    probs: &Array3<f64>,
    batch: usize,
    n_tokens: usize,
    heads: usize,
) -> ArrayD<f64> {
    let h = grad.shape()[1];
    let dh = h / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let row_stride = 3 * h;
    let qkv_s = qkv.as_slice().unwrap();
    let g_s = grad.as_slice().unwrap();
    let p_s = probs.as_slice().unwrap();
    let mut gqkv = ArrayD::<f64>::zeros(qkv.raw_dim());

    let compute = |b_range: std::ops::Range<usize>, gout: &mut [f64], row_offset: usize| {
        let mut dp = vec![0.0; n_tokens];
        for b in b_range {
            for hd in 0..heads {
                let slot = b * heads + hd;
                let q_off = hd * dh;
                let k_off = h + hd * dh;
                let v_off = 2 * h + hd * dh;
                let p_base = slot * n_tokens * n_tokens;
                for i in 0..n_tokens {
                    let gi = &g_s[(b * n_tokens + i) * h + hd * dh..][..dh];
                    let prow = &p_s[p_base + i * n_tokens..][..n_tokens];
                    // dV accumulation and dP
                    let mut dot = 0.0;
                    for (j, pj) in prow.iter().enumerate() {
                        let vj = &qkv_s[(b * n_tokens + j) * row_stride + v_off..][..dh];
                        let gv_row =
                            &mut gout[((b * n_tokens + j) - row_offset) * row_stride + v_off..][..dh];
                        let mut dp_j = 0.0;
                        for d in 0..dh {
                            gv_row[d] += pj * gi[d];
                            dp_j += gi[d] * vj[d];
                        }
                        dp[j] = dp_j;
                        dot += dp_j * pj;
                    }
                    // softmax backward into dS (reusing dp), then dQ/dK
                    let qi_idx = (b * n_tokens + i) * row_stride + q_off;
                    for j in 0..n_tokens {
                        let ds = (dp[j] - dot) * prow[j] * scale;
                        let kj = &qkv_s[(b * n_tokens + j) * row_stride + k_off..][..dh];
                        let gq_row = &mut gout[qi_idx - row_offset * row_stride..][..dh];
                        for d in 0..dh {
                            gq_row[d] += ds * kj[d];
                        }
                        let qi = &qkv_s[qi_idx..][..dh];
                        let gk_row =
                            &mut gout[((b * n_tokens + j) - row_offset) * row_stride + k_off..][..dh];
                        for d in 0..dh {
                            gk_row[d] += ds * qi[d];
                        }
                    }
                }
            }
        }
    };

    if batch < 2 {
        compute(0..batch, gqkv.as_slice_mut().unwrap(), 0);
    } else {
        let mid = batch / 2;
        let (g1, g2) = gqkv
            .as_slice_mut()
            .unwrap()
            .split_at_mut(mid * n_tokens * row_stride);
        rayon::join(
            || compute(0..mid, g1, 0),
            || compute(mid..batch, g2, mid * n_tokens),
        );
    }
    gqkv
}

impl BackwardOp for AttentionOp {
    fn backward(&self, g: &ArrayD<f64>, i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        vec![attention_backward(
            g,
            i[0],
            &self.probs,
            self.batch,
            self.n_tokens,
            self.heads,
        )]
    }
}

/// Row-block modulation `y = x * (1 + scale_b) + shift_b` where row `r`
/// belongs to sample `r / n_tokens`.
struct ModulateOp {
    n_tokens: usize,
}

impl BackwardOp for ModulateOp {
    fn backward(&self, g: &ArrayD<f64>, i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let x = i[0].as_slice().unwrap();
        let scale = i[1];
        let h = scale.shape()[1];
        let b = scale.shape()[0];
        let g_s = g.as_slice().unwrap();
        let scale_s = scale.as_slice().unwrap();
        let mut gx = ArrayD::<f64>::zeros(i[0].raw_dim());
        let gx_s = gx.as_slice_mut().unwrap();
        let mut gscale = Array2::<f64>::zeros((b, h));
        let mut gshift = Array2::<f64>::zeros((b, h));
        {
            let gs_s = gscale.as_slice_mut().unwrap();
            let gh_s = gshift.as_slice_mut().unwrap();
            for bi in 0..b {
                let srow = &scale_s[bi * h..][..h];
                for t in 0..self.n_tokens {
                    let r = (bi * self.n_tokens + t) * h;
                    for d in 0..h {
                        let gv = g_s[r + d];
                        gx_s[r + d] = gv * (1.0 + srow[d]);
                        gs_s[bi * h + d] += gv * x[r + d];
                        gh_s[bi * h + d] += gv;
                    }
                }
            }
        }
        vec![gx, gscale.into_dyn(), gshift.into_dyn()]
    }
}

/// Gated residual `y = x + gate_b * branch`.
struct GatedAddOp {
    n_tokens: usize,
}

impl BackwardOp for GatedAddOp {
    fn backward(&self, g: &ArrayD<f64>, i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let branch = i[1].as_slice().unwrap();
        let gate = i[2];
        let b = gate.shape()[0];
        let h = gate.shape()[1];
        let gate_s = gate.as_slice().unwrap();
        let g_s = g.as_slice().unwrap();
        let mut gbranch = ArrayD::<f64>::zeros(i[1].raw_dim());
        let gb_s = gbranch.as_slice_mut().unwrap();
        let mut ggate = Array2::<f64>::zeros((b, h));
        {
            let gg_s = ggate.as_slice_mut().unwrap();
            for bi in 0..b {
                let grow = &gate_s[bi * h..][..h];
                for t in 0..self.n_tokens {
                    let r = (bi * self.n_tokens + t) * h;
                    for d in 0..h {
                        let gv = g_s[r + d];
                        gb_s[r + d] = gv * grow[d];
                        gg_s[bi * h + d] += gv * branch[r + d];
                    }
                }
            }
        }
        vec![g.clone(), gbranch, ggate.into_dyn()]
    }
}

impl Tape {
    /// Fused multi-head self-attention over packed `[b*n, 3h]` qkv rows.
    pub fn attention(&mut self, qkv: NodeId, batch: usize, n_tokens: usize, heads: usize) -> NodeId {
        let v = self.value(qkv);
        assert_eq!(v.shape()[0], batch * n_tokens);
        assert_eq!(v.shape()[1] % 3, 0);
        let (out, probs) = attention_forward(v, batch, n_tokens, heads);
        self.push(
            out.into_dyn(),
            vec![qkv],
            Some(Box::new(AttentionOp {
                batch,
                n_tokens,
                heads,
                probs,
            })),
        )
    }

    /// Fused `x * (1 + scale) + shift` with per-sample modulation rows.
    pub fn modulate(&mut self, x: NodeId, scale: NodeId, shift: NodeId, n_tokens: usize) -> NodeId {
        let xv = self.value(x);
        let sv = self.value(scale);
        let bv = self.value(shift);
        assert_eq!(sv.shape(), bv.shape());
        assert_eq!(xv.shape()[0], sv.shape()[0] * n_tokens);
        assert_eq!(xv.shape()[1], sv.shape()[1]);
        let h = sv.shape()[1];
        let mut out = xv.clone();
        let out_s = out.as_slice_mut().unwrap();
        let s_s = sv.as_slice().unwrap();
        let sh_s = bv.as_slice().unwrap();
        for (r, row) in out_s.chunks_exact_mut(h).enumerate() {
            let bi = r / n_tokens;
            let srow = &s_s[bi * h..][..h];
            let hrow = &sh_s[bi * h..][..h];
            for (d, v) in row.iter_mut().enumerate() {
                *v = *v * (1.0 + srow[d]) + hrow[d];
            }
        }
        self.push(out, vec![x, scale, shift], Some(Box::new(ModulateOp { n_tokens })))
    }

    /// Fused gated residual `x + gate * branch` with per-sample gate rows.
    pub fn gated_add(&mut self, x: NodeId, branch: NodeId, gate: NodeId, n_tokens: usize) -> NodeId {
        let xv = self.value(x);
        let bv = self.value(branch);
        let gv = self.value(gate);
        assert_eq!(xv.shape(), bv.shape());
        assert_eq!(xv.shape()[0], gv.shape()[0] * n_tokens);
        let h = gv.shape()[1];
        let mut out = xv.clone();
        let out_s = out.as_slice_mut().unwrap();
        let b_s = bv.as_slice().unwrap();
        let g_s = gv.as_slice().unwrap();
        for (r, row) in out_s.chunks_exact_mut(h).enumerate() {
            let bi = r / n_tokens;
            let grow = &g_s[bi * h..][..h];
            for (d, v) in row.iter_mut().enumerate() {
                *v += grow[d] * b_s[r * h + d];
            }
        }
        self.push(out, vec![x, branch, gate], Some(Box::new(GatedAddOp { n_tokens })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::ParamStore;

    /// Unfused reference attention built from primitive ops.
    fn reference_attention(
        tape: &mut Tape,
        qkv: NodeId,
        batch: usize,
        n_tokens: usize,
        heads: usize,
        h: usize,
    ) -> NodeId {
        let dh = h / heads;
        let to_heads = |tape: &mut Tape, part: NodeId| -> NodeId {
            let r = tape.reshape(part, &[batch, n_tokens, heads, dh]);
            let p = tape.permute(r, &[0, 2, 1, 3]);
            tape.reshape(p, &[batch * heads, n_tokens, dh])
        };
        let q = tape.slice_axis(qkv, 1, 0, h);
        let q = to_heads(tape, q);
        let k = tape.slice_axis(qkv, 1, h, h);
        let k = to_heads(tape, k);
        let v = tape.slice_axis(qkv, 1, 2 * h, h);
        let v = to_heads(tape, v);
        let scores = tape.bmm_nt(q, k);
        let scores = tape.mul_scalar(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax(scores);
        let ctx = tape.bmm_nn(attn, v);
        let ctx = tape.reshape(ctx, &[batch, heads, n_tokens, dh]);
        let ctx = tape.permute(ctx, &[0, 2, 1, 3]);
        tape.reshape(ctx, &[batch * n_tokens, h])
    }

    #[test]
    fn fused_attention_matches_unfused() {
        let (batch, n_tokens, heads, h) = (3, 5, 2, 8);
        let mut store = ParamStore::new();
        let mut r = rng::seeded(1);
        let qkv = store.add("qkv", rng::standard_normal(&mut r, &[batch * n_tokens, 3 * h]));
        let proj = rng::standard_normal(&mut r, &[batch * n_tokens, h]);

        let run = |fused: bool, store: &ParamStore| {
            let mut tape = Tape::new();
            let x = tape.param(store, qkv);
            let out = if fused {
                tape.attention(x, batch, n_tokens, heads)
            } else {
                reference_attention(&mut tape, x, batch, n_tokens, heads, h)
            };
            let w = tape.mul_const(out, &proj);
            let loss = tape.sum_all(w);
            let val = tape.value(out).clone();
            let grads = tape.backward(loss, store);
            (val, grads.get(qkv).unwrap().clone())
        };
        let (v_fused, g_fused) = run(true, &store);
        let (v_ref, g_ref) = run(false, &store);
        let dv = v_fused
            .iter()
            .zip(v_ref.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let dg = g_fused
            .iter()
            .zip(g_ref.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dv < 1e-12, "value mismatch {dv}");
        assert!(dg < 1e-11, "grad mismatch {dg}");
    }

    #[test]
    fn fused_modulate_and_gate_match_unfused() {
        let (batch, n_tokens, h) = (2, 4, 6);
        let mut store = ParamStore::new();
        let mut r = rng::seeded(2);
        let x = store.add("x", rng::standard_normal(&mut r, &[batch * n_tokens, h]));
        let branch = store.add("branch", rng::standard_normal(&mut r, &[batch * n_tokens, h]));
        let scale = store.add("scale", rng::standard_normal(&mut r, &[batch, h]));
        let shift = store.add("shift", rng::standard_normal(&mut r, &[batch, h]));
        let gate = store.add("gate", rng::standard_normal(&mut r, &[batch, h]));

        let run = |fused: bool, store: &ParamStore| {
            let mut tape = Tape::new();
            let xn = tape.param(store, x);
            let bn = tape.param(store, branch);
            let sn = tape.param(store, scale);
            let hn = tape.param(store, shift);
            let gn = tape.param(store, gate);
            let out = if fused {
                let m = tape.modulate(xn, sn, hn, n_tokens);
                tape.gated_add(m, bn, gn, n_tokens)
            } else {
                let sr = tape.repeat_rows(sn, n_tokens);
                let hr = tape.repeat_rows(hn, n_tokens);
                let gr = tape.repeat_rows(gn, n_tokens);
                let s1 = tape.add_scalar(sr, 1.0);
                let sc = tape.mul(xn, s1);
                let m = tape.add(sc, hr);
                let gb = tape.mul(gr, bn);
                tape.add(m, gb)
            };
            let loss = tape.sum_all(out);
            let grads = tape.backward(loss, store);
            (
                tape.value(out).clone(),
                [x, branch, scale, shift, gate].map(|p| grads.get(p).unwrap().clone()),
            )
        };
        let (v_f, g_f) = run(true, &store);
        let (v_r, g_r) = run(false, &store);
        assert_eq!(v_f, v_r);
        for (a, b) in g_f.iter().zip(g_r.iter()) {
            let d = a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(d < 1e-12, "grad mismatch {d}");
        }
    }
}
