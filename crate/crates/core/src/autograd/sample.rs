//! Differentiable resampling: the deformable tangent-patch gather and
//! bilinear resizing with longitude wrap.

use std::sync::Arc;

use super::{Graph, Var};
use crate::sphere_geom::{axis_taps, bilinear_stencil, TangentPatchGrid};
use crate::tensor::Tensor;

/// `N×C×H×W` → `N×H×W×C`.
fn to_channels_last(x: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        for ch in 0..c {
            let src = &x[(i * c + ch) * plane..(i * c + ch + 1) * plane];
            for (p, v) in src.iter().enumerate() {
                out[(i * plane + p) * c + ch] = *v;
            }
        }
    }
    out
}

fn add_channels_first(dst: &mut [f64], x: &[f64], n: usize, c: usize, plane: usize) {
    for i in 0..n {
        for ch in 0..c {
            let d = &mut dst[(i * c + ch) * plane..(i * c + ch + 1) * plane];
            for (p, v) in d.iter_mut().enumerate() {
                *v += x[(i * plane + p) * c + ch];
            }
        }
    }
}

/// Sampling position of `(query, head, sample)`: geometric grid plus flow.
#[inline]
pub(crate) fn flow_position(
    grid: &TangentPatchGrid,
    offsets: &[f64],
    n: usize,
    heads: usize,
    q: usize,
    m: usize,
    k: usize,
) -> (f64, f64) {
    let kk = grid.k_samples();
    let plane = grid.spec().num_pixels();
    let (gu, gv) = grid.positions()[q * kk + k];
    let ch = (m * kk + k) * 2;
    let base = n * heads * kk * 2 * plane;
    (gu + offsets[base + ch * plane + q], gv + offsets[base + (ch + 1) * plane + q])
}

impl Graph {
    /// Deformable gather over a tangent-patch grid.
    ///
    /// `value`: `N×C×H×W`, split into `heads` contiguous channel blocks;
    /// `attn`: `N×(heads·K)×H×W` weights; `offsets`: `N×(2·heads·K)×H×W`
    /// pixel-unit flow `(du, dv)` per head and sample. For each query `q`,
    /// head `m`: `out[m-block, q] = Σ_k attn[m,k,q] · value_m(ŝ_qk + Δs_mqk)`,
    /// with the longitude wrapped.
    pub fn deform_sample(
        &mut self,
        value: Var,
        attn: Var,
        offsets: Var,
        grid: Arc<TangentPatchGrid>,
        heads: usize,
    ) -> Var {
        let (n, c, h, w) = self.value(value).dims4();
        let kk = grid.k_samples();
        assert_eq!((grid.spec().height(), grid.spec().width()), (h, w), "grid resolution mismatch");
        assert_eq!(c % heads, 0);
        assert_eq!(self.value(attn).shape(), &[n, heads * kk, h, w]);
        assert_eq!(self.value(offsets).shape(), &[n, 2 * heads * kk, h, w]);
        let plane = h * w;
        let ch_per = c / heads;
        let vt = to_channels_last(self.value(value).data(), n, c, plane);
        let ad = self.value(attn).data();
        let od = self.value(offsets).data();
        let mut out_t = vec![0.0; n * plane * c];
        let mut acc = vec![0.0; ch_per];
        for i in 0..n {
            let vbase = i * plane * c;
            for q in 0..plane {
                for m in 0..heads {
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for k in 0..kk {
                        let a = ad[((i * heads + m) * kk + k) * plane + q];
                        let (u, v) = flow_position(&grid, od, i, heads, q, m, k);
                        let st = bilinear_stencil(u, v, h, w, true);
                        for &(idx, wt) in &st.value {
                            let coef = a * wt;
                            if coef == 0.0 {
                                continue;
                            }
                            let src = &vt[vbase + idx * c + m * ch_per..vbase + idx * c + (m + 1) * ch_per];
                            acc.iter_mut().zip(src).for_each(|(o, s)| *o += coef * s);
                        }
                    }
                    out_t[(i * plane + q) * c + m * ch_per..(i * plane + q) * c + (m + 1) * ch_per]
                        .copy_from_slice(&acc);
                }
            }
        }
        let mut out = vec![0.0; out_t.len()];
        add_channels_first(&mut out, &out_t, n, c, plane);
        let out = Tensor::from_vec(&[n, c, h, w], out).unwrap();
        self.push(out, &[value, attn, offsets], move |vals, g, grads| {
            let ad = vals[attn.0].data();
            let od = vals[offsets.0].data();
            let gt = to_channels_last(g.data(), n, c, plane);
            let vt = to_channels_last(vals[value.0].data(), n, c, plane);
            let (want_v, want_a, want_o) = (grads.wants(value), grads.wants(attn), grads.wants(offsets));
            let mut gvt = if want_v { vec![0.0; n * plane * c] } else { Vec::new() };
            let mut ga = if want_a { vec![0.0; n * heads * kk * plane] } else { Vec::new() };
            let mut goff = if want_o { vec![0.0; n * 2 * heads * kk * plane] } else { Vec::new() };
            for i in 0..n {
                let vbase = i * plane * c;
                for q in 0..plane {
                    for m in 0..heads {
                        let gq = &gt[vbase + q * c + m * ch_per..vbase + q * c + (m + 1) * ch_per];
                        for k in 0..kk {
                            let aidx = ((i * heads + m) * kk + k) * plane + q;
                            let a = ad[aidx];
                            let (u, v) = flow_position(&grid, od, i, heads, q, m, k);
                            let st = bilinear_stencil(u, v, h, w, true);
                            let tap_dot = |taps: &[(usize, f64); 4]| -> f64 {
                                let mut s = 0.0;
                                for &(idx, wt) in taps {
                                    if wt == 0.0 {
                                        continue;
                                    }
                                    let src = &vt[vbase + idx * c + m * ch_per..vbase + idx * c + (m + 1) * ch_per];
                                    s += wt * gq.iter().zip(src.iter()).map(|(x, y)| x * y).sum::<f64>();
                                }
                                s
                            };
                            if want_a {
                                ga[aidx] += tap_dot(&st.value);
                            }
                            if want_o && a != 0.0 {
                                let ch = (m * kk + k) * 2;
                                let obase = i * heads * kk * 2 * plane;
                                goff[obase + ch * plane + q] += a * tap_dot(&st.du);
                                goff[obase + (ch + 1) * plane + q] += a * tap_dot(&st.dv);
                            }
                            if want_v {
                                for &(idx, wt) in &st.value {
                                    let coef = a * wt;
                                    if coef == 0.0 {
                                        continue;
                                    }
                                    let dst =
                                        &mut gvt[vbase + idx * c + m * ch_per..vbase + idx * c + (m + 1) * ch_per];
                                    dst.iter_mut().zip(gq).for_each(|(d, s)| *d += coef * s);
                                }
                            }
                        }
                    }
                }
            }
            if want_v {
                add_channels_first(grads.slot(value, &[n, c, h, w]), &gvt, n, c, plane);
            }
            if want_a {
                grads.slot(attn, &[n, heads * kk, h, w]).iter_mut().zip(&ga).for_each(|(d, s)| *d += s);
            }
            if want_o {
                grads.slot(offsets, &[n, 2 * heads * kk, h, w]).iter_mut().zip(&goff).for_each(|(d, s)| *d += s);
            }
        })
    }

    /// Bilinear resize (half-pixel centers), longitude wrapped, rows clamped.
    pub fn resize_bilinear(&mut self, x: Var, ho: usize, wo: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let rows: Vec<_> =
            (0..ho).map(|i| axis_taps((i as f64 + 0.5) * h as f64 / ho as f64 - 0.5, h, false)).collect();
        let cols: Vec<_> = (0..wo).map(|j| axis_taps((j as f64 + 0.5) * w as f64 / wo as f64 - 0.5, w, true)).collect();
        let xd = self.value(x).data();
        let (plane, oplane) = (h * w, ho * wo);
        let mut out = vec![0.0; n * c * oplane];
        for nc in 0..n * c {
            let src = &xd[nc * plane..(nc + 1) * plane];
            let dst = &mut out[nc * oplane..(nc + 1) * oplane];
            for (i, r) in rows.iter().enumerate() {
                for (j, cl) in cols.iter().enumerate() {
                    let top = (1.0 - cl.f) * src[r.i0 * w + cl.i0] + cl.f * src[r.i0 * w + cl.i1];
                    let bot = (1.0 - cl.f) * src[r.i1 * w + cl.i0] + cl.f * src[r.i1 * w + cl.i1];
                    dst[i * wo + j] = (1.0 - r.f) * top + r.f * bot;
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, ho, wo], out).unwrap();
        self.push(out, &[x], move |_, g, grads| {
            let gd = g.data();
            let slot = grads.slot(x, &[n, c, h, w]);
            for nc in 0..n * c {
                let src = &gd[nc * oplane..(nc + 1) * oplane];
                let dst = &mut slot[nc * plane..(nc + 1) * plane];
                for (i, r) in rows.iter().enumerate() {
                    for (j, cl) in cols.iter().enumerate() {
                        let s = src[i * wo + j];
                        dst[r.i0 * w + cl.i0] += (1.0 - r.f) * (1.0 - cl.f) * s;
                        dst[r.i0 * w + cl.i1] += (1.0 - r.f) * cl.f * s;
                        dst[r.i1 * w + cl.i0] += r.f * (1.0 - cl.f) * s;
                        dst[r.i1 * w + cl.i1] += r.f * cl.f * s;
                    }
                }
            }
        })
    }
}
