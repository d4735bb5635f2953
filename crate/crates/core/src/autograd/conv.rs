//! 2-D convolution on ERP rasters: circular padding across the longitude
//! seam, edge replication at the top and bottom rows.

use super::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const SAME: ConvSpec = ConvSpec { stride: 1, groups: 1 };

    pub fn strided(stride: usize) -> Self {
        Self { stride, groups: 1 }
    }

    pub fn depthwise(channels: usize) -> Self {
        Self { stride: 1, groups: channels }
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    stride: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn hp(&self) -> usize {
        self.h + 2 * self.pad
    }

    fn wp(&self) -> usize {
        self.w + 2 * self.pad
    }

    fn ci_per_group(&self) -> usize {
        self.ci / self.groups
    }

    fn co_per_group(&self) -> usize {
        self.co / self.groups
    }
}

/// Padded copy of one input plane.
fn pad_plane(src: &[f64], g: &Geometry, dst: &mut [f64]) {
    let (hp, wp, p) = (g.hp(), g.wp(), g.pad);
    for r in 0..hp {
        let sr = (r as isize - p as isize).clamp(0, g.h as isize - 1) as usize;
        let row = &src[sr * g.w..(sr + 1) * g.w];
        let out = &mut dst[r * wp..(r + 1) * wp];
        for (c, o) in out.iter_mut().enumerate() {
            let sc = (c as isize - p as isize).rem_euclid(g.w as isize) as usize;
            *o = row[sc];
        }
    }
}

/// Folds a padded-plane gradient back onto the source plane.
fn unpad_plane_add(gp: &[f64], g: &Geometry, dst: &mut [f64]) {
    let (hp, wp, p) = (g.hp(), g.wp(), g.pad);
    for r in 0..hp {
        let sr = (r as isize - p as isize).clamp(0, g.h as isize - 1) as usize;
        for c in 0..wp {
            let sc = (c as isize - p as isize).rem_euclid(g.w as isize) as usize;
            dst[sr * g.w + sc] += gp[r * wp + c];
        }
    }
}

/// `out_row[j] += wv · in_row[j·stride + off]`.
#[inline]
fn axpy_strided(out_row: &mut [f64], in_row: &[f64], wv: f64, stride: usize, off: usize) {
    if stride == 1 {
        let len = out_row.len();
        for (o, x) in out_row.iter_mut().zip(&in_row[off..off + len]) {
            *o += wv * x;
        }
    } else {
        for (j, o) in out_row.iter_mut().enumerate() {
            *o += wv * in_row[j * stride + off];
        }
    }
}

#[inline]
fn dot_strided(g_row: &[f64], in_row: &[f64], stride: usize, off: usize) -> f64 {
    if stride == 1 {
        g_row.iter().zip(&in_row[off..off + g_row.len()]).map(|(a, b)| a * b).sum()
    } else {
        g_row.iter().enumerate().map(|(j, a)| a * in_row[j * stride + off]).sum()
    }
}

/// Padded input planes for sample `n`, one per input channel.
fn padded_input(x: &[f64], g: &Geometry, n: usize) -> Vec<f64> {
    let plane = g.h * g.w;
    let pplane = g.hp() * g.wp();
    if g.pad == 0 {
        return x[n * g.ci * plane..(n + 1) * g.ci * plane].to_vec();
    }
    let mut buf = vec![0.0; g.ci * pplane];
    for c in 0..g.ci {
        let src = &x[(n * g.ci + c) * plane..(n * g.ci + c + 1) * plane];
        pad_plane(src, g, &mut buf[c * pplane..(c + 1) * pplane]);
    }
    buf
}

fn conv_forward(x: &[f64], wt: &[f64], bias: Option<&[f64]>, g: &Geometry) -> Vec<f64> {
    let oplane = g.ho * g.wo;
    let pplane = g.hp() * g.wp();
    let wp = g.wp();
    let (cig, cog, k) = (g.ci_per_group(), g.co_per_group(), g.k);
    let mut out = vec![0.0; g.n * g.co * oplane];
    for n in 0..g.n {
        let padded = padded_input(x, g, n);
        for co in 0..g.co {
            let grp = co / cog;
            let o = &mut out[(n * g.co + co) * oplane..(n * g.co + co + 1) * oplane];
            if let Some(b) = bias {
                o.iter_mut().for_each(|v| *v = b[co]);
            }
            for cil in 0..cig {
                let ci = grp * cig + cil;
                let p = &padded[ci * pplane..(ci + 1) * pplane];
                for di in 0..k {
                    for dj in 0..k {
                        let wv = wt[((co * cig + cil) * k + di) * k + dj];
                        if wv == 0.0 {
                            continue;
                        }
                        for i in 0..g.ho {
                            let in_row = &p[(i * g.stride + di) * wp..(i * g.stride + di + 1) * wp];
                            axpy_strided(&mut o[i * g.wo..(i + 1) * g.wo], in_row, wv, g.stride, dj);
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    x: &[f64],
    wt: &[f64],
    gout: &[f64],
    g: &Geometry,
    want: (bool, bool, bool),
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (want_x, want_w, want_b) = want;
    let plane = g.h * g.w;
    let oplane = g.ho * g.wo;
    let pplane = g.hp() * g.wp();
    let wp = g.wp();
    let (cig, cog, k) = (g.ci_per_group(), g.co_per_group(), g.k);
    let mut gx = if want_x { vec![0.0; g.n * g.ci * plane] } else { Vec::new() };
    let mut gw = if want_w { vec![0.0; wt.len()] } else { Vec::new() };
    let mut gb = if want_b { vec![0.0; g.co] } else { Vec::new() };
    for n in 0..g.n {
        let padded = if want_w { padded_input(x, g, n) } else { Vec::new() };
        let mut gpad = if want_x { vec![0.0; g.ci * pplane] } else { Vec::new() };
        for co in 0..g.co {
            let grp = co / cog;
            let o = &gout[(n * g.co + co) * oplane..(n * g.co + co + 1) * oplane];
            if want_b {
                gb[co] += o.iter().sum::<f64>();
            }
            for cil in 0..cig {
                let ci = grp * cig + cil;
                for di in 0..k {
                    for dj in 0..k {
                        let widx = ((co * cig + cil) * k + di) * k + dj;
                        if want_w {
                            let p = &padded[ci * pplane..(ci + 1) * pplane];
                            let mut acc = 0.0;
                            for i in 0..g.ho {
                                let in_row = &p[(i * g.stride + di) * wp..(i * g.stride + di + 1) * wp];
                                acc += dot_strided(&o[i * g.wo..(i + 1) * g.wo], in_row, g.stride, dj);
                            }
                            gw[widx] += acc;
                        }
                        if want_x {
                            let wv = wt[widx];
                            if wv == 0.0 {
                                continue;
                            }
                            let gp = &mut gpad[ci * pplane..(ci + 1) * pplane];
                            for i in 0..g.ho {
                                let row = &mut gp[(i * g.stride + di) * wp..(i * g.stride + di + 1) * wp];
                                let orow = &o[i * g.wo..(i + 1) * g.wo];
                                if g.stride == 1 {
                                    for (d, s) in row[dj..dj + g.wo].iter_mut().zip(orow) {
                                        *d += wv * s;
                                    }
                                } else {
                                    for (j, s) in orow.iter().enumerate() {
                                        row[j * g.stride + dj] += wv * s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if want_x {
            for c in 0..g.ci {
                let dst = &mut gx[(n * g.ci + c) * plane..(n * g.ci + c + 1) * plane];
                let src = &gpad[c * pplane..(c + 1) * pplane];
                if g.pad == 0 {
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                } else {
                    unpad_plane_add(src, g, dst);
                }
            }
        }
    }
    (gx, gw, gb)
}

impl Graph {
    /// Square-kernel convolution with "same" padding `k/2`.
    ///
    /// `x`: `N×Ci×H×W`; `w`: `Co×(Ci/groups)×k×k`; `b`: `Co`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let (n, ci, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be rank 4");
        let (co, cig, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(ws[3], k, "square kernels only");
        assert_eq!(k % 2, 1, "odd kernels only");
        assert_eq!(ci, cig * spec.groups, "conv: input channels {ci} vs weight {ws:?}");
        assert_eq!(co % spec.groups, 0);
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / spec.stride + 1;
        let wo = (wd + 2 * pad - k) / spec.stride + 1;
        let geo = Geometry { n, ci, co, h, w: wd, k, pad, stride: spec.stride, groups: spec.groups, ho, wo };
        let bias = b.map(|b| self.value(b).data());
        let out = conv_forward(self.value(x).data(), self.value(w).data(), bias, &geo);
        let out = Tensor::from_vec(&[n, co, ho, wo], out).unwrap();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, &inputs, move |vals, gout, grads| {
            let want = (grads.wants(x), grads.wants(w), b.is_some_and(|b| grads.wants(b)));
            let (gx, gw, gb) = conv_backward(vals[x.0].data(), vals[w.0].data(), gout.data(), &geo, want);
            if want.0 {
                let shape = vals[x.0].shape().to_vec();
                grads.slot(x, &shape).iter_mut().zip(&gx).for_each(|(d, s)| *d += s);
            }
            if want.1 {
                let shape = vals[w.0].shape().to_vec();
                grads.slot(w, &shape).iter_mut().zip(&gw).for_each(|(d, s)| *d += s);
            }
            if let (true, Some(b)) = (want.2, b) {
                grads.slot(b, &[geo.co]).iter_mut().zip(&gb).for_each(|(d, s)| *d += s);
            }
        })
    }
}
