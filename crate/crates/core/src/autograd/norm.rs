use super::{Graph, Var};
use crate::tensor::Tensor;

/// Per-channel statistics used by batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Graph {
    /// Batch normalization over `(N, H, W)`.
    ///
    /// With `running = None` the batch's own (biased) statistics are used and
    /// returned; otherwise the given statistics are applied as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<&BatchStats>,
        eps: f64,
    ) -> (Var, BatchStats) {
        let (n, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let m = (n * plane) as f64;
        let xd = self.value(x).data();
        let stats = match running {
            Some(s) => s.clone(),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += xd[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().sum::<f64>();
                    }
                    let mu = s / m;
                    let mut v = 0.0;
                    for i in 0..n {
                        v += xd[(i * c + ch) * plane..(i * c + ch + 1) * plane]
                            .iter()
                            .map(|x| (x - mu) * (x - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = v / m;
                }
                BatchStats { mean, var }
            }
        };
        let inv: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                for p in base..base + plane {
                    let xh = (xd[p] - stats.mean[ch]) * inv[ch];
                    xhat[p] = xh;
                    out[p] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let batch_mode = running.is_none();
        let out = Tensor::from_vec(&[n, c, h, w], out).unwrap();
        let var = self.push(out, &[x, gamma, beta], move |vals, g, grads| {
            let gd = g.data();
            let gam = vals[gamma.0].data();
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * plane;
                    for p in base..base + plane {
                        sum_g[ch] += gd[p];
                        sum_gx[ch] += gd[p] * xhat[p];
                    }
                }
            }
            if grads.wants(gamma) {
                grads.slot(gamma, &[c]).iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s);
            }
            if grads.wants(beta) {
                grads.slot(beta, &[c]).iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s);
            }
            if grads.wants(x) {
                let slot = grads.slot(x, &[n, c, h, w]);
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * plane;
                        let k = gam[ch] * inv[ch];
                        for p in base..base + plane {
                            slot[p] += if batch_mode {
                                k * (gd[p] - sum_g[ch] / m - xhat[p] * sum_gx[ch] / m)
                            } else {
                                k * gd[p]
                            };
                        }
                    }
                }
            }
        });
        (var, stats)
    }

    /// Layer normalization across channels, independently per pixel.
    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let cf = c as f64;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv = vec![0.0; n * plane];
        let mut out = vec![0.0; xd.len()];
        for i in 0..n {
            let base = i * c * plane;
            let mut mean = vec![0.0; plane];
            for ch in 0..c {
                let row = &xd[base + ch * plane..base + (ch + 1) * plane];
                mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
            }
            mean.iter_mut().for_each(|m| *m /= cf);
            let mut var = vec![0.0; plane];
            for ch in 0..c {
                let row = &xd[base + ch * plane..base + (ch + 1) * plane];
                for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
            for (p, v) in var.iter().enumerate() {
                inv[i * plane + p] = 1.0 / (v / cf + eps).sqrt();
            }
            for ch in 0..c {
                let off = base + ch * plane;
                for p in 0..plane {
                    let xh = (xd[off + p] - mean[p]) * inv[i * plane + p];
                    xhat[off + p] = xh;
                    out[off + p] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, h, w], out).unwrap();
        self.push(out, &[x, gamma, beta], move |vals, g, grads| {
            let gd = g.data();
            let gam = vals[gamma.0].data();
            if grads.wants(gamma) || grads.wants(beta) {
                let mut sg = vec![0.0; c];
                let mut sgx = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * plane;
                        for p in off..off + plane {
                            sg[ch] += gd[p];
                            sgx[ch] += gd[p] * xhat[p];
                        }
                    }
                }
                if grads.wants(gamma) {
                    grads.slot(gamma, &[c]).iter_mut().zip(&sgx).for_each(|(d, s)| *d += s);
                }
                if grads.wants(beta) {
                    grads.slot(beta, &[c]).iter_mut().zip(&sg).for_each(|(d, s)| *d += s);
                }
            }
            if grads.wants(x) {
                let slot = grads.slot(x, &[n, c, h, w]);
                for i in 0..n {
                    let base = i * c * plane;
                    let mut s1 = vec![0.0; plane];
                    let mut s2 = vec![0.0; plane];
                    for ch in 0..c {
                        let off = base + ch * plane;
                        for p in 0..plane {
                            let dxh = gd[off + p] * gam[ch];
                            s1[p] += dxh;
                            s2[p] += dxh * xhat[off + p];
                        }
                    }
                    for ch in 0..c {
                        let off = base + ch * plane;
                        for p in 0..plane {
                            let dxh = gd[off + p] * gam[ch];
                            slot[off + p] += inv[i * plane + p] * (dxh - s1[p] / cf - xhat[off + p] * s2[p] / cf);
                        }
                    }
                }
            }
        })
    }

    /// Softmax over consecutive groups of `group` channels, per pixel.
    pub fn softmax_channel_groups(&mut self, x: Var, group: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(c % group, 0);
        let plane = h * w;
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for i in 0..n {
            for gi in 0..c / group {
                let base = (i * c + gi * group) * plane;
                for p in 0..plane {
                    let mut mx = f64::NEG_INFINITY;
                    for k in 0..group {
                        mx = mx.max(xd[base + k * plane + p]);
                    }
                    let mut s = 0.0;
                    for k in 0..group {
                        let e = (xd[base + k * plane + p] - mx).exp();
                        out[base + k * plane + p] = e;
                        s += e;
                    }
                    for k in 0..group {
                        out[base + k * plane + p] /= s;
                    }
                }
            }
        }
        let y = out.clone();
        let out = Tensor::from_vec(&[n, c, h, w], out).unwrap();
        self.push(out, &[x], move |_, g, grads| {
            let gd = g.data();
            let slot = grads.slot(x, &[n, c, h, w]);
            for i in 0..n {
                for gi in 0..c / group {
                    let base = (i * c + gi * group) * plane;
                    for p in 0..plane {
                        let mut dot = 0.0;
                        for k in 0..group {
                            let idx = base + k * plane + p;
                            dot += gd[idx] * y[idx];
                        }
                        for k in 0..group {
                            let idx = base + k * plane + p;
                            slot[idx] += y[idx] * (gd[idx] - dot);
                        }
                    }
                }
            }
        })
    }
}
