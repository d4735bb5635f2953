use super::{Grads, Graph, Var};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> (f64, f64) {
    let inner = GELU_C * (x + 0.044_715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = GELU_C * (1.0 + 3.0 * 0.044_715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(ta.shape(), data).unwrap();
        self.push(out, &[a, b], move |_, g, grads: &mut Grads| {
            for v in [a, b] {
                if grads.wants(v) {
                    for (d, s) in grads.slot(v, g.shape()).iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
            }
        })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let out = Tensor::from_vec(ta.shape(), ta.data().iter().map(|x| c * x).collect()).unwrap();
        self.push(out, &[a], move |_, g, grads| {
            for (d, s) in grads.slot(a, g.shape()).iter_mut().zip(g.data()) {
                *d += c * s;
            }
        })
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> (f64, f64)) -> Var {
        let ta = self.value(a);
        let mut y = Vec::with_capacity(ta.numel());
        let mut dy = Vec::with_capacity(ta.numel());
        for &x in ta.data() {
            let (v, d) = f(x);
            y.push(v);
            dy.push(d);
        }
        let out = Tensor::from_vec(ta.shape(), y).unwrap();
        self.push(out, &[a], move |_, g, grads| {
            for ((d, s), k) in grads.slot(a, g.shape()).iter_mut().zip(g.data()).zip(&dy) {
                *d += s * k;
            }
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { (x, 1.0) } else { (0.0, 0.0) })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| {
            let t = x.tanh();
            (t, 1.0 - t * t)
        })
    }

    /// Concatenates two NCHW tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat: spatial/batch mismatch");
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            data.extend_from_slice(&self.value(a).data()[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&self.value(b).data()[i * cb * plane..(i + 1) * cb * plane]);
        }
        let out = Tensor::from_vec(&[n, ca + cb, h, w], data).unwrap();
        self.push(out, &[a, b], move |_, g, grads| {
            let gd = g.data();
            for (v, c, off) in [(a, ca, 0), (b, cb, ca)] {
                if !grads.wants(v) {
                    continue;
                }
                let slot = grads.slot(v, &[n, c, h, w]);
                for i in 0..n {
                    let src = &gd[(i * (ca + cb) + off) * plane..(i * (ca + cb) + off + c) * plane];
                    for (d, s) in slot[i * c * plane..(i + 1) * c * plane].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        })
    }

    /// `Σ x ⊙ w` for a constant `w`.
    pub fn dot_const(&mut self, x: Var, w: Tensor) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.shape(), w.shape());
        let v: f64 = tx.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        self.push(Tensor::scalar(v), &[x], move |_, g, grads| {
            let s = g.item();
            for (d, k) in grads.slot(x, w.shape()).iter_mut().zip(w.data()) {
                *d += s * k;
            }
        })
    }

    /// Scalar node whose value and gradient with respect to `x` were computed
    /// outside the tape.
    pub fn scalar_with_grad(&mut self, x: Var, value: f64, grad: Tensor) -> Var {
        assert_eq!(self.value(x).shape(), grad.shape());
        self.push(Tensor::scalar(value), &[x], move |_, g, grads| {
            let s = g.item();
            if s == 0.0 {
                return;
            }
            for (d, k) in grads.slot(x, grad.shape()).iter_mut().zip(grad.data()) {
                *d += s * k;
            }
        })
    }

    /// `Σ cᵢ·xᵢ` over scalar nodes.
    pub fn linear_combination(&mut self, terms: &[(Var, f64)]) -> Var {
        let v: f64 = terms.iter().map(|&(x, c)| c * self.value(x).item()).sum();
        let terms_owned = terms.to_vec();
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(v), &inputs, move |_, g, grads| {
            let s = g.item();
            for &(x, c) in &terms_owned {
                if grads.wants(x) {
                    grads.slot(x, &[1])[0] += c * s;
                }
            }
        })
    }

    /// Keeps `x` where `keep` is true and takes `fill` elsewhere. `keep` is
    /// an `N×H×W` pixel mask broadcast over channels.
    pub fn select_pixels(&mut self, x: Var, fill: &Tensor, keep: &[bool]) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(fill.shape(), self.value(x).shape());
        assert_eq!(keep.len(), n * h * w);
        let plane = h * w;
        let mut data = fill.data().to_vec();
        let xd = self.value(x).data();
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                for p in 0..plane {
                    if keep[i * plane + p] {
                        data[base + p] = xd[base + p];
                    }
                }
            }
        }
        let keep = keep.to_vec();
        let out = Tensor::from_vec(&[n, c, h, w], data).unwrap();
        self.push(out, &[x], move |_, g, grads| {
            let slot = grads.slot(x, g.shape());
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * plane;
                    for p in 0..plane {
                        if keep[i * plane + p] {
                            slot[base + p] += g.data()[base + p];
                        }
                    }
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::{check_gradients, probe, random_tensor};
    use super::*;

    #[test]
    fn elementwise_gradients() {
        let x = random_tensor(&[2, 3, 2, 2], 1);
        let y = random_tensor(&[2, 3, 2, 2], 2);
        for op in 0..5 {
            let err = check_gradients(
                &[x.clone(), y.clone()],
                |g, v| {
                    let o = match op {
                        0 => g.add(v[0], v[1]),
                        1 => g.gelu(v[0]),
                        2 => g.tanh(v[1]),
                        3 => g.scale(v[0], -2.5),
                        _ => g.concat_channels(v[0], v[1]),
                    };
                    probe(g, o, 7)
                },
                1e-6,
            );
            assert!(err < 1e-6, "op {op}: {err}");
        }
    }

    #[test]
    fn select_pixels_blocks_gradient() {
        let x = random_tensor(&[1, 2, 2, 2], 3);
        let fill = Tensor::zeros(&[1, 2, 2, 2]);
        let keep = vec![true, false, false, true];
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let s = g.select_pixels(v, &fill, &keep);
        assert_eq!(g.value(s).data()[1], 0.0);
        assert_eq!(g.value(s).data()[0], x.data()[0]);
        let out = g.dot_const(s, Tensor::full(&[1, 2, 2, 2], 1.0));
        let grads = g.backward(out);
        assert_eq!(grads.get(v).unwrap().data(), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[1, 1, 1, 2], 2.0));
        let x = g.leaf(Tensor::full(&[1, 1, 1, 2], 3.0));
        let y = g.add(c, x);
        let r = g.relu(c);
        assert!(!g.needs_grad(r));
        let out = g.dot_const(y, Tensor::full(&[1, 1, 1, 2], 1.0));
        let grads = g.backward(out);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0]);
    }
}
