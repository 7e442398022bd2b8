//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every forward map in the crate (networks and losses) is expressed through
//! this tape, so analytic gradients come from one code path and can be checked
//! against finite differences in one place.

use crate::tensor::Tensor;

pub type VarId = usize;

type BackFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<VarId>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, vec![], None)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, parents: Vec<VarId>, back: Option<BackFn>) -> VarId {
        self.nodes.push(Node {
            value,
            parents,
            back,
        });
        self.nodes.len() - 1
    }

    /// Backpropagate from a scalar node; returns one gradient slot per node.
    pub fn backward(&self, root: VarId) -> Vec<Option<Tensor>> {
        assert_eq!(
            self.nodes[root].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::full(self.nodes[root].value.shape(), 1.0));
        for id in (0..=root).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(back) = &self.nodes[id].back {
                let parent_vals: Vec<&Tensor> = self.nodes[id]
                    .parents
                    .iter()
                    .map(|&p| &self.nodes[p].value)
                    .collect();
                let parent_grads = back(&g, &parent_vals, &self.nodes[id].value);
                debug_assert_eq!(parent_grads.len(), self.nodes[id].parents.len());
                for (&p, pg) in self.nodes[id].parents.iter().zip(parent_grads) {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        grads
    }

    // ---- elementwise binary ----

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.map(|x| -x)])),
        )
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, p, _| {
                vec![g.zip(p[1], |gi, y| gi * y), g.zip(p[0], |gi, x| gi * x)]
            })),
        )
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).zip(self.value(b), |x, y| x / y);
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, p, _| {
                let da = g.zip(p[1], |gi, y| gi / y);
                let mut db = g.zip(p[0], |gi, x| gi * x);
                db = db.zip(p[1], |t, y| -t / (y * y));
                vec![da, db]
            })),
        )
    }

    // ---- elementwise unary ----

    pub fn scale(&mut self, a: VarId, k: f64) -> VarId {
        let v = self.value(a).map(|x| k * x);
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, _| vec![g.map(|gi| k * gi)])),
        )
    }

    pub fn add_scalar(&mut self, a: VarId, k: f64) -> VarId {
        let v = self.value(a).map(|x| x + k);
        self.push(v, vec![a], Some(Box::new(|g, _, _| vec![g.clone()])))
    }

    pub fn neg(&mut self, a: VarId) -> VarId {
        self.scale(a, -1.0)
    }

    pub fn powf(&mut self, a: VarId, p: f64) -> VarId {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, pv, _| {
                vec![g.zip(pv[0], |gi, x| {
                    if p == 0.0 {
                        0.0
                    } else {
                        gi * p * x.powf(p - 1.0)
                    }
                })]
            })),
        )
    }

    pub fn ln(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(f64::ln);
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, p, _| vec![g.zip(p[0], |gi, x| gi / x)])),
        )
    }

    pub fn abs(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(f64::abs);
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, p, _| {
                vec![g.zip(p[0], |gi, x| gi * x.signum())]
            })),
        )
    }

    pub fn clamp(&mut self, a: VarId, lo: f64, hi: f64) -> VarId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, p, _| {
                vec![g.zip(p[0], |gi, x| if x > lo && x < hi { gi } else { 0.0 })]
            })),
        )
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        self.leaky_relu(a, 0.0)
    }

    pub fn leaky_relu(&mut self, a: VarId, slope: f64) -> VarId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, p, _| {
                vec![g.zip(p[0], |gi, x| if x > 0.0 { gi } else { slope * gi })]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, _, out| {
                vec![g.zip(out, |gi, y| gi * y * (1.0 - y))]
            })),
        )
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(f64::tanh);
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, _, out| {
                vec![g.zip(out, |gi, y| gi * (1.0 - y * y))]
            })),
        )
    }

    /// elu(x) + 1: strictly positive kernel feature map for linear attention.
    pub fn elu1(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(|x| if x > 0.0 { x + 1.0 } else { x.exp() });
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, p, _| {
                vec![g.zip(p[0], |gi, x| if x > 0.0 { gi } else { gi * x.exp() })]
            })),
        )
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: VarId) -> VarId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, p, _| {
                vec![Tensor::full(p[0].shape(), g.item())]
            })),
        )
    }

    pub fn mean(&mut self, a: VarId) -> VarId {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> VarId {
        let v = self.value(a).reshaped(shape);
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, p, _| {
                vec![g.reshaped(p[0].shape().to_vec())]
            })),
        )
    }

    /// Concatenate two C×H×W maps along the channel axis.
    pub fn concat_ch(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape()[1..], vb.shape()[1..], "spatial mismatch in concat");
        let (ca, cb) = (va.shape()[0], vb.shape()[0]);
        let (h, w) = (va.shape()[1], va.shape()[2]);
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let v = Tensor::new(vec![ca + cb, h, w], data);
        self.push(
            v,
            vec![a, b],
            Some(Box::new(move |g, _, _| {
                let split = ca * h * w;
                vec![
                    Tensor::new(vec![ca, h, w], g.data()[..split].to_vec()),
                    Tensor::new(vec![cb, h, w], g.data()[split..].to_vec()),
                ]
            })),
        )
    }

    /// Contiguous slice of a 1-D tensor.
    pub fn slice1(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let va = self.value(a);
        assert_eq!(va.shape().len(), 1, "slice1 expects a vector");
        let total = va.len();
        assert!(start + len <= total, "slice1 out of bounds");
        let v = Tensor::new(vec![len], va.data()[start..start + len].to_vec());
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let mut da = Tensor::zeros(&[total]);
                da.data_mut()[start..start + len].copy_from_slice(g.data());
                vec![da]
            })),
        )
    }

    // ---- per-channel broadcast ----

    /// out[c,y,x] = a[c,y,x] * s[c]
    pub fn scale_channels(&mut self, a: VarId, s: VarId) -> VarId {
        let (va, vs) = (self.value(a), self.value(s));
        assert_eq!(va.shape()[0], vs.len(), "channel count mismatch");
        let (c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let mut v = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            let k = vs.data()[ch];
            for i in 0..h * w {
                v.data_mut()[ch * h * w + i] = va.data()[ch * h * w + i] * k;
            }
        }
        self.push(
            v,
            vec![a, s],
            Some(Box::new(move |g, p, _| {
                let mut da = Tensor::zeros(&[c, h, w]);
                let mut ds = Tensor::zeros(&[c]);
                for ch in 0..c {
                    let k = p[1].data()[ch];
                    let mut acc = 0.0;
                    for i in 0..h * w {
                        let idx = ch * h * w + i;
                        da.data_mut()[idx] = g.data()[idx] * k;
                        acc += g.data()[idx] * p[0].data()[idx];
                    }
                    ds.data_mut()[ch] = acc;
                }
                vec![da, ds]
            })),
        )
    }

    /// out[c,y,x] = a[c,y,x] + b[c]
    pub fn shift_channels(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape()[0], vb.len(), "channel count mismatch");
        let (c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let mut v = va.clone();
        for ch in 0..c {
            let k = vb.data()[ch];
            for i in 0..h * w {
                v.data_mut()[ch * h * w + i] += k;
            }
        }
        self.push(
            v,
            vec![a, b],
            Some(Box::new(move |g, _, _| {
                let mut db = Tensor::zeros(&[c]);
                for ch in 0..c {
                    db.data_mut()[ch] = g.data()[ch * h * w..(ch + 1) * h * w].iter().sum();
                }
                vec![g.clone(), db]
            })),
        )
    }

    /// Per-channel standardization over the spatial extent:
    /// y = (x - mean_c) / sqrt(var_c + eps), population variance.
    pub fn instance_norm(&mut self, a: VarId, eps: f64) -> VarId {
        let va = self.value(a);
        let (c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let n = (h * w) as f64;
        let mut v = Tensor::zeros(&[c, h, w]);
        let mut inv_sigma = vec![0.0; c];
        for ch in 0..c {
            let plane = &va.data()[ch * h * w..(ch + 1) * h * w];
            let mu = plane.iter().sum::<f64>() / n;
            let var = plane.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            inv_sigma[ch] = is;
            for (o, &x) in v.data_mut()[ch * h * w..(ch + 1) * h * w]
                .iter_mut()
                .zip(plane)
            {
                *o = (x - mu) * is;
            }
        }
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, out| {
                // dx = inv_sigma * (g - mean(g) - y * mean(g*y)) per channel
                let mut da = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    let gs = &g.data()[ch * h * w..(ch + 1) * h * w];
                    let ys = &out.data()[ch * h * w..(ch + 1) * h * w];
                    let gm = gs.iter().sum::<f64>() / n;
                    let gym = gs.iter().zip(ys).map(|(gi, yi)| gi * yi).sum::<f64>() / n;
                    for i in 0..h * w {
                        da.data_mut()[ch * h * w + i] =
                            inv_sigma[ch] * (gs[i] - gm - ys[i] * gym);
                    }
                }
                vec![da]
            })),
        )
    }

    // ---- linear algebra ----

    /// y = W x + b with x: [n], W: [m,n], b: [m].
    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> VarId {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (m, n) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(vx.len(), n, "linear input dimension mismatch");
        assert_eq!(vb.len(), m, "linear bias dimension mismatch");
        let mut v = Tensor::zeros(&[m]);
        for r in 0..m {
            let mut acc = vb.data()[r];
            for cc in 0..n {
                acc += vw.data()[r * n + cc] * vx.data()[cc];
            }
            v.data_mut()[r] = acc;
        }
        self.push(
            v,
            vec![x, w, b],
            Some(Box::new(move |g, p, _| {
                let mut dx = Tensor::zeros(&[n]);
                let mut dw = Tensor::zeros(&[m, n]);
                for r in 0..m {
                    let gr = g.data()[r];
                    for cc in 0..n {
                        dx.data_mut()[cc] += gr * p[1].data()[r * n + cc];
                        dw.data_mut()[r * n + cc] = gr * p[0].data()[cc];
                    }
                }
                vec![dx, dw, g.clone()]
            })),
        )
    }

    /// [m,k] @ [k,n] -> [m,n]
    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (k2, n) = (vb.shape()[0], vb.shape()[1]);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut v = Tensor::zeros(&[m, n]);
        for r in 0..m {
            for kk in 0..k {
                let x = va.data()[r * k + kk];
                if x == 0.0 {
                    continue;
                }
                for cc in 0..n {
                    v.data_mut()[r * n + cc] += x * vb.data()[kk * n + cc];
                }
            }
        }
        self.push(
            v,
            vec![a, b],
            Some(Box::new(move |g, p, _| {
                let mut da = Tensor::zeros(&[m, k]);
                let mut db = Tensor::zeros(&[k, n]);
                for r in 0..m {
                    for kk in 0..k {
                        let mut acc = 0.0;
                        for cc in 0..n {
                            acc += g.data()[r * n + cc] * p[1].data()[kk * n + cc];
                            db.data_mut()[kk * n + cc] +=
                                p[0].data()[r * k + kk] * g.data()[r * n + cc];
                        }
                        da.data_mut()[r * k + kk] = acc;
                    }
                }
                vec![da, db]
            })),
        )
    }

    pub fn transpose2(&mut self, a: VarId) -> VarId {
        let va = self.value(a);
        let (m, n) = (va.shape()[0], va.shape()[1]);
        let mut v = Tensor::zeros(&[n, m]);
        for r in 0..m {
            for cc in 0..n {
                v.data_mut()[cc * m + r] = va.data()[r * n + cc];
            }
        }
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let mut da = Tensor::zeros(&[m, n]);
                for r in 0..m {
                    for cc in 0..n {
                        da.data_mut()[r * n + cc] = g.data()[cc * m + r];
                    }
                }
                vec![da]
            })),
        )
    }

    /// Row sums of an [m,n] matrix -> [m].
    pub fn row_sums(&mut self, a: VarId) -> VarId {
        let va = self.value(a);
        let (m, n) = (va.shape()[0], va.shape()[1]);
        let mut v = Tensor::zeros(&[m]);
        for r in 0..m {
            v.data_mut()[r] = va.data()[r * n..(r + 1) * n].iter().sum();
        }
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let mut da = Tensor::zeros(&[m, n]);
                for r in 0..m {
                    for cc in 0..n {
                        da.data_mut()[r * n + cc] = g.data()[r];
                    }
                }
                vec![da]
            })),
        )
    }

    /// Divide each row of a[m,n] by d[m] (elementwise per row).
    pub fn div_rows(&mut self, a: VarId, d: VarId) -> VarId {
        let (va, vd) = (self.value(a), self.value(d));
        let (m, n) = (va.shape()[0], va.shape()[1]);
        assert_eq!(vd.len(), m, "row divisor length mismatch");
        let mut v = Tensor::zeros(&[m, n]);
        for r in 0..m {
            let inv = 1.0 / vd.data()[r];
            for cc in 0..n {
                v.data_mut()[r * n + cc] = va.data()[r * n + cc] * inv;
            }
        }
        self.push(
            v,
            vec![a, d],
            Some(Box::new(move |g, p, _| {
                let mut da = Tensor::zeros(&[m, n]);
                let mut dd = Tensor::zeros(&[m]);
                for r in 0..m {
                    let dr = p[1].data()[r];
                    let mut acc = 0.0;
                    for cc in 0..n {
                        let idx = r * n + cc;
                        da.data_mut()[idx] = g.data()[idx] / dr;
                        acc += g.data()[idx] * p[0].data()[idx];
                    }
                    dd.data_mut()[r] = -acc / (dr * dr);
                }
                vec![da, dd]
            })),
        )
    }

    // ---- spatial ----

    /// 2-D convolution: x [Cin,H,W], w [Cout,Cin,kh,kw], b [Cout].
    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId, stride: usize, pad: usize) -> VarId {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (cin, h, win) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (cout, cin2, kh, kw) = (
            vw.shape()[0],
            vw.shape()[1],
            vw.shape()[2],
            vw.shape()[3],
        );
        assert_eq!(cin, cin2, "conv2d channel mismatch");
        assert_eq!(vb.len(), cout, "conv2d bias mismatch");
        assert!(
            h + 2 * pad >= kh && win + 2 * pad >= kw,
            "conv2d input smaller than kernel"
        );
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (win + 2 * pad - kw) / stride + 1;
        let v = conv2d_forward(vx, vw, vb, stride, pad, ho, wo);
        self.push(
            v,
            vec![x, w, b],
            Some(Box::new(move |g, p, _| {
                conv2d_backward(g, p[0], p[1], stride, pad, cin, h, win, cout, kh, kw, ho, wo)
            })),
        )
    }

    /// Nearest-neighbor 2x upsampling of a C×H×W map.
    pub fn upsample_nearest2(&mut self, a: VarId) -> VarId {
        let va = self.value(a);
        let (c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let mut v = Tensor::zeros(&[c, 2 * h, 2 * w]);
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    v.set3(ch, y, x, va.at3(ch, y / 2, x / 2));
                }
            }
        }
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let mut da = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            let cur = da.at3(ch, y / 2, x / 2);
                            da.set3(ch, y / 2, x / 2, cur + g.at3(ch, y, x));
                        }
                    }
                }
                vec![da]
            })),
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Tensor {
    let (cin, h, win) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let mut out = Tensor::zeros(&[cout, ho, wo]);
    for o in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b.data()[o];
                for i in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= win as isize {
                                continue;
                            }
                            acc += x.at3(i, iy as usize, ix as usize)
                                * w.data()[((o * cin + i) * kh + ky) * kw + kx];
                        }
                    }
                }
                out.set3(o, oy, ox, acc);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    g: &Tensor,
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    cin: usize,
    h: usize,
    win: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
) -> Vec<Tensor> {
    let mut dx = Tensor::zeros(&[cin, h, win]);
    let mut dw = Tensor::zeros(&[cout, cin, kh, kw]);
    let mut db = Tensor::zeros(&[cout]);
    for o in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let go = g.at3(o, oy, ox);
                if go == 0.0 {
                    continue;
                }
                db.data_mut()[o] += go;
                for i in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= win as isize {
                                continue;
                            }
                            let widx = ((o * cin + i) * kh + ky) * kw + kx;
                            let xidx = (i * h + iy as usize) * win + ix as usize;
                            dx.data_mut()[xidx] += go * w.data()[widx];
                            dw.data_mut()[widx] += go * x.data()[xidx];
                        }
                    }
                }
            }
        }
    }
    vec![dx, dw, db]
}
