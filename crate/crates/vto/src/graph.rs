//! Minimal reverse-mode autodiff over `ndarray`, sized for the models in this
//! crate: dense/conv layers, attention primitives, FiLM and the normalizations
//! the UDiT blocks need. One `Graph` is built per forward pass; `backward`
//! walks the tape once and returns per-node gradients.

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn, Slice};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// x[..., c] + bias[c]
    AddBias(NodeId, NodeId),
    /// x[b, ...] * s[b]
    MulBatch(NodeId, NodeId),
    /// [m,k] x [k,n]
    Matmul(NodeId, NodeId),
    /// [q,m,k] x [q,k,n]
    Bmm(NodeId, NodeId),
    /// x [b,h,w,cin], w [kh,kw,cin,cout], same padding, odd kernel
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
    },
    /// nearest-neighbor 2x upsampling on [b,h,w,c]
    Upsample2x(NodeId),
    /// normalization over the last axis, no learned affine
    LayerNorm {
        x: NodeId,
        eps: f64,
    },
    /// x [b,...,c] * (1 + s[b,c]) + t[b,c]
    Film {
        x: NodeId,
        s: NodeId,
        t: NodeId,
    },
    Silu(NodeId),
    SoftmaxLast(NodeId),
    Permute(NodeId, Vec<usize>),
    Reshape(NodeId),
    Concat {
        a: NodeId,
        b: NodeId,
        axis: usize,
    },
    MeanAll(NodeId),
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

pub struct Grads<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<F>> {
        self.grads[id.0].as_ref()
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<F> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: ArrayD<F>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input: gradients are not tracked through it.
    pub fn constant(&mut self, value: ArrayD<F>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf: `backward` will produce a gradient for it.
    pub fn leaf(&mut self, value: ArrayD<F>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * F::cast(c));
        let rg = self.requires(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let b = &self.nodes[bias.0].value;
        assert_eq!(b.ndim(), 1, "bias must be 1-D");
        let c = b.len();
        let xv = &self.nodes[x.0].value;
        assert_eq!(*xv.shape().last().unwrap(), c, "bias length mismatch");
        let mut v = xv.clone();
        let bs = b.as_slice().unwrap().to_vec();
        for mut lane in v.rows_mut() {
            for (e, bv) in lane.iter_mut().zip(&bs) {
                *e = *e + *bv;
            }
        }
        let rg = self.requires(x) || self.requires(bias);
        self.push(v, Op::AddBias(x, bias), rg)
    }

    pub fn mul_batch(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let sv = &self.nodes[s.0].value;
        assert_eq!(sv.ndim(), 1, "per-batch scale must be 1-D");
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.shape()[0], sv.len(), "batch size mismatch");
        let mut v = xv.clone();
        for (mut sample, sc) in v.axis_iter_mut(Axis(0)).zip(sv.iter()) {
            sample.mapv_inplace(|e| e * *sc);
        }
        let rg = self.requires(x) || self.requires(s);
        self.push(v, Op::MulBatch(x, s), rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul lhs must be 2-D");
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul rhs must be 2-D");
        let v = av.dot(&bv).into_dyn();
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::Matmul(a, b), rg)
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.ndim(), 3);
        assert_eq!(bv.ndim(), 3);
        let (q, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (qb, kb, n) = (bv.shape()[0], bv.shape()[1], bv.shape()[2]);
        assert_eq!(q, qb);
        assert_eq!(k, kb);
        let mut out = ArrayD::<F>::zeros(IxDyn(&[q, m, n]));
        for i in 0..q {
            let ai = av
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let bi = bv
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            out.index_axis_mut(Axis(0), i).assign(&ai.dot(&bi));
        }
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::Bmm(a, b), rg)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let v = conv2d_forward(xv.view(), wv.view(), stride);
        let rg = self.requires(x) || self.requires(w);
        self.push(v, Op::Conv2d { x, w, stride }, rg)
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (b, h, w, c) = shape4(xv);
        let mut out = ArrayD::<F>::zeros(IxDyn(&[b, 2 * h, 2 * w, c]));
        for bi in 0..b {
            for y in 0..2 * h {
                for xcol in 0..2 * w {
                    for ci in 0..c {
                        out[[bi, y, xcol, ci]] = xv[[bi, y / 2, xcol / 2, ci]];
                    }
                }
            }
        }
        let rg = self.requires(x);
        self.push(out, Op::Upsample2x(x), rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut v = xv.clone();
        let epsf = F::cast(eps);
        for mut lane in v.rows_mut() {
            let n = F::from_usize(lane.len()).unwrap();
            let mean = lane.iter().fold(F::zero(), |a, &e| a + e) / n;
            let var = lane
                .iter()
                .fold(F::zero(), |a, &e| a + (e - mean) * (e - mean))
                / n;
            let inv = (var + epsf).sqrt().recip();
            lane.mapv_inplace(|e| (e - mean) * inv);
        }
        let rg = self.requires(x);
        self.push(v, Op::LayerNorm { x, eps }, rg)
    }

    pub fn film(&mut self, x: NodeId, s: NodeId, t: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let sv = &self.nodes[s.0].value;
        let tv = &self.nodes[t.0].value;
        assert_eq!(sv.ndim(), 2);
        assert_eq!(tv.shape(), sv.shape());
        let b = xv.shape()[0];
        let c = *xv.shape().last().unwrap();
        assert_eq!(sv.shape(), &[b, c], "film scale/shift must be [batch, channels]");
        let mut v = xv.clone();
        for bi in 0..b {
            let srow: Vec<F> = sv.index_axis(Axis(0), bi).iter().cloned().collect();
            let trow: Vec<F> = tv.index_axis(Axis(0), bi).iter().cloned().collect();
            for mut lane in v.index_axis_mut(Axis(0), bi).rows_mut() {
                for (ci, e) in lane.iter_mut().enumerate() {
                    *e = *e * (F::one() + srow[ci]) + trow[ci];
                }
            }
        }
        let rg = self.requires(x) || self.requires(s) || self.requires(t);
        self.push(v, Op::Film { x, s, t }, rg)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|e| e * sigmoid(e));
        let rg = self.requires(x);
        self.push(v, Op::Silu(x), rg)
    }

    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let mut v = self.nodes[x.0].value.clone();
        for mut lane in v.rows_mut() {
            let max = lane.iter().cloned().fold(F::neg_infinity(), F::max);
            lane.mapv_inplace(|e| (e - max).exp());
            let sum = lane.iter().fold(F::zero(), |a, &e| a + e);
            lane.mapv_inplace(|e| e / sum);
        }
        let rg = self.requires(x);
        self.push(v, Op::SoftmaxLast(x), rg)
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> NodeId {
        let v = self.nodes[x.0]
            .value
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .to_owned();
        let rg = self.requires(x);
        self.push(v, Op::Permute(x, perm.to_vec()), rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[x.0]
            .value
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let rg = self.requires(x);
        self.push(v, Op::Reshape(x), rg)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> NodeId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let v = ndarray::concatenate(Axis(axis), &[av.view(), bv.view()])
            .expect("concat shape mismatch");
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::Concat { a, b, axis }, rg)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let n = F::from_usize(xv.len()).unwrap();
        let m = xv.iter().fold(F::zero(), |a, &e| a + e) / n;
        let v = ArrayD::from_elem(IxDyn(&[]), m);
        let rg = self.requires(x);
        self.push(v, Op::MeanAll(x), rg)
    }

    // -- composites ----------------------------------------------------------

    /// x [n, in] * w [in, out] + b [out]
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    /// Linear over the last axis of an N-D tensor.
    pub fn linear_nd(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let din = *shape.last().unwrap();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = self.reshape(x, &[rows, din]);
        let y = self.linear(flat, w, b);
        let dout = self.value(y).shape()[1];
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = dout;
        self.reshape(y, &out_shape)
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    // -- backward ------------------------------------------------------------

    pub fn backward(&self, output: NodeId) -> Grads<F> {
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(ArrayD::from_elem(
            self.nodes[output.0].value.raw_dim(),
            F::one(),
        ));
        for i in (0..=output.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn acc(grads: &mut [Option<ArrayD<F>>], id: NodeId, g: ArrayD<F>) {
        match &mut grads[id.0] {
            Some(existing) => *existing = &*existing + &g,
            slot => *slot = Some(g),
        }
    }

    fn accumulate(&self, i: usize, g: &ArrayD<F>, grads: &mut [Option<ArrayD<F>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.requires(*a) {
                    Self::acc(grads, *a, g.clone());
                }
                if self.requires(*b) {
                    Self::acc(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.requires(*a) {
                    Self::acc(grads, *a, g.clone());
                }
                if self.requires(*b) {
                    Self::acc(grads, *b, g.mapv(|e| -e));
                }
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    Self::acc(grads, *a, g * &self.nodes[b.0].value);
                }
                if self.requires(*b) {
                    Self::acc(grads, *b, g * &self.nodes[a.0].value);
                }
            }
            Op::Scale(a, c) => {
                if self.requires(*a) {
                    Self::acc(grads, *a, g.mapv(|e| e * F::cast(*c)));
                }
            }
            Op::AddBias(x, bias) => {
                if self.requires(*x) {
                    Self::acc(grads, *x, g.clone());
                }
                if self.requires(*bias) {
                    let c = self.nodes[bias.0].value.len();
                    let mut gb = vec![F::zero(); c];
                    for lane in g.rows() {
                        for (acc, e) in gb.iter_mut().zip(lane.iter()) {
                            *acc = *acc + *e;
                        }
                    }
                    Self::acc(grads, *bias, ArrayD::from_shape_vec(IxDyn(&[c]), gb).unwrap());
                }
            }
            Op::MulBatch(x, s) => {
                let sv = &self.nodes[s.0].value;
                if self.requires(*x) {
                    let mut gx = g.clone();
                    for (mut sample, sc) in gx.axis_iter_mut(Axis(0)).zip(sv.iter()) {
                        sample.mapv_inplace(|e| e * *sc);
                    }
                    Self::acc(grads, *x, gx);
                }
                if self.requires(*s) {
                    let xv = &self.nodes[x.0].value;
                    let b = sv.len();
                    let mut gs = vec![F::zero(); b];
                    for bi in 0..b {
                        let prod = &g.index_axis(Axis(0), bi) * &xv.index_axis(Axis(0), bi);
                        gs[bi] = prod.iter().fold(F::zero(), |a, &e| a + e);
                    }
                    Self::acc(grads, *s, ArrayD::from_shape_vec(IxDyn(&[b]), gs).unwrap());
                }
            }
            Op::Matmul(a, b) => {
                let av = self.nodes[a.0]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let bv = self.nodes[b.0]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let gv = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                if self.requires(*a) {
                    Self::acc(grads, *a, gv.dot(&bv.t()).into_dyn());
                }
                if self.requires(*b) {
                    Self::acc(grads, *b, av.t().dot(&gv).into_dyn());
                }
            }
            Op::Bmm(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let q = av.shape()[0];
                if self.requires(*a) {
                    let mut ga = ArrayD::<F>::zeros(av.raw_dim());
                    for i2 in 0..q {
                        let gi = g
                            .index_axis(Axis(0), i2)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap();
                        let bi = bv
                            .index_axis(Axis(0), i2)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap();
                        ga.index_axis_mut(Axis(0), i2).assign(&gi.dot(&bi.t()));
                    }
                    Self::acc(grads, *a, ga);
                }
                if self.requires(*b) {
                    let mut gb = ArrayD::<F>::zeros(bv.raw_dim());
                    for i2 in 0..q {
                        let gi = g
                            .index_axis(Axis(0), i2)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap();
                        let ai = av
                            .index_axis(Axis(0), i2)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap();
                        gb.index_axis_mut(Axis(0), i2).assign(&ai.t().dot(&gi));
                    }
                    Self::acc(grads, *b, gb);
                }
            }
            Op::Conv2d { x, w, stride } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (gx, gw) = conv2d_backward(
                    xv.view(),
                    wv.view(),
                    g.view(),
                    *stride,
                    self.requires(*x),
                    self.requires(*w),
                );
                if let Some(gx) = gx {
                    Self::acc(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    Self::acc(grads, *w, gw);
                }
            }
            Op::Upsample2x(x) => {
                if self.requires(*x) {
                    let xv = &self.nodes[x.0].value;
                    let (b, h, w, c) = shape4(xv);
                    let mut gx = ArrayD::<F>::zeros(xv.raw_dim());
                    for bi in 0..b {
                        for y in 0..2 * h {
                            for xcol in 0..2 * w {
                                for ci in 0..c {
                                    gx[[bi, y / 2, xcol / 2, ci]] =
                                        gx[[bi, y / 2, xcol / 2, ci]] + g[[bi, y, xcol, ci]];
                                }
                            }
                        }
                    }
                    Self::acc(grads, *x, gx);
                }
            }
            Op::LayerNorm { x, eps } => {
                if self.requires(*x) {
                    let xv = &self.nodes[x.0].value;
                    let yv = &self.nodes[i].value;
                    let mut gx = ArrayD::<F>::zeros(xv.raw_dim());
                    let epsf = F::cast(*eps);
                    let lanes_x = xv.rows();
                    let lanes_y = yv.rows();
                    let lanes_g = g.rows();
                    for ((lx, ly), (lg, mut lgx)) in lanes_x
                        .into_iter()
                        .zip(lanes_y)
                        .zip(lanes_g.into_iter().zip(gx.rows_mut()))
                    {
                        let n = F::from_usize(lx.len()).unwrap();
                        let mean = lx.iter().fold(F::zero(), |a, &e| a + e) / n;
                        let var = lx
                            .iter()
                            .fold(F::zero(), |a, &e| a + (e - mean) * (e - mean))
                            / n;
                        let inv = (var + epsf).sqrt().recip();
                        let gmean = lg.iter().fold(F::zero(), |a, &e| a + e) / n;
                        let gymean = lg
                            .iter()
                            .zip(ly.iter())
                            .fold(F::zero(), |a, (&ge, &ye)| a + ge * ye)
                            / n;
                        for ((gxe, &ge), &ye) in lgx.iter_mut().zip(lg.iter()).zip(ly.iter()) {
                            *gxe = (ge - gmean - ye * gymean) * inv;
                        }
                    }
                    Self::acc(grads, *x, gx);
                }
            }
            Op::Film { x, s, t } => {
                let xv = &self.nodes[x.0].value;
                let sv = &self.nodes[s.0].value;
                let b = xv.shape()[0];
                let c = *xv.shape().last().unwrap();
                if self.requires(*x) {
                    let mut gx = g.clone();
                    for bi in 0..b {
                        let srow: Vec<F> = sv.index_axis(Axis(0), bi).iter().cloned().collect();
                        for mut lane in gx.index_axis_mut(Axis(0), bi).rows_mut() {
                            for (ci, e) in lane.iter_mut().enumerate() {
                                *e = *e * (F::one() + srow[ci]);
                            }
                        }
                    }
                    Self::acc(grads, *x, gx);
                }
                if self.requires(*s) {
                    let mut gs = ArrayD::<F>::zeros(IxDyn(&[b, c]));
                    for bi in 0..b {
                        let gb = g.index_axis(Axis(0), bi);
                        let xb = xv.index_axis(Axis(0), bi);
                        let mut acc = vec![F::zero(); c];
                        for (lg, lx) in gb.rows().into_iter().zip(xb.rows()) {
                            for (ci, (&ge, &xe)) in lg.iter().zip(lx.iter()).enumerate() {
                                acc[ci] = acc[ci] + ge * xe;
                            }
                        }
                        for (ci, v) in acc.into_iter().enumerate() {
                            gs[[bi, ci]] = v;
                        }
                    }
                    Self::acc(grads, *s, gs);
                }
                if self.requires(*t) {
                    let mut gt = ArrayD::<F>::zeros(IxDyn(&[b, c]));
                    for bi in 0..b {
                        let gb = g.index_axis(Axis(0), bi);
                        let mut acc = vec![F::zero(); c];
                        for lg in gb.rows() {
                            for (ci, &ge) in lg.iter().enumerate() {
                                acc[ci] = acc[ci] + ge;
                            }
                        }
                        for (ci, v) in acc.into_iter().enumerate() {
                            gt[[bi, ci]] = v;
                        }
                    }
                    Self::acc(grads, *t, gt);
                }
            }
            Op::Silu(x) => {
                if self.requires(*x) {
                    let xv = &self.nodes[x.0].value;
                    let mut gx = g.clone();
                    ndarray::Zip::from(&mut gx).and(xv).for_each(|ge, &xe| {
                        let s = sigmoid(xe);
                        *ge = *ge * s * (F::one() + xe * (F::one() - s));
                    });
                    Self::acc(grads, *x, gx);
                }
            }
            Op::SoftmaxLast(x) => {
                if self.requires(*x) {
                    let yv = &self.nodes[i].value;
                    let mut gx = ArrayD::<F>::zeros(yv.raw_dim());
                    for ((ly, lg), mut lgx) in yv
                        .rows()
                        .into_iter()
                        .zip(g.rows())
                        .zip(gx.rows_mut())
                    {
                        let dot = ly
                            .iter()
                            .zip(lg.iter())
                            .fold(F::zero(), |a, (&ye, &ge)| a + ye * ge);
                        for ((gxe, &ye), &ge) in lgx.iter_mut().zip(ly.iter()).zip(lg.iter()) {
                            *gxe = ye * (ge - dot);
                        }
                    }
                    Self::acc(grads, *x, gx);
                }
            }
            Op::Permute(x, perm) => {
                if self.requires(*x) {
                    let mut inv = vec![0usize; perm.len()];
                    for (to, &from) in perm.iter().enumerate() {
                        inv[from] = to;
                    }
                    let gx = g
                        .view()
                        .permuted_axes(IxDyn(&inv))
                        .as_standard_layout()
                        .to_owned();
                    Self::acc(grads, *x, gx);
                }
            }
            Op::Reshape(x) => {
                if self.requires(*x) {
                    let shape = self.nodes[x.0].value.raw_dim();
                    let gx = g
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order(shape)
                        .unwrap();
                    Self::acc(grads, *x, gx);
                }
            }
            Op::Concat { a, b, axis } => {
                let na = self.nodes[a.0].value.shape()[*axis];
                if self.requires(*a) {
                    let ga = g
                        .slice_axis(Axis(*axis), Slice::from(0..na))
                        .to_owned();
                    Self::acc(grads, *a, ga);
                }
                if self.requires(*b) {
                    let gb = g
                        .slice_axis(Axis(*axis), Slice::from(na..))
                        .to_owned();
                    Self::acc(grads, *b, gb);
                }
            }
            Op::MeanAll(x) => {
                if self.requires(*x) {
                    let xv = &self.nodes[x.0].value;
                    let n = F::from_usize(xv.len()).unwrap();
                    let gs = *g.first().unwrap() / n;
                    Self::acc(grads, *x, ArrayD::from_elem(xv.raw_dim(), gs));
                }
            }
        }
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    (F::one() + (-x).exp()).recip()
}

fn shape4<F: Scalar>(x: &ArrayD<F>) -> (usize, usize, usize, usize) {
    assert_eq!(x.ndim(), 4, "expected rank-4 tensor");
    (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3])
}

fn conv_out(h: usize, k: usize, stride: usize) -> usize {
    let pad = k / 2;
    (h + 2 * pad - k) / stride + 1
}

fn im2col<F: Scalar>(x: ArrayViewD<'_, F>, kh: usize, kw: usize, stride: usize) -> ndarray::Array2<F> {
    let (b, h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ph, pw) = (kh / 2, kw / 2);
    let oh = conv_out(h, kh, stride);
    let ow = conv_out(w, kw, stride);
    let xs = x.as_standard_layout();
    let xsl = xs.as_slice().unwrap();
    let mut cols = ndarray::Array2::<F>::zeros((b * oh * ow, kh * kw * cin));
    let cslice = cols.as_slice_mut().unwrap();
    let row_len = kh * kw * cin;
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * row_len;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + iy as usize) * w + ix as usize) * cin;
                        let dst = row + (ky * kw + kx) * cin;
                        cslice[dst..dst + cin].copy_from_slice(&xsl[src..src + cin]);
                    }
                }
            }
        }
    }
    cols
}

fn conv2d_forward<F: Scalar>(
    x: ArrayViewD<'_, F>,
    w: ArrayViewD<'_, F>,
    stride: usize,
) -> ArrayD<F> {
    let (b, h, wid, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, wcin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, wcin, "conv channel mismatch");
    assert!(kh % 2 == 1 && kw % 2 == 1, "odd kernels only");
    let oh = conv_out(h, kh, stride);
    let ow = conv_out(wid, kw, stride);
    let cols = im2col(x, kh, kw, stride);
    let wmat = w
        .to_shape((kh * kw * cin, cout))
        .expect("conv weight reshape");
    let out = cols.dot(&wmat);
    out.into_shape_with_order(IxDyn(&[b, oh, ow, cout])).unwrap()
}

fn conv2d_backward<F: Scalar>(
    x: ArrayViewD<'_, F>,
    w: ArrayViewD<'_, F>,
    g: ArrayViewD<'_, F>,
    stride: usize,
    need_gx: bool,
    need_gw: bool,
) -> (Option<ArrayD<F>>, Option<ArrayD<F>>) {
    let (b, h, wid, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, _, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (ph, pw) = (kh / 2, kw / 2);
    let oh = conv_out(h, kh, stride);
    let ow = conv_out(wid, kw, stride);
    let gmat = g
        .to_shape((b * oh * ow, cout))
        .expect("conv grad reshape")
        .to_owned();
    let gw = if need_gw {
        let cols = im2col(x, kh, kw, stride);
        let gwmat = cols.t().dot(&gmat);
        Some(
            gwmat
                .into_shape_with_order(IxDyn(&[kh, kw, cin, cout]))
                .unwrap(),
        )
    } else {
        None
    };
    let gx = if need_gx {
        let wmat = w.to_shape((kh * kw * cin, cout)).unwrap();
        let gcols = gmat.dot(&wmat.t());
        let gcs = gcols.as_slice().unwrap();
        let mut gx = ArrayD::<F>::zeros(IxDyn(&[b, h, wid, cin]));
        let gxs = gx.as_slice_mut().unwrap();
        let row_len = kh * kw * cin;
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((bi * oh + oy) * ow + ox) * row_len;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pw as isize;
                            if ix < 0 || ix >= wid as isize {
                                continue;
                            }
                            let dst = ((bi * h + iy as usize) * wid + ix as usize) * cin;
                            let src = row + (ky * kw + kx) * cin;
                            for ci in 0..cin {
                                gxs[dst + ci] = gxs[dst + ci] + gcs[src + ci];
                            }
                        }
                    }
                }
            }
        }
        Some(gx)
    } else {
        None
    };
    (gx, gw)
}
