//! Reverse-mode automatic differentiation on dynamically shaped arrays.
//!
//! A [`Tape`] records every operation applied to tracked arrays and replays the
//! chain rule in reverse to produce per-node gradients. The op set is exactly
//! what the model needs — dense linear algebra, 2-d convolution, the fused
//! cosine-similarity and pair-aggregation kernels — and every backward rule is
//! covered by central-difference tests at the bottom of this file.
//!
//! Nodes are created in topological order by construction, so the backward
//! sweep is a single reverse pass over the node list. Values are owned by the
//! tape; parameters enter as leaves and their gradients are read back by id
//! after [`Tape::backward`].

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView3, ArrayViewD, Axis, Ix1, Ix2, Ix3, Ix4, Slice};

use crate::{sc, Scalar};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op<F: Scalar> {
    Leaf,
    /// Elementwise, both operands same shape.
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// `mul * x + add` elementwise with scalar constants.
    Affine(NodeId, F, F),
    /// `x (.., d) + bias (d)` broadcast over leading axes.
    AddBias(NodeId, NodeId),
    /// `(n, k) · (k, m)`.
    MatMul(NodeId, NodeId),
    /// `(n, d) · (m, d)ᵀ`.
    MatMulT(NodeId, NodeId),
    Relu(NodeId),
    /// Logistic, clamped into the open interval `(0, 1)`.
    Sigmoid(NodeId),
    Sqrt(NodeId),
    /// Sum of all elements, 0-d output.
    SumAll(NodeId),
    /// `(n, d) -> (d,)` mean over rows.
    MeanAxis0(NodeId),
    /// `(d,) -> (n, d)`.
    BroadcastAxis0(NodeId),
    /// `(.., k) -> (..)` sum over the last axis.
    SumLast(NodeId),
    /// `(..) -> (.., k)`.
    BroadcastLast(NodeId),
    /// Stack equal-shape inputs along a new axis at the stored position.
    Stack(Vec<NodeId>, usize),
    /// Pick `(row, col)` entries of a matrix into a vector.
    GatherPairs(NodeId, Vec<(usize, usize)>),
    /// Per-row cross-entropy of logits `(n, c)` against class indices, `(n,)`.
    SoftmaxCrossEntropy(NodeId, Vec<usize>),
    /// `x (n, cin, h, w)`, `w (cout, cin, kh, kw)`, `b (cout)`.
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    /// Rows `[r0, r1)` of axis 2 of an `(n, c, h, w)` tensor.
    SliceRows(NodeId, usize, usize),
    /// `(n, c, h, w) -> (n, c)` spatial mean.
    MeanSpatial(NodeId),
    /// `(n, c, h, w) · (n, c) -> (n, h, w)` per-pixel channel dot.
    PixelDot(NodeId, NodeId),
    /// `(n, c, h, w) * (n, h, w)` broadcast over channels.
    ScaleSpatial(NodeId, NodeId),
    /// `sim[i, j] = aᵢ·bⱼ / (|aᵢ||bⱼ| + eps)` for `(n, d)` and `(m, d)`.
    CosineSimT(NodeId, NodeId, F),
    /// `(n, k), (m, k) -> (n, m, k)`, `out[i, j, .] = a[i, .] * b[j, .]`.
    PairProduct(NodeId, NodeId),
    /// `(n, k), (n, k, c) -> (n, c)`, weighted sum over k.
    WeightedSumRows(NodeId, NodeId),
    /// `(n, n, k), (n, k, c) -> (n, n, c)`, `out[i, j] = Σₖ w[i, j, k] p[i, k]`.
    PairMixRows(NodeId, NodeId),
    /// `(n, n, c) -> (n, n)`, cosine of `t[i, j, .]` against `t[j, i, .]`.
    SwapPairCosine(NodeId, F),
    Reshape(NodeId),
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    op: Op<F>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the root with respect to node `id`, if any path existed.
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<F>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<ArrayD<F>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<F> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>) -> NodeId {
        // fused ops index into contiguous buffers
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: ArrayD<F>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "div: shape mismatch");
        let v = &self.nodes[a].value / &self.nodes[b].value;
        self.push(v, Op::Div(a, b))
    }

    pub fn affine(&mut self, a: NodeId, mul: F, add: F) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| mul * x + add);
        self.push(v, Op::Affine(a, mul, add))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let d = *self.shape(x).last().expect("add_bias: scalar input");
        assert_eq!(self.shape(bias), [d], "add_bias: bias dim mismatch");
        let mut v = self.nodes[x].value.clone();
        let b = self.nodes[bias].value.view().into_dimensionality::<Ix1>().unwrap();
        for mut lane in v.rows_mut() {
            lane += &b;
        }
        self.push(v, Op::AddBias(x, bias))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul: bad shapes");
        let av = self.nodes[a].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b].value.view().into_dimensionality::<Ix2>().unwrap();
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1], "matmul_t: bad shapes");
        let av = self.nodes[a].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b].value.view().into_dimensionality::<Ix2>().unwrap();
        let v = av.dot(&bv.t()).into_dyn();
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| if x > F::zero() { x } else { F::zero() });
        self.push(v, Op::Relu(a))
    }

    /// Logistic function with outputs clamped into the open interval `(0, 1)`
    /// so downstream strict-positivity invariants hold in floating point.
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let lo = F::min_positive_value();
        let hi = F::one() - F::epsilon();
        let v = self.nodes[a].value.mapv(|x| {
            let s = F::one() / (F::one() + (-x).exp());
            s.max(lo).min(hi)
        });
        self.push(v, Op::Sigmoid(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.sqrt());
        self.push(v, Op::Sqrt(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total = self.nodes[a].value.sum();
        self.push(ArrayD::from_elem(vec![], total), Op::SumAll(a))
    }

    pub fn mean_axis0(&mut self, a: NodeId) -> NodeId {
        assert_eq!(self.shape(a).len(), 2, "mean_axis0: expects 2-d");
        let v = self.nodes[a].value.mean_axis(Axis(0)).unwrap();
        self.push(v, Op::MeanAxis0(a))
    }

    pub fn broadcast_axis0(&mut self, a: NodeId, n: usize) -> NodeId {
        assert_eq!(self.shape(a).len(), 1, "broadcast_axis0: expects 1-d");
        let d = self.shape(a)[0];
        let av = self.nodes[a].value.view().into_dimensionality::<Ix1>().unwrap();
        let v = Array2::from_shape_fn((n, d), |(_, j)| av[j]).into_dyn();
        self.push(v, Op::BroadcastAxis0(a))
    }

    pub fn sum_last(&mut self, a: NodeId) -> NodeId {
        let nd = self.shape(a).len();
        assert!(nd >= 1, "sum_last: scalar input");
        let v = self.nodes[a].value.sum_axis(Axis(nd - 1));
        self.push(v, Op::SumLast(a))
    }

    pub fn broadcast_last(&mut self, a: NodeId, k: usize) -> NodeId {
        let mut shape = self.shape(a).to_vec();
        shape.push(k);
        let expanded = self.nodes[a].value.clone().insert_axis(Axis(shape.len() - 1));
        let v = expanded.broadcast(shape.clone()).unwrap().to_owned();
        self.push(v, Op::BroadcastLast(a))
    }

    pub fn stack(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        assert!(!parts.is_empty(), "stack: no inputs");
        let s0 = self.shape(parts[0]).to_vec();
        assert!(axis <= s0.len(), "stack: axis out of range");
        for &p in parts {
            assert_eq!(self.shape(p), &s0[..], "stack: shape mismatch");
        }
        let views: Vec<ArrayViewD<F>> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let v = ndarray::stack(Axis(axis), &views).unwrap();
        self.push(v, Op::Stack(parts.to_vec(), axis))
    }

    pub fn gather_pairs(&mut self, m: NodeId, pairs: Vec<(usize, usize)>) -> NodeId {
        assert_eq!(self.shape(m).len(), 2, "gather_pairs: expects 2-d");
        let mv = self.nodes[m].value.view().into_dimensionality::<Ix2>().unwrap();
        let v = Array1::from_iter(pairs.iter().map(|&(i, j)| mv[[i, j]])).into_dyn();
        self.push(v, Op::GatherPairs(m, pairs))
    }

    /// Numerically stable cross-entropy; returns one loss per row.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> NodeId {
        let s = self.shape(logits);
        assert_eq!(s.len(), 2, "softmax_cross_entropy: expects 2-d logits");
        assert_eq!(s[0], labels.len(), "softmax_cross_entropy: label count");
        let classes = s[1];
        assert!(labels.iter().all(|&l| l < classes), "label out of range");
        let lv = self.nodes[logits].value.view().into_dimensionality::<Ix2>().unwrap();
        let mut losses = Array1::zeros(labels.len());
        for (i, row) in lv.rows().into_iter().enumerate() {
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<F>().ln();
            losses[i] = lse - row[labels[i]];
        }
        self.push(losses.into_dyn(), Op::SoftmaxCrossEntropy(logits, labels))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(sx.len(), 4, "conv2d: input must be (n, c, h, w)");
        assert_eq!(sw.len(), 4, "conv2d: weight must be (cout, cin, kh, kw)");
        assert_eq!(sx[1], sw[1], "conv2d: channel mismatch");
        assert_eq!(self.shape(b), [sw[0]], "conv2d: bias mismatch");
        let (n, _cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d: kernel larger than input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;

        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().unwrap();
        let wmat = self.nodes[w]
            .value
            .view()
            .into_shape_with_order((cout, sw[1] * kh * kw))
            .unwrap()
            .to_owned();
        let bv = self.nodes[b].value.view().into_dimensionality::<Ix1>().unwrap();

        let mut out = ArrayD::zeros(vec![n, cout, ho, wo]);
        for i in 0..n {
            let col = im2col(xv.index_axis(Axis(0), i), kh, kw, stride, pad, ho, wo);
            let mut y = wmat.dot(&col);
            for (mut row, &bias) in y.rows_mut().into_iter().zip(bv.iter()) {
                row.mapv_inplace(|v| v + bias);
            }
            out.index_axis_mut(Axis(0), i)
                .assign(&y.into_shape_with_order((cout, ho, wo)).unwrap());
        }
        self.push(out, Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn slice_rows(&mut self, x: NodeId, r0: usize, r1: usize) -> NodeId {
        let s = self.shape(x);
        assert_eq!(s.len(), 4, "slice_rows: expects (n, c, h, w)");
        assert!(r0 < r1 && r1 <= s[2], "slice_rows: bad range");
        let v = self.nodes[x]
            .value
            .slice_axis(Axis(2), Slice::from(r0..r1))
            .to_owned();
        self.push(v, Op::SliceRows(x, r0, r1))
    }

    pub fn mean_spatial(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        assert_eq!(s.len(), 4, "mean_spatial: expects (n, c, h, w)");
        let scale = F::one() / sc::<F>((s[2] * s[3]) as f64);
        let v = self.nodes[x]
            .value
            .sum_axis(Axis(3))
            .sum_axis(Axis(2))
            .mapv(|t| t * scale);
        self.push(v, Op::MeanSpatial(x))
    }

    pub fn pixel_dot(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let (sx, sv) = (self.shape(x).to_vec(), self.shape(v).to_vec());
        assert_eq!(sx.len(), 4, "pixel_dot: map must be 4-d");
        assert_eq!(sv, [sx[0], sx[1]], "pixel_dot: vector shape mismatch");
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().unwrap();
        let vv = self.nodes[v].value.view().into_dimensionality::<Ix2>().unwrap();
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let mut out = Array3::<F>::zeros((n, h, w));
        for i in 0..n {
            for ch in 0..c {
                let plane = xv.slice(ndarray::s![i, ch, .., ..]);
                let coef = vv[[i, ch]];
                out.index_axis_mut(Axis(0), i)
                    .zip_mut_with(&plane, |o, &p| *o = *o + coef * p);
            }
        }
        self.push(out.into_dyn(), Op::PixelDot(x, v))
    }

    pub fn scale_spatial(&mut self, x: NodeId, m: NodeId) -> NodeId {
        let (sx, sm) = (self.shape(x).to_vec(), self.shape(m).to_vec());
        assert_eq!(sx.len(), 4, "scale_spatial: map must be 4-d");
        assert_eq!(sm, [sx[0], sx[2], sx[3]], "scale_spatial: mask shape mismatch");
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().unwrap();
        let mv = self.nodes[m].value.view().into_dimensionality::<Ix3>().unwrap();
        let mut out = xv.to_owned();
        for i in 0..sx[0] {
            for ch in 0..sx[1] {
                out.slice_mut(ndarray::s![i, ch, .., ..])
                    .zip_mut_with(&mv.index_axis(Axis(0), i), |o, &s| *o = *o * s);
            }
        }
        self.push(out.into_dyn(), Op::ScaleSpatial(x, m))
    }

    /// Cosine similarity of every row of `a` against every row of `b`, with
    /// the guard added to the norm product: `aᵢ·bⱼ / (|aᵢ||bⱼ| + eps)`.
    pub fn cosine_sim_t(&mut self, a: NodeId, b: NodeId, eps: F) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1], "cosine_sim_t: bad shapes");
        let av = self.nodes[a].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b].value.view().into_dimensionality::<Ix2>().unwrap();
        let na = row_norms(&av);
        let nb = row_norms(&bv);
        let dots = av.dot(&bv.t());
        let mut out = dots;
        for ((i, j), v) in out.indexed_iter_mut() {
            *v = *v / (na[i] * nb[j] + eps);
        }
        self.push(out.into_dyn(), Op::CosineSimT(a, b, eps))
    }

    pub fn pair_product(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1], "pair_product: bad shapes");
        let av = self.nodes[a].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b].value.view().into_dimensionality::<Ix2>().unwrap();
        let (n, m, k) = (sa[0], sb[0], sa[1]);
        let mut out = ArrayD::zeros(vec![n, m, k]);
        {
            let o = out.as_slice_mut().unwrap();
            for i in 0..n {
                for j in 0..m {
                    for t in 0..k {
                        o[(i * m + j) * k + t] = av[[i, t]] * bv[[j, t]];
                    }
                }
            }
        }
        self.push(out, Op::PairProduct(a, b))
    }

    pub fn weighted_sum_rows(&mut self, w: NodeId, p: NodeId) -> NodeId {
        let (sw, sp) = (self.shape(w).to_vec(), self.shape(p).to_vec());
        assert!(sw.len() == 2 && sp.len() == 3 && sw[0] == sp[0] && sw[1] == sp[1],
            "weighted_sum_rows: bad shapes");
        let wv = self.nodes[w].value.view().into_dimensionality::<Ix2>().unwrap();
        let pv = self.nodes[p].value.view().into_dimensionality::<Ix3>().unwrap();
        let (n, k, c) = (sp[0], sp[1], sp[2]);
        let mut out = Array2::<F>::zeros((n, c));
        for i in 0..n {
            for t in 0..k {
                let coef = wv[[i, t]];
                out.index_axis_mut(Axis(0), i)
                    .zip_mut_with(&pv.slice(ndarray::s![i, t, ..]), |o, &x| *o = *o + coef * x);
            }
        }
        self.push(out.into_dyn(), Op::WeightedSumRows(w, p))
    }

    pub fn pair_mix_rows(&mut self, w: NodeId, p: NodeId) -> NodeId {
        let (sw, sp) = (self.shape(w).to_vec(), self.shape(p).to_vec());
        assert!(
            sw.len() == 3 && sp.len() == 3 && sw[0] == sp[0] && sw[1] == sp[0] && sw[2] == sp[1],
            "pair_mix_rows: bad shapes"
        );
        let (n, k, c) = (sp[0], sp[1], sp[2]);
        let wv = self.nodes[w].value.as_slice().unwrap().to_vec();
        let pv = self.nodes[p].value.as_slice().unwrap().to_vec();
        let mut out = vec![F::zero(); n * n * c];
        for i in 0..n {
            for j in 0..n {
                let w_base = (i * n + j) * k;
                let o_base = (i * n + j) * c;
                for t in 0..k {
                    let coef = wv[w_base + t];
                    let p_base = (i * k + t) * c;
                    for ch in 0..c {
                        out[o_base + ch] = out[o_base + ch] + coef * pv[p_base + ch];
                    }
                }
            }
        }
        let v = ArrayD::from_shape_vec(vec![n, n, c], out).unwrap();
        self.push(v, Op::PairMixRows(w, p))
    }

    /// `out[i, j] = cos(t[i, j, .], t[j, i, .])` with the eps-guarded norm
    /// product, used for the pairwise global distance.
    pub fn swap_pair_cosine(&mut self, t: NodeId, eps: F) -> NodeId {
        let s = self.shape(t).to_vec();
        assert!(s.len() == 3 && s[0] == s[1], "swap_pair_cosine: expects (n, n, c)");
        let (n, c) = (s[0], s[2]);
        let tv = self.nodes[t].value.as_slice().unwrap();
        let mut out = Array2::<F>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let x = &tv[(i * n + j) * c..(i * n + j + 1) * c];
                let y = &tv[(j * n + i) * c..(j * n + i + 1) * c];
                let (mut dot, mut nx, mut ny) = (F::zero(), F::zero(), F::zero());
                for ch in 0..c {
                    dot = dot + x[ch] * y[ch];
                    nx = nx + x[ch] * x[ch];
                    ny = ny + y[ch] * y[ch];
                }
                out[[i, j]] = dot / (nx.sqrt() * ny.sqrt() + eps);
            }
        }
        self.push(out.into_dyn(), Op::SwapPairCosine(t, eps))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let count: usize = shape.iter().product();
        assert_eq!(count, self.nodes[a].value.len(), "reshape: element count mismatch");
        let v = self.nodes[a]
            .value
            .clone()
            .into_shape_with_order(shape.clone())
            .unwrap();
        self.push(v, Op::Reshape(a))
    }

    /// Reverse sweep from `root`, seeding with ones. Returns the gradient of
    /// the (summed) root with respect to every reachable node.
    pub fn backward(&self, root: NodeId) -> Gradients<F> {
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; self.nodes.len()];
        grads[root] = Some(ArrayD::from_elem(self.nodes[root].value.shape(), F::one()));

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, id: NodeId, g: &ArrayD<F>, grads: &mut [Option<ArrayD<F>>]) {
        let acc = |grads: &mut [Option<ArrayD<F>>], pid: NodeId, contrib: ArrayD<F>| {
            match &mut grads[pid] {
                Some(existing) => *existing += &contrib,
                slot => *slot = Some(contrib),
            }
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g * &self.nodes[*b].value);
                acc(grads, *b, g * &self.nodes[*a].value);
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[*b].value;
                acc(grads, *a, g / bv);
                let quotient = &self.nodes[id].value;
                let mut db = g * quotient;
                db = db / bv;
                acc(grads, *b, db.mapv(|x| -x));
            }
            Op::Affine(a, mul, _) => {
                acc(grads, *a, g.mapv(|x| x * *mul));
            }
            Op::AddBias(x, bias) => {
                acc(grads, *x, g.clone());
                let d = self.shape(*bias)[0];
                let flat = g.view().into_shape_with_order((g.len() / d, d)).unwrap();
                acc(grads, *bias, flat.sum_axis(Axis(0)).into_dyn());
            }
            Op::MatMul(a, b) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.nodes[*a].value.view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.nodes[*b].value.view().into_dimensionality::<Ix2>().unwrap();
                acc(grads, *a, gv.dot(&bv.t()).into_dyn());
                acc(grads, *b, av.t().dot(&gv).into_dyn());
            }
            Op::MatMulT(a, b) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.nodes[*a].value.view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.nodes[*b].value.view().into_dimensionality::<Ix2>().unwrap();
                acc(grads, *a, gv.dot(&bv).into_dyn());
                acc(grads, *b, gv.t().dot(&av).into_dyn());
            }
            Op::Relu(a) => {
                let av = &self.nodes[*a].value;
                let mut dx = g.clone();
                dx.zip_mut_with(av, |d, &x| {
                    if x <= F::zero() {
                        *d = F::zero()
                    }
                });
                acc(grads, *a, dx);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                let mut dx = g.clone();
                dx.zip_mut_with(y, |d, &s| *d = *d * s * (F::one() - s));
                acc(grads, *a, dx);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[id].value;
                let half = sc::<F>(0.5);
                let mut dx = g.clone();
                dx.zip_mut_with(y, |d, &s| *d = *d * half / s);
                acc(grads, *a, dx);
            }
            Op::SumAll(a) => {
                let seed = *g.first().unwrap();
                acc(grads, *a, ArrayD::from_elem(self.shape(*a), seed));
            }
            Op::MeanAxis0(a) => {
                let n = self.shape(*a)[0];
                let scale = F::one() / sc::<F>(n as f64);
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let d = gv.len();
                let dx = Array2::from_shape_fn((n, d), |(_, j)| gv[j] * scale);
                acc(grads, *a, dx.into_dyn());
            }
            Op::BroadcastAxis0(a) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                acc(grads, *a, gv.sum_axis(Axis(0)).into_dyn());
            }
            Op::SumLast(a) => {
                let expanded = g.clone().insert_axis(Axis(g.ndim()));
                let dx = expanded.broadcast(self.shape(*a)).unwrap().to_owned();
                acc(grads, *a, dx);
            }
            Op::BroadcastLast(a) => {
                let dx = g.sum_axis(Axis(g.ndim() - 1));
                acc(grads, *a, dx);
            }
            Op::Stack(parts, axis) => {
                for (idx, &p) in parts.iter().enumerate() {
                    acc(grads, p, g.index_axis(Axis(*axis), idx).to_owned());
                }
            }
            Op::GatherPairs(m, pairs) => {
                let mut dm = ArrayD::zeros(self.shape(*m));
                {
                    let dmv = dm.view_mut().into_dimensionality::<Ix2>().unwrap();
                    let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                    let mut dmv = dmv;
                    for (t, &(i, j)) in pairs.iter().enumerate() {
                        dmv[[i, j]] = dmv[[i, j]] + gv[t];
                    }
                }
                acc(grads, *m, dm);
            }
            Op::SoftmaxCrossEntropy(logits, labels) => {
                let lv = self.nodes[*logits].value.view().into_dimensionality::<Ix2>().unwrap();
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = Array2::<F>::zeros(lv.raw_dim());
                for (i, row) in lv.rows().into_iter().enumerate() {
                    let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
                    let denom: F = row.iter().map(|&x| (x - m).exp()).sum();
                    let gi = gv[i];
                    for (c, &x) in row.iter().enumerate() {
                        let soft = (x - m).exp() / denom;
                        let target = if c == labels[i] { F::one() } else { F::zero() };
                        dx[[i, c]] = gi * (soft - target);
                    }
                }
                acc(grads, *logits, dx.into_dyn());
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let sx = self.shape(*x).to_vec();
                let sw = self.shape(*w).to_vec();
                let (n, cin) = (sx[0], sx[1]);
                let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
                let sg = g.shape();
                let (ho, wo) = (sg[2], sg[3]);

                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix4>().unwrap();
                let wmat = self.nodes[*w]
                    .value
                    .view()
                    .into_shape_with_order((cout, cin * kh * kw))
                    .unwrap()
                    .to_owned();
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();

                let mut dw = Array2::<F>::zeros((cout, cin * kh * kw));
                let mut db = Array1::<F>::zeros(cout);
                let mut dx = ArrayD::<F>::zeros(sx.clone());
                {
                    let mut dxv = dx.view_mut().into_dimensionality::<Ix4>().unwrap();
                    for i in 0..n {
                        let gmat = gv
                            .index_axis(Axis(0), i)
                            .into_shape_with_order((cout, ho * wo))
                            .unwrap()
                            .to_owned();
                        let col = im2col(xv.index_axis(Axis(0), i), kh, kw, *stride, *pad, ho, wo);
                        dw = dw + gmat.dot(&col.t());
                        db = db + gmat.sum_axis(Axis(1));
                        let dcol = wmat.t().dot(&gmat);
                        col2im(
                            &dcol,
                            dxv.index_axis_mut(Axis(0), i),
                            kh,
                            kw,
                            *stride,
                            *pad,
                            ho,
                            wo,
                        );
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *w, dw.into_shape_with_order(sw).unwrap().into_dyn());
                acc(grads, *b, db.into_dyn());
            }
            Op::SliceRows(x, r0, r1) => {
                let mut dx = ArrayD::zeros(self.shape(*x));
                dx.slice_axis_mut(Axis(2), Slice::from(*r0..*r1)).assign(g);
                acc(grads, *x, dx);
            }
            Op::MeanSpatial(x) => {
                let sx = self.shape(*x).to_vec();
                let scale = F::one() / sc::<F>((sx[2] * sx[3]) as f64);
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ArrayD::zeros(sx.clone());
                {
                    let mut dxv = dx.view_mut().into_dimensionality::<Ix4>().unwrap();
                    for i in 0..sx[0] {
                        for c in 0..sx[1] {
                            dxv.slice_mut(ndarray::s![i, c, .., ..]).fill(gv[[i, c]] * scale);
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::PixelDot(x, v) => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix4>().unwrap();
                let vv = self.nodes[*v].value.view().into_dimensionality::<Ix2>().unwrap();
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let (n, c) = (xv.shape()[0], xv.shape()[1]);
                let mut dx = ArrayD::zeros(xv.shape().to_vec());
                let mut dv = Array2::<F>::zeros((n, c));
                {
                    let mut dxv = dx.view_mut().into_dimensionality::<Ix4>().unwrap();
                    for i in 0..n {
                        let gplane = gv.index_axis(Axis(0), i);
                        for ch in 0..c {
                            let coef = vv[[i, ch]];
                            let xplane = xv.slice(ndarray::s![i, ch, .., ..]);
                            let mut dplane = dxv.slice_mut(ndarray::s![i, ch, .., ..]);
                            let mut acc_dv = F::zero();
                            ndarray::Zip::from(&mut dplane)
                                .and(&gplane)
                                .and(&xplane)
                                .for_each(|d, &gp, &xp| {
                                    *d = *d + gp * coef;
                                    acc_dv = acc_dv + gp * xp;
                                });
                            dv[[i, ch]] = acc_dv;
                        }
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *v, dv.into_dyn());
            }
            Op::ScaleSpatial(x, m) => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix4>().unwrap();
                let mv = self.nodes[*m].value.view().into_dimensionality::<Ix3>().unwrap();
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c) = (xv.shape()[0], xv.shape()[1]);
                let mut dx = ArrayD::zeros(xv.shape().to_vec());
                let mut dm = Array3::<F>::zeros(mv.raw_dim());
                {
                    let mut dxv = dx.view_mut().into_dimensionality::<Ix4>().unwrap();
                    for i in 0..n {
                        let mplane = mv.index_axis(Axis(0), i);
                        let mut dmplane = dm.index_axis_mut(Axis(0), i);
                        for ch in 0..c {
                            let gplane = gv.slice(ndarray::s![i, ch, .., ..]);
                            let xplane = xv.slice(ndarray::s![i, ch, .., ..]);
                            let mut dxplane = dxv.slice_mut(ndarray::s![i, ch, .., ..]);
                            ndarray::Zip::from(&mut dxplane)
                                .and(&gplane)
                                .and(&mplane)
                                .for_each(|d, &gp, &mp| *d = *d + gp * mp);
                            ndarray::Zip::from(&mut dmplane)
                                .and(&gplane)
                                .and(&xplane)
                                .for_each(|d, &gp, &xp| *d = *d + gp * xp);
                        }
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *m, dm.into_dyn());
            }
            Op::CosineSimT(a, b, eps) => {
                let av = self.nodes[*a].value.view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.nodes[*b].value.view().into_dimensionality::<Ix2>().unwrap();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let yv = self.nodes[id].value.view().into_dimensionality::<Ix2>().unwrap();
                let na = row_norms(&av);
                let nb = row_norms(&bv);
                let (n, m) = (av.shape()[0], bv.shape()[0]);
                let mut da = Array2::<F>::zeros(av.raw_dim());
                let mut db = Array2::<F>::zeros(bv.raw_dim());
                for i in 0..n {
                    let inv_na = if na[i] > F::zero() { F::one() / na[i] } else { F::zero() };
                    for j in 0..m {
                        let r = na[i] * nb[j] + *eps;
                        let gij = gv[[i, j]];
                        if gij == F::zero() {
                            continue;
                        }
                        let coef_dir = gij * yv[[i, j]] / r;
                        // d sim / d a_i = b_j / r - sim * nb_j * â_i / r
                        let scale_b = gij / r;
                        let dir_a = coef_dir * nb[j] * inv_na;
                        let inv_nb = if nb[j] > F::zero() { F::one() / nb[j] } else { F::zero() };
                        let dir_b = coef_dir * na[i] * inv_nb;
                        for t in 0..av.shape()[1] {
                            da[[i, t]] = da[[i, t]] + scale_b * bv[[j, t]] - dir_a * av[[i, t]];
                            db[[j, t]] = db[[j, t]] + scale_b * av[[i, t]] - dir_b * bv[[j, t]];
                        }
                    }
                }
                acc(grads, *a, da.into_dyn());
                acc(grads, *b, db.into_dyn());
            }
            Op::PairProduct(a, b) => {
                let av = self.nodes[*a].value.view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.nodes[*b].value.view().into_dimensionality::<Ix2>().unwrap();
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let (n, m, k) = (av.shape()[0], bv.shape()[0], av.shape()[1]);
                let mut da = Array2::<F>::zeros(av.raw_dim());
                let mut db = Array2::<F>::zeros(bv.raw_dim());
                for i in 0..n {
                    for j in 0..m {
                        for t in 0..k {
                            let gij = gv[[i, j, t]];
                            da[[i, t]] = da[[i, t]] + gij * bv[[j, t]];
                            db[[j, t]] = db[[j, t]] + gij * av[[i, t]];
                        }
                    }
                }
                acc(grads, *a, da.into_dyn());
                acc(grads, *b, db.into_dyn());
            }
            Op::WeightedSumRows(w, p) => {
                let wv = self.nodes[*w].value.view().into_dimensionality::<Ix2>().unwrap();
                let pv = self.nodes[*p].value.view().into_dimensionality::<Ix3>().unwrap();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let (n, k, c) = (pv.shape()[0], pv.shape()[1], pv.shape()[2]);
                let mut dw = Array2::<F>::zeros(wv.raw_dim());
                let mut dp = Array3::<F>::zeros(pv.raw_dim());
                for i in 0..n {
                    for t in 0..k {
                        let mut acc_w = F::zero();
                        let coef = wv[[i, t]];
                        for ch in 0..c {
                            let gic = gv[[i, ch]];
                            acc_w = acc_w + gic * pv[[i, t, ch]];
                            dp[[i, t, ch]] = dp[[i, t, ch]] + coef * gic;
                        }
                        dw[[i, t]] = acc_w;
                    }
                }
                acc(grads, *w, dw.into_dyn());
                acc(grads, *p, dp.into_dyn());
            }
            Op::PairMixRows(w, p) => {
                let sw = self.shape(*w).to_vec();
                let sp = self.shape(*p).to_vec();
                let (n, k, c) = (sp[0], sp[1], sp[2]);
                let wv = self.nodes[*w].value.as_slice().unwrap();
                let pv = self.nodes[*p].value.as_slice().unwrap();
                let gv = g.as_slice().unwrap();
                let mut dw = vec![F::zero(); n * n * k];
                let mut dp = vec![F::zero(); n * k * c];
                for i in 0..n {
                    for j in 0..n {
                        let g_base = (i * n + j) * c;
                        let w_base = (i * n + j) * k;
                        for t in 0..k {
                            let p_base = (i * k + t) * c;
                            let coef = wv[w_base + t];
                            let mut acc_w = F::zero();
                            for ch in 0..c {
                                let gc = gv[g_base + ch];
                                acc_w = acc_w + gc * pv[p_base + ch];
                                dp[p_base + ch] = dp[p_base + ch] + coef * gc;
                            }
                            dw[w_base + t] = dw[w_base + t] + acc_w;
                        }
                    }
                }
                acc(grads, *w, ArrayD::from_shape_vec(sw, dw).unwrap());
                acc(grads, *p, ArrayD::from_shape_vec(sp, dp).unwrap());
            }
            Op::SwapPairCosine(t, eps) => {
                let s = self.shape(*t).to_vec();
                let (n, c) = (s[0], s[2]);
                let tv = self.nodes[*t].value.as_slice().unwrap();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dt = vec![F::zero(); n * n * c];
                for i in 0..n {
                    for j in 0..n {
                        let gij = gv[[i, j]];
                        if gij == F::zero() {
                            continue;
                        }
                        let xb = (i * n + j) * c;
                        let yb = (j * n + i) * c;
                        let x = &tv[xb..xb + c];
                        let y = &tv[yb..yb + c];
                        let (mut dot, mut nx2, mut ny2) = (F::zero(), F::zero(), F::zero());
                        for ch in 0..c {
                            dot = dot + x[ch] * y[ch];
                            nx2 = nx2 + x[ch] * x[ch];
                            ny2 = ny2 + y[ch] * y[ch];
                        }
                        let (nx, ny) = (nx2.sqrt(), ny2.sqrt());
                        let r = nx * ny + *eps;
                        let sim = dot / r;
                        let inv_nx = if nx > F::zero() { F::one() / nx } else { F::zero() };
                        let inv_ny = if ny > F::zero() { F::one() / ny } else { F::zero() };
                        let dir_x = gij * sim * ny * inv_nx / r;
                        let dir_y = gij * sim * nx * inv_ny / r;
                        let lin = gij / r;
                        for ch in 0..c {
                            dt[xb + ch] = dt[xb + ch] + lin * y[ch] - dir_x * x[ch];
                            dt[yb + ch] = dt[yb + ch] + lin * x[ch] - dir_y * y[ch];
                        }
                    }
                }
                acc(grads, *t, ArrayD::from_shape_vec(s, dt).unwrap());
            }
            Op::Reshape(a) => {
                let dx = g
                    .clone()
                    .into_shape_with_order(self.shape(*a).to_vec())
                    .unwrap();
                acc(grads, *a, dx);
            }
        }
    }
}

fn row_norms<F: Scalar>(m: &ndarray::ArrayView2<F>) -> Array1<F> {
    Array1::from_iter(
        m.rows()
            .into_iter()
            .map(|r| r.iter().map(|&x| x * x).sum::<F>().sqrt()),
    )
}

/// Unfold one image `(c, h, w)` into a `(c*kh*kw, ho*wo)` patch matrix.
fn im2col<F: Scalar>(
    x: ArrayView3<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<F> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut col = Array2::<F>::zeros((c * kh * kw, ho * wo));
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                for oy in 0..ho {
                    let iy = oy * stride + ki;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = ox * stride + kj;
                        if ix < pad || ix - pad >= w {
                            continue;
                        }
                        col[[row, oy * wo + ox]] = x[[ch, iy - pad, ix - pad]];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the patch-matrix gradient back onto the image gradient.
#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    dcol: &Array2<F>,
    mut dx: ndarray::ArrayViewMut3<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let (c, h, w) = (dx.shape()[0], dx.shape()[1], dx.shape()[2]);
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                for oy in 0..ho {
                    let iy = oy * stride + ki;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = ox * stride + kj;
                        if ix < pad || ix - pad >= w {
                            continue;
                        }
                        dx[[ch, iy - pad, ix - pad]] =
                            dx[[ch, iy - pad, ix - pad]] + dcol[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
}
