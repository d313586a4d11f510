use super::params::{ParamId, ParamStore};
use crate::ddpm::LossNorm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    BroadcastRows(NodeId, NodeId),
    Relu(NodeId),
    Silu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        kernel: usize,
        cols: Vec<f64>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        cols: Vec<f64>,
    },
    Upsample2(NodeId),
    Concat(Vec<NodeId>),
    BatchMatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    Softmax(NodeId),
    Reshape(NodeId),
    Loss {
        pred: NodeId,
        target: Vec<f64>,
        norm: LossNorm,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Parameter gradients aligned with the [`ParamStore`] that fed the graph.
#[derive(Debug, Clone)]
pub struct Grads {
    per_param: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.per_param.get(id.index()).and_then(|g| g.as_deref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Option<&[f64]>)> {
        self.per_param
            .iter()
            .enumerate()
            .map(|(i, g)| (ParamId::from_index(i), g.as_deref()))
    }

    pub fn global_norm(&self) -> f64 {
        self.per_param
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.per_param.iter_mut().flatten().flat_map(|g| g.iter_mut()).for_each(|v| *v *= s);
    }

    pub fn all_finite(&self) -> bool {
        self.per_param.iter().flatten().flat_map(|g| g.iter()).all(|v| v.is_finite())
    }
}

/// `c (m x n) = a (m x k) * b (k x n)`, where `a`/`b` may be stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strided kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A reverse-mode tape. Values are computed eagerly as nodes are added;
/// [`Graph::backward`] walks the tape in reverse.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> NodeId {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn into_value(mut self, id: NodeId) -> Vec<f64> {
        std::mem::take(&mut self.nodes[id.0].value)
    }

    pub fn input(&mut self, value: Vec<f64>, shape: &[usize]) -> NodeId {
        assert_eq!(numel(shape), value.len(), "input shape {shape:?}");
        self.push(shape.to_vec(), value, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.index()] {
            return n;
        }
        let p = self.params.get(id);
        let n = self.push(p.shape.clone(), p.data.clone(), Op::Param(id.index()), true);
        self.param_nodes[id.index()] = Some(n);
        n
    }

    /// `[.., k] x [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sb.len(), 2, "matmul rhs must be 2-d");
        let k = *sa.last().unwrap();
        assert_eq!(k, sb[0], "matmul inner dims {sa:?} x {sb:?}");
        let (m, n) = (numel(&sa) / k.max(1), sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(&[a, b]);
        self.push(shape, out, Op::MatMul(a, b), ng)
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let n = self.shape(b)[0];
        assert_eq!(*self.shape(x).last().unwrap(), n);
        let bias = self.value(b).to_vec();
        let mut out = self.value(x).to_vec();
        out.chunks_mut(n).for_each(|row| row.iter_mut().zip(&bias).for_each(|(o, b)| *o += b));
        let ng = self.ng(&[x, b]);
        self.push(self.shape(x).to_vec(), out, Op::AddBias(x, b), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.ng(&[a, b]);
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(&[a, b]);
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), ng)
    }

    /// Adds `v[b, :]` to every row of batch item `b` of `x` (`[B, .., C]`).
    pub fn broadcast_rows(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let sx = self.shape(x).to_vec();
        let sv = self.shape(v).to_vec();
        let (bsz, c) = (sx[0], *sx.last().unwrap());
        assert_eq!(sv, vec![bsz, c], "broadcast_rows {sx:?} + {sv:?}");
        let per = numel(&sx) / bsz;
        let mut out = self.value(x).to_vec();
        let vv = self.value(v);
        for b in 0..bsz {
            let row = &vv[b * c..(b + 1) * c];
            out[b * per..(b + 1) * per]
                .chunks_mut(c)
                .for_each(|r| r.iter_mut().zip(row).for_each(|(o, a)| *o += a));
        }
        let ng = self.ng(&[x, v]);
        self.push(sx, out, Op::BroadcastRows(x, v), ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), ng)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).iter().map(|v| v / (1.0 + (-v).exp())).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Silu(x), ng)
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        let rows = numel(&shape) / c;
        let (g, b) = (self.value(gamma).to_vec(), self.value(beta).to_vec());
        let xv = self.value(x);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Same-length convolution along axis 1 of `[B, T, C]` with zero padding;
    /// `w` is `[kernel * C, O]` with tap-major rows.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, kernel: usize) -> NodeId {
        let sx = self.shape(x).to_vec();
        let (bsz, len, c) = (sx[0], sx[1], sx[2]);
        let o = self.shape(w)[1];
        assert_eq!(self.shape(w)[0], kernel * c, "conv1d weight rows");
        let pad = (kernel / 2) as isize;
        let xv = self.value(x);
        let kc = kernel * c;
        let mut cols = vec![0.0; bsz * len * kc];
        for bi in 0..bsz {
            for t in 0..len {
                let dst = &mut cols[(bi * len + t) * kc..(bi * len + t + 1) * kc];
                for j in 0..kernel {
                    let src = t as isize + j as isize - pad;
                    if src >= 0 && (src as usize) < len {
                        let s = (bi * len + src as usize) * c;
                        dst[j * c..(j + 1) * c].copy_from_slice(&xv[s..s + c]);
                    }
                }
            }
        }
        let mut out = vec![0.0; bsz * len * o];
        gemm(bsz * len, kc, o, &cols, false, self.value(w), false, &mut out, false);
        let bias = self.value(b);
        out.chunks_mut(o).for_each(|r| r.iter_mut().zip(bias).for_each(|(v, b)| *v += b));
        let ng = self.ng(&[x, w, b]);
        self.push(
            vec![bsz, len, o],
            out,
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                cols,
            },
            ng,
        )
    }

    /// 3x3 convolution over `[B, H, W, C]` with padding 1; `w` is `[9 * C, O]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> NodeId {
        let sx = self.shape(x).to_vec();
        let (bsz, h, wd, c) = (sx[0], sx[1], sx[2], sx[3]);
        let o = self.shape(w)[1];
        assert_eq!(self.shape(w)[0], 9 * c, "conv2d weight rows");
        let (ho, wo) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
        let cols = im2col3(self.value(x), bsz, h, wd, c, stride);
        let mut out = vec![0.0; bsz * ho * wo * o];
        gemm(bsz * ho * wo, 9 * c, o, &cols, false, self.value(w), false, &mut out, false);
        let bias = self.value(b);
        out.chunks_mut(o).for_each(|r| r.iter_mut().zip(bias).for_each(|(v, b)| *v += b));
        let ng = self.ng(&[x, w, b]);
        self.push(
            vec![bsz, ho, wo, o],
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                cols,
            },
            ng,
        )
    }

    /// Nearest-neighbour 2x upsampling of `[B, H, W, C]`.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let sx = self.shape(x).to_vec();
        let (bsz, h, w, c) = (sx[0], sx[1], sx[2], sx[3]);
        let xv = self.value(x);
        let mut out = vec![0.0; bsz * 4 * h * w * c];
        for bi in 0..bsz {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let s = ((bi * h + y / 2) * w + xx / 2) * c;
                    let d = ((bi * 2 * h + y) * 2 * w + xx) * c;
                    out[d..d + c].copy_from_slice(&xv[s..s + c]);
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(vec![bsz, 2 * h, 2 * w, c], out, Op::Upsample2(x), ng)
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let lead = {
            let s = self.shape(parts[0]);
            s[..s.len() - 1].to_vec()
        };
        let rows = numel(&lead);
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = self.shape(*p);
                assert_eq!(&s[..s.len() - 1], lead.as_slice(), "concat leading dims");
                *s.last().unwrap()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (p, &wdt) in parts.iter().zip(&widths) {
            let v = self.value(*p);
            for r in 0..rows {
                out[r * total + off..r * total + off + wdt].copy_from_slice(&v[r * wdt..(r + 1) * wdt]);
            }
            off += wdt;
        }
        let mut shape = lead;
        shape.push(total);
        let ng = self.ng(parts);
        self.push(shape, out, Op::Concat(parts.to_vec()), ng)
    }

    /// Batched `[B, m, k] x [B, k, n]`, or `x [B, n, k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        assert_eq!(sb[0], bsz);
        assert_eq!(if trans_b { sb[2] } else { sb[1] }, k, "bmm inner dims");
        let mut out = vec![0.0; bsz * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..bsz {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..],
                false,
                &bv[i * k * n..],
                trans_b,
                &mut out[i * m * n..],
                false,
            );
        }
        let ng = self.ng(&[a, b]);
        self.push(vec![bsz, m, n], out, Op::BatchMatMul { a, b, trans_b }, ng)
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            row.iter_mut().for_each(|v| {
                *v = (*v - max).exp();
                sum += *v;
            });
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let ng = self.ng(&[x]);
        self.push(shape, out, Op::Softmax(x), ng)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        assert_eq!(numel(shape), numel(self.shape(x)), "reshape");
        let out = self.value(x).to_vec();
        let ng = self.ng(&[x]);
        self.push(shape.to_vec(), out, Op::Reshape(x), ng)
    }

    /// Mean per-element residual between a constant `target` and `pred`.
    pub fn loss(&mut self, pred: NodeId, target: Vec<f64>, norm: LossNorm) -> NodeId {
        assert_eq!(target.len(), self.value(pred).len(), "loss target length");
        let v = norm.eval(&target, self.value(pred));
        let ng = self.ng(&[pred]);
        self.push(vec![1], vec![v], Op::Loss { pred, target, norm }, ng)
    }

    /// Gradients of scalar node `root` with respect to every parameter used.
    pub fn backward(&self, root: NodeId) -> Grads {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        let mut per_param = vec![None; self.params.len()];
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &dy, &mut grads, &mut per_param);
        }
        Grads { per_param }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: NodeId) -> Option<&'g mut Vec<f64>> {
        let n = &self.nodes[id.0];
        if !n.needs_grad {
            return None;
        }
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
    }

    fn backprop_node(
        &self,
        node: &Node,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
        per_param: &mut [Option<Vec<f64>>],
    ) {
        match &node.op {
            Op::Input => {}
            Op::Param(p) => {
                let g = per_param[*p].get_or_insert_with(|| vec![0.0; dy.len()]);
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = dy.len() / n.max(1);
                if let Some(da) = self.slot(grads, *a) {
                    gemm(m, n, k, dy, false, self.value(*b), true, da, true);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(k, m, n, self.value(*a), true, dy, false, db, true);
                }
            }
            Op::AddBias(x, b) => {
                add_into(self.slot(grads, *x), dy);
                if let Some(db) = self.slot(grads, *b) {
                    let n = db.len();
                    dy.chunks(n).for_each(|r| db.iter_mut().zip(r).for_each(|(g, d)| *g += d));
                }
            }
            Op::Add(a, b) => {
                add_into(self.slot(grads, *a), dy);
                add_into(self.slot(grads, *b), dy);
            }
            Op::Mul(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut()
                        .zip(dy.iter().zip(self.value(*b)))
                        .for_each(|(g, (d, v))| *g += d * v);
                }
                if let Some(db) = self.slot(grads, *b) {
                    db.iter_mut()
                        .zip(dy.iter().zip(self.value(*a)))
                        .for_each(|(g, (d, v))| *g += d * v);
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(dy).for_each(|(g, d)| *g += d * s);
                }
            }
            Op::BroadcastRows(x, v) => {
                add_into(self.slot(grads, *x), dy);
                if let Some(dv) = self.slot(grads, *v) {
                    let sv = self.shape(*v);
                    let (bsz, c) = (sv[0], sv[1]);
                    let per = dy.len() / bsz;
                    for b in 0..bsz {
                        for r in dy[b * per..(b + 1) * per].chunks(c) {
                            dv[b * c..(b + 1) * c].iter_mut().zip(r).for_each(|(g, d)| *g += d);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut()
                        .zip(dy.iter().zip(self.value(*x)))
                        .for_each(|(g, (d, v))| {
                            if *v > 0.0 {
                                *g += d
                            }
                        });
                }
            }
            Op::Silu(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut()
                        .zip(dy.iter().zip(self.value(*x)))
                        .for_each(|(g, (d, v))| {
                            let s = 1.0 / (1.0 + (-v).exp());
                            *g += d * s * (1.0 + v * (1.0 - s));
                        });
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = *node.shape.last().unwrap();
                let g = self.value(*gamma);
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (r, h) in dy.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += r[j] * h[j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    dy.chunks(c).for_each(|r| db.iter_mut().zip(r).for_each(|(g, d)| *g += d));
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let mut dh = vec![0.0; c];
                    for (r, ((dyr, hr), rs)) in dy.chunks(c).zip(xhat.chunks(c)).zip(rstd).enumerate() {
                        for j in 0..c {
                            dh[j] = dyr[j] * g[j];
                        }
                        let m1 = dh.iter().sum::<f64>() / c as f64;
                        let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[r * c + j] += rs * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                cols,
            } => {
                let sx = self.shape(*x);
                let (bsz, len, c) = (sx[0], sx[1], sx[2]);
                let o = node.shape[2];
                let kc = kernel * c;
                let rows = bsz * len;
                if let Some(dw) = self.slot(grads, *w) {
                    gemm(kc, rows, o, cols, true, dy, false, dw, true);
                }
                if let Some(db) = self.slot(grads, *b) {
                    dy.chunks(o).for_each(|r| db.iter_mut().zip(r).for_each(|(g, d)| *g += d));
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let mut dcols = vec![0.0; rows * kc];
                    gemm(rows, o, kc, dy, false, self.value(*w), true, &mut dcols, false);
                    let pad = (kernel / 2) as isize;
                    for bi in 0..bsz {
                        for t in 0..len {
                            let src = &dcols[(bi * len + t) * kc..(bi * len + t + 1) * kc];
                            for j in 0..*kernel {
                                let s = t as isize + j as isize - pad;
                                if s >= 0 && (s as usize) < len {
                                    let d = (bi * len + s as usize) * c;
                                    dx[d..d + c]
                                        .iter_mut()
                                        .zip(&src[j * c..(j + 1) * c])
                                        .for_each(|(g, v)| *g += v);
                                }
                            }
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                cols,
            } => {
                let sx = self.shape(*x);
                let (bsz, h, wd, c) = (sx[0], sx[1], sx[2], sx[3]);
                let (ho, wo, o) = (node.shape[1], node.shape[2], node.shape[3]);
                let rows = bsz * ho * wo;
                if let Some(dw) = self.slot(grads, *w) {
                    gemm(9 * c, rows, o, cols, true, dy, false, dw, true);
                }
                if let Some(db) = self.slot(grads, *b) {
                    dy.chunks(o).for_each(|r| db.iter_mut().zip(r).for_each(|(g, d)| *g += d));
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let mut dcols = vec![0.0; rows * 9 * c];
                    gemm(rows, o, 9 * c, dy, false, self.value(*w), true, &mut dcols, false);
                    col2im3(&dcols, dx, bsz, h, wd, c, *stride);
                }
            }
            Op::Upsample2(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let sx = self.shape(*x);
                    let (bsz, h, w, c) = (sx[0], sx[1], sx[2], sx[3]);
                    for bi in 0..bsz {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                let s = ((bi * h + y / 2) * w + xx / 2) * c;
                                let d = ((bi * 2 * h + y) * 2 * w + xx) * c;
                                dx[s..s + c].iter_mut().zip(&dy[d..d + c]).for_each(|(g, v)| *g += v);
                            }
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let total = *node.shape.last().unwrap();
                let rows = dy.len() / total;
                let mut off = 0;
                for p in parts {
                    let wdt = *self.shape(*p).last().unwrap();
                    if let Some(dp) = self.slot(grads, *p) {
                        for r in 0..rows {
                            dp[r * wdt..(r + 1) * wdt]
                                .iter_mut()
                                .zip(&dy[r * total + off..r * total + off + wdt])
                                .for_each(|(g, v)| *g += v);
                        }
                    }
                    off += wdt;
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.shape[2];
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = self.slot(grads, *a) {
                    for i in 0..bsz {
                        // da = dy * b^T, or dy * b when b is stored as [n, k]
                        gemm(m, n, k, &dy[i * m * n..], false, &bv[i * k * n..], !trans_b, &mut da[i * m * k..], true);
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for i in 0..bsz {
                        if *trans_b {
                            gemm(n, m, k, &dy[i * m * n..], true, &av[i * m * k..], false, &mut db[i * n * k..], true);
                        } else {
                            gemm(k, m, n, &av[i * m * k..], true, &dy[i * m * n..], false, &mut db[i * k * n..], true);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let c = *node.shape.last().unwrap();
                    for ((g, d), y) in dx.chunks_mut(c).zip(dy.chunks(c)).zip(node.value.chunks(c)) {
                        let dot: f64 = d.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            g[j] += y[j] * (d[j] - dot);
                        }
                    }
                }
            }
            Op::Reshape(x) => add_into(self.slot(grads, *x), dy),
            Op::Loss { pred, target, norm } => {
                if let Some(dp) = self.slot(grads, *pred) {
                    let n = target.len() as f64;
                    let p = self.value(*pred);
                    for ((g, p), t) in dp.iter_mut().zip(p).zip(target) {
                        let r = p - t;
                        *g += dy[0]
                            * match norm {
                                LossNorm::SquaredL2 => 2.0 * r / n,
                                LossNorm::L1 => r.signum() / n,
                            };
                    }
                }
            }
        }
    }
}

fn add_into(dst: Option<&mut Vec<f64>>, src: &[f64]) {
    if let Some(d) = dst {
        d.iter_mut().zip(src).for_each(|(g, v)| *g += v);
    }
}

fn im2col3(x: &[f64], bsz: usize, h: usize, w: usize, c: usize, stride: usize) -> Vec<f64> {
    let (ho, wo) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    let kc = 9 * c;
    let mut cols = vec![0.0; bsz * ho * wo * kc];
    for bi in 0..bsz {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * kc;
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let s = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let d = row + (ky * 3 + kx) * c;
                        cols[d..d + c].copy_from_slice(&x[s..s + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im3(cols: &[f64], dx: &mut [f64], bsz: usize, h: usize, w: usize, c: usize, stride: usize) {
    let (ho, wo) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    let kc = 9 * c;
    for bi in 0..bsz {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * kc;
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let d = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let s = row + (ky * 3 + kx) * c;
                        dx[d..d + c].iter_mut().zip(&cols[s..s + c]).for_each(|(g, v)| *g += v);
                    }
                }
            }
        }
    }
}
