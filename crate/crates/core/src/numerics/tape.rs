//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Operations are recorded eagerly: each tape method computes the forward
//! value immediately and pushes a node describing how to push gradients back
//! to its inputs. The op set is exactly what the policy stack needs: dense
//! affine maps, 1D/2D convolution, pooling, softmax, elementwise maps,
//! concatenation, and layer normalization.

use super::tensor::{matmul_into, matvec, Tensor};

pub type NodeId = usize;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    /// a[m,k] * b[k,n]
    MatMul(NodeId, NodeId),
    /// w[m,k] * x[k]
    MatVec(NodeId, NodeId),
    /// a[n,m] + bias[m] broadcast over rows
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    /// x * ln(x) elementwise, with 0 ln 0 = 0
    XLogX(NodeId),
    SoftmaxVec {
        x: NodeId,
        mask: Option<Vec<bool>>,
    },
    SoftmaxRows(NodeId),
    SumAll(NodeId),
    /// [n,m] -> [n], mean over each row
    MeanCols(NodeId),
    /// [n,m] -> [m], max over rows; argmax rows cached for backward
    MaxRows {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        kernel: usize,
        cols: Vec<f64>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        kernel: usize,
        cols: Vec<f64>,
    },
    /// adaptive average pooling [c,l] -> [c,out_len]
    AvgPoolSeg1d {
        x: NodeId,
        out_len: usize,
    },
    /// normalize over every element: (x - mean) / sqrt(var + eps)
    LayerNormAll {
        x: NodeId,
        inv_std: f64,
    },
    /// y[c,i] = gamma[c] * x[c,i] + beta[c]
    ChannelScaleShift {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Concat0(Vec<NodeId>),
    Slice0 {
        x: NodeId,
        start: usize,
    },
    /// a * s with s a single-element node
    MulScalar(NodeId, NodeId),
    /// y[i,j] = s[i] + t[j]
    OuterSum(NodeId, NodeId),
    /// nearest-neighbor repeat along the length axis
    Upsample1d {
        x: NodeId,
        factor: usize,
    },
    Reshape(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::MatMul(..) => "matmul",
            Op::MatVec(..) => "matvec",
            Op::AddBias(..) => "add_bias",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::XLogX(..) => "xlogx",
            Op::SoftmaxVec { .. } => "softmax_vec",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::SumAll(..) => "sum_all",
            Op::MeanCols(..) => "mean_cols",
            Op::MaxRows { .. } => "max_rows",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPoolSeg1d { .. } => "avg_pool_seg1d",
            Op::LayerNormAll { .. } => "layer_norm",
            Op::ChannelScaleShift { .. } => "channel_scale_shift",
            Op::Concat0(..) => "concat0",
            Op::Slice0 { .. } => "slice0",
            Op::MulScalar(..) => "mul_scalar",
            Op::OuterSum(..) => "outer_sum",
            Op::Upsample1d { .. } => "upsample1d",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by a backward pass, indexed by node id.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. the given node (zeros if it never
    /// received gradient).
    pub fn get(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }

    pub fn get_ref(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// First node holding a non-finite value, with its op name. Used for the
    /// diagnostic when a loss comes out non-finite.
    pub fn first_non_finite(&self) -> Option<(NodeId, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape, vb.shape, "add shape mismatch");
        let data = va
            .data
            .iter()
            .zip(vb.data.iter())
            .map(|(x, y)| x + y)
            .collect();
        let shape = va.shape.clone();
        self.push(Tensor::from_vec(&shape, data), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape, vb.shape, "sub shape mismatch");
        let data = va
            .data
            .iter()
            .zip(vb.data.iter())
            .map(|(x, y)| x - y)
            .collect();
        let shape = va.shape.clone();
        self.push(Tensor::from_vec(&shape, data), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape, vb.shape, "mul shape mismatch");
        let data = va
            .data
            .iter()
            .zip(vb.data.iter())
            .map(|(x, y)| x * y)
            .collect();
        let shape = va.shape.clone();
        self.push(Tensor::from_vec(&shape, data), Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let va = &self.nodes[a].value;
        let data = va.data.iter().map(|x| x * s).collect();
        let shape = va.shape.clone();
        self.push(Tensor::from_vec(&shape, data), Op::Scale(a, s))
    }

    /// Add a constant (non-differentiated) tensor.
    pub fn add_const(&mut self, a: NodeId, c: &Tensor) -> NodeId {
        let va = &self.nodes[a].value;
        assert_eq!(va.shape, c.shape, "add_const shape mismatch");
        let data = va
            .data
            .iter()
            .zip(c.data.iter())
            .map(|(x, y)| x + y)
            .collect();
        let shape = va.shape.clone();
        self.push(Tensor::from_vec(&shape, data), Op::AddConst(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (m, k) = (va.rows(), va.cols());
        let (k2, n) = (vb.rows(), vb.cols());
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        matmul_into(&va.data, &vb.data, &mut out, m, k, n, false, false);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul(a, b))
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> NodeId {
        let (vw, vx) = (&self.nodes[w].value, &self.nodes[x].value);
        let (m, k) = (vw.rows(), vw.cols());
        assert_eq!(vx.shape, vec![k], "matvec dimension mismatch");
        let y = matvec(&vw.data, &vx.data, m, k);
        self.push(Tensor::vector(y), Op::MatVec(w, x))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[bias].value);
        let (n, m) = (va.rows(), va.cols());
        assert_eq!(vb.shape, vec![m], "bias dimension mismatch");
        let mut data = va.data.clone();
        for row in data.chunks_exact_mut(m) {
            for (x, b) in row.iter_mut().zip(vb.data.iter()) {
                *x += b;
            }
        }
        self.push(Tensor::from_vec(&[n, m], data), Op::AddBias(a, bias))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let data = va.data.iter().map(|&x| x.max(0.0)).collect();
        let shape = va.shape.clone();
        self.push(Tensor::from_vec(&shape, data), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let va = &self.nodes[a].value;
        let data = va
            .data
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let shape = va.shape.clone();
        self.push(Tensor::from_vec(&shape, data), Op::LeakyRelu(a, slope))
    }

    /// x ln x with the 0 ln 0 = 0 convention; inputs must be >= 0.
    pub fn xlogx(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let data = va
            .data
            .iter()
            .map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 })
            .collect();
        let shape = va.shape.clone();
        self.push(Tensor::from_vec(&shape, data), Op::XLogX(a))
    }

    pub fn softmax_vec(&mut self, x: NodeId) -> NodeId {
        self.softmax_vec_masked(x, None)
    }

    /// Softmax over a vector; masked-out entries produce exactly 0 and pass
    /// no gradient.
    pub fn softmax_vec_masked(&mut self, x: NodeId, mask: Option<Vec<bool>>) -> NodeId {
        let vx = &self.nodes[x].value;
        assert_eq!(vx.shape.len(), 1, "softmax_vec needs a vector");
        if let Some(m) = &mask {
            assert_eq!(m.len(), vx.len(), "mask length mismatch");
            assert!(m.iter().any(|&b| b), "softmax mask excludes every entry");
        }
        let keep = |i: usize| mask.as_ref().map_or(true, |m| m[i]);
        let max = vx
            .data
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut out = vec![0.0; vx.len()];
        let mut denom = 0.0;
        for (i, &v) in vx.data.iter().enumerate() {
            if keep(i) {
                let e = (v - max).exp();
                out[i] = e;
                denom += e;
            }
        }
        for o in out.iter_mut() {
            *o /= denom;
        }
        self.push(Tensor::vector(out), Op::SoftmaxVec { x, mask })
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x].value;
        let (n, m) = (vx.rows(), vx.cols());
        let mut out = vec![0.0; n * m];
        for (orow, xrow) in out.chunks_exact_mut(m).zip(vx.data.chunks_exact(m)) {
            let max = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (o, &v) in orow.iter_mut().zip(xrow.iter()) {
                *o = (v - max).exp();
                denom += *o;
            }
            for o in orow.iter_mut() {
                *o /= denom;
            }
        }
        self.push(Tensor::from_vec(&[n, m], out), Op::SoftmaxRows(x))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].value.len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn mean_cols(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let (n, m) = (va.rows(), va.cols());
        let out: Vec<f64> = va
            .data
            .chunks_exact(m)
            .map(|row| row.iter().sum::<f64>() / m as f64)
            .collect();
        self.push(Tensor::vector(out), Op::MeanCols(a))
    }

    /// Column-wise max over rows: [n,m] -> [m]. Ties route gradient to the
    /// first maximal row, keeping the forward value order-independent.
    pub fn max_rows(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x].value;
        let (n, m) = (vx.rows(), vx.cols());
        assert!(n >= 1, "max_rows needs at least one row");
        let mut out = vec![f64::NEG_INFINITY; m];
        let mut argmax = vec![0usize; m];
        for (i, row) in vx.data.chunks_exact(m).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        self.push(Tensor::vector(out), Op::MaxRows { x, argmax })
    }

    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let vx = &self.nodes[x].value;
        let vw = &self.nodes[w].value;
        let (cin, l) = (vx.rows(), vx.cols());
        let (cout, wk) = (vw.rows(), vw.cols());
        assert_eq!(wk % cin, 0, "conv1d weight/input channel mismatch");
        let kernel = wk / cin;
        assert!(l + 2 * pad >= kernel, "conv1d input shorter than kernel");
        let lout = (l + 2 * pad - kernel) / stride + 1;
        assert_eq!(self.nodes[b].value.shape, vec![cout], "conv1d bias shape");

        // im2col: cols[p, ci*kernel + kk] = x[ci, p*stride + kk - pad]
        let mut cols = vec![0.0; lout * wk];
        for p in 0..lout {
            let row = &mut cols[p * wk..(p + 1) * wk];
            for ci in 0..cin {
                for kk in 0..kernel {
                    let src = (p * stride + kk) as isize - pad as isize;
                    if src >= 0 && (src as usize) < l {
                        row[ci * kernel + kk] = vx.data[ci * l + src as usize];
                    }
                }
            }
        }
        let mut out = vec![0.0; cout * lout];
        matmul_into(&vw.data, &cols, &mut out, cout, wk, lout, false, true);
        let vb = &self.nodes[b].value;
        for co in 0..cout {
            for p in 0..lout {
                out[co * lout + p] += vb.data[co];
            }
        }
        self.push(
            Tensor::from_vec(&[cout, lout], out),
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
                kernel,
                cols,
            },
        )
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let vx = &self.nodes[x].value;
        let vw = &self.nodes[w].value;
        assert_eq!(vx.shape.len(), 3, "conv2d input must be [c,h,w]");
        let (cin, h, wd) = (vx.shape[0], vx.shape[1], vx.shape[2]);
        let (cout, wk) = (vw.rows(), vw.cols());
        assert_eq!(wk % cin, 0, "conv2d weight/input channel mismatch");
        let ksq = wk / cin;
        let kernel = (ksq as f64).sqrt().round() as usize;
        assert_eq!(kernel * kernel, ksq, "conv2d expects square kernels");
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (wd + 2 * pad - kernel) / stride + 1;
        assert_eq!(self.nodes[b].value.shape, vec![cout], "conv2d bias shape");

        let mut cols = vec![0.0; ho * wo * wk];
        for py in 0..ho {
            for px in 0..wo {
                let row = &mut cols[(py * wo + px) * wk..(py * wo + px + 1) * wk];
                for ci in 0..cin {
                    for ky in 0..kernel {
                        let sy = (py * stride + ky) as isize - pad as isize;
                        if sy < 0 || sy as usize >= h {
                            continue;
                        }
                        for kx in 0..kernel {
                            let sx = (px * stride + kx) as isize - pad as isize;
                            if sx >= 0 && (sx as usize) < wd {
                                row[ci * ksq + ky * kernel + kx] =
                                    vx.data[(ci * h + sy as usize) * wd + sx as usize];
                            }
                        }
                    }
                }
            }
        }
        let npos = ho * wo;
        let mut out = vec![0.0; cout * npos];
        matmul_into(&vw.data, &cols, &mut out, cout, wk, npos, false, true);
        let vb = &self.nodes[b].value;
        for co in 0..cout {
            for p in 0..npos {
                out[co * npos + p] += vb.data[co];
            }
        }
        self.push(
            Tensor::from_vec(&[cout, ho, wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                kernel,
                cols,
            },
        )
    }

    /// Adaptive average pooling over the length axis: segment o covers
    /// [floor(o*l/out), ceil((o+1)*l/out)).
    pub fn avg_pool_seg1d(&mut self, x: NodeId, out_len: usize) -> NodeId {
        let vx = &self.nodes[x].value;
        let (c, l) = (vx.rows(), vx.cols());
        assert!(out_len >= 1 && out_len <= l, "bad pool output length");
        let mut out = vec![0.0; c * out_len];
        for ch in 0..c {
            for o in 0..out_len {
                let (s, e) = pool_segment(o, l, out_len);
                let seg = &vx.data[ch * l + s..ch * l + e];
                out[ch * out_len + o] = seg.iter().sum::<f64>() / (e - s) as f64;
            }
        }
        self.push(
            Tensor::from_vec(&[c, out_len], out),
            Op::AvgPoolSeg1d { x, out_len },
        )
    }

    /// Normalize over every element of the tensor (single-group norm without
    /// affine; pair with `channel_scale_shift` for the learned part).
    pub fn layer_norm_all(&mut self, x: NodeId, eps: f64) -> NodeId {
        let vx = &self.nodes[x].value;
        let n = vx.len() as f64;
        let mean = vx.data.iter().sum::<f64>() / n;
        let var = vx.data.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + eps).sqrt();
        let data = vx.data.iter().map(|&v| (v - mean) * inv_std).collect();
        let shape = vx.shape.clone();
        self.push(
            Tensor::from_vec(&shape, data),
            Op::LayerNormAll { x, inv_std },
        )
    }

    pub fn channel_scale_shift(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let vx = &self.nodes[x].value;
        let (c, l) = (vx.rows(), vx.cols());
        assert_eq!(self.nodes[gamma].value.shape, vec![c], "gamma shape");
        assert_eq!(self.nodes[beta].value.shape, vec![c], "beta shape");
        let vg = &self.nodes[gamma].value;
        let vb = &self.nodes[beta].value;
        let mut out = vec![0.0; c * l];
        for ch in 0..c {
            let (g, b) = (vg.data[ch], vb.data[ch]);
            for i in 0..l {
                out[ch * l + i] = g * vx.data[ch * l + i] + b;
            }
        }
        self.push(
            Tensor::from_vec(&[c, l], out),
            Op::ChannelScaleShift { x, gamma, beta },
        )
    }

    /// Concatenate along axis 0; all parts must share trailing dimensions.
    pub fn concat0(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat0 needs at least one part");
        let trailing: Vec<usize> = self.nodes[parts[0]].value.shape[1..].to_vec();
        let mut d0 = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = &self.nodes[p].value;
            assert_eq!(v.shape[1..], trailing[..], "concat0 trailing dims differ");
            d0 += v.shape[0];
            data.extend_from_slice(&v.data);
        }
        let mut shape = vec![d0];
        shape.extend_from_slice(&trailing);
        self.push(Tensor::from_vec(&shape, data), Op::Concat0(parts.to_vec()))
    }

    /// Slice `len` entries along axis 0 starting at `start`.
    pub fn slice0(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let vx = &self.nodes[x].value;
        let stride: usize = vx.shape[1..].iter().product::<usize>().max(1);
        assert!(start + len <= vx.shape[0], "slice0 out of range");
        let data = vx.data[start * stride..(start + len) * stride].to_vec();
        let mut shape = vec![len];
        shape.extend_from_slice(&vx.shape[1..]);
        self.push(Tensor::from_vec(&shape, data), Op::Slice0 { x, start })
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let vs = &self.nodes[s].value;
        assert_eq!(vs.len(), 1, "mul_scalar needs a single-element scalar node");
        let sv = vs.data[0];
        let va = &self.nodes[a].value;
        let data = va.data.iter().map(|&x| x * sv).collect();
        let shape = va.shape.clone();
        self.push(Tensor::from_vec(&shape, data), Op::MulScalar(a, s))
    }

    pub fn outer_sum(&mut self, s: NodeId, t: NodeId) -> NodeId {
        let (vs, vt) = (&self.nodes[s].value, &self.nodes[t].value);
        assert_eq!(vs.shape.len(), 1, "outer_sum takes vectors");
        assert_eq!(vs.shape, vt.shape, "outer_sum length mismatch");
        let n = vs.len();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = vs.data[i] + vt.data[j];
            }
        }
        self.push(Tensor::from_vec(&[n, n], out), Op::OuterSum(s, t))
    }

    pub fn upsample1d(&mut self, x: NodeId, factor: usize) -> NodeId {
        let vx = &self.nodes[x].value;
        let (c, l) = (vx.rows(), vx.cols());
        let lo = l * factor;
        let mut out = vec![0.0; c * lo];
        for ch in 0..c {
            for i in 0..lo {
                out[ch * lo + i] = vx.data[ch * l + i / factor];
            }
        }
        self.push(Tensor::from_vec(&[c, lo], out), Op::Upsample1d { x, factor })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let vx = &self.nodes[x].value;
        assert_eq!(
            shape.iter().product::<usize>(),
            vx.len(),
            "reshape element count mismatch"
        );
        let data = vx.data.clone();
        self.push(Tensor::from_vec(shape, data), Op::Reshape(x))
    }

    // ── composite helpers ────────────────────────────────────────────

    /// w[m,k] * x[k] + b[m]
    pub fn affine(&mut self, w: NodeId, b: NodeId, x: NodeId) -> NodeId {
        let y = self.matvec(w, x);
        self.add(y, b)
    }

    /// Row-wise affine: x[n,k] * w[k,m] + b[m]
    pub fn linear_rows(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    /// Sum of squared differences between two same-shape nodes.
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.sum_all(sq)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss node. Returns per-node gradients.
    pub fn backward(&self, loss: NodeId) -> Grads {
        assert_eq!(self.nodes[loss].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.push_back(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }

    fn accum(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        match &mut grads[id] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn push_back(&self, id: NodeId, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::AddConst(a) | Op::Reshape(a) => {
                let va = &self.nodes[*a].value;
                let mut d = g.clone();
                d.shape = va.shape.clone();
                Self::accum(grads, *a, d);
            }
            Op::Add(a, b) => {
                Self::accum(grads, *a, g.clone());
                Self::accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                Self::accum(grads, *a, g.clone());
                let mut d = g.clone();
                d.scale_assign(-1.0);
                Self::accum(grads, *b, d);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let da = Tensor::from_vec(
                    &va.shape,
                    g.data
                        .iter()
                        .zip(vb.data.iter())
                        .map(|(x, y)| x * y)
                        .collect(),
                );
                let db = Tensor::from_vec(
                    &vb.shape,
                    g.data
                        .iter()
                        .zip(va.data.iter())
                        .map(|(x, y)| x * y)
                        .collect(),
                );
                Self::accum(grads, *a, da);
                Self::accum(grads, *b, db);
            }
            Op::Scale(a, s) => {
                let mut d = g.clone();
                d.scale_assign(*s);
                Self::accum(grads, *a, d);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (va.rows(), va.cols());
                let n = vb.cols();
                // dA = g * B^T ; dB = A^T * g
                let mut da = vec![0.0; m * k];
                matmul_into(&g.data, &vb.data, &mut da, m, n, k, false, true);
                let mut db = vec![0.0; k * n];
                matmul_into(&va.data, &g.data, &mut db, k, m, n, true, false);
                Self::accum(grads, *a, Tensor::from_vec(&[m, k], da));
                Self::accum(grads, *b, Tensor::from_vec(&[k, n], db));
            }
            Op::MatVec(w, x) => {
                let (vw, vx) = (&self.nodes[*w].value, &self.nodes[*x].value);
                let (m, k) = (vw.rows(), vw.cols());
                // dW = g ⊗ x ; dx = W^T g
                let mut dw = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..k {
                        dw[i * k + j] = g.data[i] * vx.data[j];
                    }
                }
                let mut dx = vec![0.0; k];
                for i in 0..m {
                    let gi = g.data[i];
                    for j in 0..k {
                        dx[j] += gi * vw.data[i * k + j];
                    }
                }
                Self::accum(grads, *w, Tensor::from_vec(&[m, k], dw));
                Self::accum(grads, *x, Tensor::vector(dx));
            }
            Op::AddBias(a, bias) => {
                let m = self.nodes[*bias].value.len();
                let mut db = vec![0.0; m];
                for row in g.data.chunks_exact(m) {
                    for (d, &v) in db.iter_mut().zip(row.iter()) {
                        *d += v;
                    }
                }
                Self::accum(grads, *a, g.clone());
                Self::accum(grads, *bias, Tensor::vector(db));
            }
            Op::Relu(a) => {
                let va = &self.nodes[*a].value;
                let d = Tensor::from_vec(
                    &va.shape,
                    g.data
                        .iter()
                        .zip(va.data.iter())
                        .map(|(&gi, &x)| if x > 0.0 { gi } else { 0.0 })
                        .collect(),
                );
                Self::accum(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let va = &self.nodes[*a].value;
                let d = Tensor::from_vec(
                    &va.shape,
                    g.data
                        .iter()
                        .zip(va.data.iter())
                        .map(|(&gi, &x)| if x > 0.0 { gi } else { slope * gi })
                        .collect(),
                );
                Self::accum(grads, *a, d);
            }
            Op::XLogX(a) => {
                // d/dx (x ln x) = ln x + 1; pinned to 0 at x = 0 where the
                // forward value is defined as 0.
                let va = &self.nodes[*a].value;
                let d = Tensor::from_vec(
                    &va.shape,
                    g.data
                        .iter()
                        .zip(va.data.iter())
                        .map(|(&gi, &x)| if x > 0.0 { gi * (x.ln() + 1.0) } else { 0.0 })
                        .collect(),
                );
                Self::accum(grads, *a, d);
            }
            Op::SoftmaxVec { x, mask } => {
                let y = &node.value;
                let dot: f64 = y
                    .data
                    .iter()
                    .zip(g.data.iter())
                    .map(|(a, b)| a * b)
                    .sum();
                let d = Tensor::vector(
                    y.data
                        .iter()
                        .zip(g.data.iter())
                        .enumerate()
                        .map(|(i, (&yi, &gi))| {
                            if mask.as_ref().map_or(true, |m| m[i]) {
                                yi * (gi - dot)
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                );
                Self::accum(grads, *x, d);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let m = y.cols();
                let mut d = vec![0.0; y.len()];
                for ((drow, yrow), grow) in d
                    .chunks_exact_mut(m)
                    .zip(y.data.chunks_exact(m))
                    .zip(g.data.chunks_exact(m))
                {
                    let dot: f64 = yrow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
                    for ((di, &yi), &gi) in drow.iter_mut().zip(yrow.iter()).zip(grow.iter()) {
                        *di = yi * (gi - dot);
                    }
                }
                Self::accum(grads, *x, Tensor::from_vec(&y.shape, d));
            }
            Op::SumAll(a) => {
                let va = &self.nodes[*a].value;
                Self::accum(grads, *a, Tensor::filled(&va.shape, g.data[0]));
            }
            Op::MeanCols(a) => {
                let va = &self.nodes[*a].value;
                let (n, m) = (va.rows(), va.cols());
                let mut d = vec![0.0; n * m];
                for i in 0..n {
                    let gi = g.data[i] / m as f64;
                    for v in d[i * m..(i + 1) * m].iter_mut() {
                        *v = gi;
                    }
                }
                Self::accum(grads, *a, Tensor::from_vec(&[n, m], d));
            }
            Op::MaxRows { x, argmax } => {
                let vx = &self.nodes[*x].value;
                let m = vx.cols();
                let mut d = vec![0.0; vx.len()];
                for (j, &i) in argmax.iter().enumerate() {
                    d[i * m + j] = g.data[j];
                }
                Self::accum(grads, *x, Tensor::from_vec(&vx.shape, d));
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
                kernel,
                cols,
            } => {
                let vx = &self.nodes[*x].value;
                let vw = &self.nodes[*w].value;
                let (cin, l) = (vx.rows(), vx.cols());
                let (cout, wk) = (vw.rows(), vw.cols());
                let lout = g.cols();
                // db
                let mut db = vec![0.0; cout];
                for co in 0..cout {
                    db[co] = g.data[co * lout..(co + 1) * lout].iter().sum();
                }
                // dW = g[cout,lout] * cols[lout,wk]
                let mut dw = vec![0.0; cout * wk];
                matmul_into(&g.data, cols, &mut dw, cout, lout, wk, false, false);
                // dcols = g^T[lout,cout] * w[cout,wk]
                let mut dcols = vec![0.0; lout * wk];
                matmul_into(&g.data, &vw.data, &mut dcols, lout, cout, wk, true, false);
                // col2im
                let mut dx = vec![0.0; cin * l];
                for p in 0..lout {
                    let row = &dcols[p * wk..(p + 1) * wk];
                    for ci in 0..cin {
                        for kk in 0..*kernel {
                            let src = (p * stride + kk) as isize - *pad as isize;
                            if src >= 0 && (src as usize) < l {
                                dx[ci * l + src as usize] += row[ci * kernel + kk];
                            }
                        }
                    }
                }
                Self::accum(grads, *x, Tensor::from_vec(&vx.shape, dx));
                Self::accum(grads, *w, Tensor::from_vec(&[cout, wk], dw));
                Self::accum(grads, *b, Tensor::vector(db));
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                kernel,
                cols,
            } => {
                let vx = &self.nodes[*x].value;
                let vw = &self.nodes[*w].value;
                let (cin, h, wd) = (vx.shape[0], vx.shape[1], vx.shape[2]);
                let (cout, wk) = (vw.rows(), vw.cols());
                let ksq = kernel * kernel;
                let (ho, wo) = (node.value.shape[1], node.value.shape[2]);
                let npos = ho * wo;
                let mut db = vec![0.0; cout];
                for co in 0..cout {
                    db[co] = g.data[co * npos..(co + 1) * npos].iter().sum();
                }
                let mut dw = vec![0.0; cout * wk];
                matmul_into(&g.data, cols, &mut dw, cout, npos, wk, false, false);
                let mut dcols = vec![0.0; npos * wk];
                matmul_into(&g.data, &vw.data, &mut dcols, npos, cout, wk, true, false);
                let mut dx = vec![0.0; cin * h * wd];
                for py in 0..ho {
                    for px in 0..wo {
                        let row = &dcols[(py * wo + px) * wk..(py * wo + px + 1) * wk];
                        for ci in 0..cin {
                            for ky in 0..*kernel {
                                let sy = (py * stride + ky) as isize - *pad as isize;
                                if sy < 0 || sy as usize >= h {
                                    continue;
                                }
                                for kx in 0..*kernel {
                                    let sx = (px * stride + kx) as isize - *pad as isize;
                                    if sx >= 0 && (sx as usize) < wd {
                                        dx[(ci * h + sy as usize) * wd + sx as usize] +=
                                            row[ci * ksq + ky * kernel + kx];
                                    }
                                }
                            }
                        }
                    }
                }
                Self::accum(grads, *x, Tensor::from_vec(&vx.shape, dx));
                Self::accum(grads, *w, Tensor::from_vec(&[cout, wk], dw));
                Self::accum(grads, *b, Tensor::vector(db));
            }
            Op::AvgPoolSeg1d { x, out_len } => {
                let vx = &self.nodes[*x].value;
                let (c, l) = (vx.rows(), vx.cols());
                let mut d = vec![0.0; c * l];
                for ch in 0..c {
                    for o in 0..*out_len {
                        let (s, e) = pool_segment(o, l, *out_len);
                        let gi = g.data[ch * out_len + o] / (e - s) as f64;
                        for v in d[ch * l + s..ch * l + e].iter_mut() {
                            *v += gi;
                        }
                    }
                }
                Self::accum(grads, *x, Tensor::from_vec(&vx.shape, d));
            }
            Op::LayerNormAll { x, inv_std } => {
                // dx = inv_std * (g - mean(g) - y * mean(g ⊙ y))
                let y = &node.value;
                let n = y.len() as f64;
                let gmean: f64 = g.data.iter().sum::<f64>() / n;
                let gymean: f64 = g
                    .data
                    .iter()
                    .zip(y.data.iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / n;
                let d = Tensor::from_vec(
                    &y.shape,
                    g.data
                        .iter()
                        .zip(y.data.iter())
                        .map(|(&gi, &yi)| inv_std * (gi - gmean - yi * gymean))
                        .collect(),
                );
                Self::accum(grads, *x, d);
            }
            Op::ChannelScaleShift { x, gamma, beta } => {
                let vx = &self.nodes[*x].value;
                let vg = &self.nodes[*gamma].value;
                let (c, l) = (vx.rows(), vx.cols());
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; c * l];
                for ch in 0..c {
                    let gch = vg.data[ch];
                    for i in 0..l {
                        let gi = g.data[ch * l + i];
                        dgamma[ch] += gi * vx.data[ch * l + i];
                        dbeta[ch] += gi;
                        dx[ch * l + i] = gi * gch;
                    }
                }
                Self::accum(grads, *x, Tensor::from_vec(&vx.shape, dx));
                Self::accum(grads, *gamma, Tensor::vector(dgamma));
                Self::accum(grads, *beta, Tensor::vector(dbeta));
            }
            Op::Concat0(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let vp = &self.nodes[p].value;
                    let d = Tensor::from_vec(
                        &vp.shape,
                        g.data[offset..offset + vp.len()].to_vec(),
                    );
                    offset += vp.len();
                    Self::accum(grads, p, d);
                }
            }
            Op::Slice0 { x, start } => {
                let vx = &self.nodes[*x].value;
                let stride: usize = vx.shape[1..].iter().product::<usize>().max(1);
                let mut d = vec![0.0; vx.len()];
                d[start * stride..start * stride + g.len()].copy_from_slice(&g.data);
                Self::accum(grads, *x, Tensor::from_vec(&vx.shape, d));
            }
            Op::MulScalar(a, s) => {
                let va = &self.nodes[*a].value;
                let sv = self.nodes[*s].value.data[0];
                let mut da = g.clone();
                da.scale_assign(sv);
                let ds: f64 = g
                    .data
                    .iter()
                    .zip(va.data.iter())
                    .map(|(x, y)| x * y)
                    .sum();
                Self::accum(grads, *a, da);
                Self::accum(grads, *s, Tensor::scalar(ds));
            }
            Op::OuterSum(s, t) => {
                let n = self.nodes[*s].value.len();
                let mut ds = vec![0.0; n];
                let mut dt = vec![0.0; n];
                for i in 0..n {
                    for j in 0..n {
                        let gi = g.data[i * n + j];
                        ds[i] += gi;
                        dt[j] += gi;
                    }
                }
                Self::accum(grads, *s, Tensor::vector(ds));
                Self::accum(grads, *t, Tensor::vector(dt));
            }
            Op::Upsample1d { x, factor } => {
                let vx = &self.nodes[*x].value;
                let (c, l) = (vx.rows(), vx.cols());
                let lo = l * factor;
                let mut d = vec![0.0; c * l];
                for ch in 0..c {
                    for i in 0..lo {
                        d[ch * l + i / factor] += g.data[ch * lo + i];
                    }
                }
                Self::accum(grads, *x, Tensor::from_vec(&vx.shape, d));
            }
        }
    }
}

/// PyTorch-style adaptive pool segment boundaries.
fn pool_segment(o: usize, len: usize, out_len: usize) -> (usize, usize) {
    let s = o * len / out_len;
    let e = ((o + 1) * len).div_ceil(out_len);
    (s, e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Stream;
    use rand::Rng;

    /// Central finite differences over every input coordinate; the
    /// independent oracle every op's backward is checked against.
    fn fd_check<F>(inputs: &[Tensor], build: F, tol: f64)
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        let run = |ins: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = ins.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = build(&mut tape, &ids);
            tape.value(out).item()
        };

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &ids);
        let grads = tape.backward(out);

        let h = 1e-5;
        for (pi, input) in inputs.iter().enumerate() {
            let analytic = grads.get(ids[pi], &input.shape);
            for ci in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[pi].data[ci] += h;
                let mut minus = inputs.to_vec();
                minus[pi].data[ci] -= h;
                let fd = (run(&plus) - run(&minus)) / (2.0 * h);
                let a = analytic.data[ci];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                assert!(
                    rel < tol,
                    "input {pi} coord {ci}: analytic {a} vs fd {fd} (rel {rel})"
                );
            }
        }
    }

    fn rand_tensor(shape: &[usize], rng: &mut Stream) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n)
                .map(|_| {
                    let v: f64 = rng.rng().gen_range(0.3..1.2);
                    if rng.rng().gen_bool(0.5) {
                        v
                    } else {
                        -v
                    }
                })
                .collect(),
        )
    }

    #[test]
    fn sum_of_squares_grad() {
        // loss = x1^2 + x2^2 at (3,4) -> loss 25, grads (6,8)
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
        let sq = tape.mul(x, x);
        let loss = tape.sum_all(sq);
        assert_eq!(tape.value(loss).item(), 25.0);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x, &[2]).data, vec![6.0, 8.0]);
    }

    #[test]
    fn constant_loss_zero_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0]));
        let c = tape.leaf(Tensor::scalar(7.0));
        let zero = tape.scale(x, 0.0);
        let s = tape.sum_all(zero);
        let loss = tape.add(s, c);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x, &[2]).data, vec![0.0, 0.0]);
    }

    #[test]
    fn elementwise_and_linear_ops_match_fd() {
        let mut rng = Stream::from_seed(11);
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[3, 4], &mut rng);
        fd_check(&[a.clone(), b.clone()], |t, ids| {
            let s = t.add(ids[0], ids[1]);
            let d = t.sub(s, ids[1]);
            let m = t.mul(d, ids[1]);
            let sc = t.scale(m, 0.7);
            t.sum_all(sc)
        }, 1e-6);

        let w = rand_tensor(&[4, 3], &mut rng);
        let x = rand_tensor(&[3], &mut rng);
        let bias = rand_tensor(&[4], &mut rng);
        fd_check(&[w, x, bias], |t, ids| {
            let y = t.affine(ids[0], ids[2], ids[1]);
            let r = t.relu(y);
            t.sum_all(r)
        }, 1e-5);
    }

    #[test]
    fn matmul_and_bias_match_fd() {
        let mut rng = Stream::from_seed(12);
        let a = rand_tensor(&[3, 5], &mut rng);
        let b = rand_tensor(&[5, 2], &mut rng);
        let bias = rand_tensor(&[2], &mut rng);
        fd_check(&[a, b, bias], |t, ids| {
            let y = t.linear_rows(ids[0], ids[1], ids[2]);
            let l = t.leaky_relu(y, 0.2);
            let m = t.mul(l, l);
            t.sum_all(m)
        }, 1e-5);
    }

    #[test]
    fn softmax_ops_match_fd() {
        let mut rng = Stream::from_seed(13);
        let x = rand_tensor(&[5], &mut rng);
        fd_check(&[x.clone()], |t, ids| {
            let y = t.softmax_vec(ids[0]);
            let e = t.xlogx(y);
            let s = t.sum_all(e);
            t.scale(s, -1.0)
        }, 1e-5);

        let m = rand_tensor(&[3, 4], &mut rng);
        let wsum = rand_tensor(&[3, 4], &mut rng);
        fd_check(&[m, wsum], |t, ids| {
            let y = t.softmax_rows(ids[0]);
            let p = t.mul(y, ids[1]);
            t.sum_all(p)
        }, 1e-5);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = tape.softmax_vec_masked(x, Some(vec![true, false, true]));
        let v = tape.value(y);
        assert_eq!(v.data[1], 0.0);
        let denom = 1.0 + (3.0f64 - 1.0).exp();
        assert!((v.data[0] - 1.0 / denom).abs() < 1e-12);
        assert!((v.data[2] - (2.0f64).exp() / denom).abs() < 1e-12);
        assert!((v.data.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // masked logit gets no gradient
        let w = tape.leaf(Tensor::vector(vec![0.3, -0.4, 0.9]));
        let p = tape.mul(y, w);
        let loss = tape.sum_all(p);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x, &[3]).data[1], 0.0);
    }

    #[test]
    fn pooling_and_reduction_ops_match_fd() {
        let mut rng = Stream::from_seed(14);
        let x = rand_tensor(&[4, 6], &mut rng);
        let w = rand_tensor(&[4], &mut rng);
        fd_check(&[x.clone(), w.clone()], |t, ids| {
            let m = t.mean_cols(ids[0]);
            let p = t.mul(m, ids[1]);
            t.sum_all(p)
        }, 1e-5);

        let wv = rand_tensor(&[6], &mut rng);
        fd_check(&[x.clone(), wv], |t, ids| {
            let m = t.max_rows(ids[0]);
            let p = t.mul(m, ids[1]);
            t.sum_all(p)
        }, 1e-5);

        let pw = rand_tensor(&[4, 3], &mut rng);
        fd_check(&[x, pw], |t, ids| {
            let m = t.avg_pool_seg1d(ids[0], 3);
            let p = t.mul(m, ids[1]);
            t.sum_all(p)
        }, 1e-5);
    }

    #[test]
    fn conv1d_matches_fd() {
        let mut rng = Stream::from_seed(15);
        let x = rand_tensor(&[2, 8], &mut rng);
        let w = rand_tensor(&[3, 6], &mut rng); // cout=3, cin*k = 2*3
        let b = rand_tensor(&[3], &mut rng);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            fd_check(&[x.clone(), w.clone(), b.clone()], |t, ids| {
                let y = t.conv1d(ids[0], ids[1], ids[2], stride, pad);
                let r = t.relu(y);
                let m = t.mul(r, r);
                t.sum_all(m)
            }, 1e-5);
        }
    }

    #[test]
    fn conv2d_matches_fd() {
        let mut rng = Stream::from_seed(16);
        let x = rand_tensor(&[2, 6, 6], &mut rng);
        let w = rand_tensor(&[3, 18], &mut rng); // cout=3, cin*k*k = 2*9
        let b = rand_tensor(&[3], &mut rng);
        for (stride, pad) in [(1, 1), (2, 1)] {
            fd_check(&[x.clone(), w.clone(), b.clone()], |t, ids| {
                let y = t.conv2d(ids[0], ids[1], ids[2], stride, pad);
                let r = t.leaky_relu(y, 0.1);
                let m = t.mul(r, r);
                t.sum_all(m)
            }, 1e-5);
        }
    }

    #[test]
    fn norm_film_concat_ops_match_fd() {
        let mut rng = Stream::from_seed(17);
        let x = rand_tensor(&[3, 4], &mut rng);
        let gamma = rand_tensor(&[3], &mut rng);
        let beta = rand_tensor(&[3], &mut rng);
        fd_check(&[x.clone(), gamma, beta], |t, ids| {
            let n = t.layer_norm_all(ids[0], 1e-5);
            let f = t.channel_scale_shift(n, ids[1], ids[2]);
            let m = t.mul(f, f);
            t.sum_all(m)
        }, 1e-4);

        let a = rand_tensor(&[2, 4], &mut rng);
        let b = rand_tensor(&[3, 4], &mut rng);
        fd_check(&[a, b], |t, ids| {
            let c = t.concat0(&[ids[0], ids[1]]);
            let s = t.slice0(c, 1, 3);
            let m = t.mul(s, s);
            t.sum_all(m)
        }, 1e-5);
    }

    #[test]
    fn attention_shaped_ops_match_fd() {
        let mut rng = Stream::from_seed(18);
        let s = rand_tensor(&[3], &mut rng);
        let tt = rand_tensor(&[3], &mut rng);
        let v = rand_tensor(&[3, 2], &mut rng);
        fd_check(&[s, tt, v], |t, ids| {
            let logits = t.outer_sum(ids[0], ids[1]);
            let att = t.softmax_rows(logits);
            let out = t.matmul(att, ids[2]);
            let m = t.mul(out, out);
            t.sum_all(m)
        }, 1e-5);

        let a = rand_tensor(&[4], &mut rng);
        let sc = rand_tensor(&[1], &mut rng);
        fd_check(&[a, sc], |t, ids| {
            let y = t.mul_scalar(ids[0], ids[1]);
            let m = t.mul(y, y);
            t.sum_all(m)
        }, 1e-5);

        let u = rand_tensor(&[2, 3], &mut rng);
        let wu = rand_tensor(&[2, 6], &mut rng);
        fd_check(&[u, wu], |t, ids| {
            let up = t.upsample1d(ids[0], 2);
            let p = t.mul(up, ids[1]);
            t.sum_all(p)
        }, 1e-5);
    }

    #[test]
    fn max_rows_is_permutation_invariant() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(
            &[3, 2],
            vec![1.0, 5.0, 9.0, 2.0, 4.0, 7.0],
        ));
        let m1 = tape.max_rows(x);
        let y = tape.leaf(Tensor::from_vec(
            &[3, 2],
            vec![4.0, 7.0, 1.0, 5.0, 9.0, 2.0],
        ));
        let m2 = tape.max_rows(y);
        assert_eq!(tape.value(m1).data, tape.value(m2).data);
    }

    #[test]
    fn first_non_finite_names_offender() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, f64::NAN]));
        let _ = tape.relu(x);
        let (id, name) = tape.first_non_finite().unwrap();
        assert_eq!(id, 0);
        assert_eq!(name, "leaf");
    }
}
