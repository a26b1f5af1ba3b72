//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Tensors are row-major `f64` buffers. Every op that sees a grad-requiring
//! input records its parents and a backward closure; `Tensor::backward` on a
//! scalar walks the recorded graph in reverse topological order and
//! accumulates gradients into every `requires_grad` leaf.
//!
//! Broadcasting is deliberately limited to scalar-vs-tensor; everything else
//! must be equal-shape. Shape misuse panics with both shapes in the message.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Shared handle to a tensor node. Cloning is cheap and aliases the value.
#[derive(Clone)]
pub struct Tensor(Rc<RefCell<Node>>);

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn assert_finite(data: &[f64], op: &str) {
    if let Some(v) = data.iter().find(|v| !v.is_finite()) {
        panic!("non-finite value {v} produced by op `{op}`");
    }
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert!(
            shape.iter().all(|&d| d > 0),
            "all dims must be positive, got {shape:?}"
        );
        assert_eq!(
            numel(shape),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        assert_finite(&data, "from_vec");
        Tensor(Rc::new(RefCell::new(Node {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        })))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; numel(shape)])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v])
    }

    /// Scalar +inf carrier for flagged infeasible losses. Exempt from the
    /// finiteness check; never participates in a graph.
    pub fn infinity() -> Tensor {
        Tensor(Rc::new(RefCell::new(Node {
            shape: vec![1],
            data: vec![f64::INFINITY],
            grad: None,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        })))
    }

    /// Marks this tensor as a trainable leaf.
    pub fn requires_grad(self) -> Tensor {
        self.0.borrow_mut().requires_grad = true;
        self
    }

    pub(crate) fn from_op(
        op: &str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        assert_eq!(numel(&shape), data.len(), "op `{op}` produced bad shape");
        assert_finite(&data, op);
        let track = parents.iter().any(|p| p.0.borrow().requires_grad);
        Tensor(Rc::new(RefCell::new(Node {
            shape,
            data,
            grad: None,
            requires_grad: track,
            parents: if track { parents } else { Vec::new() },
            backward: if track { Some(backward) } else { None },
        })))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.0.borrow(), |n| n.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.borrow().data.clone()
    }

    /// Value of a scalar (single-element) tensor.
    pub fn item(&self) -> f64 {
        let n = self.0.borrow();
        assert_eq!(n.data.len(), 1, "item() on non-scalar shape {:?}", n.shape);
        n.data[0]
    }

    pub fn is_requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Replaces the stored values in place (optimizer step). Panics on
    /// length mismatch or non-finite input.
    pub fn set_data(&self, data: Vec<f64>) {
        let mut n = self.0.borrow_mut();
        assert_eq!(n.data.len(), data.len(), "set_data length mismatch");
        assert_finite(&data, "set_data");
        n.data = data;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut n = self.0.borrow_mut();
        assert_eq!(n.data.len(), g.len(), "gradient length mismatch");
        match &mut n.grad {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => n.grad = Some(g.to_vec()),
        }
    }

    /// Detached copy: same values, no graph history, no grad tracking.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(&self.shape(), self.to_vec())
    }

    /// Reverse-mode sweep from a scalar loss. Repeated calls accumulate
    /// into existing gradients.
    pub fn backward(&self) {
        {
            let n = self.0.borrow();
            assert_eq!(
                n.data.len(),
                1,
                "backward() requires a scalar loss, got shape {:?}",
                n.shape
            );
        }
        self.accumulate_grad(&[1.0]);

        // Iterative post-order DFS by node address.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<*const RefCell<Node>> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&t.0);
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(key) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.0.borrow().parents.iter() {
                if p.0.borrow().requires_grad {
                    stack.push((p.clone(), false));
                }
            }
        }

        for t in order.iter().rev() {
            let grad = t.0.borrow().grad.clone();
            let Some(grad) = grad else { continue };
            // Closure only borrows parents, never this node.
            let f = Ref::filter_map(t.0.borrow(), |n| n.backward.as_deref()).ok();
            if let Some(f) = f {
                f(&grad);
            }
        }
    }
}

fn assert_same_shape(op: &str, a: &Tensor, b: &Tensor) {
    let (sa, sb) = (a.shape(), b.shape());
    assert_eq!(sa, sb, "op `{op}` shape mismatch: {sa:?} vs {sb:?}");
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_same_shape("add", self, other);
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(
            "add",
            self.shape(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                pa.accumulate_grad(g);
                pb.accumulate_grad(g);
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_same_shape("sub", self, other);
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(
            "sub",
            self.shape(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                pa.accumulate_grad(g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                pb.accumulate_grad(&neg);
            }),
        )
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_same_shape("mul", self, other);
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(
            "mul",
            self.shape(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga: Vec<f64> = g.iter().zip(pb.data().iter()).map(|(g, b)| g * b).collect();
                let gb: Vec<f64> = g.iter().zip(pa.data().iter()).map(|(g, a)| g * a).collect();
                pa.accumulate_grad(&ga);
                pb.accumulate_grad(&gb);
            }),
        )
    }

    /// Scalar broadcast multiply.
    pub fn scale(&self, c: f64) -> Tensor {
        assert!(c.is_finite(), "scale by non-finite {c}");
        let data: Vec<f64> = self.data().iter().map(|v| v * c).collect();
        let p = self.clone();
        Tensor::from_op(
            "scale",
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let gp: Vec<f64> = g.iter().map(|v| v * c).collect();
                p.accumulate_grad(&gp);
            }),
        )
    }

    fn unary(&self, op: &'static str, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64 + 'static) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&v| f(v)).collect();
        let p = self.clone();
        Tensor::from_op(
            op,
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let gp: Vec<f64> = g
                    .iter()
                    .zip(p.data().iter())
                    .map(|(g, &x)| g * df(x))
                    .collect();
                p.accumulate_grad(&gp);
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary("sigmoid", sigmoid, |x| {
            let s = sigmoid(x);
            s * (1.0 - s)
        })
    }

    /// swish(x) = x * sigmoid(x)
    pub fn swish(&self) -> Tensor {
        self.unary("swish", |x| x * sigmoid(x), |x| {
            let s = sigmoid(x);
            s + x * s * (1.0 - s)
        })
    }

    pub fn relu(&self) -> Tensor {
        self.unary("relu", |x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, f64::exp)
    }

    pub fn log(&self) -> Tensor {
        if let Some(v) = self.data().iter().find(|&&v| v <= 0.0) {
            panic!("log of non-positive value {v}");
        }
        self.unary("log", f64::ln, |x| 1.0 / x)
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let p = self.clone();
        let n = self.to_vec().len();
        Tensor::from_op(
            "sum",
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g| {
                p.accumulate_grad(&vec![g[0]; n]);
            }),
        )
    }

    /// 2-D matrix product. Backward: dA = dC·Bᵀ, dB = Aᵀ·dC.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (sa, sb) = (self.shape(), other.shape());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shape mismatch: {sa:?} x {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(&self.data(), &other.data(), m, k, n);
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(
            "matmul",
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let a = pa.data().to_vec();
                let b = pb.data().to_vec();
                // dA[m×k] = g[m×n] · Bᵀ[n×k]
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for l in 0..k {
                            da[i * k + l] += gij * b[l * n + j];
                        }
                    }
                }
                // dB[k×n] = Aᵀ[k×m] · g[m×n]
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for l in 0..k {
                        let ail = a[i * k + l];
                        if ail == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[l * n + j] += ail * g[i * n + j];
                        }
                    }
                }
                pa.accumulate_grad(&da);
                pb.accumulate_grad(&db);
            }),
        )
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 2, "transpose needs 2-D, got {s:?}");
        let (r, c) = (s[0], s[1]);
        let src = self.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        drop(src);
        let p = self.clone();
        Tensor::from_op(
            "transpose",
            vec![c, r],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gp = vec![0.0; r * c];
                for j in 0..c {
                    for i in 0..r {
                        gp[i * c + j] = g[j * r + i];
                    }
                }
                p.accumulate_grad(&gp);
            }),
        )
    }

    /// Softmax over the last dimension with an optional additive mask
    /// (entries 0 or -1e30). A fully masked row yields exact zeros.
    pub fn softmax(&self, additive_mask: Option<&Tensor>) -> Tensor {
        let shape = self.shape();
        let n = *shape.last().expect("softmax on 0-d tensor");
        let rows = numel(&shape) / n;
        if let Some(m) = additive_mask {
            assert_eq!(m.shape(), shape, "softmax mask shape mismatch");
        }
        let x = self.data();
        let mask = additive_mask.map(|m| m.to_vec());
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let logits: Vec<f64> = match &mask {
                Some(m) => row
                    .iter()
                    .zip(&m[r * n..(r + 1) * n])
                    .map(|(v, a)| v + a)
                    .collect(),
                None => row.to_vec(),
            };
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if mx <= MASKED_OUT_THRESHOLD {
                continue; // fully masked: leave zeros
            }
            let mut z = 0.0;
            for (o, &l) in out[r * n..(r + 1) * n].iter_mut().zip(&logits) {
                let e = (l - mx).exp();
                *o = e;
                z += e;
            }
            for o in out[r * n..(r + 1) * n].iter_mut() {
                *o /= z;
            }
        }
        drop(x);
        let p = self.clone();
        let y = out.clone();
        Tensor::from_op(
            "softmax",
            shape.clone(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gp = vec![0.0; y.len()];
                for r in 0..rows {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        gp[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                p.accumulate_grad(&gp);
            }),
        )
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&self) -> Tensor {
        let shape = self.shape();
        let n = *shape.last().expect("log_softmax on 0-d tensor");
        let rows = numel(&shape) / n;
        let x = self.data();
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        drop(x);
        let p = self.clone();
        let y = out.clone();
        Tensor::from_op(
            "log_softmax",
            shape.clone(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gp = vec![0.0; y.len()];
                for r in 0..rows {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..n {
                        gp[r * n + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                p.accumulate_grad(&gp);
            }),
        )
    }

    /// Selects rows of a T×d tensor by a strictly increasing index list.
    /// Backward scatters gradients to the source rows.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 2, "gather_rows needs 2-D, got {s:?}");
        let (t, d) = (s[0], s[1]);
        for w in indices.windows(2) {
            assert!(w[0] < w[1], "gather_rows indices not strictly increasing: {indices:?}");
        }
        if let Some(&last) = indices.last() {
            assert!(last < t, "gather_rows index {last} out of range for {t} rows");
        }
        assert!(!indices.is_empty(), "gather_rows with empty index list");
        let src = self.data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        drop(src);
        let p = self.clone();
        let idx = indices.to_vec();
        Tensor::from_op(
            "gather_rows",
            vec![indices.len(), d],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gp = vec![0.0; t * d];
                for (k, &i) in idx.iter().enumerate() {
                    gp[i * d..(i + 1) * d].copy_from_slice(&g[k * d..(k + 1) * d]);
                }
                p.accumulate_grad(&gp);
            }),
        )
    }

    /// Column slice [start, end) of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 2, "slice_cols needs 2-D, got {s:?}");
        let (r, c) = (s[0], s[1]);
        assert!(start < end && end <= c, "slice_cols [{start},{end}) out of {c} cols");
        let w = end - start;
        let src = self.data();
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        drop(src);
        let p = self.clone();
        Tensor::from_op(
            "slice_cols",
            vec![r, w],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gp = vec![0.0; r * c];
                for i in 0..r {
                    gp[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                p.accumulate_grad(&gp);
            }),
        )
    }

    /// Per-row layer normalization with learned gain/bias (1×d tensors).
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 2, "layer_norm needs 2-D, got {s:?}");
        let (t, d) = (s[0], s[1]);
        assert_eq!(gamma.shape(), vec![1, d], "layer_norm gamma shape");
        assert_eq!(beta.shape(), vec![1, d], "layer_norm beta shape");
        let x = self.to_vec();
        let gm = gamma.to_vec();
        let bt = beta.to_vec();
        let mut out = vec![0.0; t * d];
        let mut xhat = vec![0.0; t * d];
        let mut inv_std = vec![0.0; t];
        for r in 0..t {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let h = (row[j] - mean) * istd;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gm[j] + bt[j];
            }
        }
        let (px, pg, pb) = (self.clone(), gamma.clone(), beta.clone());
        Tensor::from_op(
            "layer_norm",
            vec![t, d],
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let gm = pg.data().to_vec();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; t * d];
                for r in 0..t {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut m1 = 0.0; // mean of gamma·dy
                    let mut m2 = 0.0; // mean of gamma·dy·xhat
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let gg = gm[j] * gr[j];
                        m1 += gg;
                        m2 += gg * hr[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        dx[r * d + j] = (gm[j] * gr[j] - m1 - hr[j] * m2) * inv_std[r];
                    }
                }
                px.accumulate_grad(&dx);
                pg.accumulate_grad(&dgamma);
                pb.accumulate_grad(&dbeta);
            }),
        )
    }

    /// Sliding-window unfold along time with zero padding:
    /// out[t, j*C+c] = x[t*stride + j - pad, c]. Feeds matmul-based convs.
    pub fn unfold_time(&self, k: usize, stride: usize, pad: usize) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 2, "unfold_time needs 2-D, got {s:?}");
        let (t, c) = (s[0], s[1]);
        assert!(k >= 1 && stride >= 1);
        assert!(t + 2 * pad >= k, "kernel {k} longer than padded length {}", t + 2 * pad);
        let t_out = (t + 2 * pad - k) / stride + 1;
        let src = self.data();
        let mut data = vec![0.0; t_out * k * c];
        for to in 0..t_out {
            for j in 0..k {
                let ti = (to * stride + j) as isize - pad as isize;
                if ti < 0 || ti >= t as isize {
                    continue;
                }
                let ti = ti as usize;
                data[(to * k + j) * c..(to * k + j + 1) * c]
                    .copy_from_slice(&src[ti * c..(ti + 1) * c]);
            }
        }
        drop(src);
        let p = self.clone();
        Tensor::from_op(
            "unfold_time",
            vec![t_out, k * c],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gp = vec![0.0; t * c];
                for to in 0..t_out {
                    for j in 0..k {
                        let ti = (to * stride + j) as isize - pad as isize;
                        if ti < 0 || ti >= t as isize {
                            continue;
                        }
                        let ti = ti as usize;
                        for cc in 0..c {
                            gp[ti * c + cc] += g[(to * k + j) * c + cc];
                        }
                    }
                }
                p.accumulate_grad(&gp);
            }),
        )
    }

    /// Same-length depthwise 1-D convolution along time. `kernel` is k×C
    /// with odd k; symmetric zero padding.
    pub fn depthwise_conv(&self, kernel: &Tensor) -> Tensor {
        let s = self.shape();
        let ks = kernel.shape();
        assert_eq!(s.len(), 2, "depthwise_conv needs 2-D input, got {s:?}");
        assert_eq!(ks.len(), 2, "depthwise_conv kernel must be 2-D, got {ks:?}");
        let (t, c) = (s[0], s[1]);
        let k = ks[0];
        assert_eq!(ks[1], c, "depthwise kernel channels {} != input channels {c}", ks[1]);
        assert_eq!(k % 2, 1, "depthwise kernel length must be odd, got {k}");
        let pad = (k - 1) / 2;
        let x = self.to_vec();
        let ker = kernel.to_vec();
        let mut out = vec![0.0; t * c];
        for tt in 0..t {
            for j in 0..k {
                let ti = (tt + j) as isize - pad as isize;
                if ti < 0 || ti >= t as isize {
                    continue;
                }
                let ti = ti as usize;
                for cc in 0..c {
                    out[tt * c + cc] += ker[j * c + cc] * x[ti * c + cc];
                }
            }
        }
        let (px, pk) = (self.clone(), kernel.clone());
        Tensor::from_op(
            "depthwise_conv",
            vec![t, c],
            out,
            vec![self.clone(), kernel.clone()],
            Box::new(move |g| {
                let x = px.data().to_vec();
                let ker = pk.data().to_vec();
                let mut dx = vec![0.0; t * c];
                let mut dk = vec![0.0; k * c];
                for tt in 0..t {
                    for j in 0..k {
                        let ti = (tt + j) as isize - pad as isize;
                        if ti < 0 || ti >= t as isize {
                            continue;
                        }
                        let ti = ti as usize;
                        for cc in 0..c {
                            let gv = g[tt * c + cc];
                            dk[j * c + cc] += gv * x[ti * c + cc];
                            dx[ti * c + cc] += gv * ker[j * c + cc];
                        }
                    }
                }
                px.accumulate_grad(&dx);
                pk.accumulate_grad(&dk);
            }),
        )
    }
}

/// Additive-mask value for disallowed attention logits.
pub const MASK_NEG: f64 = -1e30;
const MASKED_OUT_THRESHOLD: f64 = -1e29;

/// Column-wise concatenation of 2-D tensors with equal row counts.
pub fn concat_cols(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "concat_cols of nothing");
    let r = parts[0].shape()[0];
    let widths: Vec<usize> = parts
        .iter()
        .map(|p| {
            let s = p.shape();
            assert_eq!(s.len(), 2, "concat_cols needs 2-D parts");
            assert_eq!(s[0], r, "concat_cols row mismatch: {} vs {r}", s[0]);
            s[1]
        })
        .collect();
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(r * total);
    for i in 0..r {
        for p in parts {
            let d = p.data();
            let w = p.shape()[1];
            data.extend_from_slice(&d[i * w..(i + 1) * w]);
        }
    }
    let handles: Vec<Tensor> = parts.to_vec();
    let widths_b = widths.clone();
    Tensor::from_op(
        "concat_cols",
        vec![r, total],
        data,
        parts.to_vec(),
        Box::new(move |g| {
            let mut off = 0;
            for (p, &w) in handles.iter().zip(&widths_b) {
                let mut gp = vec![0.0; r * w];
                for i in 0..r {
                    gp[i * w..(i + 1) * w].copy_from_slice(&g[i * total + off..i * total + off + w]);
                }
                p.accumulate_grad(&gp);
                off += w;
            }
        }),
    )
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += ail * brow[j];
            }
        }
    }
    out
}

/// Gaussian-initialized tensor (Box-Muller), for parameters and fixtures.
pub fn randn(shape: &[usize], std: f64, rng: &mut impl rand::Rng) -> Tensor {
    assert!(std.is_finite() && std >= 0.0, "invalid std {std}");
    let data: Vec<f64> = (0..numel(shape))
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen::<f64>();
            std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(i2.matmul(&a).to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_scalar_case() {
        let a = Tensor::from_vec(&[1, 1], vec![2.0]);
        let b = Tensor::from_vec(&[1, 1], vec![3.0]);
        assert_eq!(a.matmul(&b).to_vec(), vec![6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let m = rng.gen_range(1..=8);
            let k = rng.gen_range(1..=8);
            let n = rng.gen_range(1..=8);
            let a = randn(&[m, k], 1.0, &mut rng);
            let b = randn(&[k, n], 1.0, &mut rng);
            let c = a.matmul(&b);
            // Independent triple-loop oracle (ijl order, scalar accumulate).
            let (av, bv, cv) = (a.to_vec(), b.to_vec(), c.to_vec());
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += av[i * k + l] * bv[l * n + j];
                    }
                    assert!((acc - cv[i * n + j]).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    #[should_panic(expected = "matmul shape mismatch")]
    fn matmul_shape_mismatch_panics() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let _ = a.matmul(&b);
    }

    #[test]
    fn add_zero_is_identity() {
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 3.5]);
        let z = Tensor::zeros(&[3]);
        assert_eq!(x.add(&z).to_vec(), x.to_vec());
    }

    #[test]
    fn swish_at_zero() {
        let x = Tensor::from_vec(&[1], vec![0.0]);
        assert_eq!(x.swish().to_vec(), vec![0.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let x = Tensor::from_vec(&[1], vec![0.0]).requires_grad();
        let y = x.sigmoid();
        y.sum().backward();
        let g = x.grad().unwrap()[0];
        assert!((g - 0.25).abs() <= 1e-6, "sigmoid'(0) = {g}");
    }

    #[test]
    #[should_panic(expected = "log of non-positive")]
    fn log_rejects_nonpositive() {
        let _ = Tensor::from_vec(&[2], vec![1.0, 0.0]).log();
    }

    #[test]
    fn softmax_uniform_and_single() {
        let y = Tensor::from_vec(&[3], vec![0.0, 0.0, 0.0]).softmax(None);
        for v in y.to_vec() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = Tensor::from_vec(&[1], vec![42.0]).softmax(None);
        assert_eq!(y.to_vec(), vec![1.0]);
    }

    #[test]
    fn softmax_fully_masked_row_is_zero() {
        let x = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]);
        let m = Tensor::from_vec(&[1, 3], vec![MASK_NEG; 3]);
        assert_eq!(x.softmax(Some(&m)).to_vec(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_or_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let n = rng.gen_range(1..=6);
            let rows = rng.gen_range(1..=4);
            let x = randn(&[rows, n], 2.0, &mut rng);
            let mask_data: Vec<f64> = (0..rows * n)
                .map(|_| if rng.gen_bool(0.3) { MASK_NEG } else { 0.0 })
                .collect();
            let m = Tensor::from_vec(&[rows, n], mask_data.clone());
            let y = x.softmax(Some(&m)).to_vec();
            for r in 0..rows {
                let row = &y[r * n..(r + 1) * n];
                let fully_masked = mask_data[r * n..(r + 1) * n].iter().all(|&v| v == MASK_NEG);
                let s: f64 = row.iter().sum();
                assert!(row.iter().all(|&v| v >= 0.0));
                if fully_masked {
                    assert_eq!(s, 0.0);
                } else {
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gather_rows_identity_and_last_row() {
        let x = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(x.gather_rows(&[0, 1, 2]).to_vec(), x.to_vec());
        assert_eq!(x.gather_rows(&[2]).to_vec(), vec![5.0, 6.0]);
    }

    #[test]
    fn gather_rows_backward_scatters() {
        let x = Tensor::from_vec(&[3, 2], vec![0.0; 6]).requires_grad();
        x.gather_rows(&[0, 2]).sum().backward();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    #[should_panic(expected = "not strictly increasing")]
    fn gather_rows_rejects_unsorted() {
        let x = Tensor::zeros(&[3, 2]);
        let _ = x.gather_rows(&[2, 0]);
    }

    #[test]
    fn gather_scatter_conserves_gradient_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let t = rng.gen_range(2..=8);
            let d = rng.gen_range(1..=4);
            let x = randn(&[t, d], 1.0, &mut rng).requires_grad();
            let n_idx = rng.gen_range(1..=t);
            let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, t, n_idx).into_vec();
            idx.sort_unstable();
            let y = x.gather_rows(&idx);
            // Incoming grad: all ones over |S|·d entries.
            y.sum().backward();
            let mass: f64 = x.grad().unwrap().iter().sum();
            assert!((mass - (n_idx * d) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let x = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).requires_grad();
        x.sum().backward();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_quadratic() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).requires_grad();
        x.mul(&x).sum().backward();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_without_reset() {
        let x = Tensor::from_vec(&[2], vec![1.0, 1.0]).requires_grad();
        x.sum().backward();
        x.sum().backward();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    #[should_panic(expected = "requires a scalar loss")]
    fn backward_rejects_non_scalar() {
        let x = Tensor::from_vec(&[2], vec![1.0, 1.0]).requires_grad();
        x.mul(&x).backward();
    }

    #[test]
    fn elementwise_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let x = randn(&[2, 3], 1.0, &mut rng).requires_grad();
            let y = randn(&[2, 3], 1.0, &mut rng).requires_grad();
            check_gradients(
                &[x.clone(), y.clone()],
                || {
                    x.mul(&y)
                        .add(&x.sigmoid())
                        .sub(&y.swish())
                        .add(&x.scale(0.3).exp())
                        .sum()
                },
                1e-5,
                1e-4,
            );
        }
    }

    #[test]
    fn matmul_softmax_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..10 {
            let a = randn(&[3, 4], 1.0, &mut rng).requires_grad();
            let b = randn(&[4, 2], 1.0, &mut rng).requires_grad();
            check_gradients(
                &[a.clone(), b.clone()],
                || a.matmul(&b).softmax(None).mul(&a.matmul(&b)).sum(),
                1e-5,
                1e-4,
            );
        }
    }

    #[test]
    fn structural_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let x = randn(&[5, 4], 1.0, &mut rng).requires_grad();
            let k = randn(&[3, 4], 0.5, &mut rng).requires_grad();
            let g = randn(&[1, 4], 0.5, &mut rng).requires_grad();
            let b = randn(&[1, 4], 0.5, &mut rng).requires_grad();
            check_gradients(
                &[x.clone(), k.clone(), g.clone(), b.clone()],
                || {
                    let ln = x.layer_norm(&g, &b, 1e-5);
                    let dw = ln.depthwise_conv(&k);
                    let uf = dw.unfold_time(3, 2, 1);
                    let sel = uf.gather_rows(&[0, 2]);
                    concat_cols(&[sel.slice_cols(0, 4), sel.slice_cols(4, 12)])
                        .log_softmax()
                        .mul(&Tensor::from_vec(&[2, 12], (0..24).map(|i| i as f64 * 0.1).collect()))
                        .sum()
                },
                1e-5,
                1e-4,
            );
        }
    }

    #[test]
    fn unfold_time_ceiling_lengths() {
        let x = Tensor::zeros(&[10, 2]);
        assert_eq!(x.unfold_time(3, 2, 1).shape(), vec![5, 6]);
        let y = Tensor::zeros(&[5, 2]);
        assert_eq!(y.unfold_time(3, 2, 1).shape(), vec![3, 6]);
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn non_finite_result_panics() {
        let x = Tensor::from_vec(&[1], vec![1e308]);
        let _ = x.mul(&x); // overflows to +inf
    }
}
