//! The Wengert tape: forward ops append nodes, `backward` replays them once
//! in reverse. One tape per training step; tapes are cheap to build and are
//! confined to a single thread.

use super::kernels as k;
use super::Tensor;
use crate::{Error, Result};

/// Handle to a node on a tape. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Var },
    Relu { x: Var },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    MeanPool { x: Var },
    Flatten { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Mul { a: Var, b: Var },
    SoftmaxTemp { x: Var, gamma: f64 },
    LogSoftmaxTemp { x: Var, gamma: f64 },
    Log { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    /// Fused temperature softmax + label smoothing + cross entropy, mean over
    /// the batch. `probs` is cached at forward time for the backward rule.
    SmoothedCe { logits: Var, targets: Vec<usize>, epsilon: f64, gamma: f64, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    /// True when this node or any ancestor requires grad; backward skips the rest.
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    done: bool,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    /// Scalar convenience accessor; panics if the node is not a single value.
    pub fn scalar(&self, v: Var) -> f64 {
        assert_eq!(self.node(v).data.len(), 1, "scalar() on non-scalar node");
        self.node(v).data[0]
    }

    /// Copies a node out as a plain tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::from_vec(&self.node(v).shape, self.node(v).data.clone()).unwrap()
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Shape {
                op: "leaf",
                detail: format!("shape {:?} vs data length {}", shape, data.len()),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, requires_grad))
    }

    /// Copies a tensor onto the tape, inheriting its requires_grad flag.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.leaf(t.shape(), t.data().to_vec(), t.requires_grad())
            .expect("tensor is internally consistent")
    }

    /// Copies a tensor onto the tape as a trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.shape(), t.data().to_vec(), true)
            .expect("tensor is internally consistent")
    }

    // ── ops ─────────────────────────────────────────────────────────────

    fn dims4(&self, v: Var, op: &'static str, role: &str) -> Result<[usize; 4]> {
        let s = self.shape(v);
        if s.len() != 4 {
            return Err(Error::Shape {
                op,
                detail: format!("{role} must be 4-d, got {s:?}"),
            });
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::NonPositiveStride { op: "conv2d" });
        }
        let [bsz, cin, h, wd] = self.dims4(x, "conv2d", "input")?;
        let [cout, kcin, kh, kw] = self.dims4(w, "conv2d", "kernel")?;
        if kcin != cin {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("input has {cin} channels, kernel expects {kcin}"),
            });
        }
        if self.shape(b) != [cout] {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("bias shape {:?}, kernel has {cout} output channels", self.shape(b)),
            });
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, wd + 2 * pad),
            });
        }
        let oh = k::conv_out_dim(h, kh, stride, pad);
        let ow = k::conv_out_dim(wd, kw, stride, pad);
        let mut out = vec![0.0; bsz * cout * oh * ow];
        k::conv2d_fwd(
            self.data(x), bsz, cin, h, wd,
            self.data(w), cout, kh, kw,
            self.data(b), stride, pad, &mut out,
        );
        let needs = self.node(x).needs_grad || self.node(w).needs_grad || self.node(b).needs_grad;
        Ok(self.push(vec![bsz, cout, oh, ow], out, Op::Conv2d { x, w, b, stride, pad }, needs))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::NonPositiveStride { op: "conv_transpose2d" });
        }
        let [bsz, cin, h, wd] = self.dims4(x, "conv_transpose2d", "input")?;
        let [kcin, cout, kh, kw] = self.dims4(w, "conv_transpose2d", "kernel")?;
        if kcin != cin {
            return Err(Error::Shape {
                op: "conv_transpose2d",
                detail: format!("input has {cin} channels, kernel expects {kcin}"),
            });
        }
        if self.shape(b) != [cout] {
            return Err(Error::Shape {
                op: "conv_transpose2d",
                detail: format!("bias shape {:?}, kernel has {cout} output channels", self.shape(b)),
            });
        }
        if (h - 1) * stride + kh <= 2 * pad || (wd - 1) * stride + kw <= 2 * pad {
            return Err(Error::Shape {
                op: "conv_transpose2d",
                detail: "padding consumes the entire output".into(),
            });
        }
        let oh = k::conv_transpose_out_dim(h, kh, stride, pad);
        let ow = k::conv_transpose_out_dim(wd, kw, stride, pad);
        let mut out = vec![0.0; bsz * cout * oh * ow];
        k::conv_transpose2d_fwd(
            self.data(x), bsz, cin, h, wd,
            self.data(w), cout, kh, kw,
            self.data(b), stride, pad, &mut out,
        );
        let needs = self.node(x).needs_grad || self.node(w).needs_grad || self.node(b).needs_grad;
        Ok(self.push(vec![bsz, cout, oh, ow], out, Op::ConvTranspose2d { x, w, b, stride, pad }, needs))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::Shape {
                op: "linear",
                detail: format!("need 2-d features and weight, got {xs:?} and {ws:?}"),
            });
        }
        let (bsz, d) = (xs[0], xs[1]);
        let (wd, kk) = (ws[0], ws[1]);
        if d != wd {
            return Err(Error::Shape {
                op: "linear",
                detail: format!("features have dim {d}, weight expects {wd}"),
            });
        }
        if self.shape(b) != [kk] {
            return Err(Error::Shape {
                op: "linear",
                detail: format!("bias shape {:?}, weight has {kk} outputs", self.shape(b)),
            });
        }
        let mut out = vec![0.0; bsz * kk];
        k::linear_fwd(self.data(x), bsz, d, self.data(w), kk, self.data(b), &mut out);
        let needs = self.node(x).needs_grad || self.node(w).needs_grad || self.node(b).needs_grad;
        Ok(self.push(vec![bsz, kk], out, Op::Linear { x, w, b }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.node(x).needs_grad;
        self.push(shape, out, Op::Relu { x }, needs)
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let [bsz, c, h, w] = self.dims4(x, "max_pool2", "input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape {
                op: "max_pool2",
                detail: format!("spatial dims must be even, got {h}x{w}"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; bsz * c * oh * ow];
        let mut argmax = vec![0u32; bsz * c * oh * ow];
        k::max_pool2_fwd(self.data(x), bsz, c, h, w, &mut out, &mut argmax);
        let needs = self.node(x).needs_grad;
        Ok(self.push(vec![bsz, c, oh, ow], out, Op::MaxPool2 { x, argmax }, needs))
    }

    /// Global spatial mean pool [B,C,H,W] -> [B,C].
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let [bsz, c, h, w] = self.dims4(x, "mean_pool", "input")?;
        let mut out = vec![0.0; bsz * c];
        k::mean_pool_spatial_fwd(self.data(x), bsz, c, h, w, &mut out);
        let needs = self.node(x).needs_grad;
        Ok(self.push(vec![bsz, c], out, Op::MeanPool { x }, needs))
    }

    /// Collapses all trailing dims: [B, ...] -> [B, prod].
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::Shape {
                op: "flatten",
                detail: format!("need at least 2 dims, got {s:?}"),
            });
        }
        let bsz = s[0];
        let rest: usize = s[1..].iter().product();
        let data = self.data(x).to_vec();
        let needs = self.node(x).needs_grad;
        Ok(self.push(vec![bsz, rest], data, Op::Flatten { x }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "add",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(shape, out, Op::Add { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::InvalidArg(format!("scale factor must be finite, got {c}")));
        }
        let out: Vec<f64> = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.node(x).needs_grad;
        Ok(self.push(shape, out, Op::Scale { x, c }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "mul",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(shape, out, Op::Mul { a, b }, needs))
    }

    /// Row-wise softmax(z / gamma) over a [B,K] tensor.
    pub fn softmax_temp(&mut self, x: Var, gamma: f64) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x, "softmax_temp")?;
        check_gamma(gamma)?;
        let mut out = vec![0.0; rows * cols];
        k::softmax_temp_rows(self.data(x), rows, cols, gamma, &mut out);
        let needs = self.node(x).needs_grad;
        Ok(self.push(vec![rows, cols], out, Op::SoftmaxTemp { x, gamma }, needs))
    }

    pub fn log_softmax_temp(&mut self, x: Var, gamma: f64) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x, "log_softmax_temp")?;
        check_gamma(gamma)?;
        let mut out = vec![0.0; rows * cols];
        k::log_softmax_temp_rows(self.data(x), rows, cols, gamma, &mut out);
        let needs = self.node(x).needs_grad;
        Ok(self.push(vec![rows, cols], out, Op::LogSoftmaxTemp { x, gamma }, needs))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(pos) = self.data(x).iter().position(|&v| v <= 0.0) {
            return Err(Error::InvalidArg(format!(
                "log of non-positive value {} at flat index {pos}",
                self.data(x)[pos]
            )));
        }
        let out: Vec<f64> = self.data(x).iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.node(x).needs_grad;
        Ok(self.push(shape, out, Op::Log { x }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let needs = self.node(x).needs_grad;
        self.push(vec![1], vec![s], Op::Sum { x }, needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.data(x).len() as f64;
        let s: f64 = self.data(x).iter().sum();
        let needs = self.node(x).needs_grad;
        self.push(vec![1], vec![s / n], Op::Mean { x }, needs)
    }

    /// Label-smoothed cross entropy with temperature, mean over the batch,
    /// fused through log-sum-exp. Targets are class indices into the columns.
    pub fn smoothed_ce(&mut self, logits: Var, targets: &[usize], epsilon: f64, gamma: f64) -> Result<Var> {
        let (rows, cols) = self.rows_cols(logits, "smoothed_ce")?;
        check_gamma(gamma)?;
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::InvalidArg(format!("epsilon must be in [0,1), got {epsilon}")));
        }
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "smoothed_ce",
                detail: format!("{} targets for {} rows", targets.len(), rows),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::InvalidArg(format!("target {bad} out of range for {cols} classes")));
        }
        let mut logp = vec![0.0; rows * cols];
        k::log_softmax_temp_rows(self.data(logits), rows, cols, gamma, &mut logp);
        let mut probs = vec![0.0; rows * cols];
        for (p, &lp) in probs.iter_mut().zip(&logp) {
            *p = lp.exp();
        }
        let off = epsilon / cols as f64;
        let on = 1.0 - epsilon + off;
        let mut total = 0.0;
        for r in 0..rows {
            let lrow = &logp[r * cols..(r + 1) * cols];
            let mut row_loss = 0.0;
            for (c, &lp) in lrow.iter().enumerate() {
                let y = if c == targets[r] { on } else { off };
                row_loss -= y * lp;
            }
            total += row_loss;
        }
        let loss = total / rows as f64;
        let needs = self.node(logits).needs_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SmoothedCe { logits, targets: targets.to_vec(), epsilon, gamma, probs },
            needs,
        ))
    }

    fn rows_cols(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Shape {
                op,
                detail: format!("need a 2-d tensor, got {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of every node that needs
    /// one are accumulated; leaves that do not require grad may still receive
    /// an internal gradient if an ancestor path demands it, but only
    /// `requires_grad` leaves are meant to be harvested.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.done {
            return Err(Error::BackwardConsumed);
        }
        let numel = self.node(loss).data.len();
        if numel != 1 {
            return Err(Error::NonScalarLoss { numel });
        }
        self.done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of a node after `backward`. `None` when no gradient flowed
    /// (non-participating or grad-free subgraphs).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Writes the tape gradient of `var` into the tensor's grad slot.
    /// Non-participating parameters get zeros, per the contract that every
    /// requires_grad tensor holds a gradient after backward.
    pub fn harvest_into(&self, var: Var, t: &mut Tensor) {
        debug_assert!(t.requires_grad());
        match self.grad(var) {
            Some(g) => t.set_grad(Some(g.to_vec())),
            None => t.set_grad(Some(vec![0.0; t.numel()])),
        }
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, n: usize) -> &mut [f64] {
        grads[idx].get_or_insert_with(|| vec![0.0; n]).as_mut_slice()
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let [bsz, cin, h, wd] = [self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2], self.shape(*x)[3]];
                let [cout, _, kh, kw] = [self.shape(*w)[0], self.shape(*w)[1], self.shape(*w)[2], self.shape(*w)[3]];
                let (oh, ow) = (node.shape[2], node.shape[3]);
                if self.node(*x).needs_grad {
                    let d_inp = Self::accumulate(grads, x.0, bsz * cin * h * wd);
                    k::conv2d_bwd_input(self.data(*w), bsz, cin, h, wd, cout, kh, kw, *stride, *pad, g, d_inp);
                }
                if self.node(*w).needs_grad {
                    let d_ker = Self::accumulate(grads, w.0, cout * cin * kh * kw);
                    k::conv2d_bwd_kernel(self.data(*x), bsz, cin, h, wd, cout, kh, kw, *stride, *pad, g, d_ker);
                }
                if self.node(*b).needs_grad {
                    let d_bias = Self::accumulate(grads, b.0, cout);
                    k::conv2d_bwd_bias(g, bsz, cout, oh, ow, d_bias);
                }
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let [bsz, cin, h, wd] = [self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2], self.shape(*x)[3]];
                let [_, cout, kh, kw] = [self.shape(*w)[0], self.shape(*w)[1], self.shape(*w)[2], self.shape(*w)[3]];
                let (oh, ow) = (node.shape[2], node.shape[3]);
                if self.node(*x).needs_grad {
                    let d_inp = Self::accumulate(grads, x.0, bsz * cin * h * wd);
                    k::conv_transpose2d_bwd_input(self.data(*w), bsz, cin, h, wd, cout, kh, kw, *stride, *pad, g, d_inp);
                }
                if self.node(*w).needs_grad {
                    let d_ker = Self::accumulate(grads, w.0, cin * cout * kh * kw);
                    k::conv_transpose2d_bwd_kernel(self.data(*x), bsz, cin, h, wd, cout, kh, kw, *stride, *pad, g, d_ker);
                }
                if self.node(*b).needs_grad {
                    let d_bias = Self::accumulate(grads, b.0, cout);
                    k::conv2d_bwd_bias(g, bsz, cout, oh, ow, d_bias);
                }
            }
            Op::Linear { x, w, b } => {
                let (bsz, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let kk = self.shape(*w)[1];
                if self.node(*x).needs_grad {
                    let d_x = Self::accumulate(grads, x.0, bsz * d);
                    k::linear_bwd_input(self.data(*w), bsz, d, kk, g, d_x);
                }
                if self.node(*w).needs_grad {
                    let d_w = Self::accumulate(grads, w.0, d * kk);
                    k::linear_bwd_weight(self.data(*x), bsz, d, kk, g, d_w);
                }
                if self.node(*b).needs_grad {
                    let d_b = Self::accumulate(grads, b.0, kk);
                    k::linear_bwd_bias(g, bsz, kk, d_b);
                }
            }
            Op::Relu { x } => {
                if self.node(*x).needs_grad {
                    let xd = self.data(*x);
                    let d_x = Self::accumulate(grads, x.0, xd.len());
                    for j in 0..xd.len() {
                        if xd[j] > 0.0 {
                            d_x[j] += g[j];
                        }
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.node(*x).needs_grad {
                    let n = self.data(*x).len();
                    let d_x = Self::accumulate(grads, x.0, n);
                    k::max_pool2_bwd(argmax, g, d_x);
                }
            }
            Op::MeanPool { x } => {
                if self.node(*x).needs_grad {
                    let s = self.shape(*x);
                    let [bsz, c, h, w] = [s[0], s[1], s[2], s[3]];
                    let d_x = Self::accumulate(grads, x.0, bsz * c * h * w);
                    k::mean_pool_spatial_bwd(g, bsz, c, h, w, d_x);
                }
            }
            Op::Flatten { x } => {
                if self.node(*x).needs_grad {
                    let d_x = Self::accumulate(grads, x.0, g.len());
                    for j in 0..g.len() {
                        d_x[j] += g[j];
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.node(*v).needs_grad {
                        let d = Self::accumulate(grads, v.0, g.len());
                        for j in 0..g.len() {
                            d[j] += g[j];
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.node(*x).needs_grad {
                    let d_x = Self::accumulate(grads, x.0, g.len());
                    for j in 0..g.len() {
                        d_x[j] += g[j] * c;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.node(*a).needs_grad {
                    let bd = self.data(*b);
                    let d_a = Self::accumulate(grads, a.0, g.len());
                    for j in 0..g.len() {
                        d_a[j] += g[j] * bd[j];
                    }
                }
                if self.node(*b).needs_grad {
                    let ad = self.data(*a);
                    let d_b = Self::accumulate(grads, b.0, g.len());
                    for j in 0..g.len() {
                        d_b[j] += g[j] * ad[j];
                    }
                }
            }
            Op::SoftmaxTemp { x, gamma } => {
                if self.node(*x).needs_grad {
                    let (rows, cols) = (node.shape[0], node.shape[1]);
                    let p = &node.data;
                    let d_x = Self::accumulate(grads, x.0, rows * cols);
                    for r in 0..rows {
                        let prow = &p[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = prow.iter().zip(grow).map(|(pv, gv)| pv * gv).sum();
                        for c in 0..cols {
                            d_x[r * cols + c] += prow[c] * (grow[c] - dot) / gamma;
                        }
                    }
                }
            }
            Op::LogSoftmaxTemp { x, gamma } => {
                if self.node(*x).needs_grad {
                    let (rows, cols) = (node.shape[0], node.shape[1]);
                    let d_x = Self::accumulate(grads, x.0, rows * cols);
                    for r in 0..rows {
                        let lrow = &node.data[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let gsum: f64 = grow.iter().sum();
                        for c in 0..cols {
                            d_x[r * cols + c] += (grow[c] - lrow[c].exp() * gsum) / gamma;
                        }
                    }
                }
            }
            Op::Log { x } => {
                if self.node(*x).needs_grad {
                    let xd = self.data(*x);
                    let d_x = Self::accumulate(grads, x.0, xd.len());
                    for j in 0..xd.len() {
                        d_x[j] += g[j] / xd[j];
                    }
                }
            }
            Op::Sum { x } => {
                if self.node(*x).needs_grad {
                    let n = self.data(*x).len();
                    let d_x = Self::accumulate(grads, x.0, n);
                    for v in d_x.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::Mean { x } => {
                if self.node(*x).needs_grad {
                    let n = self.data(*x).len();
                    let gv = g[0] / n as f64;
                    let d_x = Self::accumulate(grads, x.0, n);
                    for v in d_x.iter_mut() {
                        *v += gv;
                    }
                }
            }
            Op::SmoothedCe { logits, targets, epsilon, gamma, probs } => {
                if self.node(*logits).needs_grad {
                    let s = self.shape(*logits);
                    let (rows, cols) = (s[0], s[1]);
                    let off = epsilon / cols as f64;
                    let on = 1.0 - epsilon + off;
                    let scale = g[0] / (rows as f64 * gamma);
                    let d_l = Self::accumulate(grads, logits.0, rows * cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let y = if c == targets[r] { on } else { off };
                            d_l[r * cols + c] += scale * (probs[r * cols + c] - y);
                        }
                    }
                }
            }
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::InvalidArg(format!("temperature must be positive and finite, got {gamma}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        use rand_distr::{Distribution, StandardNormal};
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { numel: 2 }));
    }

    #[test]
    fn backward_twice_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::BackwardConsumed)));
    }

    #[test]
    fn sum_and_scale_hand_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[3], vec![1.0, -2.0, 3.0], true).unwrap();
        let y = tape.scale(x, 2.5).unwrap();
        let s = tape.sum(y);
        assert_eq!(tape.scalar(s), 5.0);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.5, 2.5, 2.5]);
    }

    #[test]
    fn mul_gradient_is_other_operand() {
        let mut tape = Tape::new();
        let a = tape.leaf(&[2], vec![3.0, 4.0], true).unwrap();
        let b = tape.leaf(&[2], vec![5.0, 6.0], true).unwrap();
        let m = tape.mul(a, b).unwrap();
        let s = tape.sum(m);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[5.0, 6.0]);
        assert_eq!(tape.grad(b).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn grads_accumulate_on_reuse() {
        // y = x + x: dy/dx = 2.
        let mut tape = Tape::new();
        let x = tape.leaf(&[2], vec![1.0, 1.0], true).unwrap();
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn non_participating_leaf_has_no_grad_entry() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let unused = tape.leaf(&[2], vec![9.0, 9.0], true).unwrap();
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(unused).is_none());
        let mut t = Tensor::zeros(&[2]).with_grad();
        tape.harvest_into(unused, &mut t);
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn no_grad_inputs_are_skipped() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        let w = tape.leaf(&[2, 3], vec![0.1; 6], true).unwrap();
        let b = tape.leaf(&[3], vec![0.0; 3], true).unwrap();
        let y = tape.linear(x, w, b).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
        assert!(tape.grad(w).is_some());
    }

    #[test]
    fn shape_errors_name_dimensions() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[1, 3, 4, 4], vec![0.0; 48], false).unwrap();
        let w = tape.leaf(&[2, 4, 3, 3], vec![0.0; 72], false).unwrap();
        let b = tape.leaf(&[2], vec![0.0; 2], false).unwrap();
        let err = tape.conv2d(x, w, b, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3 channels") && msg.contains("4"), "{msg}");
        assert!(matches!(
            tape.conv2d(x, w, b, 0, 1),
            Err(Error::NonPositiveStride { .. })
        ));
    }

    #[test]
    fn smoothed_ce_epsilon_zero_is_plain_ce() {
        // logits [0,0], target 0 -> ln 2.
        let mut tape = Tape::new();
        let z = tape.leaf(&[1, 2], vec![0.0, 0.0], true).unwrap();
        let l = tape.smoothed_ce(z, &[0], 0.0, 1.0).unwrap();
        assert!((tape.scalar(l) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn smoothed_ce_matches_unfused_composition() {
        // Compose softmax -> log -> mul(targets) -> sum -> scale and compare
        // value and gradient against the fused op on well-conditioned logits.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let (bsz, n) = (4, 6);
            let logits = randn(&mut rng, bsz * n);
            let targets: Vec<usize> = (0..bsz).map(|_| rng.gen_range(0..n)).collect();
            let eps = 0.1;
            let gamma = 0.8;

            let mut t1 = Tape::new();
            let z1 = t1.leaf(&[bsz, n], logits.clone(), true).unwrap();
            let l1 = t1.smoothed_ce(z1, &targets, eps, gamma).unwrap();
            let v1 = t1.scalar(l1);
            t1.backward(l1).unwrap();
            let g1 = t1.grad(z1).unwrap().to_vec();

            let off = eps / n as f64;
            let on = 1.0 - eps + off;
            let mut y = vec![off; bsz * n];
            for (r, &t) in targets.iter().enumerate() {
                y[r * n + t] = on;
            }
            let mut t2 = Tape::new();
            let z2 = t2.leaf(&[bsz, n], logits, true).unwrap();
            let p = t2.softmax_temp(z2, gamma).unwrap();
            let lp = t2.log(p).unwrap();
            let yv = t2.leaf(&[bsz, n], y, false).unwrap();
            let prod = t2.mul(yv, lp).unwrap();
            let s = t2.sum(prod);
            let l2 = t2.scale(s, -1.0 / bsz as f64).unwrap();
            let v2 = t2.scalar(l2);
            t2.backward(l2).unwrap();
            let g2 = t2.grad(z2).unwrap().to_vec();

            assert!((v1 - v2).abs() < 1e-12, "{v1} vs {v2}");
            for (a, b) in g1.iter().zip(&g2) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    // ── finite-difference checks, one per differentiable op ────────────
    //
    // Each builds a tiny graph ending in a scalar and checks every
    // coordinate over many seeds. Inputs for kinked ops (relu, max pool)
    // are sampled away from the kink.

    fn gradcheck_op<F>(seeds: std::ops::Range<u64>, shape: &[usize], sampler: fn(&mut ChaCha8Rng, usize) -> Vec<f64>, f: F)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        for seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = sampler(&mut rng, shape.iter().product());
            let mut params = vec![Tensor::from_vec(shape, data).unwrap().with_grad()];
            let max_err = finite_diff_check(
                &mut |ps: &mut [Tensor], want_grads: bool| {
                    let mut tape = Tape::new();
                    let x = tape.param(&ps[0]);
                    let loss = f(&mut tape, x);
                    let v = tape.scalar(loss);
                    if want_grads {
                        tape.backward(loss)?;
                        tape.harvest_into(x, &mut ps[0]);
                    }
                    Ok(v)
                },
                &mut params,
                1e-5,
                0,
                seed,
            )
            .unwrap();
            assert!(max_err < 1e-4, "seed {seed}: max rel err {max_err}");
        }
    }

    fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(0.05..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect()
    }

    fn distinct_in_windows(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        // Uniform draws, regenerated until no 2x2 window has a near-tie.
        // Keeps max-pool's argmax stable under +-h perturbation.
        loop {
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let ok = v.chunks(4).all(|c| {
                for i in 0..c.len() {
                    for j in i + 1..c.len() {
                        if (c[i] - c[j]).abs() < 1e-3 {
                            return false;
                        }
                    }
                }
                true
            });
            if ok {
                return v;
            }
        }
    }

    #[test]
    fn gradcheck_conv2d_all_inputs() {
        // Checks input, kernel, and bias gradients together.
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let (bsz, cin, h, w, cout, kk) = (2, 2, 5, 5, 3, 3);
            let mut params = vec![
                Tensor::from_vec(&[bsz, cin, h, w], randn(&mut rng, bsz * cin * h * w)).unwrap().with_grad(),
                Tensor::from_vec(&[cout, cin, kk, kk], randn(&mut rng, cout * cin * kk * kk)).unwrap().with_grad(),
                Tensor::from_vec(&[cout], randn(&mut rng, cout)).unwrap().with_grad(),
            ];
            let max_err = finite_diff_check(
                &mut |ps: &mut [Tensor], want: bool| {
                    let mut tape = Tape::new();
                    let x = tape.param(&ps[0]);
                    let kv = tape.param(&ps[1]);
                    let b = tape.param(&ps[2]);
                    let y = tape.conv2d(x, kv, b, 2, 1)?;
                    let loss = tape.mean(y);
                    let v = tape.scalar(loss);
                    if want {
                        tape.backward(loss)?;
                        tape.harvest_into(x, &mut ps[0]);
                        tape.harvest_into(kv, &mut ps[1]);
                        tape.harvest_into(b, &mut ps[2]);
                    }
                    Ok(v)
                },
                &mut params,
                1e-5,
                0,
                seed,
            )
            .unwrap();
            assert!(max_err < 1e-4, "seed {seed}: {max_err}");
        }
    }

    #[test]
    fn gradcheck_conv_transpose2d_all_inputs() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
            let (bsz, cin, h, w, cout, kk) = (1, 2, 3, 3, 2, 4);
            let mut params = vec![
                Tensor::from_vec(&[bsz, cin, h, w], randn(&mut rng, bsz * cin * h * w)).unwrap().with_grad(),
                Tensor::from_vec(&[cin, cout, kk, kk], randn(&mut rng, cin * cout * kk * kk)).unwrap().with_grad(),
                Tensor::from_vec(&[cout], randn(&mut rng, cout)).unwrap().with_grad(),
            ];
            let max_err = finite_diff_check(
                &mut |ps: &mut [Tensor], want: bool| {
                    let mut tape = Tape::new();
                    let x = tape.param(&ps[0]);
                    let kv = tape.param(&ps[1]);
                    let b = tape.param(&ps[2]);
                    let y = tape.conv_transpose2d(x, kv, b, 2, 1)?;
                    let loss = tape.mean(y);
                    let v = tape.scalar(loss);
                    if want {
                        tape.backward(loss)?;
                        tape.harvest_into(x, &mut ps[0]);
                        tape.harvest_into(kv, &mut ps[1]);
                        tape.harvest_into(b, &mut ps[2]);
                    }
                    Ok(v)
                },
                &mut params,
                1e-5,
                0,
                seed,
            )
            .unwrap();
            assert!(max_err < 1e-4, "seed {seed}: {max_err}");
        }
    }

    #[test]
    fn gradcheck_linear_all_inputs() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
            let (bsz, d, kk) = (3, 4, 5);
            let mut params = vec![
                Tensor::from_vec(&[bsz, d], randn(&mut rng, bsz * d)).unwrap().with_grad(),
                Tensor::from_vec(&[d, kk], randn(&mut rng, d * kk)).unwrap().with_grad(),
                Tensor::from_vec(&[kk], randn(&mut rng, kk)).unwrap().with_grad(),
            ];
            let max_err = finite_diff_check(
                &mut |ps: &mut [Tensor], want: bool| {
                    let mut tape = Tape::new();
                    let x = tape.param(&ps[0]);
                    let w = tape.param(&ps[1]);
                    let b = tape.param(&ps[2]);
                    let y = tape.linear(x, w, b)?;
                    // Square the outputs so weight grads depend on them.
                    let y2 = tape.mul(y, y)?;
                    let loss = tape.mean(y2);
                    let v = tape.scalar(loss);
                    if want {
                        tape.backward(loss)?;
                        tape.harvest_into(x, &mut ps[0]);
                        tape.harvest_into(w, &mut ps[1]);
                        tape.harvest_into(b, &mut ps[2]);
                    }
                    Ok(v)
                },
                &mut params,
                1e-5,
                0,
                seed,
            )
            .unwrap();
            assert!(max_err < 1e-4, "seed {seed}: {max_err}");
        }
    }

    #[test]
    fn gradcheck_relu() {
        gradcheck_op(0..100, &[3, 4], away_from_zero, |tape, x| {
            let y = tape.relu(x);
            let y2 = tape.mul(y, y).unwrap();
            tape.sum(y2)
        });
    }

    #[test]
    fn gradcheck_max_pool2() {
        gradcheck_op(0..100, &[1, 2, 4, 4], distinct_in_windows, |tape, x| {
            let y = tape.max_pool2(x).unwrap();
            let y2 = tape.mul(y, y).unwrap();
            tape.sum(y2)
        });
    }

    #[test]
    fn gradcheck_mean_pool_and_flatten() {
        gradcheck_op(0..100, &[2, 3, 2, 2], |rng, n| randn(rng, n), |tape, x| {
            let y = tape.mean_pool(x).unwrap();
            let f = tape.flatten(x).unwrap();
            let fsum = tape.sum(f);
            let y2 = tape.mul(y, y).unwrap();
            let s = tape.sum(y2);
            let combined = tape.add(s, fsum).unwrap();
            tape.mean(combined)
        });
    }

    #[test]
    fn gradcheck_softmax_temp() {
        gradcheck_op(0..100, &[3, 5], |rng, n| randn(rng, n), |tape, x| {
            let p = tape.softmax_temp(x, 0.7).unwrap();
            let p2 = tape.mul(p, p).unwrap();
            tape.sum(p2)
        });
    }

    #[test]
    fn gradcheck_log_softmax_temp() {
        gradcheck_op(0..100, &[3, 5], |rng, n| randn(rng, n), |tape, x| {
            let lp = tape.log_softmax_temp(x, 1.3).unwrap();
            let lp2 = tape.mul(lp, lp).unwrap();
            tape.sum(lp2)
        });
    }

    #[test]
    fn gradcheck_log() {
        gradcheck_op(
            0..100,
            &[6],
            |rng, n| (0..n).map(|_| rng.gen_range(0.1..2.0)).collect(),
            |tape, x| {
                let y = tape.log(x).unwrap();
                tape.sum(y)
            },
        );
    }

    #[test]
    fn gradcheck_add_scale_mul_mean() {
        gradcheck_op(0..100, &[7], |rng, n| randn(rng, n), |tape, x| {
            let a = tape.scale(x, 1.7).unwrap();
            let b = tape.mul(x, a).unwrap();
            let c = tape.add(b, x).unwrap();
            tape.mean(c)
        });
    }

    #[test]
    fn gradcheck_smoothed_ce() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
            let (bsz, n) = (4, 5);
            let targets: Vec<usize> = (0..bsz).map(|_| rng.gen_range(0..n)).collect();
            let mut params = vec![Tensor::from_vec(&[bsz, n], randn(&mut rng, bsz * n)).unwrap().with_grad()];
            let targets2 = targets.clone();
            let max_err = finite_diff_check(
                &mut move |ps: &mut [Tensor], want: bool| {
                    let mut tape = Tape::new();
                    let z = tape.param(&ps[0]);
                    let loss = tape.smoothed_ce(z, &targets2, 0.1, 0.9)?;
                    let v = tape.scalar(loss);
                    if want {
                        tape.backward(loss)?;
                        tape.harvest_into(z, &mut ps[0]);
                    }
                    Ok(v)
                },
                &mut params,
                1e-5,
                0,
                seed,
            )
            .unwrap();
            assert!(max_err < 1e-4, "seed {seed}: {max_err}");
        }
    }

    proptest::proptest! {
        #[test]
        fn softmax_temp_rows_are_distributions(
            vals in proptest::collection::vec(-50.0f64..50.0, 12),
            gamma in 0.05f64..20.0,
        ) {
            let mut tape = Tape::new();
            let x = tape.leaf(&[3, 4], vals.clone(), false).unwrap();
            let p = tape.softmax_temp(x, gamma).unwrap();
            let pd = tape.data(p);
            for r in 0..3 {
                let row = &pd[r * 4..(r + 1) * 4];
                let sum: f64 = row.iter().sum();
                proptest::prop_assert!((sum - 1.0).abs() < 1e-9);
                proptest::prop_assert!(row.iter().all(|&v| v >= 0.0));
                // argmax preserved
                let zrow = &vals[r * 4..(r + 1) * 4];
                let za = zrow.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
                let pa = row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
                // Ties can legitimately differ; skip when the top two logits are equal.
                let mut sorted = zrow.to_vec();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if sorted[0] > sorted[1] {
                    proptest::prop_assert_eq!(za, pa);
                }
            }
        }
    }
}
