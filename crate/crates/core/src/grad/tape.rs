use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use super::conv::{col2im, im2col, ConvGeom};
use super::{GradError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Per-channel batch statistics observed by a training-mode batch norm,
/// returned so the owning layer can update its running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var: Tensor,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Tensor,
        invstd: Tensor,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        invstd: Vec<f64>,
        mean: Vec<f64>,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Square {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    L2NormRows {
        x: Var,
        eps: f64,
    },
    GspPool {
        x: Var,
    },
    CombinedMarginLoss {
        f: Var,
        w: Var,
        labels: Vec<usize>,
        cos: Tensor,
        probs: Tensor,
        f_norm: Vec<f64>,
        w_norm: Vec<f64>,
        dphi: Vec<f64>,
        scale: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNormTrain { .. } => "batchnorm(train)",
            Op::BatchNormEval { .. } => "batchnorm(eval)",
            Op::Relu { .. } => "relu",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Square { .. } => "square",
            Op::Sum { .. } => "sum",
            Op::Linear { .. } => "linear",
            Op::L2NormRows { .. } => "l2_normalize_rows",
            Op::GspPool { .. } => "gsp_pool",
            Op::CombinedMarginLoss { .. } => "combined_margin_loss",
        }
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
///
/// Only leaves retain gradients; intermediate gradients are dropped as soon
/// as they have been propagated.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Record of one forward pass. Append-only; consumed by a single
/// [`Tape::backward`] call.
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var, GradError> {
        if !value.all_finite() {
            return Err(GradError::NonFinite(op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Place a value on the tape. `requires_grad` marks it as a parameter
    /// whose gradient should survive the backward pass.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var, GradError> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// 2-D cross-correlation of `x: [N,C,H,W]` with `w: [O,C,kH,kW]`,
    /// optional bias `[O]`. Output spatial size floor((d+2p-k)/s)+1.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var, GradError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(GradError::Shape(format!(
                "conv2d expects 4-D input and kernel, got {:?} and {:?}",
                xs, ws
            )));
        }
        if xs[1] != ws[1] {
            return Err(GradError::Shape(format!(
                "conv2d channel mismatch: input {} vs kernel {}",
                xs[1], ws[1]
            )));
        }
        if let Some(bv) = b {
            let bs = self.shape(bv);
            if bs != [ws[0]] {
                return Err(GradError::Shape(format!(
                    "conv2d bias shape {:?} does not match {} output channels",
                    bs, ws[0]
                )));
            }
        }
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], stride, pad)
            .ok_or_else(|| {
                GradError::Shape(format!(
                    "conv2d geometry invalid: input {}x{}, kernel {}x{}, stride {:?}, pad {:?}",
                    xs[2], xs[3], ws[2], ws[3], stride, pad
                ))
            })?;
        let n = xs[0];
        let chw = xs[1] * xs[2] * xs[3];
        let out_plane = geom.out_len();
        let out_chw = geom.out_c * out_plane;

        let wmat =
            ArrayView2::from_shape((geom.out_c, geom.col_rows()), self.nodes[w.0].value.data())
                .expect("kernel layout");
        let xdata = self.nodes[x.0].value.data();
        let bias = b.map(|bv| self.nodes[bv.0].value.data().to_vec());
        // Pointwise convolutions skip the im2col unfold: the input already
        // is the [C, H*W] patch matrix.
        let pointwise = geom.k_h == 1 && geom.k_w == 1 && stride == (1, 1) && pad == (0, 0);

        let per_sample: Vec<Vec<f64>> = xdata
            .par_chunks(chw.max(1))
            .take(n)
            .map(|sample| {
                let out = if pointwise {
                    let xm = ArrayView2::from_shape((geom.in_c, out_plane), sample).unwrap();
                    wmat.dot(&xm)
                } else {
                    let cols = im2col(sample, &geom);
                    wmat.dot(&cols)
                };
                let mut buf = out.into_raw_vec();
                if let Some(bias) = &bias {
                    for (o, bo) in bias.iter().enumerate() {
                        for v in &mut buf[o * out_plane..(o + 1) * out_plane] {
                            *v += bo;
                        }
                    }
                }
                buf
            })
            .collect();

        let mut data = Vec::with_capacity(n * out_chw);
        for s in per_sample {
            data.extend_from_slice(&s);
        }
        let value = Tensor::from_vec(&[n, geom.out_c, geom.out_h, geom.out_w], data)?;
        let needs = self.needs(x) || self.needs(w) || b.map(|bv| self.needs(bv)).unwrap_or(false);
        self.push(value, Op::Conv2d { x, w, b, geom }, needs)
    }

    /// Training-mode batch normalization over `[N,C,H,W]` with per-channel
    /// affine parameters. Normalizes by biased batch statistics and returns
    /// them for running-estimate updates.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats), GradError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(GradError::Shape(format!(
                "batchnorm expects 4-D input, got {:?}",
                xs
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let m = n * h * w;
        if m == 0 {
            return Err(GradError::Arg("batchnorm on an empty batch".into()));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(GradError::Shape(format!(
                "batchnorm affine parameters must have shape [{}]",
                c
            )));
        }
        let xd = self.nodes[x.0].value.data();
        let plane = h * w;
        let chw = c * plane;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for ni in 0..n {
                let base = ni * chw + ci * plane;
                for v in &xd[base..base + plane] {
                    s += v;
                }
            }
            let mu = s / m as f64;
            let mut sv = 0.0;
            for ni in 0..n {
                let base = ni * chw + ci * plane;
                for v in &xd[base..base + plane] {
                    let d = v - mu;
                    sv += d * d;
                }
            }
            mean[ci] = mu;
            var[ci] = sv / m as f64;
        }
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.nodes[gamma.0].value.data();
        let bt = self.nodes[beta.0].value.data();
        let mut out = vec![0.0; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = ni * chw + ci * plane;
                let (mu, is, ga, be) = (mean[ci], invstd[ci], g[ci], bt[ci]);
                for k in 0..plane {
                    out[base + k] = (xd[base + k] - mu) * is * ga + be;
                }
            }
        }
        let stats = BatchStats {
            mean: Tensor::from_vec(&[c], mean.clone())?,
            var: Tensor::from_vec(&[c], var)?,
        };
        let value = Tensor::from_vec(&xs, out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::BatchNormTrain {
            x,
            gamma,
            beta,
            mean: Tensor::from_vec(&[c], mean)?,
            invstd: Tensor::from_vec(&[c], invstd)?,
        };
        let var_out = self.push(value, op, needs)?;
        Ok((var_out, stats))
    }

    /// Inference-mode batch normalization using fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<Var, GradError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(GradError::Shape(format!(
                "batchnorm expects 4-D input, got {:?}",
                xs
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if self.shape(gamma) != [c]
            || self.shape(beta) != [c]
            || running_mean.shape() != [c]
            || running_var.shape() != [c]
        {
            return Err(GradError::Shape(format!(
                "batchnorm statistics must have shape [{}]",
                c
            )));
        }
        let invstd: Vec<f64> = running_var
            .data()
            .iter()
            .map(|v| 1.0 / (v + eps).sqrt())
            .collect();
        let mean = running_mean.data().to_vec();
        let xd = self.nodes[x.0].value.data();
        let g = self.nodes[gamma.0].value.data();
        let bt = self.nodes[beta.0].value.data();
        let plane = h * w;
        let chw = c * plane;
        let mut out = vec![0.0; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = ni * chw + ci * plane;
                let (mu, is, ga, be) = (mean[ci], invstd[ci], g[ci], bt[ci]);
                for k in 0..plane {
                    out[base + k] = (xd[base + k] - mu) * is * ga + be;
                }
            }
        }
        let value = Tensor::from_vec(&xs, out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                invstd,
                mean,
            },
            needs,
        )
    }

    /// Pointwise max(0, x). The subgradient at exactly zero is taken as 0.
    pub fn relu(&mut self, x: Var) -> Result<Var, GradError> {
        let v = &self.nodes[x.0].value;
        let out = Tensor::from_vec(
            &v.shape().to_vec(),
            v.data().iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect(),
        )?;
        let needs = self.needs(x);
        self.push(out, Op::Relu { x }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        if self.shape(a) != self.shape(b) {
            return Err(GradError::Shape(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out = Tensor::from_vec(
            &av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect(),
        )?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add { a, b }, needs)
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        if self.shape(a) != self.shape(b) {
            return Err(GradError::Shape(format!(
                "mul shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out = Tensor::from_vec(
            &av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
        )?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul { a, b }, needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, GradError> {
        let v = &self.nodes[x.0].value;
        let out = Tensor::from_vec(
            &v.shape().to_vec(),
            v.data().iter().map(|a| a * c).collect(),
        )?;
        let needs = self.needs(x);
        self.push(out, Op::Scale { x, c }, needs)
    }

    pub fn square(&mut self, x: Var) -> Result<Var, GradError> {
        let v = &self.nodes[x.0].value;
        let out = Tensor::from_vec(
            &v.shape().to_vec(),
            v.data().iter().map(|a| a * a).collect(),
        )?;
        let needs = self.needs(x);
        self.push(out, Op::Square { x }, needs)
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var, GradError> {
        let v = &self.nodes[x.0].value;
        let out = Tensor::scalar(v.data().iter().sum());
        let needs = self.needs(x);
        self.push(out, Op::Sum { x }, needs)
    }

    /// Affine map `x · wᵀ + b` with `x: [N,D]`, `w: [K,D]`, `b: [K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, GradError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(GradError::Shape(format!(
                "linear expects [N,D] x [K,D], got {:?} and {:?}",
                xs, ws
            )));
        }
        if let Some(bv) = b {
            if self.shape(bv) != [ws[0]] {
                return Err(GradError::Shape(format!(
                    "linear bias shape {:?} does not match {} outputs",
                    self.shape(bv),
                    ws[0]
                )));
            }
        }
        let xv = ArrayView2::from_shape((xs[0], xs[1]), self.nodes[x.0].value.data()).unwrap();
        let wv = ArrayView2::from_shape((ws[0], ws[1]), self.nodes[w.0].value.data()).unwrap();
        let mut out = xv.dot(&wv.t());
        if let Some(bv) = b {
            let bd = self.nodes[bv.0].value.data();
            for mut row in out.rows_mut() {
                for (o, bo) in row.iter_mut().zip(bd) {
                    *o += bo;
                }
            }
        }
        let value = Tensor::from_vec(&[xs[0], ws[0]], out.into_raw_vec())?;
        let needs = self.needs(x) || self.needs(w) || b.map(|bv| self.needs(bv)).unwrap_or(false);
        self.push(value, Op::Linear { x, w, b }, needs)
    }

    /// Divide each row of `x: [N,D]` by max(‖row‖₂, eps).
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var, GradError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(GradError::Shape(format!(
                "l2_normalize_rows expects [N,D], got {:?}",
                xs
            )));
        }
        let xd = self.nodes[x.0].value.data();
        let d = xs[1];
        let mut out = vec![0.0; xd.len()];
        for i in 0..xs[0] {
            let row = &xd[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            for (o, v) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let value = Tensor::from_vec(&xs, out)?;
        let needs = self.needs(x);
        self.push(value, Op::L2NormRows { x, eps }, needs)
    }

    /// Global statistics pooling: per (channel, frequency) mean and standard
    /// deviation over the time axis of `[N,C,F,T]`, concatenated to
    /// `[N, 2·C·F]` as `[means ‖ stds]`.
    pub fn gsp_pool(&mut self, x: Var) -> Result<Var, GradError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(GradError::Shape(format!(
                "gsp_pool expects [N,C,F,T], got {:?}",
                xs
            )));
        }
        let (n, c, f, t) = (xs[0], xs[1], xs[2], xs[3]);
        if t == 0 {
            return Err(GradError::Shape("gsp_pool needs at least one frame".into()));
        }
        let xd = self.nodes[x.0].value.data();
        let cf = c * f;
        let mut out = vec![0.0; n * 2 * cf];
        for ni in 0..n {
            for k in 0..cf {
                let base = ni * cf * t + k * t;
                let row = &xd[base..base + t];
                let mu = row.iter().sum::<f64>() / t as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / t as f64;
                out[ni * 2 * cf + k] = mu;
                out[ni * 2 * cf + cf + k] = var.max(0.0).sqrt();
            }
        }
        let value = Tensor::from_vec(&[n, 2 * cf], out)?;
        let needs = self.needs(x);
        self.push(value, Op::GspPool { x }, needs)
    }

    /// Combined-margin softmax cross-entropy: the true-class logit is
    /// `s·[cos(θ+m1) − m2]` and other logits are `s·cosθ`, with angles taken
    /// between embedding rows `f: [N,D]` and class-weight rows `w: [C,D]`
    /// after normalization. Returns the batch-mean loss as a scalar.
    ///
    /// Beyond θ = π − m1, the true-class term continues as
    /// `cosθ − m1·sin(m1)` so the logit stays monotone in θ.
    pub fn combined_margin_loss(
        &mut self,
        f: Var,
        w: Var,
        labels: &[usize],
        scale: f64,
        margin_angle: f64,
        margin_cos: f64,
    ) -> Result<Var, GradError> {
        let fs = self.shape(f).to_vec();
        let ws = self.shape(w).to_vec();
        if fs.len() != 2 || ws.len() != 2 || fs[1] != ws[1] {
            return Err(GradError::Shape(format!(
                "combined_margin_loss expects f [N,D], w [C,D]; got {:?} and {:?}",
                fs, ws
            )));
        }
        let (n, d, c) = (fs[0], fs[1], ws[0]);
        if n == 0 {
            return Err(GradError::Arg("empty batch".into()));
        }
        if labels.len() != n {
            return Err(GradError::Arg(format!(
                "expected {} labels, got {}",
                n,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(GradError::Arg(format!(
                "label {} out of range for {} classes",
                bad, c
            )));
        }
        if scale <= 0.0 {
            return Err(GradError::Arg("scale must be positive".into()));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin_angle) {
            return Err(GradError::Arg(format!(
                "angular margin {} outside [0, pi/2)",
                margin_angle
            )));
        }
        if !(0.0..1.0).contains(&margin_cos) {
            return Err(GradError::Arg(format!(
                "cosine margin {} outside [0, 1)",
                margin_cos
            )));
        }

        const NORM_EPS: f64 = 1e-12;
        let fd = self.nodes[f.0].value.data();
        let wd = self.nodes[w.0].value.data();
        let mut f_norm = vec![0.0; n];
        let mut fn_rows = vec![0.0; n * d];
        for i in 0..n {
            let row = &fd[i * d..(i + 1) * d];
            let nb = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            f_norm[i] = nb;
            for (o, v) in fn_rows[i * d..(i + 1) * d].iter_mut().zip(row) {
                *o = v / nb;
            }
        }
        let mut w_norm = vec![0.0; c];
        let mut wn_rows = vec![0.0; c * d];
        for j in 0..c {
            let row = &wd[j * d..(j + 1) * d];
            let nb = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            w_norm[j] = nb;
            for (o, v) in wn_rows[j * d..(j + 1) * d].iter_mut().zip(row) {
                *o = v / nb;
            }
        }
        let v = ArrayView2::from_shape((n, d), &fn_rows).unwrap();
        let u = ArrayView2::from_shape((c, d), &wn_rows).unwrap();
        let cos = v.dot(&u.t()); // [N, C]

        let cos_m = margin_angle.cos();
        let sin_m = margin_angle.sin();
        let mut probs = vec![0.0; n * c];
        let mut dphi = vec![0.0; n];
        let mut loss = 0.0;
        for i in 0..n {
            let y = labels[i];
            let cy = cos[[i, y]].clamp(-1.0, 1.0);
            let sin_theta = (1.0 - cy * cy).max(0.0).sqrt();
            // theta <= pi - m1  <=>  cos(theta) >= -cos(m1)
            let (phi, dph) = if cy >= -cos_m {
                (
                    cy * cos_m - sin_theta * sin_m,
                    cos_m + sin_m * cy / sin_theta.max(1e-12),
                )
            } else {
                (cy - margin_angle * sin_m, 1.0)
            };
            dphi[i] = dph;
            let row = cos.row(i);
            let logit = |j: usize| {
                if j == y {
                    scale * (phi - margin_cos)
                } else {
                    scale * row[j]
                }
            };
            let mut zmax = f64::NEG_INFINITY;
            let mut jmax = 0;
            for j in 0..c {
                let z = logit(j);
                if z > zmax {
                    zmax = z;
                    jmax = j;
                }
            }
            // Sum the non-max terms separately so ln(1 + rest) keeps full
            // relative precision when the loss is tiny.
            let mut rest = 0.0;
            for j in 0..c {
                let e = (logit(j) - zmax).exp();
                probs[i * c + j] = e;
                if j != jmax {
                    rest += e;
                }
            }
            let denom = 1.0 + rest;
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= denom;
            }
            let zy = logit(y);
            loss += -(zy - zmax - rest.ln_1p());
        }
        loss /= n as f64;

        let value = Tensor::scalar(loss);
        let needs = self.needs(f) || self.needs(w);
        self.push(
            value,
            Op::CombinedMarginLoss {
                f,
                w,
                labels: labels.to_vec(),
                cos: Tensor::from_vec(&[n, c], cos.into_raw_vec())?,
                probs: Tensor::from_vec(&[n, c], probs)?,
                f_norm,
                w_norm,
                dphi,
                scale,
            },
            needs,
        )
    }

    /// Reverse pass from a scalar loss. Consumes the tape: a second call is
    /// an error rather than a silently wrong accumulation.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, GradError> {
        if self.backward_done {
            return Err(GradError::State(
                "backward already ran on this tape".into(),
            ));
        }
        let loss_val = &self.nodes[loss.0].value;
        if loss_val.len() != 1 {
            return Err(GradError::Arg(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_val.shape()
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(loss_val.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            if grads[i].is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let gy = grads[i].take().expect("checked above");
            self.backprop_node(i, &gy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(
        &self,
        i: usize,
        gy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), GradError> {
        let accum = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| -> Result<(), GradError> {
            match &mut grads[v.0] {
                Some(g) => g.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let chw = geom.in_c * geom.in_h * geom.in_w;
                let out_plane = geom.out_len();
                let out_chw = geom.out_c * out_plane;
                let xd = self.nodes[x.0].value.data();
                let wmat = ArrayView2::from_shape(
                    (geom.out_c, geom.col_rows()),
                    self.nodes[w.0].value.data(),
                )
                .unwrap();
                let need_x = self.needs(*x);
                let need_w = self.needs(*w);
                let pointwise = geom.k_h == 1
                    && geom.k_w == 1
                    && geom.stride == (1, 1)
                    && geom.pad == (0, 0);
                let parts: Vec<(Option<Array2<f64>>, Option<Vec<f64>>)> = (0..n)
                    .into_par_iter()
                    .map(|ni| {
                        let dy = ArrayView2::from_shape(
                            (geom.out_c, out_plane),
                            &gy.data()[ni * out_chw..(ni + 1) * out_chw],
                        )
                        .unwrap();
                        if pointwise {
                            let xm = ArrayView2::from_shape(
                                (geom.in_c, out_plane),
                                &xd[ni * chw..(ni + 1) * chw],
                            )
                            .unwrap();
                            let dw = need_w.then(|| dy.dot(&xm.t()));
                            let dx = need_x.then(|| wmat.t().dot(&dy).into_raw_vec());
                            return (dw, dx);
                        }
                        let dw = if need_w {
                            let cols = im2col(&xd[ni * chw..(ni + 1) * chw], geom);
                            Some(dy.dot(&cols.t()))
                        } else {
                            None
                        };
                        let dx = if need_x {
                            let dcols = wmat.t().dot(&dy);
                            Some(col2im(&dcols.view(), geom))
                        } else {
                            None
                        };
                        (dw, dx)
                    })
                    .collect();
                if need_w {
                    let mut dw = Array2::<f64>::zeros((geom.out_c, geom.col_rows()));
                    for (p, _) in &parts {
                        dw += p.as_ref().expect("dw requested");
                    }
                    accum(
                        grads,
                        *w,
                        Tensor::from_vec(
                            &[geom.out_c, geom.in_c, geom.k_h, geom.k_w],
                            dw.into_raw_vec(),
                        )?,
                    )?;
                }
                if need_x {
                    let mut dx = Vec::with_capacity(n * chw);
                    for (_, p) in parts {
                        dx.extend_from_slice(&p.expect("dx requested"));
                    }
                    accum(
                        grads,
                        *x,
                        Tensor::from_vec(&[n, geom.in_c, geom.in_h, geom.in_w], dx)?,
                    )?;
                }
                if let Some(bv) = b {
                    if self.needs(*bv) {
                        let mut db = vec![0.0; geom.out_c];
                        for ni in 0..n {
                            for o in 0..geom.out_c {
                                let base = ni * out_chw + o * out_plane;
                                db[o] += gy.data()[base..base + out_plane].iter().sum::<f64>();
                            }
                        }
                        accum(grads, *bv, Tensor::from_vec(&[geom.out_c], db)?)?;
                    }
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean,
                invstd,
            } => {
                let xs = self.shape(*x).to_vec();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let plane = h * w;
                let chw = c * plane;
                let m = (n * plane) as f64;
                let xd = self.nodes[x.0].value.data();
                let g = self.nodes[gamma.0].value.data();
                let gyd = gy.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_gy = vec![0.0; c];
                let mut sum_gy_xhat = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = ni * chw + ci * plane;
                        let (mu, is) = (mean.data()[ci], invstd.data()[ci]);
                        for k in 0..plane {
                            let xhat = (xd[base + k] - mu) * is;
                            let gyk = gyd[base + k];
                            dgamma[ci] += gyk * xhat;
                            dbeta[ci] += gyk;
                            sum_gy[ci] += gyk;
                            sum_gy_xhat[ci] += gyk * xhat;
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; xd.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = ni * chw + ci * plane;
                            let (mu, is, ga) = (mean.data()[ci], invstd.data()[ci], g[ci]);
                            let mg = sum_gy[ci] / m;
                            let mgx = sum_gy_xhat[ci] / m;
                            for k in 0..plane {
                                let xhat = (xd[base + k] - mu) * is;
                                dx[base + k] = ga * is * (gyd[base + k] - mg - xhat * mgx);
                            }
                        }
                    }
                    accum(grads, *x, Tensor::from_vec(&xs, dx)?)?;
                }
                if self.needs(*gamma) {
                    accum(grads, *gamma, Tensor::from_vec(&[c], dgamma)?)?;
                }
                if self.needs(*beta) {
                    accum(grads, *beta, Tensor::from_vec(&[c], dbeta)?)?;
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                invstd,
                mean,
            } => {
                let xs = self.shape(*x).to_vec();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let plane = h * w;
                let chw = c * plane;
                let xd = self.nodes[x.0].value.data();
                let g = self.nodes[gamma.0].value.data();
                let gyd = gy.data();
                if self.needs(*x) {
                    let mut dx = vec![0.0; xd.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = ni * chw + ci * plane;
                            let k0 = g[ci] * invstd[ci];
                            for k in 0..plane {
                                dx[base + k] = gyd[base + k] * k0;
                            }
                        }
                    }
                    accum(grads, *x, Tensor::from_vec(&xs, dx)?)?;
                }
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = ni * chw + ci * plane;
                            for k in 0..plane {
                                let xhat = (xd[base + k] - mean[ci]) * invstd[ci];
                                dgamma[ci] += gyd[base + k] * xhat;
                                dbeta[ci] += gyd[base + k];
                            }
                        }
                    }
                    if self.needs(*gamma) {
                        accum(grads, *gamma, Tensor::from_vec(&[c], dgamma)?)?;
                    }
                    if self.needs(*beta) {
                        accum(grads, *beta, Tensor::from_vec(&[c], dbeta)?)?;
                    }
                }
            }
            Op::Relu { x } => {
                let xd = self.nodes[x.0].value.data();
                let dx: Vec<f64> = xd
                    .iter()
                    .zip(gy.data())
                    .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
                    .collect();
                accum(grads, *x, Tensor::from_vec(&self.shape(*x).to_vec(), dx)?)?;
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    accum(grads, *a, gy.clone())?;
                }
                if self.needs(*b) {
                    accum(grads, *b, gy.clone())?;
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bd = self.nodes[b.0].value.data();
                    let da: Vec<f64> =
                        gy.data().iter().zip(bd).map(|(g, v)| g * v).collect();
                    accum(grads, *a, Tensor::from_vec(&self.shape(*a).to_vec(), da)?)?;
                }
                if self.needs(*b) {
                    let ad = self.nodes[a.0].value.data();
                    let db: Vec<f64> =
                        gy.data().iter().zip(ad).map(|(g, v)| g * v).collect();
                    accum(grads, *b, Tensor::from_vec(&self.shape(*b).to_vec(), db)?)?;
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    let mut dx = gy.clone();
                    dx.scale_in_place(*c);
                    accum(grads, *x, dx)?;
                }
            }
            Op::Square { x } => {
                let xd = self.nodes[x.0].value.data();
                let dx: Vec<f64> = xd
                    .iter()
                    .zip(gy.data())
                    .map(|(&xv, &g)| 2.0 * xv * g)
                    .collect();
                accum(grads, *x, Tensor::from_vec(&self.shape(*x).to_vec(), dx)?)?;
            }
            Op::Sum { x } => {
                let g0 = gy.data()[0];
                accum(
                    grads,
                    *x,
                    Tensor::filled(&self.shape(*x).to_vec(), g0),
                )?;
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let gyv = ArrayView2::from_shape((xs[0], ws[0]), gy.data()).unwrap();
                if self.needs(*x) {
                    let wv =
                        ArrayView2::from_shape((ws[0], ws[1]), self.nodes[w.0].value.data())
                            .unwrap();
                    let dx = gyv.dot(&wv);
                    accum(grads, *x, Tensor::from_vec(&xs, dx.into_raw_vec())?)?;
                }
                if self.needs(*w) {
                    let xv =
                        ArrayView2::from_shape((xs[0], xs[1]), self.nodes[x.0].value.data())
                            .unwrap();
                    let dw = gyv.t().dot(&xv);
                    accum(grads, *w, Tensor::from_vec(&ws, dw.into_raw_vec())?)?;
                }
                if let Some(bv) = b {
                    if self.needs(*bv) {
                        let mut db = vec![0.0; ws[0]];
                        for row in gyv.rows() {
                            for (acc, v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        accum(grads, *bv, Tensor::from_vec(&[ws[0]], db)?)?;
                    }
                }
            }
            Op::L2NormRows { x, eps } => {
                let xs = self.shape(*x).to_vec();
                let d = xs[1];
                let xd = self.nodes[x.0].value.data();
                let yd = self.nodes[i].value.data();
                let gyd = gy.data();
                let mut dx = vec![0.0; xd.len()];
                for r in 0..xs[0] {
                    let row = &xd[r * d..(r + 1) * d];
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let g = &gyd[r * d..(r + 1) * d];
                    let out = &mut dx[r * d..(r + 1) * d];
                    if norm > *eps {
                        let y = &yd[r * d..(r + 1) * d];
                        let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                        for k in 0..d {
                            out[k] = (g[k] - dot * y[k]) / norm;
                        }
                    } else {
                        for k in 0..d {
                            out[k] = g[k] / *eps;
                        }
                    }
                }
                accum(grads, *x, Tensor::from_vec(&xs, dx)?)?;
            }
            Op::GspPool { x } => {
                let xs = self.shape(*x).to_vec();
                let (n, c, f, t) = (xs[0], xs[1], xs[2], xs[3]);
                let cf = c * f;
                let xd = self.nodes[x.0].value.data();
                let outd = self.nodes[i].value.data();
                let gyd = gy.data();
                let tf = t as f64;
                let mut dx = vec![0.0; xd.len()];
                for ni in 0..n {
                    for k in 0..cf {
                        let base = ni * cf * t + k * t;
                        let mu = outd[ni * 2 * cf + k];
                        let sd = outd[ni * 2 * cf + cf + k];
                        let dmu = gyd[ni * 2 * cf + k];
                        let dsd = gyd[ni * 2 * cf + cf + k];
                        let sd_guard = sd.max(1e-12);
                        for ti in 0..t {
                            dx[base + ti] =
                                dmu / tf + dsd * (xd[base + ti] - mu) / (tf * sd_guard);
                        }
                    }
                }
                accum(grads, *x, Tensor::from_vec(&xs, dx)?)?;
            }
            Op::CombinedMarginLoss {
                f,
                w,
                labels,
                cos,
                probs,
                f_norm,
                w_norm,
                dphi,
                scale,
            } => {
                let g0 = gy.data()[0];
                let n = f_norm.len();
                let c = w_norm.len();
                let d = self.shape(*f)[1];
                let cosd = cos.data();
                let pd = probs.data();
                // dL/dcos[i,j], folding in the margin slope on the label column.
                let mut dcos = vec![0.0; n * c];
                for i2 in 0..n {
                    let y = labels[i2];
                    for j in 0..c {
                        let dz = (pd[i2 * c + j] - if j == y { 1.0 } else { 0.0 }) / n as f64;
                        let mut v = dz * scale * g0;
                        if j == y {
                            v *= dphi[i2];
                        }
                        dcos[i2 * c + j] = v;
                    }
                }
                let fd = self.nodes[f.0].value.data();
                let wd = self.nodes[w.0].value.data();
                // Normalized rows are rebuilt here; cos was saved at forward.
                let mut vrows = vec![0.0; n * d];
                for i2 in 0..n {
                    for k in 0..d {
                        vrows[i2 * d + k] = fd[i2 * d + k] / f_norm[i2];
                    }
                }
                let mut urows = vec![0.0; c * d];
                for j in 0..c {
                    for k in 0..d {
                        urows[j * d + k] = wd[j * d + k] / w_norm[j];
                    }
                }
                let dcos_m = ArrayView2::from_shape((n, c), &dcos).unwrap();
                let u = ArrayView2::from_shape((c, d), &urows).unwrap();
                let v = ArrayView2::from_shape((n, d), &vrows).unwrap();
                if self.needs(*f) {
                    let mut df = dcos_m.dot(&u); // [N,D]
                    for i2 in 0..n {
                        let r: f64 = (0..c).map(|j| dcos[i2 * c + j] * cosd[i2 * c + j]).sum();
                        for k in 0..d {
                            df[[i2, k]] = (df[[i2, k]] - r * vrows[i2 * d + k]) / f_norm[i2];
                        }
                    }
                    accum(grads, *f, Tensor::from_vec(&[n, d], df.into_raw_vec())?)?;
                }
                if self.needs(*w) {
                    let mut dw = dcos_m.t().dot(&v); // [C,D]
                    for j in 0..c {
                        let q: f64 = (0..n).map(|i2| dcos[i2 * c + j] * cosd[i2 * c + j]).sum();
                        for k in 0..d {
                            dw[[j, k]] = (dw[[j, k]] - q * urows[j * d + k]) / w_norm[j];
                        }
                    }
                    accum(grads, *w, Tensor::from_vec(&[c, d], dw.into_raw_vec())?)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[2, 3, 4, 5], 1), false).unwrap();
        let mut k = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            k.data_mut()[c * 3 + c] = 1.0;
        }
        let w = tape.leaf(k, false).unwrap();
        let y = tape.conv2d(x, w, None, (1, 1), (0, 0)).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv_zero_weights_give_zero_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[1, 2, 5, 5], 2), false).unwrap();
        let w = tape.leaf(Tensor::zeros(&[4, 2, 3, 3]), false).unwrap();
        let y = tape.conv2d(x, w, None, (1, 1), (1, 1)).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(y).shape(), &[1, 4, 5, 5]);
    }

    #[test]
    fn conv_matches_direct_six_loop_reference() {
        // Brute-force cross-correlation oracle.
        let (n, ci, h, wi, co, kh, kw) = (1, 1, 4, 4, 1, 3, 3);
        let x = rand_tensor(&[n, ci, h, wi], 3);
        let w = rand_tensor(&[co, ci, kh, kw], 4);
        let (ph, pw) = (1usize, 1usize);
        let mut expect = vec![0.0; h * wi];
        for oh in 0..h {
            for ow in 0..wi {
                let mut acc = 0.0;
                for c in 0..ci {
                    for dh in 0..kh {
                        for dw in 0..kw {
                            let ih = oh as isize + dh as isize - ph as isize;
                            let iw = ow as isize + dw as isize - pw as isize;
                            if ih < 0 || iw < 0 || ih >= h as isize || iw >= wi as isize {
                                continue;
                            }
                            acc += x.data()[(c * h + ih as usize) * wi + iw as usize]
                                * w.data()[(c * kh + dh) * kw + dw];
                        }
                    }
                }
                expect[oh * wi + ow] = acc;
            }
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false).unwrap();
        let wv = tape.leaf(w, false).unwrap();
        let y = tape.conv2d(xv, wv, None, (1, 1), (ph, pw)).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_zeroes_negative_input() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::from_vec(&[4], vec![-1.0, -0.5, -2.0, -0.1]).unwrap(), false)
            .unwrap();
        let y = tape.relu(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn add_zeros_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[3, 3], 5), false).unwrap();
        let z = tape.leaf(Tensor::zeros(&[3, 3]), false).unwrap();
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn linear_identity_and_hand_value() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[2, 3], 6), false).unwrap();
        let mut eye = Tensor::zeros(&[3, 3]);
        for k in 0..3 {
            eye.data_mut()[k * 3 + k] = 1.0;
        }
        let w = tape.leaf(eye, false).unwrap();
        let y = tape.linear(x, w, None).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let x2 = tape
            .leaf(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap(), false)
            .unwrap();
        let w2 = tape
            .leaf(Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap(), false)
            .unwrap();
        let y2 = tape.linear(x2, w2, None).unwrap();
        assert_eq!(tape.value(y2).data(), &[11.0]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap(), false)
            .unwrap();
        let y = tape.l2_normalize_rows(x, 1e-12).unwrap();
        let got = tape.value(y).data();
        assert!((got[0] - 0.6).abs() < 1e-15);
        assert!((got[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn backward_of_sum_is_ones_and_sum_square_is_2x() {
        let mut tape = Tape::new();
        let xt = rand_tensor(&[2, 3], 7);
        let x = tape.leaf(xt.clone(), true).unwrap();
        let loss = tape.sum(x).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let gx = grads.take(x).unwrap();
        assert!(gx.data().iter().all(|&v| v == 1.0));

        let mut tape = Tape::new();
        let x = tape.leaf(xt.clone(), true).unwrap();
        let sq = tape.square(x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let gx = grads.take(x).unwrap();
        for (g, v) in gx.data().iter().zip(xt.data()) {
            assert!((g - 2.0 * v).abs() < 1e-14);
        }
    }

    #[test]
    fn second_backward_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[3], 8), true).unwrap();
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(GradError::State(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[3], 9), true).unwrap();
        assert!(matches!(tape.backward(x), Err(GradError::Arg(_))));
    }

    #[test]
    fn batchnorm_train_normalizes_batch() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[4, 3, 2, 5], 10), false).unwrap();
        let g = tape.leaf(Tensor::filled(&[3], 1.0), false).unwrap();
        let b = tape.leaf(Tensor::zeros(&[3]), false).unwrap();
        let (y, stats) = tape.batchnorm_train(x, g, b, 1e-5).unwrap();
        let yd = tape.value(y).data();
        let plane = 10;
        let chw = 30;
        for c in 0..3 {
            let mut mean = 0.0;
            let mut var = 0.0;
            let m = 4.0 * plane as f64;
            for n in 0..4 {
                for k in 0..plane {
                    mean += yd[n * chw + c * plane + k];
                }
            }
            mean /= m;
            for n in 0..4 {
                for k in 0..plane {
                    let d = yd[n * chw + c * plane + k] - mean;
                    var += d * d;
                }
            }
            var /= m;
            assert!(mean.abs() < 1e-6, "channel mean {}", mean);
            assert!((var - 1.0).abs() < 1e-4, "channel var {}", var);
        }
        assert_eq!(stats.mean.len(), 3);
    }

    #[test]
    fn batchnorm_eval_identity_stats_is_identity() {
        let mut tape = Tape::new();
        let xt = rand_tensor(&[2, 2, 3, 3], 11);
        let x = tape.leaf(xt.clone(), false).unwrap();
        let g = tape.leaf(Tensor::filled(&[2], 1.0), false).unwrap();
        let b = tape.leaf(Tensor::zeros(&[2]), false).unwrap();
        let mean = Tensor::zeros(&[2]);
        let var = Tensor::filled(&[2], 1.0);
        let y = tape.batchnorm_eval(x, g, b, &mean, &var, 0.0).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(xt.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gsp_constant_map_has_zero_std() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[1, 2, 3, 7], 2.5), false).unwrap();
        let y = tape.gsp_pool(x).unwrap();
        let out = tape.value(y).data();
        assert_eq!(out.len(), 12);
        for k in 0..6 {
            assert_eq!(out[k], 2.5);
            assert_eq!(out[6 + k], 0.0);
        }
    }

    #[test]
    fn gsp_single_frame_mean_is_frame() {
        let mut tape = Tape::new();
        let xt = rand_tensor(&[1, 2, 2, 1], 12);
        let x = tape.leaf(xt.clone(), false).unwrap();
        let y = tape.gsp_pool(x).unwrap();
        let out = tape.value(y).data();
        for k in 0..4 {
            assert_eq!(out[k], xt.data()[k]);
            assert_eq!(out[4 + k], 0.0);
        }
    }

    #[test]
    fn gsp_matches_two_pass_oracle() {
        let xt = rand_tensor(&[2, 3, 4, 9], 13);
        let mut tape = Tape::new();
        let x = tape.leaf(xt.clone(), false).unwrap();
        let y = tape.gsp_pool(x).unwrap();
        let out = tape.value(y).data();
        let (c, f, t) = (3, 4, 9);
        let cf = c * f;
        for n in 0..2 {
            for k in 0..cf {
                let row: Vec<f64> =
                    (0..t).map(|ti| xt.data()[n * cf * t + k * t + ti]).collect();
                let mu = row.iter().sum::<f64>() / t as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / t as f64;
                assert!((out[n * 2 * cf + k] - mu).abs() < 1e-12);
                assert!((out[n * 2 * cf + cf + k] - var.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn margin_loss_rejects_bad_labels() {
        let mut tape = Tape::new();
        let f = tape.leaf(rand_tensor(&[2, 4], 14), false).unwrap();
        let w = tape.leaf(rand_tensor(&[3, 4], 15), false).unwrap();
        let err = tape.combined_margin_loss(f, w, &[0, 3], 32.0, 0.1, 0.05);
        assert!(matches!(err, Err(GradError::Arg(_))));
    }

    /// Central finite differences on a scalar-valued function of several
    /// tensors, used as the gradient oracle.
    fn finite_diff_check(
        inputs: &[Tensor],
        eval: &dyn Fn(&mut Tape, &[Var]) -> Var,
        rel_tol: f64,
    ) {
        let run = |tensors: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), false).unwrap())
                .collect();
            let out = eval(&mut tape, &vars);
            tape.value(out).as_scalar().unwrap()
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone(), true).unwrap())
            .collect();
        let out = eval(&mut tape, &vars);
        let mut grads = tape.backward(out).unwrap();
        let h = 1e-5;
        for (ti, t) in inputs.iter().enumerate() {
            let analytic = grads.take(vars[ti]).unwrap();
            for k in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[ti].data_mut()[k] += h;
                let mut minus = inputs.to_vec();
                minus[ti].data_mut()[k] -= h;
                let fd = (run(&plus) - run(&minus)) / (2.0 * h);
                let a = analytic.data()[k];
                let denom = a.abs().max(fd.abs()).max(1e-7);
                assert!(
                    (a - fd).abs() / denom <= rel_tol,
                    "input {} element {}: analytic {} vs fd {}",
                    ti,
                    k,
                    a,
                    fd
                );
            }
        }
    }

    #[test]
    fn margin_loss_gradient_matches_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let f = Tensor::randn(&[3, 5], 1.0, &mut rng);
            let w = Tensor::randn(&[4, 5], 1.0, &mut rng);
            let labels = vec![0, 2, 3];
            finite_diff_check(
                &[f, w],
                &|tape, vars| {
                    tape.combined_margin_loss(vars[0], vars[1], &labels, 16.0, 0.25, 0.1)
                        .unwrap()
                },
                1e-4,
            );
        }
    }

    #[test]
    fn batchnorm_train_gradient_matches_finite_differences() {
        // A plain sum-of-squares readout is invariant to the input after
        // normalization, so weight the output asymmetrically.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::randn(&[2, 2, 2, 3], 1.0, &mut rng);
        let g = Tensor::randn(&[2], 0.5, &mut rng);
        let b = Tensor::randn(&[2], 0.5, &mut rng);
        let coeffs = Tensor::randn(&[2, 2, 2, 3], 1.0, &mut rng);
        finite_diff_check(
            &[x, g, b],
            &|tape, vars| {
                let (y, _) = tape.batchnorm_train(vars[0], vars[1], vars[2], 1e-5).unwrap();
                let c = tape.leaf(coeffs.clone(), false).unwrap();
                let weighted = tape.mul(y, c).unwrap();
                tape.sum(weighted).unwrap()
            },
            1e-4,
        );
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = Tensor::randn(&[2, 2, 4, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng);
        let b = Tensor::randn(&[3], 0.5, &mut rng);
        finite_diff_check(
            &[x, w, b],
            &|tape, vars| {
                let y = tape
                    .conv2d(vars[0], vars[1], Some(vars[2]), (2, 1), (1, 1))
                    .unwrap();
                let sq = tape.square(y).unwrap();
                tape.sum(sq).unwrap()
            },
            1e-4,
        );
    }

    #[test]
    fn gsp_and_l2norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = Tensor::randn(&[2, 2, 3, 4], 1.0, &mut rng);
        let coeffs = Tensor::randn(&[2, 12], 1.0, &mut rng);
        finite_diff_check(
            &[x],
            &|tape, vars| {
                let y = tape.gsp_pool(vars[0]).unwrap();
                let z = tape.l2_normalize_rows(y, 1e-12).unwrap();
                let c = tape.leaf(coeffs.clone(), false).unwrap();
                let weighted = tape.mul(z, c).unwrap();
                tape.sum(weighted).unwrap()
            },
            1e-4,
        );
    }
}
