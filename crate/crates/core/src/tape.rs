//! Reverse-mode gradient tape.
//!
//! Forward calls record one node per operation (saving whatever the
//! backward rule needs: pre-activations live in the input node, argmax
//! indices and dropout masks in the node itself); `backward` replays the
//! node list in exact reverse order, accumulating gradients. Inputs always
//! precede outputs by construction, so a single reverse sweep suffices.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::evidential;
use crate::ops::{self, Activation, PoolMode};
use crate::rng::Rng;
use crate::tensor::{NnError, Tensor};

pub type NodeId = usize;

enum Op {
    Leaf,
    Conv2d { input: NodeId, kernels: NodeId, bias: NodeId, padding: usize, stride: usize },
    Linear { input: NodeId, weight: NodeId, bias: NodeId },
    Activation { input: NodeId, kind: Activation },
    Pool { input: NodeId, mode: PoolMode, indices: Vec<usize> },
    MaxPool2 { input: NodeId, indices: Vec<usize> },
    ScaleByChannel { input: NodeId, gates: NodeId },
    ScaleBySpatial { input: NodeId, map: NodeId },
    Add { a: NodeId, b: NodeId },
    AddConst { input: NodeId },
    ScaleConst { input: NodeId, c: f64 },
    ConcatChannels { a: NodeId, b: NodeId, a_len: usize },
    Dropout { input: NodeId, mask: Vec<f64> },
    EdlLoss { alpha: NodeId, target: Vec<f64>, include_variance: bool },
    KlLoss { alpha: NodeId, target: Vec<f64> },
    CeLoss { alpha: NodeId, target: Vec<f64>, class_weights: Vec<f64> },
    SquaredError { pred: NodeId, target: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records forward operations and replays them backward.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId, NnError> {
        if !value.all_finite() {
            return Err(NnError::NonFinite(format!(
                "node {} produced a non-finite value",
                self.nodes.len()
            )));
        }
        self.nodes.push(Node { value, op });
        Ok(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId, NnError> {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        padding: usize,
        stride: usize,
    ) -> Result<NodeId, NnError> {
        let out = ops::conv2d(
            self.value(input),
            self.value(kernels),
            self.value(bias).data(),
            padding,
            stride,
        )?;
        self.push(out, Op::Conv2d { input, kernels, bias, padding, stride })
    }

    pub fn linear(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, NnError> {
        let out = ops::linear(self.value(input), self.value(weight), self.value(bias).data())?;
        self.push(out, Op::Linear { input, weight, bias })
    }

    pub fn activation(&mut self, input: NodeId, kind: Activation) -> Result<NodeId, NnError> {
        let out = ops::activation(self.value(input), kind);
        self.push(out, Op::Activation { input, kind })
    }

    pub fn pool(&mut self, input: NodeId, mode: PoolMode) -> Result<NodeId, NnError> {
        let (out, indices) = ops::pool_with_indices(self.value(input), mode)?;
        self.push(out, Op::Pool { input, mode, indices })
    }

    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId, NnError> {
        let (out, indices) = ops::max_pool2_with_indices(self.value(input))?;
        self.push(out, Op::MaxPool2 { input, indices })
    }

    /// F[c,h,w] * gates[c]
    pub fn scale_by_channel(&mut self, input: NodeId, gates: NodeId) -> Result<NodeId, NnError> {
        let (c, h, w) = self.value(input).chw()?;
        let g = self.value(gates);
        if g.shape() != [c] {
            return Err(NnError::Shape(format!(
                "channel gates shape {:?} does not match {c} channels",
                g.shape()
            )));
        }
        let x = self.value(input).data();
        let gd = g.data();
        let mut out = vec![0.0; c * h * w];
        for ci in 0..c {
            for p in 0..h * w {
                out[ci * h * w + p] = x[ci * h * w + p] * gd[ci];
            }
        }
        let out = Tensor::new(vec![c, h, w], out)?;
        self.push(out, Op::ScaleByChannel { input, gates })
    }

    /// F[c,h,w] * map[h,w]
    pub fn scale_by_spatial(&mut self, input: NodeId, map: NodeId) -> Result<NodeId, NnError> {
        let (c, h, w) = self.value(input).chw()?;
        let m = self.value(map);
        if m.shape() != [1, h, w] {
            return Err(NnError::Shape(format!(
                "spatial map shape {:?} does not match 1x{h}x{w}",
                m.shape()
            )));
        }
        let x = self.value(input).data();
        let md = m.data();
        let mut out = vec![0.0; c * h * w];
        for ci in 0..c {
            for p in 0..h * w {
                out[ci * h * w + p] = x[ci * h * w + p] * md[p];
            }
        }
        let out = Tensor::new(vec![c, h, w], out)?;
        self.push(out, Op::ScaleBySpatial { input, map })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NnError::Shape(format!(
                "add shapes {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(out, Op::Add { a, b })
    }

    pub fn add_const(&mut self, input: NodeId, c: f64) -> Result<NodeId, NnError> {
        let data = self.value(input).data().iter().map(|v| v + c).collect();
        let out = Tensor::new(self.value(input).shape().to_vec(), data)?;
        self.push(out, Op::AddConst { input })
    }

    pub fn scale_const(&mut self, input: NodeId, c: f64) -> Result<NodeId, NnError> {
        let data = self.value(input).data().iter().map(|v| v * c).collect();
        let out = Tensor::new(self.value(input).shape().to_vec(), data)?;
        self.push(out, Op::ScaleConst { input, c })
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (ca, ha, wa) = self.value(a).chw()?;
        let (cb, hb, wb) = self.value(b).chw()?;
        if (ha, wa) != (hb, wb) {
            return Err(NnError::Shape(format!(
                "concat spatial extents differ: {ha}x{wa} vs {hb}x{wb}"
            )));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let a_len = self.value(a).len();
        let out = Tensor::new(vec![ca + cb, ha, wa], data)?;
        self.push(out, Op::ConcatChannels { a, b, a_len })
    }

    /// Inverted dropout: kept units scaled by 1/(1-rate) so eval needs no
    /// rescaling. Record only in training mode.
    pub fn dropout(&mut self, input: NodeId, rate: f64, rng: &mut Rng) -> Result<NodeId, NnError> {
        debug_assert!((0.0..1.0).contains(&rate));
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(input).len())
            .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
            .collect();
        let data = self
            .value(input)
            .data()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let out = Tensor::new(self.value(input).shape().to_vec(), data)?;
        self.push(out, Op::Dropout { input, mask })
    }

    pub fn edl_loss(
        &mut self,
        alpha: NodeId,
        target: &[f64],
        include_variance: bool,
    ) -> Result<NodeId, NnError> {
        let loss =
            evidential::edl_mse_loss_with(self.value(alpha).data(), target, include_variance)?;
        self.push(
            Tensor::scalar(loss),
            Op::EdlLoss { alpha, target: target.to_vec(), include_variance },
        )
    }

    pub fn kl_loss(&mut self, alpha: NodeId, target: &[f64]) -> Result<NodeId, NnError> {
        let loss = evidential::kl_regularizer(self.value(alpha).data(), target)?;
        self.push(Tensor::scalar(loss), Op::KlLoss { alpha, target: target.to_vec() })
    }

    pub fn ce_loss(
        &mut self,
        alpha: NodeId,
        target: &[f64],
        class_weights: &[f64],
    ) -> Result<NodeId, NnError> {
        let loss =
            evidential::weighted_ce_loss(self.value(alpha).data(), target, class_weights)?;
        self.push(
            Tensor::scalar(loss),
            Op::CeLoss {
                alpha,
                target: target.to_vec(),
                class_weights: class_weights.to_vec(),
            },
        )
    }

    pub fn squared_error(&mut self, pred: NodeId, target: f64) -> Result<NodeId, NnError> {
        if self.value(pred).len() != 1 {
            return Err(NnError::Shape("squared_error expects a scalar node".into()));
        }
        let d = self.value(pred).item() - target;
        self.push(Tensor::scalar(d * d), Op::SquaredError { pred, target })
    }

    /// Gradients of a scalar loss node with respect to every node.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Tensor>, NnError> {
        if self.value(loss).len() != 1 {
            return Err(NnError::Shape("backward needs a scalar loss node".into()));
        }
        if !self.value(loss).item().is_finite() {
            return Err(NnError::NonFinite("degenerate loss: non-finite loss value".into()));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()))
            .collect();
        grads[loss].data_mut()[0] = 1.0;

        for id in (0..=loss).rev() {
            let g_out = grads[id].clone();
            if g_out.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            let g = g_out.data();
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Conv2d { input, kernels, bias, padding, stride } => {
                    let x = self.nodes[*input].value.clone();
                    let k = self.nodes[*kernels].value.clone();
                    let d = ops::conv_dims(&x, &k, self.nodes[*bias].value.len(), *padding, *stride)?;
                    let xd = x.data();
                    let kd = k.data();
                    {
                        let gi = grads[*input].data_mut();
                        for co in 0..d.c_out {
                            for oh in 0..d.h_out {
                                for ow in 0..d.w_out {
                                    let go = g[(co * d.h_out + oh) * d.w_out + ow];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..d.c_in {
                                        let kbase = ((co * d.c_in + ci) * d.k) * d.k;
                                        for kh in 0..d.k {
                                            let ih = (oh * stride + kh) as isize - *padding as isize;
                                            if ih < 0 || ih >= d.h as isize {
                                                continue;
                                            }
                                            for kw in 0..d.k {
                                                let iw =
                                                    (ow * stride + kw) as isize - *padding as isize;
                                                if iw < 0 || iw >= d.w as isize {
                                                    continue;
                                                }
                                                gi[(ci * d.h + ih as usize) * d.w + iw as usize] +=
                                                    go * kd[kbase + kh * d.k + kw];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    {
                        let gk = grads[*kernels].data_mut();
                        for co in 0..d.c_out {
                            for oh in 0..d.h_out {
                                for ow in 0..d.w_out {
                                    let go = g[(co * d.h_out + oh) * d.w_out + ow];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..d.c_in {
                                        let kbase = ((co * d.c_in + ci) * d.k) * d.k;
                                        for kh in 0..d.k {
                                            let ih = (oh * stride + kh) as isize - *padding as isize;
                                            if ih < 0 || ih >= d.h as isize {
                                                continue;
                                            }
                                            for kw in 0..d.k {
                                                let iw =
                                                    (ow * stride + kw) as isize - *padding as isize;
                                                if iw < 0 || iw >= d.w as isize {
                                                    continue;
                                                }
                                                gk[kbase + kh * d.k + kw] += go
                                                    * xd[(ci * d.h + ih as usize) * d.w
                                                        + iw as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    {
                        let gb = grads[*bias].data_mut();
                        for co in 0..d.c_out {
                            for p in 0..d.h_out * d.w_out {
                                gb[co] += g[co * d.h_out * d.w_out + p];
                            }
                        }
                    }
                }
                Op::Linear { input, weight, bias } => {
                    let x = self.nodes[*input].value.clone();
                    let w = self.nodes[*weight].value.clone();
                    let n = x.len();
                    let m = w.shape()[0];
                    {
                        let gi = grads[*input].data_mut();
                        for i in 0..m {
                            for j in 0..n {
                                gi[j] += g[i] * w.data()[i * n + j];
                            }
                        }
                    }
                    {
                        let gw = grads[*weight].data_mut();
                        for i in 0..m {
                            for j in 0..n {
                                gw[i * n + j] += g[i] * x.data()[j];
                            }
                        }
                    }
                    {
                        let gb = grads[*bias].data_mut();
                        for i in 0..m {
                            gb[i] += g[i];
                        }
                    }
                }
                Op::Activation { input, kind } => {
                    let x = self.nodes[*input].value.data();
                    let gi = grads[*input].data_mut();
                    for p in 0..x.len() {
                        gi[p] += g[p] * ops::activate_grad(x[p], *kind);
                    }
                }
                Op::Pool { input, mode, indices } => {
                    let (c, h, w) = self.nodes[*input].value.chw()?;
                    let hw = h * w;
                    let gi = grads[*input].data_mut();
                    match mode {
                        PoolMode::GlobalAvg => {
                            for ci in 0..c {
                                for p in 0..hw {
                                    gi[ci * hw + p] += g[ci] / hw as f64;
                                }
                            }
                        }
                        PoolMode::GlobalMax => {
                            for ci in 0..c {
                                gi[indices[ci]] += g[ci];
                            }
                        }
                        PoolMode::ChannelwiseAvg => {
                            for ci in 0..c {
                                for p in 0..hw {
                                    gi[ci * hw + p] += g[p] / c as f64;
                                }
                            }
                        }
                        PoolMode::ChannelwiseMax => {
                            for p in 0..hw {
                                gi[indices[p]] += g[p];
                            }
                        }
                    }
                }
                Op::MaxPool2 { input, indices } => {
                    let gi = grads[*input].data_mut();
                    for (o, &src) in indices.iter().enumerate() {
                        gi[src] += g[o];
                    }
                }
                Op::ScaleByChannel { input, gates } => {
                    let (c, h, w) = self.nodes[*input].value.chw()?;
                    let hw = h * w;
                    let x = self.nodes[*input].value.clone();
                    let gt = self.nodes[*gates].value.clone();
                    {
                        let gi = grads[*input].data_mut();
                        for ci in 0..c {
                            for p in 0..hw {
                                gi[ci * hw + p] += g[ci * hw + p] * gt.data()[ci];
                            }
                        }
                    }
                    {
                        let gg = grads[*gates].data_mut();
                        for ci in 0..c {
                            for p in 0..hw {
                                gg[ci] += g[ci * hw + p] * x.data()[ci * hw + p];
                            }
                        }
                    }
                }
                Op::ScaleBySpatial { input, map } => {
                    let (c, h, w) = self.nodes[*input].value.chw()?;
                    let hw = h * w;
                    let x = self.nodes[*input].value.clone();
                    let m = self.nodes[*map].value.clone();
                    {
                        let gi = grads[*input].data_mut();
                        for ci in 0..c {
                            for p in 0..hw {
                                gi[ci * hw + p] += g[ci * hw + p] * m.data()[p];
                            }
                        }
                    }
                    {
                        let gm = grads[*map].data_mut();
                        for ci in 0..c {
                            for p in 0..hw {
                                gm[p] += g[ci * hw + p] * x.data()[ci * hw + p];
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for (p, &v) in g.iter().enumerate() {
                        grads[*a].data_mut()[p] += v;
                    }
                    for (p, &v) in g.iter().enumerate() {
                        grads[*b].data_mut()[p] += v;
                    }
                }
                Op::AddConst { input } => {
                    let gi = grads[*input].data_mut();
                    for (p, &v) in g.iter().enumerate() {
                        gi[p] += v;
                    }
                }
                Op::ScaleConst { input, c } => {
                    let gi = grads[*input].data_mut();
                    for (p, &v) in g.iter().enumerate() {
                        gi[p] += v * c;
                    }
                }
                Op::ConcatChannels { a, b, a_len } => {
                    {
                        let ga = grads[*a].data_mut();
                        for p in 0..*a_len {
                            ga[p] += g[p];
                        }
                    }
                    {
                        let gb = grads[*b].data_mut();
                        for p in 0..g.len() - *a_len {
                            gb[p] += g[*a_len + p];
                        }
                    }
                }
                Op::Dropout { input, mask } => {
                    let gi = grads[*input].data_mut();
                    for p in 0..g.len() {
                        gi[p] += g[p] * mask[p];
                    }
                }
                Op::EdlLoss { alpha, target, include_variance } => {
                    let ga = evidential::edl_mse_grad(
                        self.nodes[*alpha].value.data(),
                        target,
                        *include_variance,
                    );
                    let gi = grads[*alpha].data_mut();
                    for (p, v) in ga.iter().enumerate() {
                        gi[p] += g[0] * v;
                    }
                }
                Op::KlLoss { alpha, target } => {
                    let ga = evidential::kl_grad(self.nodes[*alpha].value.data(), target);
                    let gi = grads[*alpha].data_mut();
                    for (p, v) in ga.iter().enumerate() {
                        gi[p] += g[0] * v;
                    }
                }
                Op::CeLoss { alpha, target, class_weights } => {
                    let ga = evidential::weighted_ce_grad(
                        self.nodes[*alpha].value.data(),
                        target,
                        class_weights,
                    );
                    let gi = grads[*alpha].data_mut();
                    for (p, v) in ga.iter().enumerate() {
                        gi[p] += g[0] * v;
                    }
                }
                Op::SquaredError { pred, target } => {
                    let p = self.nodes[*pred].value.item();
                    grads[*pred].data_mut()[0] += g[0] * 2.0 * (p - target);
                }
            }
        }

        for (i, gr) in grads.iter().enumerate() {
            if !gr.all_finite() {
                return Err(NnError::NonFinite(format!("gradient of node {i} is non-finite")));
            }
        }
        Ok(grads)
    }
}

/// Max relative gradient error over the sampled parameter coordinates,
/// comparing analytic gradients against central finite differences:
/// |analytic - fd| / max(1, |analytic|, |fd|).
///
/// `eval` must be deterministic; it returns the loss and the gradient
/// tensors aligned with `params`.
pub fn finite_diff_check<F>(
    params: &mut [Tensor],
    mut eval: F,
    coords: &[(usize, usize)],
    epsilon: f64,
) -> Result<f64, NnError>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>), NnError>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(NnError::Domain(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let (loss, grads) = eval(params)?;
    if !loss.is_finite() {
        return Err(NnError::NonFinite("degenerate loss in finite_diff_check".into()));
    }
    let mut worst = 0.0f64;
    for &(pi, ei) in coords {
        let analytic = grads[pi].data()[ei];
        let orig = params[pi].data()[ei];
        params[pi].data_mut()[ei] = orig + epsilon;
        let (hi, _) = eval(params)?;
        params[pi].data_mut()[ei] = orig - epsilon;
        let (lo, _) = eval(params)?;
        params[pi].data_mut()[ei] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(NnError::NonFinite("degenerate loss during perturbation".into()));
        }
        let fd = (hi - lo) / (2.0 * epsilon);
        let rel = (analytic - fd).abs() / 1.0_f64.max(analytic.abs()).max(fd.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quadratic_closed_form() {
        // loss = w^2 at w = 3 -> gradient 6
        let mut params = vec![Tensor::scalar(3.0)];
        let err = finite_diff_check(
            &mut params,
            |ps| {
                let mut t = GradTape::new();
                let w = t.leaf(ps[0].clone())?;
                let loss = t.squared_error(w, 0.0)?;
                let grads = t.backward(loss)?;
                Ok((t.value(loss).item(), vec![grads[w].clone()]))
            },
            &[(0, 0)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn softplus_gradient_at_zero() {
        let mut t = GradTape::new();
        let w = t.leaf(Tensor::scalar(0.0)).unwrap();
        let y = t.activation(w, Activation::Softplus).unwrap();
        let grads = t.backward(y).unwrap();
        assert_relative_eq!(grads[w].item(), 0.5, epsilon = 1e-12);
    }

    fn rand_tensor(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal() * 0.5).collect()).unwrap()
    }

    /// Scalarize a node by summing via global-avg pooling or a fixed linear
    /// map, then squaring; exercises the op under test inside a composite.
    fn check_op<F>(build: F, params: Vec<Tensor>, n_coords: usize, seed: u64)
    where
        F: Fn(&mut GradTape, &[NodeId]) -> Result<NodeId, NnError>,
    {
        let mut rng = Rng::new(seed ^ 0xabcd);
        let mut coords = Vec::new();
        for (pi, p) in params.iter().enumerate() {
            for _ in 0..n_coords {
                coords.push((pi, rng.index(p.len())));
            }
        }
        let mut params = params;
        let err = finite_diff_check(
            &mut params,
            |ps| {
                let mut t = GradTape::new();
                let ids: Vec<NodeId> =
                    ps.iter().map(|p| t.leaf(p.clone()).unwrap()).collect();
                let out = build(&mut t, &ids)?;
                // reduce to scalar: sum of squares via linear on flattened? keep
                // simple: mean of elements then square
                let n = t.value(out).len();
                let flat = t.value(out).data().to_vec();
                let sum: f64 = flat.iter().sum();
                // record mean via scale_const of a manual sum: use linear with
                // ones weight when vector, else global avg pool
                let scalar = if t.value(out).shape().len() == 1 {
                    let w = t.leaf(Tensor::new(vec![1, n], vec![1.0; n]).unwrap())?;
                    let b = t.leaf(Tensor::scalar(0.0))?;
                    t.linear(out, w, b)?
                } else {
                    let pooled = t.pool(out, PoolMode::GlobalAvg)?;
                    let c = t.value(pooled).len();
                    let w = t.leaf(Tensor::new(vec![1, c], vec![1.0; c]).unwrap())?;
                    let b = t.leaf(Tensor::scalar(0.0))?;
                    t.linear(pooled, w, b)?
                };
                let _ = sum;
                let loss = t.squared_error(scalar, 0.3)?;
                let grads = t.backward(loss)?;
                let pg = ids.iter().map(|&id| grads[id].clone()).collect();
                Ok((t.value(loss).item(), pg))
            },
            &coords,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = Rng::new(21);
        let params = vec![
            rand_tensor(&mut rng, vec![2, 5, 5]),
            rand_tensor(&mut rng, vec![3, 2, 3, 3]),
            rand_tensor(&mut rng, vec![3]),
        ];
        check_op(|t, ids| t.conv2d(ids[0], ids[1], ids[2], 1, 1), params, 6, 21);
    }

    #[test]
    fn conv2d_stride2_gradients() {
        let mut rng = Rng::new(22);
        let params = vec![
            rand_tensor(&mut rng, vec![1, 5, 5]),
            rand_tensor(&mut rng, vec![2, 1, 3, 3]),
            rand_tensor(&mut rng, vec![2]),
        ];
        check_op(|t, ids| t.conv2d(ids[0], ids[1], ids[2], 0, 2), params, 6, 22);
    }

    #[test]
    fn linear_gradients() {
        let mut rng = Rng::new(23);
        let params = vec![
            rand_tensor(&mut rng, vec![4]),
            rand_tensor(&mut rng, vec![3, 4]),
            rand_tensor(&mut rng, vec![3]),
        ];
        check_op(|t, ids| t.linear(ids[0], ids[1], ids[2]), params, 4, 23);
    }

    #[test]
    fn activation_gradients() {
        for (i, kind) in [Activation::Relu, Activation::Sigmoid, Activation::Softplus]
            .into_iter()
            .enumerate()
        {
            let mut rng = Rng::new(31 + i as u64);
            // offset away from the relu kink so the FD is well-posed
            let mut p = rand_tensor(&mut rng, vec![6]);
            for v in p.data_mut() {
                if v.abs() < 0.05 {
                    *v += 0.1;
                }
            }
            check_op(move |t, ids| t.activation(ids[0], kind), vec![p], 6, 31 + i as u64);
        }
    }

    #[test]
    fn pool_gradients() {
        for (i, mode) in [
            PoolMode::GlobalAvg,
            PoolMode::GlobalMax,
            PoolMode::ChannelwiseAvg,
            PoolMode::ChannelwiseMax,
        ]
        .into_iter()
        .enumerate()
        {
            let mut rng = Rng::new(41 + i as u64);
            let p = rand_tensor(&mut rng, vec![3, 3, 3]);
            check_op(move |t, ids| t.pool(ids[0], mode), vec![p], 8, 41 + i as u64);
        }
    }

    #[test]
    fn max_pool2_gradients() {
        let mut rng = Rng::new(51);
        let p = rand_tensor(&mut rng, vec![2, 4, 4]);
        check_op(|t, ids| t.max_pool2(ids[0]), vec![p], 8, 51);
    }

    #[test]
    fn gate_and_concat_gradients() {
        let mut rng = Rng::new(61);
        let params = vec![
            rand_tensor(&mut rng, vec![2, 3, 3]),
            rand_tensor(&mut rng, vec![2]),
        ];
        check_op(|t, ids| t.scale_by_channel(ids[0], ids[1]), params, 6, 61);

        let mut rng = Rng::new(62);
        let params = vec![
            rand_tensor(&mut rng, vec![2, 3, 3]),
            rand_tensor(&mut rng, vec![1, 3, 3]),
        ];
        check_op(|t, ids| t.scale_by_spatial(ids[0], ids[1]), params, 6, 62);

        let mut rng = Rng::new(63);
        let params = vec![
            rand_tensor(&mut rng, vec![1, 3, 3]),
            rand_tensor(&mut rng, vec![2, 3, 3]),
        ];
        check_op(|t, ids| t.concat_channels(ids[0], ids[1]), params, 6, 63);
    }

    #[test]
    fn loss_node_gradients() {
        // through softplus+1 into each loss head
        for seed in [71u64, 72, 73] {
            let mut rng = Rng::new(seed);
            let logits = rand_tensor(&mut rng, vec![3]);
            let mut coords = vec![(0, 0), (0, 1), (0, 2)];
            coords.dedup();
            let y = [0.0, 1.0, 0.0];
            let mut params = vec![logits];
            let err = finite_diff_check(
                &mut params,
                |ps| {
                    let mut t = GradTape::new();
                    let z = t.leaf(ps[0].clone())?;
                    let sp = t.activation(z, Activation::Softplus)?;
                    let alpha = t.add_const(sp, 1.0)?;
                    let edl = t.edl_loss(alpha, &y, true)?;
                    let kl = t.kl_loss(alpha, &y)?;
                    let klw = t.scale_const(kl, 0.1)?;
                    let loss = t.add(edl, klw)?;
                    let grads = t.backward(loss)?;
                    Ok((t.value(loss).item(), vec![grads[z].clone()]))
                },
                &coords,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = Rng::new(99);
            let mut t = GradTape::new();
            let x = t.leaf(rand_tensor(&mut rng, vec![2, 4, 4])).unwrap();
            let k = t.leaf(rand_tensor(&mut rng, vec![2, 2, 3, 3])).unwrap();
            let b = t.leaf(rand_tensor(&mut rng, vec![2])).unwrap();
            let c = t.conv2d(x, k, b, 1, 1).unwrap();
            let a = t.activation(c, Activation::Relu).unwrap();
            let p = t.pool(a, PoolMode::GlobalAvg).unwrap();
            let w = t.leaf(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap()).unwrap();
            let bb = t.leaf(Tensor::scalar(0.0)).unwrap();
            let s = t.linear(p, w, bb).unwrap();
            let loss = t.squared_error(s, 0.5).unwrap();
            let grads = t.backward(loss).unwrap();
            (t.value(loss).item(), grads[k].clone())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert!(l1.to_bits() == l2.to_bits());
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn epsilon_bounds_enforced() {
        let mut params = vec![Tensor::scalar(1.0)];
        let r = finite_diff_check(&mut params, |_| Ok((0.0, vec![Tensor::scalar(0.0)])), &[], 1e-2);
        assert!(matches!(r, Err(NnError::Domain(_))));
    }

    #[test]
    fn non_finite_loss_is_degenerate() {
        let mut params = vec![Tensor::scalar(1.0)];
        let r = finite_diff_check(
            &mut params,
            |_| Ok((f64::NAN, vec![Tensor::scalar(0.0)])),
            &[(0, 0)],
            1e-5,
        );
        assert!(matches!(r, Err(NnError::NonFinite(_))));
    }

    #[test]
    fn dropout_mask_statistics() {
        let mut t = GradTape::new();
        let n = 100_000;
        let x = t.leaf(Tensor::new(vec![n], vec![1.0; n]).unwrap()).unwrap();
        let mut rng = Rng::new(7);
        let d = t.dropout(x, 0.4, &mut rng).unwrap();
        let kept = t.value(d).data().iter().filter(|&&v| v > 0.0).count();
        // binomial 3 sigma around keep = 0.6
        let mean = 0.6 * n as f64;
        let sigma = (n as f64 * 0.6 * 0.4).sqrt();
        assert!((kept as f64 - mean).abs() < 3.0 * sigma, "kept {kept}");
        // inverted scaling: kept units carry 1/keep
        let v = t.value(d).data().iter().copied().fold(0.0f64, f64::max);
        assert_relative_eq!(v, 1.0 / 0.6, epsilon = 1e-12);
    }
}
