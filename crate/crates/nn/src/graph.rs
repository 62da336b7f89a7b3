//! Tape-based reverse-mode differentiation over volumetric tensors.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::kernels::conv::{self, ConvGeom};
use crate::kernels::norm;
use crate::kernels::pool;
use crate::kernels::resample::{self, Interp};
use crate::loss;
use crate::params::{NormUpdate, ParamId, ParamKind, ParamStore};
use crate::precision::{round_half_slice, Precision};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        depthwise: bool,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool {
        x: Var,
        arg: Vec<u32>,
    },
    Resize {
        x: Var,
        mode: Interp,
    },
    Concat(Vec<Var>),
    Add(Var, Var),
    Dropout {
        x: Var,
        keep: Vec<f32>,
    },
    DiceLoss {
        pred: Var,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of every trainable parameter touched by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.as_mut())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|(_, g)| g.is_finite())
    }

    pub fn scale(&mut self, k: f32) {
        for t in self.grads.iter_mut().flatten() {
            for v in t.data_mut() {
                *v *= k;
            }
        }
    }
}

/// A single forward (and optional backward) evaluation of a network.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    mode: Mode,
    precision: Precision,
    rng: ChaCha8Rng,
    norm_updates: Vec<NormUpdate>,
    param_nodes: Vec<Option<Var>>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode, precision: Precision, seed: u64) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            mode,
            precision,
            rng: ChaCha8Rng::seed_from_u64(seed),
            norm_updates: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Statistics observed by normalization layers in training mode.
    pub fn take_norm_updates(&mut self) -> Vec<NormUpdate> {
        std::mem::take(&mut self.norm_updates)
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.precision == Precision::Mixed && !matches!(op, Op::DiceLoss { .. }) {
            round_half_slice(value.data_mut());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let trainable = self.store.kind(id) == ParamKind::Trainable;
        let v = self.push(self.store.get(id).clone(), Op::Param(id), trainable);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn conv(
        &mut self,
        x: Var,
        w: ParamId,
        b: Option<ParamId>,
        geom: ConvGeom,
        depthwise: bool,
    ) -> Result<Var> {
        let wv = self.param(w);
        let bv = b.map(|b| self.param(b));
        let out = {
            let xt = self.value(x);
            let wt = self.value(wv);
            let bt = bv.map(|b| self.value(b));
            if depthwise {
                conv::depthwise_forward(xt, wt, bt, &geom)?
            } else {
                conv::conv3d_forward(xt, wt, bt, &geom)?
            }
        };
        Ok(self.push(
            out,
            Op::Conv {
                x,
                w: wv,
                b: bv,
                geom,
                depthwise,
            },
            true,
        ))
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        eps: f32,
    ) -> Result<Var> {
        let gv = self.param(gamma);
        let bv = self.param(beta);
        let channels = self.value(x).shape()[1];
        if self.value(gv).numel() != channels {
            return Err(NnError::Shape(format!(
                "normalization over {channels} channels with {} scales",
                self.value(gv).numel()
            )));
        }
        let (out, xhat, inv_std, batch_stats) = match self.mode {
            Mode::Train => {
                let f = norm::batch_norm_train(
                    self.value(x),
                    self.value(gv).data(),
                    self.value(bv).data(),
                    eps,
                );
                self.norm_updates.push(NormUpdate {
                    running_mean,
                    running_var,
                    batch_mean: f.mean,
                    batch_var: f.var_unbiased,
                });
                (f.output, f.xhat, f.inv_std, true)
            }
            Mode::Eval => {
                let (o, xh, istd) = norm::batch_norm_eval(
                    self.value(x),
                    self.value(gv).data(),
                    self.value(bv).data(),
                    self.store.get(running_mean).data(),
                    self.store.get(running_var).data(),
                    eps,
                );
                (o, xh, istd, false)
            }
        };
        Ok(self.push(
            out,
            Op::Norm {
                x,
                gamma: gv,
                beta: bv,
                xhat,
                inv_std,
                batch_stats,
            },
            true,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = v.max(0.0);
        }
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn max_pool(&mut self, x: Var, window: [usize; 3]) -> Result<Var> {
        let sp = self.value(x).spatial()?;
        if (0..3).any(|a| window[a] == 0 || sp[a] < window[a]) {
            return Err(NnError::Shape(format!("cannot pool {sp:?} by {window:?}")));
        }
        let (out, arg) = pool::max_pool_forward(self.value(x), window);
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool { x, arg }, rg))
    }

    pub fn resize(&mut self, x: Var, size: [usize; 3], mode: Interp) -> Result<Var> {
        self.value(x).dims5()?;
        if size.contains(&0) {
            return Err(NnError::Shape(format!("cannot resize to {size:?}")));
        }
        let out = resample::resize_forward(self.value(x), size, mode);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Resize { x, mode }, rg))
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]).dims5()?;
        let mut channels = 0;
        for &v in xs {
            let d = self.value(v).dims5()?;
            if d[0] != first[0] || d[2..] != first[2..] {
                return Err(NnError::Shape(format!("concat {first:?} with {d:?}")));
            }
            channels += d[1];
        }
        let [n, _, dd, h, w] = first;
        let sp = dd * h * w;
        let mut data = Vec::with_capacity(n * channels * sp);
        for s in 0..n {
            for &v in xs {
                data.extend_from_slice(self.value(v).sample(s));
            }
        }
        let out = Tensor::from_vec(&[n, channels, dd, h, w], data)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(out, Op::Concat(xs.to_vec()), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NnError::Shape(format!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Channel-wise ("spatial") dropout; identity in evaluation mode.
    pub fn spatial_dropout(&mut self, x: Var, rate: f32) -> Result<Var> {
        if self.mode == Mode::Eval || rate <= 0.0 {
            return Ok(x);
        }
        let [n, c, ..] = self.value(x).dims5()?;
        let scale = 1.0 / (1.0 - rate);
        let keep: Vec<f32> = (0..n * c)
            .map(|_| if self.rng.random::<f32>() < rate { 0.0 } else { scale })
            .collect();
        let mut out = self.value(x).clone();
        let per = out.numel() / (n * c);
        for (g, k) in keep.iter().enumerate() {
            for v in &mut out.data_mut()[g * per..(g + 1) * per] {
                *v *= k;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Dropout { x, keep }, rg))
    }

    /// Class-average soft Dice loss of probabilities `pred` against binary `target`.
    /// Always evaluated in 32-bit (internally 64-bit) arithmetic.
    pub fn dice_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(NnError::Shape(format!(
                "prediction {:?} vs target {:?}",
                p.shape(),
                target.shape()
            )));
        }
        let l = loss::dice_loss(p.data(), target.data(), p.shape()[0]);
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(l as f32),
            Op::DiceLoss {
                pred,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar node. `seed` multiplies the initial gradient
    /// (the loss scale in mixed precision).
    pub fn backward(&self, root: Var, seed: f32) -> Result<Gradients> {
        let mixed = self.precision == Precision::Mixed;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), seed));
        let mut out = Gradients {
            grads: vec![None; self.store.len()],
        };
        let accumulate = |grads: &mut Vec<Option<Tensor>>, v: Var, mut g: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            if mixed {
                round_half_slice(g.data_mut());
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    out.grads[id.0] = Some(dy);
                }
                Op::Conv {
                    x,
                    w,
                    b,
                    geom,
                    depthwise,
                } => {
                    let xt = self.value(*x);
                    let wt = self.value(*w);
                    let need_dx = self.rg(*x);
                    let g = if *depthwise {
                        conv::depthwise_backward(xt, wt, geom, &dy, need_dx)?
                    } else {
                        conv::conv3d_backward(xt, wt, geom, &dy, need_dx)?
                    };
                    if let Some(dx) = g.dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    accumulate(&mut grads, *w, g.dw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, g.db);
                    }
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let g = norm::batch_norm_backward(
                        &dy,
                        xhat,
                        self.value(*gamma).data(),
                        inv_std,
                        *batch_stats,
                    );
                    let c = g.dgamma.len();
                    accumulate(&mut grads, *x, g.dx);
                    accumulate(&mut grads, *gamma, Tensor::from_vec(&[c], g.dgamma)?);
                    accumulate(&mut grads, *beta, Tensor::from_vec(&[c], g.dbeta)?);
                }
                Op::Relu(x) => {
                    let mut dx = dy;
                    for (g, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let mut dx = dy;
                    for (g, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        *g *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaxPool { x, arg } => {
                    let dx = pool::max_pool_backward(&dy, arg, self.value(*x).shape());
                    accumulate(&mut grads, *x, dx);
                }
                Op::Resize { x, mode } => {
                    let dx = resample::resize_backward(&dy, self.value(*x).spatial()?, *mode);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat(xs) => {
                    let [n, c_total, d, h, w] = dy.dims5()?;
                    let sp = d * h * w;
                    let mut offset = 0;
                    for &v in xs {
                        let c = self.value(v).shape()[1];
                        if self.rg(v) {
                            let mut part = Vec::with_capacity(n * c * sp);
                            for s in 0..n {
                                let base = (s * c_total + offset) * sp;
                                part.extend_from_slice(&dy.data()[base..base + c * sp]);
                            }
                            accumulate(&mut grads, v, Tensor::from_vec(&[n, c, d, h, w], part)?);
                        }
                        offset += c;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Op::Dropout { x, keep } => {
                    let mut dx = dy;
                    let per = dx.numel() / keep.len();
                    for (g, k) in keep.iter().enumerate() {
                        for v in &mut dx.data_mut()[g * per..(g + 1) * per] {
                            *v *= k;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::DiceLoss { pred, target } => {
                    let p = self.value(*pred);
                    let g = loss::dice_loss_grad(
                        p.data(),
                        target.data(),
                        p.shape()[0],
                        dy.data()[0] as f64,
                    );
                    accumulate(&mut grads, *pred, Tensor::from_vec(p.shape(), g)?);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    #[test]
    fn shared_parameter_receives_summed_gradient() {
        let mut store = ParamStore::new(0);
        let w = store.add("w", &[1, 1, 1, 1, 1], Init::Ones, ParamKind::Trainable);
        let g = Graph::new(&store, Mode::Train, Precision::Full, 0);
        let mut g = g;
        let x = g.input(Tensor::full(&[1, 1, 2, 2, 2], 0.5));
        let a = g.conv(x, w, None, ConvGeom::pointwise(), false).unwrap();
        let b = g.conv(a, w, None, ConvGeom::pointwise(), false).unwrap();
        let p = g.sigmoid(b);
        let l = g.dice_loss(p, &Tensor::full(&[1, 1, 2, 2, 2], 1.0)).unwrap();
        let grads = g.backward(l, 1.0).unwrap();
        assert!(grads.get(w).is_some());
        assert_eq!(grads.iter().count(), 1);
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let store = ParamStore::new(0);
        let mut g = Graph::new(&store, Mode::Eval, Precision::Full, 0);
        let x = g.input(Tensor::full(&[1, 3, 2, 2, 2], 2.0));
        let y = g.spatial_dropout(x, 0.5).unwrap();
        assert_eq!(x, y);
    }
}
