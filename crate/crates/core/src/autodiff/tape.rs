use crate::error::{Error, Result};

use super::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use super::norm::{batchnorm_backward, batchnorm_forward, BnGrads, BnMode, BnStats};
use super::ops::{bce_forward, bce_term, gauss_act, gauss_act_deriv, sigmoid, BceTarget, Elementwise};
use super::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Add { a: Var, b: Var, bcast: bool },
    Mul { a: Var, b: Var, bcast: bool },
    Relu(Var),
    Sigmoid(Var),
    Affine { a: Var, scale: T },
    Gauss { a: Var, sigma: T },
    Upsample { a: Var, factor: usize },
    Concat { a: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Sum(Var),
    SumSquares(Var),
    Bce { pred: Var, target: BceTarget<T>, norm: f64 },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Append-only differentiation graph.
///
/// Node order is creation order, so parents always precede children and the
/// reverse sweep in [`Tape::backward`] needs no explicit sort.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Copy of `v` with no parents: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        let y = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        Ok(self.push(y, Op::Conv { x, w, b, geom }, rg))
    }

    fn broadcast_kind(&self, a: Var, b: Var) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(false);
        }
        match (sa, sb) {
            ([n, _, h, w], [n2, 1, h2, w2]) if n == n2 && h == h2 && w == w2 => Ok(true),
            _ => Err(Error::Shape(format!("incompatible shapes {sa:?} and {sb:?}"))),
        }
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let bcast = self.broadcast_kind(a, b)?;
        let va = self.value(a);
        let vb = self.value(b).data();
        let plane = if bcast { vb.len() / va.shape()[0] } else { 0 };
        let chans = if bcast { va.shape()[1] } else { 1 };
        let out: Vec<T> = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = if bcast { vb[(i / (plane * chans)) * plane + i % plane] } else { vb[i] };
                if mul {
                    x * y
                } else {
                    x + y
                }
            })
            .collect();
        let t = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        let op = if mul { Op::Mul { a, b, bcast } } else { Op::Add { a, b, bcast } };
        Ok(self.push(t, op, rg))
    }

    /// Sum; `b` may broadcast over the channel axis (`[N,1,H,W]`).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    /// Product; `b` may broadcast over the channel axis (`[N,1,H,W]`).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        self.unary(a, Op::Affine { a, scale }, |x| scale * x + shift)
    }

    pub fn gauss_act(&mut self, a: Var, sigma: T) -> Var {
        self.unary(a, Op::Gauss { a, sigma }, |x| gauss_act(x, sigma))
    }

    /// Dispatches a pointwise operation; binary kinds require `b`.
    pub fn elementwise(&mut self, kind: Elementwise<T>, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| Error::Shape("binary elementwise op needs two operands".into()));
        Ok(match kind {
            Elementwise::Add => self.add(a, need_b()?)?,
            Elementwise::Mul => self.mul(a, need_b()?)?,
            Elementwise::Relu => self.relu(a),
            Elementwise::Sigmoid => self.sigmoid(a),
            Elementwise::ScalarAffine { scale, shift } => self.affine(a, scale, shift),
            Elementwise::GaussAct { sigma } => self.gauss_act(a, sigma),
        })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Shape("upsampling factor must be positive".into()));
        }
        if factor == 1 {
            return Ok(a);
        }
        let va = self.value(a);
        let (n, c, h, w) = va.dims4()?;
        let (h2, w2) = (h * factor, w * factor);
        let src = va.data();
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for p in 0..n * c {
            for y in 0..h2 {
                let srow = &src[(p * h + y / factor) * w..][..w];
                let drow = &mut out[(p * h2 + y) * w2..][..w2];
                for (x, d) in drow.iter_mut().enumerate() {
                    *d = srow[x / factor];
                }
            }
        }
        let t = Tensor::new(vec![n, c, h2, w2], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Upsample { a, factor }, rg))
    }

    pub fn upsample_nearest2x(&mut self, a: Var) -> Result<Var> {
        self.upsample_nearest(a, 2)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if na != nb || ha != hb || wa != wb {
            return Err(Error::Shape(format!(
                "concat of [{na},{ca},{ha},{wa}] and [{nb},{cb},{hb},{wb}]"
            )));
        }
        let hw = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(na * (ca + cb) * hw);
        for s in 0..na {
            out.extend_from_slice(&da[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&db[s * cb * hw..(s + 1) * cb * hw]);
        }
        let t = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Concat { a, b }, rg))
    }

    /// Batch normalisation over `(N, H, W)` per channel. In train mode the
    /// updated running statistics are returned; the caller owns them.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &BnStats<T>,
        mode: BnMode,
    ) -> Result<(Var, Option<BnStats<T>>)> {
        let dims = self.value(x).dims4()?;
        let fw = batchnorm_forward(
            self.value(x).data(),
            dims,
            self.value(gamma).data(),
            self.value(beta).data(),
            stats,
            mode,
        )?;
        let t = Tensor::new(vec![dims.0, dims.1, dims.2, dims.3], fw.y)?;
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: fw.xhat,
            inv_std: fw.inv_std,
            train: mode == BnMode::Train,
        };
        Ok((self.push(t, op, rg), fw.updated))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().map(|&x| x * x).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumSquares(a), rg)
    }

    /// Class-weighted binary cross-entropy, averaged with weights over valid
    /// entries. Returns the loss and whether every entry was invalid (in which
    /// case the loss is defined as zero).
    pub fn weighted_bce(&mut self, pred: Var, target: BceTarget<T>) -> Result<(Var, bool)> {
        let (_, c, h, w) = self.value(pred).dims4()?;
        let n = self.value(pred).numel();
        if target.target.len() != n || target.valid.len() != n || target.weights.len() != c {
            return Err(Error::Shape(format!(
                "bce target sized {}/{}/{} for prediction {:?}",
                target.target.len(),
                target.valid.len(),
                target.weights.len(),
                self.shape(pred)
            )));
        }
        let (loss, norm) = bce_forward(self.value(pred).data(), &target, c, h * w);
        let rg = self.rg(&[pred]);
        let v = self.push(Tensor::scalar(loss), Op::Bce { pred, target, norm }, rg);
        Ok((v, norm == 0.0))
    }

    /// Fingerprint of every non-smooth branch taken so far: the sign of each
    /// relu input and whether each loss prediction was clipped. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let lo = T::lit(super::BCE_CLIP);
        let hi = T::one() - lo;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for &x in self.nodes[a.0].value.data() {
                        (x > T::zero()).hash(&mut h);
                    }
                }
                Op::Bce { pred, .. } => {
                    for &p in self.nodes[pred.0].value.data() {
                        (p > lo && p < hi).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar. Gradients are added to every reachable
    /// node's slot, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]).as_mut_slice())
    }

    fn take_slot(&self, grads: &mut [Option<Vec<T>>], v: Var) -> Option<Vec<T>> {
        let node = &self.nodes[v.0];
        node.requires_grad
            .then(|| grads[v.0].take().unwrap_or_else(|| vec![T::zero(); node.value.numel()]))
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let n = self.value(*x).shape()[0];
                let mut dw = self.take_slot(grads, *w);
                let mut db = b.and_then(|b| self.take_slot(grads, b));
                let mut dx = self.take_slot(grads, *x);
                conv2d_backward(
                    geom,
                    n,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                    dx.as_deref_mut(),
                );
                if let Some(v) = dw {
                    grads[w.0] = Some(v);
                }
                if let (Some(v), Some(b)) = (db, b) {
                    grads[b.0] = Some(v);
                }
                if let Some(v) = dx {
                    grads[x.0] = Some(v);
                }
            }
            Op::Add { a, b, bcast } | Op::Mul { a, b, bcast } => {
                let is_mul = matches!(node.op, Op::Mul { .. });
                let va = self.value(*a);
                let vb = self.value(*b).data();
                let plane = if *bcast { vb.len() / va.shape()[0] } else { 0 };
                let chans = if *bcast { va.shape()[1] } else { 1 };
                let bidx = |i: usize| if *bcast { (i / (plane * chans)) * plane + i % plane } else { i };
                if let Some(da) = self.slot(grads, *a) {
                    for (k, d) in da.iter_mut().enumerate() {
                        *d += if is_mul { g[k] * vb[bidx(k)] } else { g[k] };
                    }
                }
                let ad = va.data();
                if let Some(db) = self.slot(grads, *b) {
                    for (k, &gk) in g.iter().enumerate() {
                        db[bidx(k)] += if is_mul { gk * ad[k] } else { gk };
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gk), &xk) in da.iter_mut().zip(g).zip(x) {
                        if xk > T::zero() {
                            *d += gk;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gk), &yk) in da.iter_mut().zip(g).zip(y) {
                        *d += gk * yk * (T::one() - yk);
                    }
                }
            }
            Op::Affine { a, scale } => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &gk)| *d += gk * *scale);
                }
            }
            Op::Gauss { a, sigma } => {
                let x = self.value(*a).data();
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gk), &xk) in da.iter_mut().zip(g).zip(x) {
                        *d += gk * gauss_act_deriv(xk, *sigma);
                    }
                }
            }
            Op::Upsample { a, factor } => {
                let (n, c, h, w) = self.value(*a).dims4().expect("rank 4");
                let (h2, w2) = (h * factor, w * factor);
                if let Some(da) = self.slot(grads, *a) {
                    for p in 0..n * c {
                        for y in 0..h2 {
                            let grow = &g[(p * h2 + y) * w2..][..w2];
                            let drow = &mut da[(p * h + y / factor) * w..][..w];
                            for (x, &gk) in grow.iter().enumerate() {
                                drow[x / factor] += gk;
                            }
                        }
                    }
                }
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4().expect("rank 4");
                let cb = self.value(*b).shape()[1];
                let hw = h * w;
                let ct = ca + cb;
                if let Some(da) = self.slot(grads, *a) {
                    for s in 0..n {
                        let src = &g[s * ct * hw..][..ca * hw];
                        da[s * ca * hw..][..ca * hw].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for s in 0..n {
                        let src = &g[(s * ct + ca) * hw..][..cb * hw];
                        db[s * cb * hw..][..cb * hw].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let dims = self.value(*x).dims4().expect("rank 4");
                let gam = self.value(*gamma).data();
                let mut dx = self.take_slot(grads, *x);
                let mut dg = self.take_slot(grads, *gamma);
                let mut dbt = self.take_slot(grads, *beta);
                batchnorm_backward(
                    g,
                    xhat,
                    inv_std,
                    gam,
                    dims,
                    *train,
                    BnGrads { dx: dx.as_deref_mut(), dgamma: dg.as_deref_mut(), dbeta: dbt.as_deref_mut() },
                );
                if let Some(v) = dx {
                    grads[x.0] = Some(v);
                }
                if let Some(v) = dg {
                    grads[gamma.0] = Some(v);
                }
                if let Some(v) = dbt {
                    grads[beta.0] = Some(v);
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumSquares(a) => {
                let x = self.value(*a).data();
                if let Some(da) = self.slot(grads, *a) {
                    let two = T::lit(2.0);
                    da.iter_mut().zip(x).for_each(|(d, &xk)| *d += two * xk * g[0]);
                }
            }
            Op::Bce { pred, target, norm } => {
                if *norm == 0.0 {
                    return;
                }
                let (_, c, h, w) = self.value(*pred).dims4().expect("rank 4");
                let hw = h * w;
                let p = self.value(*pred).data();
                let scale = g[0].as_f64() / norm;
                if let Some(dp) = self.slot(grads, *pred) {
                    for (k, d) in dp.iter_mut().enumerate() {
                        if !target.valid[k] {
                            continue;
                        }
                        let mu = target.weights[(k / hw) % c];
                        let (_, dl) = bce_term(p[k], target.target[k], target.literal);
                        *d += T::lit(scale) * mu * dl;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_loss_has_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0f64));
        tape.backward(x).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0f64));
        let y = tape.param(Tensor::scalar(3.0f64));
        let z = tape.mul(x, y).unwrap();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0]);
        assert_eq!(tape.grad(y).unwrap(), &[2.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0f64));
        let y = tape.sum_squares(x);
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t(vec![2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(Tensor::scalar(0.0f64));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn conv_scaling_and_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0f64));
        let w = tape.constant(Tensor::full(vec![1, 1, 1, 1], 2.0));
        let b = tape.constant(Tensor::zeros(vec![1]));
        let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));

        let xv = Tensor::from_fn(vec![1, 1, 4, 5], |i| i as f64 * 0.5 - 3.0);
        let x = tape.constant(xv.clone());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.constant(t(vec![1, 1, 3, 3], &k));
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(tape.value(y), &xv);
    }

    #[test]
    fn upsample_blocks_and_gradient_of_four() {
        let mut tape = Tape::new();
        let x = tape.param(t(vec![1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let u = tape.upsample_nearest2x(x).unwrap();
        assert_eq!(
            tape.value(u).data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let s = tape.sum(u);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0; 4]);
    }

    #[test]
    fn concat_shapes_and_empty_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(vec![2, 2, 3, 3], |i| i as f64));
        let b = tape.constant(Tensor::zeros(vec![2, 3, 3, 3]));
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 5, 3, 3]);
        let e = tape.constant(Tensor::zeros(vec![2, 0, 3, 3]));
        let ae = tape.concat_channels(a, e).unwrap();
        assert_eq!(tape.value(ae), tape.value(a));
        let bad = tape.constant(Tensor::zeros(vec![2, 1, 4, 3]));
        assert!(tape.concat_channels(a, bad).is_err());
    }

    #[test]
    fn batchnorm_normalises_and_gamma_zero_gives_beta() {
        let mut tape = Tape::new();
        let xv = Tensor::from_fn(vec![3, 2, 4, 4], |i| ((i * 37) % 11) as f64 * 0.3 + (i % 2) as f64);
        let x = tape.constant(xv);
        let g = tape.constant(Tensor::full(vec![2], 1.0));
        let b = tape.constant(Tensor::zeros(vec![2]));
        let (y, upd) = tape.batchnorm2d(x, g, b, &BnStats::new(2), BnMode::Train).unwrap();
        assert!(upd.is_some());
        let y = tape.value(y).data().to_vec();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|s| y[(s * 2 + ch) * 16..][..16].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-4, "var {v}");
        }
        let g0 = tape.constant(Tensor::zeros(vec![2]));
        let b1 = tape.constant(t(vec![2], &[0.25, -1.5]));
        let (y, _) = tape.batchnorm2d(x, g0, b1, &BnStats::new(2), BnMode::Train).unwrap();
        for s in 0..3 {
            for ch in 0..2 {
                let want = [0.25, -1.5][ch];
                assert!(tape.value(y).data()[(s * 2 + ch) * 16..][..16].iter().all(|&v| v == want));
            }
        }
    }

    #[test]
    fn batchnorm_train_rejects_single_value() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 1, 1]));
        let g = tape.constant(Tensor::full(vec![1], 1.0f64));
        let b = tape.constant(Tensor::zeros(vec![1]));
        assert!(tape.batchnorm2d(x, g, b, &BnStats::new(1), BnMode::Train).is_err());
        assert!(tape.batchnorm2d(x, g, b, &BnStats::new(1), BnMode::Eval).is_ok());
    }

    #[test]
    fn add_rejects_incompatible_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![1, 2, 3, 3]));
        let b = tape.constant(Tensor::<f64>::zeros(vec![1, 2, 3, 4]));
        assert!(tape.add(a, b).is_err());
        let c = tape.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        assert!(tape.mul(a, c).is_ok());
    }

    #[test]
    fn detach_stops_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0f64));
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }
}
