//! Reverse-mode automatic differentiation over a define-by-run tape.
//!
//! A [`Graph`] records every value produced in a forward pass together with
//! a backward rule. Nodes are appended in evaluation order, so the tape is
//! already topologically sorted and acyclic by construction.
//!
//! [`Graph::backward`] does not mutate the tape: calling it twice on the same
//! loss returns identical gradients. Accumulation across passes is the
//! caller's job (see [`GradBuffer`]).

use crate::error::{GcnError, Result};
use crate::tensor::{gemm, matmul, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation.
pub(crate) trait Backward<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian products for each input. `needs[i]` is false when
    /// input `i` does not require a gradient; the rule may return `None` there.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<Var>,
    rule: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives gradients (a trainable parameter or a probed input).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the rule that produced `v` (`"leaf"` for leaves).
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].rule.as_ref().map_or("leaf", |r| r.name())
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        parents: Vec<Var>,
        rule: Option<Box<dyn Backward<T>>>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            rule,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push_op(
        &mut self,
        value: Tensor<T>,
        parents: Vec<Var>,
        rule: impl Backward<T> + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, parents, Some(Box::new(rule)), requires_grad)
    }

    /// Gradients of the scalar `loss` with respect to every leaf it reaches.
    ///
    /// Leaves that do not influence `loss` get no entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.shape() != [1] {
            return Err(GcnError::Contract(format!(
                "backward needs a scalar loss of shape [1], got {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut leaves = Vec::new();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(rule) = &node.rule else {
                leaves.push((Var(idx), grad));
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|p| self.value(*p)).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let parent_grads = rule.backward(&inputs, &node.value, &grad, &needs)?;
            for ((parent, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.value(*parent).shape(), "{}", rule.name());
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        leaves.sort_by_key(|(v, _)| *v);
        Ok(Gradients { leaves })
    }

    // ---- elementary differentiable ops ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_same_shape(vb, "add")?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push_op(out, vec![a, b], AddRule))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_same_shape(vb, "sub")?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push_op(out, vec![a, b], SubRule))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_same_shape(vb, "mul")?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push_op(out, vec![a, b], MulRule))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::lit(c);
        let out = self.value(a).map(|x| x * c);
        self.push_op(out, vec![a], ScaleRule(c))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push_op(out, vec![a], SumRule)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push_op(out, vec![a, b], MatmulRule))
    }
}

/// Result of [`Graph::backward`]: one gradient per reached leaf.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    leaves: Vec<(Var, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves
            .binary_search_by_key(&v, |(k, _)| *k)
            .ok()
            .map(|i| &self.leaves[i].1)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.leaves.iter().map(|(v, t)| (*v, t))
    }
}

/// Gradient accumulators for a parameter list. Zeroed explicitly between
/// optimizer steps; [`GradBuffer::accumulate`] adds into the buffers.
#[derive(Clone, Debug)]
pub struct GradBuffer<T: Scalar> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> GradBuffer<T> {
    pub fn for_params(params: &[Tensor<T>]) -> Self {
        GradBuffer {
            grads: params.iter().map(Tensor::zeros_like).collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(T::zero());
        }
    }

    /// Add the gradients of `bound[i]` into buffer `i`.
    pub fn accumulate(&mut self, grads: &Gradients<T>, bound: &[Var]) -> Result<()> {
        if bound.len() != self.grads.len() {
            return Err(GcnError::Contract(format!(
                "{} bound parameters for {} gradient buffers",
                bound.len(),
                self.grads.len()
            )));
        }
        for (buf, v) in self.grads.iter_mut().zip(bound) {
            if let Some(g) = grads.get(*v) {
                buf.add_assign(g)?;
            }
        }
        Ok(())
    }

    pub fn grads(&self) -> &[Tensor<T>] {
        &self.grads
    }

    pub fn max_abs(&self) -> T {
        self.grads
            .iter()
            .fold(T::zero(), |m, g| m.max(g.max_abs()))
    }
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every
/// element of `x`.
pub fn finite_difference_grad<T, F>(mut f: F, x: &Tensor<T>, eps: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if !(eps > T::zero()) {
        return Err(GcnError::Contract("finite differences need eps > 0".into()));
    }
    let mut probe = x.clone();
    let mut out = x.zeros_like();
    let two_eps = eps + eps;
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / two_eps;
    }
    Ok(out)
}

struct AddRule;

impl<T: Scalar> Backward<T> for AddRule {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad.clone()), Some(grad.clone())])
    }
}

struct SubRule;

impl<T: Scalar> Backward<T> for SubRule {
    fn name(&self) -> &'static str {
        "sub"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad.clone()), Some(grad.map(|g| -g))])
    }
}

struct MulRule;

impl<T: Scalar> Backward<T> for MulRule {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let prod = |other: &Tensor<T>| {
            let data = grad.data().iter().zip(other.data()).map(|(&g, &o)| g * o).collect();
            Tensor::from_parts(grad.shape().to_vec(), data)
        };
        Ok(vec![
            needs[0].then(|| prod(inputs[1])),
            needs[1].then(|| prod(inputs[0])),
        ])
    }
}

struct ScaleRule<T>(T);

impl<T: Scalar> Backward<T> for ScaleRule<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let c = self.0;
        Ok(vec![Some(grad.map(|g| g * c))])
    }
}

struct SumRule;

impl<T: Scalar> Backward<T> for SumRule {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut g = inputs[0].zeros_like();
        g.fill(grad.item());
        Ok(vec![Some(g)])
    }
}

struct MatmulRule;

impl<T: Scalar> Backward<T> for MatmulRule {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let da = needs[0].then(|| {
            let mut d = vec![T::zero(); m * k];
            gemm(false, true, m, n, k, grad.data(), b.data(), T::zero(), &mut d);
            Tensor::from_parts(vec![m, k], d)
        });
        let db = needs[1].then(|| {
            let mut d = vec![T::zero(); k * n];
            gemm(true, false, k, m, n, a.data(), grad.data(), T::zero(), &mut d);
            Tensor::from_parts(vec![k, n], d)
        });
        Ok(vec![da, db])
    }
}
