use std::collections::{HashMap, HashSet};

use super::array::Array;
use super::ops::{conv_forward, conv_input_grad, conv_weight_grad};
use super::tensor::{set_grad_enabled, Op, Tensor};
use crate::error::{Error, Result};

/// Gradients of a scalar `root` with respect to each tensor in `wrt`, in
/// order.
///
/// With `create_graph` the returned gradients are themselves recorded in the
/// graph and can be differentiated again; otherwise they are detached
/// constants.
pub fn grad(root: &Tensor, wrt: &[Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if root.numel() != 1 {
        return Err(Error::NotScalar(root.shape().to_vec()));
    }
    let order = topo_order(root);

    let wrt_ids: HashSet<usize> = wrt.iter().map(Tensor::id).collect();
    // A node needs a gradient when some `wrt` tensor lies at or below it.
    let mut needs: HashSet<usize> = HashSet::new();
    for t in &order {
        let below = t
            .node
            .grad_fn
            .as_ref()
            .is_some_and(|g| g.inputs.iter().any(|i| needs.contains(&i.id())));
        if wrt_ids.contains(&t.id()) || below {
            needs.insert(t.id());
        }
    }
    for (i, w) in wrt.iter().enumerate() {
        if !needs.contains(&w.id()) {
            return Err(Error::Unreachable(i));
        }
    }

    let _mode = set_grad_enabled(create_graph);
    let mut grads: HashMap<usize, Tensor> = HashMap::new();
    grads.insert(root.id(), Tensor::constant(Array::full(root.shape(), 1.0)));
    let mut found: HashMap<usize, Tensor> = HashMap::new();

    for t in order.iter().rev() {
        if !needs.contains(&t.id()) {
            continue;
        }
        let Some(g) = grads.remove(&t.id()) else {
            continue;
        };
        if wrt_ids.contains(&t.id()) {
            found.insert(t.id(), g.clone());
        }
        let Some(gf) = t.node.grad_fn.as_ref() else {
            continue;
        };
        let mask: Vec<bool> = gf.inputs.iter().map(|i| needs.contains(&i.id())).collect();
        let input_grads = vjp(&gf.op, &gf.inputs, &g, &mask)?;
        for ((input, ig), wanted) in gf.inputs.iter().zip(input_grads).zip(&mask) {
            let (Some(ig), true) = (ig, *wanted) else {
                continue;
            };
            let acc = match grads.remove(&input.id()) {
                Some(prev) => prev.add(&ig)?,
                None => ig,
            };
            grads.insert(input.id(), acc);
        }
    }

    wrt.iter()
        .map(|w| {
            // Reachable but every path carried an exactly-zero contribution
            // through pruning; report zeros of the right shape.
            Ok(found
                .get(&w.id())
                .cloned()
                .unwrap_or_else(|| Tensor::constant(Array::zeros(w.shape()))))
        })
        .collect()
}

/// Post-order over nodes that require grad, inputs before consumers.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    if !root.requires_grad() {
        return order;
    }
    // (tensor, next input index to visit)
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.id());
    while let Some((t, next)) = stack.pop() {
        let inputs = t
            .node
            .grad_fn
            .as_ref()
            .map(|g| g.inputs.as_slice())
            .unwrap_or(&[]);
        if let Some(child) = inputs[next..]
            .iter()
            .position(|c| c.requires_grad() && !visited.contains(&c.id()))
        {
            let c = inputs[next + child].clone();
            stack.push((t, next + child + 1));
            visited.insert(c.id());
            stack.push((c, 0));
        } else {
            order.push(t);
        }
    }
    order
}

/// Vector-Jacobian product of one op, expressed in differentiable ops so that
/// it can itself be recorded.
fn vjp(op: &Op, inputs: &[Tensor], g: &Tensor, mask: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let want = |i: usize| mask.get(i).copied().unwrap_or(false);
    let one = |t: Result<Tensor>| -> Result<Vec<Option<Tensor>>> { Ok(vec![Some(t?)]) };
    match op {
        Op::Add => Ok(vec![Some(g.clone()), Some(g.clone())]),
        Op::Sub => Ok(vec![
            Some(g.clone()),
            if want(1) { Some(g.neg()?) } else { None },
        ]),
        Op::Mul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            Ok(vec![
                if want(0) { Some(g.mul(b)?) } else { None },
                if want(1) { Some(g.mul(a)?) } else { None },
            ])
        }
        Op::Div => {
            let (a, b) = (&inputs[0], &inputs[1]);
            Ok(vec![
                if want(0) { Some(g.div(b)?) } else { None },
                if want(1) {
                    Some(g.mul(a)?.div(&b.mul(b)?)?.neg()?)
                } else {
                    None
                },
            ])
        }
        Op::Neg => one(g.neg()),
        Op::Scale(c) => one(g.scale(*c)),
        Op::AddScalar => Ok(vec![Some(g.clone())]),
        Op::Exp => one(g.mul(&inputs[0].exp()?)),
        Op::Ln => one(g.div(&inputs[0])),
        Op::Sqrt => one(g.div(&inputs[0].sqrt()?.scale(2.0)?)),
        Op::Sigmoid => {
            let s = inputs[0].sigmoid()?;
            one(g.mul(&s.mul(&s.neg()?.add_scalar(1.0)?)?))
        }
        Op::Softplus => one(g.mul(&inputs[0].sigmoid()?)),
        Op::MaskMul(m) => one(g.mask_mul(m.clone())),
        Op::MatMul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            Ok(vec![
                if want(0) {
                    Some(g.matmul(&b.t()?)?)
                } else {
                    None
                },
                if want(1) {
                    Some(a.t()?.matmul(g)?)
                } else {
                    None
                },
            ])
        }
        Op::Transpose => one(g.t()),
        Op::Reshape => one(g.reshape(inputs[0].shape())),
        Op::ExpandTo => one(g.reduce_to(inputs[0].shape())),
        Op::ReduceTo => one(g.expand_to(inputs[0].shape())),
        Op::Slice { axis, start } => one(g.pad_axis(*axis, *start, inputs[0].shape()[*axis])),
        Op::Pad { axis, start } => one(g.slice_axis(*axis, *start, inputs[0].shape()[*axis])),
        Op::Conv2d(geom) => {
            let (x, w) = (&inputs[0], &inputs[1]);
            Ok(vec![
                if want(0) {
                    Some(conv_input_grad(g, w, *geom)?)
                } else {
                    None
                },
                if want(1) {
                    Some(conv_weight_grad(x, g, *geom)?)
                } else {
                    None
                },
            ])
        }
        Op::ConvInputGrad(geom) => {
            // inputs: (output-side gradient, weight); g has the input shape.
            let (og, w) = (&inputs[0], &inputs[1]);
            Ok(vec![
                if want(0) {
                    Some(conv_forward(g, w, *geom)?)
                } else {
                    None
                },
                if want(1) {
                    Some(conv_weight_grad(g, og, *geom)?)
                } else {
                    None
                },
            ])
        }
        Op::ConvWeightGrad(geom) => {
            // inputs: (x, output-side gradient); g has the weight shape.
            let (x, og) = (&inputs[0], &inputs[1]);
            Ok(vec![
                if want(0) {
                    Some(conv_input_grad(og, g, *geom)?)
                } else {
                    None
                },
                if want(1) {
                    Some(conv_forward(x, g, *geom)?)
                } else {
                    None
                },
            ])
        }
        Op::AvgPool(k) => one(g.avg_pool2d_adjoint(*k)),
        Op::AvgPoolAdjoint(k) => one(g.avg_pool2d(*k)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::param(Array::new(shape.to_vec(), data.to_vec()).unwrap())
    }

    #[test]
    fn sum_of_squares() {
        let x = param(&[3], &[1.0, 2.0, 3.0]);
        let y = x.square().unwrap().sum().unwrap();
        let g = grad(&y, &[x], false).unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let x = param(&[2], &[1.0, 2.0]);
        let y = x.scale(2.0).unwrap();
        assert!(matches!(grad(&y, &[x], false), Err(Error::NotScalar(_))));
    }

    #[test]
    fn unreachable_wrt_is_rejected() {
        let x = param(&[2], &[1.0, 2.0]);
        let z = param(&[2], &[1.0, 2.0]);
        let y = x.sum().unwrap();
        assert!(matches!(
            grad(&y, &[x, z], false),
            Err(Error::Unreachable(1))
        ));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let x = param(&[2], &[1.5, -2.0]);
        let y = x.mul(&x).unwrap().add(&x).unwrap().sum().unwrap();
        let g = grad(&y, &[x], false).unwrap();
        assert_eq!(g[0].data(), &[4.0, -3.0]);
    }

    #[test]
    fn second_derivative_of_cube() {
        // f = x^3, f' = 3x^2, f'' = 6x
        let x = param(&[1], &[2.0]);
        let f = x.mul(&x).unwrap().mul(&x).unwrap().sum().unwrap();
        let d1 = grad(&f, std::slice::from_ref(&x), true).unwrap().remove(0);
        assert_eq!(d1.data(), &[12.0]);
        assert!(d1.requires_grad());
        let d2 = grad(&d1.sum().unwrap(), &[x], false).unwrap().remove(0);
        assert_eq!(d2.data(), &[12.0]);
    }

    #[test]
    fn without_create_graph_results_are_detached() {
        let x = param(&[2], &[1.0, 2.0]);
        let y = x.square().unwrap().sum().unwrap();
        let g = grad(&y, &[x], false).unwrap();
        assert!(!g[0].requires_grad());
    }
}
