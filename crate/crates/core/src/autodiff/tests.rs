use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::gradcheck::{check_gradients, GradCheckOptions};
use crate::operator::{Linear, ScaledIdentity};

fn t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    // Values bounded away from zero so PReLU kinks stay outside the FD stencil.
    let data = (0..n)
        .map(|i| {
            let v = ((i as f64 + 1.0) * 0.7548776662 + seed as f64 * 0.5698402910).fract() - 0.5;
            if v.abs() < 0.02 {
                v + 0.05
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Elementwise exp on a grid, as a non-linear operator.
struct Exp([usize; 2]);

impl ForwardOperator<f64> for Exp {
    fn domain(&self) -> [usize; 2] {
        self.0
    }
    fn range(&self) -> [usize; 2] {
        self.0
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o = v.exp();
        }
    }
    fn derivative(&self, x: &[f64], dx: &[f64], out: &mut [f64]) {
        for ((o, v), d) in out.iter_mut().zip(x).zip(dx) {
            *o = v.exp() * d;
        }
    }
    fn derivative_adjoint(&self, x: &[f64], dy: &[f64], out: &mut [f64]) {
        self.derivative(x, dy, out)
    }
    fn second_order_adjoint(&self, x: &[f64], dy: &[f64], v: &[f64], out: &mut [f64]) {
        for (((o, xi), g), vi) in out.iter_mut().zip(x).zip(dy).zip(v) {
            *o = xi.exp() * g * vi;
        }
    }
}

fn strict() -> GradCheckOptions {
    GradCheckOptions::default()
}

#[test]
fn conv_zero_input_gives_bias() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]).unwrap());
    let w = g.constant(t(&[3, 2, 3, 3], 1));
    let b = g.constant(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
    let y = g.conv2d(x, w, b).unwrap();
    let out = g.value(y);
    assert_eq!(out.shape(), [1, 3, 4, 4]);
    for (k, plane) in out.data().chunks(16).enumerate() {
        assert!(plane.iter().all(|&v| v == [0.5, -1.0, 2.0][k]));
    }
}

#[test]
fn conv_of_ones_counts_padded_neighbours() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0).unwrap());
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0).unwrap());
    let b = g.constant(Tensor::zeros(&[1]).unwrap());
    let y = g.conv2d(x, w, b).unwrap();
    let v = g.value(y).data();
    assert_eq!(v[4], 9.0);
    assert_eq!(v[0], 4.0);
    assert_eq!(v[8], 4.0);
    assert_eq!(v[1], 6.0);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]).unwrap());
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]).unwrap());
    let b = g.constant(Tensor::zeros(&[1]).unwrap());
    assert!(matches!(g.conv2d(x, w, b), Err(AutodiffError::Shape { op: "conv2d", .. })));
}

#[test]
fn conv_gradients_match_finite_differences() {
    let inputs = [t(&[1, 2, 5, 5], 3), t(&[3, 2, 3, 3], 4), t(&[3], 5)];
    let r = check_gradients(&inputs, &strict(), |g, v| {
        let y = g.conv2d(v[0], v[1], v[2])?;
        Ok(g.sum_squares(y))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn prelu_literal_sign() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![1, 1, 1, 2], vec![2.0, -1.0]).unwrap());
    let c = g.param(Tensor::new(vec![1], vec![0.1]).unwrap());
    let y = g.prelu(x, c).unwrap();
    assert_eq!(g.value(y).data(), [2.0, 0.1]);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    // d/dc of −c·x at x = −1 is −x = 1; the positive entry contributes nothing.
    assert_eq!(grads.get(c).unwrap().data(), [1.0]);
    assert_eq!(grads.get(x).unwrap().data(), [1.0, -0.1]);
}

#[test]
fn prelu_gradients_match_finite_differences() {
    let inputs = [t(&[2, 3, 4, 4], 7), t(&[3], 8)];
    let r = check_gradients(&inputs, &strict(), |g, v| {
        let y = g.prelu(v[0], v[1])?;
        Ok(g.sum_squares(y))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-8, "{r:?}");
}

#[test]
fn concat_shapes_and_gradients() {
    let mut g = Graph::new();
    let a = g.param(t(&[1, 2, 3, 3], 1));
    let b = g.param(t(&[1, 3, 3, 3], 2));
    let c = g.concat_channels(&[a, b]).unwrap();
    assert_eq!(g.value(c).shape(), [1, 5, 3, 3]);
    let single = g.concat_channels(&[a]).unwrap();
    assert_eq!(g.value(single), g.value(a));
    let s = g.sum(c);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(a).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(grads.get(b).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn concat_rejects_spatial_mismatch() {
    let mut g = Graph::new();
    let a = g.param(t(&[1, 2, 3, 3], 1));
    let b = g.param(t(&[1, 2, 3, 4], 2));
    assert!(g.concat_channels(&[a, b]).is_err());
}

#[test]
fn concat_and_select_gradients() {
    let inputs = [t(&[2, 2, 3, 4], 11), t(&[2, 1, 3, 4], 12)];
    let r = check_gradients(&inputs, &strict(), |g, v| {
        let c = g.concat_channels(&[v[0], v[1], v[0]])?;
        let s = g.select_channels(c, 1, 3)?;
        Ok(g.sum_squares(s))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-8, "{r:?}");
}

#[test]
fn elementwise_ops_gradients() {
    let inputs = [t(&[1, 2, 3, 3], 21), t(&[1, 2, 3, 3], 22), t(&[1], 23)];
    let r = check_gradients(&inputs, &strict(), |g, v| {
        let a = g.add(v[0], v[1])?;
        let d = g.sub(a, v[1])?;
        let d = g.sub(d, v[0])?;
        let e = g.scale(v[0], -1.5);
        let f = g.mul_scalar(v[2], e)?;
        let h = g.add(d, f)?;
        let k = g.sub(h, v[1])?;
        let q = g.sum_squares(k);
        let s = g.sum(v[1]);
        let q = g.add(q, s)?;
        Ok(q)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-8, "{r:?}");
}

#[test]
fn trivial_linear_rules() {
    let mut g = Graph::new();
    let a = g.param(t(&[1, 1, 2, 2], 1));
    let b = g.param(t(&[1, 1, 2, 2], 2));
    let d = g.sub(a, b).unwrap();
    let s = g.scale(d, 3.0);
    let l = g.sum(s);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(a).unwrap().data().iter().all(|&v| v == 3.0));
    assert!(grads.get(b).unwrap().data().iter().all(|&v| v == -3.0));
}

#[test]
fn identity_and_scaling_linear_nodes() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 1, 2, 3], 1));
    let id: Arc<dyn LinearOperator<f64>> = Arc::new(ScaledIdentity::new([2, 3], 1.0));
    let two: Arc<dyn LinearOperator<f64>> = Arc::new(ScaledIdentity::new([2, 3], 2.0));
    let y = g.linear(id, x).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
    let z = g.linear(two, y).unwrap();
    let l = g.sum(z);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 2.0));
}

#[test]
fn linear_node_rejects_domain_mismatch() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 1, 2, 3], 1));
    let op: Arc<dyn LinearOperator<f64>> = Arc::new(ScaledIdentity::new([3, 2], 1.0));
    assert!(g.linear(op, x).is_err());
}

#[test]
fn exp_node_at_zero() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[1, 1, 1, 1]).unwrap());
    let y = g.operator(Arc::new(Exp([1, 1])), x).unwrap();
    assert_eq!(g.value(y).data(), [1.0]);
    let l = g.sum(y);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), [1.0]);
}

#[test]
fn operator_and_adjoint_derivative_gradients() {
    let inputs = [t(&[2, 1, 3, 2], 31), t(&[2, 1, 3, 2], 32)];
    let exp: Arc<dyn ForwardOperator<f64>> = Arc::new(Exp([3, 2]));
    let r = check_gradients(&inputs, &strict(), |g, v| {
        let y = g.operator(exp.clone(), v[0])?;
        let z = g.adjoint_derivative(exp.clone(), v[0], v[1])?;
        let w = g.add(y, z)?;
        Ok(g.sum_squares(w))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-7, "{r:?}");
}

#[test]
fn linear_adjoint_derivative_ignores_point() {
    let mut g = Graph::new();
    let p = g.param(t(&[1, 1, 2, 2], 1));
    let c = g.param(t(&[1, 1, 2, 2], 2));
    let op: Arc<dyn ForwardOperator<f64>> = Arc::new(Linear(ScaledIdentity::new([2, 2], 3.0)));
    let y = g.adjoint_derivative(op, p, c).unwrap();
    let l = g.sum(y);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(p).is_none());
    assert!(grads.get(c).unwrap().data().iter().all(|&v| v == 3.0));
}

#[test]
fn backward_twice_is_an_error() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 1, 2, 2], 1));
    let l = g.sum_squares(x);
    g.backward(l).unwrap();
    assert_eq!(g.backward(l).err(), Some(AutodiffError::BackwardAlreadyRun));
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 1, 2, 2], 1));
    assert!(matches!(g.backward(x), Err(AutodiffError::NonScalarLoss(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 1, 2, 2], 1));
    let c = g.constant(t(&[1, 1, 2, 2], 2));
    let y = g.add(x, c).unwrap();
    let l = g.sum_squares(y);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(c).is_none());
    assert!(grads.get(x).is_some());
}

/// PReLU acts on the raw input, whose entries stay clear of the kink.
fn tiny_net(g: &mut Graph<f64>, v: &[Var]) -> Result<Var, AutodiffError> {
    let h = g.prelu(v[0], v[3])?;
    let h = g.conv2d(h, v[1], v[2])?;
    let cat = g.concat_channels(&[h, v[0]])?;
    let out = g.conv2d(cat, v[4], v[5])?;
    Ok(g.sum_squares(out))
}

#[test]
fn repeated_evaluation_is_bit_identical() {
    let inputs = [
        t(&[2, 2, 6, 5], 1),
        t(&[4, 2, 3, 3], 2),
        t(&[4], 3),
        t(&[2], 4),
        t(&[1, 6, 3, 3], 5),
        t(&[1], 6),
    ];
    let run = || {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
        let l = tiny_net(&mut g, &vars).unwrap();
        let value = g.value(l).clone();
        let mut grads = g.backward(l).unwrap();
        (value, grads.take(vars[1]).unwrap())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a.bit_eq(&b));
    assert!(ga.bit_eq(&gb));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn composite_gradients_match_finite_differences(seed in 0u64..1000, h in 2usize..6, w in 2usize..6) {
        let inputs = [
            t(&[1, 2, h, w], seed),
            t(&[3, 2, 3, 3], seed + 1),
            t(&[3], seed + 2),
            t(&[2], seed + 3),
            t(&[2, 5, 3, 3], seed + 4),
            t(&[2], seed + 5),
        ];
        let r = check_gradients(&inputs, &strict(), tiny_net).unwrap();
        prop_assert!(r.max_rel_err < 1e-5, "{:?}", r);
    }
}
