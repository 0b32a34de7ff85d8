use super::*;
use crate::gradnet::rel_err;
use crate::ndmath::{determinant, finite_diff_jacobian, sample_std_normal, std_normal_logpdf};
use ndarray::{array, Array1};

fn small_spec(kind: CouplingKind, layers: usize) -> FlowSpec {
    FlowSpec {
        kind,
        layers,
        hidden: vec![8, 8],
        activation: Activation::Tanh,
        ..FlowSpec::default()
    }
}

fn random_stack(kind: CouplingKind, dim: usize, layers: usize, scale: f64, seed: u64) -> FlowStack {
    let mut rng = RngState::new(seed);
    let mut s = small_spec(kind, layers).build(dim, &mut rng).unwrap();
    s.perturb_params(scale, &mut rng);
    s
}

fn row(m: &Mat, i: usize) -> Vec<f64> {
    m.row(i).to_vec()
}

fn point(v: &[f64]) -> Mat {
    Mat::from_shape_vec((1, v.len()), v.to_vec()).unwrap()
}

/// Constant log-scale `c` on every active dim, zero shift.
fn constant_scale_layer(dim: usize, parity: usize, c: f64) -> AffineCoupling {
    let mut rng = RngState::new(0);
    let mask = CouplingMask::alternating(dim, parity).unwrap();
    let mut layer = AffineCoupling::new(mask, &[4], Activation::Relu, 3.0, &mut rng).unwrap();
    let k = layer.mask().active().len();
    let raw = 3.0 * (c / 3.0).atanh();
    let net = layer.conditioner_mut();
    net.zero_output_layer();
    let n = net.n_params();
    let out = net.output_dim();
    for j in 0..k {
        net.params_mut()[n - out + j] = raw;
    }
    layer
}

#[test]
fn fresh_layers_are_identity() {
    let mut rng = RngState::new(1);
    let z = sample_std_normal(50, 3, &mut rng);
    for kind in [CouplingKind::Affine, CouplingKind::Rqs] {
        let stack = FlowSpec { kind, ..FlowSpec::default() }.build(3, &mut rng).unwrap();
        let (x, logdet) = stack.forward(&z).unwrap();
        assert!(logdet.iter().all(|&l| l == 0.0), "{kind:?}");
        if kind == CouplingKind::Affine {
            assert_eq!(x, z);
        } else {
            assert!((&x - &z).iter().all(|e| e.abs() < 1e-13));
        }
    }
}

#[test]
fn constant_scale_logdet_and_inverse() {
    let c = 0.7;
    let layer = FlowLayer::Affine(constant_scale_layer(3, 0, c));
    // parity 0 → passive {0, 2}, active {1}
    let z = array![[0.5, -1.0, 2.0], [1.5, 0.25, -0.5]];
    let (x, logdet) = layer.forward(&z).unwrap();
    for i in 0..2 {
        assert!((logdet[i] - c).abs() < 1e-14);
        assert!((x[[i, 1]] - z[[i, 1]] * c.exp()).abs() < 1e-14);
        assert_eq!(x[[i, 0]], z[[i, 0]]);
    }
    let (zb, li) = layer.inverse(&x).unwrap();
    for i in 0..2 {
        assert!(((x[[i, 1]]) * (-c).exp() - zb[[i, 1]]).abs() < 1e-14);
        assert!((li[i] + c).abs() < 1e-14);
    }
    let k2 = FlowLayer::Affine(constant_scale_layer(4, 1, c)); // active {0, 2}
    let (_, l2) = k2.forward(&sample_std_normal(3, 4, &mut RngState::new(2))).unwrap();
    assert!(l2.iter().all(|l| (l - 2.0 * c).abs() < 1e-14));
}

#[test]
fn constant_scale_stack_logprob_closed_form() {
    let c = 0.4;
    let mut stack = FlowStack::identity(2);
    stack.push(FlowLayer::Affine(constant_scale_layer(2, 0, c))).unwrap();
    stack.push(FlowLayer::Affine(constant_scale_layer(2, 1, c))).unwrap();
    let x = sample_std_normal(20, 2, &mut RngState::new(3));
    let lp = stack.log_prob(&x).unwrap();
    for i in 0..20 {
        let scaled: Vec<f64> = row(&x, i).iter().map(|v| v * (-c).exp()).collect();
        let expect = std_normal_logpdf(&scaled).unwrap() - 2.0 * c;
        assert!((lp[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn identity_stack_logprob_is_base_logpdf() {
    let x = sample_std_normal(30, 2, &mut RngState::new(4));
    for stack in [
        FlowStack::identity(2),
        small_spec(CouplingKind::Affine, 4).build(2, &mut RngState::new(5)).unwrap(),
    ] {
        let lp = stack.log_prob(&x).unwrap();
        for i in 0..30 {
            assert_eq!(lp[i], std_normal_logpdf(&row(&x, i)).unwrap());
        }
    }
    let rqs = small_spec(CouplingKind::Rqs, 4).build(2, &mut RngState::new(5)).unwrap();
    let lp = rqs.log_prob(&x).unwrap();
    for i in 0..30 {
        assert!((lp[i] - std_normal_logpdf(&row(&x, i)).unwrap()).abs() < 1e-12);
    }
}

fn jacobian_check(layer_or_stack: &FlowStack, z: &[f64]) -> f64 {
    let (_, logdet) = layer_or_stack.forward(&point(z)).unwrap();
    let jac = finite_diff_jacobian(|p| Ok(row(&layer_or_stack.sample(&point(p))?, 0)), z, 1e-5).unwrap();
    let det = determinant(&jac).abs();
    (logdet[0].exp() - det).abs() / det
}

#[test]
fn logdet_matches_finite_difference_jacobian() {
    let mut rng = RngState::new(6);
    for seed in 0..20 {
        for kind in [CouplingKind::Affine, CouplingKind::Rqs] {
            for dim in [2, 3] {
                let stack = random_stack(kind, dim, 1, 0.5, 100 + seed);
                let z: Vec<f64> = (0..dim).map(|_| 2.0 * rng.std_normal().clamp(-1.8, 1.8)).collect();
                let e = jacobian_check(&stack, &z);
                assert!(e < 1e-4, "{kind:?} dim {dim} seed {seed}: {e}");
            }
        }
    }
}

#[test]
fn two_layer_logdet_is_sum_of_layer_logdets() {
    let stack = random_stack(CouplingKind::Rqs, 2, 2, 0.5, 7);
    let z = sample_std_normal(40, 2, &mut RngState::new(8));
    let (x1, l1) = stack.layers()[0].forward(&z).unwrap();
    let (x2, l2) = stack.layers()[1].forward(&x1).unwrap();
    let (x, l) = stack.forward(&z).unwrap();
    assert_eq!(x, x2);
    for i in 0..40 {
        assert!((l[i] - (l1[i] + l2[i])).abs() < 1e-10);
    }
    assert!(jacobian_check(&stack, &[0.3, -0.8]) < 1e-4);
}

#[test]
fn every_layer_kind_inverts() {
    let mut rng = RngState::new(9);
    let z = sample_std_normal(1000, 3, &mut rng).mapv(|v| 1.5 * v);
    let mut stacks = vec![
        random_stack(CouplingKind::Affine, 3, 6, 0.5, 10),
        random_stack(CouplingKind::Rqs, 3, 6, 0.5, 11),
    ];
    let mut perm = FlowStack::identity(3);
    perm.push(FlowLayer::Permutation(Permutation::new(vec![2, 0, 1]).unwrap())).unwrap();
    stacks.push(perm);
    for stack in &stacks {
        let (x, lf) = stack.forward(&z).unwrap();
        let (zb, li) = stack.inverse(&x).unwrap();
        let err = (&zb - &z).iter().fold(0.0f64, |m, e| m.max(e.abs()));
        assert!(err < 1e-8, "round trip {err}");
        assert!((&lf + &li).iter().all(|e| e.abs() < 1e-9));
    }
}

#[test]
fn sample_then_logprob_is_consistent() {
    let stack = random_stack(CouplingKind::Rqs, 2, 4, 0.5, 12);
    let z = sample_std_normal(100, 2, &mut RngState::new(13));
    let (x, logdet) = stack.forward(&z).unwrap();
    let lp = stack.log_prob(&x).unwrap();
    for i in 0..100 {
        let expect = std_normal_logpdf(&row(&z, i)).unwrap() - logdet[i];
        assert!((lp[i] - expect).abs() < 1e-8);
    }
}

#[test]
fn spline_tails_pass_through() {
    let stack = random_stack(CouplingKind::Rqs, 2, 1, 1.0, 14);
    // layer 0: passive {0}, active {1}
    let z = array![[0.3, 5.0], [-0.2, -4.5]];
    let (x, l) = stack.forward(&z).unwrap();
    assert_eq!(x, z);
    assert_eq!(l, Array1::<f64>::zeros(2));
}

/// Scalar objective `Σ w ⊙ out + Σ v ⊙ logdet` and its analytic gradient.
fn directional_check(stack: &FlowStack, input: &Mat, inverse: bool, seed: u64) -> f64 {
    let mut rng = RngState::new(seed);
    let w = sample_std_normal(input.nrows(), input.ncols(), &mut rng);
    let v: Vector = (0..input.nrows()).map(|_| rng.std_normal()).collect();
    let objective = |s: &FlowStack, inp: &Mat| -> Result<f64> {
        let (out, l) = if inverse { s.inverse(inp)? } else { s.forward(inp)? };
        Ok((&out * &w).sum() + (&l * &v).sum())
    };
    let (gin, gp) = if inverse {
        let (_, _, t) = stack.inverse_taped(input).unwrap();
        stack.backward_inverse(&t, &w, &v).unwrap()
    } else {
        let (_, _, t) = stack.forward_taped(input).unwrap();
        stack.backward_forward(&t, &w, &v).unwrap()
    };
    let base = stack.params();
    let rep = crate::gradnet::grad_check(
        &base,
        &gp,
        |p| {
            let mut s = stack.clone();
            s.set_params(p)?;
            objective(&s, input)
        },
        1e-5,
    )
    .unwrap();
    let mut worst = rep.max_rel_err;
    let h = 1e-5;
    for i in 0..input.nrows() {
        for j in 0..input.ncols() {
            let mut a = input.clone();
            a[[i, j]] += h;
            let mut b = input.clone();
            b[[i, j]] -= h;
            let fd = (objective(stack, &a).unwrap() - objective(stack, &b).unwrap()) / (2.0 * h);
            worst = worst.max(rel_err(gin[[i, j]], fd));
        }
    }
    worst
}

#[test]
fn stack_backward_passes_match_finite_differences() {
    for (seed, kind) in [(20, CouplingKind::Affine), (21, CouplingKind::Rqs)] {
        let mut stack = random_stack(kind, 3, 3, 0.4, seed);
        // an interleaved permutation exercises that path too
        let mut with_perm = FlowStack::identity(3);
        for (i, l) in stack.layers().iter().enumerate() {
            with_perm.push(l.clone()).unwrap();
            if i == 0 {
                with_perm.push(FlowLayer::Permutation(Permutation::reverse(3))).unwrap();
            }
        }
        stack = with_perm;
        let input = sample_std_normal(5, 3, &mut RngState::new(seed + 50));
        for inverse in [false, true] {
            let e = directional_check(&stack, &input, inverse, seed + 7);
            assert!(e < 1e-4, "{kind:?} inverse={inverse}: {e}");
        }
    }
}

#[test]
fn quadrature_of_random_stack_is_normalized() {
    for (seed, kind) in [(30, CouplingKind::Affine), (31, CouplingKind::Rqs)] {
        let stack = random_stack(kind, 2, 4, 0.3, seed);
        let step = 0.04;
        let n = (16.0 / step) as usize;
        let pts = Mat::from_shape_fn((n * n, 2), |(r, c)| {
            let idx = if c == 0 { r % n } else { r / n };
            -8.0 + (idx as f64 + 0.5) * step
        });
        let mass: f64 = stack.log_prob(&pts).unwrap().iter().map(|l| l.exp()).sum::<f64>() * step * step;
        assert!((mass - 1.0).abs() < 0.01, "{kind:?}: {mass}");
    }
}

#[test]
fn descriptor_round_trip_preserves_the_map() {
    let stack = random_stack(CouplingKind::Rqs, 3, 3, 0.5, 40);
    let rebuilt = FlowStack::from_descriptor(&stack.descriptor(), &stack.params()).unwrap();
    assert_eq!(rebuilt, stack);
    let mut short = stack.params();
    short.pop();
    assert!(FlowStack::from_descriptor(&stack.descriptor(), &short).is_err());
}

#[test]
fn invalid_configurations_are_rejected() {
    assert!(CouplingMask::new(2, vec![0, 1]).is_err());
    assert!(CouplingMask::new(2, vec![]).is_err());
    assert!(Permutation::new(vec![0, 0]).is_err());
    assert!(FlowStack::identity(2).forward(&Mat::zeros((1, 3))).is_err());
    let stack = random_stack(CouplingKind::Affine, 2, 2, 0.1, 1);
    assert!(stack.inverse(&array![[f64::NAN, 0.0]]).is_err());
    assert_eq!(FlowSpec::default().build(1, &mut RngState::new(0)).unwrap().layers().len(), 0);
}
