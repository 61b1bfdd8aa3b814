use dcgn::autograd::{Graph, Var};
use dcgn::gradcheck::{grad_check, grad_check_many};
use dcgn::nn::conv2d;
use dcgn::tensor::Tensor;
use dcgn::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reduces `y` to a scalar with fixed random weights so that every output
/// element carries a different cotangent.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::uniform(g.shape(y), -1.0, 1.0, &mut rng(seed ^ 0x5eed));
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    g.sum_all(p)
}

type Unary = fn(&mut Graph, Var) -> Result<Var>;

fn unary_ops() -> Vec<(&'static str, Vec<usize>, Unary)> {
    vec![
        ("neg", vec![3, 4], |g, x| g.neg(x)),
        ("scale", vec![3, 4], |g, x| g.scale(x, -2.5)),
        ("add_scalar", vec![3, 4], |g, x| g.add_scalar(x, 0.7)),
        ("square", vec![3, 4], |g, x| g.square(x)),
        ("leaky_relu", vec![3, 4], |g, x| g.leaky_relu(x, 0.2)),
        ("relu", vec![3, 4], |g, x| g.relu(x)),
        ("tanh", vec![3, 4], |g, x| g.tanh(x)),
        ("exp", vec![3, 4], |g, x| g.exp(x)),
        ("softplus", vec![3, 4], |g, x| g.softplus(x)),
        ("sigmoid", vec![3, 4], |g, x| g.sigmoid(x)),
        ("reshape", vec![3, 4], |g, x| g.reshape(x, &[2, 6])),
        ("sum_axis", vec![2, 3, 4], |g, x| g.sum_axis(x, 1)),
        ("expand_axis", vec![3, 4], |g, x| g.expand_axis(x, 1, 3)),
        ("mean_all", vec![3, 4], |g, x| g.mean_all(x)),
        ("broadcast", vec![1], |g, x| g.broadcast(x, &[3, 4])),
        ("logsumexp", vec![3, 5], |g, x| g.logsumexp(x, 1)),
        ("logsumexp_axis0", vec![3, 5], |g, x| g.logsumexp(x, 0)),
        ("avg_pool2", vec![2, 4, 4, 3], |g, x| g.avg_pool2(x)),
        ("upsample2", vec![2, 2, 2, 3], |g, x| g.upsample2(x)),
        ("im2col", vec![1, 4, 4, 2], |g, x| g.im2col(x, 3)),
        ("col2im", vec![1, 4, 4, 18], |g, x| {
            let r = g.reshape(x, &[16, 18])?;
            g.col2im(r, [1, 4, 4, 2], 3)
        }),
        ("narrow_last", vec![3, 6], |g, x| g.narrow_last(x, 2, 3)),
        ("pad_last", vec![3, 4], |g, x| g.pad_last(x, 1, 7)),
        ("self_product", vec![3, 4], |g, x| g.mul(x, x)),
    ]
}

type Binary = fn(&mut Graph, Var, Var) -> Result<Var>;

fn binary_ops() -> Vec<(&'static str, Vec<usize>, Vec<usize>, Binary)> {
    vec![
        ("add", vec![3, 4], vec![3, 4], |g, a, b| g.add(a, b)),
        ("sub", vec![3, 4], vec![3, 4], |g, a, b| g.sub(a, b)),
        ("mul", vec![3, 4], vec![3, 4], |g, a, b| g.mul(a, b)),
        ("matmul", vec![3, 4], vec![4, 2], |g, a, b| g.matmul(a, b)),
        ("matmul_ta", vec![4, 3], vec![4, 2], |g, a, b| {
            g.matmul_t(a, b, true, false)
        }),
        ("matmul_tb", vec![3, 4], vec![2, 4], |g, a, b| {
            g.matmul_t(a, b, false, true)
        }),
        ("matmul_batched", vec![2, 3, 4], vec![2, 4, 5], |g, a, b| g.matmul(a, b)),
        ("concat_last", vec![3, 2], vec![3, 4], |g, a, b| g.concat_last(&[a, b])),
    ]
}

#[test]
fn every_op_passes_gradient_check_on_three_seeds() {
    for seed in [0, 1, 2] {
        for (name, shape, op) in unary_ops() {
            let x = Tensor::uniform(&shape, -2.0, 2.0, &mut rng(seed));
            let r = grad_check(
                |g, x| {
                    let y = op(g, x)?;
                    weighted_sum(g, y, seed)
                },
                &x,
                H,
                TOL,
            )
            .unwrap_or_else(|e| panic!("{name}: {e:?}"));
            assert!(r.pass, "{name} seed {seed}: {}", r.max_rel_err);
        }
        for (name, sa, sb, op) in binary_ops() {
            let a = Tensor::uniform(&sa, -2.0, 2.0, &mut rng(seed));
            let b = Tensor::uniform(&sb, -2.0, 2.0, &mut rng(seed + 100));
            let r = grad_check_many(
                |g, v| {
                    let y = op(g, v[0], v[1])?;
                    weighted_sum(g, y, seed)
                },
                &[a, b],
                H,
                TOL,
            )
            .unwrap();
            assert!(r.pass, "{name} seed {seed}: {}", r.max_rel_err);
        }
    }
}

fn conv_leaky_sum(g: &mut Graph, x: Var, w: &Tensor, b: &Tensor) -> Result<Var> {
    let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
    let y = conv2d(g, x, wv, bv, 3)?;
    let y = g.leaky_relu(y, 0.2)?;
    g.sum_all(y)
}

#[test]
fn conv_leaky_sum_matches_hand_rolled_central_differences() {
    let mut r = rng(7);
    let x = Tensor::randn(&[1, 4, 4, 2], 1.0, &mut r);
    let w = Tensor::randn(&[18, 3], 0.5, &mut r);
    let b = Tensor::randn(&[3], 0.5, &mut r);
    let f = |t: &Tensor| {
        let mut g = Graph::inference();
        let xv = g.constant(t.clone());
        let out = conv_leaky_sum(&mut g, xv, &w, &b).unwrap();
        g.value(out).item().unwrap()
    };
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = conv_leaky_sum(&mut g, xv, &w, &b).unwrap();
    let analytic = g.backward(out).unwrap().get(xv).unwrap().clone();
    for i in 0..x.numel() {
        let mut plus = x.to_vec();
        let mut minus = x.to_vec();
        plus[i] += H;
        minus[i] -= H;
        let fd = (f(&Tensor::new(x.shape(), plus).unwrap()) - f(&Tensor::new(x.shape(), minus).unwrap())) / (2.0 * H);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        assert!(rel < 1e-6, "element {i}: {a} vs {fd}");
    }
}

#[test]
fn logsumexp_examples() {
    let lse = |v: &[f64]| Tensor::from_slice(v).unwrap().logsumexp(0).unwrap().item().unwrap();
    assert_eq!(lse(&[0.0, 0.0]), std::f64::consts::LN_2);
    assert_eq!(lse(&[1000.0, 1000.0]), 1000.0 + std::f64::consts::LN_2);
    assert!((lse(&[1.0, 2.0, 3.0]) - 3.4076059644443806).abs() < 1e-15);
}

#[test]
fn backward_is_bit_reproducible() {
    let run = || {
        let mut r = rng(3);
        let x = Tensor::randn(&[2, 4, 4, 2], 1.0, &mut r);
        let w = Tensor::randn(&[18, 3], 0.5, &mut r);
        let b = Tensor::randn(&[3], 0.5, &mut r);
        let mut g = Graph::new();
        let xv = g.param(x);
        let wv = g.param(w);
        let bv = g.param(b);
        let y = conv2d(&mut g, xv, wv, bv, 3).unwrap();
        let y = g.softplus(y).unwrap();
        let out = g.mean_all(y).unwrap();
        let grads = g.backward(out).unwrap();
        [xv, wv, bv]
            .iter()
            .flat_map(|v| {
                grads
                    .get(*v)
                    .unwrap()
                    .data()
                    .iter()
                    .map(|d| d.to_bits())
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn logsumexp_shifts_with_its_input(v in proptest::collection::vec(-50.0f64..50.0, 1..10), c in -1e3f64..1e3) {
        let t = Tensor::from_slice(&v).unwrap();
        let shifted = Tensor::from_slice(&v.iter().map(|x| x + c).collect::<Vec<_>>()).unwrap();
        let a = t.logsumexp(0).unwrap().item().unwrap();
        let b = shifted.logsumexp(0).unwrap().item().unwrap();
        prop_assert!((b - (a + c)).abs() < 1e-9, "{} vs {}", b, a + c);
    }

    #[test]
    fn random_elementwise_chains_pass_gradient_check(seed in 0u64..1000, ops in proptest::collection::vec(0usize..6, 1..5)) {
        let x = Tensor::uniform(&[2, 3], -1.5, 1.5, &mut rng(seed));
        let r = grad_check(|g, x| {
            let mut y = x;
            for &o in &ops {
                y = match o {
                    0 => g.tanh(y)?,
                    1 => g.softplus(y)?,
                    2 => g.sigmoid(y)?,
                    3 => g.square(y)?,
                    4 => g.leaky_relu(y, 0.2)?,
                    _ => g.mul(y, x)?,
                };
            }
            weighted_sum(g, y, seed)
        }, &x, H, TOL).unwrap();
        prop_assert!(r.pass, "{}", r.max_rel_err);
    }
}
