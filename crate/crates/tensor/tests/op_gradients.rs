use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s2i_tensor::gradcheck::check_gradient;
use s2i_tensor::{PadMode, Tensor, Var};

const TOL: f64 = 1e-6;

fn rnd(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

/// Weighted sum so every output element influences the scalar.
fn probe(y: &Var, seed: u64) -> Var {
    y.mul(&Var::constant(rnd(y.shape(), seed))).sum()
}

fn assert_grad(name: &str, f: impl Fn(&Var) -> Var, x: &Tensor) {
    let err = check_gradient(f, x, 1e-5).relative_error();
    assert!(err < TOL, "{name}: relative error {err:e}");
}

#[test]
fn elementwise_ops() {
    let x = rnd(&[2, 3, 4], 1);
    assert_grad("leaky", |v| probe(&v.leaky_relu(0.2), 9), &x);
    assert_grad("sigmoid", |v| probe(&v.sigmoid(), 9), &x);
    assert_grad("tanh", |v| probe(&v.tanh(), 9), &x);
    assert_grad("exp", |v| probe(&v.exp(), 9), &x);
    assert_grad("square", |v| probe(&v.square(), 9), &x);
    assert_grad("abs", |v| probe(&v.abs(), 9), &x);
    let pos = x.map(|v| v.abs() + 0.5);
    assert_grad("ln", |v| probe(&v.ln(), 9), &pos);
    assert_grad("sqrt", |v| probe(&v.sqrt(), 9), &pos);
}

#[test]
fn broadcasting_binary_ops() {
    let x = rnd(&[2, 3, 4, 5], 2);
    let b = Var::constant(rnd(&[1, 3, 1, 1], 3).map(|v| v + 2.0));
    assert_grad("add", |v| probe(&v.add(&b), 4), &x);
    assert_grad("sub", |v| probe(&b.sub(v), 4), &x);
    assert_grad("mul", |v| probe(&v.mul(&b), 4), &x);
    assert_grad("div", |v| probe(&v.div(&b), 4), &x);
    let full = Var::constant(rnd(&[2, 3, 4, 5], 5));
    let small = rnd(&[1, 3, 1, 1], 6).map(|v| v + 2.0);
    assert_grad("mul-reduce", |v| probe(&full.mul(v), 4), &small);
    assert_grad("div-reduce", |v| probe(&full.div(v), 4), &small);
    assert_grad("sum_keep", |v| probe(&v.sum_keep(&[1, 2, 3]), 4), &x);
}

#[test]
fn shape_ops() {
    let x = rnd(&[2, 3, 4, 5], 7);
    assert_grad("permute", |v| probe(&v.permute(&[0, 2, 3, 1]), 8), &x);
    assert_grad("crop", |v| probe(&v.crop2d(1, 3, 2, 5), 8), &x);
    assert_grad("embed", |v| probe(&v.embed2d(7, 9, 2, 3), 8), &x);
    assert_grad("upsample", |v| probe(&v.upsample_nearest(2), 8), &x);
    assert_grad("reflect", |v| probe(&v.pad2d(2, PadMode::Reflect), 8), &x);
    assert_grad("zero pad", |v| probe(&v.pad2d(1, PadMode::Zero), 8), &x);
    let other = Var::constant(rnd(&[2, 2, 4, 5], 9));
    assert_grad("concat", |v| probe(&Var::concat(&[other.clone(), v.clone()], 1), 8), &x);
    assert_grad("softmax", |v| probe(&v.softmax_last(), 8), &x);
}

#[test]
fn conv_and_bmm() {
    let x = rnd(&[2, 3, 6, 5], 10);
    let w = rnd(&[4, 3, 3, 3], 11);
    for stride in [1, 2] {
        let wv = Var::constant(w.clone());
        assert_grad("conv x", |v| probe(&v.conv2d(&wv, stride), 12), &x);
        let xv = Var::constant(x.clone());
        assert_grad("conv w", |v| probe(&xv.conv2d(v, stride), 12), &w);
    }
    let w1 = rnd(&[4, 3, 1, 1], 13);
    let wv = Var::constant(w1.clone());
    assert_grad("conv1x1 x", |v| probe(&v.conv2d(&wv, 1), 12), &x);
    let xv = Var::constant(x.clone());
    assert_grad("conv1x1 w", |v| probe(&xv.conv2d(v, 1), 12), &w1);

    let a = rnd(&[2, 3, 4], 14);
    let b = rnd(&[2, 4, 5], 15);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let ax = if ta { a.reshape(&[2, 3, 4]) } else { a.clone() };
        let ax = if ta { s2i_tensor::kernels::permute(&ax, &[0, 2, 1]) } else { ax };
        let bx = if tb { s2i_tensor::kernels::permute(&b, &[0, 2, 1]) } else { b.clone() };
        let bv = Var::constant(bx.clone());
        assert_grad("bmm a", |v| probe(&v.bmm(ta, &bv, tb), 16), &ax);
        let av = Var::constant(ax.clone());
        assert_grad("bmm b", |v| probe(&av.bmm(ta, v, tb), 16), &bx);
    }
}

#[test]
fn shared_subexpressions_accumulate() {
    let x = rnd(&[3, 3], 20);
    assert_grad("reuse", |v| probe(&v.mul(v).add(&v.sigmoid().mul(v)), 21), &x);
}
