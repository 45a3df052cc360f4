//! Central finite-difference checks for every differentiable tape primitive.

use dkgen::numerics::{RngState, Tape, Tensor, Var};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Builds `f` on a fresh tape from `inputs`, then compares each input's
/// analytic gradient against central differences.
fn check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) {
    let eval = |vals: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).map(|g| g.data().to_vec()).unwrap_or(vec![0.0; input.numel()]);
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += EPS;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= EPS;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
            let err = rel_err(analytic[i], fd);
            assert!(err < TOL, "input {k} elem {i}: analytic {} fd {fd} rel {err}", analytic[i]);
        }
    }
}

fn rand(rng: &mut RngState, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Weighted sum so that every output element gets a distinct upstream gradient.
fn weighted(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x).to_vec();
    let mut rng = RngState::new(seed);
    let w = tape.constant(rand(&mut rng, &shape));
    let p = tape.mul(x, w).unwrap();
    tape.sum(p).unwrap()
}

#[test]
fn matmul_and_transposed_matmul() {
    let mut rng = RngState::new(1);
    check(&[rand(&mut rng, &[3, 4]), rand(&mut rng, &[4, 2])], |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        weighted(t, y, 9)
    });
    check(&[rand(&mut rng, &[3, 4]), rand(&mut rng, &[5, 4])], |t, v| {
        let y = t.matmul_nt(v[0], v[1]).unwrap();
        weighted(t, y, 9)
    });
}

#[test]
fn elementwise_ops() {
    let mut rng = RngState::new(2);
    let a = rand(&mut rng, &[2, 3]);
    let b = rand(&mut rng, &[2, 3]);
    check(&[a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let d = t.sub(s, v[1]).unwrap();
        let m = t.mul(d, v[1]).unwrap();
        let sc = t.scale(m, -1.7).unwrap();
        weighted(t, sc, 3)
    });
    check(&[a.clone()], |t, v| {
        let g = t.gelu(v[0]).unwrap();
        weighted(t, g, 4)
    });
    check(&[a.clone()], |t, v| {
        let e = t.exp(v[0]).unwrap();
        let l = t.log(e).unwrap();
        let sp = t.softplus(l).unwrap();
        weighted(t, sp, 5)
    });
}

#[test]
fn bias_and_linear() {
    let mut rng = RngState::new(3);
    check(
        &[rand(&mut rng, &[3, 4]), rand(&mut rng, &[4, 2]), rand(&mut rng, &[2])],
        |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
            weighted(t, y, 6)
        },
    );
}

#[test]
fn softmax_variants() {
    let mut rng = RngState::new(4);
    let x = rand(&mut rng, &[3, 4]);
    check(&[x.clone()], |t, v| {
        let s = t.softmax(v[0], 1).unwrap();
        weighted(t, s, 7)
    });
    check(&[x.clone()], |t, v| {
        let s = t.softmax(v[0], 0).unwrap();
        weighted(t, s, 7)
    });
    let keep: Vec<bool> = (0..12).map(|i| i % 4 != 1).collect();
    check(&[x.clone()], move |t, v| {
        let s = t.softmax_masked(v[0], 1, Some(&keep)).unwrap();
        weighted(t, s, 8)
    });
    check(&[x], |t, v| {
        let s = t.log_softmax(v[0]).unwrap();
        weighted(t, s, 8)
    });
}

#[test]
fn layer_norm() {
    let mut rng = RngState::new(5);
    check(
        &[rand(&mut rng, &[3, 5]), rand(&mut rng, &[5]), rand(&mut rng, &[5])],
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
            weighted(t, y, 10)
        },
    );
}

#[test]
fn embedding_lookup() {
    let mut rng = RngState::new(6);
    check(&[rand(&mut rng, &[5, 3])], |t, v| {
        let y = t.embedding(v[0], &[4, 0, 4, 2]).unwrap();
        weighted(t, y, 11)
    });
}

#[test]
fn reductions_and_reshaping() {
    let mut rng = RngState::new(7);
    let a = rand(&mut rng, &[2, 3]);
    let b = rand(&mut rng, &[4, 3]);
    check(&[a.clone(), b.clone()], |t, v| {
        let c = t.concat_rows(&[v[0], v[1]]).unwrap();
        let s = t.slice_rows(c, 1, 4).unwrap();
        let tr = t.transpose(s).unwrap();
        let r = t.reshape(tr, &[2, 6]).unwrap();
        let m = t.mean(r).unwrap();
        let w = weighted(t, r, 12);
        t.add(m, w).unwrap()
    });
    check(&[a.clone(), rand(&mut rng, &[2, 2])], |t, v| {
        let c = t.concat_cols(&[v[0], v[1]]).unwrap();
        let s = t.slice_cols(c, 2, 3).unwrap();
        let g = t.gather(s, &[0, 5, 5, 3]).unwrap();
        weighted(t, g, 13)
    });
}
