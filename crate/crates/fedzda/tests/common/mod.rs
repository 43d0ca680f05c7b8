//! Shared finite-difference gradient checks. Used by the per-op gradient
//! tests and by the acceptance gate, so both verify the same property
//! with the same oracle.

use fedzda::models::{build, ArchitectureSpec};
use fedzda::rng;
use fedzda::tensor::{batchnorm, BnMode, Tape, Tensor, Var};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
// Test-local rng domain, distinct from the training domains.
pub const DOMAIN: u64 = 0xf0;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

pub fn rand_tensor(shape: &[usize], seed: u64, tag: u64, lo: f64, hi: f64) -> Tensor {
    let mut r = rng::stream(seed, DOMAIN, &[tag]);
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng::uniform_in(&mut r, lo, hi))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Check analytic gradients of `loss = f(inputs)` against central
/// differences for every coordinate of every input.
pub fn check<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().with_grad())).collect();
    let loss = f(&mut tape, &vars);
    assert_eq!(tape.value(loss).len(), 1, "{name}: loss must be scalar");
    tape.backward(loss).unwrap();
    let grads: Vec<Vec<f64>> =
        vars.iter().map(|&v| tape.grad(v).expect("leaf gradient").to_vec()).collect();

    // Central differences, one coordinate at a time.
    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss)[0]
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + H;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - H;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * H);
            let analytic = grads[i][j];
            assert!(
                rel_err(analytic, numeric) <= TOL,
                "{name}: input {i} coord {j}: analytic {analytic:.9} vs numeric {numeric:.9}"
            );
        }
    }
}

pub fn check_conv2d(seed: u64) {
    let x = rand_tensor(&[2, 2, 5, 5], seed, 0, -1.0, 1.0);
    let w = rand_tensor(&[3, 2, 3, 3], seed, 1, -0.7, 0.7);
    let b = rand_tensor(&[3], seed, 2, -0.3, 0.3);
    check("conv2d s1p1", &[x, w, b], |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
        t.sum(y).unwrap()
    });
    let x = rand_tensor(&[1, 2, 5, 5], seed, 3, -1.0, 1.0);
    let w = rand_tensor(&[2, 2, 3, 3], seed, 4, -0.7, 0.7);
    let b = rand_tensor(&[2], seed, 5, -0.3, 0.3);
    check("conv2d s2p0", &[x, w, b], |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 2, 0).unwrap();
        t.sum(y).unwrap()
    });
}

pub fn check_batchnorm_train(seed: u64) {
    let x = rand_tensor(&[3, 2, 4, 4], seed, 10, -1.0, 1.0);
    let gamma = rand_tensor(&[2], seed, 11, 0.5, 1.5);
    let beta = rand_tensor(&[2], seed, 12, -0.5, 0.5);
    let rm = Tensor::zeros(vec![2]);
    let rv = Tensor::filled(vec![2], 1.0).unwrap();
    check("batchnorm train", &[x, gamma, beta], |t, v| {
        let out = batchnorm(t, v[0], v[1], v[2], &rm, &rv, BnMode::Train, 0.1).unwrap();
        // Exercise the statistics outputs too: they are loss terms
        // during data synthesis.
        let sy = t.sum(out.y).unwrap();
        let sm = t.sum(out.batch_mean).unwrap();
        let sv = t.sum(out.batch_var).unwrap();
        t.weighted_sum(&[(sy, 1.0), (sm, 0.7), (sv, 0.3)]).unwrap()
    });
}

pub fn check_batchnorm_eval(seed: u64) {
    let x = rand_tensor(&[2, 3, 3, 3], seed, 20, -1.0, 1.0);
    let gamma = rand_tensor(&[3], seed, 21, 0.5, 1.5);
    let beta = rand_tensor(&[3], seed, 22, -0.5, 0.5);
    let rm = rand_tensor(&[3], seed, 23, -0.2, 0.2);
    let rv = rand_tensor(&[3], seed, 24, 0.5, 1.5);
    check("batchnorm eval", &[x, gamma, beta], |t, v| {
        let out = batchnorm(t, v[0], v[1], v[2], &rm, &rv, BnMode::Eval, 0.1).unwrap();
        t.sum(out.y).unwrap()
    });
}

pub fn check_maxpool2(seed: u64) {
    let mut x = rand_tensor(&[2, 2, 4, 4], seed, 30, -1.0, 1.0);
    widen_pool_margins(&mut x, 2, 2, 4, 4);
    check("maxpool2", &[x], |t, v| {
        let y = t.maxpool2(v[0]).unwrap();
        t.sum(y).unwrap()
    });
}

/// Finite differences are only valid away from the max kink; push each
/// window's max clear of the runner-up.
pub fn widen_pool_margins(x: &mut Tensor, n: usize, c: usize, h: usize, w: usize) {
    let data = x.data_mut();
    for img in 0..n * c {
        for ph in 0..h / 2 {
            for pw in 0..w / 2 {
                let idx = [
                    img * h * w + (2 * ph) * w + 2 * pw,
                    img * h * w + (2 * ph) * w + 2 * pw + 1,
                    img * h * w + (2 * ph + 1) * w + 2 * pw,
                    img * h * w + (2 * ph + 1) * w + 2 * pw + 1,
                ];
                let max_at = idx
                    .iter()
                    .copied()
                    .max_by(|&a, &b| data[a].partial_cmp(&data[b]).unwrap())
                    .unwrap();
                data[max_at] += 0.05;
            }
        }
    }
}

pub fn check_dense(seed: u64) {
    let x = rand_tensor(&[4, 7], seed, 40, -1.0, 1.0);
    let w = rand_tensor(&[7, 5], seed, 41, -0.7, 0.7);
    let b = rand_tensor(&[5], seed, 42, -0.3, 0.3);
    check("dense", &[x, w, b], |t, v| {
        let y = t.dense(v[0], v[1], v[2]).unwrap();
        t.sum(y).unwrap()
    });
}

pub fn check_softmax_xent(seed: u64) {
    let logits = rand_tensor(&[5, 4], seed, 50, -2.0, 2.0);
    let mut r = rng::stream(seed, DOMAIN, &[51]);
    let targets: Vec<usize> = (0..5).map(|_| rng::bounded(&mut r, 4)).collect();
    check("softmax_xent", &[logits], |t, v| t.softmax_xent(v[0], &targets).unwrap());
}

/// The composition check: cross-entropy of the full 28x28 network
/// against its parameters, sampled coordinates per seed. Catches wiring
/// mistakes between layers that per-op checks cannot.
pub fn check_mnist_composition(seed: u64, probes: usize) {
    let arch = ArchitectureSpec::mnist_cnn();
    let model = build(&arch, seed).unwrap();
    let x = rand_tensor(&[2, 1, 28, 28], seed, 60, 0.05, 0.95);
    let mut r = rng::stream(seed, DOMAIN, &[61]);
    let targets: Vec<usize> = (0..2).map(|_| rng::bounded(&mut r, arch.classes)).collect();

    let loss_at = |theta: &[f64]| -> f64 {
        let mut m = model.clone();
        m.set_param_vector(theta).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let trace = m.forward_train(&mut tape, xv).unwrap();
        let loss = tape.softmax_xent(trace.logits, &targets).unwrap();
        tape.value(loss)[0]
    };

    // Analytic gradient, flattened in parameter order.
    let mut m = model.clone();
    let mut tape = Tape::new();
    let xv = tape.constant(&x);
    let trace = m.forward_train(&mut tape, xv).unwrap();
    let loss = tape.softmax_xent(trace.logits, &targets).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<f64> = trace
        .param_vars
        .iter()
        .flat_map(|&v| tape.grad(v).expect("param gradient").iter().copied())
        .collect();

    let mut theta = model.param_vector();
    assert_eq!(theta.len(), analytic.len());

    // Probes straddling a relu or pool kink make finite differences
    // invalid regardless of the backward pass; detect those by comparing
    // two step sizes (smooth coordinates agree to O(h^2)) and skip them.
    // The skip decision never looks at the analytic value, so a wrong
    // gradient cannot hide behind it.
    let mut skipped = 0;
    for k in 0..probes {
        let j = rng::bounded(&mut r, theta.len());
        let central = |theta: &mut Vec<f64>, h: f64| -> f64 {
            let orig = theta[j];
            theta[j] = orig + h;
            let up = loss_at(theta);
            theta[j] = orig - h;
            let down = loss_at(theta);
            theta[j] = orig;
            (up - down) / (2.0 * h)
        };
        let coarse = central(&mut theta, H);
        let fine = central(&mut theta, H / 2.0);
        if rel_err(coarse, fine) > TOL {
            skipped += 1;
            continue;
        }
        assert!(
            rel_err(analytic[j], fine) <= TOL,
            "mnist_cnn seed {seed} probe {k} coord {j}: analytic {:.9} vs numeric {fine:.9}",
            analytic[j]
        );
    }
    assert!(
        skipped * 8 <= probes,
        "seed {seed}: {skipped}/{probes} probes hit kinks; fixture too close to kinks"
    );
}
