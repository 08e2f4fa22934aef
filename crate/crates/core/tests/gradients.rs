//! Analytic gradients against central finite differences.

use approx::assert_relative_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nir_core::model::{backward, forward};
use nir_core::nir::{incidence, ir_loss, nir_backward, DEFAULT_EPSILON};
use nir_core::trainer::{objective, objective_gradients, ObjectiveOptions};
use nir_core::{Architecture, Matrix, ModelParams};

const H: f64 = 1e-5;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn perturbed_model(rng: &mut ChaCha8Rng, arch: &Architecture) -> ModelParams {
    let mut p = ModelParams::init(arch, rng.gen()).unwrap();
    for i in 0..p.param_count() {
        *p.param_mut(i) += rng.gen_range(-0.1..0.1);
    }
    p
}

fn check_objective(params: &ModelParams, x: &Matrix, y: &[u8], opts: &ObjectiveOptions) {
    let (_, grads, _) = objective_gradients(params, x, y, opts).unwrap();
    for (i, &a) in grads.flatten().iter().enumerate() {
        let mut p = params.clone();
        *p.param_mut(i) += H;
        let up = objective(&p, x, y, opts).unwrap().total;
        *p.param_mut(i) -= 2.0 * H;
        let down = objective(&p, x, y, opts).unwrap().total;
        let fd = (up - down) / (2.0 * H);
        assert_relative_eq!(a, fd, epsilon = 1e-9, max_relative = 1e-4);
    }
}

#[test]
fn total_objective_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (m, hidden, b) in [(3, vec![4], 5), (6, vec![7, 8], 8), (2, vec![5, 16], 2)] {
        let arch = Architecture::new(m, hidden).unwrap();
        let params = perturbed_model(&mut rng, &arch);
        let x = random_matrix(&mut rng, b, m, -2.0, 2.0);
        let y: Vec<u8> = (0..b).map(|i| (i % 2) as u8).collect();
        check_objective(
            &params,
            &x,
            &y,
            &ObjectiveOptions::new(0.1, DEFAULT_EPSILON),
        );
    }
}

#[test]
fn strong_penalty_is_still_exact() {
    // λ large enough that the incidence term dominates BCE.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let arch = Architecture::new(4, vec![6, 8]).unwrap();
    let params = perturbed_model(&mut rng, &arch);
    let x = random_matrix(&mut rng, 5, 4, -2.0, 2.0);
    check_objective(
        &params,
        &x,
        &[1, 0, 1, 1, 0],
        &ObjectiveOptions::new(50.0, DEFAULT_EPSILON),
    );
}

#[test]
fn stop_gradient_drops_the_probability_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let arch = Architecture::new(3, vec![4]).unwrap();
    let params = perturbed_model(&mut rng, &arch);
    let x = random_matrix(&mut rng, 4, 3, -2.0, 2.0);
    let y = [1, 0, 0, 1];
    let mut opts = ObjectiveOptions::new(1.0, DEFAULT_EPSILON);
    opts.stop_grad_phat = true;
    let (_, grads, trace) = objective_gradients(&params, &x, &y, &opts).unwrap();

    // Oracle: BCE gradient on the logit plus only the Z path of the penalty.
    let dl_dlogits: Vec<f64> = trace
        .probs
        .iter()
        .zip(&y)
        .map(|(p, &t)| (p - f64::from(t)) / y.len() as f64)
        .collect();
    let g = nir_backward(trace.penultimate(), &trace.probs, DEFAULT_EPSILON, 1.0).unwrap();
    let expected = backward(&params, &trace, &g.dl_dz, &dl_dlogits).unwrap();
    for (a, b) in grads.flatten().iter().zip(expected.flatten()) {
        assert_relative_eq!(*a, b, epsilon = 1e-15, max_relative = 1e-12);
    }
}

#[test]
fn nir_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for &(b, d) in &[(2, 4), (5, 8), (8, 16), (3, 2)] {
        let z = random_matrix(&mut rng, b, d, 0.0, 2.0);
        let p: Vec<f64> = (0..b).map(|_| rng.gen_range(0.05..0.95)).collect();
        let lambda = rng.gen_range(0.01..2.0);
        let f = |z: &Matrix, p: &[f64]| {
            lambda * ir_loss(&incidence(z, p, DEFAULT_EPSILON).unwrap()).unwrap()
        };
        let g = nir_backward(&z, &p, DEFAULT_EPSILON, lambda).unwrap();
        for i in 0..b {
            for j in 0..d {
                let mut zp = z.clone();
                zp.set(i, j, z.get(i, j) + H);
                let up = f(&zp, &p);
                zp.set(i, j, z.get(i, j) - H);
                let fd = (up - f(&zp, &p)) / (2.0 * H);
                assert_relative_eq!(g.dl_dz.get(i, j), fd, epsilon = 1e-12, max_relative = 1e-6);
            }
            let mut pp = p.clone();
            pp[i] = p[i] + H;
            let up = f(&z, &pp);
            pp[i] = p[i] - H;
            let fd = (up - f(&z, &pp)) / (2.0 * H);
            assert_relative_eq!(g.dl_dphat[i], fd, epsilon = 1e-12, max_relative = 1e-6);
        }
    }
}

#[test]
fn forward_is_row_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let arch = Architecture::new(5, vec![6, 4]).unwrap();
    let params = perturbed_model(&mut rng, &arch);
    let x = random_matrix(&mut rng, 7, 5, -1.0, 1.0);
    let batch = forward(&params, &x).unwrap();
    for i in 0..7 {
        let single = forward(&params, &x.select_rows(&[i])).unwrap();
        assert_relative_eq!(single.logits[0], batch.logits[i], max_relative = 1e-14);
        for j in 0..4 {
            assert_relative_eq!(
                single.penultimate().get(0, j),
                batch.penultimate().get(i, j),
                max_relative = 1e-14
            );
        }
    }
}
