use dro_core::diffusion::{
    ancestral_sample_batch, ancestral_trajectory_from, perturbed_grid, solver_integrate, GaussianTargetEps, StepGrid,
};
use dro_core::numerics::rng::normal_vec;
use dro_core::{Cond, LambdaMode, NoiseSchedule, Seed, SigmaMode, Tensor};

const N: usize = 10_000;

fn target(mode: SigmaMode) -> GaussianTargetEps<f64> {
    GaussianTargetEps {
        schedule: NoiseSchedule::linear(50, 2e-3, 0.4, mode, LambdaMode::Unit).unwrap(),
        mean: vec![1.0, -2.0],
        var: 1.0,
    }
}

fn moments(x: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    let d = x.cols();
    let mut mean = vec![0.0; d];
    for i in 0..x.rows() {
        for j in 0..d {
            mean[j] += x.row(i)[j] / n;
        }
    }
    let mut var = vec![0.0; d];
    for i in 0..x.rows() {
        for j in 0..d {
            var[j] += (x.row(i)[j] - mean[j]).powi(2) / (n - 1.0);
        }
    }
    (mean, var)
}

fn assert_matches_target(x: &Tensor<f64>, model: &GaussianTargetEps<f64>, what: &str) {
    assert_matches_target_within(x, model, 0.05, what);
}

fn assert_matches_target_within(x: &Tensor<f64>, model: &GaussianTargetEps<f64>, var_tol: f64, what: &str) {
    let (mean, var) = moments(x);
    let se = (model.var / x.rows() as f64).sqrt();
    for j in 0..mean.len() {
        assert!((mean[j] - model.mean[j]).abs() < 3.0 * se, "{what}: mean[{j}] = {} vs {}", mean[j], model.mean[j]);
        assert!((var[j] / model.var - 1.0).abs() < var_tol, "{what}: var[{j}] = {} vs {}", var[j], model.var);
    }
}

#[test]
fn ancestral_sampler_reproduces_gaussian_target() {
    let model = target(SigmaMode::Beta);
    let cond = vec![Cond::Null; N];
    let x = ancestral_sample_batch(&model.schedule, &model, &cond, 1.0, 17).unwrap();
    assert_matches_target(&x, &model, "ancestral");
}

#[test]
fn multistep_solver_reproduces_gaussian_target() {
    let model = target(SigmaMode::Beta);
    let cond = vec![Cond::Null; N];
    let mut rng = Seed(23).rng();
    let start = Tensor::matrix(N, 2, normal_vec(&mut rng, 2 * N)).unwrap();
    let dense = solver_integrate(&model.schedule, &model, &cond, &StepGrid::dense(50), 1, start.clone()).unwrap();
    assert_matches_target(&dense, &model, "solver, all knots");
    let coarse = perturbed_grid(50, 20, 5).unwrap();
    let x = solver_integrate(&model.schedule, &model, &cond, &coarse, 1, start).unwrap();
    // 20 knots uniform in t are very uneven in log-SNR; the mean is still exact
    // to MC error but the spread carries visible discretisation error.
    assert_matches_target_within(&x, &model, 0.15, "solver, 20 knots");
}

#[test]
fn solver_and_noise_free_ancestral_agree_on_mean_path() {
    for mode in [SigmaMode::Beta, SigmaMode::Posterior] {
        let model = target(mode);
        let s = &model.schedule;
        let cond = [Cond::Null];
        // start at the mean of q(x_T) so both paths follow √ᾱ_t μ exactly in the limit
        let top = s.alpha_bar(50).sqrt();
        let origin = Tensor::matrix(1, 2, vec![top * model.mean[0], top * model.mean[1]]).unwrap();
        let states =
            ancestral_trajectory_from(s, &model, origin.clone(), &cond, 1.0, |_| Tensor::zeros(&[1, 2])).unwrap();
        let grid = StepGrid::dense(50);
        for t in [40, 25, 10, 1] {
            let solved = solver_integrate(s, &model, &cond, &grid, t, origin.clone()).unwrap();
            for j in 0..2 {
                let a = states[t].row(0)[j];
                let b = solved.row(0)[j];
                assert!((a - b).abs() < 1e-3, "{mode:?} t={t}: {a} vs {b}");
                let exact = s.alpha_bar(t).sqrt() * model.mean[j];
                assert!((b - exact).abs() < 1e-3, "t={t}: solver {b} vs {exact}");
            }
        }
    }
}

#[test]
fn ancestral_sampling_is_seeded() {
    let model = target(SigmaMode::Beta);
    let cond = vec![Cond::Label(0); 3];
    let a = ancestral_sample_batch(&model.schedule, &model, &cond, 1.0, 5).unwrap();
    let b = ancestral_sample_batch(&model.schedule, &model, &cond, 1.0, 5).unwrap();
    let c = ancestral_sample_batch(&model.schedule, &model, &cond, 1.0, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn forward_posterior_marginal_consistency() {
    // x_t ~ q(x_t|x_0), then x_{t-1} ~ q(x_{t-1}|x_t,x_0) must be distributed as q(x_{t-1}|x_0).
    let s = target(SigmaMode::Posterior).schedule;
    let x0 = [0.8, -0.5];
    let t = 12;
    let mut rng = Seed(77).rng();
    let n = 10_000;
    let mut samples = Vec::with_capacity(n * 2);
    for _ in 0..n {
        let e: Vec<f64> = normal_vec(&mut rng, 2);
        let xt = dro_core::diffusion::forward_diffuse(&s, &x0, t, &e).unwrap();
        let (m, v) = dro_core::diffusion::posterior_params(&s, &x0, &xt, t).unwrap();
        let z: Vec<f64> = normal_vec(&mut rng, 2);
        samples.push(m[0] + v.sqrt() * z[0]);
        samples.push(m[1] + v.sqrt() * z[1]);
    }
    let x = Tensor::matrix(n, 2, samples).unwrap();
    let (mean, var) = moments(&x);
    let ab = s.alpha_bar(t - 1);
    let target_var = 1.0 - ab;
    let se = (target_var / n as f64).sqrt();
    for j in 0..2 {
        assert!((mean[j] - ab.sqrt() * x0[j]).abs() < 3.0 * se);
        let var_se = target_var * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((var[j] - target_var).abs() < 3.0 * var_se, "{} vs {target_var}", var[j]);
    }
}
