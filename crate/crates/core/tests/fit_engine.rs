mod common;

use common::fitcheck::{normal_equations, poisson_gaussian_coverage};
use mirpairs::fitters::{
    initial_guess, least_squares, linear_least_squares, ErrorScaling, FitOptions, ModelKind, Weights,
};

#[test]
fn iterative_line_matches_closed_form() {
    let x: Vec<f64> = (0..25).map(|k| k as f64 * 0.4 - 3.0).collect();
    let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0 + 0.3 * (5.0 * v).sin()).collect();
    let sig: Vec<f64> = x.iter().map(|v| 0.1 + 0.05 * v.abs()).collect();
    let w: Vec<f64> = sig.iter().map(|s| 1.0 / (s * s)).collect();
    let fit = least_squares(
        &ModelKind::Line,
        &x,
        &y,
        &Weights::Sigma(sig.clone()),
        &[0.0, 0.0],
        &FitOptions::default(),
    )
    .unwrap();
    let exact = normal_equations(&[x.clone(), vec![1.0; x.len()]], &y, &w);
    assert!((fit.params[0] - exact[0]).abs() < 1e-9);
    assert!((fit.params[1] - exact[1]).abs() < 1e-9);
    let lin = linear_least_squares(
        &[x.clone(), vec![1.0; x.len()]],
        &y,
        &Weights::Sigma(sig),
        ErrorScaling::Absolute,
    )
    .unwrap();
    assert!((lin.params[0] - exact[0]).abs() < 1e-9);
    for (a, b) in fit.param_errs.iter().zip(&lin.param_errs) {
        assert!((a - b).abs() < 1e-9 * b.max(1.0));
    }
}

#[test]
fn iterative_polynomial_matches_closed_form() {
    let x: Vec<f64> = (0..30).map(|k| k as f64 / 29.0).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|v| 11.0 * v * v - 0.4 * v + 0.02 + 0.01 * (9.0 * v).cos())
        .collect();
    let cols = vec![vec![1.0; x.len()], x.clone(), x.iter().map(|v| v * v).collect()];
    let exact = normal_equations(&cols, &y, &vec![1.0; x.len()]);
    let model = ModelKind::Polynomial { degree: 2 };
    let guess = initial_guess(model, &x, &y).unwrap();
    let fit = least_squares(&model, &x, &y, &Weights::Uniform, &guess, &FitOptions::default()).unwrap();
    for (a, b) in fit.params.iter().zip(&exact) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn poisson_coverage_near_one_sigma() {
    let c = poisson_gaussian_coverage(99);
    assert!((0.60..=0.75).contains(&c), "coverage {c}");
}
