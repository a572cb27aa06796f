use mirpairs::fitters::{initial_guess, least_squares, FitOptions, ModelKind, Weights};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

/// Normal-equation solution of a small weighted linear problem, by hand.
pub fn normal_equations(columns: &[Vec<f64>], y: &[f64], w: &[f64]) -> Vec<f64> {
    let m = columns.len();
    let mut a = nalgebra::DMatrix::<f64>::zeros(m, m);
    let mut b = nalgebra::DVector::<f64>::zeros(m);
    for i in 0..m {
        for j in 0..m {
            a[(i, j)] = (0..y.len()).map(|k| w[k] * columns[i][k] * columns[j][k]).sum();
        }
        b[i] = (0..y.len()).map(|k| w[k] * columns[i][k] * y[k]).sum();
    }
    a.lu().solve(&b).unwrap().iter().copied().collect()
}

/// Fraction of 1σ intervals (amplitude, centre, width) containing the truth
/// over 100 Poisson-noised Gaussian peaks, fitted over ±2σ.
///
/// Weights come from the observed counts, so long runs of empty tail bins
/// would drag the width low; the window keeps every bin populated.
pub fn poisson_gaussian_coverage(seed: u64) -> f64 {
    let truth = [1000.0, 1.5, 6.0];
    let x: Vec<f64> = (-12..=12).map(|k| k as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0;
    let mut total = 0;
    for _ in 0..100 {
        let y: Vec<f64> = x
            .iter()
            .map(|v| {
                let mean = truth[0] * (-(v - truth[1]).powi(2) / (2.0 * truth[2] * truth[2])).exp();
                if mean > 0.0 {
                    Poisson::new(mean).unwrap().sample(&mut rng)
                } else {
                    0.0
                }
            })
            .collect();
        let guess = initial_guess(ModelKind::Gaussian, &x, &y).unwrap();
        let fit = least_squares(
            &ModelKind::Gaussian,
            &x,
            &y,
            &Weights::Poisson,
            &guess,
            &FitOptions::default(),
        )
        .unwrap();
        assert!(fit.converged);
        for (i, t) in truth.iter().enumerate() {
            let p = if i == 2 { fit.params[i].abs() } else { fit.params[i] };
            hits += ((p - t).abs() <= fit.param_errs[i]) as usize;
            total += 1;
        }
    }
    hits as f64 / total as f64
}
