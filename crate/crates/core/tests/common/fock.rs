//! Brute-force Fock-space model of two coherently pumped pair sources
//! meeting at a directional coupler.
//!
//! Modes are (s₁, i₁, s₂, i₂); after the coupler waveguide 1 is output A
//! and waveguide 2 is output B. Each mode is truncated at two photons and
//! the coupler is exp(iθG) with G = Σ_{s,i}(a₁†a₂ + a₂†a₁), cos θ = √(1−R),
//! built from the eigendecomposition of the real symmetric generator.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

const LEVELS: usize = 3;
const MODES: usize = 4;
const DIM: usize = LEVELS * LEVELS * LEVELS * LEVELS;

fn index(occ: [usize; MODES]) -> usize {
    occ.iter().fold(0, |acc, n| acc * LEVELS + n)
}

fn occupation(mut idx: usize) -> [usize; MODES] {
    let mut occ = [0; MODES];
    for m in (0..MODES).rev() {
        occ[m] = idx % LEVELS;
        idx /= LEVELS;
    }
    occ
}

/// a_j† a_k in the truncated basis.
fn hop(j: usize, k: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(DIM, DIM);
    for col in 0..DIM {
        let mut occ = occupation(col);
        if occ[k] == 0 {
            continue;
        }
        let mut amp = (occ[k] as f64).sqrt();
        occ[k] -= 1;
        if occ[j] + 1 >= LEVELS {
            continue;
        }
        amp *= (occ[j] as f64 + 1.0).sqrt();
        occ[j] += 1;
        m[(index(occ), col)] += amp;
    }
    m
}

/// Amplitudes of |1s1i⟩_A, |1s1i⟩_B, |1s⟩_A|1i⟩_B, |1i⟩_A|1s⟩_B with the
/// global factor −i applied, plus the total probability left in the
/// truncated space.
pub fn output_amplitudes(phi: f64, r: f64) -> ([Complex64; 4], f64) {
    let theta = r.sqrt().asin();
    let g = (hop(0, 2) + hop(2, 0) + hop(1, 3) + hop(3, 1)) * theta;
    let eig = SymmetricEigen::new(g);
    let v = eig.eigenvectors.map(|x| Complex64::new(x, 0.0));
    let phases = DVector::from_iterator(DIM, eig.eigenvalues.iter().map(|l| Complex64::from_polar(1.0, *l)));

    let mut psi = DVector::<Complex64>::zeros(DIM);
    let h = std::f64::consts::FRAC_1_SQRT_2;
    psi[index([1, 1, 0, 0])] = Complex64::from_polar(h, -phi);
    psi[index([0, 0, 1, 1])] = Complex64::from_polar(h, phi);

    let coeffs = v.adjoint() * psi;
    let out = &v * coeffs.component_mul(&phases) * Complex64::new(0.0, -1.0);
    let total = out.iter().map(|a| a.norm_sqr()).sum();
    (
        [
            out[index([1, 1, 0, 0])],
            out[index([0, 0, 1, 1])],
            out[index([1, 0, 0, 1])],
            out[index([0, 1, 1, 0])],
        ],
        total,
    )
}
