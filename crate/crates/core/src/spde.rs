//! Terms of the mean-field evolution of `∫φ dπ̄` for Gaussian `π̄`, compared
//! against the Kushner–Stratonovich innovation coefficient.
//!
//! Expectations of polynomial test functions are evaluated exactly: every
//! integrand is a product of affine forms `aᵀx + b`, and Gaussian moments of
//! such products follow from Isserlis' theorem.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{EsrfError, Result};
use crate::linalg::{inv_spd, SymmetricMatrix};
use crate::reference::GaussianBelief;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum TestFunction {
    /// `φ(x) = x_k`.
    Coordinate(usize),
    /// `φ(x) = x_k x_l`.
    Quadratic(usize, usize),
}

/// `x ↦ aᵀx + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub a: DVector<f64>,
    pub b: f64,
}

impl Affine {
    pub fn constant(d: usize, b: f64) -> Self {
        Self {
            a: DVector::zeros(d),
            b,
        }
    }

    pub fn coordinate(d: usize, k: usize) -> Self {
        let mut a = DVector::zeros(d);
        a[k] = 1.0;
        Self { a, b: 0.0 }
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        self.a.dot(x) + self.b
    }
}

/// `E[∏ᵢ (aᵢᵀX + bᵢ)]` for `X ~ N(m, P)`.
pub fn gaussian_moment(factors: &[Affine], mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let n = factors.len();
    let offsets: Vec<f64> = factors.iter().map(|f| f.a.dot(mean) + f.b).collect();
    let pair = DMatrix::from_fn(n, n, |i, j| (cov * &factors[j].a).dot(&factors[i].a));
    let mut total = 0.0;
    // subsets S of factors that contribute their centered part
    for mask in 0u32..(1 << n) {
        let chosen: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        if chosen.len() % 2 == 1 {
            continue;
        }
        let rest: f64 = (0..n)
            .filter(|i| mask & (1 << i) == 0)
            .map(|i| offsets[i])
            .product();
        if rest == 0.0 {
            continue;
        }
        total += rest * matchings(&chosen, &pair);
    }
    total
}

/// Sum over perfect matchings of `∏ pair[i][j]`.
fn matchings(items: &[usize], pair: &DMatrix<f64>) -> f64 {
    match items {
        [] => 1.0,
        [first, rest @ ..] => rest
            .iter()
            .enumerate()
            .map(|(pos, &j)| {
                let remaining: Vec<usize> = rest
                    .iter()
                    .enumerate()
                    .filter(|&(p, _)| p != pos)
                    .map(|(_, &v)| v)
                    .collect();
                pair[(*first, j)] * matchings(&remaining, pair)
            })
            .sum(),
    }
}

/// Linear drift `B` and model noise covariance `Q` entering `Lφ`.
#[derive(Clone, Debug)]
pub struct LinearGenerator {
    pub drift: DMatrix<f64>,
    pub q: SymmetricMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpdeTerms {
    /// `∫Lφ dπ̄`.
    pub generator: f64,
    /// `½∫tr(P̄ΘP̄φ'') dπ̄`.
    pub ito_correction: f64,
    /// Coefficient of `dY − Hm̄dt` in the transport term: `∫∇φ dπ̄ P̄HᵀR⁻¹`.
    pub innovation: Vec<f64>,
    /// `−½∫∇φ P̄Θ(x − m̄) dπ̄`.
    pub drift_correction: f64,
    /// Kushner–Stratonovich coefficient `∫φ H(x − m̄)ᵀ dπ̄ R⁻¹`.
    pub ks_innovation: Vec<f64>,
}

impl SpdeTerms {
    /// `|(II) + (IV)|`.
    pub fn cancellation_residual(&self) -> f64 {
        (self.ito_correction + self.drift_correction).abs()
    }

    /// Largest entrywise gap between the two innovation coefficients.
    pub fn innovation_gap(&self) -> f64 {
        self.innovation
            .iter()
            .zip(&self.ks_innovation)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

struct Parts {
    value: Vec<Affine>,
    gradient: Vec<Vec<Affine>>,
    hessian: DMatrix<f64>,
}

fn parts(phi: TestFunction, d: usize) -> Result<Parts> {
    let check = |k: usize| {
        if k < d {
            Ok(())
        } else {
            Err(EsrfError::UnsupportedTestFunction(format!(
                "index {k} out of range for dimension {d}"
            )))
        }
    };
    match phi {
        TestFunction::Coordinate(k) => {
            check(k)?;
            Ok(Parts {
                value: vec![Affine::coordinate(d, k)],
                gradient: (0..d)
                    .map(|j| vec![Affine::constant(d, if j == k { 1.0 } else { 0.0 })])
                    .collect(),
                hessian: DMatrix::zeros(d, d),
            })
        }
        TestFunction::Quadratic(k, l) => {
            check(k)?;
            check(l)?;
            let mut gradient: Vec<Affine> = (0..d).map(|_| Affine::constant(d, 0.0)).collect();
            gradient[k].a[l] += 1.0;
            gradient[l].a[k] += 1.0;
            let mut hessian = DMatrix::zeros(d, d);
            hessian[(k, l)] += 1.0;
            hessian[(l, k)] += 1.0;
            Ok(Parts {
                value: vec![Affine::coordinate(d, k), Affine::coordinate(d, l)],
                gradient: gradient.into_iter().map(|g| vec![g]).collect(),
                hessian,
            })
        }
    }
}

/// Evaluates the terms (I)–(IV) and the Kushner–Stratonovich coefficient for
/// a Gaussian belief by exact moment identities.
pub fn spde_term_audit(
    b: &GaussianBelief,
    h: &DMatrix<f64>,
    r: &SymmetricMatrix,
    phi: TestFunction,
    generator: &LinearGenerator,
) -> Result<SpdeTerms> {
    let d = b.dim();
    if h.ncols() != d
        || h.nrows() != r.dim()
        || generator.drift.shape() != (d, d)
        || generator.q.dim() != d
    {
        return Err(EsrfError::DimensionMismatch("SPDE audit operands".into()));
    }
    let m = &b.mean;
    let p = b.cov.as_matrix();
    let r_inv = inv_spd(r.as_matrix())?;
    let theta = h.transpose() * &r_inv * h;
    let parts = parts(phi, d)?;
    let expect = |factors: Vec<Affine>| gaussian_moment(&factors, m, p);

    let grad_mean: Vec<f64> = parts.gradient.iter().map(|g| expect(g.clone())).collect();
    let grad_mean = DVector::from_vec(grad_mean);

    let transport: f64 = (0..d)
        .map(|j| {
            let bj = Affine {
                a: generator.drift.row(j).transpose(),
                b: 0.0,
            };
            let mut f = parts.gradient[j].clone();
            f.push(bj);
            expect(f)
        })
        .sum();
    let generator_term = 0.5 * (generator.q.as_matrix() * &parts.hessian).trace() + transport;

    let ito_correction = 0.5 * (p * &theta * p * &parts.hessian).trace();

    let gain = p * h.transpose() * &r_inv;
    let innovation = (grad_mean.transpose() * &gain).iter().copied().collect();

    let pt = p * &theta;
    let pt_m = &pt * m;
    let drift_correction = -0.5
        * (0..d)
            .map(|j| {
                let v = Affine {
                    a: pt.row(j).transpose(),
                    b: -pt_m[j],
                };
                let mut f = parts.gradient[j].clone();
                f.push(v);
                expect(f)
            })
            .sum::<f64>();

    let ks_weights = h.transpose() * &r_inv;
    let cross = DVector::from_fn(d, |j, _| {
        let mut f = parts.value.clone();
        f.push(Affine {
            a: Affine::coordinate(d, j).a,
            b: -m[j],
        });
        expect(f)
    });
    let ks_innovation = (cross.transpose() * ks_weights).iter().copied().collect();

    Ok(SpdeTerms {
        generator: generator_term,
        ito_correction,
        innovation,
        drift_correction,
        ks_innovation,
    })
}

/// Every test function of the audit in dimension `d`: all coordinates and all
/// quadratics `x_k x_l` with `k ≤ l`.
pub fn all_test_functions(d: usize) -> Vec<TestFunction> {
    let mut out: Vec<TestFunction> = (0..d).map(TestFunction::Coordinate).collect();
    for k in 0..d {
        for l in k..d {
            out.push(TestFunction::Quadratic(k, l));
        }
    }
    out
}
