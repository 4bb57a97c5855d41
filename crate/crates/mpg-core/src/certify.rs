//! Post-training optimality certificates.
//!
//! A trained extended policy is globally optimal exactly when a certain
//! mean-centered log-ratio map is orthogonal to every eigenfunction of
//! the preference kernel that carries positive eigenvalue. This module
//! computes that map, the kernel spectrum over the finite action-state
//! grid, and the residuals whose smallness constitutes the certificate.
//! It also provides the spectral-truncation and random-feature
//! approximations of a kernel.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{MpgError, Result};
use crate::mdp::{propagate, FiniteMdp, StateDistribution};
use crate::policy::{ExtendedPolicy, FeatureKind, FeatureMap};
use crate::softdp::SoftDpSolution;

/// Eigendecomposition of a kernel Gram matrix over the flat
/// action-state grid (index `a * n_states + s`).
#[derive(Debug, Clone)]
pub struct GramSpectrum {
    pub size: usize,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// `eigenvectors[j]` is the unit eigenvector for `eigenvalues[j]`.
    pub eigenvectors: Vec<Vec<f64>>,
}

impl GramSpectrum {
    /// Decomposes a dense symmetric matrix given in row-major flat form.
    pub fn from_gram(gram: &[f64], size: usize) -> Result<Self> {
        if gram.len() != size * size {
            return Err(MpgError::DimensionMismatch(format!(
                "gram has {} entries, expected {}",
                gram.len(),
                size * size
            )));
        }
        for i in 0..size {
            for j in (i + 1)..size {
                if (gram[i * size + j] - gram[j * size + i]).abs() > 1e-10 {
                    return Err(MpgError::InvalidArgument(format!(
                        "gram not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let m = DMatrix::from_row_slice(size, size, gram);
        let eig = SymmetricEigen::new(m);
        let mut order: Vec<usize> = (0..size).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .expect("real eigenvalues")
        });
        let eigenvalues: Vec<f64> = order.iter().map(|&j| eig.eigenvalues[j]).collect();
        let eigenvectors: Vec<Vec<f64>> = order
            .iter()
            .map(|&j| eig.eigenvectors.column(j).iter().cloned().collect())
            .collect();
        Ok(GramSpectrum {
            size,
            eigenvalues,
            eigenvectors,
        })
    }

    pub fn from_features(features: &FeatureMap) -> Result<Self> {
        let size = features.n_actions() * features.n_states();
        Self::from_gram(&features.gram(), size)
    }

    /// `sum_j lambda_j e_j e_j^T`, row-major flat.
    pub fn reconstruct(&self) -> Vec<f64> {
        let g = self.size;
        let mut out = vec![0.0; g * g];
        for (lam, e) in self.eigenvalues.iter().zip(&self.eigenvectors) {
            for i in 0..g {
                let li = lam * e[i];
                for j in 0..g {
                    out[i * g + j] += li * e[j];
                }
            }
        }
        out
    }

    /// Max-norm error of the spectral reconstruction against `gram`.
    pub fn reconstruction_error(&self, gram: &[f64]) -> f64 {
        self.reconstruct()
            .iter()
            .zip(gram)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
    }

    /// `max |E^T E - I|` over all entries.
    pub fn orthonormality_error(&self) -> f64 {
        let g = self.size;
        let mut worst = 0.0f64;
        for i in 0..g {
            for j in i..g {
                let dot: f64 = self.eigenvectors[i]
                    .iter()
                    .zip(&self.eigenvectors[j])
                    .map(|(x, y)| x * y)
                    .sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }
}

/// The certificate map for one block `m`, flat over the grid:
///
/// `d(a,s) = w(s) pi^{(m)}(a|s) [ log(pi^{(m)}/pi*^{(m)})(a|s)
///           - KL(pi^{(m)} || pi*^{(m)})(s) ]`,
///
/// where `w` is the exact law of the state that block `m` acts on.
/// Mean-centering makes `sum_a d(a,s) = 0` for every state.
#[derive(Debug, Clone)]
pub struct DMap {
    pub m: usize,
    pub n_actions: usize,
    pub n_states: usize,
    /// `values[a * n_states + s]`.
    pub values: Vec<f64>,
    /// The state law `w`.
    pub state_weights: Vec<f64>,
}

pub fn compute_d_map(
    mdp: &FiniteMdp,
    trained: &ExtendedPolicy,
    oracle: &SoftDpSolution,
    m: usize,
) -> Result<DMap> {
    let n = trained.horizon();
    if oracle.horizon != n {
        return Err(MpgError::DimensionMismatch(format!(
            "trained horizon {n} vs oracle horizon {}",
            oracle.horizon
        )));
    }
    if m == 0 || m > n {
        return Err(MpgError::InvalidArgument(format!(
            "block index {m} outside 1..={n}"
        )));
    }
    if (trained.tau() - oracle.tau).abs() > 1e-12 {
        return Err(MpgError::InvalidArgument(
            "trained policy and oracle use different temperatures".into(),
        ));
    }
    let (ns, na) = (mdp.n_states(), mdp.n_actions());

    // law of the state block m acts on: push nu_0 through blocks n..m+1
    let mut dist = StateDistribution(mdp.initial_dist().to_vec());
    for i in ((m + 1)..=n).rev() {
        dist = propagate(mdp, &dist, &trained.step(i).as_table())?;
    }

    let table = trained.step(m).as_table();
    let star = oracle.pi(m);
    let kl = table.kl_per_state(star)?;
    let mut values = vec![0.0; na * ns];
    for s in 0..ns {
        let w = dist.probs()[s];
        for a in 0..na {
            let pa = table.prob(a, s);
            values[a * ns + s] = w * pa * ((pa / star.prob(a, s)).ln() - kl[s]);
        }
    }
    Ok(DMap {
        m,
        n_actions: na,
        n_states: ns,
        values,
        state_weights: dist.probs().to_vec(),
    })
}

/// `residual_j = |<d, e_j>|` over the flat grid, one per eigenpair.
pub fn orthogonality_residuals(d: &DMap, spectrum: &GramSpectrum) -> Result<Vec<f64>> {
    if spectrum.size != d.values.len() {
        return Err(MpgError::DimensionMismatch(format!(
            "spectrum over {} grid points, d over {}",
            spectrum.size,
            d.values.len()
        )));
    }
    Ok(spectrum
        .eigenvectors
        .iter()
        .map(|e| {
            d.values
                .iter()
                .zip(e)
                .map(|(x, y)| x * y)
                .sum::<f64>()
                .abs()
        })
        .collect())
}

/// Rank-`p` spectral truncation: keeps the top `p` eigenpairs, zeroes
/// the rest.
pub fn truncated_kernel(spectrum: &GramSpectrum, p: usize) -> Result<GramSpectrum> {
    if p == 0 || p > spectrum.size {
        return Err(MpgError::InvalidArgument(format!(
            "truncation rank {p} outside 1..={}",
            spectrum.size
        )));
    }
    let mut eigenvalues = spectrum.eigenvalues.clone();
    for lam in eigenvalues.iter_mut().skip(p) {
        *lam = 0.0;
    }
    Ok(GramSpectrum {
        size: spectrum.size,
        eigenvalues,
        eigenvectors: spectrum.eigenvectors.clone(),
    })
}

/// Monte-Carlo feature approximation of a kernel: draws `p` i.i.d.
/// Gaussian vectors with covariance equal to the kernel (via its
/// spectral square root) and returns the feature map
/// `psi = (1/sqrt(p)) (g_1, ..., g_p)`, whose Gram matrix has
/// expectation equal to the kernel.
pub fn random_feature_kernel(
    spectrum: &GramSpectrum,
    n_actions: usize,
    n_states: usize,
    p: usize,
    seed: u64,
) -> Result<FeatureMap> {
    if p == 0 {
        return Err(MpgError::InvalidArgument(
            "need at least one random feature".into(),
        ));
    }
    let g = spectrum.size;
    if n_actions * n_states != g {
        return Err(MpgError::DimensionMismatch(format!(
            "grid {n_actions} x {n_states} does not match spectrum size {g}"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let scale = 1.0 / (p as f64).sqrt();
    // rows[idx * p + i] = g_i[idx] / sqrt(p)
    let mut rows = vec![0.0; g * p];
    for i in 0..p {
        for (lam, e) in spectrum.eigenvalues.iter().zip(&spectrum.eigenvectors) {
            if *lam <= 0.0 {
                continue;
            }
            let z: f64 = StandardNormal.sample(&mut rng);
            let w = lam.sqrt() * z * scale;
            for (idx, ev) in e.iter().enumerate() {
                rows[idx * p + i] += w * ev;
            }
        }
    }
    FeatureMap::dense(FeatureKind::RandomFeature, n_actions, n_states, p, rows)
}

/// Certificate verdict for one block.
#[derive(Debug, Clone, Serialize)]
pub struct CertificateReport {
    pub m: usize,
    pub residual_max: f64,
    pub lambda_min_retained: f64,
    pub policy_gap_max: f64,
    pub pass: bool,
}

/// Runs the certificate for every block of a trained policy: residuals
/// of the d-map against all kernel eigenvectors with eigenvalue above
/// `lambda_cut_rel * lambda_1`, plus the direct policy gap against the
/// oracle as corroborating evidence.
pub fn certify(
    mdp: &FiniteMdp,
    trained: &ExtendedPolicy,
    oracle: &SoftDpSolution,
    tol: f64,
    lambda_cut_rel: f64,
) -> Result<Vec<CertificateReport>> {
    let mut reports = Vec::with_capacity(trained.horizon());
    for m in 1..=trained.horizon() {
        let spectrum = GramSpectrum::from_features(trained.step(m).features())?;
        let d = compute_d_map(mdp, trained, oracle, m)?;
        let residuals = orthogonality_residuals(&d, &spectrum)?;
        let lambda_cut = lambda_cut_rel * spectrum.eigenvalues[0].max(0.0);
        let mut residual_max = 0.0f64;
        let mut lambda_min_retained = f64::INFINITY;
        for (lam, r) in spectrum.eigenvalues.iter().zip(&residuals) {
            if *lam > lambda_cut {
                residual_max = residual_max.max(*r);
                lambda_min_retained = lambda_min_retained.min(*lam);
            }
        }
        let policy_gap_max = trained.step(m).as_table().max_abs_diff(oracle.pi(m));
        reports.push(CertificateReport {
            m,
            residual_max,
            lambda_min_retained,
            policy_gap_max,
            pass: residual_max < tol,
        });
    }
    Ok(reports)
}

/// Default relative eigenvalue cutoff separating "zero" eigenvalues
/// from numerical noise.
pub const LAMBDA_CUT_REL: f64 = 1e-10;
