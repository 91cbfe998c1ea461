//! Two-component principal-component projection of per-decision embeddings.
//!
//! Power iteration with deflation on the covariance matrix: only the top two
//! directions are needed, so a full eigendecomposition stays in the test
//! oracle.

use crate::autodiff::ParameterSet;
use crate::encgat::NetConfig;
use crate::error::{Error, Result};
use crate::sim::{EcrEnv, PortId};
use crate::train::{rollout, RolloutMode};

const POWER_TOL: f64 = 1e-9;
const POWER_MAX_ITERS: usize = 100_000;

/// One projected embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionRow {
    pub port: PortId,
    pub tick: u64,
    pub pc1: f64,
    pub pc2: f64,
}

/// Result of a top-2 principal component analysis.
#[derive(Debug, Clone)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    /// Unit-norm principal directions, ordered by explained variance.
    pub components: [Vec<f64>; 2],
    /// Eigenvalues of the covariance for the two directions.
    pub eigenvalues: [f64; 2],
    /// Per-row scores, n × 2.
    pub scores: Vec<[f64; 2]>,
}

fn mat_vec_sym(cov: &[f64], d: usize, v: &[f64], out: &mut [f64]) {
    for i in 0..d {
        let mut acc = 0.0;
        for j in 0..d {
            acc += cov[i * d + j] * v[j];
        }
        out[i] = acc;
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Leading eigenpair of a symmetric matrix by power iteration with a
/// deterministic start vector; converged when the eigen-residual
/// ‖Av − λv‖ falls under the tolerance.
fn leading_eigenpair(cov: &[f64], d: usize) -> (f64, Vec<f64>) {
    // deterministic, unlikely-to-be-orthogonal start
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + (i as f64) * 0.137).collect();
    normalize(&mut v);
    let mut w = vec![0.0; d];
    let mut eigenvalue = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        mat_vec_sym(cov, d, &v, &mut w);
        eigenvalue = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let residual: f64 = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| {
                let r = wi - eigenvalue * vi;
                r * r
            })
            .sum::<f64>()
            .sqrt();
        let norm = normalize(&mut w);
        if norm < 1e-300 {
            // matrix annihilates the iterate (deflated rank exhausted)
            return (0.0, v);
        }
        std::mem::swap(&mut v, &mut w);
        if residual <= POWER_TOL * eigenvalue.abs().max(1.0) {
            break;
        }
    }
    (eigenvalue, v)
}

/// Top-2 PCA of row vectors (n × d). Requires at least two rows and d ≥ 2.
pub fn pca_top2(rows: &[Vec<f64>]) -> Result<Pca2> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::contract(format!(
            "pca_top2 needs at least 2 rows, got {n}"
        )));
    }
    let d = rows[0].len();
    if d < 2 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::contract("pca_top2: rows must share a width >= 2"));
    }

    let mut mean = vec![0.0; d];
    for row in rows {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    // covariance (population normalisation)
    let mut cov = vec![0.0; d * d];
    for row in rows {
        for i in 0..d {
            let ci = row[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += ci * (row[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n as f64);

    let (l1, v1) = leading_eigenpair(&cov, d);
    // deflate: cov' = cov − λ v vᵀ
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (l2, v2) = leading_eigenpair(&deflated, d);

    let scores = rows
        .iter()
        .map(|row| {
            let mut s = [0.0; 2];
            for i in 0..d {
                let c = row[i] - mean[i];
                s[0] += c * v1[i];
                s[1] += c * v2[i];
            }
            s
        })
        .collect();

    Ok(Pca2 {
        mean,
        components: [v1, v2],
        eigenvalues: [l1, l2],
        scores,
    })
}

/// Sum of squared residuals after reconstructing rows from the top-2
/// subspace.
pub fn reconstruction_error(rows: &[Vec<f64>], pca: &Pca2) -> f64 {
    let d = pca.mean.len();
    let mut err = 0.0;
    for (row, score) in rows.iter().zip(&pca.scores) {
        for i in 0..d {
            let approx =
                pca.mean[i] + score[0] * pca.components[0][i] + score[1] * pca.components[1][i];
            let diff = row[i] - approx;
            err += diff * diff;
        }
    }
    err
}

/// Greedy-rollout embedding collection over one episode, projected to two
/// principal components.
pub fn export_embeddings(
    env: &mut EcrEnv,
    params: &ParameterSet,
    net: &NetConfig,
    decoder_only: bool,
    seed: u64,
) -> Result<Vec<ProjectionRow>> {
    let episode = rollout(
        env,
        params,
        net,
        decoder_only,
        1.0,
        seed,
        RolloutMode::Greedy,
        true,
    )?;
    let embeddings = episode.embeddings.expect("embedding collection enabled");
    if embeddings.len() < 2 {
        return Err(Error::contract(
            "export_embeddings: fewer than 2 embeddings collected",
        ));
    }
    let rows: Vec<Vec<f64>> = embeddings.iter().map(|e| e.embedding.clone()).collect();
    let pca = pca_top2(&rows)?;
    Ok(embeddings
        .iter()
        .zip(&pca.scores)
        .map(|(e, s)| ProjectionRow {
            port: e.port,
            tick: e.tick,
            pc1: s[0],
            pc2: s[1],
        })
        .collect())
}

pub fn projection_csv(rows: &[ProjectionRow]) -> String {
    let mut out = String::from("port,tick,pc1,pc2\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.port, r.tick, r.pc1, r.pc2));
    }
    out
}
