//! Joint binary classifier learning: alternating optimization of per-column
//! linear classifiers and the ternary code assignment.
//!
//! Objective: delta * sum of slacks + (lambda/2) * sum of squared weight
//! norms + xi * sum of |code entries|, subject to the coding-matrix
//! constraints (ternary entries, per-column balance within tau, at least one
//! positive and one negative class, distinct rows, tree property).
//!
//! Single-entry code moves are almost never feasible under the tree
//! property, so the search alternates classifier fits with whole-column
//! reassignment sweeps and restarts from a deterministic set of feasible
//! trees, keeping the best solution found. The objective trace is the
//! running best and therefore non-increasing.

use super::{random_tree_matrix, validate_matrix, CodingMatrix};
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Hyperparameters of the joint optimization.
#[derive(Debug, Clone)]
pub struct JclHyper {
    /// Mismatch (slack) loss weight.
    pub delta: f64,
    /// L2 regularization weight on the linear classifiers.
    pub lambda: f64,
    /// Code sparsity weight.
    pub xi: f64,
    /// Column balance tolerance.
    pub tolerance: i64,
    pub max_alternations: usize,
    /// Stop when an alternation improves the objective by less than this.
    pub convergence_tol: f64,
}

impl Default for JclHyper {
    fn default() -> Self {
        JclHyper {
            delta: 1.0,
            lambda: 0.01,
            xi: 0.001,
            tolerance: 1,
            max_alternations: 20,
            convergence_tol: 1e-9,
        }
    }
}

impl JclHyper {
    fn validate(&self) -> Result<()> {
        for (name, v) in [("delta", self.delta), ("lambda", self.lambda), ("xi", self.xi)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Contract(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.tolerance < 0 {
            return Err(Error::Contract("tolerance must be >= 0".into()));
        }
        if self.max_alternations < 1 {
            return Err(Error::Contract("max_alternations must be >= 1".into()));
        }
        Ok(())
    }
}

/// One column's linear decision function in the original feature space.
#[derive(Debug, Clone)]
pub struct LinearFit {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LinearFit {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(&w, &v)| w * v).sum::<f64>() + self.b
    }
}

/// Result of `jcl_optimize`.
#[derive(Debug, Clone)]
pub struct JclSolution {
    /// Per-column weight vectors (original feature space).
    pub weights: Vec<Vec<f64>>,
    /// Per-column biases.
    pub biases: Vec<f64>,
    /// Per-column slack per sample; 0 for non-participating samples.
    pub slacks: Vec<Vec<f64>>,
    pub codes: CodingMatrix,
    /// Running best objective after each alternation (non-increasing).
    pub objective_trace: Vec<f64>,
}

impl JclSolution {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is never empty")
    }
}

// ── Feature standardization ──────────────────────────────────────────

struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    fn fit(xs: &[Vec<f64>]) -> Standardizer {
        let d = xs[0].len();
        let n = xs.len() as f64;
        let mut mean = vec![0.0; d];
        for x in xs {
            for (m, &v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut std = vec![0.0; d];
        for x in xs {
            for i in 0..d {
                let dv = x[i] - mean[i];
                std[i] += dv * dv;
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        Standardizer { mean, std }
    }

    fn apply(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        xs.iter()
            .map(|x| {
                x.iter()
                    .enumerate()
                    .map(|(i, &v)| (v - self.mean[i]) / self.std[i])
                    .collect()
            })
            .collect()
    }

    /// Map a standardized-space fit back to the original feature space
    /// (margins are preserved).
    fn unmap(&self, fit: &LinearFit) -> LinearFit {
        let w: Vec<f64> = fit.w.iter().zip(&self.std).map(|(&w, &s)| w / s).collect();
        let shift: f64 = fit
            .w
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((&w, &m), &s)| w * m / s)
            .sum();
        LinearFit {
            w,
            b: fit.b - shift,
        }
    }
}

// ── Hinge fit ────────────────────────────────────────────────────────

/// Deterministic full-batch subgradient descent on
/// delta * sum hinge + (lambda/2) ||w||^2, with a geometric step ladder and
/// best-iterate tracking. Convex, so the ladder converges to the optimum to
/// roughly the final step size.
pub fn fit_linear_hinge(xs: &[Vec<f64>], ys: &[f64], delta: f64, lambda: f64) -> LinearFit {
    let n = xs.len();
    let d = xs[0].len();
    let mut w = vec![0.0f64; d];
    let mut b = 0.0f64;
    let objective = |w: &[f64], b: f64| -> f64 {
        let mut hinge = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let margin = y * (x.iter().zip(w).map(|(&xi, &wi)| xi * wi).sum::<f64>() + b);
            hinge += (1.0 - margin).max(0.0);
        }
        delta * hinge + 0.5 * lambda * w.iter().map(|&v| v * v).sum::<f64>()
    };
    let mut best_w = w.clone();
    let mut best_b = b;
    let mut best_obj = objective(&w, b);
    if delta == 0.0 {
        // Pure regularizer: w = 0 is the optimum.
        return LinearFit { w: best_w, b: best_b };
    }
    let eta0 = 1.0 / (1.0 + delta * n as f64);
    const STAGES: usize = 26;
    const ITERS: usize = 250;
    for stage in 0..STAGES {
        let eta = eta0 * 0.5f64.powi(stage as i32);
        w.copy_from_slice(&best_w);
        b = best_b;
        for _ in 0..ITERS {
            let mut gw = vec![0.0f64; d];
            let mut gb = 0.0f64;
            for (x, &y) in xs.iter().zip(ys) {
                let margin = y * (x.iter().zip(&w).map(|(&xi, &wi)| xi * wi).sum::<f64>() + b);
                if margin < 1.0 {
                    for (g, &xi) in gw.iter_mut().zip(x) {
                        *g -= delta * y * xi;
                    }
                    gb -= delta * y;
                }
            }
            for (g, &wi) in gw.iter_mut().zip(&w) {
                *g += lambda * wi;
            }
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= eta * g;
            }
            b -= eta * gb;
            let obj = objective(&w, b);
            if obj < best_obj {
                best_obj = obj;
                best_w.copy_from_slice(&w);
                best_b = b;
            }
        }
    }
    LinearFit { w: best_w, b: best_b }
}

// ── The alternating solver ───────────────────────────────────────────

struct Problem<'a> {
    xs_std: Vec<Vec<f64>>,
    labels: &'a [usize],
    hyper: &'a JclHyper,
}

impl Problem<'_> {
    /// Fit (or recall) the classifier for a column code vector.
    fn fit_column(&self, cache: &mut HashMap<Vec<i8>, LinearFit>, column: &[i8]) -> LinearFit {
        if let Some(f) = cache.get(column) {
            return f.clone();
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (x, &lbl) in self.xs_std.iter().zip(self.labels) {
            let code = column[lbl];
            if code != 0 {
                xs.push(x.clone());
                ys.push(code as f64);
            }
        }
        let fit = if xs.is_empty() {
            LinearFit {
                w: vec![0.0; self.xs_std[0].len()],
                b: 0.0,
            }
        } else {
            fit_linear_hinge(&xs, &ys, self.hyper.delta, self.hyper.lambda)
        };
        cache.insert(column.to_vec(), fit.clone());
        fit
    }

    /// Slack term of one column under a fit.
    fn column_hinge(&self, column: &[i8], fit: &LinearFit) -> f64 {
        let mut hinge = 0.0;
        for (x, &lbl) in self.xs_std.iter().zip(self.labels) {
            let code = column[lbl];
            if code != 0 {
                let margin = code as f64 * fit.decision(x);
                hinge += (1.0 - margin).max(0.0);
            }
        }
        hinge
    }

    /// Full objective for a code with refit classifiers.
    fn objective(&self, cache: &mut HashMap<Vec<i8>, LinearFit>, z: &CodingMatrix) -> (f64, Vec<LinearFit>) {
        let mut total = 0.0;
        let mut fits = Vec::with_capacity(z.columns());
        for col in 0..z.columns() {
            let column: Vec<i8> = (0..z.classes()).map(|c| z.rows()[c][col]).collect();
            let fit = self.fit_column(cache, &column);
            total += self.hyper.delta * self.column_hinge(&column, &fit);
            total += 0.5 * self.hyper.lambda * fit.w.iter().map(|&v| v * v).sum::<f64>();
            total += self.hyper.xi * column.iter().map(|&v| v.abs() as f64).sum::<f64>();
            fits.push(fit);
        }
        (total, fits)
    }
}

/// All ternary column vectors over `c` classes (3^c of them).
fn all_columns(c: usize) -> Vec<Vec<i8>> {
    let mut out = Vec::with_capacity(3usize.pow(c as u32));
    let mut cur = vec![-1i8; c];
    loop {
        out.push(cur.clone());
        let mut i = 0;
        loop {
            if i == c {
                return out;
            }
            if cur[i] < 1 {
                cur[i] += 1;
                break;
            }
            cur[i] = -1;
            i += 1;
        }
    }
}

fn replace_column(z: &CodingMatrix, col: usize, v: &[i8]) -> CodingMatrix {
    let mut entries = z.rows().to_vec();
    for (row, &val) in entries.iter_mut().zip(v) {
        row[col] = val;
    }
    CodingMatrix::new(entries, z.class_names.clone(), z.tolerance).expect("same geometry")
}

/// Deterministic set of feasible starting codes: chain rotations, the
/// balanced tree, and a few seeded random trees.
fn starting_codes(class_names: &[String], tolerance: i64) -> Result<Vec<CodingMatrix>> {
    let c = class_names.len();
    let mut starts: Vec<CodingMatrix> = Vec::new();
    let mut push = |m: CodingMatrix, starts: &mut Vec<CodingMatrix>| {
        if validate_matrix(&m).is_ok() && !starts.iter().any(|s| s.rows() == m.rows()) {
            starts.push(m);
        }
    };
    for r in 0..c {
        let rotated: Vec<String> = (0..c).map(|i| class_names[(i + r) % c].clone()).collect();
        if let Ok(m) = CodingMatrix::chain(&rotated, tolerance) {
            // Re-express with rows in the original class order.
            let mut entries = vec![vec![0i8; c - 1]; c];
            for (i, row) in m.rows().iter().enumerate() {
                entries[(i + r) % c] = row.clone();
            }
            if let Ok(m) = CodingMatrix::new(entries, class_names.to_vec(), tolerance) {
                push(m, &mut starts);
            }
        }
    }
    match CodingMatrix::balanced(class_names, tolerance) {
        Ok(m) => push(m, &mut starts),
        Err(e) => {
            if starts.is_empty() {
                return Err(e);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x4a_43_4c); // fixed: solver takes no seed
    for _ in 0..8 {
        if let Ok(m) = random_tree_matrix(class_names, tolerance, &mut rng) {
            push(m, &mut starts);
        }
    }
    if starts.is_empty() {
        return Err(Error::Infeasible {
            column: 0,
            reason: format!("no feasible tree code for {c} classes at tolerance {tolerance}"),
        });
    }
    Ok(starts)
}

/// Alternating minimization of Eq-2-style joint code / classifier learning.
///
/// `features` are the per-sample vectors (one length), `labels` the class
/// indices. Returns the best code found, its per-column classifiers, slacks,
/// and the non-increasing objective trace.
pub fn jcl_optimize(
    features: &[Vec<f64>],
    labels: &[usize],
    class_names: &[String],
    hyper: &JclHyper,
) -> Result<JclSolution> {
    hyper.validate()?;
    let c = class_names.len();
    if c < 2 {
        return Err(Error::Contract("jcl_optimize needs at least 2 classes".into()));
    }
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::Contract("features and labels must be nonempty and aligned".into()));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Contract("feature vectors must share one length".into()));
    }
    for cls in 0..c {
        if !labels.iter().any(|&l| l == cls) {
            return Err(Error::Contract(format!("class {cls} has no samples")));
        }
    }
    if labels.iter().any(|&l| l >= c) {
        return Err(Error::Contract("label out of range".into()));
    }

    let standardizer = Standardizer::fit(features);
    let problem = Problem {
        xs_std: standardizer.apply(features),
        labels,
        hyper,
    };
    let mut cache: HashMap<Vec<i8>, LinearFit> = HashMap::new();
    let candidates = all_columns(c);

    let starts = starting_codes(class_names, hyper.tolerance)?;
    let mut best: Option<(f64, CodingMatrix, Vec<LinearFit>)> = None;
    let mut trace = Vec::new();

    for start in starts {
        let mut code = start;
        let (mut obj, mut fits) = problem.objective(&mut cache, &code);
        record_best(&mut best, &mut trace, obj, &code, &fits);

        for _ in 0..hyper.max_alternations {
            // (b) classifiers fixed: sweep columns left to right, replacing
            // each column with the best feasible column vector under the
            // current fits; ties go to the incumbent.
            let mut candidate = code.clone();
            let mut changed = false;
            for col in 0..candidate.columns() {
                let incumbent: Vec<i8> = (0..c).map(|cl| candidate.rows()[cl][col]).collect();
                let fit = &fits[col];
                let score = |v: &[i8]| {
                    hyper.delta * problem.column_hinge(v, fit)
                        + hyper.xi * v.iter().map(|&e| e.abs() as f64).sum::<f64>()
                };
                let mut best_v = incumbent.clone();
                let mut best_score = score(&incumbent);
                for v in &candidates {
                    if *v == incumbent {
                        continue;
                    }
                    let trial = replace_column(&candidate, col, v);
                    if validate_matrix(&trial).is_err() {
                        continue;
                    }
                    let s = score(v);
                    if s < best_score - 1e-12 {
                        best_score = s;
                        best_v = v.clone();
                    }
                }
                if best_v != incumbent {
                    candidate = replace_column(&candidate, col, &best_v);
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            // (a) codes fixed: refit and accept only a true improvement.
            let (new_obj, new_fits) = problem.objective(&mut cache, &candidate);
            if new_obj < obj - hyper.convergence_tol {
                code = candidate;
                obj = new_obj;
                fits = new_fits;
                record_best(&mut best, &mut trace, obj, &code, &fits);
            } else {
                break;
            }
        }
    }

    let (best_obj, best_code, best_fits) = best.expect("at least one start was evaluated");
    let l = best_code.columns();
    let mut weights = Vec::with_capacity(l);
    let mut biases = Vec::with_capacity(l);
    let mut slacks = Vec::with_capacity(l);
    for (col, fit) in best_fits.iter().enumerate() {
        let mapped = standardizer.unmap(fit);
        let mut col_slacks = Vec::with_capacity(features.len());
        for (x_std, &lbl) in problem.xs_std.iter().zip(labels) {
            let code = best_code.rows()[lbl][col];
            if code == 0 {
                col_slacks.push(0.0);
            } else {
                let margin = code as f64 * fit.decision(x_std);
                col_slacks.push((1.0 - margin).max(0.0));
            }
        }
        weights.push(mapped.w);
        biases.push(mapped.b);
        slacks.push(col_slacks);
    }
    debug_assert!(validate_matrix(&best_code).is_ok());
    let _ = best_obj;
    Ok(JclSolution {
        weights,
        biases,
        slacks,
        codes: best_code,
        objective_trace: trace,
    })
}

fn record_best(
    best: &mut Option<(f64, CodingMatrix, Vec<LinearFit>)>,
    trace: &mut Vec<f64>,
    obj: f64,
    code: &CodingMatrix,
    fits: &[LinearFit],
) {
    let improved = match best {
        Some((b, _, _)) => obj < *b,
        None => true,
    };
    if improved {
        *best = Some((obj, code.clone(), fits.to_vec()));
    }
    let running = best.as_ref().map(|(b, _, _)| *b).unwrap();
    trace.push(running);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("class{i}")).collect()
    }

    #[test]
    fn separable_two_class_gets_clean_margins() {
        let features = vec![vec![-2.0], vec![-3.0], vec![2.0], vec![3.0]];
        let labels = vec![0, 0, 1, 1];
        let hyper = JclHyper::default();
        let sol = jcl_optimize(&features, &labels, &names(2), &hyper).unwrap();
        assert_eq!(sol.codes.columns(), 1);
        // Codes are {+1, -1} up to global sign.
        let col: Vec<i8> = (0..2).map(|c| sol.codes.rows()[c][0]).collect();
        assert!(col == vec![1, -1] || col == vec![-1, 1]);
        // Margins >= 1 - slack with essentially zero slack.
        for &s in &sol.slacks[0] {
            assert!(s <= 1e-6, "slack {s} not ~0");
        }
        for (x, &lbl) in features.iter().zip(&labels) {
            let code = sol.codes.rows()[lbl][0] as f64;
            let margin = code * (sol.weights[0][0] * x[0] + sol.biases[0]);
            assert!(margin >= 1.0 - 1e-6);
        }
    }

    #[test]
    fn delta_zero_returns_feasible_code() {
        let features = vec![vec![0.0], vec![1.0], vec![2.0]];
        let labels = vec![0, 1, 2];
        let hyper = JclHyper {
            delta: 0.0,
            ..Default::default()
        };
        let sol = jcl_optimize(&features, &labels, &names(3), &hyper).unwrap();
        assert!(validate_matrix(&sol.codes).is_ok());
        // Objective reduces to the regularizer terms; weights are zero.
        assert!(sol.weights.iter().all(|w| w.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn objective_trace_is_non_increasing() {
        let features = vec![
            vec![0.0, 0.0],
            vec![0.3, -0.1],
            vec![5.0, 0.2],
            vec![5.2, -0.3],
            vec![2.4, 4.0],
            vec![2.6, 4.4],
        ];
        let labels = vec![0, 0, 1, 1, 2, 2];
        let sol = jcl_optimize(&features, &labels, &names(3), &JclHyper::default()).unwrap();
        for pair in sol.objective_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
        assert!(validate_matrix(&sol.codes).is_ok());
    }

    #[test]
    fn slack_complementarity_by_construction() {
        let features = vec![vec![-1.5], vec![1.5], vec![4.0]];
        let labels = vec![0, 1, 2];
        let sol = jcl_optimize(&features, &labels, &names(3), &JclHyper::default()).unwrap();
        for (col, slacks) in sol.slacks.iter().enumerate() {
            for (n, &s) in slacks.iter().enumerate() {
                let code = sol.codes.rows()[labels[n]][col];
                if code != 0 {
                    let margin = code as f64
                        * (sol.weights[col].iter().zip(&features[n]).map(|(&w, &x)| w * x).sum::<f64>()
                            + sol.biases[col]);
                    if margin >= 1.0 {
                        assert!(s.abs() <= 1e-9);
                    }
                    assert!(margin >= 1.0 - s - 1e-9);
                }
                assert!(s >= 0.0);
            }
        }
    }

    #[test]
    fn scale_invariant_argmin_when_unregularized() {
        let features = vec![
            vec![0.1, 0.0],
            vec![-0.2, 0.3],
            vec![3.0, 0.1],
            vec![3.3, -0.2],
            vec![1.5, 2.8],
            vec![1.7, 2.5],
        ];
        let labels = vec![0, 0, 1, 1, 2, 2];
        let hyper = JclHyper {
            lambda: 0.0,
            xi: 0.0,
            ..Default::default()
        };
        let sol1 = jcl_optimize(&features, &labels, &names(3), &hyper).unwrap();
        let scaled: Vec<Vec<f64>> = features
            .iter()
            .map(|x| x.iter().map(|&v| v * 37.5).collect())
            .collect();
        let sol2 = jcl_optimize(&scaled, &labels, &names(3), &hyper).unwrap();
        assert_eq!(sol1.codes.rows(), sol2.codes.rows());
    }

    #[test]
    fn infeasible_constraints_name_the_column() {
        let features = vec![vec![0.0], vec![1.0], vec![2.0]];
        let labels = vec![0, 1, 2];
        let hyper = JclHyper {
            tolerance: 0,
            ..Default::default()
        };
        match jcl_optimize(&features, &labels, &names(3), &hyper) {
            Err(Error::Infeasible { column, .. }) => assert_eq!(column, 0),
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }
}
