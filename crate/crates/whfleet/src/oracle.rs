//! Ground-truth solver on tiny finite instances.
//!
//! A finite instance enumerates the whole trajectory space as a table: the
//! nominal and sampling laws are explicit probability vectors, constraints
//! and transport costs are dense tables, and points are partitioned into
//! initial-state blocks (couplings may only place mass inside a block).
//! On such an instance everything can be computed exactly:
//!
//! * the dual value and its gradient (the reweighted constraint moments) by
//!   direct summation,
//! * the primal optimum by cyclic Bregman projections with Dykstra
//!   corrections, since the objective is a KL projection of the
//!   cost-tilted product measure onto "first marginal fixed" intersected
//!   with the moment half-spaces,
//! * importance-sampling weights and estimator variances for any explicit
//!   target/sampling pair.
//!
//! Everything here is dense and deliberately slow-but-obvious; it exists to
//! check the production solver, not to replace it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cap on the trajectory-space size; the oracle is dense everywhere.
pub const MAX_POINTS: usize = 256;

/// An enumerated transport instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteInstance {
    /// Initial-state block label per point.
    pub blocks: Vec<u32>,
    /// Nominal law.
    pub mu1: Vec<f64>,
    /// Sampling law.
    pub mu2: Vec<f64>,
    /// Constraint table, `f[point][row]`.
    pub f: Vec<Vec<f64>>,
    /// Transport cost table, `c[x][y]`, only read inside blocks.
    pub c: Vec<Vec<f64>>,
    /// Regularization weight.
    pub epsilon: f64,
}

impl FiniteInstance {
    pub fn points(&self) -> usize {
        self.mu1.len()
    }

    pub fn rows(&self) -> usize {
        self.f.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.points();
        if n == 0 || n > MAX_POINTS {
            return Err(Error::config(format!(
                "instance: need 1..={MAX_POINTS} points, got {n}"
            )));
        }
        if self.blocks.len() != n || self.mu2.len() != n || self.f.len() != n || self.c.len() != n
        {
            return Err(Error::config("instance: table sizes disagree"));
        }
        let rows = self.rows();
        if self.f.iter().any(|r| r.len() != rows) {
            return Err(Error::config("instance: ragged constraint table"));
        }
        if self.c.iter().any(|r| r.len() != n) {
            return Err(Error::config("instance: cost table must be square"));
        }
        for probs in [&self.mu1, &self.mu2] {
            if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::config("instance: probabilities must be >= 0"));
            }
            let total: f64 = probs.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!(
                    "instance: probabilities sum to {total}, expected 1"
                )));
            }
        }
        for x in 0..n {
            if self.c[x][x] != 0.0 {
                return Err(Error::config("instance: cost diagonal must be zero"));
            }
            for y in 0..n {
                if self.blocks[x] == self.blocks[y] && !(self.c[x][y] >= 0.0) {
                    return Err(Error::config("instance: costs must be >= 0"));
                }
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("instance: epsilon must be > 0"));
        }
        // Every block carrying nominal mass must be reachable under the
        // sampling law, otherwise the dual value is infinite.
        for x in 0..n {
            if self.mu1[x] > 0.0 {
                let b = self.blocks[x];
                let mass: f64 = (0..n)
                    .filter(|&y| self.blocks[y] == b)
                    .map(|y| self.mu2[y])
                    .sum();
                if mass <= 0.0 {
                    return Err(Error::config(format!(
                        "instance: block {b} has nominal mass but no sampling mass"
                    )));
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn ell0(&self, lambda: &[f64], x: usize, y: usize) -> f64 {
        let dot: f64 = self.f[y].iter().zip(lambda).map(|(v, l)| v * l).sum();
        -dot - self.c[x][y]
    }

    /// Log-partition value at one conditioning point:
    /// `eps * log sum_{y in block(x)} mu2(y) exp(ell0(x, y) / eps)`.
    pub fn log_b(&self, lambda: &[f64], x: usize) -> f64 {
        let b = self.blocks[x];
        let mut max_term = f64::NEG_INFINITY;
        let mut terms = Vec::new();
        for y in 0..self.points() {
            if self.blocks[y] != b || self.mu2[y] <= 0.0 {
                continue;
            }
            let t = self.mu2[y].ln() + self.ell0(lambda, x, y) / self.epsilon;
            max_term = max_term.max(t);
            terms.push(t);
        }
        let sum: f64 = terms.iter().map(|t| (t - max_term).exp()).sum();
        self.epsilon * (max_term + sum.ln())
    }

    /// Exact dual value `-<mu1, B_lambda>` (concave in `lambda`; the dual
    /// problem maximizes it over `lambda >= 0`).
    pub fn exact_dual_value(&self, lambda: &[f64]) -> f64 {
        let mut value = 0.0;
        for x in 0..self.points() {
            if self.mu1[x] > 0.0 {
                value -= self.mu1[x] * self.log_b(lambda, x);
            }
        }
        value
    }

    /// Reweighted candidate law `mu^lambda` (the second marginal of the dual
    /// maximizer).
    pub fn mu_lambda(&self, lambda: &[f64]) -> Vec<f64> {
        let n = self.points();
        let mut out = vec![0.0; n];
        for x in 0..n {
            if self.mu1[x] <= 0.0 {
                continue;
            }
            let log_b = self.log_b(lambda, x);
            for y in 0..n {
                if self.blocks[y] != self.blocks[x] || self.mu2[y] <= 0.0 {
                    continue;
                }
                let log_p =
                    self.mu2[y].ln() + (self.ell0(lambda, x, y) - log_b) / self.epsilon;
                out[y] += self.mu1[x] * log_p.exp();
            }
        }
        out
    }

    /// Exact constraint moments `<mu^lambda, f>`, the gradient of
    /// [`Self::exact_dual_value`] in `lambda`.
    pub fn exact_moment(&self, lambda: &[f64]) -> Vec<f64> {
        let mu = self.mu_lambda(lambda);
        let mut moment = vec![0.0; self.rows()];
        for (y, &m) in mu.iter().enumerate() {
            for (slot, v) in moment.iter_mut().zip(&self.f[y]) {
                *slot += m * v;
            }
        }
        moment
    }

    /// Exact conditional covariance of `f` under the dual maximizer,
    /// averaged over the conditioning law (the Hessian diagnostic's target).
    pub fn exact_conditional_covariance(&self, lambda: &[f64]) -> Vec<Vec<f64>> {
        let n = self.points();
        let rows = self.rows();
        let mut h = vec![vec![0.0; rows]; rows];
        for x in 0..n {
            if self.mu1[x] <= 0.0 {
                continue;
            }
            let log_b = self.log_b(lambda, x);
            let mut mean = vec![0.0; rows];
            let mut second = vec![vec![0.0; rows]; rows];
            for y in 0..n {
                if self.blocks[y] != self.blocks[x] || self.mu2[y] <= 0.0 {
                    continue;
                }
                let p = (self.mu2[y].ln()
                    + (self.ell0(lambda, x, y) - log_b) / self.epsilon)
                    .exp();
                for i in 0..rows {
                    mean[i] += p * self.f[y][i];
                    for j in 0..rows {
                        second[i][j] += p * self.f[y][i] * self.f[y][j];
                    }
                }
            }
            for i in 0..rows {
                for j in 0..rows {
                    h[i][j] += self.mu1[x] * (second[i][j] - mean[i] * mean[j]);
                }
            }
        }
        h
    }

    /// Importance weights for a fixed target law under this instance's
    /// sampling law: `w(y) = target(y) / mu2(y)`.
    pub fn importance_weights(&self, target: &[f64]) -> Result<Vec<f64>> {
        if target.len() != self.points() {
            return Err(Error::config("importance_weights: length mismatch"));
        }
        target
            .iter()
            .zip(&self.mu2)
            .map(|(&t, &q)| {
                if t > 0.0 && q <= 0.0 {
                    Err(Error::config(
                        "importance_weights: target puts mass where the sampling law has none",
                    ))
                } else if q <= 0.0 {
                    Ok(0.0)
                } else {
                    Ok(t / q)
                }
            })
            .collect()
    }

    /// Variance of the single-draw importance estimator `w(Y) f(Y)` with
    /// exact weights, for a scalar `f` given as one constraint column.
    /// Returned in the two algebraic arrangements used by tests: enumerated
    /// directly, and via the closed-form second-moment expression.
    pub fn estimator_variance_scalar(&self, target: &[f64], row: usize) -> Result<(f64, f64)> {
        let w = self.importance_weights(target)?;
        let mean: f64 = (0..self.points())
            .map(|y| target[y] * self.f[y][row])
            .sum();
        // Direct enumeration of Var[w f] under mu2.
        let direct: f64 = (0..self.points())
            .map(|y| self.mu2[y] * (w[y] * self.f[y][row] - mean).powi(2))
            .sum();
        // Closed form: integral of f^2 w against the target, minus mean^2.
        let closed: f64 = (0..self.points())
            .map(|y| self.f[y][row] * self.f[y][row] * w[y] * target[y])
            .sum::<f64>()
            - mean * mean;
        Ok((direct, closed))
    }
}

/// Primal optimum of a finite instance.
#[derive(Debug, Clone)]
pub struct PrimalSolution {
    /// Optimal coupling, dense row-major.
    pub plan: Vec<Vec<f64>>,
    /// Optimal objective value.
    pub value: f64,
    /// Multipliers recovered from the accumulated half-space tilts.
    pub lambda: Vec<f64>,
    /// Certified duality gap `value - dual(lambda)`.
    pub gap: f64,
    pub cycles: usize,
}

/// Solver tolerances for [`solve_primal`].
#[derive(Debug, Clone, Copy)]
pub struct PrimalOptions {
    pub max_cycles: usize,
    pub gap_tolerance: f64,
}

impl Default for PrimalOptions {
    fn default() -> Self {
        PrimalOptions {
            max_cycles: 200_000,
            gap_tolerance: 1e-9,
        }
    }
}

/// Minimize `<pi, c> + eps KL(pi | mu1 x mu2)` over couplings with first
/// marginal `mu1`, block-diagonal support, and second-marginal moments
/// `<pi_2, f_a> <= 0` for every row.
///
/// The optimum is the KL projection of `Q = (mu1 x mu2) e^{-c/eps}`
/// restricted to the blocks onto the intersection of the marginal
/// constraint (an affine set: projection is row rescaling) and the moment
/// half-spaces (projection is an exponential tilt `e^{-beta f_a}` with
/// `beta` solved by one-dimensional root finding). Cycling through the sets
/// with Dykstra corrections on the half-spaces converges to the projection;
/// the accumulated tilts are the dual multipliers up to the factor `eps`,
/// which yields a computable duality-gap certificate.
pub fn solve_primal(inst: &FiniteInstance, options: PrimalOptions) -> Result<PrimalSolution> {
    inst.validate()?;
    let n = inst.points();
    let rows = inst.rows();

    // Necessary per-row feasibility: the best reachable moment keeps each
    // block's nominal mass on its most favorable point.
    for a in 0..rows {
        let mut best = 0.0;
        for x in 0..n {
            if inst.mu1[x] <= 0.0 {
                continue;
            }
            let b = inst.blocks[x];
            let min_f = (0..n)
                .filter(|&y| inst.blocks[y] == b && inst.mu2[y] > 0.0)
                .map(|y| inst.f[y][a])
                .fold(f64::INFINITY, f64::min);
            best += inst.mu1[x] * min_f;
        }
        if best > 1e-12 {
            return Err(Error::Infeasible(format!(
                "row {a}: best reachable moment {best} is positive"
            )));
        }
    }

    // Root measure Q, zero off-block.
    let mut pi = vec![vec![0.0; n]; n];
    for x in 0..n {
        for y in 0..n {
            if inst.blocks[x] == inst.blocks[y] {
                pi[x][y] = inst.mu1[x] * inst.mu2[y] * (-inst.c[x][y] / inst.epsilon).exp();
            }
        }
    }

    let mut beta = vec![0.0; rows];
    let mut cycles = 0;
    let mut best: Option<PrimalSolution> = None;

    while cycles < options.max_cycles {
        cycles += 1;

        // KL projection onto { pi_1 = mu1 }: rescale rows.
        for x in 0..n {
            let total: f64 = pi[x].iter().sum();
            if total > 0.0 {
                let scale = inst.mu1[x] / total;
                for v in &mut pi[x] {
                    *v *= scale;
                }
            } else if inst.mu1[x] > 0.0 {
                return Err(Error::Infeasible(format!(
                    "conditioning point {x} lost all candidate mass"
                )));
            }
        }

        // Dykstra pass over the moment half-spaces: undo the stored tilt,
        // then re-project.
        for a in 0..rows {
            if beta[a] != 0.0 {
                apply_tilt(&mut pi, inst, a, beta[a]);
            }
            let mut col = vec![0.0; n];
            for row in &pi {
                for (slot, v) in col.iter_mut().zip(row) {
                    *slot += v;
                }
            }
            let moment: f64 = col.iter().enumerate().map(|(y, &m)| m * inst.f[y][a]).sum();
            let new_beta = if moment <= 0.0 {
                0.0
            } else {
                solve_tilt(&col, inst, a)?
            };
            if new_beta != 0.0 {
                apply_tilt(&mut pi, inst, a, -new_beta);
            }
            beta[a] = new_beta;
        }

        if cycles % 5 == 0 || cycles == options.max_cycles {
            let candidate = certify(inst, &pi, &beta, cycles);
            let better = match &best {
                Some(b) => candidate.gap.abs() < b.gap.abs(),
                None => true,
            };
            if better {
                best = Some(candidate);
            }
            if let Some(b) = &best {
                if b.gap.abs() <= options.gap_tolerance * (1.0 + b.value.abs()) {
                    return Ok(best.unwrap());
                }
            }
        }
    }

    match best {
        Some(b) => Err(Error::Infeasible(format!(
            "projection cycles exhausted after {cycles} cycles with duality gap {:.3e}; \
             the instance is infeasible or nearly so",
            b.gap
        ))),
        None => Err(Error::Infeasible("projection made no progress".into())),
    }
}

fn apply_tilt(pi: &mut [Vec<f64>], inst: &FiniteInstance, a: usize, sign_beta: f64) {
    let n = inst.points();
    for x in 0..n {
        let b = inst.blocks[x];
        for y in 0..n {
            if inst.blocks[y] == b {
                pi[x][y] *= (sign_beta * inst.f[y][a]).exp();
            }
        }
    }
}

/// Solve `sum_y col[y] e^{-beta f_a} f_a = 0` for `beta > 0` (the half-space
/// projection tilt). The left side is strictly decreasing in `beta`.
fn solve_tilt(col: &[f64], inst: &FiniteInstance, a: usize) -> Result<f64> {
    let h = |beta: f64| -> f64 {
        col.iter()
            .enumerate()
            .map(|(y, &m)| m * (-beta * inst.f[y][a]).exp() * inst.f[y][a])
            .sum()
    };
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut doublings = 0;
    while h(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > 200 {
            return Err(Error::Infeasible(format!(
                "row {a}: no tilt can satisfy the constraint (reachable mass lies where f > 0)"
            )));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if h(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-16 * (1.0 + hi) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn certify(inst: &FiniteInstance, pi: &[Vec<f64>], beta: &[f64], cycles: usize) -> PrimalSolution {
    let n = inst.points();
    // Final row rescaling so the returned plan meets the marginal
    // constraint exactly; the gap is certified on the rescaled plan.
    let mut plan = pi.to_vec();
    for (x, row) in plan.iter_mut().enumerate() {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            let scale = inst.mu1[x] / total;
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
    }
    let mut value = 0.0;
    for x in 0..n {
        for y in 0..n {
            let p = plan[x][y];
            if p > 0.0 {
                let reference = inst.mu1[x] * inst.mu2[y];
                value += p * inst.c[x][y] + inst.epsilon * p * (p / reference).ln();
            }
        }
    }
    let lambda: Vec<f64> = beta.iter().map(|b| b * inst.epsilon).collect();
    let dual = inst.exact_dual_value(&lambda);
    PrimalSolution {
        plan,
        value,
        lambda,
        gap: value - dual,
        cycles,
    }
}

/// Random feasible instance for randomized oracle tests.
///
/// Thresholds are set so that a designated reachable law satisfies every
/// row with a strict margin, which keeps the instance feasible while
/// leaving some rows nearly active.
pub fn random_instance<R: Rng>(
    rng: &mut R,
    max_points: usize,
    max_rows: usize,
    epsilon: f64,
) -> FiniteInstance {
    let n = rng.random_range(4..=max_points.max(4));
    let rows = rng.random_range(1..=max_rows.max(1));
    let n_blocks = rng.random_range(1..=3.min(n / 2));
    let mut blocks: Vec<u32> = (0..n).map(|i| (i % n_blocks) as u32).collect();
    for b in blocks.iter_mut() {
        if rng.random_bool(0.3) {
            *b = rng.random_range(0..n_blocks) as u32;
        }
    }
    // Ensure every block label occurs.
    for b in 0..n_blocks {
        blocks[b] = b as u32;
    }

    let mut draw_simplex = |floor: f64| -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(floor..1.0)).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    };
    let mu1 = draw_simplex(0.05);
    let mu2 = draw_simplex(0.05);

    let mut c = vec![vec![0.0; n]; n];
    for x in 0..n {
        for y in 0..n {
            if x != y {
                c[x][y] = rng.random_range(0.0..2.0);
            }
        }
    }

    // Raw scores, then thresholds with a margin reached by the reference
    // law nu0(y) = mu1(block) * mu2(y | block).
    let mut block_mass = vec![0.0; n_blocks];
    for y in 0..n {
        block_mass[blocks[y] as usize] += mu2[y];
    }
    let mut mu1_block = vec![0.0; n_blocks];
    for x in 0..n {
        mu1_block[blocks[x] as usize] += mu1[x];
    }
    let nu0: Vec<f64> = (0..n)
        .map(|y| {
            let b = blocks[y] as usize;
            mu1_block[b] * mu2[y] / block_mass[b]
        })
        .collect();
    let mut f = vec![vec![0.0; rows]; n];
    for a in 0..rows {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let reference: f64 = (0..n).map(|y| nu0[y] * raw[y]).sum();
        let margin = rng.random_range(0.02..0.4);
        for y in 0..n {
            f[y][a] = raw[y] - reference - margin;
        }
    }

    let inst = FiniteInstance {
        blocks,
        mu1,
        mu2,
        f,
        c,
        epsilon,
    };
    inst.validate().expect("generated instance must be valid");
    inst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Hand-built 6-point instance with two blocks and one constraint row.
    fn small_instance(epsilon: f64) -> FiniteInstance {
        FiniteInstance {
            blocks: vec![0, 0, 0, 1, 1, 1],
            mu1: vec![0.2, 0.15, 0.15, 0.2, 0.2, 0.1],
            mu2: vec![0.1, 0.25, 0.15, 0.2, 0.1, 0.2],
            f: vec![
                vec![0.6],
                vec![-0.4],
                vec![0.1],
                vec![0.5],
                vec![-0.6],
                vec![-0.1],
            ],
            c: vec![
                vec![0.0, 1.0, 0.7, 0.0, 0.0, 0.0],
                vec![0.3, 0.0, 0.9, 0.0, 0.0, 0.0],
                vec![0.8, 0.2, 0.0, 0.0, 0.0, 0.0],
                vec![0.0, 0.0, 0.0, 0.0, 0.5, 1.2],
                vec![0.0, 0.0, 0.0, 0.6, 0.0, 0.4],
                vec![0.0, 0.0, 0.0, 1.1, 0.3, 0.0],
            ],
            epsilon,
        }
    }

    #[test]
    fn dual_gradient_matches_finite_differences() {
        let inst = small_instance(0.2);
        let lambda = vec![0.17];
        let moment = inst.exact_moment(&lambda);
        let h = 1e-6;
        let fd = (inst.exact_dual_value(&[lambda[0] + h])
            - inst.exact_dual_value(&[lambda[0] - h]))
            / (2.0 * h);
        assert_relative_eq!(moment[0], fd, max_relative = 1e-8);
    }

    #[test]
    fn unconstrained_primal_is_the_restricted_product() {
        // No rows, no cost: the optimum couples each conditioning point with
        // the sampling law conditioned on its block.
        let mut inst = small_instance(0.3);
        for f in &mut inst.f {
            f.clear();
        }
        for row in &mut inst.c {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
        let sol = solve_primal(&inst, PrimalOptions::default()).unwrap();
        let block_mass = |b: u32| -> f64 {
            (0..inst.points())
                .filter(|&y| inst.blocks[y] == b)
                .map(|y| inst.mu2[y])
                .sum()
        };
        for x in 0..inst.points() {
            for y in 0..inst.points() {
                let expected = if inst.blocks[x] == inst.blocks[y] {
                    inst.mu1[x] * inst.mu2[y] / block_mass(inst.blocks[x])
                } else {
                    0.0
                };
                assert_relative_eq!(sol.plan[x][y], expected, epsilon = 1e-10);
            }
        }
        assert!(sol.lambda.is_empty());
        // Objective equals eps * KL of the restriction: -eps * sum_b
        // mu1(b) ln mu2(b).
        let expected_value: f64 = -inst.epsilon
            * [0u32, 1]
                .iter()
                .map(|&b| {
                    let mu1_b: f64 = (0..inst.points())
                        .filter(|&x| inst.blocks[x] == b)
                        .map(|x| inst.mu1[x])
                        .sum();
                    mu1_b * block_mass(b).ln()
                })
                .sum::<f64>();
        assert_relative_eq!(sol.value, expected_value, max_relative = 1e-9);
    }

    #[test]
    fn large_epsilon_approaches_the_product_coupling() {
        let mut inst = small_instance(50.0);
        for f in &mut inst.f {
            f.clear();
        }
        let sol = solve_primal(&inst, PrimalOptions::default()).unwrap();
        let block_mass = |b: u32| -> f64 {
            (0..inst.points())
                .filter(|&y| inst.blocks[y] == b)
                .map(|y| inst.mu2[y])
                .sum()
        };
        for x in 0..inst.points() {
            for y in 0..inst.points() {
                if inst.blocks[x] == inst.blocks[y] {
                    let product = inst.mu1[x] * inst.mu2[y] / block_mass(inst.blocks[x]);
                    assert_relative_eq!(sol.plan[x][y], product, max_relative = 0.05);
                }
            }
        }
    }

    #[test]
    fn binding_constraint_yields_complementary_slackness() {
        let inst = small_instance(0.1);
        let sol = solve_primal(&inst, PrimalOptions::default()).unwrap();
        // The generated row is active: its multiplier is positive and the
        // optimal moment sits at zero.
        let moment = inst.exact_moment(&sol.lambda);
        if sol.lambda[0] > 1e-8 {
            assert!(
                moment[0].abs() <= 1e-6,
                "active row must have zero moment, got {}",
                moment[0]
            );
        } else {
            assert!(moment[0] <= 1e-10);
        }
        assert!(sol.gap.abs() <= 1e-9 * (1.0 + sol.value.abs()));
    }

    #[test]
    fn primal_marginals_and_support_are_correct() {
        let inst = small_instance(0.1);
        let sol = solve_primal(&inst, PrimalOptions::default()).unwrap();
        for x in 0..inst.points() {
            let row_mass: f64 = sol.plan[x].iter().sum();
            assert_relative_eq!(row_mass, inst.mu1[x], epsilon = 1e-10);
            for y in 0..inst.points() {
                if inst.blocks[x] != inst.blocks[y] {
                    assert_eq!(sol.plan[x][y], 0.0);
                }
            }
        }
    }

    #[test]
    fn randomized_instances_certify_strong_duality() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..10 {
            let epsilon = if trial % 2 == 0 { 0.05 } else { 0.5 };
            let inst = random_instance(&mut rng, 16, 3, epsilon);
            let sol = solve_primal(&inst, PrimalOptions::default())
                .unwrap_or_else(|e| panic!("trial {trial}: {e}"));
            assert!(
                sol.gap.abs() <= 1e-9 * (1.0 + sol.value.abs()),
                "trial {trial}: gap {}",
                sol.gap
            );
            // Dual value at the recovered multipliers can only undershoot
            // the primal optimum (weak duality); certified above.
            let moments = inst.exact_moment(&sol.lambda);
            for (a, &m) in moments.iter().enumerate() {
                assert!(m <= 1e-6, "trial {trial}: row {a} moment {m} at optimum");
            }
        }
    }

    #[test]
    fn infeasible_instance_is_reported() {
        let mut inst = small_instance(0.1);
        // Every candidate violates the row, so no reachable law satisfies it.
        for (y, f) in inst.f.iter_mut().enumerate() {
            f[0] = 0.5 + y as f64 * 0.1;
        }
        match solve_primal(&inst, PrimalOptions::default()) {
            Err(Error::Infeasible(_)) => {}
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn variance_identity_and_zero_variance_sampler() {
        // Single block so the integrated weight is exactly target / mu2;
        // scalar row kept strictly positive.
        let mut inst = small_instance(0.1);
        inst.blocks = vec![0; 6];
        for (y, f) in inst.f.iter_mut().enumerate() {
            f[0] = 0.3 + 0.2 * y as f64;
        }
        inst.validate().unwrap();
        let lambda = vec![0.25];
        let target = inst.mu_lambda(&lambda);
        let (direct, closed) = inst.estimator_variance_scalar(&target, 0).unwrap();
        assert_relative_eq!(direct, closed, max_relative = 1e-8, epsilon = 1e-12);

        // Zero-variance sampler: mu2 proportional to f * target.
        let mean: f64 = (0..6).map(|y| target[y] * inst.f[y][0]).sum();
        let mut tuned = inst.clone();
        for y in 0..6 {
            tuned.mu2[y] = inst.f[y][0] * target[y] / mean;
        }
        tuned.validate().unwrap();
        let (direct, closed) = tuned.estimator_variance_scalar(&target, 0).unwrap();
        assert!(direct.abs() <= 1e-12, "direct variance {direct}");
        assert!(closed.abs() <= 1e-12, "closed-form variance {closed}");
    }

    #[test]
    fn gibbs_variational_identity_on_four_points() {
        // max_p { <p, g> - KL(p | mu) } equals log <mu, e^g>, with the
        // maximum computed by an independent exponentiated-gradient ascent.
        let mu: [f64; 4] = [0.4, 0.3, 0.2, 0.1];
        let g: [f64; 4] = [0.7, -1.2, 0.4, 2.0];
        let log_partition = {
            let s: f64 = mu.iter().zip(&g).map(|(&m, &gi)| m * gi.exp()).sum();
            s.ln()
        };
        let mut p = [0.25; 4];
        for _ in 0..20_000 {
            // Mirror ascent on the simplex with step 0.5.
            let obj_grad: Vec<f64> = (0..4)
                .map(|i| g[i] - (p[i] / mu[i]).ln() - 1.0)
                .collect();
            let mut total = 0.0;
            for i in 0..4 {
                p[i] *= (0.5 * obj_grad[i]).exp();
                total += p[i];
            }
            for v in &mut p {
                *v /= total;
            }
        }
        let attained: f64 = (0..4)
            .map(|i| p[i] * g[i] - p[i] * (p[i] / mu[i]).ln())
            .sum();
        assert_relative_eq!(attained, log_partition, epsilon = 1e-9);
    }

    #[test]
    fn instances_serialize_to_text_and_back() {
        let inst = small_instance(0.25);
        let text = toml::to_string(&inst).unwrap();
        let back: FiniteInstance = toml::from_str(&text).unwrap();
        assert_eq!(inst, back);
    }
}
