use rand::Rng;
use rand_distr::{Exp, StandardNormal};

use super::{LogDensity, PosteriorEval};
use crate::noise::uniform_open_closed;

/// Result of one transition.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub theta: Vec<f64>,
    pub eval: PosteriorEval,
    pub accepted: bool,
    /// Gradient evaluations spent in this transition.
    pub nge: u64,
    pub divergent: bool,
}

impl StepOutcome {
    fn stay(theta: &[f64], eval: &PosteriorEval, nge: u64, divergent: bool) -> Self {
        Self {
            theta: theta.to_vec(),
            eval: eval.clone(),
            accepted: false,
            nge,
            divergent,
        }
    }
}

/// `(θ, m)` after one leapfrog step together with the evaluation at `θ`.
#[derive(Debug, Clone)]
pub struct Leapfrog {
    pub theta: Vec<f64>,
    pub momentum: Vec<f64>,
    pub eval: PosteriorEval,
}

impl Leapfrog {
    pub fn diverged(&self) -> bool {
        !self.eval.is_valid()
    }

    fn log_joint(&self) -> f64 {
        log_joint(&self.eval, &self.momentum)
    }
}

fn log_joint(eval: &PosteriorEval, m: &[f64]) -> f64 {
    if !eval.is_valid() {
        return f64::NEG_INFINITY;
    }
    eval.logpost - 0.5 * m.iter().map(|v| v * v).sum::<f64>()
}

fn draw_momentum(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn dot_diff(plus: &[f64], minus: &[f64], r: &[f64]) -> f64 {
    plus.iter()
        .zip(minus)
        .zip(r)
        .map(|((p, m), r)| (p - m) * r)
        .sum()
}

/// `m' = m + ½ε∇`, `θ' = θ + εm'`, re-evaluate, `m' += ½ε∇'`. One
/// gradient evaluation. A failed evaluation leaves the momentum at its
/// half step.
pub fn leapfrog<D: LogDensity + ?Sized>(
    target: &D,
    theta: &[f64],
    momentum: &[f64],
    grad: &[f64],
    epsilon: f64,
) -> Leapfrog {
    let mut m: Vec<f64> = momentum
        .iter()
        .zip(grad)
        .map(|(m, g)| m + 0.5 * epsilon * g)
        .collect();
    let theta: Vec<f64> = theta.iter().zip(&m).map(|(t, m)| t + epsilon * m).collect();
    let eval = target.eval(&theta);
    if eval.is_valid() {
        for (mi, g) in m.iter_mut().zip(&eval.grad) {
            *mi += 0.5 * epsilon * g;
        }
    }
    Leapfrog {
        theta,
        momentum: m,
        eval,
    }
}

/// Step size heuristic: start from `epsilon0` and double or halve until the
/// one-step acceptance ratio crosses ½. Of the two step sizes bracketing the
/// crossing, the one whose ratio is above ½ is returned, together with the
/// number of gradient evaluations spent.
pub fn find_reasonable_epsilon<D: LogDensity + ?Sized>(
    target: &D,
    theta: &[f64],
    eval: &PosteriorEval,
    epsilon0: f64,
    rng: &mut impl Rng,
) -> Result<(f64, u64), String> {
    let r = draw_momentum(target.dim(), rng);
    let h0 = log_joint(eval, &r);
    let mut eps = epsilon0;
    let mut step = leapfrog(target, theta, &r, &eval.grad, eps);
    let mut nge = 1;
    let mut log_ratio = step.log_joint() - h0;
    let a: f64 = if log_ratio > -std::f64::consts::LN_2 { 1.0 } else { -1.0 };
    for _ in 0..100 {
        if !(a * log_ratio > -a * std::f64::consts::LN_2) {
            let accepted_end = if a > 0.0 { eps / 2.0 } else { eps };
            return Ok((accepted_end, nge));
        }
        eps *= 2f64.powf(a);
        step = leapfrog(target, theta, &r, &eval.grad, eps);
        nge += 1;
        log_ratio = step.log_joint() - h0;
    }
    Err(format!("step size search did not settle after 100 rescalings (ε = {eps:e})"))
}

/// Langevin proposal `θ' ~ N(θ + ½γ²∇, γ²I)` with Metropolis-Hastings
/// correction.
pub fn mala_step<D: LogDensity + ?Sized>(
    target: &D,
    theta: &[f64],
    eval: &PosteriorEval,
    gamma: f64,
    rng: &mut impl Rng,
) -> StepOutcome {
    let g2 = gamma * gamma;
    let prop: Vec<f64> = theta
        .iter()
        .zip(&eval.grad)
        .map(|(t, g)| t + 0.5 * g2 * g + gamma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let new = target.eval(&prop);
    if !new.is_valid() {
        return StepOutcome::stay(theta, eval, 1, true);
    }
    let log_q = |to: &[f64], from: &[f64], grad: &[f64]| -> f64 {
        -to.iter()
            .zip(from)
            .zip(grad)
            .map(|((t, f), g)| (t - f - 0.5 * g2 * g).powi(2))
            .sum::<f64>()
            / (2.0 * g2)
    };
    let log_alpha = new.logpost - eval.logpost + log_q(theta, &prop, &new.grad)
        - log_q(&prop, theta, &eval.grad);
    if uniform_open_closed(rng).ln() <= log_alpha.min(0.0) {
        StepOutcome {
            theta: prop,
            eval: new,
            accepted: true,
            nge: 1,
            divergent: false,
        }
    } else {
        StepOutcome::stay(theta, eval, 1, false)
    }
}

/// Hamiltonian Monte Carlo with `steps` leapfrog steps.
pub fn hmc_step<D: LogDensity + ?Sized>(
    target: &D,
    theta: &[f64],
    eval: &PosteriorEval,
    epsilon: f64,
    steps: usize,
    rng: &mut impl Rng,
) -> StepOutcome {
    let r0 = draw_momentum(target.dim(), rng);
    let h0 = log_joint(eval, &r0);
    let mut state = Leapfrog {
        theta: theta.to_vec(),
        momentum: r0,
        eval: eval.clone(),
    };
    for l in 0..steps {
        state = leapfrog(target, &state.theta, &state.momentum, &state.eval.grad, epsilon);
        if state.diverged() {
            return StepOutcome::stay(theta, eval, l as u64 + 1, true);
        }
    }
    let log_alpha = state.log_joint() - h0;
    if uniform_open_closed(rng).ln() <= log_alpha.min(0.0) {
        StepOutcome {
            theta: state.theta,
            eval: state.eval,
            accepted: true,
            nge: steps as u64,
            divergent: false,
        }
    } else {
        StepOutcome::stay(theta, eval, steps as u64, false)
    }
}

/// `L = ⌈Exp(mean)⌉`, at least 1.
pub fn rhmc_draw_steps(mean_steps: f64, rng: &mut impl Rng) -> usize {
    let draw: f64 = rng.sample(Exp::new(1.0 / mean_steps).expect("positive mean"));
    (draw.ceil() as usize).max(1)
}

/// HMC with a random number of leapfrog steps per iteration.
pub fn rhmc_step<D: LogDensity + ?Sized>(
    target: &D,
    theta: &[f64],
    eval: &PosteriorEval,
    epsilon: f64,
    mean_steps: f64,
    rng: &mut impl Rng,
) -> StepOutcome {
    let steps = rhmc_draw_steps(mean_steps, rng);
    hmc_step(target, theta, eval, epsilon, steps, rng)
}

#[derive(Clone)]
struct Leaf {
    theta: Vec<f64>,
    r: Vec<f64>,
    eval: PosteriorEval,
}

struct Tree {
    minus: Leaf,
    plus: Leaf,
    proposal: Leaf,
    n: u64,
    ok: bool,
}

struct NutsContext<'a, D: ?Sized> {
    target: &'a D,
    epsilon: f64,
    log_u: f64,
    delta_max: f64,
    nge: u64,
    divergent: bool,
}

impl<D: LogDensity + ?Sized> NutsContext<'_, D> {
    fn build(&mut self, leaf: &Leaf, dir: f64, depth: usize, rng: &mut impl Rng) -> Tree {
        if depth == 0 {
            let lf = leapfrog(self.target, &leaf.theta, &leaf.r, &leaf.eval.grad, dir * self.epsilon);
            self.nge += 1;
            let joint = lf.log_joint();
            let n = u64::from(self.log_u <= joint);
            let ok = self.log_u < self.delta_max + joint;
            if !ok {
                self.divergent = true;
            }
            let new = Leaf {
                theta: lf.theta,
                r: lf.momentum,
                eval: lf.eval,
            };
            return Tree {
                minus: new.clone(),
                plus: new.clone(),
                proposal: new,
                n,
                ok,
            };
        }
        let mut tree = self.build(leaf, dir, depth - 1, rng);
        if !tree.ok {
            return tree;
        }
        let edge = if dir < 0.0 { &tree.minus } else { &tree.plus }.clone();
        let other = self.build(&edge, dir, depth - 1, rng);
        if dir < 0.0 {
            tree.minus = other.minus;
        } else {
            tree.plus = other.plus;
        }
        let total = tree.n + other.n;
        if total > 0 && rng.random::<f64>() * (total as f64) < other.n as f64 {
            tree.proposal = other.proposal;
        }
        tree.n = total;
        tree.ok = other.ok && no_u_turn(&tree.minus, &tree.plus);
        tree
    }
}

fn no_u_turn(minus: &Leaf, plus: &Leaf) -> bool {
    dot_diff(&plus.theta, &minus.theta, &minus.r) >= 0.0
        && dot_diff(&plus.theta, &minus.theta, &plus.r) >= 0.0
}

/// No-U-Turn transition with slice sampling and recursive tree doubling.
pub fn nuts_step<D: LogDensity + ?Sized>(
    target: &D,
    theta: &[f64],
    eval: &PosteriorEval,
    epsilon: f64,
    max_tree_depth: usize,
    delta_max: f64,
    rng: &mut impl Rng,
) -> StepOutcome {
    let r0 = draw_momentum(target.dim(), rng);
    let start = Leaf {
        theta: theta.to_vec(),
        r: r0,
        eval: eval.clone(),
    };
    let log_u = log_joint(eval, &start.r) + uniform_open_closed(rng).ln();
    let mut ctx = NutsContext {
        target,
        epsilon,
        log_u,
        delta_max,
        nge: 0,
        divergent: false,
    };
    let mut minus = start.clone();
    let mut plus = start.clone();
    let mut chosen = start;
    let mut n: u64 = 1;
    let mut moved = false;
    for depth in 0..max_tree_depth {
        let dir = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let sub = if dir < 0.0 {
            let t = ctx.build(&minus, dir, depth, rng);
            minus = t.minus.clone();
            t
        } else {
            let t = ctx.build(&plus, dir, depth, rng);
            plus = t.plus.clone();
            t
        };
        if !sub.ok {
            break;
        }
        if rng.random::<f64>() * (n as f64) < sub.n as f64 {
            chosen = sub.proposal;
            moved = true;
        }
        n += sub.n;
        if !no_u_turn(&minus, &plus) {
            break;
        }
    }
    StepOutcome {
        accepted: moved && chosen.theta.as_slice() != theta,
        theta: chosen.theta,
        eval: chosen.eval,
        nge: ctx.nge,
        divergent: ctx.divergent,
    }
}
