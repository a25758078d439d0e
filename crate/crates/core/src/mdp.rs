//! Single-service sub-process: states, admissible actions, rates and the
//! average-reward Bellman solves.
//!
//! A two-type service with capacity `N` only ever visits the `2N + 1` states
//! `(N,0) .. (1,0), (0,0), (0,1) .. (0,N)`; a self-shared service visits
//! `(0,0)` and `(1,0)`. Rewards are lump sums attached to transitions (a match
//! earns `R`, a renege earns `R̄ - C`), so the reward rate of a state-action
//! pair is the rate-weighted sum of its lumps. A multiplier `η` is charged per
//! unit time for every activated slot.
//!
//! Two solvers are provided. [`Solver::ValueIteration`] runs damped Jacobi
//! sweeps with the value of a reference state pinned to zero and root-finds
//! the gain on the reference cycle value. [`Solver::Exact`] runs policy
//! iteration with an exact linear solve of the rate-form evaluation
//! equations.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::RsService;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubState {
    pub n1: usize,
    pub n2: usize,
}

impl SubState {
    pub const fn new(n1: usize, n2: usize) -> Self {
        Self { n1, n2 }
    }

    pub fn swapped(self) -> Self {
        Self::new(self.n2, self.n1)
    }

    pub fn count(self, slot: usize) -> usize {
        if slot == 0 {
            self.n1
        } else {
            self.n2
        }
    }
}

impl std::fmt::Display for SubState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.n1, self.n2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionPair {
    pub a1: bool,
    pub a2: bool,
}

impl ActionPair {
    pub const fn new(a1: bool, a2: bool) -> Self {
        Self { a1, a2 }
    }

    pub fn get(self, slot: usize) -> bool {
        if slot == 0 {
            self.a1
        } else {
            self.a2
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaPair {
    pub eta1: f64,
    pub eta2: f64,
}

impl EtaPair {
    pub const fn new(eta1: f64, eta2: f64) -> Self {
        Self { eta1, eta2 }
    }
}

/// Which action variables are free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Both slots free wherever admissible.
    Bivariate,
    /// Slot 1 free; slot 2 fixed to `1{n2 < N}`. Self-shared services have a
    /// single action either way.
    Whittle,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub to: SubState,
    pub rate: f64,
    /// Reward earned when the transition fires.
    pub lump: f64,
}

/// Position of `s` in the path ordering of reachable states.
pub fn state_position(self_shared: bool, n_max: usize, s: SubState) -> Option<usize> {
    if self_shared {
        return (s.n2 == 0 && s.n1 <= 1).then_some(s.n1);
    }
    match (s.n1, s.n2) {
        (a, 0) if a <= n_max => Some(n_max - a),
        (0, b) if b <= n_max => Some(n_max + b),
        _ => None,
    }
}

/// Parameters of one service seen as a sub-process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubProcess {
    pub self_shared: bool,
    pub n_max: usize,
    pub lambda: (f64, f64),
    pub mu: (f64, f64),
    /// Shared-ride reward `R`.
    pub reward: f64,
    /// Renege lumps `R̄ - C` per slot.
    pub renege: (f64, f64),
}

impl SubProcess {
    pub fn from_service(svc: &RsService, n_max: usize, arrivals: (f64, f64)) -> Self {
        let lambda = if svc.self_shared {
            (arrivals.0, arrivals.0)
        } else {
            arrivals
        };
        Self {
            self_shared: svc.self_shared,
            n_max,
            lambda,
            mu: svc.reneging_rates,
            reward: svc.reward,
            renege: (svc.renege_reward(0), svc.renege_reward(1)),
        }
    }

    /// The same service with the two slots exchanged.
    pub fn mirrored(&self) -> Self {
        if self.self_shared {
            return *self;
        }
        Self {
            lambda: (self.lambda.1, self.lambda.0),
            mu: (self.mu.1, self.mu.0),
            renege: (self.renege.1, self.renege.0),
            ..*self
        }
    }

    /// Reachable states in path order.
    pub fn states(&self) -> Vec<SubState> {
        if self.self_shared {
            return vec![SubState::new(0, 0), SubState::new(1, 0)];
        }
        let n = self.n_max;
        (0..=2 * n)
            .map(|i| {
                if i < n {
                    SubState::new(n - i, 0)
                } else {
                    SubState::new(0, i - n)
                }
            })
            .collect()
    }

    pub fn n_states(&self) -> usize {
        if self.self_shared {
            2
        } else {
            2 * self.n_max + 1
        }
    }

    /// Position of `s` in [`states`](Self::states), if reachable.
    pub fn position(&self, s: SubState) -> Option<usize> {
        state_position(self.self_shared, self.n_max, s)
    }

    /// Whether slot `slot` can be activated at `s`.
    pub fn controllable(&self, s: SubState, slot: usize) -> bool {
        if self.self_shared {
            slot == 0 && s.n1 < 2
        } else {
            s.count(slot) < self.n_max
        }
    }

    pub fn check_state(&self, s: SubState) -> Result<()> {
        if self.position(s).is_none() {
            return Err(Error::State(format!("{s} is not a reachable state")));
        }
        Ok(())
    }

    /// Admissible actions at `s`, most active first.
    pub fn actions(&self, s: SubState, mode: Mode) -> Vec<ActionPair> {
        let c1 = self.controllable(s, 0);
        if self.self_shared {
            return if c1 {
                vec![ActionPair::new(true, false), ActionPair::new(false, false)]
            } else {
                vec![ActionPair::new(false, false)]
            };
        }
        let c2 = self.controllable(s, 1);
        let a1s: &[bool] = if c1 { &[true, false] } else { &[false] };
        let a2s: &[bool] = match (mode, c2) {
            (Mode::Bivariate, true) => &[true, false],
            (Mode::Whittle, true) => &[true],
            (_, false) => &[false],
        };
        let mut out = Vec::with_capacity(4);
        for &a1 in a1s {
            for &a2 in a2s {
                out.push(ActionPair::new(a1, a2));
            }
        }
        out
    }

    pub fn check_action(&self, s: SubState, a: ActionPair) -> Result<()> {
        let ok1 = !a.a1 || self.controllable(s, 0);
        let ok2 = if self.self_shared {
            !a.a2
        } else {
            !a.a2 || self.controllable(s, 1)
        };
        if ok1 && ok2 {
            Ok(())
        } else {
            Err(Error::Action(format!(
                "action ({},{}) not admissible at {s}",
                a.a1 as u8, a.a2 as u8
            )))
        }
    }

    /// Mutually exclusive events out of `s` under `a`.
    pub fn transitions(&self, s: SubState, a: ActionPair) -> Result<Vec<Transition>> {
        self.check_state(s)?;
        self.check_action(s, a)?;
        let mut out = self.raw_transitions(s, a);
        out.retain(|t| t.rate > 0.0);
        Ok(out)
    }

    fn raw_transitions(&self, s: SubState, a: ActionPair) -> Vec<Transition> {
        let t = |to, rate, lump| Transition { to, rate, lump };
        let mut out = Vec::with_capacity(3);
        if self.self_shared {
            if s.n1 == 0 {
                if a.a1 {
                    out.push(t(SubState::new(1, 0), self.lambda.0, 0.0));
                }
            } else {
                if a.a1 {
                    out.push(t(SubState::new(0, 0), self.lambda.0, self.reward));
                }
                out.push(t(SubState::new(0, 0), self.mu.0, self.renege.0));
            }
            return out;
        }
        let (n1, n2) = (s.n1, s.n2);
        if n1 > 0 {
            if a.a1 {
                out.push(t(SubState::new(n1 + 1, 0), self.lambda.0, 0.0));
            }
            if a.a2 {
                out.push(t(SubState::new(n1 - 1, 0), self.lambda.1, self.reward));
            }
            out.push(t(
                SubState::new(n1 - 1, 0),
                n1 as f64 * self.mu.0,
                self.renege.0,
            ));
        } else if n2 > 0 {
            if a.a2 {
                out.push(t(SubState::new(0, n2 + 1), self.lambda.1, 0.0));
            }
            if a.a1 {
                out.push(t(SubState::new(0, n2 - 1), self.lambda.0, self.reward));
            }
            out.push(t(
                SubState::new(0, n2 - 1),
                n2 as f64 * self.mu.1,
                self.renege.1,
            ));
        } else {
            if a.a1 {
                out.push(t(SubState::new(1, 0), self.lambda.0, 0.0));
            }
            if a.a2 {
                out.push(t(SubState::new(0, 1), self.lambda.1, 0.0));
            }
        }
        out
    }

    pub fn reward_rate(&self, s: SubState, a: ActionPair) -> Result<f64> {
        Ok(self
            .transitions(s, a)?
            .iter()
            .map(|t| t.rate * t.lump)
            .sum())
    }

    pub fn sojourn_rate(&self, s: SubState, a: ActionPair) -> Result<f64> {
        Ok(self.transitions(s, a)?.iter().map(|t| t.rate).sum())
    }

    /// Embedded jump distribution, merged by destination.
    pub fn transition_probs(&self, s: SubState, a: ActionPair) -> Result<Vec<(SubState, f64)>> {
        let tr = self.transitions(s, a)?;
        let u: f64 = tr.iter().map(|t| t.rate).sum();
        if !(u > 0.0) {
            return Err(Error::Numeric(format!("zero sojourn rate at {s}")));
        }
        let mut out: Vec<(SubState, f64)> = Vec::with_capacity(tr.len());
        for t in tr {
            match out.iter_mut().find(|(d, _)| *d == t.to) {
                Some(e) => e.1 += t.rate / u,
                None => out.push((t.to, t.rate / u)),
            }
        }
        Ok(out)
    }

    /// Activation charge per unit time.
    pub fn charge(&self, a: ActionPair, eta: EtaPair) -> f64 {
        let mut c = 0.0;
        if a.a1 {
            c += eta.eta1;
        }
        if a.a2 && !self.self_shared {
            c += eta.eta2;
        }
        c
    }

    /// Largest absolute reward rate over all state-action pairs, at least 1.
    pub fn reward_scale(&self) -> f64 {
        let lam = self.lambda.0.max(self.lambda.1);
        let mu = self.mu.0.max(self.mu.1) * self.n_max as f64;
        (self.reward.abs() * lam + self.renege.0.abs().max(self.renege.1.abs()) * mu).max(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViParams {
    /// Damping on the continuation term, in [0, 1).
    pub beta: f64,
    /// Stopping tolerance on successive sweeps.
    pub sigma: f64,
    pub max_sweeps: usize,
}

impl Default for ViParams {
    fn default() -> Self {
        Self {
            beta: 0.999,
            sigma: 1e-6,
            max_sweeps: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Solver {
    ValueIteration(ViParams),
    Exact,
}

/// Restriction of one action slot at one state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Forced {
    pub state: SubState,
    pub slot: usize,
    pub value: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BellmanSolution {
    pub states: Vec<SubState>,
    pub reference: SubState,
    /// Relative values with the reference pinned to 0.
    pub values: Vec<f64>,
    /// Gain found by the solver.
    pub gain: f64,
    /// Exact long-run reward of the first greedy action per state.
    pub policy_gain: f64,
    pub optimal_actions: Vec<Vec<ActionPair>>,
    pub sweeps: usize,
}

impl BellmanSolution {
    pub fn actions_at(&self, s: SubState) -> Option<&[ActionPair]> {
        self.states
            .iter()
            .position(|&x| x == s)
            .map(|i| self.optimal_actions[i].as_slice())
    }

    pub fn greedy(&self) -> Vec<ActionPair> {
        self.optimal_actions.iter().map(|a| a[0]).collect()
    }

    /// Delimited (state, action, value, gain) rows.
    pub fn dump(&self) -> String {
        let mut s = String::from("n1,n2,a1,a2,value,gain\n");
        for (i, st) in self.states.iter().enumerate() {
            for a in &self.optimal_actions[i] {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    st.n1, st.n2, a.a1 as u8, a.a2 as u8, self.values[i], self.gain
                );
            }
        }
        s
    }
}

struct Act {
    a: ActionPair,
    net: f64,
    u: f64,
    /// (destination position, rate)
    tr: Vec<(usize, f64)>,
}

/// Precomputed state-action data for one solve.
struct Model {
    states: Vec<SubState>,
    acts: Vec<Vec<Act>>,
    reference: usize,
}

impl Model {
    fn build(
        sp: &SubProcess,
        mode: Mode,
        eta: EtaPair,
        forced: Option<Forced>,
        reference: SubState,
    ) -> Result<Self> {
        let states = sp.states();
        let reference = sp
            .position(reference)
            .ok_or_else(|| Error::State(format!("reference {reference} unreachable")))?;
        if let Some(f) = forced {
            sp.check_state(f.state)?;
            if f.value && !sp.controllable(f.state, f.slot) {
                return Err(Error::Action(format!(
                    "slot {} cannot be activated at {}",
                    f.slot + 1,
                    f.state
                )));
            }
        }
        let mut acts = Vec::with_capacity(states.len());
        for &s in &states {
            let mut row = Vec::new();
            for a in sp.actions(s, mode) {
                if let Some(f) = forced {
                    if f.state == s && a.get(f.slot) != f.value {
                        continue;
                    }
                }
                let tr = sp.transitions(s, a)?;
                let reward: f64 = tr.iter().map(|t| t.rate * t.lump).sum();
                let u: f64 = tr.iter().map(|t| t.rate).sum();
                if !(u > 0.0) && s != states[reference] {
                    return Err(Error::Numeric(format!(
                        "zero sojourn rate at non-reference state {s}"
                    )));
                }
                row.push(Act {
                    a,
                    net: reward - sp.charge(a, eta),
                    u,
                    tr: tr
                        .iter()
                        .map(|t| (sp.position(t.to).expect("reachable"), t.rate))
                        .collect(),
                });
            }
            if row.is_empty() {
                return Err(Error::Action(format!("no admissible action at {s}")));
            }
            acts.push(row);
        }
        Ok(Self {
            states,
            acts,
            reference,
        })
    }

    fn net_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for row in &self.acts {
            for a in row {
                if a.u > 0.0 {
                    lo = lo.min(a.net);
                    hi = hi.max(a.net);
                }
            }
        }
        (lo, hi)
    }

    fn has_idle(&self) -> bool {
        self.acts[self.reference].iter().any(|a| a.u == 0.0)
    }

    fn has_cycle(&self) -> bool {
        self.acts[self.reference].iter().any(|a| a.u > 0.0)
    }

    /// Rate-form evaluation: returns (h, g) with h(reference) = 0.
    fn evaluate(&self, policy: &[usize]) -> Result<(Vec<f64>, f64)> {
        let m = self.states.len();
        let mut a = DMatrix::<f64>::zeros(m + 1, m + 1);
        let mut b = DVector::<f64>::zeros(m + 1);
        for i in 0..m {
            let act = &self.acts[i][policy[i]];
            a[(i, i)] += act.u;
            for &(j, r) in &act.tr {
                a[(i, j)] -= r;
            }
            a[(i, m)] = 1.0;
            b[i] = act.net;
        }
        a[(m, self.reference)] = 1.0;
        let x = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Numeric("singular evaluation system".into()))?;
        Ok((x.iter().take(m).copied().collect(), x[m]))
    }

    /// Policy iteration from `policy` without the optimal-set bookkeeping;
    /// leaves the optimal policy in `policy`.
    fn exact_gain(&self, policy: &mut [usize]) -> Result<f64> {
        let m = self.states.len();
        let scale = self
            .acts
            .iter()
            .flatten()
            .map(|a| a.net.abs() + a.u)
            .fold(1.0, f64::max);
        let eps = 1e-11 * scale;
        for _ in 0..500 {
            let (h, g) = self.evaluate(policy)?;
            let mut changed = false;
            for i in 0..m {
                let test = |a: &Act| a.net + a.tr.iter().map(|&(j, r)| r * (h[j] - h[i])).sum::<f64>();
                let cur = test(&self.acts[i][policy[i]]);
                let (k, best) = self.acts[i]
                    .iter()
                    .map(test)
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (k, v)| if v > acc.1 { (k, v) } else { acc });
                if cur < best - eps {
                    policy[i] = k;
                    changed = true;
                }
            }
            if !changed {
                return Ok(g);
            }
        }
        Err(Error::Numeric("policy iteration did not converge".into()))
    }

    fn exact(&self) -> Result<(Vec<f64>, f64, Vec<Vec<usize>>)> {
        let m = self.states.len();
        let mut policy = vec![0usize; m];
        let scale = self
            .acts
            .iter()
            .flatten()
            .map(|a| a.net.abs() + a.u)
            .fold(1.0, f64::max);
        let eps = 1e-11 * scale;
        for _ in 0..500 {
            let (h, g) = self.evaluate(&policy)?;
            let test = |i: usize, a: &Act| a.net + a.tr.iter().map(|&(j, r)| r * (h[j] - h[i])).sum::<f64>();
            let mut changed = false;
            let mut opt = Vec::with_capacity(m);
            for i in 0..m {
                let vals: Vec<f64> = self.acts[i].iter().map(|a| test(i, a)).collect();
                let best = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if vals[policy[i]] < best - eps {
                    policy[i] = vals.iter().position(|&v| v == best).unwrap();
                    changed = true;
                }
                let mut set: Vec<usize> = (0..vals.len()).filter(|&k| vals[k] >= best - eps).collect();
                set.sort_by_key(|&k| k != policy[i]);
                opt.push(set);
            }
            if !changed {
                return Ok((h, g, opt));
            }
        }
        Err(Error::Numeric("policy iteration did not converge".into()))
    }

    /// Jacobi sweeps at fixed `g` until successive iterates differ by < sigma.
    fn sweep_to_fixed_point(&self, v: &mut Vec<f64>, g: f64, p: &ViParams) -> Result<usize> {
        let m = self.states.len();
        let mut next = vec![0.0; m];
        for k in 1..=p.max_sweeps {
            let mut diff = 0.0f64;
            for i in 0..m {
                if i == self.reference {
                    next[i] = 0.0;
                    continue;
                }
                let mut best = f64::NEG_INFINITY;
                for a in &self.acts[i] {
                    let cont: f64 = a.tr.iter().map(|&(j, r)| r * v[j]).sum::<f64>() / a.u;
                    best = best.max((a.net - g) / a.u + p.beta * cont);
                }
                diff = diff.max((best - v[i]).abs());
                next[i] = best;
            }
            std::mem::swap(v, &mut next);
            if diff < p.sigma {
                return Ok(k);
            }
        }
        Err(Error::Numeric(format!(
            "value iteration did not converge in {} sweeps",
            p.max_sweeps
        )))
    }

    fn q_values(&self, i: usize, v: &[f64], g: f64, beta: f64, idle_ok: bool) -> Vec<f64> {
        self.acts[i]
            .iter()
            .map(|a| {
                if a.u == 0.0 {
                    if idle_ok {
                        0.0
                    } else {
                        f64::NEG_INFINITY
                    }
                } else {
                    let cont: f64 = a.tr.iter().map(|&(j, r)| r * v[j]).sum::<f64>() / a.u;
                    (a.net - g) / a.u + beta * cont
                }
            })
            .collect()
    }

    fn cycle_value(&self, v: &[f64], g: f64, beta: f64) -> f64 {
        self.q_values(self.reference, v, g, beta, false)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn value_iteration(&self, p: &ViParams) -> Result<(Vec<f64>, f64, Vec<Vec<usize>>, usize)> {
        let m = self.states.len();
        let mut v = vec![0.0; m];
        let mut sweeps = 0;
        let g = if !self.has_cycle() {
            0.0
        } else {
            let (mut lo, mut hi) = self.net_range();
            let eval = |g: f64, v: &mut Vec<f64>, sweeps: &mut usize| -> Result<f64> {
                *sweeps += self.sweep_to_fixed_point(v, g, p)?;
                Ok(self.cycle_value(v, g, p.beta))
            };
            let mut f_lo = eval(lo, &mut v, &mut sweeps)?;
            let mut f_hi = eval(hi, &mut v, &mut sweeps)?;
            if f_lo < -p.sigma || f_hi > p.sigma {
                return Err(Error::Numeric(format!(
                    "gain bracket [{lo}, {hi}] has cycle values ({f_lo}, {f_hi})"
                )));
            }
            let tol = p.sigma * (1.0 + lo.abs().max(hi.abs())) * 1e-3;
            let mut side = 0i8;
            let mut root = 0.5 * (lo + hi);
            for _ in 0..200 {
                if hi - lo <= tol {
                    break;
                }
                // Illinois false position
                let mut x = if f_lo > f_hi {
                    hi - f_hi * (hi - lo) / (f_hi - f_lo)
                } else {
                    0.5 * (lo + hi)
                };
                if !(x > lo && x < hi) {
                    x = 0.5 * (lo + hi);
                }
                let fx = eval(x, &mut v, &mut sweeps)?;
                root = x;
                if fx == 0.0 {
                    break;
                }
                if fx > 0.0 {
                    lo = x;
                    f_lo = fx;
                    if side == 1 {
                        f_hi *= 0.5;
                    }
                    side = 1;
                } else {
                    hi = x;
                    f_hi = fx;
                    if side == -1 {
                        f_lo *= 0.5;
                    }
                    side = -1;
                }
                root = 0.5 * (lo + hi);
            }
            if self.has_idle() {
                root.max(0.0)
            } else {
                root
            }
        };
        sweeps += self.sweep_to_fixed_point(&mut v, g, p)?;
        let mut opt = Vec::with_capacity(m);
        for i in 0..m {
            let q = self.q_values(i, &v, g, p.beta, g <= 0.0);
            let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let slack = 10.0 * p.sigma * best.abs().max(1.0);
            let mut set: Vec<usize> = (0..q.len()).filter(|&k| q[k] >= best - slack).collect();
            set.sort_by(|&x, &y| q[y].total_cmp(&q[x]));
            opt.push(set);
        }
        Ok((v, g, opt, sweeps))
    }
}

/// Reference state with `V = 0`: `(0,0)` in bivariate mode and for
/// self-shared services, `(0,N)` for the Whittle-mode two-type solve unless
/// the second stream is switched off.
pub fn default_reference(sp: &SubProcess, mode: Mode) -> SubState {
    if sp.self_shared || mode == Mode::Bivariate || sp.lambda.1 <= 0.0 {
        SubState::new(0, 0)
    } else {
        SubState::new(0, sp.n_max)
    }
}

/// Maximizes the long-run average of reward minus activation charges,
/// optionally with one action slot forced at one state.
pub fn solve(
    sp: &SubProcess,
    mode: Mode,
    eta: EtaPair,
    forced: Option<Forced>,
    solver: Solver,
) -> Result<BellmanSolution> {
    if !eta.eta1.is_finite() || !eta.eta2.is_finite() {
        return Err(Error::Numeric("multipliers must be finite".into()));
    }
    let reference = default_reference(sp, mode);
    let model = Model::build(sp, mode, eta, forced, reference)?;
    let (values, gain, opt, sweeps) = match solver {
        Solver::Exact => {
            let (h, g, opt) = model.exact()?;
            (h, g, opt, 0)
        }
        Solver::ValueIteration(p) => {
            if !(p.beta >= 0.0 && p.beta < 1.0) || !(p.sigma > 0.0) {
                return Err(Error::Numeric(format!(
                    "need beta in [0,1) and sigma > 0, got ({}, {})",
                    p.beta, p.sigma
                )));
            }
            model.value_iteration(&p)?
        }
    };
    let first: Vec<usize> = opt.iter().map(|s| s[0]).collect();
    let (_, policy_gain) = model.evaluate(&first)?;
    let optimal_actions = opt
        .iter()
        .enumerate()
        .map(|(i, set)| set.iter().map(|&k| model.acts[i][k].a).collect())
        .collect();
    Ok(BellmanSolution {
        states: model.states,
        reference,
        values,
        gain,
        policy_gain,
        optimal_actions,
        sweeps,
    })
}

/// Optimal gain by policy iteration, skipping everything else [`solve`] reports.
pub fn exact_gain(sp: &SubProcess, mode: Mode, eta: EtaPair, forced: Option<Forced>) -> Result<f64> {
    if !eta.eta1.is_finite() || !eta.eta2.is_finite() {
        return Err(Error::Numeric("multipliers must be finite".into()));
    }
    let model = Model::build(sp, mode, eta, forced, default_reference(sp, mode))?;
    model.exact_gain(&mut vec![0; model.states.len()])
}

/// Exact optimal gains of one (possibly forced) model at a sequence of
/// multipliers, each policy iteration starting from the previous optimum.
pub struct GainTracker {
    sp: SubProcess,
    model: Model,
    rewards: Vec<Vec<f64>>,
    policy: Vec<usize>,
}

impl GainTracker {
    pub fn new(sp: &SubProcess, mode: Mode, forced: Option<Forced>) -> Result<Self> {
        let model = Model::build(sp, mode, EtaPair::new(0.0, 0.0), forced, default_reference(sp, mode))?;
        let rewards = model
            .acts
            .iter()
            .map(|row| row.iter().map(|a| a.net).collect())
            .collect();
        let policy = vec![0; model.states.len()];
        Ok(Self {
            sp: *sp,
            model,
            rewards,
            policy,
        })
    }

    pub fn gain(&mut self, eta: EtaPair) -> Result<f64> {
        if !eta.eta1.is_finite() || !eta.eta2.is_finite() {
            return Err(Error::Numeric("multipliers must be finite".into()));
        }
        for (row, base) in self.model.acts.iter_mut().zip(&self.rewards) {
            for (a, r) in row.iter_mut().zip(base) {
                a.net = r - self.sp.charge(a.a, eta);
            }
        }
        self.model.exact_gain(&mut self.policy)
    }
}

/// Bivariate average-reward solve by damped value iteration.
pub fn solve_average_reward(
    svc: &RsService,
    n_max: usize,
    arrivals: (f64, f64),
    eta: EtaPair,
    params: ViParams,
) -> Result<BellmanSolution> {
    let sp = SubProcess::from_service(svc, n_max, arrivals);
    solve(&sp, Mode::Bivariate, eta, None, Solver::ValueIteration(params))
}

/// Exact long-run reward (net of charges) of a fixed stationary policy.
pub fn policy_gain(sp: &SubProcess, eta: EtaPair, policy: &[ActionPair]) -> Result<f64> {
    let model = Model::build(sp, Mode::Bivariate, eta, None, SubState::new(0, 0))?;
    if policy.len() != model.states.len() {
        return Err(Error::State("policy length mismatch".into()));
    }
    let idx: Vec<usize> = policy
        .iter()
        .enumerate()
        .map(|(i, a)| {
            model.acts[i]
                .iter()
                .position(|x| x.a == *a)
                .ok_or_else(|| Error::Action(format!("action not admissible at {}", model.states[i])))
        })
        .collect::<Result<_>>()?;
    Ok(model.evaluate(&idx)?.1)
}

/// One synchronous damped sweep at fixed `g`, returning new values and the
/// maximizing actions per state. The reference state keeps value 0.
pub fn bellman_backup(
    sp: &SubProcess,
    mode: Mode,
    values: &[f64],
    eta: EtaPair,
    g: f64,
    beta: f64,
) -> Result<(Vec<f64>, Vec<Vec<ActionPair>>)> {
    let reference = default_reference(sp, mode);
    let model = Model::build(sp, mode, eta, None, reference)?;
    if values.len() != model.states.len() {
        return Err(Error::State("value vector length mismatch".into()));
    }
    let mut out = Vec::with_capacity(values.len());
    let mut acts = Vec::with_capacity(values.len());
    for i in 0..values.len() {
        let q = model.q_values(i, values, g, beta, g <= 0.0);
        let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.push(if i == model.reference { 0.0 } else { best });
        acts.push(
            (0..q.len())
                .filter(|&k| q[k] == best)
                .map(|k| model.acts[i][k].a)
                .collect(),
        );
    }
    Ok((out, acts))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two-type fixture with rates 5, renege 1, reward 10, renege lump 1.
    pub(crate) fn fixture(n: usize) -> SubProcess {
        SubProcess {
            self_shared: false,
            n_max: n,
            lambda: (5.0, 5.0),
            mu: (1.0, 1.0),
            reward: 10.0,
            renege: (1.0, 1.0),
        }
    }

    #[test]
    fn state_enumeration() {
        let sp = fixture(5);
        let st = sp.states();
        assert_eq!(st.len(), 11);
        assert_eq!(st[0], SubState::new(5, 0));
        assert_eq!(st[5], SubState::new(0, 0));
        assert_eq!(st[10], SubState::new(0, 5));
        for (i, s) in st.iter().enumerate() {
            assert_eq!(sp.position(*s), Some(i));
        }
        assert_eq!(sp.position(SubState::new(1, 1)), None);
    }

    #[test]
    fn reward_rate_examples() {
        let sp = fixture(5);
        let s = SubState::new(0, 1);
        assert_eq!(sp.reward_rate(s, ActionPair::new(true, true)).unwrap(), 51.0);
        assert_eq!(sp.reward_rate(s, ActionPair::new(false, true)).unwrap(), 1.0);
        for a in sp.actions(SubState::new(0, 0), Mode::Bivariate) {
            assert_eq!(sp.reward_rate(SubState::new(0, 0), a).unwrap(), 0.0);
        }
        assert!(sp.reward_rate(SubState::new(1, 1), ActionPair::new(false, false)).is_err());
    }

    #[test]
    fn sojourn_examples() {
        let sp = fixture(5);
        let both = ActionPair::new(true, true);
        assert_eq!(sp.sojourn_rate(SubState::new(0, 1), both).unwrap(), 11.0);
        assert_eq!(sp.sojourn_rate(SubState::new(1, 0), both).unwrap(), 11.0);
        assert_eq!(
            sp.sojourn_rate(SubState::new(0, 0), ActionPair::new(false, false)).unwrap(),
            0.0
        );
    }

    #[test]
    fn transition_examples() {
        let sp = fixture(5);
        let both = ActionPair::new(true, true);
        let p = sp.transition_probs(SubState::new(0, 1), both).unwrap();
        assert_eq!(p, vec![(SubState::new(0, 2), 5.0 / 11.0), (SubState::new(0, 0), 6.0 / 11.0)]);
        let p = sp.transition_probs(SubState::new(1, 0), both).unwrap();
        assert_eq!(p, vec![(SubState::new(2, 0), 5.0 / 11.0), (SubState::new(0, 0), 6.0 / 11.0)]);
        assert!(sp
            .transition_probs(SubState::new(5, 0), both)
            .is_err());
    }

    #[test]
    fn whittle_mode_fixes_partner_action() {
        let sp = fixture(3);
        assert_eq!(
            sp.actions(SubState::new(0, 1), Mode::Whittle),
            vec![ActionPair::new(true, true), ActionPair::new(false, true)]
        );
        assert_eq!(
            sp.actions(SubState::new(0, 3), Mode::Whittle),
            vec![ActionPair::new(true, false), ActionPair::new(false, false)]
        );
        assert_eq!(
            sp.actions(SubState::new(3, 0), Mode::Bivariate),
            vec![ActionPair::new(false, true), ActionPair::new(false, false)]
        );
    }

    #[test]
    fn single_backup_example() {
        let sp = fixture(5);
        let (v, acts) =
            bellman_backup(&sp, Mode::Whittle, &[0.0; 11], EtaPair::new(0.0, 0.0), 0.0, 0.999)
                .unwrap();
        let i = sp.position(SubState::new(0, 1)).unwrap();
        assert!((v[i] - 51.0 / 11.0).abs() < 1e-12);
        assert!(acts[i].iter().all(|a| a.a1));
    }

    #[test]
    fn huge_multiplier_is_all_passive() {
        let sp = fixture(5);
        let m = 1e9;
        for solver in [Solver::Exact, Solver::ValueIteration(ViParams::default())] {
            let sol = solve(&sp, Mode::Bivariate, EtaPair::new(m, m), None, solver).unwrap();
            assert_eq!(sol.gain, 0.0);
            assert_eq!(sol.policy_gain, 0.0);
            for (s, acts) in sol.states.iter().zip(&sol.optimal_actions) {
                assert!(acts.iter().all(|a| !a.a1 && !a.a2), "state {s}");
            }
            assert_eq!(sol.values[sp.position(SubState::new(0, 0)).unwrap()], 0.0);
        }
    }

    #[test]
    fn large_eta1_turns_off_slot_one() {
        let sp = fixture(5);
        let sol = solve(
            &sp,
            Mode::Bivariate,
            EtaPair::new(1e6, 0.0),
            None,
            Solver::ValueIteration(ViParams::default()),
        )
        .unwrap();
        for acts in &sol.optimal_actions {
            assert!(acts.iter().all(|a| !a.a1));
        }
    }

    #[test]
    fn forced_activation_on_uncontrollable_is_rejected() {
        let sp = fixture(2);
        let f = Forced {
            state: SubState::new(2, 0),
            slot: 0,
            value: true,
        };
        assert!(solve(&sp, Mode::Bivariate, EtaPair::new(0.0, 0.0), Some(f), Solver::Exact).is_err());
    }
}
