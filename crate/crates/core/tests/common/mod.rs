//! Shared test helpers. The oracles here are built directly from the model
//! dynamics and share no code with the library solvers.

#![allow(dead_code)]

use std::path::PathBuf;

use ridematch::mdp::{ActionPair, EtaPair, Mode, SubProcess, SubState};
use ridematch::network::{
    build_services, generate_uniform_network, load_real_network, EconParams, HexLayout, NetworkSpec,
    ServiceCatalog,
};

pub fn uniform_econ(zeta: f64) -> EconParams {
    EconParams {
        b: 1.0,
        gamma: 1.7,
        q: 40.0,
        upsilon: 0.03,
        beta: 0.09,
        zeta,
        n_max: 5,
    }
}

pub fn melbourne_econ(zeta: f64) -> EconParams {
    EconParams {
        b: 1.0,
        gamma: 1.7,
        q: 40.0,
        upsilon: 0.0054,
        beta: 0.0189,
        zeta,
        n_max: 5,
    }
}

pub const MELBOURNE_DISTANCE_SCALE: f64 = 0.75;

/// Shipped data file; also resolves from sibling crates that include this module.
pub fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/data").join(name)
}

pub fn uniform(rate: f64, zeta: f64) -> (NetworkSpec, ServiceCatalog) {
    let net = generate_uniform_network(&HexLayout::default(), rate).unwrap();
    let cat = build_services(&net, &uniform_econ(zeta)).unwrap();
    (net, cat)
}

pub fn melbourne(zeta: f64) -> (NetworkSpec, ServiceCatalog) {
    let net = load_real_network(
        &data_path("melbourne_demand.csv"),
        &data_path("melbourne_centroids.csv"),
        &data_path("melbourne_profile.csv"),
        MELBOURNE_DISTANCE_SCALE,
    )
    .unwrap();
    let cat = build_services(&net, &melbourne_econ(zeta)).unwrap();
    (net, cat)
}

/// States in path order: (N,0), ..., (1,0), (0,0), (0,1), ..., (0,N).
pub fn oracle_states(sp: &SubProcess) -> Vec<SubState> {
    if sp.self_shared {
        return vec![SubState::new(0, 0), SubState::new(1, 0)];
    }
    let n = sp.n_max;
    let mut v: Vec<SubState> = (1..=n).rev().map(|a| SubState::new(a, 0)).collect();
    v.push(SubState::new(0, 0));
    v.extend((1..=n).map(|b| SubState::new(0, b)));
    v
}

/// Admissible actions, listed independently of the library.
pub fn oracle_actions(sp: &SubProcess, s: SubState, mode: Mode) -> Vec<ActionPair> {
    if sp.self_shared {
        return vec![ActionPair::new(false, false), ActionPair::new(true, false)];
    }
    let free1 = s.n1 < sp.n_max;
    let free2 = s.n2 < sp.n_max;
    let mut out = Vec::new();
    for a1 in [false, true] {
        for a2 in [false, true] {
            if (a1 && !free1) || (a2 && !free2) {
                continue;
            }
            if mode == Mode::Whittle && a2 != free2 {
                continue;
            }
            out.push(ActionPair::new(a1, a2));
        }
    }
    out
}

/// `(destination, rate, lump)` triples out of `s` under `a`.
pub fn oracle_moves(sp: &SubProcess, s: SubState, a: ActionPair) -> Vec<(SubState, f64, f64)> {
    let (l1, l2) = sp.lambda;
    let (m1, m2) = sp.mu;
    let (d1, d2) = sp.renege;
    let r = sp.reward;
    let mut v = Vec::new();
    if sp.self_shared {
        if s.n1 == 0 {
            if a.a1 {
                v.push((SubState::new(1, 0), l1, 0.0));
            }
        } else {
            if a.a1 {
                v.push((SubState::new(0, 0), l1, r));
            }
            v.push((SubState::new(0, 0), m1, d1));
        }
        return v;
    }
    match (s.n1, s.n2) {
        (0, 0) => {
            if a.a1 {
                v.push((SubState::new(1, 0), l1, 0.0));
            }
            if a.a2 {
                v.push((SubState::new(0, 1), l2, 0.0));
            }
        }
        (n, 0) => {
            if a.a1 {
                v.push((SubState::new(n + 1, 0), l1, 0.0));
            }
            if a.a2 {
                v.push((SubState::new(n - 1, 0), l2, r));
            }
            v.push((SubState::new(n - 1, 0), n as f64 * m1, d1));
        }
        (0, n) => {
            if a.a2 {
                v.push((SubState::new(0, n + 1), l2, 0.0));
            }
            if a.a1 {
                v.push((SubState::new(0, n - 1), l1, r));
            }
            v.push((SubState::new(0, n - 1), n as f64 * m2, d2));
        }
        _ => unreachable!("both queues nonempty"),
    }
    v.retain(|m| m.1 > 0.0);
    v
}

pub fn oracle_charge(sp: &SubProcess, a: ActionPair, eta: EtaPair) -> f64 {
    let mut c = 0.0;
    if a.a1 {
        c += eta.eta1;
    }
    if a.a2 && !sp.self_shared {
        c += eta.eta2;
    }
    c
}

/// Stationary distribution of a generator by Gaussian elimination, with the
/// last balance equation replaced by normalization. Assumes one recurrent
/// class.
pub fn stationary(q: &[Vec<f64>]) -> Vec<f64> {
    let n = q.len();
    // rows of the transposed system Q^T pi = 0
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| q[j][i]).collect();
            row.push(0.0);
            row
        })
        .collect();
    m[n - 1] = vec![1.0; n + 1];
    for c in 0..n {
        let p = (c..n)
            .max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs()))
            .unwrap();
        m.swap(c, p);
        let piv = m[c][c];
        assert!(piv.abs() > 1e-300, "singular generator");
        for r in 0..n {
            if r != c {
                let f = m[r][c] / piv;
                if f != 0.0 {
                    for k in c..=n {
                        m[r][k] -= f * m[c][k];
                    }
                }
            }
        }
    }
    (0..n).map(|i| m[i][n] / m[i][i]).collect()
}

/// Generator of the chain under a stationary policy (one action per state).
pub fn generator(sp: &SubProcess, policy: &[ActionPair]) -> Vec<Vec<f64>> {
    let states = oracle_states(sp);
    let n = states.len();
    let mut q = vec![vec![0.0; n]; n];
    for (i, (&s, &a)) in states.iter().zip(policy).enumerate() {
        for (to, rate, _) in oracle_moves(sp, s, a) {
            let j = states.iter().position(|&x| x == to).unwrap();
            q[i][j] += rate;
            q[i][i] -= rate;
        }
    }
    q
}

/// Long-run reward net of charges, and the stationary distribution.
pub fn policy_reward(sp: &SubProcess, eta: EtaPair, policy: &[ActionPair]) -> (f64, Vec<f64>) {
    let states = oracle_states(sp);
    let pi = stationary(&generator(sp, policy));
    let g = states
        .iter()
        .zip(policy)
        .zip(&pi)
        .map(|((&s, &a), p)| {
            let r: f64 = oracle_moves(sp, s, a).iter().map(|m| m.1 * m.2).sum();
            p * (r - oracle_charge(sp, a, eta))
        })
        .sum();
    (g, pi)
}

/// Every deterministic stationary policy, optionally with slot `slot` of
/// state `forced.0` fixed to `forced.2`.
pub fn all_policies(sp: &SubProcess, mode: Mode, forced: Option<(SubState, usize, bool)>) -> Vec<Vec<ActionPair>> {
    let states = oracle_states(sp);
    let choices: Vec<Vec<ActionPair>> = states
        .iter()
        .map(|&s| {
            oracle_actions(sp, s, mode)
                .into_iter()
                .filter(|a| match forced {
                    Some((fs, slot, v)) if fs == s => (if slot == 0 { a.a1 } else { a.a2 }) == v,
                    _ => true,
                })
                .collect()
        })
        .collect();
    let mut out = vec![Vec::new()];
    for c in &choices {
        let mut next = Vec::with_capacity(out.len() * c.len());
        for p in &out {
            for &a in c {
                let mut q = p.clone();
                q.push(a);
                next.push(q);
            }
        }
        out = next;
    }
    out
}

/// Optimal long-run reward over all deterministic stationary policies.
pub fn brute_gain(sp: &SubProcess, mode: Mode, eta: EtaPair, forced: Option<(SubState, usize, bool)>) -> f64 {
    all_policies(sp, mode, forced)
        .iter()
        .map(|p| policy_reward(sp, eta, p).0)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Smallest own multiplier of slot `slot` at `state` at which the forced
/// passive action is as good as the forced active one, by bisection over
/// brute-force gains. The other multiplier is held at `other`.
pub fn brute_index(sp: &SubProcess, mode: Mode, state: SubState, slot: usize, other: f64) -> f64 {
    let policies_on = all_policies(sp, mode, Some((state, slot, true)));
    let policies_off = all_policies(sp, mode, Some((state, slot, false)));
    let eta_at = |x: f64| {
        if slot == 0 {
            EtaPair::new(x, other)
        } else {
            EtaPair::new(other, x)
        }
    };
    let best = |ps: &[Vec<ActionPair>], eta| {
        ps.iter()
            .map(|p| policy_reward(sp, eta, p).0)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let gap = |x: f64| best(&policies_on, eta_at(x)) - best(&policies_off, eta_at(x));
    let (mut lo, mut hi) = (-1e3, 1e3);
    assert!(gap(lo) > 1e-9 && gap(hi) <= 1e-9, "bracket");
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if gap(mid) > 1e-9 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}
