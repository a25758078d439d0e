//! Whittle and bivariate indices.
//!
//! The index of a state is the smallest multiplier at which leaving its
//! action slot passive loses no long-run reward. It is located by bisection
//! (false position under the exact solver) on the gain gap `G(active at n) - G(passive at n)`, each side solved with
//! the action at `n` forced.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mdp::{self, EtaPair, Forced, Mode, Solver, SubProcess, SubState, ViParams};
use crate::network::{RsService, ServiceCatalog};

/// Closed-form indices `(η(0,0), η(1,0))` of a self-shared service.
pub fn whittle_index_self_shared(svc: &RsService, lambda: f64) -> Result<(f64, f64)> {
    if !svc.self_shared {
        return Err(Error::Usage(format!(
            "service {} is not self-shared",
            svc.id
        )));
    }
    Ok(self_shared_closed_form(
        lambda,
        svc.reneging_rates.0,
        svc.reward,
        svc.renege_reward(0),
    ))
}

/// `d` is the renege lump `R̄ - C`.
pub fn self_shared_closed_form(lambda: f64, mu: f64, reward: f64, d: f64) -> (f64, f64) {
    let k = lambda / (2.0 * lambda + mu);
    if reward < 2.0 * d {
        (lambda * d, k * ((lambda + mu) * reward - mu * d))
    } else {
        let v = k * (lambda * reward + mu * d);
        (v, v)
    }
}

fn gap_tolerance(solver: Solver, scale: f64) -> f64 {
    match solver {
        Solver::Exact => 1e-12 * scale,
        Solver::ValueIteration(p) => p.sigma * scale,
    }
}

/// `G(slot active at n) - G(slot passive at n)` at multipliers `eta`.
pub fn gain_gap(
    sp: &SubProcess,
    mode: Mode,
    eta: EtaPair,
    state: SubState,
    slot: usize,
    solver: Solver,
) -> Result<f64> {
    if let Solver::Exact = solver {
        let on = mdp::exact_gain(sp, mode, eta, Some(Forced { state, slot, value: true }))?;
        let off = mdp::exact_gain(sp, mode, eta, Some(Forced { state, slot, value: false }))?;
        return Ok(on - off);
    }
    let on = mdp::solve(sp, mode, eta, Some(Forced { state, slot, value: true }), solver)?;
    let off = mdp::solve(sp, mode, eta, Some(Forced { state, slot, value: false }), solver)?;
    Ok(on.gain - off.gain)
}

/// Crossing of slot `slot` at `state` along its own multiplier, the other
/// multiplier held at `other`. Returns `None` when no sign change is found.
pub fn crossing(
    sp: &SubProcess,
    mode: Mode,
    state: SubState,
    slot: usize,
    other: f64,
    solver: Solver,
) -> Result<Option<f64>> {
    let scale = sp.reward_scale() + other.abs();
    let tol = gap_tolerance(solver, scale);
    let eta_at = |x: f64| {
        if slot == 0 {
            EtaPair::new(x, other)
        } else {
            EtaPair::new(other, x)
        }
    };
    let mut gap: Box<dyn FnMut(f64) -> Result<f64>> = match solver {
        Solver::Exact => {
            let mut on = mdp::GainTracker::new(sp, mode, Some(Forced { state, slot, value: true }))?;
            let mut off = mdp::GainTracker::new(sp, mode, Some(Forced { state, slot, value: false }))?;
            Box::new(move |x| Ok(on.gain(eta_at(x))? - off.gain(eta_at(x))?))
        }
        Solver::ValueIteration(_) => Box::new(|x| gain_gap(sp, mode, eta_at(x), state, slot, solver)),
    };
    let mut lo = -scale;
    let mut hi = scale;
    let mut g_lo = None;
    for _ in 0..60 {
        let g = gap(lo)?;
        if g > tol {
            g_lo = Some(g);
            break;
        }
        lo *= 2.0;
    }
    let Some(g_lo) = g_lo else {
        return local_crossing(sp, mode, state, slot, scale, &eta_at, solver);
    };
    let mut found = false;
    for _ in 0..60 {
        if gap(hi)? <= tol {
            found = true;
            break;
        }
        hi *= 2.0;
    }
    if !found {
        return Ok(None);
    }
    let width = match solver {
        Solver::Exact => 1e-10 * scale,
        Solver::ValueIteration(p) => p.sigma * scale,
    };
    if let Solver::Exact = solver {
        // The exact gap is piecewise linear in x, so extrapolating the two
        // latest active points lands on the crossing once both sit on its
        // segment; a probe just left of the landing point closes the bracket.
        let mut left = (lo, g_lo);
        let mut prev: Option<(f64, f64)> = None;
        let mut bisect = true;
        for _ in 0..200 {
            if hi - lo <= width {
                break;
            }
            let mut m = 0.5 * (lo + hi);
            if !bisect {
                if let Some((x0, g0)) = prev {
                    let (x1, g1) = left;
                    if g0 != g1 {
                        let cand = x1 - (g1 - tol) * (x1 - x0) / (g1 - g0);
                        if cand > lo && cand < hi {
                            m = cand;
                        }
                    }
                }
            }
            let gm = gap(m)?;
            if gm > tol {
                prev = Some(left);
                left = (m, gm);
                lo = m;
                bisect = false;
            } else {
                hi = m;
                let probe = hi - 0.5 * width;
                if !bisect && probe > lo {
                    if gap(probe)? > tol {
                        lo = probe;
                        break;
                    }
                    hi = probe;
                }
                bisect = !bisect;
            }
        }
        return Ok(Some(0.5 * (lo + hi)));
    }
    while hi - lo > width {
        let m = 0.5 * (lo + hi);
        if gap(m)? > tol {
            lo = m;
        } else {
            hi = m;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

/// Crossing of the Bellman indifference at `state` itself, for states the
/// gain cannot see because they are transient under every policy.
fn local_crossing(
    sp: &SubProcess,
    mode: Mode,
    state: SubState,
    slot: usize,
    scale: f64,
    eta_at: &dyn Fn(f64) -> EtaPair,
    solver: Solver,
) -> Result<Option<f64>> {
    let active = |x: f64| -> Result<bool> {
        let sol = mdp::solve(sp, mode, eta_at(x), None, solver)?;
        Ok(sol
            .actions_at(state)
            .is_some_and(|acts| acts.iter().all(|a| a.get(slot))))
    };
    let (mut lo, mut hi) = (-scale, scale);
    let mut k = 0;
    while !active(lo)? {
        lo *= 2.0;
        k += 1;
        if k == 60 {
            return Ok(None);
        }
    }
    k = 0;
    while active(hi)? {
        hi *= 2.0;
        k += 1;
        if k == 60 {
            return Ok(None);
        }
    }
    let width = match solver {
        Solver::Exact => 1e-10 * scale,
        Solver::ValueIteration(p) => p.sigma * scale,
    };
    while hi - lo > width {
        let m = 0.5 * (lo + hi);
        if active(m)? {
            lo = m;
        } else {
            hi = m;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

/// Whittle indices of every controllable state for the customer type in
/// slot `role`, keyed by states of the unmirrored service.
pub fn whittle_indices(sp: &SubProcess, role: usize, solver: Solver) -> Result<Vec<(SubState, f64)>> {
    let (view, flip) = if role == 1 && !sp.self_shared {
        (sp.mirrored(), true)
    } else {
        (*sp, false)
    };
    let mut out = Vec::new();
    for s in view.states() {
        if !view.controllable(s, 0) {
            continue;
        }
        let eta = if view.lambda.0 <= 0.0 {
            0.0
        } else {
            crossing(&view, Mode::Whittle, s, 0, 0.0, solver)?.ok_or_else(|| {
                Error::Numeric(format!("no index bracket found at state {s}"))
            })?
        };
        out.push((if flip { s.swapped() } else { s }, eta));
    }
    Ok(out)
}

/// Numeric Whittle indices of `svc` for the type in slot `role` (0 or 1).
pub fn whittle_index_numeric(
    svc: &RsService,
    n_max: usize,
    arrivals: (f64, f64),
    role: usize,
    params: ViParams,
) -> Result<Vec<(SubState, f64)>> {
    let sp = SubProcess::from_service(svc, n_max, arrivals);
    whittle_indices(&sp, role, Solver::ValueIteration(params))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexTable {
    pub n_max: usize,
    pub catalog_hash: String,
    /// Hash of catalog, arrival rates and solver settings.
    pub key: String,
    pub beta: f64,
    pub sigma: f64,
    pub solver: String,
    /// `entries[l - 1][k][p]`: type `l`, `k`-th service of that type, state position `p`.
    pub entries: Vec<Vec<Vec<f64>>>,
}

impl IndexTable {
    /// Index of the SS pair, `-inf` on uncontrollable or unreachable states.
    pub fn get(&self, l: usize, k: usize, pos: Option<usize>) -> f64 {
        match pos {
            Some(p) => self.entries[l - 1][k]
                .get(p)
                .copied()
                .unwrap_or(f64::NEG_INFINITY),
            None => f64::NEG_INFINITY,
        }
    }

    pub fn n_finite(&self) -> usize {
        self.entries
            .iter()
            .flatten()
            .flatten()
            .filter(|x| x.is_finite())
            .count()
    }

    pub fn to_text(&self, catalog: &ServiceCatalog) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# ridematch index table v1");
        let _ = writeln!(s, "# key={}", self.key);
        let _ = writeln!(s, "# catalog={}", self.catalog_hash);
        let _ = writeln!(s, "# n_max={}", self.n_max);
        let _ = writeln!(s, "# beta={}", self.beta);
        let _ = writeln!(s, "# sigma={}", self.sigma);
        let _ = writeln!(s, "# solver={}", self.solver);
        s.push_str("type,service,n1,n2,eta\n");
        for (li, per) in self.entries.iter().enumerate() {
            for (k, vals) in per.iter().enumerate() {
                let j = catalog.by_type[li][k];
                let svc = catalog.service(j);
                let sp_states = state_list(svc.self_shared, self.n_max);
                for (p, v) in vals.iter().enumerate() {
                    let st = sp_states[p];
                    let _ = writeln!(s, "{},{},{},{},{}", li + 1, j, st.n1, st.n2, v);
                }
            }
        }
        s
    }

    pub fn save(&self, path: &Path, catalog: &ServiceCatalog) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_text(catalog))?;
        Ok(())
    }

    /// Loads a cached table and refuses it unless its key matches `expected_key`.
    pub fn load(path: &Path, catalog: &ServiceCatalog, expected_key: &str) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut meta = std::collections::HashMap::new();
        let mut rows = Vec::new();
        for line in text.lines() {
            if let Some(h) = line.strip_prefix("# ") {
                if let Some((k, v)) = h.split_once('=') {
                    meta.insert(k.to_string(), v.to_string());
                }
            } else if !line.starts_with("type,") && !line.is_empty() {
                rows.push(line);
            }
        }
        let get = |k: &str| {
            meta.get(k).cloned().ok_or_else(|| Error::Data {
                path: path.display().to_string(),
                msg: format!("missing header field {k}"),
            })
        };
        let key = get("key")?;
        if key != expected_key {
            return Err(Error::Config(format!(
                "stale index cache {} (key {key}, expected {expected_key}); rebuild with --rebuild-index",
                path.display()
            )));
        }
        let n_max: usize = get("n_max")?.parse().map_err(|_| Error::Config("bad n_max".into()))?;
        let mut entries = empty_entries(catalog, n_max);
        let bad = |m: String| Error::Data {
            path: path.display().to_string(),
            msg: m,
        };
        let mut filled = 0usize;
        for r in rows {
            let f: Vec<&str> = r.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("bad row {r:?}")));
            }
            let p = |x: &str| x.parse::<usize>().map_err(|_| bad(format!("bad row {r:?}")));
            let (l, j, n1, n2) = (p(f[0])?, p(f[1])?, p(f[2])?, p(f[3])?);
            let v: f64 = f[4].parse().map_err(|_| bad(format!("bad value in {r:?}")))?;
            let k = catalog
                .by_type
                .get(l.wrapping_sub(1))
                .and_then(|v| v.iter().position(|&x| x == j))
                .ok_or_else(|| bad(format!("unknown (type, service) in {r:?}")))?;
            let pos = mdp::state_position(catalog.service(j).self_shared, n_max, SubState::new(n1, n2))
                .ok_or_else(|| bad(format!("unreachable state in {r:?}")))?;
            entries[l - 1][k][pos] = v;
            filled += 1;
        }
        let expected: usize = entries.iter().flatten().map(Vec::len).sum();
        if filled != expected {
            return Err(bad(format!("{filled} rows, expected {expected}")));
        }
        Ok(Self {
            n_max,
            catalog_hash: get("catalog")?,
            key,
            beta: get("beta")?.parse().map_err(|_| bad("bad beta".into()))?,
            sigma: get("sigma")?.parse().map_err(|_| bad("bad sigma".into()))?,
            solver: get("solver")?,
            entries,
        })
    }
}

fn state_list(self_shared: bool, n_max: usize) -> Vec<SubState> {
    SubProcess {
        self_shared,
        n_max,
        lambda: (0.0, 0.0),
        mu: (0.0, 0.0),
        reward: 0.0,
        renege: (0.0, 0.0),
    }
    .states()
}

fn empty_entries(catalog: &ServiceCatalog, n_max: usize) -> Vec<Vec<Vec<f64>>> {
    catalog
        .by_type
        .iter()
        .map(|js| {
            js.iter()
                .map(|&j| {
                    let n = if catalog.service(j).self_shared { 2 } else { 2 * n_max + 1 };
                    vec![f64::NEG_INFINITY; n]
                })
                .collect()
        })
        .collect()
}

fn solver_name(solver: Solver) -> (String, f64, f64) {
    match solver {
        Solver::Exact => ("exact".into(), f64::NAN, f64::NAN),
        Solver::ValueIteration(p) => ("value-iteration".into(), p.beta, p.sigma),
    }
}

/// Cache key of a table for `catalog` under per-type `arrivals`.
pub fn table_key(catalog: &ServiceCatalog, arrivals: &[f64], solver: Solver, beta: f64, sigma: f64) -> String {
    let mut h = Sha256::new();
    h.update(catalog.hash());
    for a in arrivals {
        h.update(a.to_le_bytes());
    }
    let (name, _, _) = solver_name(solver);
    h.update(format!("solver={name};beta={beta};sigma={sigma}"));
    hex::encode(h.finalize())
}

/// Indices of every (type, service, state) for arrival rates `arrivals`
/// (indexed by type id - 1). Self-shared services use the closed form.
/// `beta` and `sigma` are recorded in the header; with [`Solver::Exact`] they
/// are informational only.
pub fn build_index_table(
    catalog: &ServiceCatalog,
    arrivals: &[f64],
    solver: Solver,
    beta: f64,
    sigma: f64,
) -> Result<IndexTable> {
    if arrivals.len() != catalog.n_types() {
        return Err(Error::Config(format!(
            "{} arrival rates for {} types",
            arrivals.len(),
            catalog.n_types()
        )));
    }
    let n_max = catalog.n_max;
    let per_service: Vec<Result<[Vec<f64>; 2]>> = catalog
        .services
        .par_iter()
        .map(|svc| {
            let (l1, l2) = svc.types;
            let sp = SubProcess::from_service(svc, n_max, (arrivals[l1 - 1], arrivals[l2 - 1]));
            let npos = sp.n_states();
            if svc.self_shared {
                let (a, b) = whittle_index_self_shared(svc, arrivals[l1 - 1])?;
                return Ok([vec![a, b], Vec::new()]);
            }
            let mut out = [vec![f64::NEG_INFINITY; npos], vec![f64::NEG_INFINITY; npos]];
            for (role, slot_out) in out.iter_mut().enumerate() {
                let idx = whittle_indices(&sp, role, solver).map_err(|e| {
                    Error::Numeric(format!(
                        "type {} service {}: {e}",
                        if role == 0 { l1 } else { l2 },
                        svc.id
                    ))
                })?;
                for (s, v) in idx {
                    slot_out[sp.position(s).expect("reachable")] = v;
                }
            }
            Ok(out)
        })
        .collect();
    let mut entries = empty_entries(catalog, n_max);
    let mut cursor = vec![0usize; catalog.n_types()];
    for (svc, res) in catalog.services.iter().zip(per_service) {
        let res = res?;
        let (l1, l2) = svc.types;
        // services are stored in id order, matching by_type order
        let k = cursor[l1 - 1];
        entries[l1 - 1][k] = res[0].clone();
        cursor[l1 - 1] += 1;
        if !svc.self_shared {
            let k = cursor[l2 - 1];
            entries[l2 - 1][k] = res[1].clone();
            cursor[l2 - 1] += 1;
        }
    }
    let (name, _, _) = solver_name(solver);
    Ok(IndexTable {
        n_max,
        catalog_hash: catalog.hash(),
        key: table_key(catalog, arrivals, solver, beta, sigma),
        beta,
        sigma,
        solver: name,
        entries,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryCurve {
    pub state: SubState,
    /// 1 or 2.
    pub action_slot: usize,
    /// (other multiplier, crossing of this slot's multiplier)
    pub samples: Vec<(f64, Option<f64>)>,
}

/// Crossings of each controllable state's slot-`slot` multiplier over a grid
/// of the other multiplier. `slot` is 1 or 2.
pub fn boundary_sweep_slot(
    sp: &SubProcess,
    slot: usize,
    grid: &[f64],
    solver: Solver,
) -> Result<Vec<BoundaryCurve>> {
    if sp.self_shared {
        return Err(Error::Usage("boundary sweep needs a two-type service".into()));
    }
    if slot != 1 && slot != 2 {
        return Err(Error::Usage(format!("action slot must be 1 or 2, got {slot}")));
    }
    let states: Vec<SubState> = sp
        .states()
        .into_iter()
        .filter(|&s| sp.controllable(s, slot - 1))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..states.len())
        .flat_map(|i| (0..grid.len()).map(move |g| (i, g)))
        .collect();
    let found: Vec<Result<Option<f64>>> = jobs
        .par_iter()
        .map(|&(i, g)| crossing(sp, Mode::Bivariate, states[i], slot - 1, grid[g], solver))
        .collect();
    let mut curves: Vec<BoundaryCurve> = states
        .iter()
        .map(|&s| BoundaryCurve {
            state: s,
            action_slot: slot,
            samples: Vec::with_capacity(grid.len()),
        })
        .collect();
    for (&(i, g), r) in jobs.iter().zip(found) {
        curves[i].samples.push((grid[g], r?));
    }
    Ok(curves)
}

/// Both slots' boundary curves; slot 1 over `grid` of η₂ and slot 2 over the
/// same grid of η₁.
pub fn boundary_sweep(
    svc: &RsService,
    n_max: usize,
    arrivals: (f64, f64),
    grid: &[f64],
    solver: Solver,
) -> Result<Vec<BoundaryCurve>> {
    let sp = SubProcess::from_service(svc, n_max, arrivals);
    let mut out = boundary_sweep_slot(&sp, 1, grid, solver)?;
    out.extend(boundary_sweep_slot(&sp, 2, grid, solver)?);
    Ok(out)
}

pub fn curves_to_text(curves: &[BoundaryCurve]) -> String {
    let mut s = String::from("n1,n2,slot,other_eta,crossing\n");
    for c in curves {
        for (x, y) in &c.samples {
            let y = y.map(|v| v.to_string()).unwrap_or_else(|| "NA".into());
            let _ = writeln!(s, "{},{},{},{},{}", c.state.n1, c.state.n2, c.action_slot, x, y);
        }
    }
    s
}

/// Largest minus smallest crossing of a curve, over samples that exist.
pub fn crossing_spread(c: &BoundaryCurve) -> Option<f64> {
    let ys: Vec<f64> = c.samples.iter().filter_map(|s| s.1).collect();
    if ys.len() != c.samples.len() || ys.is_empty() {
        return None;
    }
    let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some(hi - lo)
}

/// Whether one ordering of states by crossing holds at every grid point.
pub fn nested(curves: &[BoundaryCurve]) -> bool {
    let n = match curves.first() {
        Some(c) => c.samples.len(),
        None => return true,
    };
    let order_at = |g: usize| -> Option<Vec<usize>> {
        let vals: Option<Vec<f64>> = curves.iter().map(|c| c.samples.get(g).and_then(|s| s.1)).collect();
        let vals = vals?;
        let mut idx: Vec<usize> = (0..vals.len()).collect();
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        Some(idx)
    };
    let first = match order_at(0) {
        Some(o) => o,
        None => return false,
    };
    (1..n).all(|g| order_at(g).as_ref() == Some(&first))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateCheck {
    pub state: SubState,
    pub limit_crossing: Option<f64>,
    pub whittle: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub checks: Vec<StateCheck>,
    pub ordering_consistent: bool,
    pub failures: Vec<SubState>,
}

impl ConsistencyReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.ordering_consistent
    }
}

/// Compares each curve's crossing at its most negative grid point against the
/// Whittle index of the same state, and the two priority orderings.
pub fn verify_priority_consistency(
    curves: &[BoundaryCurve],
    whittle: &[(SubState, f64)],
    tol: f64,
) -> ConsistencyReport {
    let mut checks = Vec::new();
    let mut failures = Vec::new();
    let mut lim = Vec::new();
    let mut wh = Vec::new();
    for c in curves {
        let limit = c
            .samples
            .iter()
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .and_then(|s| s.1);
        let w = whittle
            .iter()
            .find(|(s, _)| *s == c.state)
            .map(|x| x.1)
            .unwrap_or(f64::NAN);
        let ok = matches!(limit, Some(x) if (x - w).abs() <= tol);
        if !ok {
            failures.push(c.state);
        }
        if let Some(x) = limit {
            lim.push(x);
            wh.push(w);
        }
        checks.push(StateCheck {
            state: c.state,
            limit_crossing: limit,
            whittle: w,
            ok,
        });
    }
    let order = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        idx
    };
    let ordering_consistent = lim.len() == curves.len() && order(&lim) == order(&wh);
    ConsistencyReport {
        checks,
        ordering_consistent,
        failures,
    }
}
