//! Continuous-time event simulation of the full counting process.
//!
//! The next event comes from an exponential race over one arrival stream per
//! customer type and one renege stream per (service, slot), the latter with
//! rate `n * μ`. Stream rates live in a sum tree whose internal nodes are
//! recomputed from their children on every update, so sampling never drifts.
//! Piecewise-constant arrival rates are handled by cutting the race at every
//! profile edge and re-sampling with the new rates.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::indices::IndexTable;
use crate::mdp::SubState;
use crate::network::{ArrivalProfile, NetworkSpec, ServiceCatalog};
use crate::policies::{self, Policy, SystemState};

/// Name of the generator behind every seeded run.
pub const RNG_NAME: &str = "chacha8";

/// Binary sum tree over nonnegative stream rates.
#[derive(Debug, Clone)]
pub struct RateTree {
    size: usize,
    n: usize,
    tree: Vec<f64>,
}

impl RateTree {
    pub fn new(n: usize) -> Self {
        let size = n.next_power_of_two().max(1);
        Self {
            size,
            n,
            tree: vec![0.0; 2 * size],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn total(&self) -> f64 {
        self.tree[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.tree[self.size + i]
    }

    pub fn set(&mut self, i: usize, rate: f64) {
        debug_assert!(rate >= 0.0);
        let mut k = self.size + i;
        self.tree[k] = rate;
        while k > 1 {
            k >>= 1;
            self.tree[k] = self.tree[2 * k] + self.tree[2 * k + 1];
        }
    }

    /// Stream whose cumulative-rate interval contains `u * total`, `u` in [0,1).
    pub fn find(&self, u: f64) -> usize {
        let mut x = u * self.total();
        let mut k = 1;
        while k < self.size {
            let left = self.tree[2 * k];
            if x < left || self.tree[2 * k + 1] <= 0.0 {
                k = 2 * k;
            } else {
                x -= left;
                k = 2 * k + 1;
            }
        }
        k - self.size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Arrival { customer_type: usize },
    Renege { service: usize, slot: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampled {
    Event { kind: EventKind, time: f64 },
    /// The race crossed an interval edge (or the horizon) first.
    Edge { time: f64 },
}

/// One step of the exponential race starting at `now`, cut at `edge`.
pub fn sample_next_event<R: Rng + ?Sized>(
    tree: &RateTree,
    n_types: usize,
    now: f64,
    edge: f64,
    rng: &mut R,
) -> Sampled {
    let total = tree.total();
    if !(total > 0.0) {
        return Sampled::Edge { time: edge };
    }
    let e: f64 = rng.sample(Exp1);
    let t = now + e / total;
    if t >= edge {
        return Sampled::Edge { time: edge };
    }
    let i = tree.find(rng.random::<f64>());
    Sampled::Event {
        kind: stream_kind(i, n_types),
        time: t,
    }
}

fn stream_kind(i: usize, n_types: usize) -> EventKind {
    if i < n_types {
        EventKind::Arrival { customer_type: i + 1 }
    } else {
        let r = i - n_types;
        EventKind::Renege {
            service: r / 2 + 1,
            slot: r % 2,
        }
    }
}

/// Streaming count, mean and variance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Welford {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationMetrics {
    pub horizon: f64,
    pub warmup: f64,
    /// Reward earned after the warmup.
    pub cumulative_reward: f64,
    pub average_reward: f64,
    /// Waiting times of customers departing after the warmup.
    pub delays: Welford,
    /// Whole-run counts.
    pub arrivals: u64,
    pub matched_pairs: u64,
    pub reneges: u64,
    pub residual: u64,
    pub events: u64,
    /// Time-average number of waiting customers after the warmup.
    pub mean_waiting: f64,
    /// Per-service reward and time-average waiting count after the warmup.
    pub service_reward: Vec<f64>,
    pub service_waiting: Vec<f64>,
    /// Reward per minute in each wall-clock hour of the run.
    pub hourly_reward_rate: Vec<f64>,
}

impl SimulationMetrics {
    pub fn conserves_customers(&self) -> bool {
        self.arrivals == 2 * self.matched_pairs + self.reneges + self.residual
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub horizon: f64,
    pub warmup: f64,
    pub seed: u64,
    /// Count reneged customers in the delay average.
    pub include_reneged_delays: bool,
    /// Stop early after this many events; the run then ends at that event.
    pub max_events: Option<u64>,
}

impl SimOptions {
    pub fn stationary(horizon: f64, seed: u64) -> Self {
        Self {
            horizon,
            warmup: 0.1 * horizon,
            seed,
            include_reneged_delays: true,
            max_events: None,
        }
    }
}

/// Policy plus whatever it needs at decision time.
#[derive(Debug, Clone, Copy)]
pub struct Dispatch<'a> {
    pub policy: &'a Policy,
    /// One table per profile interval, or a single table for all intervals.
    pub tables: &'a [IndexTable],
}

const TRACE: usize = 16;

struct Engine<'a> {
    catalog: &'a ServiceCatalog,
    profiles: Vec<&'a ArrivalProfile>,
    state: SystemState,
    queues: Vec<[VecDeque<f64>; 2]>,
    tree: RateTree,
    trace: VecDeque<(f64, EventKind)>,
}

impl<'a> Engine<'a> {
    fn renege_stream(&self, j: usize, k: usize) -> usize {
        self.profiles.len() + 2 * (j - 1) + k
    }

    fn refresh_renege(&mut self, j: usize, k: usize) {
        let svc = self.catalog.service(j);
        let mu = if k == 0 { svc.reneging_rates.0 } else { svc.reneging_rates.1 };
        let n = self.queues[j - 1][k].len();
        let i = self.renege_stream(j, k);
        self.tree.set(i, n as f64 * mu);
    }

    fn set_arrival_rates(&mut self, t: f64) {
        for (i, p) in self.profiles.iter().enumerate() {
            self.tree.set(i, p.rate_at(t));
        }
    }

    fn violation(&self, msg: String) -> Error {
        let tail: Vec<String> = self
            .trace
            .iter()
            .map(|(t, e)| format!("{t:.4}:{e:?}"))
            .collect();
        Error::Invariant(format!("{msg}; last events: [{}]", tail.join(", ")))
    }

    fn check_state(&self, j: usize) -> Result<()> {
        let s = self.state.of(j);
        let svc = self.catalog.service(j);
        let ok = if svc.self_shared {
            s.n2 == 0 && s.n1 <= 1
        } else {
            s.n1 * s.n2 == 0 && s.n1 <= self.catalog.n_max && s.n2 <= self.catalog.n_max
        };
        if ok {
            Ok(())
        } else {
            Err(self.violation(format!("service {j} reached state {s}")))
        }
    }

    fn sync_state(&mut self, j: usize) {
        let q = &self.queues[j - 1];
        self.state.states[j - 1] = SubState::new(q[0].len(), q[1].len());
    }
}

/// Runs one replication.
pub fn simulate(
    net: &NetworkSpec,
    catalog: &ServiceCatalog,
    dispatch: Dispatch<'_>,
    opts: &SimOptions,
) -> Result<SimulationMetrics> {
    if !(opts.horizon > opts.warmup && opts.warmup >= 0.0) {
        return Err(Error::Config(format!(
            "need horizon > warmup >= 0, got ({}, {})",
            opts.horizon, opts.warmup
        )));
    }
    if net.len() != catalog.n_types() {
        return Err(Error::Config("network and catalog disagree on type count".into()));
    }
    let profiles: Vec<&ArrivalProfile> = net.types.iter().map(|t| &t.arrival_profile).collect();
    let first = profiles[0];
    if profiles
        .iter()
        .any(|p| p.interval != first.interval || p.len() != first.len())
    {
        return Err(Error::Config("arrival profiles must share their intervals".into()));
    }
    if *dispatch.policy == Policy::Bi {
        if dispatch.tables.is_empty() {
            return Err(Error::Config("BI policy needs an index table".into()));
        }
        if dispatch.tables.len() != 1 && dispatch.tables.len() != first.len() {
            return Err(Error::Config(format!(
                "{} index tables for {} profile intervals",
                dispatch.tables.len(),
                first.len()
            )));
        }
        let hash = catalog.hash();
        if let Some(t) = dispatch.tables.iter().find(|t| t.catalog_hash != hash) {
            return Err(Error::Config(format!(
                "index table built for catalog {} but catalog is {hash}",
                t.catalog_hash
            )));
        }
    }
    let n_types = profiles.len();
    let n_services = catalog.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut eng = Engine {
        catalog,
        profiles,
        state: SystemState::empty(catalog),
        queues: (0..n_services).map(|_| [VecDeque::new(), VecDeque::new()]).collect(),
        tree: RateTree::new(n_types + 2 * n_services),
        trace: VecDeque::with_capacity(TRACE),
    };
    eng.set_arrival_rates(0.0);

    let n_hours = (opts.horizon / 60.0).ceil() as usize;
    let n_bins = n_hours.max(1);
    let mut hourly = vec![0.0; n_bins];
    let mut m = SimulationMetrics {
        horizon: opts.horizon,
        warmup: opts.warmup,
        cumulative_reward: 0.0,
        average_reward: 0.0,
        delays: Welford::default(),
        arrivals: 0,
        matched_pairs: 0,
        reneges: 0,
        residual: 0,
        events: 0,
        mean_waiting: 0.0,
        service_reward: vec![0.0; n_services],
        service_waiting: vec![0.0; n_services],
        hourly_reward_rate: Vec::new(),
    };
    let mut waiting_area = vec![0.0; n_services];
    let mut last_change = vec![opts.warmup; n_services];
    let mut t = 0.0;
    let mut end = opts.horizon;

    // area accounting for the waiting count of service j up to time `now`
    let account = |j: usize, now: f64, n: usize, area: &mut [f64], last: &mut [f64]| {
        if now > opts.warmup {
            let from = last[j - 1].max(opts.warmup);
            area[j - 1] += n as f64 * (now - from);
            last[j - 1] = now;
        }
    };

    loop {
        let edge = first.next_edge(t).min(opts.horizon);
        match sample_next_event(&eng.tree, n_types, t, edge, &mut rng) {
            Sampled::Edge { time } => {
                t = time;
                if t >= opts.horizon {
                    break;
                }
                eng.set_arrival_rates(t);
                continue;
            }
            Sampled::Event { kind, time } => {
                t = time;
                m.events += 1;
                if eng.trace.len() == TRACE {
                    eng.trace.pop_front();
                }
                eng.trace.push_back((t, kind));
                let measured = t >= opts.warmup;
                match kind {
                    EventKind::Arrival { customer_type: l } => {
                        m.arrivals += 1;
                        eng.state.time = t;
                        let interval = first.index_at(t);
                        let d = match dispatch.policy {
                            Policy::Bi => {
                                let table = &dispatch.tables[interval.min(dispatch.tables.len() - 1)];
                                policies::bi_decide(table, &eng.state, l, catalog)?
                            }
                            Policy::Jsq => policies::jsq_decide(&eng.state, l, catalog)?,
                            Policy::Jlq => policies::jlq_decide(&eng.state, l, catalog)?,
                            Policy::Myopic => {
                                let lam = eng.profiles[l - 1].rates[interval];
                                policies::myopic_decide(&eng.state, l, catalog, lam, &mut rng)?
                            }
                            Policy::Static(order) => {
                                policies::static_decide(order, &eng.state, l, catalog)?
                            }
                        };
                        let j = d.service;
                        let svc = catalog.service(j);
                        if !policies::is_admissible(svc, eng.state.of(j), l, catalog.n_max) {
                            return Err(eng.violation(format!(
                                "type {l} routed to uncontrollable service {j} at {}",
                                eng.state.of(j)
                            )));
                        }
                        let own = if svc.self_shared { 0 } else { svc.slot_of(l).unwrap() };
                        let partner = if svc.self_shared { 0 } else { 1 - own };
                        let s = eng.state.of(j);
                        account(j, t, s.n1 + s.n2, &mut waiting_area, &mut last_change);
                        if !eng.queues[j - 1][partner].is_empty() {
                            let since = eng.queues[j - 1][partner].pop_front().unwrap();
                            m.matched_pairs += 1;
                            if measured {
                                m.cumulative_reward += svc.reward;
                                m.service_reward[j - 1] += svc.reward;
                                m.delays.push(t - since);
                                m.delays.push(0.0);
                            }
                            let h = ((t / 60.0) as usize).min(n_bins - 1);
                            hourly[h] += svc.reward;
                            eng.refresh_renege(j, partner);
                        } else {
                            eng.queues[j - 1][own].push_back(t);
                            eng.refresh_renege(j, own);
                        }
                        eng.sync_state(j);
                        eng.check_state(j)?;
                    }
                    EventKind::Renege { service: j, slot: k } => {
                        let svc = catalog.service(j);
                        let s = eng.state.of(j);
                        account(j, t, s.n1 + s.n2, &mut waiting_area, &mut last_change);
                        let q = &mut eng.queues[j - 1][k];
                        if q.is_empty() {
                            return Err(eng.violation(format!("renege from empty queue at service {j}")));
                        }
                        let pick = rng.random_range(0..q.len());
                        let since = q.remove(pick).unwrap();
                        m.reneges += 1;
                        let lump = svc.renege_reward(k);
                        if measured {
                            m.cumulative_reward += lump;
                            m.service_reward[j - 1] += lump;
                            if opts.include_reneged_delays {
                                m.delays.push(t - since);
                            }
                        }
                        let h = ((t / 60.0) as usize).min(n_bins - 1);
                        hourly[h] += lump;
                        eng.refresh_renege(j, k);
                        eng.sync_state(j);
                        eng.check_state(j)?;
                    }
                }
                if let Some(cap) = opts.max_events {
                    if m.events >= cap {
                        end = t;
                        break;
                    }
                }
            }
        }
    }
    let window = end - opts.warmup;
    if !(window > 0.0) {
        return Err(Error::Config("event cap reached before the warmup ended".into()));
    }
    let mut total_area = 0.0;
    for j in 1..=n_services {
        let s = eng.state.of(j);
        account(j, end, s.n1 + s.n2, &mut waiting_area, &mut last_change);
        m.service_waiting[j - 1] = waiting_area[j - 1] / window;
        total_area += waiting_area[j - 1];
    }
    m.horizon = end;
    m.mean_waiting = total_area / window;
    m.average_reward = m.cumulative_reward / window;
    m.residual = eng.queues.iter().map(|q| (q[0].len() + q[1].len()) as u64).sum();
    let used = ((end / 60.0).ceil() as usize).clamp(1, n_bins);
    m.hourly_reward_rate = hourly[..used]
        .iter()
        .enumerate()
        .map(|(h, r)| {
            let len = (end - 60.0 * h as f64).min(60.0);
            if len > 0.0 {
                r / len
            } else {
                0.0
            }
        })
        .collect();
    if !m.conserves_customers() {
        return Err(Error::Invariant(format!(
            "customer conservation failed: {} arrivals vs {} matches, {} reneges, {} waiting",
            m.arrivals, m.matched_pairs, m.reneges, m.residual
        )));
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub mean: f64,
    pub half_width: f64,
    /// Half-width above 3% of the mean.
    pub flagged: bool,
}

/// Pooled mean and 95% Student-t half-width.
pub fn summarize(name: &str, xs: &[f64]) -> MetricSummary {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n.max(1) as f64;
    let half_width = if n < 2 {
        f64::INFINITY
    } else {
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .expect("positive degrees of freedom")
            .inverse_cdf(0.975);
        t * (var / n as f64).sqrt()
    };
    MetricSummary {
        name: name.to_string(),
        mean,
        half_width,
        flagged: half_width > 0.03 * mean.abs(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub reps: Vec<SimulationMetrics>,
    pub average_reward: MetricSummary,
    pub mean_delay: MetricSummary,
    pub hourly_reward_rate: Vec<MetricSummary>,
}

/// `n_reps` independent runs with seeds `base_seed + i`, pooled in
/// replication order.
pub fn replicate(
    net: &NetworkSpec,
    catalog: &ServiceCatalog,
    dispatch: Dispatch<'_>,
    opts: &SimOptions,
    n_reps: usize,
) -> Result<ReplicationSummary> {
    if n_reps < 2 {
        return Err(Error::Config("need at least 2 replications".into()));
    }
    let reps: Vec<SimulationMetrics> = (0..n_reps)
        .into_par_iter()
        .map(|i| {
            let o = SimOptions {
                seed: opts.seed.wrapping_add(i as u64),
                ..*opts
            };
            simulate(net, catalog, dispatch, &o)
        })
        .collect::<Result<_>>()?;
    let rewards: Vec<f64> = reps.iter().map(|r| r.average_reward).collect();
    let delays: Vec<f64> = reps.iter().map(|r| r.delays.mean).collect();
    let n_hours = reps.iter().map(|r| r.hourly_reward_rate.len()).min().unwrap_or(0);
    let hourly = (0..n_hours)
        .map(|h| {
            let xs: Vec<f64> = reps.iter().map(|r| r.hourly_reward_rate[h]).collect();
            summarize(&format!("hour_{h}"), &xs)
        })
        .collect();
    Ok(ReplicationSummary {
        average_reward: summarize("average_reward", &rewards),
        mean_delay: summarize("mean_delay", &delays),
        hourly_reward_rate: hourly,
        reps,
    })
}
