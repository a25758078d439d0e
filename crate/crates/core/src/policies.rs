//! Dispatch rules for a newly arrived customer.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::indices::IndexTable;
use crate::mdp::{state_position, SubState};
use crate::network::{RsService, ServiceCatalog};

/// Snapshot of every service's counting state; `states[j - 1]` is service `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub states: Vec<SubState>,
    pub time: f64,
}

impl SystemState {
    pub fn empty(catalog: &ServiceCatalog) -> Self {
        Self {
            states: vec![SubState::new(0, 0); catalog.len()],
            time: 0.0,
        }
    }

    pub fn of(&self, j: usize) -> SubState {
        self.states[j - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub customer_type: usize,
    pub service: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Policy {
    Bi,
    Jsq,
    Jlq,
    Myopic,
    /// First admissible service in a fixed preference list, falling back to
    /// the smallest admissible id.
    Static(Vec<usize>),
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Bi => "bi",
            Policy::Jsq => "jsq",
            Policy::Jlq => "jlq",
            Policy::Myopic => "myopic",
            Policy::Static(_) => "static",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bi" => Ok(Policy::Bi),
            "jsq" => Ok(Policy::Jsq),
            "jlq" => Ok(Policy::Jlq),
            "myopic" => Ok(Policy::Myopic),
            other => Err(Error::Config(format!(
                "unknown policy {other:?} (expected bi, jsq, jlq or myopic)"
            ))),
        }
    }
}

/// Whether a new type-`l` customer may join `svc` in state `s`.
#[inline]
pub fn is_admissible(svc: &RsService, s: SubState, l: usize, n_max: usize) -> bool {
    if svc.self_shared {
        s.n1 < 2
    } else {
        match svc.slot_of(l) {
            Some(k) => s.count(k) < n_max,
            None => false,
        }
    }
}

/// Waiting customers of the same type as the arriver.
#[inline]
fn own_count(svc: &RsService, s: SubState, l: usize) -> usize {
    if svc.self_shared {
        s.n1
    } else {
        s.count(svc.slot_of(l).unwrap_or(0))
    }
}

/// Waiting customers the arriver could share with.
#[inline]
pub fn partner_count(svc: &RsService, s: SubState, l: usize) -> usize {
    if svc.self_shared {
        s.n1
    } else {
        s.count(1 - svc.slot_of(l).unwrap_or(0))
    }
}

fn services_of(catalog: &ServiceCatalog, l: usize) -> Result<&[usize]> {
    catalog
        .by_type
        .get(l.wrapping_sub(1))
        .map(Vec::as_slice)
        .ok_or_else(|| Error::Config(format!("unknown customer type {l}")))
}

fn no_service(l: usize) -> Error {
    Error::Invariant(format!("no admissible service for type {l}"))
}

pub fn admissible_services(state: &SystemState, l: usize, catalog: &ServiceCatalog) -> Result<Vec<usize>> {
    let out: Vec<usize> = services_of(catalog, l)?
        .iter()
        .copied()
        .filter(|&j| is_admissible(catalog.service(j), state.of(j), l, catalog.n_max))
        .collect();
    if out.is_empty() {
        return Err(no_service(l));
    }
    Ok(out)
}

/// Highest quantified index; ties to the smallest id.
pub fn bi_decide(
    table: &IndexTable,
    state: &SystemState,
    l: usize,
    catalog: &ServiceCatalog,
) -> Result<Decision> {
    let js = services_of(catalog, l)?;
    let row = table
        .entries
        .get(l - 1)
        .filter(|r| r.len() == js.len())
        .ok_or_else(|| Error::Config(format!("index table has no entries for type {l}")))?;
    let mut best: Option<(usize, f64)> = None;
    for (k, &j) in js.iter().enumerate() {
        let svc = catalog.service(j);
        let s = state.of(j);
        if !is_admissible(svc, s, l, catalog.n_max) {
            continue;
        }
        let eta = match state_position(svc.self_shared, catalog.n_max, s) {
            Some(p) => row[k][p],
            None => f64::NEG_INFINITY,
        };
        if eta == f64::NEG_INFINITY {
            continue;
        }
        if best.map_or(true, |(_, b)| eta > b) {
            best = Some((j, eta));
        }
    }
    best.map(|(j, _)| Decision {
        customer_type: l,
        service: j,
    })
    .ok_or_else(|| no_service(l))
}

/// Fewest waiting customers of the arriving type; ties to the smallest id.
pub fn jsq_decide(state: &SystemState, l: usize, catalog: &ServiceCatalog) -> Result<Decision> {
    let mut best: Option<(usize, usize)> = None;
    for &j in services_of(catalog, l)? {
        let svc = catalog.service(j);
        let s = state.of(j);
        if !is_admissible(svc, s, l, catalog.n_max) {
            continue;
        }
        let c = own_count(svc, s, l);
        if best.map_or(true, |(_, b)| c < b) {
            best = Some((j, c));
        }
    }
    best.map(|(j, _)| Decision {
        customer_type: l,
        service: j,
    })
    .ok_or_else(|| no_service(l))
}

/// Most waiting partners; ties to the smallest id.
pub fn jlq_decide(state: &SystemState, l: usize, catalog: &ServiceCatalog) -> Result<Decision> {
    let mut best: Option<(usize, usize)> = None;
    for &j in services_of(catalog, l)? {
        let svc = catalog.service(j);
        let s = state.of(j);
        if !is_admissible(svc, s, l, catalog.n_max) {
            continue;
        }
        let c = partner_count(svc, s, l);
        if best.map_or(true, |(_, b)| c > b) {
            best = Some((j, c));
        }
    }
    best.map(|(j, _)| Decision {
        customer_type: l,
        service: j,
    })
    .ok_or_else(|| no_service(l))
}

/// Highest immediate return `R_j * λ_l` (zero without a waiting partner);
/// ties broken uniformly at random.
pub fn myopic_decide<R: Rng + ?Sized>(
    state: &SystemState,
    l: usize,
    catalog: &ServiceCatalog,
    lambda: f64,
    rng: &mut R,
) -> Result<Decision> {
    let mut best = f64::NEG_INFINITY;
    let mut chosen = None;
    let mut ties = 0u32;
    for &j in services_of(catalog, l)? {
        let svc = catalog.service(j);
        let s = state.of(j);
        if !is_admissible(svc, s, l, catalog.n_max) {
            continue;
        }
        let ret = if partner_count(svc, s, l) > 0 {
            svc.reward * lambda
        } else {
            0.0
        };
        if ret > best {
            best = ret;
            chosen = Some(j);
            ties = 1;
        } else if ret == best {
            ties += 1;
            if rng.random_range(0..ties) == 0 {
                chosen = Some(j);
            }
        }
    }
    chosen
        .map(|j| Decision {
            customer_type: l,
            service: j,
        })
        .ok_or_else(|| no_service(l))
}

pub fn static_decide(
    order: &[usize],
    state: &SystemState,
    l: usize,
    catalog: &ServiceCatalog,
) -> Result<Decision> {
    for &j in order {
        if j == 0 || j > catalog.len() {
            continue;
        }
        let svc = catalog.service(j);
        if svc.slot_of(l).is_some() && is_admissible(svc, state.of(j), l, catalog.n_max) {
            return Ok(Decision {
                customer_type: l,
                service: j,
            });
        }
    }
    let a = admissible_services(state, l, catalog)?;
    Ok(Decision {
        customer_type: l,
        service: a[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn svc(id: usize, types: (usize, usize), reward: f64) -> RsService {
        RsService {
            id,
            types,
            self_shared: types.0 == types.1,
            shared_distance: 1.0,
            reward,
            ns_rewards: (1.0, 1.0),
            reneging_rates: (0.5, 0.5),
            penalties: (0.0, 0.0),
        }
    }

    /// Types 1..3; services 1..3 self-shared, 4 = (1,2), 5 = (1,3).
    fn catalog() -> ServiceCatalog {
        ServiceCatalog::from_services(
            vec![
                svc(1, (1, 1), 10.0),
                svc(2, (2, 2), 10.0),
                svc(3, (3, 3), 10.0),
                svc(4, (1, 2), 15.0),
                svc(5, (3, 1), 15.0),
            ],
            3,
            2,
        )
        .unwrap()
    }

    fn state(c: &ServiceCatalog, s: &[(usize, usize, usize)]) -> SystemState {
        let mut st = SystemState::empty(c);
        for &(j, a, b) in s {
            st.states[j - 1] = SubState::new(a, b);
        }
        st
    }

    #[test]
    fn admissible_filter() {
        let c = catalog();
        assert_eq!(admissible_services(&SystemState::empty(&c), 1, &c).unwrap(), vec![1, 4, 5]);
        let st = state(&c, &[(4, 2, 0)]);
        assert_eq!(admissible_services(&st, 1, &c).unwrap(), vec![1, 5]);
        let st = state(&c, &[(1, 1, 0)]);
        assert_eq!(admissible_services(&st, 1, &c).unwrap(), vec![1, 4, 5]);
        // type 1 sits in slot 2 of service 5
        let st = state(&c, &[(5, 0, 2)]);
        assert_eq!(admissible_services(&st, 1, &c).unwrap(), vec![1, 4]);
    }

    #[test]
    fn jsq_examples() {
        let c = catalog();
        let st = state(&c, &[(1, 1, 0), (4, 2, 0)]);
        assert_eq!(jsq_decide(&st, 1, &c).unwrap().service, 5);
        assert_eq!(jsq_decide(&SystemState::empty(&c), 1, &c).unwrap().service, 1);
        let st = state(&c, &[(4, 2, 0), (5, 0, 2)]);
        assert_eq!(jsq_decide(&st, 1, &c).unwrap().service, 1);
    }

    #[test]
    fn jlq_examples() {
        let c = catalog();
        let st = state(&c, &[(4, 0, 2), (5, 1, 0)]);
        assert_eq!(jlq_decide(&st, 1, &c).unwrap().service, 4);
        assert_eq!(jlq_decide(&SystemState::empty(&c), 1, &c).unwrap().service, 1);
        let st = state(&c, &[(1, 1, 0)]);
        assert_eq!(jlq_decide(&st, 1, &c).unwrap().service, 1);
    }

    #[test]
    fn myopic_prefers_waiting_partner() {
        let c = catalog();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let st = state(&c, &[(4, 0, 1)]);
        let d = myopic_decide(&st, 1, &c, 1.0, &mut rng).unwrap();
        assert_eq!(d.service, 4);
    }

    #[test]
    fn myopic_ties_are_seeded() {
        let c = catalog();
        let st = SystemState::empty(&c);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| myopic_decide(&st, 1, &c, 0.3, &mut rng).unwrap().service)
                .collect::<Vec<_>>()
        };
        let a = draw(7);
        assert_eq!(a, draw(7));
        for j in [1, 4, 5] {
            assert!(a.contains(&j));
        }
    }

    #[test]
    fn policy_names_round_trip() {
        for p in [Policy::Bi, Policy::Jsq, Policy::Jlq, Policy::Myopic] {
            assert_eq!(p.name().parse::<Policy>().unwrap(), p);
        }
        assert!("random".parse::<Policy>().is_err());
    }
}
