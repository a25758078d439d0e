//! Transportation networks and the ride-sharing service catalog.
//!
//! A network is a set of customer types, each with a destination centre in
//! the plane (the source sits at the origin) and an arrival-rate profile.
//! [`build_services`] turns a network plus economic parameters into the list
//! of RS services: one self-shared service per type followed by every pair of
//! types that can share a ride in at least one drop order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EconParams {
    /// Fare per unit distance.
    pub b: f64,
    /// Sharing surcharge factor, in (1, 2).
    pub gamma: f64,
    /// Normalizing reward constant.
    pub q: f64,
    /// Reneging-rate coefficient on the shared reward.
    pub upsilon: f64,
    /// Reneging-rate coefficient on the distance.
    pub beta: f64,
    /// Penalty factor.
    pub zeta: f64,
    /// Max waiting customers per type per service.
    pub n_max: usize,
}

impl EconParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parameter(m.to_string()));
        if !(self.gamma > 1.0 && self.gamma < 2.0) {
            return bad("gamma must lie in (1, 2)");
        }
        for (name, v) in [
            ("b", self.b),
            ("q", self.q),
            ("upsilon", self.upsilon),
            ("beta", self.beta),
            ("zeta", self.zeta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_max < 1 {
            return bad("n_max must be at least 1");
        }
        if self.beta <= self.upsilon * self.gamma * self.b {
            return Err(Error::Parameter(format!(
                "beta = {} must exceed upsilon*gamma*b = {}",
                self.beta,
                self.upsilon * self.gamma * self.b
            )));
        }
        Ok(())
    }

    pub fn with_zeta(mut self, zeta: f64) -> Self {
        self.zeta = zeta;
        self
    }
}

/// Cyclic piecewise-constant rate function of wall-clock minutes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalProfile {
    /// Interval length in minutes; infinite for a constant profile.
    pub interval: f64,
    pub rates: Vec<f64>,
}

impl ArrivalProfile {
    pub fn constant(rate: f64) -> Self {
        Self {
            interval: f64::INFINITY,
            rates: vec![rate],
        }
    }

    pub fn hourly(rates: Vec<f64>) -> Self {
        Self {
            interval: 60.0,
            rates,
        }
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn index_at(&self, t: f64) -> usize {
        if self.interval.is_infinite() {
            0
        } else {
            ((t / self.interval).floor() as usize) % self.rates.len()
        }
    }

    pub fn rate_at(&self, t: f64) -> f64 {
        self.rates[self.index_at(t)]
    }

    /// First interval edge strictly after `t`.
    pub fn next_edge(&self, t: f64) -> f64 {
        if self.interval.is_infinite() {
            f64::INFINITY
        } else {
            ((t / self.interval).floor() + 1.0) * self.interval
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomerType {
    /// 1-based.
    pub id: usize,
    pub center: (f64, f64),
    pub distance: f64,
    pub demand_weight: f64,
    pub arrival_profile: ArrivalProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub types: Vec<CustomerType>,
}

impl NetworkSpec {
    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    /// Per-type arrival rates during profile interval `k`.
    pub fn rates_in_interval(&self, k: usize) -> Vec<f64> {
        self.types
            .iter()
            .map(|t| t.arrival_profile.rates[k % t.arrival_profile.len()])
            .collect()
    }

    /// Number of profile intervals (1 for stationary networks).
    pub fn n_intervals(&self) -> usize {
        self.types
            .first()
            .map(|t| t.arrival_profile.len())
            .unwrap_or(1)
    }
}

/// True when two customers gain from sharing with the first one dropped first.
pub fn check_share_availability(d1: f64, d2: f64, d12: f64, econ: &EconParams) -> Result<bool> {
    if !(d1 > 0.0) || !(d2 > 0.0) || !(d12 >= 0.0) {
        return Err(Error::Geometry(format!(
            "distances must be positive (d1={d1}, d2={d2}, d12={d12})"
        )));
    }
    Ok(econ.b * (d1 + d2) > econ.gamma * econ.b * (d1 + d12))
}

pub fn reneging_rate(reward: f64, distance: f64, econ: &EconParams) -> Result<f64> {
    let x = econ.upsilon * reward + econ.beta * distance;
    if !(x > 0.0) {
        return Err(Error::Parameter(format!(
            "reneging exponent must be positive (R={reward}, d={distance})"
        )));
    }
    Ok((-x).exp())
}

pub fn reneging_penalty(mu: f64, zeta: f64) -> Result<f64> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::Parameter(format!("reneging rate {mu} outside (0,1)")));
    }
    Ok(-zeta * mu.ln())
}

/// Flat-topped hexagonal patch with the source just outside its west edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HexLayout {
    pub columns: usize,
    pub rows: usize,
    /// Hexagon circumradius in distance units.
    pub cell_radius: f64,
    /// Gap between the source and the leftmost column centres, in cell radii.
    pub source_offset: f64,
}

impl Default for HexLayout {
    fn default() -> Self {
        Self {
            columns: 15,
            rows: 7,
            cell_radius: 1.0,
            source_offset: 1.0,
        }
    }
}

impl HexLayout {
    /// Cell centres relative to the source, ordered by distance then polar angle.
    pub fn centers(&self) -> Vec<(f64, f64)> {
        let s3 = 3f64.sqrt();
        let mut pts = Vec::with_capacity(self.columns * self.rows);
        for c in 0..self.columns {
            for r in 0..self.rows {
                let x = 1.5 * c as f64;
                let y = s3 * (r as f64 + 0.5 * (c % 2) as f64);
                pts.push((x, y));
            }
        }
        let (ymin, ymax) = pts
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
                (a.min(p.1), b.max(p.1))
            });
        let cy = 0.5 * (ymin + ymax);
        let mut out: Vec<(f64, f64)> = pts
            .into_iter()
            .map(|(x, y)| {
                (
                    (x + self.source_offset) * self.cell_radius,
                    (y - cy) * self.cell_radius,
                )
            })
            .collect();
        out.sort_by(|a, b| {
            let da = (a.0.hypot(a.1) * 1e9).round();
            let db = (b.0.hypot(b.1) * 1e9).round();
            da.total_cmp(&db)
                .then(a.1.atan2(a.0).total_cmp(&b.1.atan2(b.0)))
        });
        out
    }
}

pub const UNIFORM_TYPES: usize = 105;

pub fn generate_uniform_network(layout: &HexLayout, rate: f64) -> Result<NetworkSpec> {
    if layout.columns * layout.rows != UNIFORM_TYPES {
        return Err(Error::Config(format!(
            "hex layout yields {} cells, expected {UNIFORM_TYPES}",
            layout.columns * layout.rows
        )));
    }
    if !(layout.cell_radius > 0.0) || !(layout.source_offset > 0.0) {
        return Err(Error::Config("cell radius and source offset must be positive".into()));
    }
    if !(rate >= 0.0) {
        return Err(Error::Config(format!("arrival rate {rate} must be nonnegative")));
    }
    let types = layout
        .centers()
        .into_iter()
        .enumerate()
        .map(|(i, c)| CustomerType {
            id: i + 1,
            center: c,
            distance: c.0.hypot(c.1),
            demand_weight: 1.0,
            arrival_profile: ArrivalProfile::constant(rate),
        })
        .collect();
    Ok(NetworkSpec { types })
}

fn data_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Data {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Comma-separated rows after a header line; blank lines and `#` comments skipped.
fn read_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e.to_string()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(|f| f.trim().to_string()).collect())
        .collect())
}

fn parse_f(path: &Path, row: usize, s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| data_err(path, format!("row {row}: bad number {s:?}")))
}

fn parse_u(path: &Path, row: usize, s: &str) -> Result<usize> {
    s.parse::<usize>()
        .map_err(|_| data_err(path, format!("row {row}: bad index {s:?}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemandRow {
    pub index: usize,
    pub name: String,
    pub weight: f64,
}

pub fn read_demand_table(path: &Path) -> Result<Vec<DemandRow>> {
    let mut out = Vec::new();
    for (i, r) in read_rows(path)?.iter().enumerate() {
        if r.len() != 3 {
            return Err(data_err(path, format!("row {}: expected 3 columns", i + 1)));
        }
        let weight = parse_f(path, i + 1, &r[2])?;
        if weight < 0.0 {
            return Err(data_err(path, format!("row {}: negative weight", i + 1)));
        }
        out.push(DemandRow {
            index: parse_u(path, i + 1, &r[0])?,
            name: r[1].clone(),
            weight,
        });
    }
    Ok(out)
}

/// Centroids keyed by district index; index 0 is the source.
pub fn read_centroid_table(path: &Path) -> Result<Vec<(usize, f64, f64)>> {
    let mut out = Vec::new();
    for (i, r) in read_rows(path)?.iter().enumerate() {
        if r.len() != 3 {
            return Err(data_err(path, format!("row {}: expected 3 columns", i + 1)));
        }
        out.push((
            parse_u(path, i + 1, &r[0])?,
            parse_f(path, i + 1, &r[1])?,
            parse_f(path, i + 1, &r[2])?,
        ));
    }
    Ok(out)
}

pub fn read_profile_table(path: &Path) -> Result<Vec<f64>> {
    let rows = read_rows(path)?;
    let mut out = vec![f64::NAN; rows.len()];
    for (i, r) in rows.iter().enumerate() {
        if r.len() != 2 {
            return Err(data_err(path, format!("row {}: expected 2 columns", i + 1)));
        }
        let h = parse_u(path, i + 1, &r[0])?;
        let v = parse_f(path, i + 1, &r[1])?;
        if h >= out.len() || !out[h].is_nan() {
            return Err(data_err(path, format!("row {}: bad or repeated hour {h}", i + 1)));
        }
        if v < 0.0 {
            return Err(data_err(path, format!("row {}: negative rate", i + 1)));
        }
        out[h] = v;
    }
    if out.len() != 24 {
        return Err(data_err(path, format!("expected 24 hourly rows, got {}", out.len())));
    }
    Ok(out)
}

/// Builds a network from district demands, planar centroids (km) and an
/// hourly total-rate profile. `distance_scale` converts km into the distance
/// units the fare and reneging parameters are expressed in.
pub fn load_real_network(
    demand_table: &Path,
    centroid_table: &Path,
    profile_table: &Path,
    distance_scale: f64,
) -> Result<NetworkSpec> {
    if !(distance_scale > 0.0) {
        return Err(Error::Config("distance_scale must be positive".into()));
    }
    let demand = read_demand_table(demand_table)?;
    let centroids = read_centroid_table(centroid_table)?;
    let profile = read_profile_table(profile_table)?;
    let source = centroids
        .iter()
        .find(|c| c.0 == 0)
        .ok_or_else(|| data_err(centroid_table, "missing source row (index 0)"))?;
    if centroids.len() != demand.len() + 1 {
        return Err(data_err(
            centroid_table,
            format!(
                "{} district rows for {} demand rows",
                centroids.len() - 1,
                demand.len()
            ),
        ));
    }
    let total: f64 = demand.iter().map(|d| d.weight).sum();
    if !(total > 0.0) {
        return Err(data_err(demand_table, "total demand weight is zero"));
    }
    let mut types = Vec::with_capacity(demand.len());
    for (k, row) in demand.iter().enumerate() {
        if row.index != k + 1 {
            return Err(data_err(
                demand_table,
                format!("row {}: index {} out of sequence", k + 1, row.index),
            ));
        }
        let c = centroids
            .iter()
            .find(|c| c.0 == row.index)
            .ok_or_else(|| {
                data_err(centroid_table, format!("missing centroid for district {}", row.index))
            })?;
        let center = (
            (c.1 - source.1) * distance_scale,
            (c.2 - source.2) * distance_scale,
        );
        let share = row.weight / total;
        types.push(CustomerType {
            id: row.index,
            center,
            distance: center.0.hypot(center.1),
            demand_weight: row.weight,
            arrival_profile: ArrivalProfile::hourly(profile.iter().map(|r| share * r).collect()),
        });
    }
    Ok(NetworkSpec { types })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsService {
    /// 1-based.
    pub id: usize,
    /// (first-dropped type, second type); equal for a self-shared service.
    pub types: (usize, usize),
    pub self_shared: bool,
    pub shared_distance: f64,
    pub reward: f64,
    pub ns_rewards: (f64, f64),
    pub reneging_rates: (f64, f64),
    pub penalties: (f64, f64),
}

impl RsService {
    /// Slot (0 or 1) that customer type `l` occupies, if any.
    pub fn slot_of(&self, l: usize) -> Option<usize> {
        if self.types.0 == l {
            Some(0)
        } else if self.types.1 == l {
            Some(1)
        } else {
            None
        }
    }

    /// Net lump reward of a renege from slot `k`.
    pub fn renege_reward(&self, k: usize) -> f64 {
        if k == 0 {
            self.ns_rewards.0 - self.penalties.0
        } else {
            self.ns_rewards.1 - self.penalties.1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceCatalog {
    pub services: Vec<RsService>,
    /// `by_type[l - 1]` lists the ids of services able to serve type `l`.
    pub by_type: Vec<Vec<usize>>,
    pub n_max: usize,
}

impl ServiceCatalog {
    pub fn service(&self, id: usize) -> &RsService {
        &self.services[id - 1]
    }

    pub fn n_types(&self) -> usize {
        self.by_type.len()
    }

    pub fn len(&self) -> usize {
        self.services.len()
    }

    pub fn is_empty(&self) -> bool {
        self.services.is_empty()
    }

    /// Assembles a catalog from explicit services, filling `by_type`.
    pub fn from_services(services: Vec<RsService>, n_types: usize, n_max: usize) -> Result<Self> {
        let mut by_type = vec![Vec::new(); n_types];
        for (i, s) in services.iter().enumerate() {
            if s.id != i + 1 {
                return Err(Error::Config(format!("service ids must be 1..J, found {}", s.id)));
            }
            for l in [s.types.0, s.types.1] {
                if l == 0 || l > n_types {
                    return Err(Error::Config(format!("service {} names unknown type {l}", s.id)));
                }
            }
            by_type[s.types.0 - 1].push(s.id);
            if !s.self_shared {
                by_type[s.types.1 - 1].push(s.id);
            }
        }
        for (l, js) in by_type.iter().enumerate() {
            if !js.iter().any(|&j| services[j - 1].self_shared) {
                return Err(Error::Config(format!("type {} has no self-shared service", l + 1)));
            }
        }
        Ok(Self {
            services,
            by_type,
            n_max,
        })
    }

    /// Delimited dump of every service parameter.
    pub fn export(&self) -> String {
        let mut s = String::from(
            "id,type1,type2,self_shared,shared_distance,reward,ns_reward1,ns_reward2,mu1,mu2,penalty1,penalty2\n",
        );
        for v in &self.services {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                v.id,
                v.types.0,
                v.types.1,
                v.self_shared as u8,
                v.shared_distance,
                v.reward,
                v.ns_rewards.0,
                v.ns_rewards.1,
                v.reneging_rates.0,
                v.reneging_rates.1,
                v.penalties.0,
                v.penalties.1
            );
        }
        s
    }

    /// SHA-256 of the export plus the capacity.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("n_max={}\n", self.n_max));
        h.update(self.export());
        hex::encode(h.finalize())
    }
}

fn make_service(
    id: usize,
    types: (usize, usize),
    d: (f64, f64),
    shared_distance: f64,
    econ: &EconParams,
) -> Result<RsService> {
    let reward = 2.0 * econ.q - econ.gamma * econ.b * shared_distance;
    let ns = (econ.q - econ.b * d.0, econ.q - econ.b * d.1);
    let mu1 = reneging_rate(reward, d.0, econ)?;
    let mu2 = reneging_rate(reward, d.1, econ)?;
    Ok(RsService {
        id,
        types,
        self_shared: types.0 == types.1,
        shared_distance,
        reward,
        ns_rewards: ns,
        reneging_rates: (mu1, mu2),
        penalties: (
            reneging_penalty(mu1, econ.zeta)?,
            reneging_penalty(mu2, econ.zeta)?,
        ),
    })
}

/// Self-shared services get ids 1..L; available pairs follow in
/// lexicographic order of their type ids.
pub fn build_services(spec: &NetworkSpec, econ: &EconParams) -> Result<ServiceCatalog> {
    econ.validate()?;
    let ty = &spec.types;
    let mut bad = Vec::new();
    for t in ty {
        if !(t.distance > 0.0) {
            return Err(Error::Geometry(format!("type {} sits on the source", t.id)));
        }
        if econ.q - econ.b * t.distance <= 0.0 {
            bad.push(format!("type {} (non-sharing reward {})", t.id, econ.q - econ.b * t.distance));
        }
    }
    let mut services = Vec::new();
    for t in ty {
        let id = services.len() + 1;
        services.push(make_service(id, (t.id, t.id), (t.distance, t.distance), t.distance, econ)?);
    }
    for a in 0..ty.len() {
        for c in a + 1..ty.len() {
            let (ta, tc) = (&ty[a], &ty[c]);
            let d12 = (ta.center.0 - tc.center.0).hypot(ta.center.1 - tc.center.1);
            let a_first = check_share_availability(ta.distance, tc.distance, d12, econ)?;
            let c_first = check_share_availability(tc.distance, ta.distance, d12, econ)?;
            let first_a = match (a_first, c_first) {
                (false, false) => continue,
                (true, false) => true,
                (false, true) => false,
                (true, true) => ta.distance <= tc.distance,
            };
            let (f, s) = if first_a { (ta, tc) } else { (tc, ta) };
            let id = services.len() + 1;
            services.push(make_service(
                id,
                (f.id, s.id),
                (f.distance, s.distance),
                f.distance + d12,
                econ,
            )?);
        }
    }
    for s in &services {
        if s.reward <= 0.0 {
            bad.push(format!("service {} (reward {})", s.id, s.reward));
        }
    }
    if !bad.is_empty() {
        return Err(Error::Parameter(format!(
            "Q = {} too small; offending: {}",
            econ.q,
            bad.join(", ")
        )));
    }
    ServiceCatalog::from_services(services, ty.len(), econ.n_max)
}

/// Two-type reference catalog: λ = 5, μ = 1, N = 5, R = 10, R̄ = 1, C = 0.
/// Services 1 and 2 are self-shared, 3 pairs the two types. Returns the
/// catalog and its per-type arrival rates.
pub fn fixture_catalog() -> (ServiceCatalog, Vec<f64>) {
    let svc = |id, types: (usize, usize)| RsService {
        id,
        types,
        self_shared: types.0 == types.1,
        shared_distance: 1.0,
        reward: 10.0,
        ns_rewards: (1.0, 1.0),
        reneging_rates: (1.0, 1.0),
        penalties: (0.0, 0.0),
    };
    let catalog = ServiceCatalog::from_services(vec![svc(1, (1, 1)), svc(2, (2, 2)), svc(3, (1, 2))], 2, 5)
        .expect("fixture catalog is valid");
    (catalog, vec![5.0, 5.0])
}
