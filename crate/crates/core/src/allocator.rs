//! Cluster-level budget allocation.
//!
//! Queries are grouped by [`ClusterKey`] and each cluster receives one
//! subsidy level. The choice is a multiple-choice knapsack: maximize
//! expected revenue subject to one shared budget row and per-cluster
//! expected-subsidy bounds. [`solve_lagrangian`] is the production solver;
//! [`solve_exact`] is a dynamic-programming oracle for small instances.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{ClusterKey, Coarsening, ElasticityCurve, Query, ServiceClass, TreatmentGrid};
use crate::error::{Error, Result};
use crate::par::{self, Exec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub key: ClusterKey,
    /// Every raw cluster key folded into this cluster, `key` included.
    pub members: Vec<ClusterKey>,
    /// Forecast query volume.
    pub n_hat: f64,
    /// Conversion rate per level.
    pub p_hat: Vec<f64>,
    /// Expected fare per service class.
    pub pr_hat: Vec<f64>,
    /// Completion probability per service class.
    pub gamma: Vec<f64>,
    /// Subsidy cost per service class and level; `cost[k][0]` is 0.
    pub cost: Vec<Vec<f64>>,
}

impl ClusterStats {
    pub fn n_levels(&self) -> usize {
        self.p_hat.len()
    }

    /// Expected revenue if the cluster is served level `j`.
    pub fn value(&self, j: usize) -> f64 {
        self.gamma
            .iter()
            .zip(&self.pr_hat)
            .map(|(g, pr)| g * self.n_hat * pr * self.p_hat[j])
            .sum()
    }

    /// Expected subsidy spend if the cluster is served level `j`.
    pub fn cost(&self, j: usize) -> f64 {
        self.gamma
            .iter()
            .zip(&self.cost)
            .map(|(g, c)| g * self.n_hat * self.p_hat[j] * c[j])
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.p_hat.len();
        let k = self.gamma.len();
        if j < 2 {
            return Err(Error::Config(format!("cluster {:?} has fewer than 2 levels", self.key)));
        }
        if self.pr_hat.len() != k || self.cost.len() != k {
            return Err(Error::Shape {
                what: "per-service cluster vectors",
                expected: k,
                got: self.pr_hat.len().min(self.cost.len()),
            });
        }
        if self.p_hat.windows(2).any(|w| w[1] < w[0]) || self.p_hat.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Data(format!("cluster {:?}: p_hat must be a monotone probability curve", self.key)));
        }
        for c in &self.cost {
            if c.len() != j || c.iter().any(|x| !(*x >= 0.0)) || c.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::Data(format!("cluster {:?}: costs must be nonnegative and nondecreasing", self.key)));
            }
        }
        if !(self.n_hat >= 0.0) || self.pr_hat.iter().any(|r| !(*r >= 0.0)) {
            return Err(Error::Data(format!("cluster {:?}: negative volume or fare", self.key)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationProblem {
    pub clusters: Vec<ClusterStats>,
    pub budget: f64,
    /// Lower bound on per-order expected subsidy, every service class.
    #[serde(default)]
    pub u_lo: f64,
    /// Upper bound on per-order expected subsidy; `None` is unbounded.
    #[serde(default)]
    pub u_hi: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationSolution {
    /// Chosen level per cluster.
    pub assignment: Vec<usize>,
    pub objective_value: f64,
    pub total_cost: f64,
    pub dual_lambda: f64,
    /// Best dual objective minus the primal objective; 0 for exact solves.
    pub optimality_gap_bound: f64,
}

impl AllocationProblem {
    pub fn validate(&self) -> Result<()> {
        if !(self.budget >= 0.0) || !self.budget.is_finite() {
            return Err(Error::Config(format!("budget must be finite and >= 0, got {}", self.budget)));
        }
        let hi = self.u_hi.unwrap_or(f64::INFINITY);
        if !(self.u_lo >= 0.0 && self.u_lo <= hi) {
            return Err(Error::Config("subsidy bounds must satisfy 0 <= u_lo <= u_hi".into()));
        }
        for c in &self.clusters {
            c.validate()?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    /// Value and cost tables per (cluster, level).
    fn tables(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let v = self.clusters.iter().map(|c| (0..c.n_levels()).map(|j| c.value(j)).collect()).collect();
        let w = self.clusters.iter().map(|c| (0..c.n_levels()).map(|j| c.cost(j)).collect()).collect();
        (v, w)
    }

    fn feasible_sets(&self) -> Result<Vec<Vec<usize>>> {
        self.clusters
            .iter()
            .map(|c| feasible_levels(c, self.u_lo, self.u_hi.unwrap_or(f64::INFINITY)))
            .collect()
    }

    /// Objective and cost of an arbitrary assignment.
    pub fn evaluate(&self, assignment: &[usize]) -> (f64, f64) {
        self.clusters
            .iter()
            .zip(assignment)
            .fold((0.0, 0.0), |(v, w), (c, &j)| (v + c.value(j), w + c.cost(j)))
    }
}

/// Levels whose expected per-order subsidy lies within `[u_lo, u_hi]` for
/// every service class.
pub fn feasible_levels(c: &ClusterStats, u_lo: f64, u_hi: f64) -> Result<Vec<usize>> {
    let out: Vec<usize> = (0..c.n_levels())
        .filter(|&j| {
            c.cost.iter().all(|ck| {
                let u = c.p_hat[j] * ck[j];
                u >= u_lo && u <= u_hi
            })
        })
        .collect();
    if out.is_empty() {
        return Err(Error::Infeasible(format!("cluster {:?} has no level within the subsidy bounds", c.key)));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub coarsening: Coarsening,
    /// Clusters with fewer member queries are merged into a neighbor.
    pub min_size: usize,
    /// Multiplier from member count to forecast volume.
    pub volume_scale: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            coarsening: Coarsening::identity(),
            min_size: 1,
            volume_scale: 1.0,
        }
    }
}

/// Per-key sums accumulated from individual queries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KeyAggregate {
    pub count: f64,
    pub p_sum: Vec<f64>,
    pub revenue_sum: Vec<f64>,
}

impl KeyAggregate {
    pub fn new(n_levels: usize, n_services: usize) -> Self {
        Self {
            count: 0.0,
            p_sum: vec![0.0; n_levels],
            revenue_sum: vec![0.0; n_services],
        }
    }

    pub fn add_query(&mut self, curve: &[f64], revenues: &[f64]) {
        self.count += 1.0;
        for (s, p) in self.p_sum.iter_mut().zip(curve) {
            *s += p;
        }
        for (s, r) in self.revenue_sum.iter_mut().zip(revenues) {
            *s += r;
        }
    }

    pub fn merge(&mut self, other: &KeyAggregate) {
        self.count += other.count;
        for (a, b) in self.p_sum.iter_mut().zip(&other.p_sum) {
            *a += b;
        }
        for (a, b) in self.revenue_sum.iter_mut().zip(&other.revenue_sum) {
            *a += b;
        }
    }
}

/// Sum queries into per-key aggregates under `coarsening`.
pub fn aggregate_queries(
    queries: &[Query],
    curves: &[ElasticityCurve],
    revenues: &[Vec<f64>],
    coarsening: &Coarsening,
) -> Result<BTreeMap<ClusterKey, KeyAggregate>> {
    if queries.is_empty() {
        return Err(Error::EmptyInput);
    }
    if curves.len() != queries.len() || revenues.len() != queries.len() {
        return Err(Error::Shape {
            what: "curves and revenues per query",
            expected: queries.len(),
            got: curves.len().min(revenues.len()),
        });
    }
    let (j, k) = (curves[0].len(), revenues[0].len());
    let mut map: BTreeMap<ClusterKey, KeyAggregate> = BTreeMap::new();
    for ((q, c), r) in queries.iter().zip(curves).zip(revenues) {
        map.entry(coarsening.key_of(q))
            .or_insert_with(|| KeyAggregate::new(j, k))
            .add_query(c.p(), r);
    }
    Ok(map)
}

/// Group queries into clusters; see [`clusters_from_aggregates`].
pub fn build_clusters(
    queries: &[Query],
    curves: &[ElasticityCurve],
    revenues: &[Vec<f64>],
    services: &[ServiceClass],
    costs: &[Vec<f64>],
    cfg: &ClusterConfig,
) -> Result<Vec<ClusterStats>> {
    cfg.coarsening.validate()?;
    let aggs = aggregate_queries(queries, curves, revenues, &cfg.coarsening)?;
    clusters_from_aggregates(&aggs, services, costs, cfg.min_size, cfg.volume_scale)
}

/// Turn per-key sums into cluster statistics, merging small keys first.
///
/// A key below `min_size` is folded into the nearest time bucket with the
/// same origin and destination (earlier bucket on ties), or into the next
/// key in sort order when its route has no other bucket. The smallest key
/// is merged first. The result is sorted by key.
pub fn clusters_from_aggregates(
    aggs: &BTreeMap<ClusterKey, KeyAggregate>,
    services: &[ServiceClass],
    costs: &[Vec<f64>],
    min_size: usize,
    volume_scale: f64,
) -> Result<Vec<ClusterStats>> {
    if aggs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if costs.len() != services.len() {
        return Err(Error::Shape {
            what: "cost vectors per service",
            expected: services.len(),
            got: costs.len(),
        });
    }
    let mut groups: BTreeMap<ClusterKey, (KeyAggregate, Vec<ClusterKey>)> =
        aggs.iter().map(|(k, a)| (*k, (a.clone(), vec![*k]))).collect();
    let min = min_size as f64;
    while groups.len() > 1 {
        let Some(small) = groups
            .iter()
            .filter(|(_, (a, _))| a.count < min)
            .min_by(|x, y| x.1 .0.count.total_cmp(&y.1 .0.count).then(x.0.cmp(y.0)))
            .map(|(k, _)| *k)
        else {
            break;
        };
        let target = groups
            .keys()
            .filter(|k| **k != small && k.origin_zone == small.origin_zone && k.dest_zone == small.dest_zone)
            .min_by_key(|k| (k.time_bucket.abs_diff(small.time_bucket), k.time_bucket))
            .copied()
            .or_else(|| groups.range(small..).nth(1).map(|(k, _)| *k))
            .or_else(|| groups.range(..small).next_back().map(|(k, _)| *k))
            .expect("more than one group");
        let (agg, members) = groups.remove(&small).unwrap();
        let t = groups.get_mut(&target).unwrap();
        t.0.merge(&agg);
        t.1.extend(members);
    }
    groups
        .into_iter()
        .map(|(key, (a, mut members))| {
            members.sort();
            let n = a.count.max(f64::MIN_POSITIVE);
            let mut p_hat: Vec<f64> = a.p_sum.iter().map(|s| (s / n).clamp(0.0, 1.0)).collect();
            for i in 1..p_hat.len() {
                p_hat[i] = p_hat[i].max(p_hat[i - 1]);
            }
            let c = ClusterStats {
                key,
                members,
                n_hat: a.count * volume_scale,
                p_hat,
                pr_hat: a.revenue_sum.iter().map(|s| s / n).collect(),
                gamma: services.iter().map(|s| s.gamma).collect(),
                cost: costs.to_vec(),
            };
            c.validate()?;
            Ok(c)
        })
        .collect()
}

/// Default per-service cost table: every class pays the grid amount.
pub fn default_costs(grid: &TreatmentGrid, n_services: usize) -> Vec<Vec<f64>> {
    vec![grid.levels().to_vec(); n_services]
}

const BISECTION_STEPS: usize = 48;
/// Force moves are only searched when the instance has at most this many
/// (cluster, level) options.
const FORCE_SEARCH_LIMIT: usize = 256;

struct Tables<'a> {
    v: &'a [Vec<f64>],
    w: &'a [Vec<f64>],
    feasible: &'a [Vec<usize>],
}

impl Tables<'_> {
    /// Per-cluster maximizer of `v - λ w`; ties to lower cost, then lower j.
    fn choose(&self, exec: Exec, lambda: f64) -> (Vec<usize>, f64, f64, f64) {
        let picks = par::map_range(exec, self.v.len(), |i| {
            let (v, w) = (&self.v[i], &self.w[i]);
            let mut best = self.feasible[i][0];
            for &j in &self.feasible[i][1..] {
                let (a, b) = (v[j] - lambda * w[j], v[best] - lambda * w[best]);
                if a > b || (a == b && w[j] < w[best]) {
                    best = j;
                }
            }
            best
        });
        let mut value = 0.0;
        let mut cost = 0.0;
        let mut lagr = 0.0;
        for (i, &j) in picks.iter().enumerate() {
            value += self.v[i][j];
            cost += self.w[i][j];
            lagr += self.v[i][j] - lambda * self.w[i][j];
        }
        (picks, value, cost, lagr)
    }

    fn options(&self) -> usize {
        self.feasible.iter().map(Vec::len).sum()
    }

    fn min_cost(&self) -> f64 {
        self.feasible
            .iter()
            .enumerate()
            .map(|(i, f)| f.iter().map(|&j| self.w[i][j]).fold(f64::INFINITY, f64::min))
            .sum()
    }

    /// Bisection on λ, then both sides of the final bracket are pushed back
    /// to the budget (repair or fill) and the better one kept. Returns the
    /// assignment, the upper multiplier and the best dual value seen.
    fn bracket(&self, exec: Exec, b: f64) -> (Vec<usize>, f64, f64) {
        let mut dual_best = f64::INFINITY;
        let (a0, _, c0, l0) = self.choose(exec, 0.0);
        dual_best = dual_best.min(l0);
        if c0 <= b {
            let mut a = a0;
            self.fill(&mut a, b);
            return (a, 0.0, dual_best);
        }
        // above the steepest value/cost slope every cluster sits at its cheapest level
        let mut slope: f64 = 0.0;
        for (i, f) in self.feasible.iter().enumerate() {
            for &j in f {
                for &l in f {
                    let dc = self.w[i][j] - self.w[i][l];
                    if dc > 0.0 {
                        slope = slope.max((self.v[i][j] - self.v[i][l]) / dc);
                    }
                }
            }
        }
        let mut lo = 0.0;
        let mut hi = 2.0 * slope + 1.0;
        let (mut hi_a, _, mut hi_c, hl) = self.choose(exec, hi);
        dual_best = dual_best.min(hl + hi * b);
        let mut lo_a = a0;
        let mut lo_c = c0;
        for _ in 0..BISECTION_STEPS {
            if lo_c - hi_c < 1e-9 * b {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let (a, _, c, l) = self.choose(exec, mid);
            dual_best = dual_best.min(l + mid * b);
            if c <= b {
                hi = mid;
                hi_a = a;
                hi_c = c;
            } else {
                lo = mid;
                lo_a = a;
                lo_c = c;
            }
        }
        self.fill(&mut hi_a, b);
        if self.repair(&mut lo_a, b, None) {
            self.fill(&mut lo_a, b);
            let (vh, ch) = self.totals(&hi_a);
            let (vl, cl) = self.totals(&lo_a);
            if vl > vh || (vl == vh && cl < ch) {
                return (lo_a, hi, dual_best);
            }
        }
        (hi_a, hi, dual_best)
    }

    fn totals(&self, a: &[usize]) -> (f64, f64) {
        a.iter()
            .enumerate()
            .fold((0.0, 0.0), |(v, w), (i, &j)| (v + self.v[i][j], w + self.w[i][j]))
    }

    /// Downgrade the cheapest-loss cluster until the budget holds; `pinned`
    /// is never changed. Returns whether the budget was reached.
    fn repair(&self, a: &mut [usize], budget: f64, pinned: Option<usize>) -> bool {
        let (_, mut cost) = self.totals(a);
        while cost > budget {
            let mut best: Option<(f64, usize, usize)> = None;
            for (i, &cur) in a.iter().enumerate() {
                if Some(i) == pinned {
                    continue;
                }
                for &j in &self.feasible[i] {
                    let saved = self.w[i][cur] - self.w[i][j];
                    if saved <= 0.0 {
                        continue;
                    }
                    let ratio = (self.v[i][cur] - self.v[i][j]) / saved;
                    if best.is_none_or(|(r, _, _)| ratio < r) {
                        best = Some((ratio, i, j));
                    }
                }
            }
            let Some((_, i, j)) = best else { return false };
            cost -= self.w[i][a[i]] - self.w[i][j];
            a[i] = j;
        }
        true
    }

    /// Greedy fill, then force moves: pin one cluster to
    /// another level, repair the rest back under budget and refill. Repeats
    /// until no move improves the objective.
    fn polish(&self, a: &mut Vec<usize>, budget: f64) {
        self.fill(a, budget);
        loop {
            let (value, _) = self.totals(a);
            let eps = 1e-12 * value.abs().max(1.0);
            let mut best: Option<(f64, Vec<usize>)> = None;
            for i in 0..a.len() {
                for &j in &self.feasible[i] {
                    if j == a[i] {
                        continue;
                    }
                    let mut b = a.clone();
                    b[i] = j;
                    if !self.repair(&mut b, budget, Some(i)) {
                        continue;
                    }
                    self.fill(&mut b, budget);
                    let (v, _) = self.totals(&b);
                    if v > value + eps && best.as_ref().is_none_or(|(bv, _)| v > *bv) {
                        best = Some((v, b));
                    }
                }
            }
            match best {
                Some((_, b)) => *a = b,
                None => break,
            }
        }
    }

    /// Apply the best value-per-cost upgrade that still fits, repeatedly.
    fn fill(&self, a: &mut [usize], budget: f64) {
        let (_, mut cost) = self.totals(a);
        loop {
            let mut best: Option<(f64, usize, usize)> = None;
            for (i, &cur) in a.iter().enumerate() {
                for &j in &self.feasible[i] {
                    let gain = self.v[i][j] - self.v[i][cur];
                    let extra = self.w[i][j] - self.w[i][cur];
                    if gain <= 0.0 || cost + extra > budget {
                        continue;
                    }
                    let ratio = if extra <= 0.0 { f64::INFINITY } else { gain / extra };
                    if best.is_none_or(|(r, _, _)| ratio > r) {
                        best = Some((ratio, i, j));
                    }
                }
            }
            let Some((_, i, j)) = best else { break };
            cost += self.w[i][j] - self.w[i][a[i]];
            a[i] = j;
        }
    }
}

/// Lagrangian relaxation with bisection on the budget multiplier.
pub fn solve_lagrangian(p: &AllocationProblem) -> Result<AllocationSolution> {
    solve_lagrangian_with(Exec::default(), p)
}

pub fn solve_lagrangian_with(exec: Exec, p: &AllocationProblem) -> Result<AllocationSolution> {
    p.validate()?;
    if p.clusters.is_empty() {
        return Err(Error::EmptyInput);
    }
    let feasible = p.feasible_sets()?;
    let (v, w) = p.tables();
    let t = Tables {
        v: &v,
        w: &w,
        feasible: &feasible,
    };
    let b = p.budget;
    let min_cost = t.min_cost();
    if min_cost > b {
        return Err(Error::Infeasible(format!(
            "cheapest feasible assignment costs {min_cost} > budget {b}"
        )));
    }

    let (mut best, mut lambda, dual_best) = t.bracket(exec, b);
    if t.options() <= FORCE_SEARCH_LIMIT {
        let mut best_value = t.totals(&best).0;
        for i in 0..v.len() {
            for &j in &feasible[i] {
                let mut pinned = feasible.clone();
                pinned[i] = vec![j];
                let tp = Tables {
                    v: &v,
                    w: &w,
                    feasible: &pinned,
                };
                if tp.min_cost() > b {
                    continue;
                }
                let (a, l, _) = tp.bracket(exec, b);
                let value = t.totals(&a).0;
                if value > best_value {
                    best_value = value;
                    best = a;
                    lambda = l;
                }
            }
        }
        t.polish(&mut best, b);
    }
    let hi_a = best;
    let (objective_value, total_cost) = t.totals(&hi_a);
    debug_assert!(total_cost <= b * (1.0 + 1e-12) + 1e-12);
    Ok(AllocationSolution {
        assignment: hi_a,
        objective_value,
        total_cost,
        dual_lambda: lambda,
        optimality_gap_bound: (dual_best - objective_value).max(0.0),
    })
}

/// Largest scaled budget handled by the dense table.
pub const DENSE_LIMIT: f64 = 1e6;
/// Largest cluster count handled by the Pareto-front search.
pub const PARETO_CLUSTER_LIMIT: usize = 20;
const DENSE_CELL_LIMIT: f64 = 5e7;
const PARETO_FRONT_LIMIT: usize = 2_000_000;

/// Exact optimum. Costs are multiplied by `cost_scale`; when every scaled
/// cost is integral and the scaled budget is at most [`DENSE_LIMIT`], a
/// dense table is used. Otherwise small instances use an exact
/// Pareto-front search on the unscaled costs, and the remainder falls back
/// to the dense table with costs rounded up (feasible, possibly
/// suboptimal).
pub fn solve_exact(p: &AllocationProblem, cost_scale: f64) -> Result<AllocationSolution> {
    p.validate()?;
    if p.clusters.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(cost_scale > 0.0) {
        return Err(Error::Config("cost_scale must be positive".into()));
    }
    let feasible = p.feasible_sets()?;
    let (v, w) = p.tables();
    let cap = (p.budget * cost_scale + 1e-9).floor();
    let integral = w
        .iter()
        .flatten()
        .all(|c| ((c * cost_scale) - (c * cost_scale).round()).abs() < 1e-9);
    let dense_fits = cap <= DENSE_LIMIT && (cap + 1.0) * (p.clusters.len() as f64) <= DENSE_CELL_LIMIT;
    let assignment = if dense_fits && integral {
        dense_dp(&v, &w, &feasible, cost_scale, cap as usize)
    } else if p.clusters.len() <= PARETO_CLUSTER_LIMIT {
        pareto(&v, &w, &feasible, p.budget)?
    } else if dense_fits {
        log::warn!("exact solver: rounding costs up at scale {cost_scale}");
        dense_dp(&v, &w, &feasible, cost_scale, cap as usize)
    } else {
        return Err(Error::InstanceTooLarge(format!(
            "{} clusters with scaled budget {cap}",
            p.clusters.len()
        )));
    };
    let Some(assignment) = assignment else {
        return Err(Error::Infeasible("no assignment fits the budget".into()));
    };
    let (objective_value, total_cost) = p.evaluate(&assignment);
    Ok(AllocationSolution {
        assignment,
        objective_value,
        total_cost,
        dual_lambda: 0.0,
        optimality_gap_bound: 0.0,
    })
}

fn dense_dp(
    v: &[Vec<f64>],
    w: &[Vec<f64>],
    feasible: &[Vec<usize>],
    scale: f64,
    cap: usize,
) -> Option<Vec<usize>> {
    let n = v.len();
    let weight = |i: usize, j: usize| (w[i][j] * scale - 1e-9).ceil().max(0.0) as usize;
    let mut best = vec![0.0f64; cap + 1];
    let mut choice = vec![vec![u8::MAX; cap + 1]; n];
    for i in 0..n {
        let mut next = vec![f64::NEG_INFINITY; cap + 1];
        for c in 0..=cap {
            for &j in &feasible[i] {
                let wj = weight(i, j);
                if wj > c || best[c - wj] == f64::NEG_INFINITY {
                    continue;
                }
                let val = best[c - wj] + v[i][j];
                if val > next[c] {
                    next[c] = val;
                    choice[i][c] = j as u8;
                }
            }
        }
        best = next;
    }
    if best[cap] == f64::NEG_INFINITY {
        return None;
    }
    let mut a = vec![0; n];
    let mut c = cap;
    for i in (0..n).rev() {
        let j = choice[i][c] as usize;
        a[i] = j;
        c -= weight(i, j);
    }
    Some(a)
}

/// Exact search over nondominated (cost, value) partial assignments.
fn pareto(v: &[Vec<f64>], w: &[Vec<f64>], feasible: &[Vec<usize>], budget: f64) -> Result<Option<Vec<usize>>> {
    // (cost, value, assignment so far)
    let mut front: Vec<(f64, f64, Vec<u8>)> = vec![(0.0, 0.0, Vec::new())];
    for i in 0..v.len() {
        let mut cand = Vec::with_capacity(front.len() * feasible[i].len());
        for (c, val, a) in &front {
            for &j in &feasible[i] {
                let nc = c + w[i][j];
                if nc <= budget {
                    let mut na = a.clone();
                    na.push(j as u8);
                    cand.push((nc, val + v[i][j], na));
                }
            }
        }
        cand.sort_by(|x, y| x.0.total_cmp(&y.0).then(y.1.total_cmp(&x.1)).then(x.2.cmp(&y.2)));
        front.clear();
        let mut top = f64::NEG_INFINITY;
        for e in cand {
            if e.1 > top {
                top = e.1;
                front.push(e);
            }
        }
        if front.len() > PARETO_FRONT_LIMIT {
            return Err(Error::InstanceTooLarge(format!("pareto front exceeded {PARETO_FRONT_LIMIT}")));
        }
    }
    Ok(front
        .into_iter()
        .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.total_cmp(&x.0)))
        .map(|e| e.2.into_iter().map(usize::from).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DictionaryMeta {
    pub format: String,
    pub version: u32,
    /// Caller-supplied label for when the plan was solved.
    pub solved_at: String,
    pub budget: f64,
    pub lambda: f64,
    pub gap_bound: f64,
    pub objective: f64,
    pub total_cost: f64,
    pub grid: TreatmentGrid,
    /// Maps raw query coordinates onto entry keys.
    pub coarsening: Coarsening,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DictionaryEntry {
    pub k: u32,
    pub origin: u32,
    pub dest: u32,
    pub time_bucket: u32,
    pub amount: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationDictionary {
    pub meta: DictionaryMeta,
    pub entries: Vec<DictionaryEntry>,
}

pub const DICTIONARY_FORMAT: &str = "ridesub-dictionary";
pub const DICTIONARY_VERSION: u32 = 1;

/// One entry per (service class, member key), sorted.
pub fn emit_dictionary(
    s: &AllocationSolution,
    p: &AllocationProblem,
    services: &[ServiceClass],
    grid: &TreatmentGrid,
    coarsening: Coarsening,
    solved_at: &str,
) -> Result<AllocationDictionary> {
    if s.assignment.len() != p.clusters.len() {
        return Err(Error::Shape {
            what: "assignment",
            expected: p.clusters.len(),
            got: s.assignment.len(),
        });
    }
    let mut entries = Vec::new();
    for svc in services {
        for (c, &j) in p.clusters.iter().zip(&s.assignment) {
            if j >= grid.len() {
                return Err(Error::Data(format!("level {j} is not on the grid")));
            }
            for m in &c.members {
                entries.push(DictionaryEntry {
                    k: svc.id,
                    origin: m.origin_zone,
                    dest: m.dest_zone,
                    time_bucket: m.time_bucket,
                    amount: grid.amount(j),
                });
            }
        }
    }
    entries.sort_by_key(|e| (e.k, e.origin, e.dest, e.time_bucket));
    Ok(AllocationDictionary {
        meta: DictionaryMeta {
            format: DICTIONARY_FORMAT.into(),
            version: DICTIONARY_VERSION,
            solved_at: solved_at.into(),
            budget: p.budget,
            lambda: s.dual_lambda,
            gap_bound: s.optimality_gap_bound,
            objective: s.objective_value,
            total_cost: s.total_cost,
            grid: grid.clone(),
            coarsening,
        },
        entries,
    })
}

impl AllocationDictionary {
    /// Canonical text: sorted object keys, shortest round-trip floats.
    pub fn to_canonical_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        let mut s = serde_json::to_string_pretty(&value)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: Self = serde_json::from_str(s)?;
        if d.meta.format != DICTIONARY_FORMAT || d.meta.version != DICTIONARY_VERSION {
            return Err(Error::Format(format!(
                "unsupported dictionary {} v{}",
                d.meta.format, d.meta.version
            )));
        }
        d.meta.coarsening.validate()?;
        Ok(d)
    }

    /// Every entry at amount 0 under `coarsening`.
    pub fn all_control(keys: &[ClusterKey], services: &[ServiceClass], grid: &TreatmentGrid, coarsening: Coarsening, solved_at: &str) -> Self {
        let mut entries: Vec<DictionaryEntry> = services
            .iter()
            .flat_map(|s| {
                keys.iter().map(|k| DictionaryEntry {
                    k: s.id,
                    origin: k.origin_zone,
                    dest: k.dest_zone,
                    time_bucket: k.time_bucket,
                    amount: 0.0,
                })
            })
            .collect();
        entries.sort_by_key(|e| (e.k, e.origin, e.dest, e.time_bucket));
        Self {
            meta: DictionaryMeta {
                format: DICTIONARY_FORMAT.into(),
                version: DICTIONARY_VERSION,
                solved_at: solved_at.into(),
                budget: 0.0,
                lambda: 0.0,
                gap_bound: 0.0,
                objective: 0.0,
                total_cost: 0.0,
                grid: grid.clone(),
                coarsening,
            },
            entries,
        }
    }
}
