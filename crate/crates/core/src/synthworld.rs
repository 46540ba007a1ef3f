//! Synthetic marketplace with known ground-truth elasticities.
//!
//! The world is a pure function of its [`WorldParams`]: queries, historical
//! treatment assignment, conversions and revenues are all drawn from
//! counter-keyed streams (see [`crate::rng`]), so any day or query can be
//! regenerated independently and counterfactual replays of the same query
//! share their random draws.
//!
//! Feature layout (fixed, recorded in every dataset header):
//!
//! | index | name          | meaning                                   |
//! |-------|---------------|-------------------------------------------|
//! | 0     | activity      | latent user activity in [0,1] (confounder)|
//! | 1     | log_distance  | log of trip distance in grid units        |
//! | 2     | hour_sin      | sin of hour-of-day angle                  |
//! | 3     | hour_cos      | cos of hour-of-day angle                  |
//! | 4..   | attr_N        | generic standard-normal user/trip traits  |

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{
    ClusterKey, Coarsening, Dataset, ElasticityCurve, OutcomeRecord, Provenance, Query,
    ServiceClass, TreatmentGrid,
};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::rng::{self, tag};

/// Number of fixed leading features before the generic attributes.
pub const FIXED_FEATURES: usize = 4;

/// Day index used to draw the observational training dataset.
pub const OBSERVATIONAL_DAY: u32 = 1 << 20;
/// Day index used to draw the randomized evaluation dataset.
pub const RCT_DAY: u32 = (1 << 20) + 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub a: f64,
    pub b: f64,
}

/// Two-component Beta mixture over user activity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityMix {
    pub inactive_weight: f64,
    pub inactive: BetaParams,
    pub active: BetaParams,
}

/// Per-service lognormal fares with a zone-dependent mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RevenueModel {
    /// Median fare per service class at zero distance, indexed like `services`.
    pub base_fare: Vec<f64>,
    /// Multiplicative fare growth per unit of trip distance.
    pub per_distance: f64,
    /// Log-scale noise of individual fares.
    pub sigma: f64,
    /// Standard deviation of the per-origin-zone log fare effect.
    pub zone_effect_sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldParams {
    pub seed: u64,
    pub n_zones: u32,
    /// Intra-day time buckets; a query's bucket is `dow * n_time_buckets + intra`.
    pub n_time_buckets: u32,
    pub feature_dim: usize,
    pub grid: TreatmentGrid,
    pub activity_mix: ActivityMix,
    /// Ground-truth base logit weights; intercept first, then one per feature.
    pub base_rate_coeffs: Vec<f64>,
    /// Per-level logit increments (length J-1), scaled by the heterogeneity term.
    pub uplift_coeffs: Vec<f64>,
    /// Heterogeneity weights; intercept first, then one per feature.
    pub heterogeneity_coeffs: Vec<f64>,
    /// Adds interaction terms to the base logit that a linear-in-features
    /// model cannot represent.
    #[serde(default)]
    pub misspecified: bool,
    #[serde(default)]
    pub interaction_strength: f64,
    pub logging_policy_strength: f64,
    pub services: Vec<ServiceClass>,
    pub revenue: RevenueModel,
    pub daily_query_volume: usize,
    /// Relative amplitude of the weekly volume cycle.
    pub weekly_amplitude: f64,
    /// Log-scale spread of zone demand intensities.
    pub zone_intensity_sd: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            seed: 20231201,
            n_zones: 9,
            n_time_buckets: 24,
            feature_dim: 8,
            grid: TreatmentGrid::default(),
            activity_mix: ActivityMix {
                inactive_weight: 0.5,
                inactive: BetaParams { a: 1.5, b: 5.0 },
                active: BetaParams { a: 5.0, b: 1.5 },
            },
            base_rate_coeffs: vec![-1.6, 3.0, -0.3, 0.2, 0.1, 0.3, -0.2, 0.1, 0.0],
            uplift_coeffs: vec![0.12, 0.10, 0.08, 0.14],
            heterogeneity_coeffs: vec![-0.5, -1.5, 0.0, 0.0, 0.0, 0.8, -0.5, 0.0, 0.0],
            misspecified: false,
            interaction_strength: 0.0,
            logging_policy_strength: 3.0,
            services: vec![
                ServiceClass { id: 0, gamma: 0.55 },
                ServiceClass { id: 1, gamma: 0.30 },
                ServiceClass { id: 2, gamma: 0.10 },
            ],
            revenue: RevenueModel {
                base_fare: vec![14.0, 19.0, 35.0],
                per_distance: 0.35,
                sigma: 0.25,
                zone_effect_sd: 0.15,
            },
            daily_query_volume: 20_000,
            weekly_amplitude: 0.15,
            zone_intensity_sd: 0.5,
        }
    }
}

impl WorldParams {
    pub fn n_levels(&self) -> usize {
        self.grid.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let j = self.grid.len();
        if self.n_zones == 0 || self.n_time_buckets == 0 {
            return bad("n_zones and n_time_buckets must be positive".into());
        }
        if self.feature_dim < FIXED_FEATURES {
            return bad(format!("feature_dim must be at least {FIXED_FEATURES}"));
        }
        if self.base_rate_coeffs.len() != self.feature_dim + 1 {
            return bad(format!(
                "base_rate_coeffs must have length feature_dim+1 = {}",
                self.feature_dim + 1
            ));
        }
        if self.heterogeneity_coeffs.len() != self.feature_dim + 1 {
            return bad(format!(
                "heterogeneity_coeffs must have length feature_dim+1 = {}",
                self.feature_dim + 1
            ));
        }
        if self.uplift_coeffs.len() != j - 1 {
            return bad(format!("uplift_coeffs must have length J-1 = {}", j - 1));
        }
        if self.uplift_coeffs.iter().any(|&u| !(u >= 0.0) || !u.is_finite()) {
            return bad("uplift_coeffs must be finite and nonnegative".into());
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.base_rate_coeffs)
            || !finite(&self.heterogeneity_coeffs)
            || !self.interaction_strength.is_finite()
        {
            return bad("ground-truth coefficients must be finite".into());
        }
        if !(self.logging_policy_strength >= 0.0) || !self.logging_policy_strength.is_finite() {
            return bad("logging_policy_strength must be finite and >= 0".into());
        }
        let m = &self.activity_mix;
        if !(0.0..=1.0).contains(&m.inactive_weight)
            || [m.inactive.a, m.inactive.b, m.active.a, m.active.b]
                .iter()
                .any(|&x| !(x > 0.0) || !x.is_finite())
        {
            return bad("activity mix needs a weight in [0,1] and positive finite Beta params".into());
        }
        if self.services.is_empty() {
            return bad("at least one service class is required".into());
        }
        if self.services.iter().any(|s| !(0.0..=1.0).contains(&s.gamma)) {
            return bad("service gamma must lie in [0,1]".into());
        }
        if self.services.iter().map(|s| s.gamma).sum::<f64>() > 1.0 + 1e-12 {
            return bad("service completion probabilities must sum to at most 1".into());
        }
        for (i, s) in self.services.iter().enumerate() {
            if self.services[..i].iter().any(|o| o.id == s.id) {
                return bad(format!("duplicate service id {}", s.id));
            }
        }
        let r = &self.revenue;
        if r.base_fare.len() != self.services.len()
            || r.base_fare.iter().any(|&f| !(f > 0.0) || !f.is_finite())
        {
            return bad("revenue.base_fare needs one positive fare per service".into());
        }
        if !(r.per_distance >= 0.0) || !(r.sigma >= 0.0) || !(r.zone_effect_sd >= 0.0) {
            return bad("revenue model parameters must be nonnegative".into());
        }
        if !(self.weekly_amplitude >= 0.0 && self.weekly_amplitude < 1.0) {
            return bad("weekly_amplitude must lie in [0,1)".into());
        }
        if !(self.zone_intensity_sd >= 0.0) || !self.zone_intensity_sd.is_finite() {
            return bad("zone_intensity_sd must be finite and >= 0".into());
        }
        Ok(())
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["activity", "log_distance", "hour_sin", "hour_cos"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        names.extend((FIXED_FEATURES..self.feature_dim).map(|i| format!("attr_{}", i - FIXED_FEATURES)));
        names
    }

    pub fn read_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// An immutable synthetic city.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub params: WorldParams,
    /// Normalized origin demand intensity per zone.
    pub zone_intensity: Vec<f64>,
    /// Destination distribution per origin, row-major `n_zones x n_zones`.
    pub dest_probs: Vec<f64>,
    /// Normalized intra-day arrival profile.
    pub time_profile: Vec<f64>,
    /// Log fare effect per origin zone.
    pub zone_fare_effect: Vec<f64>,
    #[serde(skip)]
    cdf: Cdfs,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Cdfs {
    zone: Vec<f64>,
    dest: Vec<Vec<f64>>,
    time: Vec<f64>,
    service: Vec<f64>,
}

fn cumulative(w: &[f64]) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    let mut acc = 0.0;
    let mut out: Vec<f64> = w
        .iter()
        .map(|x| {
            acc += x / total;
            acc
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = 1.0;
    }
    out
}

fn pick(cdf: &[f64], u: f64) -> usize {
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Build a world; identical params always yield an identical world.
pub fn gen_world(params: WorldParams) -> Result<World> {
    params.validate()?;
    let nz = params.n_zones as usize;
    let mut g = rng::stream(params.seed, &[tag::WORLD]);
    let zone_intensity_raw: Vec<f64> = (0..nz)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut g);
            (params.zone_intensity_sd * z).exp()
        })
        .collect();
    let total: f64 = zone_intensity_raw.iter().sum();
    let zone_intensity: Vec<f64> = zone_intensity_raw.iter().map(|x| x / total).collect();
    let zone_fare_effect: Vec<f64> = (0..nz)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut g);
            params.revenue.zone_effect_sd * z
        })
        .collect();

    let mut dest_probs = vec![0.0; nz * nz];
    for o in 0..nz {
        let row: Vec<f64> = (0..nz)
            .map(|d| zone_intensity[d] * (-zone_distance(nz, o, d) / 2.0).exp())
            .collect();
        let s: f64 = row.iter().sum();
        for d in 0..nz {
            dest_probs[o * nz + d] = row[d] / s;
        }
    }

    let nt = params.n_time_buckets as usize;
    let profile: Vec<f64> = (0..nt)
        .map(|t| {
            let h = (t as f64 + 0.5) * 24.0 / nt as f64;
            1.0 + 0.8 * (-((h - 8.0) / 2.0).powi(2)).exp() + 0.8 * (-((h - 18.0) / 2.5).powi(2)).exp()
        })
        .collect();
    let ps: f64 = profile.iter().sum();
    let time_profile = profile.iter().map(|x| x / ps).collect();

    let mut world = World {
        params,
        zone_intensity,
        dest_probs,
        time_profile,
        zone_fare_effect,
        cdf: Cdfs::default(),
    };
    world.build_cdfs();
    Ok(world)
}

/// Euclidean distance between zone centres on the square city grid.
pub fn zone_distance(n_zones: usize, a: usize, b: usize) -> f64 {
    let side = (n_zones as f64).sqrt().ceil() as usize;
    let (ax, ay) = ((a % side) as f64, (a / side) as f64);
    let (bx, by) = ((b % side) as f64, (b / side) as f64);
    ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
}

impl World {
    fn build_cdfs(&mut self) {
        let nz = self.params.n_zones as usize;
        self.cdf = Cdfs {
            zone: cumulative(&self.zone_intensity),
            dest: (0..nz)
                .map(|o| cumulative(&self.dest_probs[o * nz..(o + 1) * nz]))
                .collect(),
            time: cumulative(&self.time_profile),
            service: cumulative(&self.params.services.iter().map(|s| s.gamma.max(1e-12)).collect::<Vec<_>>()),
        };
    }

    /// Restore derived lookup tables after deserialization.
    pub fn from_json(s: &str) -> Result<Self> {
        let mut w: World = serde_json::from_str(s)?;
        w.params.validate()?;
        w.build_cdfs();
        Ok(w)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn grid(&self) -> &TreatmentGrid {
        &self.params.grid
    }

    pub fn services(&self) -> &[ServiceClass] {
        &self.params.services
    }

    pub fn n_levels(&self) -> usize {
        self.params.grid.len()
    }

    /// Coarsening that folds the day of week out of the time bucket.
    pub fn coarsening(&self, bucket_width: u32) -> Coarsening {
        Coarsening {
            buckets_per_day: self.params.n_time_buckets,
            bucket_width: bucket_width.max(1),
            zone_block: 1,
        }
    }

    /// Every cluster key this world can produce under `c`.
    pub fn cluster_keys(&self, c: &Coarsening) -> Vec<ClusterKey> {
        let mut keys: Vec<ClusterKey> = (0..self.params.n_zones)
            .flat_map(|o| {
                (0..self.params.n_zones).flat_map(move |d| {
                    (0..self.params.n_time_buckets).map(move |t| c.key(o, d, t))
                })
            })
            .collect();
        keys.sort();
        keys.dedup();
        keys
    }

    /// Query volume on `day`, following the weekly cycle.
    pub fn daily_volume(&self, day: u32) -> usize {
        let dow = (day % 7) as f64;
        let f = 1.0 + self.params.weekly_amplitude * (2.0 * std::f64::consts::PI * dow / 7.0).sin();
        (self.params.daily_query_volume as f64 * f).round() as usize
    }

    pub fn query_id(day: u32, idx: u32) -> u64 {
        ((day as u64) << 32) | idx as u64
    }

    fn sample_query(&self, day: u32, idx: u32) -> Query {
        let p = &self.params;
        let id = Self::query_id(day, idx);
        let mut g = rng::stream(p.seed, &[tag::QUERY, id]);
        let origin = pick(&self.cdf.zone, g.random());
        let dest = pick(&self.cdf.dest[origin], g.random());
        let intra = pick(&self.cdf.time, g.random());
        let m = &p.activity_mix;
        let comp = if g.random::<f64>() < m.inactive_weight {
            m.inactive
        } else {
            m.active
        };
        let activity: f64 = Beta::new(comp.a, comp.b).expect("validated").sample(&mut g);
        let jitter: f64 = StandardNormal.sample(&mut g);
        let distance = (zone_distance(p.n_zones as usize, origin, dest) + 0.5) * (0.2 * jitter).exp();
        let hour = (intra as f64 + 0.5) * 24.0 / p.n_time_buckets as f64;
        let angle = 2.0 * std::f64::consts::PI * hour / 24.0;
        let mut features = Vec::with_capacity(p.feature_dim);
        features.extend_from_slice(&[activity, distance.ln(), angle.sin(), angle.cos()]);
        for _ in FIXED_FEATURES..p.feature_dim {
            features.push(StandardNormal.sample(&mut g));
        }
        let service = pick(&self.cdf.service, g.random());
        Query {
            id,
            origin_zone: origin as u32,
            dest_zone: dest as u32,
            time_bucket: (day % 7) * p.n_time_buckets + intra as u32,
            features,
            service_class: p.services[service].id,
        }
    }

    /// `n` queries for `day`; query `i` depends only on (params, day, i).
    pub fn sample_queries(&self, day: u32, n: usize) -> Vec<Query> {
        self.sample_queries_with(Exec::default(), day, n)
    }

    pub fn sample_queries_with(&self, exec: Exec, day: u32, n: usize) -> Vec<Query> {
        par::map_range(exec, n, |i| self.sample_query(day, i as u32))
    }

    /// Ground-truth base logit b(x).
    pub fn base_logit(&self, x: &[f64]) -> f64 {
        let c = &self.params.base_rate_coeffs;
        let mut z = c[0] + x.iter().zip(&c[1..]).map(|(a, b)| a * b).sum::<f64>();
        if self.params.misspecified {
            let k = self.params.interaction_strength;
            let extra = x.get(FIXED_FEATURES).copied().unwrap_or(0.0);
            z += k * (x[0] * extra + (x[1] * x[1] - 1.0) + (2.0 * x[0] - 1.0).powi(2));
        }
        z
    }

    /// Ground-truth logit increments δ_m(x) >= 0 for levels 1..J.
    pub fn increments(&self, x: &[f64]) -> Vec<f64> {
        let h = &self.params.heterogeneity_coeffs;
        let het = softplus(h[0] + x.iter().zip(&h[1..]).map(|(a, b)| a * b).sum::<f64>());
        self.params.uplift_coeffs.iter().map(|u| u * het).collect()
    }

    /// Exact conversion probability at every level for query `q`.
    pub fn true_elasticity(&self, q: &Query) -> ElasticityCurve {
        ElasticityCurve::from_logits(self.base_logit(&q.features), &self.increments(&q.features))
    }

    /// Historical (confounded) treatment assignment.
    pub fn logging_policy(&self, q: &Query) -> usize {
        self.logging_policy_with_strength(q, self.params.logging_policy_strength)
    }

    /// Softmax over levels with logits `strength * (0.5 - activity) * j/(J-1)`;
    /// zero strength is uniform random assignment.
    pub fn logging_policy_with_strength(&self, q: &Query, strength: f64) -> usize {
        let j = self.n_levels();
        let tilt = strength * (0.5 - q.features[0]);
        let logits: Vec<f64> = (0..j).map(|l| tilt * l as f64 / (j - 1) as f64).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|z| (z - mx).exp()).collect();
        let u = rng::uniform(self.params.seed, &[tag::POLICY, q.id]);
        pick(&cumulative(&w), u)
    }

    /// The shared uniform that decides conversion for query `q` at any level.
    pub fn conversion_draw(&self, q: &Query) -> f64 {
        rng::uniform(self.params.seed, &[tag::OUTCOME, q.id])
    }

    /// Fare of service class at position `k` (index into `services`) for `q`.
    pub fn revenue(&self, q: &Query, k: usize) -> f64 {
        let r = &self.params.revenue;
        let distance = q.features[1].exp();
        let z: f64 = StandardNormal.sample(&mut rng::stream(self.params.seed, &[tag::REVENUE, q.id, k as u64]));
        r.base_fare[k]
            * (1.0 + r.per_distance * distance)
            * (self.zone_fare_effect[q.origin_zone as usize] + r.sigma * z - 0.5 * r.sigma * r.sigma).exp()
    }

    /// Fares for every service class, in `services` order.
    pub fn revenues(&self, q: &Query) -> Vec<f64> {
        (0..self.params.services.len()).map(|k| self.revenue(q, k)).collect()
    }

    fn service_position(&self, id: u32) -> usize {
        self.params.services.iter().position(|s| s.id == id).unwrap_or(0)
    }

    /// Realize conversion at level `j` using the query's common random draw.
    pub fn realize_outcome(&self, q: &Query, j: usize) -> OutcomeRecord {
        let p = self.true_elasticity(q).p()[j];
        OutcomeRecord {
            query: q.clone(),
            treatment_idx: j,
            converted: self.conversion_draw(q) < p,
            revenue_if_converted: self.revenue(q, self.service_position(q.service_class)),
        }
    }

    /// Draw `n` records under the historical policy or uniform randomization.
    pub fn generate_dataset(&self, n: usize, provenance: Provenance) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::Config("dataset size must be positive".into()));
        }
        let (day, strength) = match provenance {
            Provenance::Observational => (OBSERVATIONAL_DAY, self.params.logging_policy_strength),
            Provenance::Rct => (RCT_DAY, 0.0),
        };
        let records = par::map_range(Exec::default(), n, |i| {
            let q = self.sample_query(day, i as u32);
            let j = self.logging_policy_with_strength(&q, strength);
            self.realize_outcome(&q, j)
        });
        Ok(Dataset {
            grid: self.params.grid.clone(),
            services: self.params.services.clone(),
            feature_dim: self.params.feature_dim,
            feature_names: self.params.feature_names(),
            provenance,
            records,
        })
    }
}
