//! Shared vocabulary types and the dataset container.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered subsidy amounts; index 0 is the control (amount 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TreatmentGrid {
    levels: Vec<f64>,
}

impl TreatmentGrid {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(Error::Config(format!(
                "treatment grid needs at least 2 levels, got {}",
                levels.len()
            )));
        }
        if levels[0] != 0.0 {
            return Err(Error::Config("treatment grid level 0 must be 0".into()));
        }
        if levels.iter().any(|l| !l.is_finite()) || levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("treatment levels must be finite and strictly increasing".into()));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Number of levels J.
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn amount(&self, j: usize) -> f64 {
        self.levels[j]
    }

    /// Index of the level equal to `amount`.
    pub fn treatment_index(&self, amount: f64) -> Result<usize> {
        self.levels
            .iter()
            .position(|&l| l == amount)
            .ok_or(Error::NotOnGrid(amount))
    }
}

impl Default for TreatmentGrid {
    fn default() -> Self {
        Self {
            levels: vec![0.0, 1.0, 2.0, 3.0, 5.0],
        }
    }
}

impl TryFrom<Vec<f64>> for TreatmentGrid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TreatmentGrid> for Vec<f64> {
    fn from(g: TreatmentGrid) -> Self {
        g.levels
    }
}

/// A service class k and the probability its orders are completed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceClass {
    pub id: u32,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: u64,
    pub origin_zone: u32,
    pub dest_zone: u32,
    /// Hour-of-week style bucket: `day_of_week * buckets_per_day + intra_day`.
    pub time_bucket: u32,
    pub features: Vec<f64>,
    pub service_class: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub query: Query,
    pub treatment_idx: usize,
    pub converted: bool,
    pub revenue_if_converted: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Observational,
    Rct,
}

impl std::str::FromStr for Provenance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "observational" => Ok(Provenance::Observational),
            "rct" => Ok(Provenance::Rct),
            other => Err(Error::Config(format!("unknown provenance {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub grid: TreatmentGrid,
    pub services: Vec<ServiceClass>,
    pub feature_dim: usize,
    pub feature_names: Vec<String>,
    pub provenance: Provenance,
    pub records: Vec<OutcomeRecord>,
}

/// Conversion probability at every treatment level, monotone nondecreasing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticityCurve {
    p: Vec<f64>,
}

impl ElasticityCurve {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("elasticity entries must lie in [0,1]".into()));
        }
        if p.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Data("elasticity curve must be nondecreasing".into()));
        }
        Ok(Self { p })
    }

    /// Curve `sigmoid(base + cumulative increments)`; increments must be >= 0.
    ///
    /// Entries stay strictly inside (0,1) even where the logistic rounds to
    /// 0 or 1 in f64.
    pub fn from_logits(base_logit: f64, increments: &[f64]) -> Self {
        let open = |z: f64| sigmoid(z).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
        let mut p = Vec::with_capacity(increments.len() + 1);
        let mut z = base_logit;
        p.push(open(z));
        for &d in increments {
            debug_assert!(d >= 0.0);
            z += d;
            let next = open(z).max(*p.last().unwrap());
            p.push(next);
        }
        Self { p }
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// Probability-space uplift of level `j` over control.
    pub fn uplift(&self, j: usize) -> f64 {
        self.p[j] - self.p[0]
    }

    /// Mean probability-space uplift across the nonzero levels.
    pub fn mean_uplift(&self) -> f64 {
        let j = self.p.len();
        (1..j).map(|l| self.uplift(l)).sum::<f64>() / (j - 1) as f64
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Aggregation key for allocation: (origin, destination, coarsened time).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClusterKey {
    pub origin_zone: u32,
    pub dest_zone: u32,
    pub time_bucket: u32,
}

/// Maps raw query locations and time buckets onto cluster keys.
///
/// Time buckets are folded modulo `buckets_per_day` (dropping the day of
/// week) and then grouped `bucket_width` at a time; zones are grouped
/// `zone_block` at a time by index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coarsening {
    pub buckets_per_day: u32,
    pub bucket_width: u32,
    pub zone_block: u32,
}

impl Coarsening {
    /// No grouping at all: keys equal raw (origin, dest, time_bucket).
    pub fn identity() -> Self {
        Self {
            buckets_per_day: u32::MAX,
            bucket_width: 1,
            zone_block: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.buckets_per_day == 0 || self.bucket_width == 0 || self.zone_block == 0 {
            return Err(Error::Config("coarsening factors must be positive".into()));
        }
        Ok(())
    }

    pub fn key(&self, origin_zone: u32, dest_zone: u32, time_bucket: u32) -> ClusterKey {
        ClusterKey {
            origin_zone: origin_zone / self.zone_block,
            dest_zone: dest_zone / self.zone_block,
            time_bucket: (time_bucket % self.buckets_per_day) / self.bucket_width,
        }
    }

    pub fn key_of(&self, q: &Query) -> ClusterKey {
        self.key(q.origin_zone, q.dest_zone, q.time_bucket)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    EmptyDataset,
    IndexOutOfRange { record: usize, treatment_idx: usize },
    FeatureLength { record: usize, expected: usize, got: usize },
    NonFiniteFeature { record: usize },
    NegativeRevenue { record: usize },
    UnknownService { record: usize, service_class: u32 },
    BadProbability { service: u32, gamma: f64 },
    EmptyArm { arm: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Inspect a dataset for structural problems without modifying it.
pub fn validate_dataset(d: &Dataset) -> ValidationReport {
    let mut v = Vec::new();
    if d.records.is_empty() {
        v.push(Violation::EmptyDataset);
    }
    for s in &d.services {
        if !(0.0..=1.0).contains(&s.gamma) {
            v.push(Violation::BadProbability {
                service: s.id,
                gamma: s.gamma,
            });
        }
    }
    let j = d.grid.len();
    let mut arm_counts = vec![0usize; j];
    for (i, r) in d.records.iter().enumerate() {
        if r.treatment_idx >= j {
            v.push(Violation::IndexOutOfRange {
                record: i,
                treatment_idx: r.treatment_idx,
            });
        } else {
            arm_counts[r.treatment_idx] += 1;
        }
        if r.query.features.len() != d.feature_dim {
            v.push(Violation::FeatureLength {
                record: i,
                expected: d.feature_dim,
                got: r.query.features.len(),
            });
        }
        if r.query.features.iter().any(|x| !x.is_finite()) {
            v.push(Violation::NonFiniteFeature { record: i });
        }
        if !(r.revenue_if_converted >= 0.0) {
            v.push(Violation::NegativeRevenue { record: i });
        }
        if !d.services.iter().any(|s| s.id == r.query.service_class) {
            v.push(Violation::UnknownService {
                record: i,
                service_class: r.query.service_class,
            });
        }
    }
    if !d.records.is_empty() {
        for (arm, &c) in arm_counts.iter().enumerate() {
            if c == 0 {
                v.push(Violation::EmptyArm { arm });
            }
        }
    }
    ValidationReport { violations: v }
}

const DATASET_FORMAT: &str = "ridesub-dataset";
const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    grid: TreatmentGrid,
    services: Vec<ServiceClass>,
    feature_dim: usize,
    feature_names: Vec<String>,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: u64,
    origin: u32,
    dest: u32,
    time_bucket: u32,
    service_class: u32,
    features: Vec<f64>,
    t: usize,
    y: u8,
    revenue: f64,
}

impl Dataset {
    pub fn n_levels(&self) -> usize {
        self.grid.len()
    }

    /// Write the header line followed by one JSON record per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            grid: self.grid.clone(),
            services: self.services.clone(),
            feature_dim: self.feature_dim,
            feature_names: self.feature_names.clone(),
            provenance: self.provenance,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            let line = RecordLine {
                id: r.query.id,
                origin: r.query.origin_zone,
                dest: r.query.dest_zone,
                time_bucket: r.query.time_bucket,
                service_class: r.query.service_class,
                features: r.query.features.clone(),
                t: r.treatment_idx,
                y: r.converted as u8,
                revenue: r.revenue_if_converted,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format("dataset file is empty".into()))??;
        let header: DatasetHeader = serde_json::from_str(&first)?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset header {} v{}",
                header.format, header.version
            )));
        }
        let mut records = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: RecordLine = serde_json::from_str(&line)?;
            if rec.y > 1 {
                return Err(Error::Format(format!("record {}: y must be 0 or 1", rec.id)));
            }
            records.push(OutcomeRecord {
                query: Query {
                    id: rec.id,
                    origin_zone: rec.origin,
                    dest_zone: rec.dest,
                    time_bucket: rec.time_bucket,
                    features: rec.features,
                    service_class: rec.service_class,
                },
                treatment_idx: rec.t,
                converted: rec.y == 1,
                revenue_if_converted: rec.revenue,
            });
        }
        Ok(Dataset {
            grid: header.grid,
            services: header.services,
            feature_dim: header.feature_dim,
            feature_names: header.feature_names,
            provenance: header.provenance,
            records,
        })
    }

    pub fn write_file(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_jsonl(std::io::BufWriter::new(f))
    }

    pub fn read_file(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }

    /// Record count per treatment arm.
    pub fn arm_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.grid.len()];
        for r in &self.records {
            if r.treatment_idx < c.len() {
                c[r.treatment_idx] += 1;
            }
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid024() -> TreatmentGrid {
        TreatmentGrid::new(vec![0.0, 2.0, 4.0]).unwrap()
    }

    fn record(i: u64, t: usize, dim: usize) -> OutcomeRecord {
        OutcomeRecord {
            query: Query {
                id: i,
                origin_zone: (i % 3) as u32,
                dest_zone: (i % 2) as u32,
                time_bucket: (i % 24) as u32,
                features: (0..dim).map(|k| (i as f64) * 0.1 + k as f64).collect(),
                service_class: 0,
            },
            treatment_idx: t,
            converted: i % 2 == 0,
            revenue_if_converted: 20.0 + i as f64 / 3.0,
        }
    }

    fn dataset(n: usize, provenance: Provenance) -> Dataset {
        Dataset {
            grid: grid024(),
            services: vec![ServiceClass { id: 0, gamma: 0.9 }],
            feature_dim: 3,
            feature_names: vec!["a".into(), "b".into(), "c".into()],
            provenance,
            records: (0..n).map(|i| record(i as u64, i % 3, 3)).collect(),
        }
    }

    #[test]
    fn treatment_index_lookup() {
        let g = grid024();
        assert_eq!(g.treatment_index(0.0).unwrap(), 0);
        assert_eq!(g.treatment_index(4.0).unwrap(), 2);
        assert!(matches!(g.treatment_index(3.0), Err(Error::NotOnGrid(_))));
    }

    #[test]
    fn grid_invariants() {
        assert!(TreatmentGrid::new(vec![0.0]).is_err());
        assert!(TreatmentGrid::new(vec![1.0, 2.0]).is_err());
        assert!(TreatmentGrid::new(vec![0.0, 2.0, 2.0]).is_err());
        assert_eq!(TreatmentGrid::default().len(), 5);
    }

    #[test]
    fn well_formed_dataset_validates() {
        assert!(validate_dataset(&dataset(10, Provenance::Observational)).is_ok());
    }

    #[test]
    fn out_of_range_index_reported() {
        let mut d = dataset(10, Provenance::Observational);
        d.records[4].treatment_idx = 3;
        let rep = validate_dataset(&d);
        assert_eq!(
            rep.violations,
            vec![Violation::IndexOutOfRange {
                record: 4,
                treatment_idx: 3
            }]
        );
    }

    #[test]
    fn rct_without_controls_has_empty_arm() {
        let mut d = dataset(10, Provenance::Rct);
        for r in &mut d.records {
            if r.treatment_idx == 0 {
                r.treatment_idx = 1;
            }
        }
        let rep = validate_dataset(&d);
        assert_eq!(rep.violations, vec![Violation::EmptyArm { arm: 0 }]);
    }

    #[test]
    fn feature_length_and_gamma_checked() {
        let mut d = dataset(4, Provenance::Rct);
        d.records[1].query.features.pop();
        d.services[0].gamma = 1.5;
        let rep = validate_dataset(&d);
        assert!(rep.violations.contains(&Violation::FeatureLength {
            record: 1,
            expected: 3,
            got: 2
        }));
        assert!(rep
            .violations
            .iter()
            .any(|v| matches!(v, Violation::BadProbability { .. })));
    }

    #[test]
    fn curve_invariants() {
        assert!(ElasticityCurve::new(vec![0.2, 0.1]).is_err());
        assert!(ElasticityCurve::new(vec![0.2, 1.1]).is_err());
        let c = ElasticityCurve::from_logits(0.0, &[0.0, 0.0]);
        assert_eq!(c.p(), &[0.5, 0.5, 0.5]);
        assert_eq!(c.uplift(0), 0.0);
    }

    #[test]
    fn cluster_keys_sort_lexicographically() {
        let mut keys = vec![
            ClusterKey { origin_zone: 1, dest_zone: 0, time_bucket: 0 },
            ClusterKey { origin_zone: 0, dest_zone: 2, time_bucket: 1 },
            ClusterKey { origin_zone: 0, dest_zone: 2, time_bucket: 0 },
        ];
        keys.sort();
        assert_eq!(keys[0].time_bucket, 0);
        assert_eq!(keys[1].time_bucket, 1);
        assert_eq!(keys[2].origin_zone, 1);
    }

    fn arb_record(dim: usize) -> impl Strategy<Value = OutcomeRecord> {
        (
            any::<u64>(),
            0u32..100,
            0u32..100,
            0u32..168,
            prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, dim),
            0usize..3,
            any::<bool>(),
            0.0f64..1e6,
        )
            .prop_map(|(id, o, d, tb, features, t, y, rev)| OutcomeRecord {
                query: Query {
                    id,
                    origin_zone: o,
                    dest_zone: d,
                    time_bucket: tb,
                    features,
                    service_class: 0,
                },
                treatment_idx: t,
                converted: y,
                revenue_if_converted: rev,
            })
    }

    proptest! {
        #[test]
        fn dataset_roundtrip_is_bit_exact(records in prop::collection::vec(arb_record(4), 1..20)) {
            let d = Dataset {
                grid: TreatmentGrid::default(),
                services: vec![ServiceClass { id: 0, gamma: 0.37 }, ServiceClass { id: 1, gamma: 0.1 }],
                feature_dim: 4,
                feature_names: (0..4).map(|i| format!("f{i}")).collect(),
                provenance: Provenance::Rct,
                records,
            };
            let mut buf = Vec::new();
            d.write_jsonl(&mut buf).unwrap();
            let back = Dataset::read_jsonl(&buf[..]).unwrap();
            prop_assert_eq!(back.records.len(), d.records.len());
            for (a, b) in d.records.iter().zip(&back.records) {
                for (x, y) in a.query.features.iter().zip(&b.query.features) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
                prop_assert_eq!(a.revenue_if_converted.to_bits(), b.revenue_if_converted.to_bits());
            }
            prop_assert_eq!(back, d);
        }
    }
}
