//! Response AUC and uplift ranking metrics (uplift curve / AUUC, Qini).
//!
//! Multi-class treatments are pooled: a record is "treated" when its level
//! is nonzero and is scored by the model's mean probability-space uplift
//! across the nonzero levels. Per-level curves (level j against control) are
//! reported alongside for diagnostics.
//!
//! Records with equal scores form a tie group that is consumed atomically:
//! Qini points are only placed at tie-group boundaries, and the uplift curve
//! interpolates the cumulative arm counts linearly inside a group. A constant
//! predictor therefore traces exactly the random-targeting line.

use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, ElasticityCurve, Provenance};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub predicted_uplift: f64,
    pub treated: bool,
    pub converted: bool,
    pub predicted_response: f64,
}

/// Records in a fixed id order; that order breaks ties when sorting.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalInput {
    pub records: Vec<EvalRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub phi: f64,
    pub value: f64,
}

/// Probability that a random positive outranks a random negative (ties half).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            what: "auc labels",
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of average ranks (1-based) of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut k = i;
        while k + 1 < idx.len() && scores[idx[k + 1]] == scores[idx[i]] {
            k += 1;
        }
        let avg_rank = (i + k) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=k].iter().filter(|&&r| labels[r]).count() as f64 * avg_rank;
        i = k + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Cumulative arm counts after consuming some prefix of the ranking.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Counts {
    n: f64,
    nt: f64,
    rt: f64,
    nc: f64,
    rc: f64,
}

impl Counts {
    fn add(&mut self, treated: bool, converted: bool, w: f64) {
        self.n += w;
        let y = if converted { w } else { 0.0 };
        if treated {
            self.nt += w;
            self.rt += y;
        } else {
            self.nc += w;
            self.rc += y;
        }
    }

    fn lerp(a: &Counts, b: &Counts, f: f64) -> Counts {
        let l = |x: f64, y: f64| x + f * (y - x);
        Counts {
            n: l(a.n, b.n),
            nt: l(a.nt, b.nt),
            rt: l(a.rt, b.rt),
            nc: l(a.nc, b.nc),
            rc: l(a.rc, b.rc),
        }
    }
}

/// Counts at every tie-group boundary of the ranking by `score` (descending).
fn group_boundaries(records: &[EvalRecord], score: impl Fn(&EvalRecord) -> f64) -> Vec<Counts> {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    // stable: equal scores keep id order
    idx.sort_by(|&a, &b| score(&records[b]).total_cmp(&score(&records[a])));
    let mut out = vec![Counts::default()];
    let mut cur = Counts::default();
    let mut i = 0;
    while i < idx.len() {
        let s = score(&records[idx[i]]);
        while i < idx.len() && score(&records[idx[i]]) == s {
            let r = &records[idx[i]];
            cur.add(r.treated, r.converted, 1.0);
            i += 1;
        }
        out.push(cur);
    }
    out
}

fn check_arms(input: &EvalInput) -> Result<()> {
    if input.records.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !input.records.iter().any(|r| r.treated) {
        return Err(Error::EmptyArm("treated".into()));
    }
    if !input.records.iter().any(|r| !r.treated) {
        return Err(Error::EmptyArm("control".into()));
    }
    Ok(())
}

/// Qini values `R_T - R_C * N_T / N_C` at each boundary; an empty control
/// prefix reuses the last valid control rate (0 before any control).
fn qini_points(bounds: &[Counts]) -> Vec<CurvePoint> {
    let total = bounds.last().map_or(1.0, |c| c.n);
    let mut ctrl_rate = 0.0;
    bounds
        .iter()
        .map(|c| {
            if c.nc > 0.0 {
                ctrl_rate = c.rc / c.nc;
            }
            CurvePoint {
                phi: c.n / total,
                value: c.rt - ctrl_rate * c.nt,
            }
        })
        .collect()
}

fn trapezoid(points: &[CurvePoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].phi - w[0].phi) * (w[0].value + w[1].value) / 2.0)
        .sum()
}

/// Qini curve of the model ranking, starting at (0, 0).
pub fn qini_curve(input: &EvalInput) -> Result<Vec<CurvePoint>> {
    check_arms(input)?;
    Ok(qini_points(&group_boundaries(&input.records, |r| r.predicted_uplift)))
}

/// Qini curve of the ideal ranking built from the observed outcomes:
/// treated converters first, control converters last.
pub fn perfect_qini_curve(input: &EvalInput) -> Result<Vec<CurvePoint>> {
    check_arms(input)?;
    Ok(qini_points(&group_boundaries(&input.records, |r| {
        match (r.treated, r.converted) {
            (true, true) => 1.0,
            (false, true) => -1.0,
            _ => 0.0,
        }
    })))
}

/// (model area - random area) / (perfect area - random area).
pub fn qini_coefficient(input: &EvalInput) -> Result<f64> {
    let model = qini_curve(input)?;
    let perfect = perfect_qini_curve(input)?;
    let end = model.last().unwrap().value;
    let random = end / 2.0;
    let denom = trapezoid(&perfect) - random;
    if denom.abs() < 1e-12 {
        return Ok(0.0);
    }
    Ok((trapezoid(&model) - random) / denom)
}

/// Uplift curve on the grid φ = k/grid_points and its per-capita area.
///
/// `V(φ) = (mean_T - mean_C) * n(φ)`, normalized by the population size.
pub fn uplift_curve_auuc(input: &EvalInput, grid_points: usize) -> Result<(Vec<CurvePoint>, f64)> {
    check_arms(input)?;
    if grid_points == 0 {
        return Err(Error::Config("uplift curve needs at least one grid point".into()));
    }
    let bounds = group_boundaries(&input.records, |r| r.predicted_uplift);
    let total = bounds.last().unwrap().n;
    let mut points = vec![CurvePoint { phi: 0.0, value: 0.0 }];
    let (mut t_rate, mut c_rate) = (0.0, 0.0);
    let mut g = 1;
    for k in 1..=grid_points {
        let phi = k as f64 / grid_points as f64;
        let n = phi * total;
        while g < bounds.len() - 1 && bounds[g].n < n {
            g += 1;
        }
        let (a, b) = (&bounds[g - 1], &bounds[g]);
        let f = if b.n > a.n { ((n - a.n) / (b.n - a.n)).clamp(0.0, 1.0) } else { 1.0 };
        let c = Counts::lerp(a, b, f);
        if c.nt > 0.0 {
            t_rate = c.rt / c.nt;
        }
        if c.nc > 0.0 {
            c_rate = c.rc / c.nc;
        }
        points.push(CurvePoint {
            phi,
            value: (t_rate - c_rate) * c.n / total,
        });
    }
    let area = trapezoid(&points);
    Ok((points, area))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub level: usize,
    pub amount: f64,
    pub n: usize,
    pub auuc: f64,
    pub qini: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub auuc: f64,
    pub qini: f64,
    pub per_level: Vec<LevelMetrics>,
    pub n: usize,
    pub arm_counts: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Percentile grid used for AUUC unless configured otherwise.
pub const DEFAULT_GRID_POINTS: usize = 100;

/// Pooled treated-vs-control input from per-record curves.
pub fn pooled_input(curves: &[ElasticityCurve], dataset: &Dataset) -> Result<EvalInput> {
    if curves.len() != dataset.records.len() {
        return Err(Error::Shape {
            what: "curves per record",
            expected: dataset.records.len(),
            got: curves.len(),
        });
    }
    Ok(EvalInput {
        records: curves
            .iter()
            .zip(&dataset.records)
            .map(|(c, r)| EvalRecord {
                predicted_uplift: c.mean_uplift(),
                treated: r.treatment_idx > 0,
                converted: r.converted,
                predicted_response: c.p()[r.treatment_idx],
            })
            .collect(),
    })
}

/// Full metrics report for model curves on an evaluation dataset.
pub fn evaluate(curves: &[ElasticityCurve], dataset: &Dataset, grid_points: usize) -> Result<MetricsReport> {
    let pooled = pooled_input(curves, dataset)?;
    let scores: Vec<f64> = pooled.records.iter().map(|r| r.predicted_response).collect();
    let labels: Vec<bool> = pooled.records.iter().map(|r| r.converted).collect();
    let auc_v = auc(&scores, &labels)?;
    let (_, auuc) = uplift_curve_auuc(&pooled, grid_points)?;
    let qini = qini_coefficient(&pooled)?;
    let mut per_level = Vec::new();
    for j in 1..dataset.grid.len() {
        let sub = EvalInput {
            records: curves
                .iter()
                .zip(&dataset.records)
                .filter(|(_, r)| r.treatment_idx == 0 || r.treatment_idx == j)
                .map(|(c, r)| EvalRecord {
                    predicted_uplift: c.uplift(j),
                    treated: r.treatment_idx == j,
                    converted: r.converted,
                    predicted_response: c.p()[r.treatment_idx],
                })
                .collect(),
        };
        if check_arms(&sub).is_err() {
            continue;
        }
        per_level.push(LevelMetrics {
            level: j,
            amount: dataset.grid.amount(j),
            n: sub.records.len(),
            auuc: uplift_curve_auuc(&sub, grid_points)?.1,
            qini: qini_coefficient(&sub)?,
        });
    }
    Ok(MetricsReport {
        auc: auc_v,
        auuc,
        qini,
        per_level,
        n: dataset.records.len(),
        arm_counts: dataset.arm_counts(),
        warning: (dataset.provenance == Provenance::Observational)
            .then(|| "uplift metrics computed on observational data are biased".to_string()),
    })
}

/// Curve as `phi,value` CSV.
pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("phi,value\n");
    for p in points {
        s.push_str(&format!("{},{}\n", p.phi, p.value));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn rec(u: f64, t: bool, y: bool) -> EvalRecord {
        EvalRecord {
            predicted_uplift: u,
            treated: t,
            converted: y,
            predicted_response: u,
        }
    }

    #[test]
    fn auc_examples() {
        let labels = [false, false, true, true];
        assert_eq!(auc(&[0.0, 0.0, 1.0, 1.0], &labels).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 4], &labels).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &labels).unwrap(), 0.75);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::DegenerateLabels)));
    }

    fn brute_auc(s: &[f64], l: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for k in 0..s.len() {
                if l[i] && !l[k] {
                    den += 1.0;
                    num += if s[i] > s[k] {
                        1.0
                    } else if s[i] == s[k] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_matches_pair_enumeration_and_is_rank_invariant() {
        let mut g = rng::stream(1, &[]);
        for _ in 0..50 {
            let n = g.random_range(2..40);
            let s: Vec<f64> = (0..n).map(|_| (g.random_range(0..8) as f64) / 4.0).collect();
            let mut l: Vec<bool> = (0..n).map(|_| g.random()).collect();
            l[0] = true;
            l[1] = false;
            let a = auc(&s, &l).unwrap();
            assert!((a - brute_auc(&s, &l)).abs() < 1e-12);
            let t1: Vec<f64> = s.iter().map(|x| x.exp()).collect();
            let t2: Vec<f64> = s.iter().map(|x| 3.0 * x - 7.0).collect();
            assert!((auc(&t1, &l).unwrap() - a).abs() < 1e-12);
            assert!((auc(&t2, &l).unwrap() - a).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_predictor_has_zero_qini() {
        let mut g = rng::stream(2, &[]);
        let input = EvalInput {
            records: (0..5000).map(|_| rec(0.1, g.random(), g.random_bool(0.3))).collect(),
        };
        assert!(qini_coefficient(&input).unwrap().abs() < 1e-9);
    }

    /// Independent Qini computation for distinct scores: walk the ranking one
    /// record at a time.
    fn brute_qini_values(records: &[EvalRecord]) -> Vec<f64> {
        let mut order: Vec<&EvalRecord> = records.iter().collect();
        order.sort_by(|a, b| b.predicted_uplift.partial_cmp(&a.predicted_uplift).unwrap());
        let mut vals = vec![0.0];
        for n in 1..=order.len() {
            let top = &order[..n];
            let nt = top.iter().filter(|r| r.treated).count() as f64;
            let rt = top.iter().filter(|r| r.treated && r.converted).count() as f64;
            let nc = top.iter().filter(|r| !r.treated).count() as f64;
            let rc = top.iter().filter(|r| !r.treated && r.converted).count() as f64;
            let rate = if nc > 0.0 { rc / nc } else { 0.0 };
            vals.push(rt - rate * nt);
        }
        vals
    }

    #[test]
    fn six_record_qini_curve_matches_enumeration() {
        let records = vec![
            rec(0.9, true, true),
            rec(0.8, false, false),
            rec(0.7, true, true),
            rec(0.5, false, true),
            rec(0.3, true, false),
            rec(0.1, false, true),
        ];
        let input = EvalInput { records: records.clone() };
        let curve = qini_curve(&input).unwrap();
        let expected = brute_qini_values(&records);
        // hand values: 1, 1, 2, 2-0.5*2=1, 2-0.5*3=0.5, 2-(2/3)*3=0
        assert_eq!(expected, vec![0.0, 1.0, 1.0, 2.0, 1.0, 0.5, 0.0]);
        for (k, (p, e)) in curve.iter().zip(&expected).enumerate() {
            assert!((p.value - e).abs() < 1e-12);
            assert!((p.phi - k as f64 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_arm_is_an_error() {
        let input = EvalInput {
            records: vec![rec(0.1, true, true), rec(0.2, true, false)],
        };
        assert!(matches!(qini_curve(&input), Err(Error::EmptyArm(_))));
        assert!(matches!(uplift_curve_auuc(&input, 10), Err(Error::EmptyArm(_))));
    }

    #[test]
    fn empty_control_prefix_carries_forward() {
        let records = vec![rec(0.9, true, true), rec(0.8, true, false), rec(0.1, false, true)];
        let c = qini_curve(&EvalInput { records }).unwrap();
        assert_eq!(c[1].value, 1.0);
        assert_eq!(c[2].value, 1.0);
        assert_eq!(c[3].value, 1.0 - 1.0 * 2.0);
    }

    #[test]
    fn single_grid_point_auuc_is_half_diff_in_means() {
        let records = vec![
            rec(0.9, true, true),
            rec(0.8, false, false),
            rec(0.7, true, true),
            rec(0.5, false, true),
            rec(0.3, true, false),
        ];
        let (curve, a) = uplift_curve_auuc(&EvalInput { records }, 1).unwrap();
        let diff = 2.0 / 3.0 - 0.5;
        assert_eq!(curve.len(), 2);
        assert!((a - diff / 2.0).abs() < 1e-12);
    }

    #[test]
    fn qini_is_rank_invariant() {
        let mut g = rng::stream(3, &[]);
        let records: Vec<EvalRecord> = (0..2000)
            .map(|_| {
                let u: f64 = g.random_range(-1.0..1.0);
                let t: bool = g.random();
                rec(u, t, g.random_bool(0.3 + if t { 0.2 * u.max(0.0) } else { 0.0 }))
            })
            .collect();
        let base = qini_coefficient(&EvalInput { records: records.clone() }).unwrap();
        let transformed: Vec<EvalRecord> = records
            .iter()
            .map(|r| EvalRecord {
                predicted_uplift: (2.0 * r.predicted_uplift).exp() + 5.0,
                ..*r
            })
            .collect();
        let other = qini_coefficient(&EvalInput { records: transformed }).unwrap();
        assert!((base - other).abs() < 1e-12);
        assert!(base > 0.0);
    }

    #[test]
    fn null_world_auuc_is_near_zero() {
        let mut g = rng::stream(4, &[]);
        let records: Vec<EvalRecord> = (0..50_000)
            .map(|_| rec(g.random(), g.random(), g.random_bool(0.4)))
            .collect();
        let (_, a) = uplift_curve_auuc(&EvalInput { records }, 100).unwrap();
        // per-capita noise is O(1/sqrt(n)) ~ 0.005
        assert!(a.abs() < 0.01, "{a}");
    }

    fn shuffled_scores(input: &EvalInput, seed: u64) -> EvalInput {
        let mut s: Vec<f64> = input.records.iter().map(|r| r.predicted_uplift).collect();
        s.shuffle(&mut rng::stream(seed, &[]));
        EvalInput {
            records: input
                .records
                .iter()
                .zip(s)
                .map(|(r, u)| EvalRecord {
                    predicted_uplift: u,
                    ..*r
                })
                .collect(),
        }
    }

    #[test]
    fn permuted_scores_average_to_zero_qini() {
        let mut g = rng::stream(5, &[]);
        let records: Vec<EvalRecord> = (0..10_000)
            .map(|_| {
                let u: f64 = g.random();
                let t: bool = g.random();
                rec(u, t, g.random_bool(0.3 + if t { 0.3 * u } else { 0.0 }))
            })
            .collect();
        let input = EvalInput { records };
        let permuted: Vec<f64> = (0..200)
            .map(|s| qini_coefficient(&shuffled_scores(&input, s)).unwrap())
            .collect();
        let mean = permuted.iter().sum::<f64>() / 200.0;
        assert!(mean.abs() < 0.02, "{mean}");
        let q = qini_coefficient(&input).unwrap();
        assert!(permuted.iter().all(|&p| p < q), "oracle {q}");
    }

    #[test]
    fn curve_csv_format() {
        let s = curve_csv(&[CurvePoint { phi: 0.0, value: 0.0 }, CurvePoint { phi: 0.5, value: 1.25 }]);
        assert_eq!(s, "phi,value\n0,0\n0.5,1.25\n");
    }
}
