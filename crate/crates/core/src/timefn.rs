//! Deterministic coefficient functions of time (`b_t`, `sigma_t`, `u_bar_t`).
//!
//! Tables are piecewise constant and right-continuous: the value on
//! `[knot_i, knot_{i+1})` is `values[i]`, the last value extends to
//! infinity, and times before the first knot use the first value.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VolexError};
use crate::model::TimeGrid;

/// Knot comparisons tolerate this much round-off so grid nodes computed as
/// `k * dt` land on the intended piece.
const KNOT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeFunction {
    Constant(f64),
    Table(PiecewiseConstant),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTable")]
pub struct PiecewiseConstant {
    knots: Vec<f64>,
    values: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTable {
    knots: Vec<f64>,
    values: Vec<f64>,
}

impl TryFrom<RawTable> for PiecewiseConstant {
    type Error = VolexError;

    fn try_from(raw: RawTable) -> Result<Self> {
        Self::new(raw.knots, raw.values)
    }
}

impl PiecewiseConstant {
    pub fn new(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if knots.is_empty() || knots.len() != values.len() {
            return Err(VolexError::Structural(format!(
                "table needs matching non-empty knots/values, got {} / {}",
                knots.len(),
                values.len()
            )));
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(VolexError::InvalidParameter(
                "table knots must be strictly increasing".into(),
            ));
        }
        if values.iter().chain(&knots).any(|v| !v.is_finite()) {
            return Err(VolexError::InvalidParameter("table entries must be finite".into()));
        }
        Ok(Self { knots, values })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn piece(&self, t: f64) -> usize {
        // partition_point returns the count of knots <= t (with tolerance).
        let idx = self.knots.partition_point(|&k| k <= t + KNOT_TOL * (1.0 + t.abs()));
        idx.saturating_sub(1)
    }

    /// Calls `f(lo, hi, value)` for every constant piece intersecting `[a, b]`.
    fn for_pieces(&self, a: f64, b: f64, mut f: impl FnMut(f64, f64, f64)) {
        let mut i = self.piece(a);
        let mut lo = a;
        loop {
            let hi = self.knots.get(i + 1).copied().unwrap_or(f64::INFINITY).min(b);
            if hi > lo {
                f(lo, hi, self.values[i]);
            }
            if hi >= b || i + 1 >= self.knots.len() {
                break;
            }
            lo = hi;
            i += 1;
        }
    }
}

impl TimeFunction {
    pub fn constant(c: f64) -> Self {
        TimeFunction::Constant(c)
    }

    pub fn table(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        Ok(TimeFunction::Table(PiecewiseConstant::new(knots, values)?))
    }

    /// Samples a closure at the grid nodes, holding each value until the next node.
    pub fn from_fn(f: impl Fn(f64) -> f64, grid: &TimeGrid) -> Result<Self> {
        let knots: Vec<f64> = grid.nodes().take(grid.n_steps()).collect();
        let values = knots.iter().map(|&t| f(t)).collect();
        Self::table(knots, values)
    }

    pub fn value(&self, t: f64) -> f64 {
        match self {
            TimeFunction::Constant(c) => *c,
            TimeFunction::Table(tab) => tab.values[tab.piece(t)],
        }
    }

    /// Exact `int_a^b f(s) ds`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        match self {
            TimeFunction::Constant(c) => c * (b - a),
            TimeFunction::Table(tab) => {
                let mut acc = 0.0;
                tab.for_pieces(a, b, |lo, hi, v| acc += v * (hi - lo));
                acc
            }
        }
    }

    /// Exact `int_a^b f(s)^2 ds`.
    pub fn integral_sq(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        match self {
            TimeFunction::Constant(c) => c * c * (b - a),
            TimeFunction::Table(tab) => {
                let mut acc = 0.0;
                tab.for_pieces(a, b, |lo, hi, v| acc += v * v * (hi - lo));
                acc
            }
        }
    }

    /// Exact `int_a^b exp(-rate (r - anchor)) f(r) dr`.
    pub fn exp_weighted_integral(&self, a: f64, b: f64, rate: f64, anchor: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        let piece = |lo: f64, hi: f64, v: f64| {
            if rate == 0.0 {
                v * (hi - lo)
            } else {
                v * (-rate * (lo - anchor)).exp() * (-(-rate * (hi - lo)).exp_m1()) / rate
            }
        };
        match self {
            TimeFunction::Constant(c) => piece(a, b, *c),
            TimeFunction::Table(tab) => {
                let mut acc = 0.0;
                tab.for_pieces(a, b, |lo, hi, v| acc += piece(lo, hi, v));
                acc
            }
        }
    }

    pub fn min_value(&self) -> f64 {
        match self {
            TimeFunction::Constant(c) => *c,
            TimeFunction::Table(tab) => tab.values.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, TimeFunction::Constant(_))
    }

    /// Knots strictly inside `(a, b)`; the function is constant between them.
    pub fn knots_in(&self, a: f64, b: f64) -> Vec<f64> {
        match self {
            TimeFunction::Constant(_) => Vec::new(),
            TimeFunction::Table(tab) => tab.knots.iter().copied().filter(|&k| k > a && k < b).collect(),
        }
    }
}

/// Coefficient tables read from CSV.
#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientTable {
    /// Columns `t,b,sigma`.
    DriftVol { drift: TimeFunction, vol: TimeFunction },
    /// Columns `t,u_bar`.
    Baseline(TimeFunction),
}

impl CoefficientTable {
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
        let cols: Vec<&str> = headers.iter().map(String::as_str).collect();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| VolexError::Config(format!("bad number {s:?}: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        let col = |i: usize| rows.iter().map(|r| r[i]).collect::<Vec<f64>>();
        match cols.as_slice() {
            ["t", "b", "sigma"] => Ok(CoefficientTable::DriftVol {
                drift: TimeFunction::table(col(0), col(1))?,
                vol: TimeFunction::table(col(0), col(2))?,
            }),
            ["t", "u_bar"] => {
                let u = col(1);
                if u.iter().any(|&v| !(v > 0.0)) {
                    return Err(VolexError::InvalidParameter("u_bar must be positive".into()));
                }
                Ok(CoefficientTable::Baseline(TimeFunction::table(col(0), u)?))
            }
            other => Err(VolexError::Config(format!(
                "unrecognised coefficient columns {other:?}; expected t,b,sigma or t,u_bar"
            ))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| VolexError::Config(format!("cannot open coefficient table {}: {e}", path.display())))?;
        Self::from_csv_reader(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step() -> TimeFunction {
        TimeFunction::table(vec![0.0, 0.5], vec![1.0, 3.0]).unwrap()
    }

    #[test]
    fn deserialized_tables_are_validated() {
        let ok: TimeFunction = serde_json::from_str(r#"{"knots": [0.0, 0.5], "values": [1.0, 2.0]}"#).unwrap();
        assert_eq!(ok.value(0.7), 2.0);
        assert_eq!(
            serde_json::from_str::<TimeFunction>("3.5").unwrap(),
            TimeFunction::constant(3.5)
        );
        assert!(serde_json::from_str::<TimeFunction>(r#"{"knots": [0.5, 0.0], "values": [1.0, 2.0]}"#).is_err());
        assert!(serde_json::from_str::<TimeFunction>(r#"{"knots": [0.0], "values": []}"#).is_err());
    }

    #[test]
    fn table_lookup_is_right_continuous() {
        let f = step();
        assert_eq!(f.value(-1.0), 1.0);
        assert_eq!(f.value(0.49), 1.0);
        assert_eq!(f.value(0.5), 3.0);
        assert_eq!(f.value(10.0), 3.0);
    }

    #[test]
    fn integrals_are_exact_on_pieces() {
        let f = step();
        assert!((f.integral(0.0, 1.0) - 2.0).abs() < 1e-15);
        assert!((f.integral(0.25, 0.75) - (0.25 + 0.75)).abs() < 1e-15);
        assert!((f.integral_sq(0.0, 1.0) - 5.0).abs() < 1e-15);
        let rate = 2.0;
        let expected = (1.0 - (-1.0f64).exp()) / 2.0 + 3.0 * ((-1.0f64).exp() - (-2.0f64).exp()) / 2.0;
        assert!((f.exp_weighted_integral(0.0, 1.0, rate, 0.0) - expected).abs() < 1e-14);
    }

    #[test]
    fn from_fn_holds_node_values() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let f = TimeFunction::from_fn(|t| 1.0 + t, &g).unwrap();
        assert_eq!(f.value(0.3), 1.25);
        assert!((f.integral(0.0, 1.0) - 0.25 * (1.0 + 1.25 + 1.5 + 1.75)).abs() < 1e-15);
    }

    #[test]
    fn csv_tables_parse() {
        let t = CoefficientTable::from_csv_reader("t,b,sigma\n0,0.5,0.3\n0.5,0.1,0.2\n".as_bytes()).unwrap();
        match t {
            CoefficientTable::DriftVol { drift, vol } => {
                assert_eq!(drift.value(0.7), 0.1);
                assert_eq!(vol.value(0.1), 0.3);
            }
            _ => panic!("wrong table kind"),
        }
        let u = CoefficientTable::from_csv_reader("t,u_bar\n0,100\n".as_bytes()).unwrap();
        assert!(matches!(u, CoefficientTable::Baseline(_)));
        assert!(CoefficientTable::from_csv_reader("t,foo\n0,1\n".as_bytes()).is_err());
        assert!(CoefficientTable::from_csv_reader("t,u_bar\n0,-1\n".as_bytes()).is_err());
    }
}
