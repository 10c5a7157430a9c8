//! Values flowing through virtual-sensor graphs and the atomic operators.

use thiserror::Error;

use crate::model::{Operator, Segment};

/// Smallest divisor magnitude accepted by `DIV`.
pub const EPS_DIV: f64 = 1e-12;

/// Slack for comparing sample offsets against segment bounds.
const OFFSET_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OpError {
    #[error("{op} expects {expected} input(s), got {actual}")]
    Arity {
        op: Operator,
        expected: usize,
        actual: usize,
    },
    #[error("division by |x| < {EPS_DIV} at sample {index}")]
    Division { index: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0} of an empty series")]
    Empty(Operator),
    #[error("SLOPE needs at least two samples")]
    TooShort,
    #[error("segment {segment} [{start}, {end}] selects no samples")]
    EmptyWindow { segment: String, start: f64, end: f64 },
}

/// Equidistant samples with their time base inside the cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub start_s: f64,
    pub rate_hz: f64,
    pub values: Vec<f64>,
}

impl Series {
    pub fn new(start_s: f64, rate_hz: f64, values: Vec<f64>) -> Self {
        Series {
            start_s,
            rate_hz,
            values,
        }
    }

    pub fn offset_of(&self, i: usize) -> f64 {
        self.start_s + i as f64 / self.rate_hz
    }

    /// Samples whose offset lies in `[start_s, end_s]`, both ends inclusive.
    pub fn restrict(&self, segment: &Segment) -> Result<Series, OpError> {
        let (lo, hi) = (segment.params.start_s, segment.params.end_s);
        let mut first = None;
        let mut values = Vec::new();
        for (i, v) in self.values.iter().enumerate() {
            let t = self.offset_of(i);
            if t >= lo - OFFSET_TOL && t <= hi + OFFSET_TOL {
                first.get_or_insert(i);
                values.push(*v);
            }
        }
        match first {
            Some(i) => Ok(Series::new(self.offset_of(i), self.rate_hz, values)),
            None => Err(OpError::EmptyWindow {
                segment: segment.id.to_string(),
                start: lo,
                end: hi,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Scalar(f64),
    Series(Series),
}

impl Value {
    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Value::Scalar(v) => Some(*v),
            Value::Series(_) => None,
        }
    }

    fn samples(&self) -> &[f64] {
        match self {
            Value::Scalar(v) => std::slice::from_ref(v),
            Value::Series(s) => &s.values,
        }
    }

    /// Equality on bit patterns, so NaN == NaN.
    pub fn bit_eq(&self, other: &Value) -> bool {
        let bits = |xs: &[f64]| xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        match (self, other) {
            (Value::Scalar(a), Value::Scalar(b)) => a.to_bits() == b.to_bits(),
            (Value::Series(a), Value::Series(b)) => {
                a.start_s.to_bits() == b.start_s.to_bits()
                    && a.rate_hz.to_bits() == b.rate_hz.to_bits()
                    && bits(&a.values) == bits(&b.values)
            }
            _ => false,
        }
    }
}

/// Samples of `measurement` inside `segment`.
pub fn restrict_to_segment(
    measurement: &crate::model::Measurement,
    segment: &Segment,
) -> Result<Vec<f64>, OpError> {
    let series = Series::new(0.0, measurement.sampling_rate_hz, measurement.values.clone());
    Ok(series.restrict(segment)?.values)
}

pub fn apply_operator(op: Operator, inputs: &[Value]) -> Result<Value, OpError> {
    if inputs.len() != op.arity() {
        return Err(OpError::Arity {
            op,
            expected: op.arity(),
            actual: inputs.len(),
        });
    }
    match op {
        Operator::Diff => binary(&inputs[0], &inputs[1], |a, b, _| Ok(a - b)),
        Operator::Div => binary(&inputs[0], &inputs[1], |a, b, i| {
            if b.abs() < EPS_DIV {
                Err(OpError::Division { index: i })
            } else {
                Ok(a / b)
            }
        }),
        Operator::Abs => Ok(match &inputs[0] {
            Value::Scalar(v) => Value::Scalar(v.abs()),
            Value::Series(s) => Value::Series(Series {
                values: s.values.iter().map(|v| v.abs()).collect(),
                ..s.clone()
            }),
        }),
        _ => reduce(op, inputs[0].samples()).map(Value::Scalar),
    }
}

fn binary(
    a: &Value,
    b: &Value,
    f: impl Fn(f64, f64, usize) -> Result<f64, OpError>,
) -> Result<Value, OpError> {
    match (a, b) {
        (Value::Scalar(x), Value::Scalar(y)) => f(*x, *y, 0).map(Value::Scalar),
        (Value::Series(s), Value::Scalar(y)) => {
            let values = s
                .values
                .iter()
                .enumerate()
                .map(|(i, x)| f(*x, *y, i))
                .collect::<Result<_, _>>()?;
            Ok(Value::Series(Series { values, ..s.clone() }))
        }
        (Value::Scalar(x), Value::Series(s)) => {
            let values = s
                .values
                .iter()
                .enumerate()
                .map(|(i, y)| f(*x, *y, i))
                .collect::<Result<_, _>>()?;
            Ok(Value::Series(Series { values, ..s.clone() }))
        }
        (Value::Series(s), Value::Series(t)) => {
            if s.rate_hz != t.rate_hz {
                return Err(OpError::Shape(format!(
                    "sampling rates differ ({} Hz vs {} Hz); reduce to scalars first",
                    s.rate_hz, t.rate_hz
                )));
            }
            if s.values.len() != t.values.len() {
                return Err(OpError::Shape(format!(
                    "series lengths differ ({} vs {})",
                    s.values.len(),
                    t.values.len()
                )));
            }
            let values = s
                .values
                .iter()
                .zip(&t.values)
                .enumerate()
                .map(|(i, (x, y))| f(*x, *y, i))
                .collect::<Result<_, _>>()?;
            Ok(Value::Series(Series { values, ..s.clone() }))
        }
    }
}

fn reduce(op: Operator, xs: &[f64]) -> Result<f64, OpError> {
    if xs.is_empty() {
        return Err(OpError::Empty(op));
    }
    let n = xs.len() as f64;
    Ok(match op {
        Operator::Me => {
            let mut sorted = xs.to_vec();
            sorted.sort_by(f64::total_cmp);
            let mid = sorted.len() / 2;
            if sorted.len() % 2 == 1 {
                sorted[mid]
            } else {
                (sorted[mid - 1] + sorted[mid]) / 2.0
            }
        }
        Operator::Mean => xs.iter().sum::<f64>() / n,
        Operator::Std => {
            let mean = xs.iter().sum::<f64>() / n;
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
        }
        Operator::Min => xs.iter().copied().fold(f64::INFINITY, f64::min),
        Operator::Max => xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Operator::Sum => xs.iter().sum(),
        Operator::Slope => {
            if xs.len() < 2 {
                return Err(OpError::TooShort);
            }
            let mean_i = (n - 1.0) / 2.0;
            let mean_x = xs.iter().sum::<f64>() / n;
            let mut num = 0.0;
            let mut den = 0.0;
            for (i, x) in xs.iter().enumerate() {
                let di = i as f64 - mean_i;
                num += di * (x - mean_x);
                den += di * di;
            }
            num / den
        }
        Operator::Diff | Operator::Div | Operator::Abs => unreachable!("not a reduction"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Measurement;

    fn series(values: &[f64]) -> Value {
        Value::Series(Series::new(0.0, 1.0, values.to_vec()))
    }

    fn measurement(rate: f64, duration: f64) -> Measurement {
        let n = (rate * duration).round() as usize;
        Measurement {
            id: "m".into(),
            asset_id: "a".into(),
            signal_id: "s".into(),
            cycle_index: 0,
            start_offset_s: 0.0,
            duration_s: duration,
            sampling_rate_hz: rate,
            values: (0..n).map(|i| i as f64).collect(),
        }
    }

    #[test]
    fn segment_windows() {
        let m = measurement(1.0, 60.0);
        assert_eq!(restrict_to_segment(&m, &Segment::fixed("INT1", 0.0, 60.0)).unwrap().len(), 60);
        let int13 = restrict_to_segment(&m, &Segment::fixed("INT13", 50.01, 60.0)).unwrap();
        assert_eq!(int13, (51..60).map(|i| i as f64).collect::<Vec<_>>());
        assert!(matches!(
            restrict_to_segment(&m, &Segment::fixed("tiny", 59.9, 59.95)),
            Err(OpError::EmptyWindow { .. })
        ));
    }

    #[test]
    fn segment_on_fast_signal() {
        let m = measurement(100.0, 60.0);
        assert_eq!(m.values.len(), 6000);
        let w = restrict_to_segment(&m, &Segment::fixed("INT13", 50.01, 60.0)).unwrap();
        // offsets 50.01 .. 59.99
        assert_eq!(w.len(), 999);
        assert_eq!(w[0], 5001.0);
    }

    #[test]
    fn elementwise_ops() {
        let d = apply_operator(Operator::Diff, &[series(&[3.0, 5.0]), series(&[1.0, 2.0])]).unwrap();
        assert_eq!(d, series(&[2.0, 3.0]));
        assert!(matches!(
            apply_operator(Operator::Div, &[series(&[1.0]), Value::Scalar(0.0)]),
            Err(OpError::Division { index: 0 })
        ));
        let b = apply_operator(Operator::Diff, &[Value::Scalar(10.0), series(&[1.0, 2.0])]).unwrap();
        assert_eq!(b, series(&[9.0, 8.0]));
        assert!(matches!(
            apply_operator(Operator::Diff, &[series(&[1.0]), series(&[1.0, 2.0])]),
            Err(OpError::Shape(_))
        ));
        let fast = Value::Series(Series::new(0.0, 100.0, vec![1.0]));
        assert!(matches!(
            apply_operator(Operator::Diff, &[series(&[1.0]), fast]),
            Err(OpError::Shape(_))
        ));
        assert_eq!(
            apply_operator(Operator::Abs, &[series(&[-1.0, 2.0])]).unwrap(),
            series(&[1.0, 2.0])
        );
    }

    #[test]
    fn reductions() {
        let r = |op, xs: &[f64]| apply_operator(op, &[series(xs)]).unwrap().as_scalar().unwrap();
        assert_eq!(r(Operator::Me, &[1.0, 3.0, 2.0]), 2.0);
        assert_eq!(r(Operator::Me, &[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(r(Operator::Mean, &[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(r(Operator::Std, &[1.0, 3.0]), 1.0);
        assert_eq!(r(Operator::Min, &[1.0, -3.0]), -3.0);
        assert_eq!(r(Operator::Max, &[1.0, -3.0]), 1.0);
        assert_eq!(r(Operator::Sum, &[1.0, 2.5]), 3.5);
        assert!((r(Operator::Slope, &[1.0, 3.0, 5.0, 7.0]) - 2.0).abs() < 1e-12);
        assert_eq!(r(Operator::Mean, &[7.0]), 7.0);
        assert!(matches!(apply_operator(Operator::Me, &[series(&[])]), Err(OpError::Empty(_))));
        assert!(matches!(
            apply_operator(Operator::Slope, &[Value::Scalar(1.0)]),
            Err(OpError::TooShort)
        ));
        assert!(matches!(apply_operator(Operator::Mean, &[]), Err(OpError::Arity { .. })));
    }

    #[test]
    fn restricted_series_keeps_time_base() {
        let s = Series::new(0.0, 1.0, (0..60).map(|i| i as f64).collect());
        let r = s.restrict(&Segment::fixed("w", 10.5, 20.0)).unwrap();
        assert_eq!(r.start_s, 11.0);
        let rr = r.restrict(&Segment::fixed("w2", 15.0, 16.0)).unwrap();
        assert_eq!(rr.values, vec![15.0, 16.0]);
    }
}
