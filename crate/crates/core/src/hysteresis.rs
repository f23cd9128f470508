//! Deadband estimate of valve spindle positions from commanded set-points.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum HysteresisError {
    #[error("timestamps must be strictly increasing (index {0})")]
    NonMonotone(usize),
    #[error("series has {times} timestamps but {values} values")]
    Length { times: usize, values: usize },
    #[error("set-point {value} at index {index} outside [0, 1]")]
    Setpoint { index: usize, value: f64 },
}

/// Time-ordered commanded set-points of one valve.
#[derive(Clone, Debug, PartialEq)]
pub struct SetpointSeries<T> {
    t: Vec<f64>,
    v: Vec<T>,
}

impl<T: Scalar> SetpointSeries<T> {
    pub fn new(t: Vec<f64>, v: Vec<T>) -> Result<Self, HysteresisError> {
        if t.len() != v.len() {
            return Err(HysteresisError::Length {
                times: t.len(),
                values: v.len(),
            });
        }
        for i in 1..t.len() {
            if !(t[i] > t[i - 1]) {
                return Err(HysteresisError::NonMonotone(i));
            }
        }
        for (index, &x) in v.iter().enumerate() {
            if !(x >= T::zero() && x <= T::one()) {
                return Err(HysteresisError::Setpoint {
                    index,
                    value: x.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        Ok(SetpointSeries { t, v })
    }

    pub fn times(&self) -> &[f64] {
        &self.t
    }

    pub fn values(&self) -> &[T] {
        &self.v
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }
}

/// One filter step from the previous estimate `prev` toward command `v`.
#[inline]
pub fn deadband_step<T: Scalar>(prev: T, v: T, delta: T) -> T {
    let next = if (v - prev).abs() <= delta {
        prev
    } else if v >= prev + delta {
        v - delta
    } else {
        v + delta
    };
    next.max(T::zero()).min(T::one())
}

/// Deadband filter over a plain value sequence. The first estimate equals the
/// first command.
pub fn filter_values<T: Scalar>(v: &[T], delta: T) -> Vec<T> {
    let mut out = Vec::with_capacity(v.len());
    let mut prev = match v.first() {
        Some(&x) => x,
        None => return out,
    };
    out.push(prev);
    for &x in &v[1..] {
        prev = deadband_step(prev, x, delta);
        out.push(prev);
    }
    out
}

/// Spindle estimate for a set-point series.
pub fn filter_setpoints<T: Scalar>(series: &SetpointSeries<T>, delta: T) -> SetpointSeries<T> {
    SetpointSeries {
        t: series.t.clone(),
        v: filter_values(&series.v, delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn hand_traces() {
        let out = filter_values(&[0.50, 0.51, 0.53, 0.50], 0.015);
        assert!(close(&out, &[0.50, 0.50, 0.515, 0.515]), "{out:?}");
        let out = filter_values(&[0.0, 0.1, 0.2], 0.015);
        assert!(close(&out, &[0.0, 0.085, 0.185]), "{out:?}");
    }

    #[test]
    fn zero_deadband_is_identity() {
        let v = [0.3, 0.9, 0.1, 0.1, 0.55];
        assert_eq!(filter_values(&v, 0.0), v.to_vec());
    }

    #[test]
    fn empty_and_single() {
        assert!(filter_values::<f64>(&[], 0.1).is_empty());
        assert_eq!(filter_values(&[0.4], 0.1), vec![0.4]);
    }

    #[test]
    fn series_validation() {
        assert!(SetpointSeries::new(vec![0.0, 1.0], vec![0.2, 0.3]).is_ok());
        assert_eq!(
            SetpointSeries::new(vec![0.0, 0.0], vec![0.2, 0.3]),
            Err(HysteresisError::NonMonotone(1))
        );
        assert!(SetpointSeries::new(vec![0.0], vec![1.2]).is_err());
        assert!(SetpointSeries::new(vec![0.0], vec![0.2, 0.3]).is_err());
        let s = SetpointSeries::new(vec![0.0, 1.0, 2.0], vec![0.0, 0.1, 0.2]).unwrap();
        let f = filter_setpoints(&s, 0.015);
        assert_eq!(f.times(), s.times());
        assert!(close(f.values(), &[0.0, 0.085, 0.185]));
    }

    #[test]
    fn f32_filter() {
        let out = filter_values(&[0.0f32, 0.1, 0.2], 0.015);
        assert!((out[2] - 0.185).abs() < 1e-6);
    }
}
