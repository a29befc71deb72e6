//! Per-vertex shape fields and their channel standardisation.
//!
//! Channel layout: `[s, Δx, Δy, Δz]` or `[s, Δx, Δy, Δz, r, g, b]`. `s` is
//! the signed distance (positive inside), `Δ` the displacement of the grid
//! vertex and `rgb` a color in `[0, 1]`. All geometric channels are in world
//! units.

use thiserror::Error;

use crate::geom::{self, Vec3};
use crate::tensorops::Tensor;
use crate::tetgrid::GridLevel;

pub const SDF: usize = 0;
pub const DISPLACEMENT: usize = 1;
pub const COLOR: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum FieldError {
    #[error("fields carry 4 or 7 channels, found {0}")]
    ChannelCount(usize),
    #[error("field has {found} rows, level has {expected} vertices")]
    VertexCount { expected: usize, found: usize },
    #[error("channel scalers have {scalers} channels, field has {field}")]
    ScalerWidth { scalers: usize, field: usize },
    #[error("scaler std must be positive and finite")]
    DegenerateScale,
    #[error("no fields to fit scalers on")]
    Empty,
    #[error("field contains non-finite values")]
    NonFinite,
}

pub fn check_channels(c: usize) -> Result<(), FieldError> {
    match c {
        4 | 7 => Ok(()),
        _ => Err(FieldError::ChannelCount(c)),
    }
}

/// Per-channel affine standardisation `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelScalers {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelScalers {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self, FieldError> {
        if mean.len() != std.len() {
            return Err(FieldError::ScalerWidth {
                scalers: mean.len(),
                field: std.len(),
            });
        }
        if std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || mean.iter().any(|m| !m.is_finite()) {
            return Err(FieldError::DegenerateScale);
        }
        Ok(Self { mean, std })
    }

    /// Mean and population std of every channel over all rows of all
    /// fields. A constant channel gets std 1 so the map stays invertible.
    pub fn fit<'a>(fields: impl IntoIterator<Item = &'a Tensor>) -> Result<Self, FieldError> {
        let fields: Vec<&Tensor> = fields.into_iter().collect();
        let first = fields.first().ok_or(FieldError::Empty)?;
        let c = first.cols();
        let mut sum = vec![0.0; c];
        let mut count = 0usize;
        for f in &fields {
            if f.cols() != c {
                return Err(FieldError::ScalerWidth { scalers: c, field: f.cols() });
            }
            for r in 0..f.rows() {
                for (s, v) in sum.iter_mut().zip(f.row(r)) {
                    *s += v;
                }
            }
            count += f.rows();
        }
        if count == 0 {
            return Err(FieldError::Empty);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut var = vec![0.0; c];
        for f in &fields {
            for r in 0..f.rows() {
                for ((acc, v), m) in var.iter_mut().zip(f.row(r)).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / count as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self::new(mean, std)
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, t: &Tensor) -> Result<(), FieldError> {
        if t.cols() != self.channels() {
            return Err(FieldError::ScalerWidth {
                scalers: self.channels(),
                field: t.cols(),
            });
        }
        Ok(())
    }

    pub fn standardize(&self, t: &Tensor) -> Result<Tensor, FieldError> {
        self.check(t)?;
        let mut out = t.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn destandardize(&self, t: &Tensor) -> Result<Tensor, FieldError> {
        self.check(t)?;
        let mut out = t.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        Ok(out)
    }
}

/// A shape on one grid level, in world units.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    pub level: usize,
    pub values: Tensor,
    pub scalers: ChannelScalers,
}

impl FieldState {
    pub fn new(level: usize, values: Tensor, scalers: ChannelScalers) -> Result<Self, FieldError> {
        check_channels(values.cols())?;
        if scalers.channels() != values.cols() {
            return Err(FieldError::ScalerWidth {
                scalers: scalers.channels(),
                field: values.cols(),
            });
        }
        if !values.is_finite() {
            return Err(FieldError::NonFinite);
        }
        Ok(Self { level, values, scalers })
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn has_color(&self) -> bool {
        self.values.cols() == 7
    }

    pub fn num_vertices(&self) -> usize {
        self.values.rows()
    }

    pub fn sdf(&self, v: usize) -> f64 {
        self.values.get(v, SDF)
    }

    pub fn displacement(&self, v: usize) -> Vec3 {
        displacement(&self.values, v)
    }

    pub fn color(&self, v: usize) -> Option<Vec3> {
        self.has_color()
            .then(|| [self.values.get(v, COLOR), self.values.get(v, COLOR + 1), self.values.get(v, COLOR + 2)])
    }

    pub fn standardized(&self) -> Result<Tensor, FieldError> {
        self.scalers.standardize(&self.values)
    }

    pub fn check_level(&self, level: &GridLevel) -> Result<(), FieldError> {
        if level.num_vertices() != self.num_vertices() {
            return Err(FieldError::VertexCount {
                expected: level.num_vertices(),
                found: self.num_vertices(),
            });
        }
        Ok(())
    }

    /// Grid vertices moved by their displacement.
    pub fn deformed_positions(&self, level: &GridLevel) -> Vec<Vec3> {
        deformed_positions(&self.values, level)
    }
}

pub fn displacement(values: &Tensor, v: usize) -> Vec3 {
    [
        values.get(v, DISPLACEMENT),
        values.get(v, DISPLACEMENT + 1),
        values.get(v, DISPLACEMENT + 2),
    ]
}

pub fn deformed_positions(values: &Tensor, level: &GridLevel) -> Vec<Vec3> {
    level
        .vertices()
        .iter()
        .enumerate()
        .map(|(v, &p)| geom::add(p, displacement(values, v)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalers_invert() {
        let t = Tensor::from_vec(3, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 4.0, 0.5, 1.0, -3.0, 4.0]).unwrap();
        let sc = ChannelScalers::fit([&t]).unwrap();
        // constant last channel
        assert_eq!(sc.std[3], 1.0);
        let z = sc.standardize(&t).unwrap();
        let back = sc.destandardize(&z).unwrap();
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for c in 0..3 {
            let m: f64 = (0..3).map(|r| z.get(r, c)).sum::<f64>() / 3.0;
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn channel_count_is_checked() {
        let err = FieldState::new(0, Tensor::zeros(2, 5), ChannelScalers::identity(5)).unwrap_err();
        assert_eq!(err, FieldError::ChannelCount(5));
        assert_eq!(ChannelScalers::new(vec![0.0], vec![0.0]).unwrap_err(), FieldError::DegenerateScale);
    }
}
