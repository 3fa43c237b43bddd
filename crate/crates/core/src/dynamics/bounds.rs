use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};

/// Axis-aligned box `{v | lower ≤ v ≤ upper}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl Bounds {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        check_dim("box bounds", lower.len(), upper.len())?;
        for i in 0..lower.len() {
            if lower[i].is_nan() || upper[i].is_nan() || lower[i] > upper[i] {
                return Err(Error::Config(format!(
                    "empty box in dimension {i}: [{}, {}]",
                    lower[i], upper[i]
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn from_slices(lower: &[f64], upper: &[f64]) -> Result<Self> {
        Self::new(
            DVector::from_row_slice(lower),
            DVector::from_row_slice(upper),
        )
    }

    /// `{v | ‖v‖∞ ≤ radius}` in `dim` dimensions.
    pub fn symmetric(radius: f64, dim: usize) -> Result<Self> {
        Self::new(
            DVector::from_element(dim, -radius),
            DVector::from_element(dim, radius),
        )
    }

    pub fn unbounded(dim: usize) -> Self {
        Self {
            lower: DVector::from_element(dim, f64::NEG_INFINITY),
            upper: DVector::from_element(dim, f64::INFINITY),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn contains(&self, v: &DVector<f64>) -> bool {
        v.len() == self.dim()
            && v.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(x, (lo, hi))| *lo <= *x && *x <= *hi)
    }

    /// Largest componentwise excursion outside the box; zero inside.
    pub fn violation(&self, v: &DVector<f64>) -> f64 {
        v.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .map(|(x, (lo, hi))| (lo - x).max(x - hi).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn clamp(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            v.len(),
            v.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .map(|(x, (lo, hi))| x.clamp(*lo, *hi)),
        )
    }

    /// Move the lower faces up by `lower_margin` and the upper faces down by
    /// `upper_margin`.
    pub fn shrink(&self, lower_margin: &DVector<f64>, upper_margin: &DVector<f64>) -> Result<Self> {
        check_dim("lower margin", self.dim(), lower_margin.len())?;
        check_dim("upper margin", self.dim(), upper_margin.len())?;
        if lower_margin.iter().chain(upper_margin.iter()).any(|m| *m < 0.0 || m.is_nan()) {
            return Err(Error::Config("box margins must be nonnegative".into()));
        }
        Self::new(&self.lower + lower_margin, &self.upper - upper_margin)
    }

    /// Shrink every face by the same amount.
    pub fn shrink_uniform(&self, margin: f64) -> Result<Self> {
        let m = DVector::from_element(self.dim(), margin);
        self.shrink(&m, &m)
    }

    /// Translate the box by `-offset`: `{v | v + offset ∈ self}`.
    pub fn shifted_by(&self, offset: &DVector<f64>) -> Result<Self> {
        check_dim("box offset", self.dim(), offset.len())?;
        Ok(Self {
            lower: &self.lower - offset,
            upper: &self.upper - offset,
        })
    }

    /// Scale the box about its centre.
    pub fn scaled_about_center(&self, factor: f64) -> Self {
        let center = (&self.lower + &self.upper) * 0.5;
        let half = (&self.upper - &self.lower) * (0.5 * factor);
        Self {
            lower: &center - &half,
            upper: &center + &half,
        }
    }

    pub fn half_widths(&self) -> DVector<f64> {
        (&self.upper - &self.lower) * 0.5
    }

    /// Tensor grid with `per_axis` points per dimension, faces included.
    pub fn grid(&self, per_axis: usize) -> impl Iterator<Item = DVector<f64>> + '_ {
        let d = self.dim();
        let per_axis = per_axis.max(2);
        let total = per_axis.pow(d as u32);
        (0..total).map(move |mut k| {
            let mut x = DVector::zeros(d);
            for i in 0..d {
                let j = k % per_axis;
                k /= per_axis;
                let frac = j as f64 / (per_axis - 1) as f64;
                x[i] = if j == per_axis - 1 {
                    self.upper[i]
                } else {
                    self.lower[i] + frac * (self.upper[i] - self.lower[i])
                };
            }
            x
        })
    }
}
