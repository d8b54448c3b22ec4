//! Batch, layer and group normalization over `[rows, width]` activations.
//!
//! All three standardize values within a statistic group using the biased
//! (divide-by-count) variance, then apply a per-feature gain and shift. They
//! differ only in how elements map to groups:
//!
//! * batch: one group per feature, spanning the rows of the batch
//! * layer: one group per row, spanning every feature
//! * group: `groups` contiguous feature blocks per row

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Mode;

/// Momentum used by the running-statistic moving average unless configured otherwise.
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_NORM_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormKind {
    Batch { momentum: f64 },
    Layer,
    Group { groups: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn fresh(width: usize) -> Self {
        RunningStats {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }
}

/// What backward needs from a normalization forward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    kind: NormKind,
    rows: usize,
    width: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Statistics were constants of the pass (batch norm in eval mode).
    fixed_stats: bool,
}

pub struct NormForward {
    pub y: Tensor,
    /// Updated running statistics; present only for batch norm in train mode.
    pub running: Option<RunningStats>,
    pub cache: NormCache,
}

pub struct NormGrads {
    pub dx: Vec<f64>,
    pub dgain: Vec<f64>,
    pub dshift: Vec<f64>,
}

struct Grouping {
    kind: NormKind,
    width: usize,
}

impl Grouping {
    fn count(&self, rows: usize) -> usize {
        match self.kind {
            NormKind::Batch { .. } => self.width,
            NormKind::Layer => rows,
            NormKind::Group { groups } => rows * groups,
        }
    }

    #[inline]
    fn group(&self, i: usize, j: usize) -> usize {
        match self.kind {
            NormKind::Batch { .. } => j,
            NormKind::Layer => i,
            NormKind::Group { groups } => i * groups + j / (self.width / groups),
        }
    }

    fn members(&self, rows: usize) -> f64 {
        (match self.kind {
            NormKind::Batch { .. } => rows,
            NormKind::Layer => self.width,
            NormKind::Group { groups } => self.width / groups,
        }) as f64
    }
}

fn check_shapes(kind: NormKind, x: &Tensor, gain: &[f64], shift: &[f64]) -> Result<(usize, usize)> {
    if x.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "normalization expects [rows, width], got {:?}",
            x.shape()
        )));
    }
    let (rows, width) = (x.shape()[0], x.shape()[1]);
    if gain.len() != width || shift.len() != width {
        return Err(Error::ShapeMismatch(format!(
            "width {width} but gain/shift of length {}/{}",
            gain.len(),
            shift.len()
        )));
    }
    if let NormKind::Group { groups } = kind {
        if groups == 0 || width % groups != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{groups} groups do not divide width {width}"
            )));
        }
    }
    Ok((rows, width))
}

/// Normalizes `x` and, for batch norm in train mode, returns updated running statistics.
pub fn norm_forward(
    kind: NormKind,
    x: &Tensor,
    gain: &[f64],
    shift: &[f64],
    running: Option<&RunningStats>,
    mode: Mode,
    epsilon: f64,
) -> Result<NormForward> {
    let (rows, width) = check_shapes(kind, x, gain, shift)?;
    let data = x.data();
    let grouping = Grouping { kind, width };

    let use_running = matches!(kind, NormKind::Batch { .. }) && mode == Mode::Eval;
    if matches!(kind, NormKind::Batch { .. }) && mode == Mode::Train && rows < 2 {
        return Err(Error::DegenerateBatch(rows));
    }

    let (mean, var) = if use_running {
        let rs = running.ok_or_else(|| {
            Error::ShapeMismatch("batch norm in eval mode needs running statistics".into())
        })?;
        if rs.mean.len() != width || rs.var.len() != width {
            return Err(Error::ShapeMismatch("running statistics width".into()));
        }
        (rs.mean.clone(), rs.var.clone())
    } else {
        let ng = grouping.count(rows);
        let m = grouping.members(rows);
        let mut mean = vec![0.0; ng];
        for i in 0..rows {
            for j in 0..width {
                mean[grouping.group(i, j)] += data[i * width + j];
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        let mut var = vec![0.0; ng];
        for i in 0..rows {
            for j in 0..width {
                let g = grouping.group(i, j);
                let d = data[i * width + j] - mean[g];
                var[g] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        (mean, var)
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let mut xhat = vec![0.0; rows * width];
    let mut y = vec![0.0; rows * width];
    for i in 0..rows {
        for j in 0..width {
            let g = grouping.group(i, j);
            let k = i * width + j;
            xhat[k] = (data[k] - mean[g]) * inv_std[g];
            y[k] = gain[j] * xhat[k] + shift[j];
        }
    }

    let updated = match (kind, mode) {
        (NormKind::Batch { momentum }, Mode::Train) => {
            let prev = running
                .cloned()
                .unwrap_or_else(|| RunningStats::fresh(width));
            Some(RunningStats {
                mean: prev
                    .mean
                    .iter()
                    .zip(&mean)
                    .map(|(r, b)| (1.0 - momentum) * r + momentum * b)
                    .collect(),
                var: prev
                    .var
                    .iter()
                    .zip(&var)
                    .map(|(r, b)| (1.0 - momentum) * r + momentum * b)
                    .collect(),
            })
        }
        _ => None,
    };

    Ok(NormForward {
        y: Tensor::new(vec![rows, width], y)?,
        running: updated,
        cache: NormCache {
            kind,
            rows,
            width,
            xhat,
            inv_std,
            fixed_stats: use_running,
        },
    })
}

/// Gradients of a normalization layer given `dy = ∂L/∂y`.
pub fn norm_backward(cache: &NormCache, gain: &[f64], dy: &[f64]) -> NormGrads {
    let (rows, width) = (cache.rows, cache.width);
    let grouping = Grouping {
        kind: cache.kind,
        width,
    };
    let mut dgain = vec![0.0; width];
    let mut dshift = vec![0.0; width];
    let mut dxhat = vec![0.0; rows * width];
    for i in 0..rows {
        for j in 0..width {
            let k = i * width + j;
            dgain[j] += dy[k] * cache.xhat[k];
            dshift[j] += dy[k];
            dxhat[k] = dy[k] * gain[j];
        }
    }

    let mut dx = vec![0.0; rows * width];
    if cache.fixed_stats {
        for i in 0..rows {
            for j in 0..width {
                let k = i * width + j;
                dx[k] = dxhat[k] * cache.inv_std[grouping.group(i, j)];
            }
        }
    } else {
        let ng = grouping.count(rows);
        let m = grouping.members(rows);
        let mut sum = vec![0.0; ng];
        let mut sum_x = vec![0.0; ng];
        for i in 0..rows {
            for j in 0..width {
                let g = grouping.group(i, j);
                let k = i * width + j;
                sum[g] += dxhat[k];
                sum_x[g] += dxhat[k] * cache.xhat[k];
            }
        }
        for i in 0..rows {
            for j in 0..width {
                let g = grouping.group(i, j);
                let k = i * width + j;
                dx[k] = cache.inv_std[g] / m * (m * dxhat[k] - sum[g] - cache.xhat[k] * sum_x[g]);
            }
        }
    }
    NormGrads { dx, dgain, dshift }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    fn ones(n: usize) -> Vec<f64> {
        vec![1.0; n]
    }

    #[test]
    fn layer_norm_arithmetic_sequence() {
        let out = norm_forward(
            NormKind::Layer,
            &row(&[1.0, 2.0, 3.0]),
            &ones(3),
            &[0.0; 3],
            None,
            Mode::Train,
            0.0,
        )
        .unwrap();
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in out.y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(out.running.is_none());
    }

    #[test]
    fn group_norm_two_point_groups() {
        let out = norm_forward(
            NormKind::Group { groups: 2 },
            &row(&[1.0, 3.0, 5.0, 7.0]),
            &ones(4),
            &[0.0; 4],
            None,
            Mode::Train,
            0.0,
        )
        .unwrap();
        assert_eq!(out.y.data(), &[-1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn constant_batch_maps_to_shift() {
        let x = Tensor::new(vec![3, 2], vec![4.0, -1.0, 4.0, -1.0, 4.0, -1.0]).unwrap();
        let shift = [0.25, -0.5];
        let out = norm_forward(
            NormKind::Batch { momentum: 0.1 },
            &x,
            &[2.0, 3.0],
            &shift,
            None,
            Mode::Train,
            1e-5,
        )
        .unwrap();
        for r in 0..3 {
            for j in 0..2 {
                assert!((out.y.data()[r * 2 + j] - shift[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn running_mean_ema_step() {
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let out = norm_forward(
            NormKind::Batch { momentum: 0.1 },
            &x,
            &[1.0],
            &[0.0],
            Some(&RunningStats::fresh(1)),
            Mode::Train,
            1e-5,
        )
        .unwrap();
        let rs = out.running.unwrap();
        assert!((rs.mean[0] - 0.2).abs() < 1e-15);
        // biased batch variance is 1; 0.9 · 1 + 0.1 · 1
        assert!((rs.var[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn batch_norm_train_needs_two_rows() {
        let err = norm_forward(
            NormKind::Batch { momentum: 0.1 },
            &row(&[1.0, 2.0]),
            &ones(2),
            &[0.0; 2],
            None,
            Mode::Train,
            1e-5,
        );
        assert!(matches!(err, Err(Error::DegenerateBatch(1))));
    }

    #[test]
    fn eval_batch_norm_uses_running_stats() {
        let rs = RunningStats {
            mean: vec![1.0],
            var: vec![4.0],
        };
        let out = norm_forward(
            NormKind::Batch { momentum: 0.1 },
            &row(&[5.0]),
            &[1.0],
            &[0.0],
            Some(&rs),
            Mode::Eval,
            0.0,
        )
        .unwrap();
        assert_eq!(out.y.data(), &[2.0]);
        assert!(out.running.is_none());
    }

    #[test]
    fn groups_must_divide_width() {
        let err = norm_forward(
            NormKind::Group { groups: 3 },
            &row(&[1.0, 2.0, 3.0, 4.0]),
            &ones(4),
            &[0.0; 4],
            None,
            Mode::Train,
            1e-5,
        );
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
    }
}
