//! k-space undersampling masks.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Achieved acceleration must land within this relative distance of the target.
pub const ACCEL_TOLERANCE: f64 = 0.10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPattern {
    /// 2D variable-density Poisson-disc sampling of the full k-space plane.
    PoissonDisc,
    /// Whole phase-encode rows drawn at random with variable density.
    CartesianRandom,
    /// Every R-th phase-encode row.
    Equispaced,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UndersamplingMask {
    pub grid: Array2<bool>,
    pub pattern: MaskPattern,
    pub target_accel: f64,
    pub calib_fraction: f64,
    pub seed: u64,
}

impl UndersamplingMask {
    pub fn fully_sampled(size: usize, pattern: MaskPattern, seed: u64) -> Self {
        UndersamplingMask {
            grid: Array2::from_elem((size, size), true),
            pattern,
            target_accel: 1.0,
            calib_fraction: 0.0,
            seed,
        }
    }

    pub fn sampled(&self) -> usize {
        self.grid.iter().filter(|&&m| m).count()
    }

    pub fn achieved_accel(&self) -> f64 {
        self.grid.len() as f64 / self.sampled().max(1) as f64
    }

    pub fn dim(&self) -> (usize, usize) {
        self.grid.dim()
    }
}

/// Centered calibration extent: `(start, len)` along one axis.
pub fn calib_extent(size: usize, calib_fraction: f64) -> (usize, usize) {
    let len = (calib_fraction * size as f64).round() as usize;
    (size / 2 - len / 2, len)
}

fn within_tolerance(achieved: f64, target: f64) -> bool {
    (achieved - target).abs() <= ACCEL_TOLERANCE * target
}

/// Relative sampling density at distance `d` from the k-space center.
fn density(d: f64, d0: f64) -> f64 {
    (1.0 + d / d0).powi(-2)
}

pub fn make_mask(
    pattern: MaskPattern,
    target_accel: f64,
    size: usize,
    calib_fraction: f64,
    seed: u64,
) -> Result<UndersamplingMask> {
    if !(target_accel >= 1.0) || !target_accel.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "target acceleration must be >= 1, got {target_accel}"
        )));
    }
    if !(0.0..=0.5).contains(&calib_fraction) {
        return Err(Error::InvalidConfig(format!(
            "calibration fraction must be in [0, 0.5], got {calib_fraction}"
        )));
    }
    if size < 2 || !size.is_power_of_two() {
        return Err(Error::InvalidConfig(format!(
            "mask size must be a power of two, got {size}"
        )));
    }
    if target_accel == 1.0 {
        return Ok(UndersamplingMask {
            calib_fraction,
            ..UndersamplingMask::fully_sampled(size, pattern, seed)
        });
    }

    let (c0, clen) = calib_extent(size, calib_fraction);
    let calib_points = match pattern {
        MaskPattern::PoissonDisc => clen * clen,
        _ => clen * size,
    };
    let total = (size * size) as f64;
    if calib_points > 0 && total / (calib_points as f64) < target_accel * (1.0 - ACCEL_TOLERANCE) {
        return Err(Error::InfeasibleMask(format!(
            "calibration region of {calib_points} samples alone exceeds the budget for {target_accel}x"
        )));
    }

    let grid = match pattern {
        MaskPattern::PoissonDisc => poisson_disc(size, target_accel, (c0, clen), seed)?,
        MaskPattern::CartesianRandom => cartesian_random(size, target_accel, (c0, clen), seed),
        MaskPattern::Equispaced => equispaced(size, target_accel, (c0, clen)),
    };
    let mask = UndersamplingMask {
        grid,
        pattern,
        target_accel,
        calib_fraction,
        seed,
    };
    if !within_tolerance(mask.achieved_accel(), target_accel) {
        return Err(Error::InfeasibleMask(format!(
            "{pattern:?} reached {:.3}x for target {target_accel}x",
            mask.achieved_accel()
        )));
    }
    Ok(mask)
}

fn rows_grid(size: usize, rows: impl IntoIterator<Item = usize>) -> Array2<bool> {
    let mut grid = Array2::from_elem((size, size), false);
    for r in rows {
        grid.row_mut(r).fill(true);
    }
    grid
}

fn cartesian_random(size: usize, accel: f64, calib: (usize, usize), seed: u64) -> Array2<bool> {
    let n_lines = ((size as f64 / accel).round() as usize).max(calib.1).max(1);
    let mut chosen: Vec<usize> = (calib.0..calib.0 + calib.1).collect();
    let mut pool: Vec<(usize, f64)> = (0..size)
        .filter(|r| !(calib.0..calib.0 + calib.1).contains(r))
        .map(|r| {
            let d = (r as f64 - (size / 2) as f64).abs();
            (r, density(d, size as f64 / 16.0))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while chosen.len() < n_lines && !pool.is_empty() {
        let total: f64 = pool.iter().map(|p| p.1).sum();
        let mut u = rng.random_range(0.0..total);
        let mut pick = pool.len() - 1;
        for (i, p) in pool.iter().enumerate() {
            if u < p.1 {
                pick = i;
                break;
            }
            u -= p.1;
        }
        chosen.push(pool.swap_remove(pick).0);
    }
    rows_grid(size, chosen)
}

/// Rows `round(size/2 + k * spacing)` plus the calibration band. The spacing may be
/// fractional so the band's extra rows can be compensated; integer spacings win ties.
fn equispaced(size: usize, accel: f64, calib: (usize, usize)) -> Array2<bool> {
    let lines_for = |spacing: f64| {
        let center = (size / 2) as f64;
        let mut rows: Vec<usize> = (calib.0..calib.0 + calib.1).collect();
        let reach = (size as f64 / spacing).ceil() as i64 + 1;
        for k in -reach..=reach {
            let r = (center + k as f64 * spacing).round();
            if r >= 0.0 && r < size as f64 {
                rows.push(r as usize);
            }
        }
        rows.sort_unstable();
        rows.dedup();
        rows
    };
    let err = |s: f64| (size as f64 / lines_for(s).len() as f64 - accel).abs();
    let integers = (1..=size).map(|s| s as f64);
    let fractions = (100..=100 * size)
        .filter(|i| i % 100 != 0)
        .map(|i| i as f64 / 100.0);
    let best = integers
        .chain(fractions)
        .fold((f64::INFINITY, 1.0), |best, s| {
            let e = err(s);
            if e < best.0 - 1e-12 {
                (e, s)
            } else {
                best
            }
        })
        .1;
    rows_grid(size, lines_for(best))
}

/// Variable-density dart throwing. Each candidate `p` is kept when no kept sample lies
/// closer than `scale * (1 + d(p)/d0)`; `scale` is bisected until the sample count
/// meets the acceleration target.
fn poisson_disc(size: usize, accel: f64, calib: (usize, usize), seed: u64) -> Result<Array2<bool>> {
    let target = (size * size) as f64 / accel;
    let center = (size / 2) as f64;
    let d0 = size as f64 / 8.0;
    let in_calib = |y: usize, x: usize| {
        (calib.0..calib.0 + calib.1).contains(&y) && (calib.0..calib.0 + calib.1).contains(&x)
    };
    let mut order: Vec<(usize, usize)> = (0..size)
        .flat_map(|y| (0..size).map(move |x| (y, x)))
        .filter(|&(y, x)| !in_calib(y, x))
        .collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let throw = |scale: f64| -> Array2<bool> {
        let mut grid = Array2::from_elem((size, size), false);
        for y in calib.0..calib.0 + calib.1 {
            for x in calib.0..calib.0 + calib.1 {
                grid[(y, x)] = true;
            }
        }
        for &(y, x) in &order {
            let d = ((y as f64 - center).powi(2) + (x as f64 - center).powi(2)).sqrt();
            let r = scale * (1.0 + d / d0);
            let ri = r.ceil() as isize;
            let mut free = true;
            'scan: for dy in -ri..=ri {
                let yy = y as isize + dy;
                if yy < 0 || yy >= size as isize {
                    continue;
                }
                for dx in -ri..=ri {
                    let xx = x as isize + dx;
                    if xx < 0 || xx >= size as isize || (dy == 0 && dx == 0) {
                        continue;
                    }
                    if grid[(yy as usize, xx as usize)] && ((dy * dy + dx * dx) as f64) < r * r {
                        free = false;
                        break 'scan;
                    }
                }
            }
            if free {
                grid[(y, x)] = true;
            }
        }
        grid
    };
    let count = |g: &Array2<bool>| g.iter().filter(|&&m| m).count() as f64;

    let (mut lo, mut hi) = (0.0, size as f64);
    let mut best: Option<(f64, Array2<bool>)> = None;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let grid = throw(mid);
        let n = count(&grid);
        let err = ((size * size) as f64 / n.max(1.0) - accel).abs();
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, grid));
        }
        if n > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-6 {
            break;
        }
    }
    best.map(|(_, g)| g)
        .ok_or_else(|| Error::InfeasibleMask("poisson-disc bisection produced no mask".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accel_one_is_fully_sampled() {
        for p in [
            MaskPattern::PoissonDisc,
            MaskPattern::CartesianRandom,
            MaskPattern::Equispaced,
        ] {
            let m = make_mask(p, 1.0, 32, 0.08, 0).unwrap();
            assert!(m.grid.iter().all(|&v| v));
        }
    }

    #[test]
    fn poisson_4x_in_tolerance() {
        let m = make_mask(MaskPattern::PoissonDisc, 4.0, 64, 0.08, 3).unwrap();
        let a = m.achieved_accel();
        assert!((3.6..=4.4).contains(&a), "{a}");
    }

    #[test]
    fn equispaced_every_fourth_line() {
        let m = make_mask(MaskPattern::Equispaced, 4.0, 64, 0.0, 0).unwrap();
        assert_eq!(m.achieved_accel(), 4.0);
        let rows: Vec<usize> = (0..64).filter(|&r| m.grid[(r, 0)]).collect();
        assert!(rows.windows(2).all(|w| w[1] - w[0] == 4));
        assert!(m
            .grid
            .rows()
            .into_iter()
            .all(|r| r.iter().all(|&v| v == r[0])));
    }

    #[test]
    fn calibration_region_fully_sampled() {
        for p in [
            MaskPattern::PoissonDisc,
            MaskPattern::CartesianRandom,
            MaskPattern::Equispaced,
        ] {
            let m = make_mask(p, 4.0, 64, 0.08, 11).unwrap();
            let (c0, len) = calib_extent(64, 0.08);
            for y in c0..c0 + len {
                for x in c0..c0 + len {
                    assert!(m.grid[(y, x)], "{p:?} misses calib ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn infeasible_calibration_rejected() {
        let r = make_mask(MaskPattern::Equispaced, 16.0, 64, 0.5, 0);
        assert!(matches!(r, Err(Error::InfeasibleMask(_))));
        assert!(matches!(
            make_mask(MaskPattern::PoissonDisc, 0.5, 64, 0.0, 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn deterministic_in_seed() {
        let a = make_mask(MaskPattern::PoissonDisc, 8.0, 64, 0.08, 5).unwrap();
        let b = make_mask(MaskPattern::PoissonDisc, 8.0, 64, 0.08, 5).unwrap();
        let c = make_mask(MaskPattern::PoissonDisc, 8.0, 64, 0.08, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.grid, c.grid);
    }

    #[test]
    fn poisson_density_decreases_outward() {
        let m = make_mask(MaskPattern::PoissonDisc, 4.0, 64, 0.0, 2).unwrap();
        let frac = |r0: f64, r1: f64| {
            let (mut hit, mut all) = (0.0, 0.0);
            for ((y, x), &v) in m.grid.indexed_iter() {
                let d = ((y as f64 - 32.0).powi(2) + (x as f64 - 32.0).powi(2)).sqrt();
                if d >= r0 && d < r1 {
                    all += 1.0;
                    if v {
                        hit += 1.0;
                    }
                }
            }
            hit / all
        };
        assert!(frac(0.0, 8.0) > frac(24.0, 32.0));
    }
}
