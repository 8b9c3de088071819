//! Synthetic base signals standing in for a real sensor corpus.

use std::f64::consts::TAU;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, Rng};
use crate::series::{minmax_values, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseFamily {
    RandomWalk,
    Sinusoids,
    PiecewiseLinear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinusoidComponent {
    pub amplitude: f64,
    /// Whole periods over the series span.
    pub periods: u32,
    pub phase: f64,
}

/// Sum of sinusoids sampled at `t = i / (length - 1)`, min-max scaled.
pub fn sinusoid_values(components: &[SinusoidComponent], length: usize) -> Vec<f64> {
    let last = (length - 1) as f64;
    let raw: Vec<f64> = (0..length)
        .map(|i| {
            let t = i as f64 / last;
            components
                .iter()
                .map(|c| c.amplitude * (TAU * f64::from(c.periods) * t + c.phase).sin())
                .sum()
        })
        .collect();
    minmax_values(&raw)
}

pub fn draw_sinusoids(count: usize, rng: &mut Rng) -> Vec<SinusoidComponent> {
    (0..count)
        .map(|_| SinusoidComponent {
            amplitude: rng.random_range(0.2..1.0),
            periods: rng.random_range(1..=8),
            phase: rng.random_range(0.0..TAU),
        })
        .collect()
}

fn random_walk(length: usize, rng: &mut Rng) -> Vec<f64> {
    let mut acc = 0.0;
    let raw: Vec<f64> = (0..length)
        .map(|_| {
            let step: f64 = StandardNormal.sample(rng);
            acc += step;
            acc
        })
        .collect();
    minmax_values(&raw)
}

/// Linear interpolation through 3..=6 knots, including both endpoints. At
/// least one interior knot, so the result is never a straight line.
fn piecewise_linear(length: usize, rng: &mut Rng) -> Vec<f64> {
    let knots = rng.random_range(3..=6usize);
    let mut pos: Vec<f64> = (0..knots - 2).map(|_| rng.random_range(0.0..1.0)).collect();
    pos.push(0.0);
    pos.push(1.0);
    pos.sort_by(f64::total_cmp);
    let vals: Vec<f64> = (0..knots).map(|_| rng.random_range(0.0..1.0)).collect();
    let last = (length - 1) as f64;
    let raw: Vec<f64> = (0..length)
        .map(|i| {
            let t = i as f64 / last;
            let k = pos.windows(2).position(|w| t <= w[1]).unwrap_or(knots - 2);
            let span = pos[k + 1] - pos[k];
            let frac = if span > 0.0 { (t - pos[k]) / span } else { 0.0 };
            vals[k] + (vals[k + 1] - vals[k]) * frac
        })
        .collect();
    minmax_values(&raw)
}

pub fn generate_base_signal(family: BaseFamily, length: usize, rng: &mut Rng) -> Vec<f64> {
    match family {
        BaseFamily::RandomWalk => random_walk(length, rng),
        BaseFamily::Sinusoids => {
            let count = rng.random_range(1..=4);
            let comps = draw_sinusoids(count, rng);
            sinusoid_values(&comps, length)
        }
        BaseFamily::PiecewiseLinear => piecewise_linear(length, rng),
    }
}

/// `n` min-max scaled base series with the family drawn uniformly per series.
pub fn generate_base_signals(n: usize, length: usize, seed: u64) -> Result<Vec<Series>> {
    if n == 0 || length < 2 {
        return Err(Error::InvalidInput(format!(
            "need n >= 1 and length >= 2, got n={n} length={length}"
        )));
    }
    Ok(par::map_range(n, |i| {
        let mut r = rng::substream(seed, "base", i as u64);
        let family = [
            BaseFamily::RandomWalk,
            BaseFamily::Sinusoids,
            BaseFamily::PiecewiseLinear,
        ][r.random_range(0..3)];
        Series::new(
            format!("syn-{i:06}"),
            generate_base_signal(family, length, &mut r),
        )
        .expect("generated series are finite")
    }))
}
