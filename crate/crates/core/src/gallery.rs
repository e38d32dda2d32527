//! Built-in density pairs on the unit square. Each pair is positive, has
//! equal continuous mass and `f = g` outside a centred sub-box at distance at
//! least 0.2 from the boundary.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::smootherstep;
use crate::field::{FieldError, ScalarField};
use crate::grid::{Grid, GridError, Point};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GalleryError {
    #[error("unknown gallery problem `{0}` (expected one of twin-bumps, ring-swap, anisotropic-blob, oned-profile)")]
    Unknown(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GalleryProblem {
    /// Equal bumps at (0.4, 0.5) and (0.6, 0.5).
    TwinBumps,
    /// A ring around the centre traded for a disc of equal mass.
    RingSwap,
    /// An ellipse elongated along x traded for the same ellipse along y.
    AnisotropicBlob,
    /// `g ≡ 1` against a zero-mean cosine profile in x, localized in y.
    OnedProfile,
}

type Density = Box<dyn Fn(&Point) -> f64>;

impl GalleryProblem {
    pub const ALL: [GalleryProblem; 4] = [Self::TwinBumps, Self::RingSwap, Self::AnisotropicBlob, Self::OnedProfile];

    pub fn name(&self) -> &'static str {
        match self {
            Self::TwinBumps => "twin-bumps",
            Self::RingSwap => "ring-swap",
            Self::AnisotropicBlob => "anisotropic-blob",
            Self::OnedProfile => "oned-profile",
        }
    }

    /// `(f, g)` sampled on the `n × n` unit-square grid.
    pub fn pair(&self, n: usize) -> Result<(ScalarField, ScalarField), GalleryError> {
        let grid = Grid::unit(2, n)?;
        let (f, g): (Density, Density) = match self {
            Self::TwinBumps => (
                Box::new(|p| 1.0 + TWIN_AMPLITUDE * bump(p, [0.4, 0.5], TWIN_RADIUS)),
                Box::new(|p| 1.0 + TWIN_AMPLITUDE * bump(p, [0.6, 0.5], TWIN_RADIUS)),
            ),
            Self::RingSwap => {
                let ring_mass = 2.0 * std::f64::consts::PI * RING_RADIUS * RING_WIDTH * QUARTIC_LINE_MASS;
                let disc_mass = std::f64::consts::PI * DISC_RADIUS * DISC_RADIUS / 5.0;
                let disc_amplitude = RING_AMPLITUDE * ring_mass / disc_mass;
                (
                    Box::new(|p| 1.0 + RING_AMPLITUDE * ring(p)),
                    Box::new(move |p| 1.0 + disc_amplitude * bump(p, [0.5, 0.5], DISC_RADIUS)),
                )
            }
            Self::AnisotropicBlob => (
                Box::new(|p| 1.0 + BLOB_AMPLITUDE * ellipse(p, BLOB_LONG, BLOB_SHORT)),
                Box::new(|p| 1.0 + BLOB_AMPLITUDE * ellipse(p, BLOB_SHORT, BLOB_LONG)),
            ),
            Self::OnedProfile => {
                let c = profile_offset();
                (Box::new(move |p| 1.0 + profile(p[0], c) * window(p[1])), Box::new(|_| 1.0))
            }
        };
        Ok((ScalarField::from_fn(grid, f)?, ScalarField::from_fn(grid, g)?))
    }
}

impl fmt::Display for GalleryProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GalleryProblem {
    type Err = GalleryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| GalleryError::Unknown(s.to_string()))
    }
}

pub fn gallery(name: &str, n: usize) -> Result<(ScalarField, ScalarField), GalleryError> {
    name.parse::<GalleryProblem>()?.pair(n)
}

/// The y-independent profile `1 + p(x)` behind `oned-profile`, with unit
/// continuous mass on the unit square.
pub fn oned_profile(n: usize) -> Result<ScalarField, GalleryError> {
    let grid = Grid::unit(2, n)?;
    let c = profile_offset();
    Ok(ScalarField::from_fn(grid, |p| 1.0 + profile(p[0], c))?)
}

const TWIN_AMPLITUDE: f64 = 0.4;
const TWIN_RADIUS: f64 = 0.1;
const RING_AMPLITUDE: f64 = 0.4;
const RING_RADIUS: f64 = 0.15;
const RING_WIDTH: f64 = 0.1;
const DISC_RADIUS: f64 = 0.22;
const BLOB_AMPLITUDE: f64 = 0.5;
const BLOB_LONG: f64 = 0.25;
const BLOB_SHORT: f64 = 0.1;
const PROFILE_AMPLITUDE: f64 = 0.3;
// ∫₋₁¹ (1 − s²)⁴ ds
const QUARTIC_LINE_MASS: f64 = 256.0 / 315.0;

/// `(1 − r²/R²)⁴` inside the disc of radius `R`, zero outside; mass `πR²/5`.
fn bump(p: &Point, c: [f64; 2], radius: f64) -> f64 {
    let r2 = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)) / (radius * radius);
    if r2 < 1.0 {
        (1.0 - r2).powi(4)
    } else {
        0.0
    }
}

fn ring(p: &Point) -> f64 {
    let r = ((p[0] - 0.5).powi(2) + (p[1] - 0.5).powi(2)).sqrt();
    let s = (r - RING_RADIUS) / RING_WIDTH;
    if s.abs() < 1.0 {
        (1.0 - s * s).powi(4)
    } else {
        0.0
    }
}

fn ellipse(p: &Point, ax: f64, ay: f64) -> f64 {
    let r2 = ((p[0] - 0.5) / ax).powi(2) + ((p[1] - 0.5) / ay).powi(2);
    if r2 < 1.0 {
        (1.0 - r2).powi(4)
    } else {
        0.0
    }
}

/// Plateau on [0.3, 0.7] falling to zero at 0.2 and 0.8.
fn window(x: f64) -> f64 {
    smootherstep(((x - 0.2) / 0.1).clamp(0.0, 1.0)) * smootherstep(((0.8 - x) / 0.1).clamp(0.0, 1.0))
}

fn profile(x: f64, offset: f64) -> f64 {
    PROFILE_AMPLITUDE * ((2.0 * std::f64::consts::PI * x).cos() - offset) * window(x)
}

/// Weighted mean of `cos 2πx` under the window, so that the profile has zero mass.
fn profile_offset() -> f64 {
    // composite Simpson on a fine mesh; the integrand is C² and compactly supported
    let panels = 20_000;
    let h = 1.0 / panels as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..=panels {
        let x = i as f64 * h;
        let w = if i == 0 || i == panels {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        num += w * (2.0 * std::f64::consts::PI * x).cos() * window(x);
        den += w * window(x);
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{support_distance, support_threshold, DEFAULT_SUPPORT_THRESHOLD};
    use crate::field::integrate;

    #[test]
    fn names_round_trip() {
        for p in GalleryProblem::ALL {
            assert_eq!(p.name().parse::<GalleryProblem>().unwrap(), p);
        }
        assert!(matches!("nope".parse::<GalleryProblem>(), Err(GalleryError::Unknown(_))));
    }

    #[test]
    fn pairs_are_positive_balanced_and_interior() {
        for p in GalleryProblem::ALL {
            let (f, g) = p.pair(65).unwrap();
            assert!(f.min() > 0.0 && g.min() > 0.0, "{p}");
            let (mf, mg) = (integrate(&f), integrate(&g));
            assert!((mf - mg).abs() / mf < 1e-4, "{p}: {mf} vs {mg}");
            let d = support_distance(&f, &g, support_threshold(&f, &g, DEFAULT_SUPPORT_THRESHOLD)).unwrap();
            assert!(d >= 0.2, "{p}: {d}");
        }
    }

    #[test]
    fn twin_bumps_are_mirror_images() {
        let (f, g) = GalleryProblem::TwinBumps.pair(65).unwrap();
        let grid = *f.grid();
        for i in 0..grid.len() {
            let k = grid.multi_index(i);
            let mut m = k;
            m[0] = 64 - k[0];
            let j = grid.linear_index(&m);
            assert!((f.values()[i] - g.values()[j]).abs() < 1e-14);
        }
        let diff = f.zip_with(&g, |a, b| a - b).unwrap();
        assert!(integrate(&diff).abs() < 1e-14);
    }

    #[test]
    fn oned_profile_has_unit_mass_and_no_y_dependence() {
        let f = oned_profile(65).unwrap();
        assert!((integrate(&f) - 1.0).abs() < 1e-6);
        let grid = *f.grid();
        for i in 0..grid.len() {
            let k = grid.multi_index(i);
            let base = grid.linear_index(&[k[0], 0, 0]);
            assert_eq!(f.values()[i], f.values()[base]);
        }
        let (_, g) = GalleryProblem::OnedProfile.pair(33).unwrap();
        assert!(g.values().iter().all(|&v| v == 1.0));
    }
}
