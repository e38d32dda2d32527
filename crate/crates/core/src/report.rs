//! Serializable record of one solve and its pass/fail gates.

use serde::{Deserialize, Serialize};

use crate::flow::PullbackResidual;
use crate::grid::BoxDomain;
use crate::pipeline::Method;

pub const REPORT_SCHEMA: &str = "jf-report-1";

/// Stage A: the Neumann-gradient flow Φ with `det∇Φ = f` on Ω′.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageAReport {
    /// Max node error of `det∇Φ − f` on the stencil-valid region of Ω′.
    pub jacobian_residual: f64,
    pub min_jacobian: f64,
    /// Largest displacement of a collar node under Φ.
    pub max_collar_displacement: f64,
    pub poisson_residual: f64,
}

/// Stage B: the concordance density h and the support-controlled map Θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageBReport {
    pub h_min: f64,
    pub h_max: f64,
    /// `|∫h − meas Ω′| / meas Ω′` before the mean correction.
    pub h_mass_error: f64,
    /// Max `|h − 1|` at nodes whose preimage under Φ lies in the collar.
    pub h_collar_deviation: f64,
    /// Max node gap between h and the finite-difference pullback `(g∘Φ⁻¹)·det∇Φ⁻¹`.
    pub h_fd_deviation: f64,
    /// Mass removed from `h − 1` by the compact bump correction.
    pub mass_correction: f64,
    /// Box outside which Θ is the identity; `None` when `h ≡ 1`.
    pub theta_support: Option<BoxDomain>,
    pub theta_source_box: Option<BoxDomain>,
    pub div_residual: f64,
    /// Max node error of `det∇Ψ − g` for `Ψ = Θ∘Φ`.
    pub jacobian_residual: f64,
}

/// Collar snapping on Ω′.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollarReport {
    pub width: f64,
    pub displacement_before_snap: f64,
    pub limit: f64,
    pub residual_before_snap: f64,
    pub residual_after_snap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectReport {
    pub div_residual: f64,
    pub source_box: BoxDomain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
}

impl Gate {
    pub fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Self { name: name.to_string(), value, limit, passed: value <= limit }
    }

    pub fn above(name: &str, value: f64, limit: f64) -> Self {
        Self { name: name.to_string(), value, limit, passed: value > limit }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub schema: String,
    pub method: Method,
    pub shape: Vec<usize>,
    pub steps: usize,
    /// Common scale factor applied to f and g.
    pub lambda: f64,
    /// Extra factor on g at its support nodes that absorbs the quadrature mass gap.
    pub g_correction: f64,
    /// `|∫f − ∫g| / ∫f` of the inputs.
    pub mass_balance: f64,
    /// Largest `|∫f − meas Ω|`, `|∫g − meas Ω|` after normalization, relative to meas Ω.
    pub normalized_mass_error: f64,
    pub support_distance: f64,
    pub support_empty: bool,
    pub margin: f64,
    pub omega_prime: BoxDomain,
    /// `|∫_Ω′ f − ∫_Ω′ g|` after normalization on Ω.
    pub restricted_mass_gap: f64,
    pub residual: PullbackResidual,
    pub min_jacobian: f64,
    pub max_displacement_outside_omega_prime: f64,
    /// Half-width of the band V_d when a margin parameter d was requested.
    pub band_width: Option<f64>,
    pub max_displacement_in_band: Option<f64>,
    pub max_displacement: f64,
    /// `|∫(g∘φ)·det∇φ − ∫f| / ∫f`.
    pub pullback_mass_error: f64,
    /// Max displacement of `φ⁻¹∘φ` and `φ∘φ⁻¹`.
    pub inversion_round_trip: f64,
    pub stage_a: Option<StageAReport>,
    pub stage_b: Option<StageBReport>,
    pub collar: Option<CollarReport>,
    pub direct: Option<DirectReport>,
    pub timings: Vec<Timing>,
    pub gates: Vec<Gate>,
}

impl SolveReport {
    pub fn passed(&self) -> bool {
        self.gates.iter().all(|g| g.passed)
    }

    pub fn failed_gates(&self) -> impl Iterator<Item = &Gate> {
        self.gates.iter().filter(|g| !g.passed)
    }

    pub fn gate(&self, name: &str) -> Option<&Gate> {
        self.gates.iter().find(|g| g.name == name)
    }

    /// True when every numeric entry is finite.
    pub fn is_finite(&self) -> bool {
        let mut values = vec![
            self.lambda,
            self.g_correction,
            self.mass_balance,
            self.normalized_mass_error,
            self.support_distance,
            self.margin,
            self.restricted_mass_gap,
            self.residual.max,
            self.residual.l2,
            self.residual.min_jacobian,
            self.min_jacobian,
            self.max_displacement_outside_omega_prime,
            self.max_displacement,
            self.pullback_mass_error,
            self.inversion_round_trip,
        ];
        values.extend(self.band_width);
        values.extend(self.max_displacement_in_band);
        if let Some(a) = &self.stage_a {
            values.extend([a.jacobian_residual, a.min_jacobian, a.max_collar_displacement, a.poisson_residual]);
        }
        if let Some(b) = &self.stage_b {
            values.extend([
                b.h_min,
                b.h_max,
                b.h_mass_error,
                b.h_collar_deviation,
                b.h_fd_deviation,
                b.mass_correction,
                b.div_residual,
                b.jacobian_residual,
            ]);
        }
        if let Some(c) = &self.collar {
            values.extend([
                c.width,
                c.displacement_before_snap,
                c.limit,
                c.residual_before_snap,
                c.residual_after_snap,
            ]);
        }
        if let Some(d) = &self.direct {
            values.push(d.div_residual);
        }
        values.extend(self.timings.iter().map(|t| t.seconds));
        values.extend(self.gates.iter().flat_map(|g| [g.value, g.limit]));
        values.iter().all(|v| v.is_finite())
    }
}
