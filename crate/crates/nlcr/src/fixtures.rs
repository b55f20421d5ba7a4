//! Canonical constraint systems used across tests, simulations and the CLI
//! sample data.
//!
//! The quartic system is written with the curve term on the left
//! (`y2^4 = y1`, residual `y2^4 - y1`) so the residual is convex in `y`;
//! the hypograph side (positive residual, `y1` below the curve) is then the
//! side with the global-improvement guarantee.

use nalgebra::DVector;

use crate::constraints::ConstraintSystem;

/// Two series, one convex quartic constraint.
pub const QUARTIC_CONSTRAINTS: &str = "y2^4 = y1\n";

/// Three series tied by a ratio; neither convex nor concave.
pub const RATIO_CONSTRAINTS: &str = "y1 = 100 * y2 / y3\n";

/// Mortality toy hierarchy: a country split into two divisions, with
/// death counts and populations aggregating and rates defined as ratios.
pub const MORTALITY_CONSTRAINTS: &str = "\
# rates
R_USA = D_USA / P_USA
R_NE = D_NE / P_NE
R_MA = D_MA / P_MA
# aggregation
D_USA = D_NE + D_MA
P_USA = P_NE + P_MA
";

/// Labour-force toy hierarchy: national and two-state employment,
/// unemployment, totals and unemployment rates. The national-total sum
/// T_AUS = T_NSW + T_VIC is implied by the others and deliberately omitted
/// to keep the Jacobian full rank.
pub const UNEMPLOYMENT_CONSTRAINTS: &str = "\
T_AUS = E_AUS + U_AUS
T_NSW = E_NSW + U_NSW
T_VIC = E_VIC + U_VIC
R_AUS = 100 * U_AUS / T_AUS
R_NSW = 100 * U_NSW / T_NSW
R_VIC = 100 * U_VIC / T_VIC
E_AUS = E_NSW + E_VIC
U_AUS = U_NSW + U_VIC
";

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Series vocabulary of the quartic system: `(y1, y2)`.
pub fn quartic_series() -> Vec<String> {
    names(&["y1", "y2"])
}

/// Series vocabulary of the ratio system: `(y1, y2, y3)`.
pub fn ratio_series() -> Vec<String> {
    names(&["y1", "y2", "y3"])
}

/// Series vocabulary of the mortality system, country first.
pub fn mortality_series() -> Vec<String> {
    names(&[
        "R_USA", "D_USA", "P_USA", "R_NE", "D_NE", "P_NE", "R_MA", "D_MA", "P_MA",
    ])
}

/// Series vocabulary of the unemployment system, national first.
pub fn unemployment_series() -> Vec<String> {
    names(&[
        "E_AUS", "U_AUS", "T_AUS", "R_AUS", "E_NSW", "U_NSW", "T_NSW", "R_NSW", "E_VIC", "U_VIC",
        "T_VIC", "R_VIC",
    ])
}

pub fn quartic_system() -> ConstraintSystem {
    ConstraintSystem::parse(quartic_series(), QUARTIC_CONSTRAINTS).unwrap()
}

pub fn ratio_system() -> ConstraintSystem {
    ConstraintSystem::parse(ratio_series(), RATIO_CONSTRAINTS).unwrap()
}

pub fn mortality_system() -> ConstraintSystem {
    ConstraintSystem::parse(mortality_series(), MORTALITY_CONSTRAINTS).unwrap()
}

pub fn unemployment_system() -> ConstraintSystem {
    ConstraintSystem::parse(unemployment_series(), UNEMPLOYMENT_CONSTRAINTS).unwrap()
}

/// A coherent mortality vector built from division-level counts.
pub fn mortality_coherent_point() -> DVector<f64> {
    let (d_ne, p_ne) = (900.0, 120_000.0);
    let (d_ma, p_ma) = (1_500.0, 200_000.0);
    let (d_usa, p_usa) = (d_ne + d_ma, p_ne + p_ma);
    DVector::from_vec(vec![
        d_usa / p_usa,
        d_usa,
        p_usa,
        d_ne / p_ne,
        d_ne,
        p_ne,
        d_ma / p_ma,
        d_ma,
        p_ma,
    ])
}

/// A coherent unemployment vector built from state-level employment counts.
pub fn unemployment_coherent_point() -> DVector<f64> {
    let (e_nsw, u_nsw) = (4_200.0, 280.0);
    let (e_vic, u_vic) = (3_400.0, 230.0);
    let (e_aus, u_aus) = (e_nsw + e_vic, u_nsw + u_vic);
    let (t_aus, t_nsw, t_vic) = (e_aus + u_aus, e_nsw + u_nsw, e_vic + u_vic);
    DVector::from_vec(vec![
        e_aus,
        u_aus,
        t_aus,
        100.0 * u_aus / t_aus,
        e_nsw,
        u_nsw,
        t_nsw,
        100.0 * u_nsw / t_nsw,
        e_vic,
        u_vic,
        t_vic,
        100.0 * u_vic / t_vic,
    ])
}
