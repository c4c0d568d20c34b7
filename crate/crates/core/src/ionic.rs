//! Rogers-McCulloch two-variable ionic kinetics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IonicParams {
    pub g: f64,
    pub v_th: f64,
    pub v_p: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub c_m: f64,
    pub chi: f64,
}

impl Default for IonicParams {
    fn default() -> Self {
        Self {
            g: 1.2,
            v_th: 13.0,
            v_p: 100.0,
            eta1: 4.4,
            eta2: 0.012,
            c_m: 1.0,
            chi: 1.0,
        }
    }
}

/// The four partial derivatives of (I_ion, R).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Partials {
    pub di_dv: f64,
    pub di_dw: f64,
    pub dr_dv: f64,
    pub dr_dw: f64,
}

impl IonicParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.g, self.v_th, self.v_p, self.eta1, self.eta2, self.c_m, self.chi];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("ionic parameters must be positive".into()));
        }
        if self.v_th >= self.v_p {
            return Err(Error::Config("v_th must be smaller than v_p".into()));
        }
        Ok(())
    }

    /// chi * C_m
    pub fn capacitance(&self) -> f64 {
        self.chi * self.c_m
    }

    pub fn i_ion(&self, v: f64, w: f64) -> f64 {
        self.g * v * (1.0 - v / self.v_th) * (1.0 - v / self.v_p) + self.eta1 * v * w
    }

    pub fn r_gate(&self, v: f64, w: f64) -> f64 {
        self.eta2 * (v / self.v_p - w)
    }

    pub fn partials(&self, v: f64, w: f64) -> Partials {
        let (a, b) = (1.0 / self.v_th, 1.0 / self.v_p);
        Partials {
            di_dv: self.g * (1.0 - 2.0 * v * (a + b) + 3.0 * v * v * a * b) + self.eta1 * w,
            di_dw: self.eta1 * v,
            dr_dv: self.eta2 / self.v_p,
            dr_dw: -self.eta2,
        }
    }

    /// Global minimum over v of dI_ion/dv at w = 0.
    pub fn min_di_dv(&self) -> f64 {
        let v = (self.v_th + self.v_p) / 3.0;
        self.partials(v, 0.0).di_dv
    }

    /// Largest time step for which chi C_m + tau dI_ion/dv stays positive at
    /// every v when w >= 0.
    pub fn coercive_time_step(&self) -> f64 {
        let m = self.min_di_dv();
        if m >= 0.0 {
            f64::INFINITY
        } else {
            -self.capacitance() / m
        }
    }
}

/// Nodewise minima of the three coercivity expressions.
#[derive(Debug, Clone, PartialEq)]
pub struct CoercivityReport {
    /// min of chi C_m + tau dI_ion/dv
    pub c1: f64,
    /// min of 1 - tau dR/dw
    pub c2: f64,
    /// min of dI_ion/dw - dR/dv
    pub cross: f64,
    pub hyp1: bool,
    pub hyp2: bool,
    pub hyp3: bool,
    /// Nodes where at least one expression is not positive.
    pub violations: Vec<usize>,
}

impl CoercivityReport {
    pub fn all_hold(&self) -> bool {
        self.hyp1 && self.hyp2 && self.hyp3
    }
}

pub fn coercivity_check(v: &[f64], w: &[f64], tau: f64, p: &IonicParams) -> CoercivityReport {
    assert_eq!(v.len(), w.len());
    let mut c1 = f64::INFINITY;
    let mut c2 = f64::INFINITY;
    let mut cross = f64::INFINITY;
    let mut violations = Vec::new();
    for (n, (&vn, &wn)) in v.iter().zip(w).enumerate() {
        let d = p.partials(vn, wn);
        let e1 = p.capacitance() + tau * d.di_dv;
        let e2 = 1.0 - tau * d.dr_dw;
        let e3 = d.di_dw - d.dr_dv;
        if e1 <= 0.0 || e2 <= 0.0 || e3 <= 0.0 {
            violations.push(n);
        }
        c1 = c1.min(e1);
        c2 = c2.min(e2);
        cross = cross.min(e3);
    }
    CoercivityReport {
        c1,
        c2,
        cross,
        hyp1: c1 > 0.0,
        hyp2: c2 > 0.0,
        hyp3: cross > 0.0,
        violations,
    }
}
