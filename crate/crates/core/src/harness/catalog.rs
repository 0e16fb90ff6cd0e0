//! Predicted width exponents of every probed term under SGD.
//!
//! Exponents are in powers of `N`, with `M` and `N_e` replaced by their
//! regime proportionality to `N` (`1/(MN)` reads `-2` in Regime III).
//! `Z` marks an exact zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::harness::run::TimeClass;
use crate::params::{Parameterization, Regime};
use crate::probes::TermId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Exponent(f64),
    Zero,
    Unspecified,
}

impl Prediction {
    /// Numeric form for output files: the exponent, or NaN.
    pub fn value(self) -> f64 {
        match self {
            Prediction::Exponent(e) => e,
            _ => f64::NAN,
        }
    }

    pub fn label(self) -> String {
        match self {
            Prediction::Exponent(e) => format!("{e}"),
            Prediction::Zero => "zero".into(),
            Prediction::Unspecified => "unspecified".into(),
        }
    }
}

type Key = (Regime, Parameterization, TermId, TimeClass);

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionCatalog {
    entries: BTreeMap<Key, Prediction>,
}

const Z: f64 = f64::INFINITY;

fn p(v: f64) -> Prediction {
    if v == Z {
        Prediction::Zero
    } else {
        Prediction::Exponent(v)
    }
}

use TermId::*;

type Row = (TermId, [f64; 3]);

const MUP_II: &[Row] = &[
    (H1, [0.0, 0.0, 0.0]),
    (H1Init, [0.0, 0.0, 0.0]),
    (H1Eff, [Z, -0.5, 0.0]),
    (Psi, [0.0, 0.0, 0.0]),
    (Phi, [0.0, 0.0, 0.0]),
    (H2, [0.0, 0.0, 0.0]),
    (H2Init, [0.0, 0.0, 0.0]),
    (H2Prop, [Z, -0.5, 0.0]),
    (H2Eff, [Z, -0.5, 0.0]),
    (H2Cross, [Z, -1.5, 0.0]),
    (H3i, [0.0, 0.0, 0.0]),
    (H3iInit, [0.0, 0.0, 0.0]),
    (H3iProp, [Z, -0.5, 0.0]),
    (H3iEff, [Z, 0.0, 0.0]),
    (H3iCross, [Z, -0.5, 0.0]),
    (H3, [-0.5, 0.0, 0.0]),
    (A1, [-0.5, -0.5, -0.5]),
    (A21, [Z, -1.0, -0.5]),
    (A22, [Z, -1.0, -0.5]),
    (A3, [Z, 0.0, 0.0]),
    (D, [Z, -1.0, 0.0]),
    (F, [-1.0, 0.0, 0.0]),
    (Dh3, [-1.0, -1.0, -1.0]),
    (Dh3Init, [-1.0, -1.0, -1.0]),
    (Dh3Upd, [Z, -1.5, -1.0]),
    (Dh3i, [-2.0, -2.0, -2.0]),
    (Dh3iInit, [-2.0, -2.0, -2.0]),
    (Dh3iUpd, [Z, -2.5, -2.0]),
    (Dh2, [-1.5, -1.0, -1.0]),
    (Dh2II, [-1.5, -1.5, -1.5]),
    (Dh2IU, [Z, -2.0, -1.5]),
    (Dh2UI, [Z, -1.0, -1.0]),
    (Dh2UU, [Z, -2.0, -1.0]),
    (Dphi, [-1.5, -1.0, -1.0]),
    (DphiII, [-1.5, -1.5, -1.5]),
    (DphiIU, [Z, -2.0, -1.5]),
    (DphiUI, [Z, -1.0, -1.0]),
    (DphiUU, [Z, -2.0, -1.0]),
    (Dh1Exp, [-1.5, -1.0, -1.0]),
    (A4_1, [-1.5, -1.5, -1.5]),
    (A4_2, [Z, -2.0, -1.5]),
    (A5_1, [Z, -1.0, -1.0]),
    (A5_2, [Z, -2.0, -1.0]),
    (A6_1, [Z, -2.0, -2.0]),
    (A6_2, [Z, -3.0, -2.0]),
    (E1, [Z, -2.0, -1.0]),
    (E2, [Z, -2.5, -1.0]),
    (Dh1Router, [-1.5, -1.0, -1.0]),
    (RouterQ0II, [-1.5, -1.5, -1.5]),
    (RouterQ0IU, [Z, -2.0, -1.5]),
    (RouterQ0UI, [Z, -1.0, -1.0]),
    (RouterQ0UU, [Z, -2.0, -1.0]),
    (RouterDqII, [Z, -2.0, -2.0]),
    (RouterDqIU, [Z, -3.0, -2.0]),
    (RouterDqUI, [Z, -2.0, -1.0]),
    (RouterDqUU, [Z, -3.0, -1.0]),
    (Dh1, [-1.5, -1.0, -1.0]),
];

// Every piece carrying the zero-initialized readout vanishes identically.
const MSSP_II: &[Row] = &[
    (H1, [0.0, 0.0, 0.0]),
    (H1Eff, [Z, Z, 0.0]),
    (Psi, [0.0, 0.0, 0.0]),
    (PsiEff, [Z, Z, 0.0]),
    (PsiProp, [Z, Z, 0.0]),
    (Phi, [0.0, 0.0, 0.0]),
    (H2, [0.0, 0.0, 0.0]),
    (H2Eff, [Z, Z, 0.0]),
    (H2Prop, [Z, Z, 0.0]),
    (H3i, [0.5, 0.5, 0.5]),
    (H3iEff, [Z, Z, 0.0]),
    (H3iProp, [Z, Z, 0.5]),
    (H3, [0.0, 0.0, 0.0]),
    (A1, [0.0, 0.0, 0.0]),
    (A21, [Z, Z, 0.0]),
    (A22, [Z, Z, 0.0]),
    (A3, [Z, Z, 0.0]),
    (D, [Z, Z, 0.0]),
    (F, [Z, 0.0, 0.0]),
    (Dh3Init, [Z, Z, Z]),
    (Dh3Upd, [Z, -1.0, -1.0]),
    (Dh3, [Z, -1.0, -1.0]),
    (Dh3i, [Z, -2.0, -2.0]),
    (Dh2II, [Z, Z, Z]),
    (Dh2IU, [Z, -1.0, -1.0]),
    (Dh2UI, [Z, Z, Z]),
    (Dh2UU, [Z, Z, -1.0]),
    (Dh2, [Z, -1.0, -1.0]),
    (DphiII, [Z, Z, Z]),
    (DphiIU, [Z, -1.0, -1.0]),
    (DphiUI, [Z, Z, Z]),
    (DphiUU, [Z, Z, -1.0]),
    (Dphi, [Z, -1.0, -1.0]),
    (A4_1, [Z, Z, Z]),
    (A4_2, [Z, -1.0, -1.0]),
    (A5_1, [Z, Z, Z]),
    (A5_2, [Z, Z, -1.0]),
    (A6_1, [Z, Z, Z]),
    (A6_2, [Z, Z, -1.0]),
    (E1, [Z, Z, Z]),
    (E2, [Z, Z, -1.0]),
    (Dh1Exp, [Z, -1.0, -1.0]),
    (Dh1Router, [Z, -1.0, -1.0]),
    (RouterQ0II, [Z, Z, Z]),
    (RouterQ0IU, [Z, -1.0, -1.0]),
    (RouterQ0UI, [Z, Z, Z]),
    (RouterQ0UU, [Z, Z, -1.0]),
    (RouterDqII, [Z, Z, Z]),
    (RouterDqIU, [Z, Z, -1.0]),
    (RouterDqUI, [Z, Z, Z]),
    (RouterDqUU, [Z, Z, -1.0]),
    (Dh1, [Z, -1.0, -1.0]),
];

const MUP_III: &[Row] = &[
    (H1, [0.0, 0.0, 0.0]),
    (H1Init, [0.0, 0.0, 0.0]),
    (H1Eff, [Z, -0.5, 0.0]),
    (Psi, [0.0, 0.0, 0.0]),
    (Phi, [0.0, 0.0, 0.0]),
    (H2, [0.0, 0.0, 0.0]),
    (H2Init, [0.0, 0.0, 0.0]),
    (H2Prop, [Z, -0.5, 0.0]),
    (H2Eff, [Z, 0.0, 0.0]),
    (H2Cross, [Z, -1.0, 0.0]),
    (H3i, [0.0, 0.0, 0.0]),
    (H3iInit, [0.0, 0.0, 0.0]),
    (H3iProp, [Z, 0.0, 0.0]),
    (H3iEff, [Z, 0.0, 0.0]),
    (H3iCross, [Z, -1.5, 0.0]),
    (H3, [-0.5, 0.0, 0.0]),
    (A1, [-0.5, -0.5, -0.5]),
    (A21, [Z, -1.0, -0.5]),
    (A22, [Z, 0.0, 0.0]),
    (A3, [Z, 0.0, 0.0]),
    (D, [Z, -1.0, 0.0]),
    (F, [-1.0, 0.0, 0.0]),
    (FInit, [-1.0, -1.0, -1.0]),
    (FProp, [Z, 0.0, 0.0]),
    (FEff, [Z, -1.0, -1.0]),
    (FCross, [Z, -1.0, 0.0]),
    (Dh3, [-1.0, -1.0, -1.0]),
    (Dh3Init, [-1.0, -1.0, -1.0]),
    (Dh3Upd, [Z, -1.5, -1.0]),
    (Dh3i, [-2.0, -2.0, -2.0]),
    (Dh3iInit, [-2.0, -2.0, -2.0]),
    (Dh3iUpd, [Z, -2.5, -2.0]),
    (Dh2, [-2.0, -2.0, -2.0]),
    (Dh2II, [-2.0, -2.0, -2.0]),
    (Dh2IU, [Z, -2.5, -2.0]),
    (Dh2UI, [Z, -2.0, -2.0]),
    (Dh2UU, [Z, -3.0, -2.0]),
    (Dphi, [-1.5, -1.0, -1.0]),
    (DphiInit4, [-1.5, -1.0, -1.0]),
    (DphiUpd4, [Z, -1.5, -1.0]),
    (Dh1Exp, [-1.5, -1.0, -1.0]),
    (A4_1, [-1.5, -1.5, -1.5]),
    (A4_2, [Z, -2.0, -1.5]),
    (A5_1, [Z, -1.0, -1.0]),
    (A5_2, [Z, -2.0, -1.0]),
    (A6_1, [Z, -1.0, -1.0]),
    (A6_2, [Z, -2.0, -1.0]),
    (E1, [Z, -2.0, -1.0]),
    (E2, [Z, -2.0, -1.0]),
    (Dh1Router, [-1.5, -1.0, -1.0]),
    (RouterQ0, [-1.5, -1.0, -1.0]),
    (RouterDq, [Z, -2.0, -1.0]),
];

// Shared expert init and a zero-initialized readout.
const MSSP_III: &[Row] = &[
    (H1, [0.0, 0.0, 0.0]),
    (H1Init, [0.0, 0.0, 0.0]),
    (H1Eff, [Z, Z, 0.0]),
    (Psi, [0.0, 0.0, 0.0]),
    (Phi, [0.0, 0.0, 0.0]),
    (H2, [0.0, 0.0, 0.0]),
    (H2Init, [0.0, 0.0, 0.0]),
    (H2Prop, [Z, Z, 0.0]),
    (H2Eff, [Z, Z, 0.0]),
    (H2Cross, [Z, Z, 0.0]),
    (H3i, [0.0, 0.0, 0.0]),
    (H3iInit, [0.0, 0.0, 0.0]),
    (H3iProp, [Z, Z, 0.0]),
    (H3iEff, [Z, Z, 0.0]),
    (H3iCross, [Z, Z, 0.0]),
    (H3, [0.0, 0.0, 0.0]),
    (A1, [0.0, 0.0, 0.0]),
    (A2, [Z, Z, 0.0]),
    (A3, [Z, Z, 0.0]),
    (D, [Z, Z, 0.0]),
    (F, [Z, 0.0, 0.0]),
    (FEff, [Z, 0.0, 0.0]),
    (FCross, [Z, Z, 0.0]),
    (Dh3, [Z, -1.0, -1.0]),
    (Dh3i, [Z, -2.0, -2.0]),
    (Dh2, [Z, -2.0, -2.0]),
    (Dh2II, [Z, Z, Z]),
    (Dh2IU, [Z, -2.0, -2.0]),
    (Dh2UI, [Z, Z, Z]),
    (Dh2UU, [Z, Z, -2.0]),
    (Dphi, [Z, -1.0, -1.0]),
    (Dh1Exp, [Z, -1.0, -1.0]),
    (A4, [Z, -1.0, -1.0]),
    (A5, [Z, Z, -1.0]),
    (A6, [Z, Z, -1.0]),
    (E, [Z, Z, -1.0]),
    (A4_1, [Z, Z, Z]),
    (A5_1, [Z, Z, Z]),
    (A6_1, [Z, Z, Z]),
    (E1, [Z, Z, Z]),
    (Dh1Router, [Z, -1.0, -1.0]),
    (RouterQ0, [Z, -1.0, -1.0]),
    (RouterDq, [Z, Z, -1.0]),
];

impl PredictionCatalog {
    /// Catalog of the four SGD campaigns: muP and MSSP in Regimes II and III.
    pub fn standard() -> Self {
        let mut entries = BTreeMap::new();
        for (regime, param, rows) in [
            (Regime::II, Parameterization::Mup, MUP_II),
            (Regime::II, Parameterization::Mssp, MSSP_II),
            (Regime::III, Parameterization::Mup, MUP_III),
            (Regime::III, Parameterization::Mssp, MSSP_III),
        ] {
            for (term, vals) in rows {
                for (class, v) in TimeClass::ALL.into_iter().zip(vals) {
                    entries.insert((regime, param, *term, class), p(*v));
                }
            }
        }
        Self { entries }
    }

    pub fn get(&self, regime: Regime, param: Parameterization, term: TermId, class: TimeClass) -> Prediction {
        self.entries.get(&(regime, param, term, class)).copied().unwrap_or(Prediction::Unspecified)
    }

    /// Specified entries of one campaign.
    pub fn campaign(&self, regime: Regime, param: Parameterization) -> Vec<(TermId, TimeClass, Prediction)> {
        self.entries
            .iter()
            .filter(|((r, p, _, _), v)| *r == regime && *p == param && **v != Prediction::Unspecified)
            .map(|((_, _, t, c), v)| (*t, *c, *v))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_deltaless_term_is_zero_at_t0() {
        let cat = PredictionCatalog::standard();
        let deltas = [H1Eff, H2Prop, H2Eff, H2Cross, H3iProp, H3iEff, H3iCross, A21, A22, A2, A3, D, Dh3Upd, E1, E2, RouterDq];
        for (r, p) in [(Regime::II, Parameterization::Mup), (Regime::II, Parameterization::Mssp), (Regime::III, Parameterization::Mup), (Regime::III, Parameterization::Mssp)] {
            assert!(!cat.campaign(r, p).is_empty());
            for t in deltas {
                let v = cat.get(r, p, t, TimeClass::T0);
                assert!(matches!(v, Prediction::Zero | Prediction::Unspecified), "{r} {p} {t}: {v:?}");
            }
        }
    }

    #[test]
    fn headline_entries() {
        let cat = PredictionCatalog::standard();
        use Parameterization::*;
        assert_eq!(cat.get(Regime::II, Mup, A1, TimeClass::T2Plus), Prediction::Exponent(-0.5));
        assert_eq!(cat.get(Regime::II, Mup, Dh2II, TimeClass::T1), Prediction::Exponent(-1.5));
        assert_eq!(cat.get(Regime::II, Mssp, H3i, TimeClass::T0), Prediction::Exponent(0.5));
        assert_eq!(cat.get(Regime::II, Mssp, A4_1, TimeClass::T2Plus), Prediction::Zero);
        assert_eq!(cat.get(Regime::III, Mup, A22, TimeClass::T2Plus), Prediction::Exponent(0.0));
        assert_eq!(cat.get(Regime::I, Mup, A1, TimeClass::T0), Prediction::Unspecified);
        assert!(cat.get(Regime::I, Mup, A1, TimeClass::T0).value().is_nan());
    }
}
