use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! terms {
    ($($v:ident => $s:literal),+ $(,)?) => {
        /// A named sub-term of the forward or backward dynamics.
        ///
        /// Per-expert quantities report the RMS over all experts, entries and samples.
        /// In grid names the first letter is the `W3` part and the second the `W4`
        /// part (`i` for init, `u` for update).
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum TermId { $($v),+ }

        impl TermId {
            pub const ALL: &'static [TermId] = &[$(TermId::$v),+];

            pub fn name(self) -> &'static str {
                match self { $(TermId::$v => $s),+ }
            }
        }

        impl FromStr for TermId {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(TermId::$v),)+
                    _ => Err(Error::Config(format!("unknown term '{s}'"))),
                }
            }
        }
    };
}

terms! {
    H1 => "h1", H1Init => "h1_init", H1Prop => "h1_prop", H1Eff => "h1_eff", H1Cross => "h1_cross",
    Psi => "psi", PsiInit => "psi_init", PsiProp => "psi_prop", PsiEff => "psi_eff", PsiCross => "psi_cross",
    Phi => "phi",
    H2 => "h2", H2Init => "h2_init", H2Prop => "h2_prop", H2Eff => "h2_eff", H2Cross => "h2_cross",
    H3i => "h3i", H3iInit => "h3i_init", H3iProp => "h3i_prop", H3iEff => "h3i_eff", H3iCross => "h3i_cross",
    H3 => "h3",
    A1 => "A1_init", A21 => "A21_prop_chain", A22 => "A22_prop_eff", A2 => "A2_prop", A3 => "A3_effective", D => "D_cross",
    F => "f", FInit => "f_init", FProp => "f_prop", FEff => "f_eff", FCross => "f_cross",
    Dh3 => "dh3", Dh3Init => "dh3_init", Dh3Upd => "dh3_upd",
    Dh3i => "dh3i", Dh3iInit => "dh3i_init", Dh3iUpd => "dh3i_upd",
    Dh2 => "dh2", Dh2II => "dh2_ii", Dh2IU => "dh2_iu", Dh2UI => "dh2_ui", Dh2UU => "dh2_uu",
    Dphi => "dphi", DphiII => "dphi_ii", DphiIU => "dphi_iu", DphiUI => "dphi_ui", DphiUU => "dphi_uu",
    DphiInit4 => "dphi_w4init", DphiUpd4 => "dphi_w4upd",
    Dh1Exp => "dh1_exp",
    A4_1 => "A4_1", A4_2 => "A4_2", A5_1 => "A5_1", A5_2 => "A5_2",
    A6_1 => "A6_1", A6_2 => "A6_2", E1 => "E_1", E2 => "E_2",
    A4 => "A4", A5 => "A5", A6 => "A6", E => "E",
    Dh1Router => "dh1_router",
    RouterQ0VI => "Q0_vI", RouterQ0VU => "Q0_vU", RouterDqVI => "dQ_vI", RouterDqVU => "dQ_vU",
    RouterQ0 => "router_Q0", RouterDq => "router_dQ",
    RouterQ0II => "Q0_ii", RouterQ0IU => "Q0_iu", RouterQ0UI => "Q0_ui", RouterQ0UU => "Q0_uu",
    RouterDqII => "dQ_ii", RouterDqIU => "dQ_iu", RouterDqUI => "dQ_ui", RouterDqUU => "dQ_uu",
    Dh1 => "dh1",
}

impl fmt::Display for TermId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for TermId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for TermId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// RMS of every term measured at one probe.
pub type TermMap = BTreeMap<TermId, f64>;

/// RMS history of one term for one (width, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSeries {
    pub term: TermId,
    pub width: usize,
    pub seed: u64,
    pub steps: Vec<usize>,
    pub values: Vec<f64>,
    /// The run stopped on divergence after the last recorded step.
    pub diverged: bool,
}

impl TermSeries {
    pub fn new(term: TermId, width: usize, seed: u64) -> Self {
        Self { term, width, seed, steps: Vec::new(), values: Vec::new(), diverged: false }
    }

    pub fn push(&mut self, step: usize, rms: f64) {
        self.steps.push(step);
        self.values.push(rms);
    }

    pub fn at(&self, step: usize) -> Option<f64> {
        self.steps.iter().position(|s| *s == step).map(|i| self.values[i])
    }
}

/// Splits per-probe maps into one series per term.
pub fn collect_series(width: usize, seed: u64, probes: &[(usize, TermMap)]) -> Vec<TermSeries> {
    let mut out: BTreeMap<TermId, TermSeries> = BTreeMap::new();
    for (step, map) in probes {
        for (&term, &v) in map {
            out.entry(term).or_insert_with(|| TermSeries::new(term, width, seed)).push(*step, v);
        }
    }
    out.into_values().collect()
}

#[derive(Serialize)]
struct SeriesRow<'a> {
    term: &'a str,
    width: usize,
    seed: u64,
    step: usize,
    rms: f64,
    exact_zero: bool,
}

/// CSV with columns `term,width,seed,step,rms,exact_zero`.
pub fn write_series_csv<W: Write>(out: W, series: &[TermSeries]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if series.is_empty() {
        w.write_record(["term", "width", "seed", "step", "rms", "exact_zero"])?;
    }
    for s in series {
        for (&step, &rms) in s.steps.iter().zip(&s.values) {
            w.serialize(SeriesRow { term: s.term.name(), width: s.width, seed: s.seed, step, rms, exact_zero: rms == 0.0 })?;
        }
    }
    w.flush()?;
    Ok(())
}
