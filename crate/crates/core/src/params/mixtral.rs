use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ScaleVector;
use crate::params::Regime;

/// One row of the full Mixtral-style prescription. Absent numbers mean the
/// row has no such hyperparameter; symbolic forms are kept in `notes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrescriptionRow {
    pub layer: String,
    pub init_std: Option<f64>,
    pub adam_lr: Option<f64>,
    pub adam_eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multiplier: Option<f64>,
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prescription {
    pub regime: Regime,
    pub scale: ScaleVector,
    pub depth: usize,
    pub base_lr: f64,
    pub base_eps: f64,
    pub weight_decay: String,
    pub rows: Vec<PrescriptionRow>,
}

impl Prescription {
    pub fn row(&self, layer: &str) -> Option<&PrescriptionRow> {
        self.rows.iter().find(|r| r.layer == layer)
    }
}

/// A factor together with its symbolic form.
struct F(f64, &'static str);

const WEIGHT_DECAY: &str = "keep decoupled weight decay fixed across scales; with a coupled implementation use the inverse of the lr multiplier so that lr*wd is scale independent; keep Adam betas scale independent";

/// Evaluates the AdamW prescription for a depth-`depth` Mixtral-style model at `scale`.
pub fn emit_mixtral_config(regime: Regime, scale: &ScaleVector, depth: usize, base_lr: f64, base_eps: f64) -> Result<Prescription> {
    scale.validate()?;
    if depth == 0 {
        return Err(Error::Config("depth must be at least 1".into()));
    }
    if !(base_lr > 0.0 && base_lr.is_finite() && base_eps > 0.0 && base_eps.is_finite()) {
        return Err(Error::Config(format!("base lr {base_lr} and eps {base_eps} must be positive")));
    }
    let n = scale.n as f64;
    let ne = scale.n_e as f64;
    let m = scale.m as f64;
    let k = scale.k as f64;
    let d = scale.d as f64;
    let l = depth as f64;
    let tied = regime == Regime::III;

    let row = |layer: &str, init: Option<F>, lr: Option<F>, eps: Option<F>, extra: &str| {
        let mut notes: Vec<String> = Vec::new();
        if let Some(F(_, s)) = &init {
            notes.push(format!("init {s}"));
        }
        if let Some(F(_, s)) = &lr {
            notes.push(format!("lr {s}"));
        }
        if let Some(F(_, s)) = &eps {
            notes.push(format!("eps {s}"));
        }
        if !extra.is_empty() {
            notes.push(extra.to_string());
        }
        PrescriptionRow {
            layer: layer.to_string(),
            init_std: init.map(|f| f.0),
            adam_lr: lr.map(|f| base_lr * f.0),
            adam_eps: eps.map(|f| base_eps * f.0),
            multiplier: None,
            notes: notes.join("; "),
        }
    };
    let mult = |layer: &str, v: F| PrescriptionRow {
        layer: layer.to_string(),
        init_std: None,
        adam_lr: None,
        adam_eps: None,
        multiplier: Some(v.0),
        notes: format!("multiplier {}", v.1),
    };

    let router_init = match regime {
        Regime::I => F(0.0, "0"),
        _ => F(n.powf(-0.5), "N^-1/2"),
    };
    let router_eps = match regime {
        Regime::I => F(1.0 / l, "L^-1"),
        _ => F(1.0 / (m * l), "M^-1 L^-1"),
    };
    let e1_eps = match regime {
        Regime::I => F(1.0 / (n * l), "N^-1 L^-1"),
        Regime::II => F(1.0 / (m * l), "M^-1 L^-1"),
        Regime::III => F(1.0 / (n * m * l), "N^-1 M^-1 L^-1"),
    };
    let e2_init = match regime {
        Regime::II => F((m / ne).sqrt(), "M^1/2 N_e^-1/2"),
        _ => F(ne.powf(-0.5), "N_e^-1/2"),
    };
    let e2_eps = match regime {
        Regime::I => F(1.0 / (n * l), "N^-1 L^-1"),
        _ => F(1.0 / (n * m * l), "N^-1 M^-1 L^-1"),
    };
    let tied_note = if tied { "tied: share expert weights across experts at initialization" } else { "" };

    let rows = vec![
        row("embedding", Some(F(d.powf(-0.5), "d_in^-1/2")), Some(F(1.0 / d, "d_in^-1")), Some(F(1.0 / n, "N^-1")), ""),
        row("pre_ln", Some(F(1.0, "1")), Some(F(1.0, "1")), Some(F(1.0 / (n * l), "N^-1 L^-1")), ""),
        row("hidden", Some(F(n.powf(-0.5), "N^-1/2")), Some(F(1.0 / n, "N^-1")), Some(F(1.0 / (n * l), "N^-1 L^-1")), ""),
        row("hidden_bias", None, Some(F(1.0, "1")), None, ""),
        row(
            "router",
            Some(router_init),
            Some(F(1.0 / n, "N^-1")),
            Some(router_eps),
            if regime == Regime::I { "zero router init requires initial randomness in the routing mechanism" } else { "" },
        ),
        row("expert_layer_1", Some(F(n.powf(-0.5), "N^-1/2")), Some(F(1.0 / n, "N^-1")), Some(e1_eps), tied_note),
        row("expert_layer_2", Some(e2_init), Some(F(1.0 / ne, "N_e^-1")), Some(e2_eps), tied_note),
        mult("aggregation", F(1.0 / k, "K^-1")),
        mult("aux_load_balancing_loss", F(1.0, "1")),
        mult("router_z_loss", F(1.0, "1")),
        mult("mha_residual", F(1.0 / l, "L^-1 (X + L^-1 MHA(LN(X)))")),
        mult("moe_residual", F(1.0 / l, "L^-1 (X + L^-1 MoE(LN(X)))")),
        row("final_ln", None, Some(F(1.0, "1")), Some(F(1.0 / n, "N^-1")), "no init std"),
        {
            let mut r = row("unembedding", Some(F(1.0 / n, "N^-1")), Some(F(1.0 / n, "N^-1")), Some(F(1.0, "1")), "forward multiplier 1");
            r.multiplier = Some(1.0);
            r
        },
    ];
    Ok(Prescription {
        regime,
        scale: *scale,
        depth,
        base_lr,
        base_eps,
        weight_decay: WEIGHT_DECAY.to_string(),
        rows,
    })
}
