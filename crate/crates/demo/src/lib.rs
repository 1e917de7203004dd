//! Browser demo: evidence → opinion, opinion fusion, and a Dirichlet density
//! map on the 3-class simplex. The `#[wasm_bindgen]` exports are thin JSON
//! wrappers around plain functions that are tested natively.

use evifuse::opinion::{dirichlet_log_density, fuse, opinion_from_evidence};
use evifuse::{DirichletOpinion, EvidenceVector, FusionMode};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::wasm_bindgen;
use wasm_bindgen::JsValue;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpinionView {
    pub alpha: Vec<f64>,
    pub belief: Vec<f64>,
    pub uncertainty: f64,
    pub strength: f64,
    pub projected: Vec<f64>,
    pub predicted_class: usize,
}

impl From<&DirichletOpinion> for OpinionView {
    fn from(m: &DirichletOpinion) -> Self {
        Self {
            alpha: m.alpha().to_vec(),
            belief: m.belief(),
            uncertainty: m.uncertainty(),
            strength: m.strength(),
            projected: m.projected_probability(),
            predicted_class: m.predicted_class(),
        }
    }
}

pub fn evidence_to_opinion(evidence: &[f64]) -> Result<OpinionView, String> {
    let e = EvidenceVector::new(evidence.to_vec()).map_err(|e| e.to_string())?;
    Ok(OpinionView::from(&opinion_from_evidence(&e)))
}

/// Fuses one opinion per evidence vector, in the given order.
pub fn fuse_evidence(evidence: &[Vec<f64>], mode: &str) -> Result<FusionView, String> {
    let mode: FusionMode = mode.parse().map_err(|e: evifuse::Error| e.to_string())?;
    let opinions = evidence
        .iter()
        .map(|e| {
            EvidenceVector::new(e.clone())
                .map(|e| opinion_from_evidence(&e))
                .map_err(|e| e.to_string())
        })
        .collect::<Result<Vec<_>, _>>()?;
    let fused = fuse(mode, &opinions).map_err(|e| e.to_string())?;
    Ok(FusionView {
        inputs: opinions.iter().map(OpinionView::from).collect(),
        fused: OpinionView::from(&fused),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionView {
    pub inputs: Vec<OpinionView>,
    pub fused: OpinionView,
}

/// Log-density of `Dir(α)` (three classes) on a `size × size` raster of the
/// simplex triangle with corners bottom-left (class 0), bottom-right
/// (class 1) and top (class 2). Row 0 is the top row; cells whose centre lies
/// outside the triangle are `None`.
pub fn density_grid(alpha: &[f64], size: usize) -> Result<Vec<Option<f64>>, String> {
    if alpha.len() != 3 {
        return Err(format!("density map needs 3 classes, got {}", alpha.len()));
    }
    if !(2..=512).contains(&size) {
        return Err(format!("grid size must be in 2..=512, got {size}"));
    }
    let h = 3f64.sqrt() / 2.0;
    let mut out = Vec::with_capacity(size * size);
    for row in 0..size {
        let y = h * (1.0 - (row as f64 + 0.5) / size as f64);
        for col in 0..size {
            let x = (col as f64 + 0.5) / size as f64;
            let p2 = y / h;
            let p1 = x - 0.5 * p2;
            let p0 = 1.0 - p1 - p2;
            let p = [p0, p1, p2];
            if p.iter().any(|&v| v <= 0.0) {
                out.push(None);
            } else {
                out.push(Some(dirichlet_log_density(&p, alpha).map_err(|e| e.to_string())?));
            }
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct FuseRequest {
    evidence: Vec<Vec<f64>>,
    #[serde(default = "default_mode")]
    mode: String,
}

fn default_mode() -> String {
    "left-fold".into()
}

fn to_js<T: Serialize>(value: Result<T, String>) -> Result<String, JsValue> {
    value
        .and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

/// `evidence`: JSON array of nonnegative numbers.
#[wasm_bindgen(js_name = evidenceToOpinion)]
pub fn evidence_to_opinion_js(evidence: &str) -> Result<String, JsValue> {
    to_js(
        serde_json::from_str::<Vec<f64>>(evidence)
            .map_err(|e| e.to_string())
            .and_then(|e| evidence_to_opinion(&e)),
    )
}

/// `request`: `{"evidence": [[..], ..], "mode": "left-fold" | "balanced"}`.
#[wasm_bindgen(js_name = fuseEvidence)]
pub fn fuse_evidence_js(request: &str) -> Result<String, JsValue> {
    to_js(
        serde_json::from_str::<FuseRequest>(request)
            .map_err(|e| e.to_string())
            .and_then(|r| fuse_evidence(&r.evidence, &r.mode)),
    )
}

/// Row-major grid of log-densities; `null` outside the simplex.
#[wasm_bindgen(js_name = densityGrid)]
pub fn density_grid_js(a0: f64, a1: f64, a2: f64, size: usize) -> Result<String, JsValue> {
    to_js(density_grid(&[a0, a1, a2], size))
}
