//! Browser bindings: run a scenario, derive a jerk limit, render a gantt chart.

use msc_core::executive::run;
use msc_core::gantt_svg;
use msc_core::lmpc::min_max_jerk;
use msc_core::scenario::{self, Overrides, BUNDLED};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Runs a scenario (JSON text or a bundled name) and returns
/// `{ report, gantt, svg, csv }` as a JSON string.
pub fn run_scenario_json(src: &str, dt: Option<f64>, horizon: Option<usize>) -> Result<String, String> {
    let text = scenario::bundled(src).unwrap_or(src);
    let overrides = Overrides { dt, horizon, ..Overrides::default() };
    let s = scenario::load(text, &overrides).map_err(|e| e.to_string())?;
    let name = s.file.name.clone();
    let out = run(s.world, s.program, &s.config, s.events, s.sensors).map_err(|e| e.to_string())?;
    let report: serde_json::Value =
        serde_json::from_str(&scenario::report_json(&name, &out.report, out.qp_dump.as_ref())).map_err(|e| e.to_string())?;
    Ok(json!({
        "report": report,
        "gantt": out.gantt,
        "svg": gantt_svg::render(&out.gantt),
        "csv": scenario::trajectory_csv(&out.trajectory),
    })
    .to_string())
}

pub fn gantt_svg_from_json(gantt: &str) -> Result<String, String> {
    let records = scenario::parse_gantt(gantt).map_err(|e| e.to_string())?;
    Ok(gantt_svg::render(&records))
}

#[wasm_bindgen]
pub fn run_scenario(src: &str, dt: Option<f64>, horizon: Option<usize>) -> Result<String, JsError> {
    run_scenario_json(src, dt, horizon).map_err(|e| JsError::new(&e))
}

/// Smallest jerk bound that still lets a DOF stop from `v_max` within the horizon.
#[wasm_bindgen]
pub fn jerk_limit(v_max: f64, dt: f64, horizon: usize) -> Result<f64, JsError> {
    min_max_jerk(v_max, dt, horizon).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn gantt_svg(gantt: &str) -> Result<String, JsError> {
    gantt_svg_from_json(gantt).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn bundled_scenarios() -> Vec<String> {
    BUNDLED.iter().map(|(n, _)| n.to_string()).collect()
}

#[wasm_bindgen]
pub fn bundled_scenario(name: &str) -> Option<String> {
    scenario::bundled(name).map(str::to_string)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn runs_a_bundled_scenario() {
        let out: serde_json::Value = serde_json::from_str(&run_scenario_json("peg_in_hole", None, None).unwrap()).unwrap();
        assert_eq!(out["report"]["termination"], "End");
        assert!(out["svg"].as_str().unwrap().starts_with("<svg"));
        let round = gantt_svg_from_json(&out["gantt"].to_string()).unwrap();
        let bars = |s: &str| s.matches("class=\"lifecycle\"").count();
        assert_eq!(bars(&round), bars(out["svg"].as_str().unwrap()));
    }

    #[test]
    fn bad_input_is_an_error() {
        assert!(run_scenario_json("{", None, None).is_err());
        assert!(gantt_svg_from_json("[{]").is_err());
        assert!(min_max_jerk(1.0, 0.02, 2).is_err());
    }
}
