//! Command implementations. Each returns a payload (JSON or CSV), an exit
//! code, and optionally an SVG chart. The fully resolved configuration is
//! embedded in every JSON payload.
//!
//! Exit codes: 0 ok, 1 not-certified or assertion failure, 2 config error
//! (handled by the dispatcher), 3 fixed-point non-convergence.

use crate::config::{RunConfig, SweepSettings};
use crate::svg::{self, Series};
use nmfvi::fixedpoint::{FixedPoint, FixedPointError, FixedPointSolution};
use nmfvi::meanfield::{self, ProblemSpec};
use nmfvi::par;
use nmfvi::predictions::Predictor;
use nmfvi::simulate::{self, mean_sd};
use serde_json::{Value, json};

pub enum Output {
    Json(Value),
    Csv(String),
}

pub struct CommandResult {
    pub output: Output,
    pub exit_code: i32,
    pub svg: Option<String>,
}

fn json_result(value: Value, exit_code: i32) -> CommandResult {
    CommandResult {
        output: Output::Json(value),
        exit_code,
        svg: None,
    }
}

fn config_value(cfg: &RunConfig) -> Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn error_exit(err: &FixedPointError) -> i32 {
    match err {
        FixedPointError::NoConvergence { .. } => 3,
        _ => 1,
    }
}

pub fn check_convexity(cfg: &RunConfig) -> CommandResult {
    let problem = match cfg.problem() {
        Ok(p) => p,
        Err(e) => {
            return json_result(json!({ "error": e.to_string() }), 2);
        }
    };
    let report = meanfield::check_convexity(&problem.prior, problem.sigma2);
    let exit = if report.certified { 0 } else { 1 };
    json_result(
        json!({
            "config": config_value(cfg),
            "convexity": report,
        }),
        exit,
    )
}

/// Shared front half: certify, solve, verify.
fn solve_with_diagnostics(
    cfg: &RunConfig,
    problem: &ProblemSpec,
) -> Result<(Value, FixedPointSolution), CommandResult> {
    let report = meanfield::check_convexity(&problem.prior, problem.sigma2);
    if !report.certified {
        return Err(json_result(
            json!({
                "config": config_value(cfg),
                "convexity": report,
                "error": "convexity of F is not certified; refusing to solve",
            }),
            1,
        ));
    }
    let scheme = cfg.scheme();
    let fp = match FixedPoint::new(problem, &scheme) {
        Ok(fp) => fp,
        Err(e) => {
            return Err(json_result(
                json!({
                    "config": config_value(cfg),
                    "convexity": report,
                    "error": e.to_string(),
                }),
                error_exit(&e),
            ));
        }
    };
    let sol = match fp.solve(&cfg.solve_options()) {
        Ok(sol) => sol,
        Err(FixedPointError::NoConvergence { trajectories }) => {
            return Err(json_result(
                json!({
                    "config": config_value(cfg),
                    "convexity": report,
                    "error": "no initialization converged",
                    "trajectories": trajectories,
                }),
                3,
            ));
        }
        Err(e) => {
            return Err(json_result(
                json!({
                    "config": config_value(cfg),
                    "convexity": report,
                    "error": e.to_string(),
                }),
                error_exit(&e),
            ));
        }
    };
    let (verify_value, verify_ok) = match fp.verify(&sol) {
        Ok(report) => (serde_json::to_value(&report).unwrap(), true),
        Err(FixedPointError::VerificationFailed { failed, report }) => {
            (json!({ "failed": failed, "report": report }), false)
        }
        Err(e) => (json!({ "error": e.to_string() }), false),
    };
    let body = json!({
        "config": config_value(cfg),
        "convexity": report,
        "solution": sol,
        "verify": verify_value,
        "verify_ok": verify_ok,
    });
    if verify_ok {
        Ok((body, sol))
    } else {
        Err(CommandResult {
            output: Output::Json(body),
            exit_code: 1,
            svg: None,
        })
    }
}

pub fn solve(cfg: &RunConfig) -> CommandResult {
    let problem = match cfg.problem() {
        Ok(p) => p,
        Err(e) => return json_result(json!({ "error": e.to_string() }), 2),
    };
    match solve_with_diagnostics(cfg, &problem) {
        Ok((body, _)) => json_result(body, 0),
        Err(res) => res,
    }
}

pub fn predict(cfg: &RunConfig) -> CommandResult {
    let problem = match cfg.problem() {
        Ok(p) => p,
        Err(e) => return json_result(json!({ "error": e.to_string() }), 2),
    };
    let (mut body, sol) = match solve_with_diagnostics(cfg, &problem) {
        Ok(ok) => ok,
        Err(res) => return res,
    };
    let scheme = cfg.scheme();
    let predictor = match Predictor::new(&problem, &scheme, &sol) {
        Ok(p) => p,
        Err(e) => return json_result(json!({ "error": e.to_string() }), 1),
    };
    match predictor.all(&cfg.coverage.zetas) {
        Ok(predictions) => {
            body["predictions"] = serde_json::to_value(&predictions).unwrap();
            json_result(body, 0)
        }
        Err(e) => {
            body["error"] = json!(e.to_string());
            json_result(body, 1)
        }
    }
}

pub fn simulate_cmd(cfg: &RunConfig) -> CommandResult {
    let problem = match cfg.problem() {
        Ok(p) => p,
        Err(e) => return json_result(json!({ "error": e.to_string() }), 2),
    };
    let (mut body, sol) = match solve_with_diagnostics(cfg, &problem) {
        Ok(ok) => ok,
        Err(res) => return res,
    };
    let sim_cfg = match cfg.sim_config() {
        Ok(c) => c,
        Err(e) => return json_result(json!({ "error": e.to_string() }), 2),
    };
    let scheme = cfg.scheme();
    match simulate::run_replicates(&problem, &sim_cfg, &scheme, &sol) {
        Ok(results) => {
            body["results"] = serde_json::to_value(&results).unwrap();
            json_result(body, 0)
        }
        Err(e) => {
            body["error"] = json!(e.to_string());
            json_result(body, 1)
        }
    }
}

fn metric_row(predicted: f64, values: &[f64]) -> Value {
    let (mean, sd) = mean_sd(values);
    let rel_gap = (predicted - mean).abs() / predicted.abs().max(1e-12);
    json!({
        "predicted": predicted,
        "empirical_mean": mean,
        "empirical_sd": sd,
        "rel_gap": rel_gap,
    })
}

pub fn compare(cfg: &RunConfig) -> CommandResult {
    let problem = match cfg.problem() {
        Ok(p) => p,
        Err(e) => return json_result(json!({ "error": e.to_string() }), 2),
    };
    let (mut body, sol) = match solve_with_diagnostics(cfg, &problem) {
        Ok(ok) => ok,
        Err(res) => return res,
    };
    let scheme = cfg.scheme();
    let sim_cfg = match cfg.sim_config() {
        Ok(c) => c,
        Err(e) => return json_result(json!({ "error": e.to_string() }), 2),
    };
    let predictor = match Predictor::new(&problem, &scheme, &sol) {
        Ok(p) => p,
        Err(e) => return json_result(json!({ "error": e.to_string() }), 1),
    };

    let results = match simulate::run_replicates(&problem, &sim_cfg, &scheme, &sol) {
        Ok(r) => r,
        Err(e) => {
            body["error"] = json!(e.to_string());
            return json_result(body, 1);
        }
    };
    let is_gaussian = matches!(
        problem.prior,
        nmfvi::priors::PriorSpec::GaussianMeanZero { .. }
    );
    let exacts: Vec<f64> = if is_gaussian {
        let vals = par::map_indexed(sim_cfg.replicates, |r| {
            let mut local = sim_cfg.clone();
            local.seed = sim_cfg.seed + r as u64;
            local.replicates = 1;
            let ds = simulate::gen_data(&problem, &local)?;
            simulate::exact_neg_log_z_gaussian(&problem, &ds)
        });
        match vals.into_iter().collect::<Result<Vec<_>, _>>() {
            Ok(v) => v,
            Err(e) => {
                body["error"] = json!(e.to_string());
                return json_result(body, 1);
            }
        }
    } else {
        Vec::new()
    };

    let mut metrics = serde_json::Map::new();
    let mse_pred = match predictor.mse() {
        Ok(v) => v,
        Err(e) => {
            body["error"] = json!(e.to_string());
            return json_result(body, 1);
        }
    };
    let mses: Vec<f64> = results.iter().map(|r| r.mse_emp).collect();
    metrics.insert("mse".into(), metric_row(mse_pred, &mses));

    let nlz_pred = match predictor.neg_log_z() {
        Ok(v) => v,
        Err(e) => {
            body["error"] = json!(e.to_string());
            return json_result(body, 1);
        }
    };
    let nlzs: Vec<f64> = results.iter().map(|r| r.neg_log_z_nmf_per_p).collect();
    metrics.insert("neg_log_z".into(), metric_row(nlz_pred, &nlzs));

    for &zeta in &cfg.coverage.zetas {
        let key = format!("{zeta}");
        let cov_pred = match predictor.coverage(zeta) {
            Ok(v) => v,
            Err(e) => {
                body["error"] = json!(e.to_string());
                return json_result(body, 1);
            }
        };
        let covs: Vec<f64> = results.iter().map(|r| r.coverage_emp[&key]).collect();
        metrics.insert(format!("coverage_{key}"), metric_row(cov_pred, &covs));

        let cor_pred = match predictor.corrected_coverage(zeta) {
            Ok(v) => v,
            Err(e) => {
                body["error"] = json!(e.to_string());
                return json_result(body, 1);
            }
        };
        let cors: Vec<f64> = results
            .iter()
            .map(|r| r.coverage_corrected_emp[&key])
            .collect();
        metrics.insert(
            format!("coverage_corrected_{key}"),
            metric_row(cor_pred, &cors),
        );
    }

    body["metrics"] = Value::Object(metrics);
    if is_gaussian {
        let (mean, sd) = mean_sd(&exacts);
        let all_above = results
            .iter()
            .zip(&exacts)
            .all(|(r, &e)| r.neg_log_z_nmf_per_p > e);
        body["exact_evidence"] = json!({
            "empirical_mean": mean,
            "empirical_sd": sd,
            "elbo_above_exact_on_every_replicate": all_above,
        });
    }
    body["replicates"] = json!(results.len());
    json_result(body, 0)
}

pub const SWEEP_CSV_HEADER: &str =
    "axis_value,b_star,tau_star,mse,neg_log_z,coverage_95,converged,multi_start_agreement";

struct SweepRow {
    axis_value: f64,
    solved: Option<(FixedPointSolution, f64, f64, f64)>,
}

impl SweepRow {
    fn to_csv(&self) -> String {
        match &self.solved {
            Some((sol, mse, nlz, cov)) => format!(
                "{},{},{},{},{},{},{},{}",
                self.axis_value,
                sol.b_star,
                sol.tau_star,
                mse,
                nlz,
                cov,
                sol.converged,
                sol.multi_start_agreement
            ),
            None => format!("{},NA,NA,NA,NA,NA,NA,NA", self.axis_value),
        }
    }

    fn metric(&self, name: &str) -> Option<f64> {
        let (sol, mse, nlz, cov) = self.solved.as_ref()?;
        match name {
            "b_star" => Some(sol.b_star),
            "tau_star" => Some(sol.tau_star),
            "mse" => Some(*mse),
            "neg_log_z" => Some(*nlz),
            "coverage_95" => Some(*cov),
            _ => None,
        }
    }
}

fn sweep_point(cfg: &RunConfig, sweep: &SweepSettings, value: f64) -> SweepRow {
    let mut point = cfg.clone();
    match sweep.axis.as_str() {
        "q" => {
            point.prior.q = Some(value);
            if let Some(truth) = &mut point.truth {
                truth.q = Some(value);
            }
        }
        "delta2" => {
            point.prior.delta2 = Some(value);
            if let Some(truth) = &mut point.truth {
                truth.delta2 = Some(value);
            }
        }
        _ => point.model.alpha = value,
    }
    let missing = SweepRow {
        axis_value: value,
        solved: None,
    };
    let Ok(problem) = point.problem() else {
        return missing;
    };
    let report = meanfield::check_convexity(&problem.prior, problem.sigma2);
    if !report.certified {
        return missing;
    }
    let scheme = point.scheme();
    let Ok(fp) = FixedPoint::new(&problem, &scheme) else {
        return missing;
    };
    let Ok(sol) = fp.solve(&point.solve_options()) else {
        return missing;
    };
    let Ok(predictor) = Predictor::new(&problem, &scheme, &sol) else {
        return missing;
    };
    let (Ok(mse), Ok(nlz), Ok(cov)) = (
        predictor.mse(),
        predictor.neg_log_z(),
        predictor.coverage(0.05),
    ) else {
        return missing;
    };
    SweepRow {
        axis_value: value,
        solved: Some((sol, mse, nlz, cov)),
    }
}

pub fn sweep(cfg: &RunConfig) -> CommandResult {
    let Some(sweep_cfg) = cfg.sweep.clone() else {
        return json_result(
            json!({ "error": "sweep requires a [sweep] section with axis and grid" }),
            2,
        );
    };
    let rows = par::map_collect(&sweep_cfg.grid, |&value| {
        sweep_point(cfg, &sweep_cfg, value)
    });
    let warnings = rows.iter().filter(|r| r.solved.is_none()).count();
    if warnings > 0 {
        eprintln!("sweep: {warnings} grid point(s) not certified or not solved (NA rows)");
    }
    let mut csv = String::from(SWEEP_CSV_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.to_csv());
        csv.push('\n');
    }
    let series: Vec<Series> = sweep_cfg
        .metrics
        .iter()
        .map(|name| Series {
            name: name.clone(),
            points: rows
                .iter()
                .filter_map(|r| r.metric(name).map(|m| (r.axis_value, m)))
                .collect(),
        })
        .collect();
    let chart = svg::render_chart(
        &format!("sweep over {}", sweep_cfg.axis),
        &sweep_cfg.axis,
        &series,
    );
    CommandResult {
        output: Output::Csv(csv),
        exit_code: 0,
        svg: Some(chart),
    }
}
