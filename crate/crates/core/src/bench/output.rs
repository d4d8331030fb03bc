//! Campaign artifacts: CSV tables, a JSON metadata echo, and standalone SVG
//! regret plots. Everything written here is a pure function of the campaign
//! result, so a fixed seed reproduces the files byte for byte.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::bayesopt::Formulation;
use crate::bench::campaign::{AggregateRow, CampaignResult, TrialOutcome};
use crate::bench::config::ExperimentConfig;
use crate::error::{MfError, Result};

/// Shortest round-trip decimal form; the one float format used in artifacts.
fn fmt(v: f64) -> String {
    format!("{v}")
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

pub const RESULTS_HEADER: &str =
    "trial,formulation,iter,x1,x2,x3,y_noisy,f_true,r_t,R_t,r_star_t,diverged_flag";

fn results_csv(cfg: &ExperimentConfig, trials: &[TrialOutcome]) -> String {
    let mut out = String::new();
    out.push_str(RESULTS_HEADER);
    out.push('\n');
    for trial in trials {
        for kind in cfg.unique_formulations() {
            let Some((_, trace)) = trial.traces.iter().find(|(k, _)| *k == kind) else {
                continue;
            };
            for t in 0..trace.len() {
                let p = &trace.points[t];
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{},{}",
                    trial.trial + 1,
                    kind.code(),
                    t + 1,
                    fmt(p[0]),
                    fmt(p[1]),
                    fmt(p[2]),
                    fmt(trace.y_noisy[t]),
                    fmt(trace.f_true[t]),
                    fmt(trace.instantaneous[t]),
                    fmt(trace.cumulative[t]),
                    fmt(trace.best[t]),
                    flag(trace.diverged[t]),
                );
            }
        }
    }
    out
}

fn aggregates_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::new();
    out.push_str(
        "formulation,iter,cum_regret_mean,cum_regret_std,best_regret_mean,best_regret_std,trials\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.formulation.code(),
            r.iter,
            fmt(r.cum_mean),
            fmt(r.cum_std),
            fmt(r.best_mean),
            fmt(r.best_std),
            r.trials,
        );
    }
    out
}

fn bounds_csv(trials: &[TrialOutcome]) -> Option<String> {
    if trials.iter().all(|t| t.bound.is_none()) {
        return None;
    }
    let mut out = String::new();
    out.push_str(
        "trial,rho,scale,lambda_min_low,precondition_ok,dominance_margin,\
         lambda_max_conditional,lambda_max_induced,mf_benefit,gamma_bound,\
         realized_info_gain,info_gain_ok,beta_t,regret_bound_linear,\
         regret_bound_squared,cum_regret_model_units,within_linear,within_squared\n",
    );
    for trial in trials {
        let Some(row) = &trial.bound else { continue };
        let r = &row.report;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            trial.trial + 1,
            fmt(r.rho),
            fmt(row.scale),
            fmt(r.lambda_min_low),
            flag(r.precondition_ok),
            fmt(r.dominance_margin),
            fmt(r.lambda_max_conditional),
            fmt(r.lambda_max_induced),
            flag(r.mf_benefit),
            fmt(r.gamma_bound),
            fmt(r.realized_info_gain),
            flag(r.info_gain_ok),
            fmt(r.beta_t),
            fmt(r.regret_bound_linear),
            fmt(r.regret_bound_squared),
            fmt(row.cum_regret_model_units),
            flag(row.within_linear),
            flag(row.within_squared),
        );
    }
    Some(out)
}

#[derive(Serialize)]
struct TrialMeta {
    trial: usize,
    k_d: Option<f64>,
    k_p: Option<f64>,
    f_star: f64,
    argmax: usize,
    complete: bool,
    reference_regret: Option<f64>,
    fitted_rho: Option<f64>,
    error: Option<String>,
}

#[derive(Serialize)]
struct HistoryMeta {
    draw_without_replacement: bool,
    operators: Vec<[f64; 2]>,
    points_per_operator: usize,
}

#[derive(Serialize)]
struct Metadata<'a> {
    generator: &'static str,
    version: &'static str,
    all_complete: bool,
    config: &'a ExperimentConfig,
    history: HistoryMeta,
    trials: Vec<TrialMeta>,
}

fn metadata_json(cfg: &ExperimentConfig, campaign: &CampaignResult) -> Result<String> {
    let meta = Metadata {
        generator: "mftune",
        version: env!("CARGO_PKG_VERSION"),
        all_complete: campaign.all_complete,
        config: cfg,
        history: HistoryMeta {
            draw_without_replacement: true,
            operators: campaign
                .history
                .iter()
                .map(|h| [h.gains.k_d(), h.gains.k_p()])
                .collect(),
            points_per_operator: cfg.operators.points_per_operator,
        },
        trials: campaign
            .trials
            .iter()
            .map(|t| TrialMeta {
                trial: t.trial + 1,
                k_d: t.gains.as_ref().map(|g| g.k_d()),
                k_p: t.gains.as_ref().map(|g| g.k_p()),
                f_star: t.f_star,
                argmax: t.argmax,
                complete: t.complete(),
                reference_regret: t.reference_regret,
                fitted_rho: t.bound.as_ref().map(|b| b.report.rho),
                error: t.error.clone(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&meta).map_err(|e| MfError::Config(e.to_string()))
}

const PLOT_COLORS: [(&str, &str); 3] =
    [("mff", "#1f77b4"), ("csf", "#d62728"), ("lsf", "#2ca02c")];

fn color_for(f: Formulation) -> &'static str {
    PLOT_COLORS
        .iter()
        .find(|(code, _)| *code == f.code())
        .map(|(_, c)| *c)
        .unwrap_or("#444444")
}

struct Series {
    formulation: Formulation,
    mean: Vec<f64>,
    std: Vec<f64>,
}

/// Hand-rolled SVG line chart with one-standard-deviation error bars. No
/// rendering dependencies; fixed canvas, linear axes.
fn regret_plot(title: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 50.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let t_max = series.iter().map(|s| s.mean.len()).max().unwrap_or(1).max(1);
    let mut y_max = f64::MIN;
    for s in series {
        for (m, sd) in s.mean.iter().zip(&s.std) {
            y_max = y_max.max(m + sd);
        }
    }
    if !y_max.is_finite() || y_max <= 0.0 {
        y_max = 1.0;
    }
    y_max *= 1.05;
    let x_of = |t: usize| left + plot_w * (t as f64) / ((t_max.max(2) - 1) as f64);
    let y_of = |v: f64| top + plot_h * (1.0 - (v / y_max).clamp(0.0, 1.0));

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"Helvetica, Arial, sans-serif\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\">{title}</text>\n",
        left + plot_w / 2.0
    );
    // Axes.
    let _ = write!(
        svg,
        "<line x1=\"{left}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
         <line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        top + plot_h,
        left + plot_w,
        top + plot_h,
        top + plot_h
    );
    // Y ticks.
    for i in 0..=4 {
        let v = y_max * (i as f64) / 4.0;
        let y = y_of(v);
        let _ = write!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{left}\" y2=\"{y:.1}\" stroke=\"black\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{v:.3}</text>\n",
            left - 5.0,
            left - 8.0,
            y + 4.0
        );
    }
    // X ticks at every iteration (thinned when crowded).
    let stride = (t_max / 10).max(1);
    for t in (0..t_max).step_by(stride) {
        let x = x_of(t);
        let _ = write!(
            svg,
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
             <text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            top + plot_h,
            top + plot_h + 5.0,
            top + plot_h + 20.0,
            t + 1
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">iteration</text>\n\
         <text x=\"18\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\" \
         transform=\"rotate(-90 18 {:.1})\">{y_label}</text>\n",
        left + plot_w / 2.0,
        h - 12.0,
        top + plot_h / 2.0,
        top + plot_h / 2.0
    );
    // Error bars first, lines on top.
    for s in series {
        let color = color_for(s.formulation);
        for (t, (m, sd)) in s.mean.iter().zip(&s.std).enumerate() {
            if *sd <= 0.0 {
                continue;
            }
            let x = x_of(t);
            let (y0, y1) = (y_of((m - sd).max(0.0)), y_of(m + sd));
            let _ = write!(
                svg,
                "<line x1=\"{x:.1}\" y1=\"{y0:.1}\" x2=\"{x:.1}\" y2=\"{y1:.1}\" \
                 stroke=\"{color}\" stroke-opacity=\"0.45\"/>\n\
                 <line x1=\"{:.1}\" y1=\"{y0:.1}\" x2=\"{:.1}\" y2=\"{y0:.1}\" \
                 stroke=\"{color}\" stroke-opacity=\"0.45\"/>\n\
                 <line x1=\"{:.1}\" y1=\"{y1:.1}\" x2=\"{:.1}\" y2=\"{y1:.1}\" \
                 stroke=\"{color}\" stroke-opacity=\"0.45\"/>\n",
                x - 3.0,
                x + 3.0,
                x - 3.0,
                x + 3.0
            );
        }
        let path: Vec<String> = s
            .mean
            .iter()
            .enumerate()
            .map(|(t, m)| format!("{:.1},{:.1}", x_of(t), y_of(*m)))
            .collect();
        let _ = write!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
            path.join(" ")
        );
    }
    // Legend.
    for (i, s) in series.iter().enumerate() {
        let color = color_for(s.formulation);
        let y = top + 10.0 + 18.0 * i as f64;
        let _ = write!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
             stroke=\"{color}\" stroke-width=\"1.8\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\">{}</text>\n",
            left + plot_w - 90.0,
            left + plot_w - 60.0,
            left + plot_w - 52.0,
            y + 4.0,
            s.formulation.code()
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn plot_series(
    cfg: &ExperimentConfig,
    rows: &[AggregateRow],
    pick: impl Fn(&AggregateRow) -> (f64, f64),
) -> Vec<Series> {
    cfg.unique_formulations()
        .into_iter()
        .filter_map(|f| {
            let mut mean = Vec::new();
            let mut std = Vec::new();
            for r in rows.iter().filter(|r| r.formulation == f) {
                let (m, s) = pick(r);
                mean.push(m);
                std.push(s);
            }
            if mean.is_empty() {
                None
            } else {
                Some(Series { formulation: f, mean, std })
            }
        })
        .collect()
}

/// Writes results.csv, aggregates.csv, bounds.csv (when bound reporting ran),
/// metadata.json, and the two regret plots. Returns the created paths.
pub fn emit_outputs(
    cfg: &ExperimentConfig,
    campaign: &CampaignResult,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if cfg.unique_formulations().is_empty() {
        return Err(MfError::InvalidInput("no formulations requested".into()));
    }
    if campaign.trials.is_empty() {
        return Err(MfError::InvalidInput("campaign produced no trials".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, content: String| -> Result<()> {
        let path = out_dir.join(name);
        std::fs::write(&path, content)?;
        written.push(path);
        Ok(())
    };

    emit("results.csv", results_csv(cfg, &campaign.trials))?;
    emit("aggregates.csv", aggregates_csv(&campaign.aggregates))?;
    if let Some(text) = bounds_csv(&campaign.trials) {
        emit("bounds.csv", text)?;
    }
    emit("metadata.json", metadata_json(cfg, campaign)?)?;
    emit(
        "best_regret.svg",
        regret_plot(
            "Best instantaneous regret (mean \u{00b1} 1 std)",
            "best regret",
            &plot_series(cfg, &campaign.aggregates, |r| (r.best_mean, r.best_std)),
        ),
    )?;
    emit(
        "cumulative_regret.svg",
        regret_plot(
            "Cumulative regret (mean \u{00b1} 1 std)",
            "cumulative regret",
            &plot_series(cfg, &campaign.aggregates, |r| (r.cum_mean, r.cum_std)),
        ),
    )?;
    Ok(written)
}
