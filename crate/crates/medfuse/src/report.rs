//! Structured-text outputs: one JSON object per line, tagged by `kind`.

use medfuse_core::gradcheck::ModuleReport;
use medfuse_core::metrics::{KmCurve, MetricReport};
use medfuse_core::train::{AttentionSummary, EvalReport, HistoryEntry};
use serde_json::{json, Value};

fn metric(task: &str, subset: &str, m: &MetricReport) -> Value {
    let (lower, upper) = match m.ci {
        Some((l, u)) => (json!(l), json!(u)),
        None => (Value::Null, Value::Null),
    };
    json!({
        "kind": "metric",
        "task": task,
        "modalities": subset,
        "metric": m.name,
        "point": m.point,
        "lower": lower,
        "upper": upper,
        "n": m.n,
        "resamples": m.resamples,
        "seed": m.seed,
    })
}

fn km(group: &str, c: &KmCurve) -> Value {
    json!({
        "kind": "km",
        "group": group,
        "times": c.times,
        "survival": c.survival,
        "at_risk": c.at_risk,
        "deaths": c.deaths,
    })
}

/// Metric lines followed by any Kaplan-Meier curves.
pub fn eval_lines(report: &EvalReport, subset: &str) -> Vec<String> {
    let task = report.task.name();
    report
        .metrics
        .iter()
        .map(|m| metric(task, subset, m))
        .chain(report.km.iter().map(|(g, c)| km(g, c)))
        .map(|v| v.to_string())
        .collect()
}

pub fn history_line(h: &HistoryEntry) -> String {
    json!({
        "kind": "history",
        "step": h.step,
        "loss": h.loss,
        "val_metric": h.val_metric,
        "lr": h.lr,
    })
    .to_string()
}

pub fn attention_lines(summary: &AttentionSummary) -> Vec<String> {
    let tags = |b: &[medfuse_core::fusion::BlockTag]| b.iter().map(|t| t.to_string()).collect::<Vec<_>>();
    let rows = summary.rows.iter().map(|r| {
        json!({
            "kind": "attention",
            "id": r.id,
            "predicted": r.predicted,
            "blocks": tags(&r.blocks),
            "guidance": r.guidance,
            "decoder": r.decoder,
        })
    });
    let means = summary.means.iter().map(|m| {
        json!({
            "kind": "attention_mean",
            "predicted": m.predicted,
            "count": m.count,
            "blocks": tags(&m.blocks),
            "guidance": m.guidance,
            "decoder": m.decoder,
        })
    });
    rows.chain(means).map(|v| v.to_string()).collect()
}

pub fn gradcheck_line(r: &ModuleReport) -> String {
    let worst = r
        .cases
        .iter()
        .filter_map(|c| c.report.worst().map(|(p, e)| (format!("{}/{}", c.case, p), e)))
        .max_by(|a, b| a.1.total_cmp(&b.1));
    json!({
        "kind": "gradcheck",
        "module": r.module.name(),
        "cases": r.cases.len(),
        "params": r.param_count(),
        "max_rel_err": r.max_rel_err(),
        "worst": worst.map(|w| w.0),
        "passed": r.passed(),
    })
    .to_string()
}

/// Ranked gallery ids for one query.
pub fn retrieval_line(query: &str, direction: &str, ranked: &[(String, f64)]) -> String {
    json!({
        "kind": "retrieval",
        "query": query,
        "direction": direction,
        "ranked": ranked.iter().map(|(id, s)| json!({"id": id, "score": s})).collect::<Vec<_>>(),
    })
    .to_string()
}
