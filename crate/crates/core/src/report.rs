//! Structured analysis reports and protocol alerts.
//!
//! The markdown layout is fixed: an optional Alert Box, then Executive
//! Summary, Statistical Overview, Spatial Pattern Analysis, Physical Insights &
//! Conclusion and Provenance. Every number in the markdown is printed with
//! exactly four decimals; identifiers that happen to contain digits (units,
//! chunk ids, seeds, hashes) are set as inline code. A JSON sidecar keeps
//! every value at full precision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldError, FieldStats, FlowState, UnitConversion};
use crate::knowledge::{Comparator, ThresholdRule};

pub const INSUFFICIENT_DATA: &str = "insufficient data";
pub const NOT_AVAILABLE: &str = "n/a";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("rule `{chunk}` compares {variable} in `{rule_unit}` but the field is in `{field_unit}`")]
    IncomparableUnits {
        chunk: String,
        variable: String,
        rule_unit: String,
        field_unit: String,
    },
    #[error(transparent)]
    Field(#[from] FieldError),
}

pub type Result<T> = std::result::Result<T, ReportError>;

/// Pooled statistics of one variable over a set of states, in its own unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSummary {
    pub variable: String,
    pub unit: String,
    pub stats: FieldStats,
    /// Mean ensemble spread, when the states come from an ensemble.
    pub mean_spread: Option<f64>,
}

/// Statistics of each channel pooled over all cells of all `states`, in the
/// channel order of the first state. Non-finite cells are skipped.
pub fn summarize(states: &[FlowState]) -> Vec<VariableSummary> {
    let Some(first) = states.first() else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for ch in &first.channels {
        let values: Vec<f64> = states
            .iter()
            .filter_map(|s| s.channel(ch.name()))
            .flat_map(|f| f.values().iter().copied())
            .filter(|v| v.is_finite())
            .collect();
        if values.is_empty() {
            continue;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let (min, max) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        out.push(VariableSummary {
            variable: ch.name().to_string(),
            unit: ch.unit().to_string(),
            stats: FieldStats {
                mean: mean.clamp(min, max),
                min,
                max,
                std,
            },
            mean_spread: None,
        });
    }
    out
}

/// Attaches pooled mean spread from matching spread states.
pub fn attach_spread(summaries: &mut [VariableSummary], spread: &[FlowState]) {
    for s in summaries {
        let fields: Vec<f64> = spread
            .iter()
            .filter_map(|st| st.channel(&s.variable))
            .map(|f| f.mean())
            .collect();
        if !fields.is_empty() {
            s.mean_spread = Some(fields.iter().sum::<f64>() / fields.len() as f64);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extremum {
    Max,
    Min,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertBox {
    pub chunk_id: String,
    pub variable: String,
    pub statistic: Extremum,
    /// Observed extremum converted into the rule unit.
    pub observed: f64,
    pub comparator: Comparator,
    pub threshold: f64,
    pub unit: String,
    pub directive: String,
}

/// Evaluates each rule against the extremal statistic of its variable: the
/// maximum for `>` rules, the minimum for `<`. Rules on variables absent from
/// `stats` are skipped.
pub fn alerts_from_stats(stats: &[VariableSummary], rules: &[(String, ThresholdRule)]) -> Result<Vec<AlertBox>> {
    let mut out = Vec::new();
    for (chunk, rule) in rules {
        let Some(s) = stats.iter().find(|s| s.variable == rule.variable) else {
            continue;
        };
        let conv = UnitConversion::between(&s.unit, &rule.unit).map_err(|_| ReportError::IncomparableUnits {
            chunk: chunk.clone(),
            variable: rule.variable.clone(),
            rule_unit: rule.unit.clone(),
            field_unit: s.unit.clone(),
        })?;
        let (statistic, raw) = match rule.op {
            Comparator::Greater => (Extremum::Max, s.stats.max),
            Comparator::Less => (Extremum::Min, s.stats.min),
        };
        let observed = conv.value(raw);
        if rule.op.triggers(observed, rule.value) {
            out.push(AlertBox {
                chunk_id: chunk.clone(),
                variable: rule.variable.clone(),
                statistic,
                observed,
                comparator: rule.op,
                threshold: rule.value,
                unit: rule.unit.clone(),
                directive: rule.directive.clone(),
            });
        }
    }
    Ok(out)
}

pub fn trigger_alerts(states: &[FlowState], rules: &[(String, ThresholdRule)]) -> Result<Vec<AlertBox>> {
    alerts_from_stats(&summarize(states), rules)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub episode_id: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub policy: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub title: String,
    pub executive_summary: Option<String>,
    pub statistics: Vec<VariableSummary>,
    pub spatial_pattern_analysis: Option<String>,
    pub insights_conclusion: Option<String>,
    pub alerts: Vec<AlertBox>,
    /// Rules the alerts were evaluated against.
    pub rules: Vec<(String, ThresholdRule)>,
    pub provenance: Provenance,
}

/// Display unit per variable; conversions that do not exist are ignored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub units: BTreeMap<String, String>,
}

impl RenderOptions {
    /// Pressure in hPa, everything else native.
    pub fn weather() -> Self {
        let mut units = BTreeMap::new();
        units.insert("pressure".to_string(), "hPa".to_string());
        Self { units }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedReport {
    pub markdown: String,
    pub sidecar: String,
}

fn code(s: &str) -> String {
    format!("`{}`", s.replace('`', "'"))
}

fn section(md: &mut String, title: &str, body: Option<&str>) {
    md.push_str("## ");
    md.push_str(title);
    md.push_str("\n\n");
    match body.map(str::trim).filter(|b| !b.is_empty()) {
        Some(b) => md.push_str(b),
        None => md.push_str(NOT_AVAILABLE),
    }
    md.push_str("\n\n");
}

pub fn render_report(report: &AnalysisReport, opts: &RenderOptions) -> RenderedReport {
    let mut md = String::new();
    md.push_str(&format!("# Analysis Report: {}\n\n", report.title));
    if !report.alerts.is_empty() {
        md.push_str("## Alert Box\n\n");
        for a in &report.alerts {
            md.push_str(&format!(
                "> **ALERT** {}: {} {} {:.4} {} {:.4} {}. Directive: **{}**.\n",
                code(&a.chunk_id),
                match a.statistic {
                    Extremum::Max => "max",
                    Extremum::Min => "min",
                },
                code(&a.variable),
                a.observed,
                a.comparator.symbol(),
                a.threshold,
                code(&a.unit),
                a.directive
            ));
        }
        md.push('\n');
    }
    section(&mut md, "Executive Summary", report.executive_summary.as_deref());

    let table = if report.statistics.is_empty() {
        None
    } else {
        let mut t = String::from("| Variable | Unit | Mean | Min | Max | Std | Mean spread |\n|---|---|---|---|---|---|---|\n");
        for s in &report.statistics {
            let (unit, conv) = match opts.units.get(&s.variable) {
                Some(u) => match UnitConversion::between(&s.unit, u) {
                    Ok(c) => (u.as_str(), c),
                    Err(_) => (s.unit.as_str(), UnitConversion::IDENTITY),
                },
                None => (s.unit.as_str(), UnitConversion::IDENTITY),
            };
            let spread = s
                .mean_spread
                .map(|v| format!("{:.4}", conv.spread(v)))
                .unwrap_or_else(|| NOT_AVAILABLE.to_string());
            t.push_str(&format!(
                "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {} |\n",
                code(&s.variable),
                code(unit),
                conv.value(s.stats.mean),
                conv.value(s.stats.min),
                conv.value(s.stats.max),
                conv.spread(s.stats.std),
                spread
            ));
        }
        Some(t)
    };
    section(&mut md, "Statistical Overview", table.as_deref());
    section(&mut md, "Spatial Pattern Analysis", report.spatial_pattern_analysis.as_deref());
    section(&mut md, "Physical Insights & Conclusion", report.insights_conclusion.as_deref());

    let p = &report.provenance;
    let seeds = if p.seeds.is_empty() {
        NOT_AVAILABLE.to_string()
    } else {
        p.seeds.iter().map(|s| code(&format!("{s:#018x}"))).collect::<Vec<_>>().join(", ")
    };
    let prov = format!(
        "- Episode: {}\n- Policy: {}\n- Config hash: {}\n- Seeds: {}",
        code(&p.episode_id),
        code(&p.policy),
        code(&p.config_hash),
        seeds
    );
    section(&mut md, "Provenance", Some(&prov));
    let md = md.trim_end().to_string() + "\n";
    let sidecar = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
    RenderedReport { markdown: md, sidecar }
}

/// Replaces every numeral in model-written text so that all numbers in the
/// report come from computed statistics.
pub fn redact_numbers(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_ascii_digit() {
            while i < chars.len()
                && (chars[i].is_ascii_digit()
                    || ((chars[i] == '.' || chars[i] == ',')
                        && chars.get(i + 1).is_some_and(|c| c.is_ascii_digit())))
            {
                i += 1;
            }
            out.push_str("[value]");
        } else {
            out.push(chars[i]);
            i += 1;
        }
    }
    out
}

/// Numbers in `markdown` outside inline code that are not written with
/// exactly four decimals.
pub fn non_conforming_numbers(markdown: &str) -> Vec<String> {
    let mut plain = String::new();
    let mut in_code = false;
    for c in markdown.chars() {
        if c == '`' {
            in_code = !in_code;
            plain.push(' ');
        } else if !in_code {
            plain.push(c);
        }
    }
    let chars: Vec<char> = plain.chars().collect();
    let mut bad = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_ascii_digit() {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            let token: String = chars[start..i].iter().collect();
            let token = token.trim_end_matches('.');
            let ok = match token.split_once('.') {
                Some((int, frac)) => !int.is_empty() && frac.len() == 4 && frac.chars().all(|c| c.is_ascii_digit()),
                None => false,
            };
            let preceded_by_letter = start > 0 && (chars[start - 1].is_alphabetic() || chars[start - 1] == '_');
            if !ok && !preceded_by_letter {
                bad.push(token.to_string());
            }
        } else {
            i += 1;
        }
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{GridSpec, ScalarField, Variable};
    use proptest::prelude::*;

    fn wave_rule() -> (String, ThresholdRule) {
        (
            "prot-wave-height".to_string(),
            ThresholdRule {
                variable: "wave_height".into(),
                op: Comparator::Greater,
                value: 5.0,
                unit: "m".into(),
                directive: "suspend flight routes".into(),
            },
        )
    }

    fn wave_state(peak: f64) -> FlowState {
        let g = GridSpec::square(16).unwrap();
        let f = ScalarField::from_fn(g, Variable::new("wave_height", "m"), |x, y| {
            2.0 + (peak - 2.0) * (x.sin() * y.sin()).max(0.0)
        });
        let mut st = FlowState::new(g, 0.0).with_channel(f).unwrap();
        // Pin the maximum exactly.
        let v = st.channel_mut("wave_height").unwrap();
        let k = v.values().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        v.values_mut()[k] = peak;
        st
    }

    fn minimal(stats: Vec<VariableSummary>) -> AnalysisReport {
        AnalysisReport {
            title: "test".into(),
            executive_summary: None,
            statistics: stats,
            spatial_pattern_analysis: None,
            insights_conclusion: None,
            alerts: vec![],
            rules: vec![],
            provenance: Provenance {
                episode_id: "ep-0".into(),
                config_hash: "sha256:00".into(),
                seeds: vec![1, 2],
                policy: "scripted:golden".into(),
            },
        }
    }

    #[test]
    fn wave_height_above_five_metres_triggers() {
        let alerts = trigger_alerts(&[wave_state(5.2)], &[wave_rule()]).unwrap();
        assert_eq!(alerts.len(), 1);
        assert_eq!(alerts[0].directive, "suspend flight routes");
        assert_eq!(alerts[0].observed, 5.2);
        assert_eq!(alerts[0].statistic, Extremum::Max);
    }

    #[test]
    fn at_or_below_threshold_is_quiet() {
        assert!(trigger_alerts(&[wave_state(4.9)], &[wave_rule()]).unwrap().is_empty());
        assert!(trigger_alerts(&[wave_state(5.0)], &[wave_rule()]).unwrap().is_empty());
    }

    #[test]
    fn rules_compare_in_converted_units() {
        let g = GridSpec::square(8).unwrap();
        let p = ScalarField::constant(g, Variable::new("pressure", "Pa"), 97_000.0);
        let st = FlowState::new(g, 0.0).with_channel(p).unwrap();
        let rule = ThresholdRule {
            variable: "pressure".into(),
            op: Comparator::Less,
            value: 980.0,
            unit: "hPa".into(),
            directive: "warn".into(),
        };
        let a = trigger_alerts(std::slice::from_ref(&st), &[("r".into(), rule.clone())]).unwrap();
        assert_eq!(a.len(), 1);
        assert!((a[0].observed - 970.0).abs() < 1e-9);
        assert_eq!(a[0].statistic, Extremum::Min);
        let bad = ThresholdRule { unit: "m".into(), ..rule };
        assert!(matches!(trigger_alerts(&[st], &[("r".into(), bad)]), Err(ReportError::IncomparableUnits { .. })));
    }

    #[test]
    fn minimal_report_marks_empty_sections() {
        let r = render_report(&minimal(vec![]), &RenderOptions::default());
        for h in ["## Executive Summary", "## Statistical Overview", "## Spatial Pattern Analysis", "## Physical Insights & Conclusion"] {
            let at = r.markdown.find(h).unwrap_or_else(|| panic!("{h}"));
            assert!(r.markdown[at + h.len()..].trim_start().starts_with(NOT_AVAILABLE));
        }
        assert!(!r.markdown.contains("Alert Box"));
    }

    #[test]
    fn sections_follow_the_template_order() {
        let mut rep = minimal(summarize(&[wave_state(5.2)]));
        rep.alerts = alerts_from_stats(&rep.statistics, &[wave_rule()]).unwrap();
        let md = render_report(&rep, &RenderOptions::default()).markdown;
        let order = ["## Alert Box", "## Executive Summary", "## Statistical Overview", "## Spatial Pattern Analysis", "## Physical Insights & Conclusion", "## Provenance"];
        let pos: Vec<usize> = order.iter().map(|h| md.find(h).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(md.contains("suspend flight routes"));
    }

    #[test]
    fn pressure_renders_in_hectopascals() {
        let s = VariableSummary {
            variable: "pressure".into(),
            unit: "Pa".into(),
            stats: FieldStats { mean: 101_325.0, min: 101_000.0, max: 101_500.0, std: 120.0 },
            mean_spread: Some(50.0),
        };
        let md = render_report(&minimal(vec![s]), &RenderOptions::weather()).markdown;
        assert!(md.contains("| `pressure` | `hPa` | 1013.2500 | 1010.0000 | 1015.0000 | 1.2000 | 0.5000 |"), "{md}");
    }

    #[test]
    fn markdown_numbers_have_four_decimals() {
        let mut rep = minimal(summarize(&[wave_state(5.2)]));
        rep.alerts = alerts_from_stats(&rep.statistics, &[wave_rule()]).unwrap();
        rep.executive_summary = Some(format!("Peak {:.4} with {}", 5.2, redact_numbers("22% surge in 2 days")));
        let md = render_report(&rep, &RenderOptions::default()).markdown;
        assert!(non_conforming_numbers(&md).is_empty(), "{:?}", non_conforming_numbers(&md));
        assert_eq!(non_conforming_numbers("value 3 and 2.50"), vec!["3", "2.50"]);
    }

    #[test]
    fn sidecar_mirrors_full_precision() {
        let rep = minimal(summarize(&[wave_state(5.2)]));
        let r = render_report(&rep, &RenderOptions::default());
        let back: AnalysisReport = serde_json::from_str(&r.sidecar).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn narrative_numbers_are_redacted() {
        assert_eq!(redact_numbers("S = 0.78 and +22% in 2024"), "S = [value] and +[value]% in [value]");
        assert_eq!(redact_numbers("no digits"), "no digits");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn alerts_are_sound_and_complete(peak in 0.0f64..10.0, floor in 0.0f64..2.0, threshold in 0.0f64..10.0) {
            let g = GridSpec::square(8).unwrap();
            let f = ScalarField::from_fn(g, Variable::new("wave_height", "m"), |x, _| floor + (peak - floor) * (0.5 + 0.5 * x.sin()));
            let st = FlowState::new(g, 0.0).with_channel(f).unwrap();
            let rules = vec![
                ("hi".to_string(), ThresholdRule { variable: "wave_height".into(), op: Comparator::Greater, value: threshold, unit: "m".into(), directive: "d".into() }),
                ("lo".to_string(), ThresholdRule { variable: "wave_height".into(), op: Comparator::Less, value: threshold, unit: "m".into(), directive: "d".into() }),
            ];
            let mut rep = minimal(summarize(&[st]));
            rep.alerts = alerts_from_stats(&rep.statistics, &rules).unwrap();
            rep.rules = rules.clone();
            let side: AnalysisReport = serde_json::from_str(&render_report(&rep, &RenderOptions::default()).sidecar).unwrap();
            let s = &side.statistics[0].stats;
            for a in &side.alerts {
                let obs = if a.comparator == Comparator::Greater { s.max } else { s.min };
                prop_assert!(a.comparator.triggers(obs, a.threshold));
            }
            for (id, r) in &side.rules {
                let obs = if r.op == Comparator::Greater { s.max } else { s.min };
                if r.op.triggers(obs, r.value) {
                    prop_assert!(side.alerts.iter().any(|a| &a.chunk_id == id));
                }
            }
        }
    }
}
