//! Browser bindings: prompt rendering, an in-memory simulated sweep and the three tests.
//!
//! Everything is single-threaded and touches no filesystem, so it runs unchanged on
//! `wasm32-unknown-unknown`. Errors surface as plain strings.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use cicl_core::analysis::{kruskal_wallis, macro_f1, mean, shapiro_wilk, std_dev, wilcoxon_signed_rank, StatResult};
use cicl_core::datamodel::{Example, LabelSet, Mode};
use cicl_core::modelclient::{BackendDescriptor, BackendKind, SimBackend};
use cicl_core::prompting::{build_cicl_prompt, build_icl_prompt};
use cicl_core::runner::{run_cicl_cell, run_icl_cell, seeded_subset, CellContext, CellOptions};
use cicl_core::selection::{classify_pool, sample_fewshot, SampleOptions};

const PROPORTIONS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
const DEMO_LABELS: [&str; 4] = ["negative", "neutral", "positive", "mixed"];
const WORDS: [&str; 10] = [
    "battery", "screen", "delivery", "price", "support", "camera", "strap", "manual", "speaker", "charger",
];

/// Renders the ICL or CICL prompt for hand-entered exemplars.
///
/// `exemplars` holds one exemplar per line as `text | gold` (ICL) or `text | predicted | gold` (CICL).
/// `labels` is comma separated.
#[wasm_bindgen]
pub fn render_prompt(
    mode: &str,
    exemplars: &str,
    query: &str,
    query_predicted: &str,
    labels: &str,
) -> Result<String, String> {
    let mode: Mode = mode.parse()?;
    let labels =
        LabelSet::new(labels.split(',').map(str::trim).filter(|l| !l.is_empty())).map_err(|e| e.to_string())?;
    let rows: Vec<Vec<&str>> = exemplars
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split('|').map(str::trim).collect())
        .collect();
    let want = if mode == Mode::Icl { 2 } else { 3 };
    for (i, r) in rows.iter().enumerate() {
        if r.len() != want {
            return Err(format!("line {}: expected {want} fields separated by '|'", i + 1));
        }
        for l in &r[1..] {
            if !labels.contains(l) {
                return Err(format!("line {}: unknown label {l:?}", i + 1));
            }
        }
    }
    let prompt = match mode {
        Mode::Icl => build_icl_prompt(rows.iter().map(|r| (r[0], r[1])), query, &labels),
        Mode::Cicl => {
            if !labels.contains(query_predicted.trim()) {
                return Err(format!("query prediction {:?} is not a label", query_predicted.trim()));
            }
            build_cicl_prompt(
                rows.iter().map(|r| (r[0], r[1], r[2])),
                query,
                query_predicted.trim(),
                &labels,
            )
        }
    };
    Ok(prompt.rendered_text)
}

fn synthetic_split(prefix: &str, n: usize, offset: usize) -> Vec<Example> {
    (0..n)
        .map(|i| {
            let j = i + offset;
            let label = DEMO_LABELS[[0, 0, 0, 1, 1, 2, 2, 2, 2, 3][j % 10]];
            let text = format!(
                "the {} and the {} were {label}-ish (#{j})",
                WORDS[j % 10],
                WORDS[(j * 7 + 3) % 10]
            );
            Example::new(format!("{prefix}-{j:04}"), text, label)
        })
        .collect()
}

/// Runs a full ICL vs CICL grid against a simulated model, all in memory.
///
/// `backend` is `sim-noisy`, `sim-copy` or `sim-oracle`. Returns JSON with one row per proportion.
#[wasm_bindgen]
pub fn simulate_sweep(
    backend: &str,
    accuracy: f64,
    copy_probability: f64,
    k: usize,
    seeds: usize,
    n_eval: usize,
) -> Result<String, String> {
    let kind = match backend {
        "sim-noisy" => BackendKind::SimNoisy,
        "sim-copy" => BackendKind::SimCopy,
        "sim-oracle" => BackendKind::SimOracle,
        other => return Err(format!("unknown backend {other:?}")),
    };
    if !(2..=16).contains(&k) || !k.is_multiple_of(4) {
        return Err("k must be 4, 8, 12 or 16".into());
    }
    if !(1..=10).contains(&seeds) || !(1..=400).contains(&n_eval) {
        return Err("seeds must be 1..10 and the eval size 1..400".into());
    }
    let mut desc = BackendDescriptor::sim(kind);
    desc.accuracy = accuracy;
    desc.copy_probability = copy_probability;
    desc.validate().map_err(|e| e.to_string())?;
    let model = SimBackend::new(&desc).map_err(|e| e.to_string())?;
    let labels = LabelSet::new(DEMO_LABELS).map_err(|e| e.to_string())?;
    let train = synthetic_split("tr", 160, 0);
    let queries = synthetic_split("te", n_eval, 10_000);
    let cell_opts = CellOptions {
        workers: 1,
        error_budget: 0,
    };

    // f1[mode][proportion] over seeds
    let mut f1 = [vec![Vec::new(); PROPORTIONS.len()], vec![Vec::new(); PROPORTIONS.len()]];
    for seed in 0..seeds as u64 {
        let pool_ex = seeded_subset(&train, 120, "pool", &[b"demo", &seed.to_le_bytes()]);
        let pool = classify_pool(&pool_ex, &labels, &model, k, seed, 1).map_err(|e| e.to_string())?;
        for (pi, &p) in PROPORTIONS.iter().enumerate() {
            let fewshot = sample_fewshot(&pool, k, p, seed, &labels, &model, SampleOptions::default())
                .map_err(|e| format!("{:.0}% corrected: {e}", p * 100.0))?;
            let ctx = CellContext {
                dataset: "demo".into(),
                backend: desc.backend_id(),
                seed,
                proportion: p,
                k,
            };
            let icl = run_icl_cell(&ctx, &labels, &model, &fewshot, &queries, cell_opts).map_err(|e| e.to_string())?;
            let cicl =
                run_cicl_cell(&ctx, &labels, &model, &fewshot, &queries, &icl, cell_opts).map_err(|e| e.to_string())?;
            for (m, recs) in [&icl, &cicl].into_iter().enumerate() {
                let gold: Vec<&str> = recs.iter().map(|r| r.gold_label.as_str()).collect();
                let pred: Vec<&str> = recs.iter().map(|r| r.predicted_label.as_str()).collect();
                f1[m][pi].push(macro_f1(&gold, &pred).map_err(|e| e.to_string())?);
            }
        }
    }

    let rows: Vec<Value> = PROPORTIONS
        .iter()
        .enumerate()
        .map(|(pi, &p)| {
            let (icl, cicl) = (&f1[0][pi], &f1[1][pi]);
            json!({
                "proportion": p,
                "icl_mean": mean(icl),
                "icl_std": std_dev(icl),
                "cicl_mean": mean(cicl),
                "cicl_std": std_dev(cicl),
                "wilcoxon": stat_json(wilcoxon_signed_rank(icl, cicl)),
            })
        })
        .collect();
    let out = json!({
        "backend": desc.backend_id(),
        "k": k,
        "seeds": seeds,
        "rows": rows,
        "kruskal_icl": stat_json(kruskal_wallis(&f1[0])),
        "kruskal_cicl": stat_json(kruskal_wallis(&f1[1])),
    });
    Ok(out.to_string())
}

fn stat_json<E: std::fmt::Display>(r: Result<StatResult, E>) -> Value {
    match r {
        Ok(s) => json!({ "statistic": s.statistic, "p_value": s.p_value, "n": s.n, "exact": s.exact }),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

fn parse_numbers(line: &str) -> Result<Vec<f64>, String> {
    line.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("not a number: {t:?}")))
        .collect()
}

/// Runs one test on whitespace/comma separated numbers, one sample per line.
///
/// `wilcoxon` takes two lines (paired samples), `kruskal` two or more, `shapiro` one.
#[wasm_bindgen]
pub fn run_stats(test: &str, input: &str) -> Result<String, String> {
    let samples: Vec<Vec<f64>> = input
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(parse_numbers)
        .collect::<Result<_, _>>()?;
    let result = match (test, samples.as_slice()) {
        ("wilcoxon", [a, b]) => wilcoxon_signed_rank(a, b),
        ("wilcoxon", _) => return Err("Wilcoxon needs exactly two lines".into()),
        ("kruskal", groups) if groups.len() >= 2 => kruskal_wallis(groups),
        ("kruskal", _) => return Err("Kruskal-Wallis needs at least two lines".into()),
        ("shapiro", [x]) => shapiro_wilk(x),
        ("shapiro", _) => return Err("Shapiro-Wilk takes one line".into()),
        (other, _) => return Err(format!("unknown test {other:?}")),
    };
    let r = result.map_err(|e| e.to_string())?;
    Ok(stat_json::<String>(Ok(r)).to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_both_prompt_shapes() {
        let icl = render_prompt(
            "icl",
            "good phone | positive\nbroke fast | negative",
            "fine I guess",
            "",
            "positive,negative",
        )
        .unwrap();
        assert_eq!(
            icl,
            "Text: good phone\nLabel: positive\n\nText: broke fast\nLabel: negative\n\nText: fine I guess\nLabel:"
        );
        let cicl = render_prompt(
            "cicl",
            "broke fast | positive | negative",
            "meh",
            "negative",
            "positive, negative",
        )
        .unwrap();
        assert_eq!(
            cicl,
            "Text: broke fast\nPredicted label: positive\nCorrect label: negative\n\nText: meh\nPredicted label: negative\nCorrect label:"
        );
    }

    #[test]
    fn prompt_input_errors_are_messages() {
        assert!(render_prompt("icl", "a | b | c", "q", "", "b,c")
            .unwrap_err()
            .contains("line 1"));
        assert!(render_prompt("icl", "a | zzz", "q", "", "b,c")
            .unwrap_err()
            .contains("unknown label"));
        assert!(render_prompt("cicl", "a | b | c", "q", "nope", "b,c").is_err());
        assert!(render_prompt("zero", "", "q", "", "b").is_err());
    }

    #[test]
    fn copy_model_curves_coincide() {
        let out: Value = serde_json::from_str(&simulate_sweep("sim-copy", 0.7, 1.0, 8, 3, 60).unwrap()).unwrap();
        for row in out["rows"].as_array().unwrap() {
            assert_eq!(row["icl_mean"], row["cicl_mean"]);
            assert!(row["wilcoxon"]["error"].is_string());
        }
    }

    #[test]
    fn oracle_pool_has_nothing_to_correct() {
        // A perfect model misclassifies no pool item, so only 0% is drawable.
        let err = simulate_sweep("sim-oracle", 0.7, 1.0, 4, 2, 20).unwrap_err();
        assert!(err.starts_with("25% corrected"), "{err}");
    }

    #[test]
    fn sweep_rejects_bad_arguments() {
        assert!(simulate_sweep("gpt", 0.7, 1.0, 8, 3, 60).is_err());
        assert!(simulate_sweep("sim-noisy", 0.7, 1.0, 6, 3, 60).is_err());
        assert!(simulate_sweep("sim-noisy", 1.5, 1.0, 8, 3, 60).is_err());
    }

    #[test]
    fn stats_on_known_inputs() {
        let w: Value = serde_json::from_str(&run_stats("wilcoxon", "1 2 3 4 5\n0 0 0 0 0").unwrap()).unwrap();
        assert_eq!(w["p_value"], 0.0625);
        let kw: Value = serde_json::from_str(&run_stats("kruskal", "1,2,3\n4,5,6\n7,8,9").unwrap()).unwrap();
        assert!((kw["statistic"].as_f64().unwrap() - 7.2).abs() < 1e-12);
        let sw: Value = serde_json::from_str(&run_stats("shapiro", "1 2 4").unwrap()).unwrap();
        assert!((sw["statistic"].as_f64().unwrap() - 0.9642857142857142).abs() < 1e-9);
        assert!(run_stats("shapiro", "1 x").is_err());
        assert!(run_stats("wilcoxon", "1 2").is_err());
    }
}
