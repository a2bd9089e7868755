// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use anyhow::{bail, Context, Result};
use gim_core::attribution::{attribute_tokens, layer_attribution, LayerMethod, TokenMethod};
use gim_core::data::{generate, parse_jsonl, to_jsonl, DatasetRecord, Task};
use gim_core::faithfulness::{
    ablation_study, all_combinations, layer_faithfulness, paired_bootstrap, report_of,
    temperature_sweep, FaithfulnessReport, TokenAblation, DEGENERATE_LOGIT,
};
use gim_core::model::plant::{plant_weights, PlantKind, PlantParams};
use gim_core::model::{decode_weights, encode_weights, forward, LogitModel, Weights};
use gim_core::self_repair::{
    detect, full_forward_effects, scatter_csv, scatter_row, DetectionConfig, SelfRepairCase,
};
use gim_core::{GimError, GradientRuleSet};
use rayon::prelude::*;
use serde::Serialize;

use crate::cli::*;
use crate::output::{read_input, Run};

pub const WEIGHTS_FILE: &str = "weights.gimw";
pub const PLANT_FILE: &str = "plant.json";
pub const DATA_FILE: &str = "data.jsonl";

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenModel(a) => gen_model(&a),
        Command::GenData(a) => gen_data(&a),
        Command::Attribute(a) => attribute(&a),
        Command::SelfRepair(a) => self_repair(&a),
        Command::Faithfulness(a) => faithfulness(&a),
        Command::Circuit(a) => circuit(&a),
        Command::Ablation(a) => ablation(&a),
        Command::Sweep(a) => sweep(&a),
    }
}

fn gen_model(a: &GenModelArgs) -> Result<()> {
    let mut run = Run::new("gen-model", &a.out, a.seed)?;
    let seed = run.sub_seed("model");
    let kind = match a.plant {
        PlantArg::None => PlantKind::None,
        PlantArg::SelfRepair => PlantKind::SelfRepair,
        PlantArg::RoutedCircuit => PlantKind::RoutedCircuit,
    };
    let (weights, info) = plant_weights(&a.config.config(), kind, PlantParams::default(), seed)?;
    run.write(WEIGHTS_FILE, &encode_weights(&weights))?;
    if let Some(info) = info {
        run.write_json(PLANT_FILE, &info)?;
    }
    run.finish(a)
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut run = Run::new("gen-data", &a.out, a.seed)?;
    let (vocab, max_len) = match &a.weights {
        Some(path) => {
            let w = load_model(&mut run, path)?;
            (w.config.vocab_size, w.config.max_seq_len)
        }
        None => (a.vocab_size, a.max_seq_len),
    };
    let task = match a.task {
        TaskArg::CopyKey => Task::CopyKey,
        TaskArg::PlantedSentiment => Task::PlantedSentiment,
    };
    let seed = run.sub_seed("data");
    let records = generate(task, a.n, seed, vocab, max_len)?;
    run.write(DATA_FILE, to_jsonl(&records).as_bytes())?;
    run.set_items(records.len(), Vec::new());
    run.finish(a)
}

fn load_model(run: &mut Run, path: &Path) -> Result<Weights> {
    let bytes = read_input(path)?;
    run.input(path, &bytes);
    decode_weights(&bytes).with_context(|| format!("cannot load weights from {}", path.display()))
}

fn load_inputs(run: &mut Run, io: &IoArgs) -> Result<(Weights, Vec<DatasetRecord>)> {
    let weights = load_model(run, &io.weights)?;
    let bytes = read_input(&io.data)?;
    run.input(&io.data, &bytes);
    let text = std::str::from_utf8(&bytes)
        .with_context(|| format!("{} is not UTF-8", io.data.display()))?;
    let records = parse_jsonl(text, weights.config.vocab_size)
        .with_context(|| format!("cannot parse dataset {}", io.data.display()))?;
    if records.is_empty() {
        bail!("dataset {} has no records", io.data.display());
    }
    Ok((weights, records))
}

fn token_method(name: &str, r: &RuleArgs) -> Result<TokenMethod> {
    let rules = GradientRuleSet::from_flags(r.tsg, r.ln_freeze, r.grad_norm)?;
    let has_flags = rules != GradientRuleSet::STANDARD;
    let method = match name {
        "gxi" => TokenMethod::GradientXInput,
        "gim" => TokenMethod::Gim {
            temperature: r.temperature,
        },
        "ig" => TokenMethod::IntegratedGradients {
            steps: r.ig_steps,
            rules,
        },
        "custom" => TokenMethod::Custom { rules },
        other => bail!("unknown token method `{other}` (expected gxi, ig, gim or custom)"),
    };
    if has_flags
        && matches!(
            method,
            TokenMethod::GradientXInput | TokenMethod::Gim { .. }
        )
    {
        bail!("--tsg, --ln-freeze and --grad-norm apply only to --method custom or ig");
    }
    method.rules()?;
    Ok(method)
}

fn layer_method(name: &str, temperature: f64, ig_steps: usize) -> Result<LayerMethod> {
    let method = match name {
        "atp" => LayerMethod::Atp,
        "atp-star" => LayerMethod::AtpStar { temperature },
        "ig" => LayerMethod::IntegratedGradients { steps: ig_steps },
        "gim" => LayerMethod::Gim { temperature },
        other => bail!("unknown layer method `{other}` (expected atp, atp-star, ig or gim)"),
    };
    method.rules()?;
    Ok(method)
}

fn with_record<T>(r: &DatasetRecord, res: gim_core::Result<T>) -> Result<T> {
    res.with_context(|| format!("record `{}`", r.id))
}

#[derive(Serialize)]
struct AttributionLine<'a> {
    format_version: u32,
    id: &'a str,
    method: String,
    rules: GradientRuleSet,
    baseline_token: usize,
    target_token: usize,
    tokens: &'a [usize],
    scores: Vec<f64>,
}

fn attribute(a: &AttributeArgs) -> Result<()> {
    let mut run = Run::new("attribute", &a.io.out, a.io.seed)?;
    let (weights, records) = load_inputs(&mut run, &a.io)?;
    let method = token_method(&a.method, &a.rules)?;
    let lines = records
        .par_iter()
        .map(|r| {
            let res = attribute_tokens(
                &weights,
                &r.tokens,
                r.target_token,
                &method,
                a.rules.baseline_token,
            );
            let res = with_record(r, res)?;
            Ok(AttributionLine {
                format_version: 1,
                id: &r.id,
                method: res.method,
                rules: res.rules,
                baseline_token: res.baseline_token,
                target_token: r.target_token,
                tokens: &r.tokens,
                scores: res.scores,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    run.write_jsonl("attributions.jsonl", &lines)?;
    run.set_items(records.len(), Vec::new());
    run.finish(a)
}

#[derive(Serialize)]
struct CaseLine<'a> {
    id: &'a str,
    #[serde(flatten)]
    case: &'a SelfRepairCase,
    individual: [f64; 2],
    joint: f64,
    gradient_estimate: f64,
    tsg_estimate: f64,
}

#[derive(Serialize)]
struct FullForwardRow<'a> {
    id: &'a str,
    layer: usize,
    head: usize,
    qpos: usize,
    d_first: f64,
    d_second: f64,
    d_joint: f64,
}

fn self_repair(a: &SelfRepairArgs) -> Result<()> {
    let mut run = Run::new("self-repair", &a.io.out, a.io.seed)?;
    let (weights, records) = load_inputs(&mut run, &a.io)?;
    let cfg = DetectionConfig {
        top_fraction: a.top_fraction,
        significance: a.significance,
        cov_threshold: a.cov_threshold,
    };
    cfg.validate()?;
    gim_core::rules::SoftmaxRule::temperature_adjusted(a.temperature)?;
    let per_record = records
        .par_iter()
        .map(|r| {
            let trace = with_record(r, forward(&weights, &r.tokens))?;
            let cases = with_record(r, detect(&trace, r.target_token, &cfg))?;
            cases
                .into_iter()
                .map(|case| {
                    let cmp = with_record(r, case.compare(a.temperature))?;
                    let full = if a.full_forward {
                        Some(with_record(
                            r,
                            full_forward_effects(&weights, &r.tokens, r.target_token, &case),
                        )?)
                    } else {
                        None
                    };
                    Ok((case, cmp, full))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut scatter = Vec::new();
    let mut lines = Vec::new();
    let mut full_rows = Vec::new();
    for (r, cases) in records.iter().zip(&per_record) {
        for (case, cmp, full) in cases {
            scatter.push(scatter_row(r.id.clone(), case, cmp));
            lines.push(CaseLine {
                id: &r.id,
                case,
                individual: cmp.individual,
                joint: cmp.joint,
                gradient_estimate: cmp.gradient_estimate,
                tsg_estimate: cmp.tsg_estimate,
            });
            if let Some([d1, d2, dj]) = full {
                full_rows.push(FullForwardRow {
                    id: &r.id,
                    layer: case.layer,
                    head: case.head,
                    qpos: case.query,
                    d_first: *d1,
                    d_second: *d2,
                    d_joint: *dj,
                });
            }
        }
    }
    run.write("scatter.csv", scatter_csv(&scatter)?.as_bytes())?;
    run.write_jsonl("cases.jsonl", &lines)?;
    if a.full_forward {
        if full_rows.is_empty() {
            run.write(
                "full_forward.csv",
                b"id,layer,head,qpos,d_first,d_second,d_joint\n",
            )?;
        } else {
            run.write_csv("full_forward.csv", &full_rows)?;
        }
    }
    run.set_items(records.len(), Vec::new());
    run.finish(a)
}

#[derive(Serialize)]
struct ItemRow<'a> {
    id: &'a str,
    method: &'a str,
    mode: String,
    comprehensiveness: f64,
    sufficiency: f64,
}

#[derive(Serialize)]
struct LayerItemRow<'a> {
    id: &'a str,
    method: &'a str,
    layer: usize,
    comprehensiveness: f64,
    sufficiency: f64,
}

#[derive(Serialize)]
struct LayerSummaryRow<'a> {
    method: &'a str,
    layer: usize,
    mean_comprehensiveness: f64,
    mean_sufficiency: f64,
    n_items: usize,
}

#[derive(Serialize)]
struct Summary<'a> {
    method: &'a str,
    mode: &'a str,
    mean_comprehensiveness: f64,
    mean_sufficiency: f64,
    n_items: usize,
    n_skipped: usize,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Kept items paired with their records, plus ids of degenerate records.
type Partitioned<'a, T> = (Vec<(&'a DatasetRecord, T)>, Vec<String>);

/// Per-record layer scores and per-layer reports.
type LayerOutcome = (Vec<Vec<f64>>, Vec<FaithfulnessReport>);

/// Splits per-record results into kept items and the ids of degenerate ones.
fn partition<T>(
    records: &[DatasetRecord],
    results: Vec<gim_core::Result<T>>,
) -> Result<Partitioned<'_, T>> {
    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    for (r, res) in records.iter().zip(results) {
        match res {
            Ok(v) => kept.push((r, v)),
            Err(GimError::DegenerateInput(_)) => skipped.push(r.id.clone()),
            Err(e) => return Err(e).with_context(|| format!("record `{}`", r.id)),
        }
    }
    Ok((kept, skipped))
}

fn layer_reports(
    weights: &Weights,
    records: &[DatasetRecord],
    method: &LayerMethod,
) -> Vec<gim_core::Result<LayerOutcome>> {
    records
        .par_iter()
        .map(|r| {
            let attr = layer_attribution(weights, &r.tokens, r.target_token, method)?;
            let reports = layer_faithfulness(weights, &r.tokens, r.target_token, &attr)?;
            Ok((attr.scores, reports))
        })
        .collect()
}

fn write_layer_metrics(
    run: &mut Run,
    method: &str,
    n_layers: usize,
    kept: &[(&DatasetRecord, LayerOutcome)],
) -> Result<()> {
    let mut rows = Vec::new();
    for (r, (_, reports)) in kept {
        for (layer, rep) in reports.iter().enumerate() {
            rows.push(LayerItemRow {
                id: &r.id,
                method,
                layer,
                comprehensiveness: rep.comprehensiveness,
                sufficiency: rep.sufficiency,
            });
        }
    }
    let summary: Vec<LayerSummaryRow> = (0..n_layers)
        .map(|layer| LayerSummaryRow {
            method,
            layer,
            mean_comprehensiveness: mean(
                kept.iter()
                    .map(|(_, (_, rep))| rep[layer].comprehensiveness),
            ),
            mean_sufficiency: mean(kept.iter().map(|(_, (_, rep))| rep[layer].sufficiency)),
            n_items: kept.len(),
        })
        .collect();
    write_rows(
        run,
        "layer_items.csv",
        "id,method,layer,comprehensiveness,sufficiency\n",
        &rows,
    )?;
    write_rows(
        run,
        "layer_summary.csv",
        "method,layer,mean_comprehensiveness,mean_sufficiency,n_items\n",
        &summary,
    )
}

/// CSV with a fixed header even when there are no rows.
fn write_rows<R: Serialize>(run: &mut Run, name: &str, header: &str, rows: &[R]) -> Result<()> {
    if rows.is_empty() {
        run.write(name, header.as_bytes())
    } else {
        run.write_csv(name, rows)
    }
}

fn faithfulness(a: &FaithfulnessArgs) -> Result<()> {
    let mut run = Run::new("faithfulness", &a.io.out, a.io.seed)?;
    let (weights, records) = load_inputs(&mut run, &a.io)?;
    match a.mode {
        ModeArg::Token => {
            let method = token_method(&a.method, &a.rules)?;
            let baseline = a.rules.baseline_token;
            let results: Vec<_> = records
                .par_iter()
                .map(|r| {
                    let attr =
                        attribute_tokens(&weights, &r.tokens, r.target_token, &method, baseline)?;
                    let oracle = TokenAblation {
                        model: &weights,
                        tokens: &r.tokens,
                        target: r.target_token,
                        baseline_token: baseline,
                    };
                    report_of(&oracle, &attr.scores, method.name(), "token-baseline")
                })
                .collect();
            let (kept, skipped) = partition(&records, results)?;
            let rows: Vec<ItemRow> = kept
                .iter()
                .map(|(r, rep)| ItemRow {
                    id: &r.id,
                    method: method.name(),
                    mode: rep.mode.clone(),
                    comprehensiveness: rep.comprehensiveness,
                    sufficiency: rep.sufficiency,
                })
                .collect();
            write_rows(
                &mut run,
                "items.csv",
                "id,method,mode,comprehensiveness,sufficiency\n",
                &rows,
            )?;
            run.write_json(
                "summary.json",
                &Summary {
                    method: method.name(),
                    mode: "token",
                    mean_comprehensiveness: mean(rows.iter().map(|r| r.comprehensiveness)),
                    mean_sufficiency: mean(rows.iter().map(|r| r.sufficiency)),
                    n_items: rows.len(),
                    n_skipped: skipped.len(),
                },
            )?;
            run.set_items(records.len(), skipped);
        }
        ModeArg::Layer => {
            let method = layer_method(&a.method, a.rules.temperature, a.rules.ig_steps)?;
            let results = layer_reports(&weights, &records, &method);
            let (kept, skipped) = partition(&records, results)?;
            write_layer_metrics(&mut run, method.name(), weights.config.n_layers, &kept)?;
            run.set_items(records.len(), skipped);
        }
    }
    run.finish(a)
}

#[derive(Serialize)]
struct LayerScoreLine<'a> {
    format_version: u32,
    id: &'a str,
    method: &'a str,
    counterfactual: &'a str,
    target_token: usize,
    tokens: &'a [usize],
    scores: &'a [Vec<f64>],
}

fn circuit(a: &CircuitArgs) -> Result<()> {
    let mut run = Run::new("circuit", &a.io.out, a.io.seed)?;
    let (weights, records) = load_inputs(&mut run, &a.io)?;
    let method = layer_method(&a.method, a.temperature, a.ig_steps)?;
    let results = layer_reports(&weights, &records, &method);
    let (kept, skipped) = partition(&records, results)?;
    let lines: Vec<LayerScoreLine> = kept
        .iter()
        .map(|(r, (scores, _))| LayerScoreLine {
            format_version: 1,
            id: &r.id,
            method: method.name(),
            counterfactual: "positional-mean",
            target_token: r.target_token,
            tokens: &r.tokens,
            scores,
        })
        .collect();
    run.write_jsonl("layer_scores.jsonl", &lines)?;
    write_layer_metrics(&mut run, method.name(), weights.config.n_layers, &kept)?;
    run.set_items(records.len(), skipped);
    run.finish(a)
}

#[derive(Serialize)]
struct AblationCsvRow {
    combination: String,
    tsg: Option<f64>,
    ln_freeze: bool,
    grad_norm: bool,
    mean_comprehensiveness: f64,
    mean_sufficiency: f64,
    delta_comprehensiveness: f64,
    delta_sufficiency: f64,
    n_items: usize,
    n_skipped: usize,
}

#[derive(Serialize)]
struct BootstrapRow {
    combination: String,
    metric: &'static str,
    mean_difference: f64,
    lower: f64,
    upper: f64,
    confidence: f64,
    resamples: usize,
}

#[derive(Serialize)]
struct AblationItemRow<'a> {
    id: &'a str,
    combination: &'a str,
    comprehensiveness: f64,
    sufficiency: f64,
}

fn ablation(a: &AblationArgs) -> Result<()> {
    let mut run = Run::new("ablation", &a.io.out, a.io.seed)?;
    let (weights, records) = load_inputs(&mut run, &a.io)?;
    let eval_seed = run.sub_seed("eval");
    let combos = all_combinations(a.temperature);
    let rows = ablation_study(&weights, &records, &combos, a.baseline_token)?;
    let base = rows
        .iter()
        .find(|r| r.rules == GradientRuleSet::STANDARD)
        .context("ablation study is missing the plain gradient row")?;
    if base.items.ids.is_empty() {
        bail!("every record has a degenerate target logit; nothing to compare");
    }

    let mut table = Vec::new();
    let mut boot = Vec::new();
    let mut items = Vec::new();
    for (combo, row) in combos.iter().zip(&rows) {
        table.push(AblationCsvRow {
            combination: row.combination.clone(),
            tsg: combo.tsg,
            ln_freeze: combo.freeze,
            grad_norm: combo.grad_norm,
            mean_comprehensiveness: row.mean_comprehensiveness,
            mean_sufficiency: row.mean_sufficiency,
            delta_comprehensiveness: row.delta_comprehensiveness,
            delta_sufficiency: row.delta_sufficiency,
            n_items: row.items.ids.len(),
            n_skipped: row.items.skipped.len(),
        });
        for (metric, ours, theirs) in [
            (
                "comprehensiveness",
                &row.items.comprehensiveness,
                &base.items.comprehensiveness,
            ),
            (
                "sufficiency",
                &row.items.sufficiency,
                &base.items.sufficiency,
            ),
        ] {
            let ci = paired_bootstrap(ours, theirs, a.resamples, a.confidence, eval_seed)?;
            boot.push(BootstrapRow {
                combination: row.combination.clone(),
                metric,
                mean_difference: ci.mean,
                lower: ci.lower,
                upper: ci.upper,
                confidence: ci.confidence,
                resamples: ci.resamples,
            });
        }
        for (i, id) in row.items.ids.iter().enumerate() {
            items.push(AblationItemRow {
                id,
                combination: &row.combination,
                comprehensiveness: row.items.comprehensiveness[i],
                sufficiency: row.items.sufficiency[i],
            });
        }
    }
    run.write_csv("ablation.csv", &table)?;
    run.write_csv("bootstrap.csv", &boot)?;
    run.write_csv("items.csv", &items)?;
    run.set_items(records.len(), base.items.skipped.clone());
    run.finish(a)
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let mut run = Run::new("sweep", &a.io.out, a.io.seed)?;
    let (weights, records) = load_inputs(&mut run, &a.io)?;
    if a.temperatures.is_empty() {
        bail!("--temperatures must list at least one value");
    }
    let rows = temperature_sweep(&weights, &records, &a.temperatures, a.baseline_token)?;
    run.write_csv("sweep.csv", &rows)?;
    let skipped = records
        .par_iter()
        .map(|r| {
            let x = weights.embed(&r.tokens)?;
            Ok((weights.logit(&x, r.target_token)?.abs() < DEGENERATE_LOGIT).then(|| r.id.clone()))
        })
        .collect::<gim_core::Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    run.set_items(records.len(), skipped);
    run.finish(a)
}
