// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every check prints exactly one PASS/FAIL line, and exits nonzero if any
//! check fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use gim_core::attribution::{attribute_tokens, gim, integrated_gradients, TokenMethod};
use gim_core::data::{generate, DatasetRecord, Task};
use gim_core::diff::{
    finite_difference, layernorm_backward, layernorm_forward, softmax_backward, softmax_forward,
    Tape,
};
use gim_core::faithfulness::{
    ablation_study, comprehensiveness, paired_bootstrap, sufficiency, temperature_sweep,
    PerturbationMode, RuleCombination, SWEEP_TEMPERATURES,
};
use gim_core::model::plant::{plant_weights, PlantKind, PlantParams};
use gim_core::model::{
    decode_weights, embed, encode_weights, forward, init_random, load_weights, save_weights,
    LogitModel, ModelConfig, Weights,
};
use gim_core::self_repair::{detect, detect_rows, AttentionRow, DetectionConfig};
use gim_core::{GradientRuleSet, LayerNormRule, MultiplyRule, SoftmaxRule, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn default_model() -> Weights {
    init_random(&ModelConfig::default(), 7).unwrap()
}

fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

fn self_repair_suite() -> (Weights, Vec<DatasetRecord>) {
    let c = ModelConfig::default();
    let (w, _) = plant_weights(&c, PlantKind::SelfRepair, PlantParams::default(), 1).unwrap();
    let data = generate(Task::CopyKey, 60, 2, c.vocab_size, c.max_seq_len).unwrap();
    (w, data)
}

fn gradient_exactness() -> Outcome {
    let start = Instant::now();
    let w = default_model();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tokens = random_tokens(&mut rng, w.config.max_seq_len, w.config.vocab_size);
    let target = 5;
    let x = embed(&w, &tokens).unwrap();
    let analytic = w
        .record(&x, target)
        .unwrap()
        .input_gradient(&GradientRuleSet::STANDARD)
        .unwrap();
    let numeric = finite_difference(|e| w.logit(e, target).unwrap(), &x, 1e-4);
    // Relative to the gradient's own scale so that entries that are zero up
    // to rounding do not divide by zero.
    let scale = analytic.max_abs();
    let worst = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale))
        .fold(0.0, f64::max);
    let unfloored = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max);
    let elapsed = start.elapsed();
    check(
        worst < 1e-5 && elapsed < Duration::from_secs(60),
        format!(
            "{} coordinates, max relative error {worst:.2e} (< 1e-5; denominator floored at 1e-3 x max|grad|, unfloored {unfloored:.2e}), {:.1}s (< 60s)",
            x.numel(),
            elapsed.as_secs_f64()
        ),
    )
}

fn softmax_cancellation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let normal = Normal::new(0.0, 4.0).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=64);
        let scores: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let c = rng.random_range(-10.0..10.0);
        let grad = softmax_backward(
            &Tensor::vector(&scores).unwrap(),
            &Tensor::vector(&vec![c; n]).unwrap(),
            SoftmaxRule::Standard,
            1.0,
        )
        .unwrap();
        worst = worst.max(grad.max_abs());
    }
    check(
        worst < 1e-12,
        format!("1000 rows, max |entry| {worst:.2e} (< 1e-12)"),
    )
}

fn redundant_pair() -> Outcome {
    let row = AttentionRow {
        layer: 0,
        head: 0,
        query: 2,
        scores: vec![0.0, 0.0, -35.0],
        weights: softmax_forward(&Tensor::vector(&[0.0, 0.0, -35.0]).unwrap(), 1.0)
            .unwrap()
            .data()
            .to_vec(),
        grads: vec![1.0, 1.0, 0.0],
    };
    let standard = softmax_backward(
        &Tensor::vector(&row.scores).unwrap(),
        &Tensor::vector(&row.grads).unwrap(),
        SoftmaxRule::Standard,
        1.0,
    )
    .unwrap();
    let cases = detect_rows(&[row], &DetectionConfig::default()).unwrap();
    if cases.len() != 1 {
        return Err(format!("expected one detected case, got {}", cases.len()));
    }
    let cmp = cases[0].compare(2.0).unwrap();
    let ok = standard.data()[0].abs() < 1e-12
        && standard.data()[1].abs() < 1e-12
        && (cmp.joint - 1.0).abs() < 1e-12
        && cmp.individual[0].abs() < 1e-12
        && cmp.individual[1].abs() < 1e-12
        && cmp.tsg_estimate > 0.0;
    check(
        ok,
        format!(
            "grad [{:.1e}, {:.1e}], joint {:.12}, individual [{:.1e}, {:.1e}], tsg(2) {:.3e}",
            standard.data()[0],
            standard.data()[1],
            cmp.joint,
            cmp.individual[0],
            cmp.individual[1],
            cmp.tsg_estimate
        ),
    )
}

fn tsg_approximation() -> Outcome {
    let (w, data) = self_repair_suite();
    let mut cmps = Vec::new();
    for r in &data {
        let trace = forward(&w, &r.tokens).unwrap();
        for case in detect(&trace, r.target_token, &DetectionConfig::default()).unwrap() {
            cmps.push(case.compare(2.0).unwrap());
        }
    }
    let n = cmps.len() as f64;
    let tsg_err = cmps
        .iter()
        .map(|c| (c.tsg_estimate - c.joint).abs())
        .sum::<f64>()
        / n;
    let grad_err = cmps
        .iter()
        .map(|c| (c.gradient_estimate - c.joint).abs())
        .sum::<f64>()
        / n;
    let excess = cmps.iter().filter(|c| c.joint > c.individual_sum()).count();
    check(
        cmps.len() >= 50 && tsg_err < grad_err && excess as f64 >= 0.9 * n,
        format!(
            "{} cases, mean |tsg - joint| {tsg_err:.4} < mean |grad - joint| {grad_err:.4}, joint > sum in {excess}/{}",
            cmps.len(),
            cmps.len()
        ),
    )
}

fn rule_degeneracies() -> Outcome {
    let mut problems = Vec::new();

    // TSG at T = 1 with standard layernorm and multiply rules is plain GxI.
    let w = default_model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t1 = TokenMethod::Custom {
        rules: GradientRuleSet::from_flags(Some(1.0), false, false).unwrap(),
    };
    for _ in 0..5 {
        let len = rng.random_range(1..=24);
        let tokens = random_tokens(&mut rng, len, w.config.vocab_size);
        let a = attribute_tokens(&w, &tokens, 3, &TokenMethod::GradientXInput, 0).unwrap();
        let b = attribute_tokens(&w, &tokens, 3, &t1, 0).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(&a.scores) != bits(&b.scores) {
            problems.push("T=1 differs from GxI".to_owned());
        }
    }

    // Grad norm halves the gradient at each interaction site and nowhere else.
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut mat = |r: usize, c: usize| {
        Tensor::new(
            vec![r, c],
            (0..r * c).map(|_| normal.sample(&mut rng)).collect(),
        )
        .unwrap()
    };
    let (q, k, s, v, gate, up, x, wt) = (
        mat(4, 3),
        mat(5, 3),
        mat(4, 5),
        mat(5, 2),
        mat(3, 6),
        mat(3, 6),
        mat(3, 4),
        mat(4, 2),
    );
    let gn = GradientRuleSet {
        multiply: MultiplyRule::GradNorm,
        ..GradientRuleSet::STANDARD
    };
    let site_grads = |rules: &GradientRuleSet| {
        let mut t = Tape::new();
        let ids: Vec<_> = [&q, &k, &s, &v, &gate, &up, &x, &wt]
            .iter()
            .map(|m| t.leaf((*m).clone()))
            .collect();
        let kt = t.transpose(ids[1]).unwrap();
        let qk = t.interaction_matmul(ids[0], kt).unwrap();
        let sv = t.interaction_matmul(ids[2], ids[3]).unwrap();
        let gu = t.mul(ids[4], ids[5], true).unwrap();
        let lin = t.linear(ids[6], ids[7]).unwrap();
        let sums: Vec<_> = [qk, sv, gu, lin]
            .iter()
            .map(|&o| t.sum(o).unwrap())
            .collect();
        let a = t.add(sums[0], sums[1]).unwrap();
        let b = t.add(sums[2], sums[3]).unwrap();
        let total = t.add(a, b).unwrap();
        let g = t.backward(total, rules).unwrap();
        ids.iter()
            .map(|&id| g.get_or_zeros(&t, id))
            .collect::<Vec<_>>()
    };
    let std_g = site_grads(&GradientRuleSet::STANDARD);
    let gn_g = site_grads(&gn);
    for (i, (a, b)) in std_g.iter().zip(&gn_g).enumerate() {
        let factor = if i < 6 { 0.5 } else { 1.0 };
        if a.data()
            .iter()
            .zip(b.data())
            .any(|(x, y)| (x * factor).to_bits() != y.to_bits())
        {
            problems.push(format!("grad-norm factor wrong at operand {i}"));
        }
    }

    // Freeze backward is (g - mean g) / sigma.
    for _ in 0..20 {
        let n = rng.random_range(2..40);
        let xv: Vec<f64> = (0..n).map(|_| 3.0 * normal.sample(&mut rng)).collect();
        let gv: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let xt = Tensor::vector(&xv).unwrap();
        let (_, sigma) = layernorm_forward(&xt, 1e-5).unwrap();
        let got = layernorm_backward(
            &xt,
            sigma,
            &Tensor::vector(&gv).unwrap(),
            LayerNormRule::Freeze,
        )
        .unwrap();
        let mean = gv.iter().sum::<f64>() / n as f64;
        let want: Vec<f64> = gv.iter().map(|g| (g - mean) / sigma).collect();
        if got
            .data()
            .iter()
            .zip(&want)
            .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            problems.push("freeze backward differs from (g - mean) / sigma".to_owned());
            break;
        }
    }
    check(
        problems.is_empty(),
        if problems.is_empty() {
            "T=1 bitwise GxI on 5 inputs; grad-norm exactly 0.5x at QK, SV, gate*up (1x elsewhere); freeze exact on 20 vectors".to_owned()
        } else {
            problems.join("; ")
        },
    )
}

fn detection_thresholds() -> Outcome {
    let row = |query: usize, weights: &[f64], grads: &[f64]| AttentionRow {
        layer: 1,
        head: query % 3,
        query,
        scores: weights.iter().map(|w| w.ln()).collect(),
        weights: weights.to_vec(),
        grads: grads.to_vec(),
    };
    let mut rows = Vec::new();
    // Fifty low-importance rows: 300 entries.
    for q in 0..50 {
        rows.push(row(100 + q, &[1.0 / 6.0; 6], &[1e-3; 6]));
    }
    // Redundant pair, high importance: expected.
    rows.push(row(1, &[0.5, 0.5, 0.0], &[1.0, 1.0, 0.0]));
    // Unequal contributions (CoV 1/3): rejected.
    rows.push(row(2, &[0.5, 0.5, 0.0], &[0.1, 0.2, 0.0]));
    // One significant weight (0.01 is not above the threshold): rejected.
    rows.push(row(3, &[0.98, 0.01, 0.01], &[5.0, 5.0, 5.0]));
    // Redundant pair with low importance: not in the top 1%.
    rows.push(row(4, &[0.5, 0.5, 0.0], &[0.01, 0.01, 0.0]));
    // Near-uniform triple (CoV ~0.04): expected.
    rows.push(row(5, &[0.3, 0.33, 0.37, 0.0], &[1.0, 1.05, 0.95, 0.0]));
    // 316 entries -> keep ceil(3.16) = 4: rows 3, 1, 1, 5.
    let cases = detect_rows(&rows, &DetectionConfig::default()).unwrap();
    let got: Vec<(usize, usize, usize, Vec<usize>)> = cases
        .iter()
        .map(|c| (c.layer, c.head, c.query, c.significant.clone()))
        .collect();
    let want = vec![(1, 1, 1, vec![0, 1]), (1, 2, 5, vec![0, 1, 2])];
    check(got == want, format!("cases {got:?}, expected {want:?}"))
}

fn faithfulness_properties() -> Outcome {
    let (w, data) = self_repair_suite();
    let mode = PerturbationMode::TokenBaseline { baseline_token: 0 };

    // Monotone transforms leave both metrics bitwise unchanged.
    let mut invariant = true;
    for r in data.iter().take(10) {
        let s = gim(&w, &r.tokens, r.target_token, 2.0, 0).unwrap().scores;
        let base = (
            comprehensiveness(&w, &r.tokens, r.target_token, &s, mode).unwrap(),
            sufficiency(&w, &r.tokens, r.target_token, &s, mode).unwrap(),
        );
        for f in [|v: f64| 3.0 * v + 1.0, f64::exp, |v: f64| v.powi(3)] {
            let t: Vec<f64> = s.iter().map(|&v| f(v)).collect();
            let c = comprehensiveness(&w, &r.tokens, r.target_token, &t, mode).unwrap();
            let su = sufficiency(&w, &r.tokens, r.target_token, &t, mode).unwrap();
            invariant &= c.to_bits() == base.0.to_bits() && su.to_bits() == base.1.to_bits();
        }
    }

    // Ground-truth ranking against random rankings, 20 seeds.
    let c = w.config;
    let (mut comp_wins, mut suff_wins) = (0, 0);
    for seed in 0..20u64 {
        let data = generate(Task::CopyKey, 30, 100 + seed, c.vocab_size, c.max_seq_len).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut ct, mut cr, mut st, mut sr) = (0.0, 0.0, 0.0, 0.0);
        for r in &data {
            let mut truth = vec![0.0; r.tokens.len()];
            for &p in r.ground_truth_positions.as_ref().unwrap() {
                truth[p] = 1.0;
            }
            let random: Vec<f64> = (0..r.tokens.len()).map(|_| rng.random()).collect();
            let (t, z) = (&r.tokens, r.target_token);
            ct += comprehensiveness(&w, t, z, &truth, mode).unwrap();
            cr += comprehensiveness(&w, t, z, &random, mode).unwrap();
            st += sufficiency(&w, t, z, &truth, mode).unwrap();
            sr += sufficiency(&w, t, z, &random, mode).unwrap();
        }
        comp_wins += usize::from(ct > cr);
        suff_wins += usize::from(st < sr);
    }
    check(
        invariant && comp_wins >= 18 && suff_wins >= 18,
        format!(
            "monotone invariance {}; comp(truth) > comp(random) {comp_wins}/20, suff(truth) < suff(random) {suff_wins}/20",
            if invariant { "bitwise" } else { "BROKEN" }
        ),
    )
}

fn ablation_ordering() -> Outcome {
    let (w, data) = self_repair_suite();
    let combos = [
        RuleCombination::GXI,
        RuleCombination {
            tsg: None,
            freeze: true,
            grad_norm: true,
        },
        RuleCombination {
            tsg: Some(2.0),
            freeze: true,
            grad_norm: true,
        },
    ];
    let rows = ablation_study(&w, &data, &combos, 0).unwrap();
    let (gxi, fgn, full) = (&rows[0], &rows[1], &rows[2]);
    let ci = paired_bootstrap(
        &full.items.comprehensiveness,
        &gxi.items.comprehensiveness,
        2000,
        0.95,
        11,
    )
    .unwrap();
    let ok = full.mean_comprehensiveness >= fgn.mean_comprehensiveness
        && fgn.mean_comprehensiveness >= gxi.mean_comprehensiveness
        && ci.lower > 0.0;
    check(
        ok,
        format!(
            "comp gim {:.4} >= freeze+grad-norm {:.4} >= gxi {:.4}; gim - gxi {:.4}, 95% CI [{:.4}, {:.4}]",
            full.mean_comprehensiveness,
            fgn.mean_comprehensiveness,
            gxi.mean_comprehensiveness,
            ci.mean,
            ci.lower,
            ci.upper
        ),
    )
}

fn ig_completeness() -> Outcome {
    let w = default_model();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let len = rng.random_range(4..=32);
        let tokens = random_tokens(&mut rng, len, w.config.vocab_size);
        let target = rng.random_range(0..w.config.vocab_size);
        let res =
            integrated_gradients(&w, &tokens, target, 128, 0, GradientRuleSet::STANDARD).unwrap();
        let z = |t: &[usize]| w.logit(&embed(&w, t).unwrap(), target).unwrap();
        let gap = z(&tokens) - z(&vec![0; len]);
        let total: f64 = res.scores.iter().sum();
        worst = worst.max((total - gap).abs() / gap.abs());
    }
    check(
        worst < 0.05,
        format!("5 inputs at 128 steps, max relative gap {worst:.2e} (< 0.05)"),
    )
}

/// Locates the `gim` binary next to this test's target directory, building
/// it when absent.
fn gim_binary() -> Result<PathBuf, String> {
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    let profile_dir = exe
        .parent()
        .and_then(Path::parent)
        .ok_or("unexpected test binary location")?;
    let bin = profile_dir.join(format!("gim{}", std::env::consts::EXE_SUFFIX));
    if !bin.exists() {
        let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".to_owned());
        let mut cmd = Command::new(cargo);
        cmd.args(["build", "-p", "gim-cli", "--bin", "gim"]);
        if profile_dir.ends_with("release") {
            cmd.arg("--release");
        }
        let status = cmd.status().map_err(|e| e.to_string())?;
        if !status.success() || !bin.exists() {
            return Err("could not build the gim binary".to_owned());
        }
    }
    Ok(bin)
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

fn reproducibility() -> Outcome {
    // Weight file round trip.
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (w, _) = plant_weights(
        &ModelConfig::default(),
        PlantKind::SelfRepair,
        PlantParams::default(),
        1,
    )
    .unwrap();
    let path = tmp.path().join("w.gimw");
    save_weights(&w, &path).unwrap();
    let back = load_weights(&path).unwrap();
    let bits = |w: &Weights| -> Vec<u64> {
        w.named_tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    };
    let roundtrip = bits(&w) == bits(&back)
        && back.config == w.config
        && encode_weights(&decode_weights(&encode_weights(&w)).unwrap()) == encode_weights(&w);

    // Every command twice with identical flags.
    let bin = gim_binary()?;
    let p = |n: &str| tmp.path().join(n).display().to_string();
    let run = |args: &[String]| -> Result<(), String> {
        let out = Command::new(&bin)
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(())
        } else {
            Err(format!(
                "gim {args:?}: {}",
                String::from_utf8_lossy(&out.stderr)
            ))
        }
    };
    let sv = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let weights = p("model/weights.gimw");
    let data = p("data/data.jsonl");
    let mut commands = vec![
        sv(&[
            "gen-model",
            "--out",
            &p("model"),
            "--plant",
            "self-repair",
            "--seed",
            "3",
        ]),
        sv(&[
            "gen-data",
            "--out",
            &p("data"),
            "--task",
            "copy-key",
            "--n",
            "5",
            "--weights",
            &weights,
        ]),
    ];
    for (i, (cmd, extra)) in [
        ("attribute", vec!["--method", "gim"]),
        ("attribute", vec!["--method", "ig", "--ig-steps", "8"]),
        ("self-repair", vec!["--full-forward"]),
        ("faithfulness", vec!["--method", "gxi"]),
        ("circuit", vec!["--method", "atp"]),
        ("ablation", vec!["--resamples", "100"]),
        ("sweep", vec![]),
    ]
    .into_iter()
    .enumerate()
    {
        let out = p(&format!("run{i}"));
        let mut args = sv(&[cmd, "--weights", &weights, "--data", &data, "--out", &out]);
        args.extend(sv(&extra));
        commands.push(args);
    }
    let mut identical = 0;
    for args in &commands {
        run(args)?;
        let out =
            Path::new(&args[args.iter().position(|a| a == "--out").unwrap() + 1]).to_path_buf();
        let first = snapshot(&out);
        run(args)?;
        if snapshot(&out) == first {
            identical += 1;
        }
    }
    check(
        roundtrip && identical == commands.len(),
        format!(
            "weight round trip {}; {identical}/{} commands byte-identical on rerun",
            if roundtrip { "bit-exact" } else { "MISMATCH" },
            commands.len()
        ),
    )
}

fn sweep_grid() -> Outcome {
    let (w, data) = self_repair_suite();
    let data = &data[..10];
    let rows = temperature_sweep(&w, data, &SWEEP_TEMPERATURES, 0).unwrap();
    let temps: Vec<f64> = rows.iter().map(|r| r.temperature).collect();
    let complete = rows.iter().all(|r| r.n_items + r.n_skipped == data.len());
    check(
        temps == SWEEP_TEMPERATURES && complete,
        format!("{} rows at T = {temps:?}", rows.len()),
    )
}

type Check = (&'static str, fn() -> Outcome);

fn main() {
    let checks: [Check; 11] = [
        ("gradient exactness", gradient_exactness),
        ("softmax cancellation", softmax_cancellation),
        ("redundant-pair example", redundant_pair),
        ("tsg approximation on planted suite", tsg_approximation),
        ("rule degeneracies", rule_degeneracies),
        ("detection thresholds", detection_thresholds),
        ("faithfulness metric properties", faithfulness_properties),
        ("ablation-study ordering", ablation_ordering),
        ("integrated-gradients completeness", ig_completeness),
        ("reproducibility", reproducibility),
        ("temperature sweep grid", sweep_grid),
    ];
    // Silence the default hook; failures are reported on the summary line.
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in checks.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        checks.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
