//! Acceptance suite. Each test covers one criterion and writes a single
//! `criterion N ... PASS|FAIL` line to stderr (outside the test harness'
//! capture) before asserting. Tests share one lock so the timed and
//! training-heavy criteria never compete for the CPU.

use std::io::Write;
use std::ops::ControlFlow;
use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ucyclemlp::blocks::{
    channel_attention, AtrousConv, Block, Buffers, ChannelCycleMlp, ConvBnSilu, CycleFc, Forward, Init,
    PositionAttention, Stepsize,
};
use ucyclemlp::cli::{self, bench_cyclefc, quick_config, TrainArgs};
use ucyclemlp::dataio::{synth_generate, Dataset};
use ucyclemlp::objectives::{
    bce, confusion, cross_entropy, dice_loss, dsc_exact, f1_exact, focal, hybrid_loss, iou_exact, Exact, LossConfig,
    LossMode,
};
use ucyclemlp::oracle::{
    block_suite, loss_suite, naive_attention, naive_conv2d, naive_cyclefc, Projections, BLOCK_TOLERANCE,
};
use ucyclemlp::tensor::{Conv2dOpts, ParamStore};
use ucyclemlp::trainer::{default_loss, fit, OptimConfig};
use ucyclemlp::{Graph, ModelConfig, Tensor, UCycleMLP, Var};

// Tolerances and budgets.
const GRAD_TOL: f64 = BLOCK_TOLERANCE;
const GRAD_BUDGET_SECS: f64 = 120.0;
const IDENTITY_TOL: f64 = 1e-6;
const METRIC_PAIRS: usize = 200;
const PARAM_RANGE: (usize, usize) = (20_000_000, 30_000_000);
const OVERFIT_EPOCHS: usize = 300;
const BINARY_DICE: f64 = 0.95;
const MULTICLASS_DICE: f64 = 0.90;
const ABLATION_DICE: f64 = 0.90;
const OVERFIT_BUDGET_SECS: f64 = 15.0 * 60.0;
const TIME_GROWTH_LIMIT: f64 = 4.5;
const ORACLE_CASES: usize = 20;
const ORACLE_TOL: f64 = 1e-6;

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n:>2} {name:<22} {}  {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn note(text: &str) {
    let _ = std::io::stderr().write_all(format!("             {text}\n").as_bytes());
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn init_block<B: Block>(block: &B, seed: u64) -> (ParamStore<f64>, Buffers<f64>) {
    let (mut params, mut buffers) = (ParamStore::new(), Buffers::new());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    block
        .init(&mut Init {
            params: &mut params,
            buffers: &mut buffers,
            rng: &mut rng,
        })
        .unwrap();
    (params, buffers)
}

fn run_block<B: Block>(block: &B, params: &ParamStore<f64>, buffers: &Buffers<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut buffers = buffers.clone();
    let mut f = Forward::new(params, &mut buffers, false, 0);
    let xv = f.input(x.clone(), false);
    let y = block.forward(&mut f, xv).unwrap();
    f.graph.value(y).clone()
}

fn loss_value(logits: &Tensor<f64>, target: &[u8], loss: impl Fn(&mut Graph<f64>, Var, &[u8]) -> ucyclemlp::Result<Var>) -> f64 {
    let mut g = Graph::new();
    let x = g.leaf(logits.clone(), false);
    let l = loss(&mut g, x, target).unwrap();
    g.value(l).data()[0]
}

#[test]
fn criterion_01_gradient_suite() {
    let _guard = serial();
    let start = Instant::now();
    let mut reports = block_suite::<f64>(1).unwrap();
    reports.extend(loss_suite::<f64>(1).unwrap());
    let secs = start.elapsed().as_secs_f64();
    for r in &reports {
        note(&format!("{:<20} worst rel {:.2e} over {} coords", r.name, r.worst, r.coords));
    }
    let worst = reports.iter().map(|r| r.worst).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed(GRAD_TOL)).map(|r| r.name.as_str()).collect();
    verdict(
        1,
        "gradient suite",
        failed.is_empty() && secs < GRAD_BUDGET_SECS,
        &format!(
            "{} checks, worst {worst:.2e} (tol {GRAD_TOL:e}), {secs:.1}s (budget {GRAD_BUDGET_SECS}s) failed {failed:?}",
            reports.len()
        ),
    );
}

#[test]
fn criterion_02_analytic_identities() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checks: Vec<(&str, f64)> = Vec::new();

    let pa = PositionAttention::new("pa", 4);
    let (params, buffers) = init_block(&pa, 3);
    let y = random(&mut rng, &[2, 4, 4, 4]);
    checks.push(("attention alpha=0", run_block(&pa, &params, &buffers, &y).max_abs_diff(&y)));

    let mut g = Graph::new();
    let xv = g.leaf(y.clone(), false);
    let beta = g.leaf(Tensor::zeros(&[1]), false);
    let ca = channel_attention(&mut g, xv, beta).unwrap();
    checks.push(("channel attention beta=0", g.value(ca).max_abs_diff(&y)));

    let atrous = AtrousConv::new("u", 4, 6, 1).unwrap();
    let plain = ConvBnSilu::new("u", 4, 6, 3, Conv2dOpts { stride: 1, padding: 1, dilation: 1 });
    let (params, buffers) = init_block(&atrous, 4);
    let x = random(&mut rng, &[2, 4, 7, 7]);
    let d = run_block(&atrous, &params, &buffers, &x).max_abs_diff(&run_block(&plain, &params, &buffers, &x));
    checks.push(("atrous r=1 vs 3x3 conv", d));

    let fc = CycleFc::new("fc", 4, 5, Stepsize::new(1, 1).unwrap());
    let (params, buffers) = init_block(&fc, 5);
    let pointwise = naive_conv2d(&x, params.get("fc.weight").unwrap(), Some(params.get("fc.bias").unwrap().data()), 1, 0, 1);
    checks.push(("cycle_fc (1,1) vs 1x1 conv", run_block(&fc, &params, &buffers, &x).max_abs_diff(&pointwise)));

    let logits1 = Tensor::from_fn(&[2, 1, 4, 4], |_| rng.gen_range(-4.0..4.0));
    let binary: Vec<u8> = (0..32).map(|_| rng.gen_range(0..2)).collect();
    let d = (loss_value(&logits1, &binary, |g, x, t| focal(g, x, t, 0.0))
        - loss_value(&logits1, &binary, bce))
    .abs();
    checks.push(("focal gamma=0 vs bce", d));

    let logits4 = Tensor::from_fn(&[2, 4, 4, 4], |_| rng.gen_range(-3.0..3.0));
    let labels: Vec<u8> = (0..32).map(|_| rng.gen_range(0..4)).collect();
    let cfg = |alpha| LossConfig {
        mode: LossMode::HybridCeDice,
        alpha,
        ..LossConfig::default()
    };
    let d1 = (loss_value(&logits4, &labels, |g, x, t| hybrid_loss(g, x, t, &cfg(1.0)))
        - loss_value(&logits4, &labels, cross_entropy))
    .abs();
    let d0 = (loss_value(&logits4, &labels, |g, x, t| hybrid_loss(g, x, t, &cfg(0.0)))
        - loss_value(&logits4, &labels, |g, x, t| dice_loss(g, x, t, 1.0)))
    .abs();
    checks.push(("hybrid alpha=1 vs ce", d1));
    checks.push(("hybrid alpha=0 vs dice", d0));

    for (name, d) in &checks {
        note(&format!("{name:<28} max |diff| {d:.2e}"));
    }
    let worst = checks.iter().map(|c| c.1).fold(0.0, f64::max);
    verdict(
        2,
        "analytic identities",
        worst <= IDENTITY_TOL,
        &format!("{} identities, worst {worst:.2e} (tol {IDENTITY_TOL:e})", checks.len()),
    );
}

#[test]
fn criterion_03_metric_identities() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let two = Exact::from_integer(2);
    let one = Exact::from_integer(1);
    let mut bad = 0;
    for _ in 0..METRIC_PAIRS {
        let n = rng.gen_range(1..400);
        let density = rng.gen_range(0.0..1.0);
        let mut mask = || (0..n).map(|_| u8::from(rng.gen_bool(density))).collect::<Vec<u8>>();
        let (pred, gt) = (mask(), mask());
        let c = confusion(&pred, &gt, 2).unwrap().classes[1];
        let (d, j, f) = (dsc_exact(&c), iou_exact(&c), f1_exact(&c));
        if d != two * j / (one + j) || f != d {
            bad += 1;
        }
    }
    verdict(
        3,
        "metric identities",
        bad == 0,
        &format!("{METRIC_PAIRS} random binary pairs, {bad} violations of DSC=2J/(1+J), F1=DSC (exact rationals)"),
    );
}

#[test]
fn criterion_04_shape_ladder() {
    let _guard = serial();
    let cfg = ModelConfig {
        input_size: (64, 64),
        ..ModelConfig::default()
    };
    let mut model = UCycleMLP::<f32>::new(&cfg, 4).unwrap();
    let (arch, mut f) = model.session(false, 0);
    let x = f.input(Tensor::full(&[1, 3, 64, 64], 0.5), false);
    let feats = arch.encoder_forward(&mut f, x).unwrap();
    let shapes: Vec<Vec<usize>> = feats.iter().map(|&v| f.graph.shape(v).to_vec()).collect();
    let channels: Vec<usize> = shapes.iter().map(|s| s[1]).collect();
    let sides: Vec<usize> = shapes.iter().map(|s| s[2]).collect();
    let square = shapes.iter().all(|s| s[2] == s[3]);
    let logits = arch.decoder_forward(&mut f, &feats).unwrap();
    let out = f.graph.shape(logits).to_vec();
    verdict(
        4,
        "shape ladder",
        channels == [32, 64, 128, 256, 512, 1024] && sides == [64, 32, 16, 8, 4, 2] && square && out == [1, 1, 64, 64],
        &format!("channels {channels:?}, sides {sides:?}, logits {out:?}"),
    );
}

/// Trains on `data` until the training-set mean Dice reaches `target` or
/// the epoch budget runs out. Returns `(best dice, epochs, seconds)`.
fn overfit(config: &ModelConfig, data: &Dataset, target: f64) -> (f64, usize, f64) {
    let mut model = UCycleMLP::<f32>::new(config, 1).unwrap();
    let optim = OptimConfig {
        epochs: OVERFIT_EPOCHS,
        batch_size: 4,
        lr: 2e-4,
        seed: 1,
        ..OptimConfig::default()
    };
    let start = Instant::now();
    let report = fit(
        &mut model,
        data,
        &Dataset::default(),
        &default_loss(config.num_classes),
        &optim,
        None,
        |log| {
            if log.val_dice >= target {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        },
    )
    .unwrap();
    (report.best_dice, report.epochs.len(), start.elapsed().as_secs_f64())
}

fn overfit_config(num_classes: usize) -> ModelConfig {
    ModelConfig {
        input_size: (64, 64),
        num_classes,
        ..ModelConfig::default()
    }
}

#[test]
fn criterion_05_overfit() {
    let _guard = serial();
    let binary = synth_generate(8, 64, 2, 5).unwrap();
    let (bd, be, bs) = overfit(&overfit_config(1), &binary, BINARY_DICE);
    note(&format!("binary bce+focal: dice {bd:.4} after {be} epochs, {bs:.0}s"));
    let cardiac = synth_generate(8, 64, 4, 5).unwrap();
    let (md, me, ms) = overfit(&overfit_config(4), &cardiac, MULTICLASS_DICE);
    note(&format!("4-class hybrid: mean foreground dice {md:.4} after {me} epochs, {ms:.0}s"));
    let secs = bs + ms;
    verdict(
        5,
        "overfit",
        bd >= BINARY_DICE && md >= MULTICLASS_DICE,
        &format!(
            "binary {bd:.4} (>= {BINARY_DICE}), 4-class {md:.4} (>= {MULTICLASS_DICE}), {secs:.0}s (target {OVERFIT_BUDGET_SECS}s{})",
            if secs < OVERFIT_BUDGET_SECS { "" } else { ", exceeded" }
        ),
    );
}

#[test]
fn criterion_06_parameter_calibration() {
    let _guard = serial();
    let model = UCycleMLP::<f32>::new(&ModelConfig::default(), 0).unwrap();
    let params = model.count_params();
    let flops = model.count_flops(224, 224);
    note(&format!(
        "flops at 224x224: {:.2}G total, position attention {:.2}G ({:.1}%)",
        flops.total as f64 / 1e9,
        flops.position_attention as f64 / 1e9,
        100.0 * flops.attention_share()
    ));
    verdict(
        6,
        "parameter calibration",
        (PARAM_RANGE.0..=PARAM_RANGE.1).contains(&params),
        &format!("{params} parameters (range {PARAM_RANGE:?})"),
    );
}

#[test]
fn criterion_07_ablation_wiring() {
    let _guard = serial();
    let full = UCycleMLP::<f32>::new(&ModelConfig::default(), 0).unwrap();
    let plain_cfg = ModelConfig {
        use_ccm: false,
        ..ModelConfig::default()
    };
    let plain = UCycleMLP::<f32>::new(&plain_cfg, 0).unwrap();
    let delta = full.count_params() - plain.count_params();
    let standalone: usize = (0..5)
        .map(|s| {
            let ccm = ChannelCycleMlp::new("ccm", 32 << s, 4, &ucyclemlp::blocks::CYCLE_MLP_STEPSIZES).unwrap();
            init_block(&ccm, 0).0.numel()
        })
        .sum();
    let binary = synth_generate(8, 64, 2, 5).unwrap();
    let (dice, epochs, secs) = overfit(
        &ModelConfig {
            use_ccm: false,
            ..overfit_config(1)
        },
        &binary,
        ABLATION_DICE,
    );
    note(&format!("without CCM: dice {dice:.4} after {epochs} epochs, {secs:.0}s"));
    verdict(
        7,
        "ablation wiring",
        delta == standalone && delta == full.ccm_params() && dice >= ABLATION_DICE,
        &format!("param delta {delta}, five CCM blocks {standalone}, dice {dice:.4} (>= {ABLATION_DICE})"),
    );
}

#[test]
fn criterion_08_linearity() {
    let _guard = serial();
    let sizes = [32, 64, 128];
    // warm-up pass so allocation and cache effects hit every size alike
    bench_cyclefc(&sizes, 32, 2).unwrap();
    let rows = bench_cyclefc(&sizes, 32, 15).unwrap();
    let k = rows[0].flops / (32 * 32);
    let residual: u64 = rows.iter().map(|r| r.flops.abs_diff(k * (r.size * r.size) as u64)).sum();
    let growth: Vec<f64> = rows.windows(2).map(|w| w[1].seconds / w[0].seconds).collect();
    for r in &rows {
        note(&format!("H={:<4} flops {:<10} {:.3} ms", r.size, r.flops, r.seconds * 1e3));
    }
    verdict(
        8,
        "cycle_fc linearity",
        residual == 0 && growth.iter().all(|&g| g < TIME_GROWTH_LIMIT),
        &format!(
            "flops = {k}·H·W, residual {residual}; time growth per 4x area {:?} (limit {TIME_GROWTH_LIMIT})",
            growth.iter().map(|g| format!("{g:.2}")).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_09_determinism() {
    let _guard = serial();
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(&cfg_path, quick_config(32, 3).to_text()).unwrap();
    let train = |name: &str| {
        let out = dir.path().join(name);
        let args = TrainArgs {
            config: Some(cfg_path.clone()),
            data: None,
            synth: Some(6),
            out: Some(out.clone()),
            seed: Some(9),
            epochs: None,
        };
        let mut log = Vec::new();
        cli::cmd_train(&args, &mut log).unwrap();
        (std::fs::read(&out).unwrap(), log)
    };
    let (a, log_a) = train("a.ckpt");
    let (b, log_b) = train("b.ckpt");
    let strip = |log: Vec<u8>, p: &str| String::from_utf8(log).unwrap().replace(p, "");
    let same_logs = strip(log_a, "a.ckpt") == strip(log_b, "b.ckpt");
    verdict(
        9,
        "determinism",
        a == b && same_logs && !a.is_empty(),
        &format!("two cmd_train runs: {} checkpoint bytes, identical {}", a.len(), a == b),
    );
}

fn oracle_projections(params: &ParamStore<f64>) -> Projections<'_> {
    let p = |n: &str| params.get(&format!("pa.{n}")).unwrap();
    Projections {
        wq: p("q.weight"),
        bq: p("q.bias").data(),
        wk: p("k.weight"),
        bk: p("k.bias").data(),
        wv: p("v.weight"),
        bv: p("v.bias").data(),
    }
}

#[test]
fn criterion_10_oracle_equivalence() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut conv_err, mut attn_err, mut fc_err) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..ORACLE_CASES {
        let (n, cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..5), rng.gen_range(1..5));
        let k = rng.gen_range(1..4);
        let opts = Conv2dOpts {
            stride: rng.gen_range(1..3),
            padding: rng.gen_range(0..3),
            dilation: rng.gen_range(1..3),
        };
        let reach = opts.dilation * (k - 1) + 1;
        let (h, w) = (rng.gen_range(reach.max(3)..10), rng.gen_range(reach.max(3)..10));
        let x = random(&mut rng, &[n, cin, h, w]);
        let wt = random(&mut rng, &[cout, cin, k, k]);
        let b = random(&mut rng, &[cout]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.leaf(x.clone(), false), g.leaf(wt.clone(), false), g.leaf(b.clone(), false));
        let y = g.conv2d(xv, wv, Some(bv), opts).unwrap();
        let want = naive_conv2d(&x, &wt, Some(b.data()), opts.stride, opts.padding, opts.dilation);
        conv_err = conv_err.max(g.value(y).max_abs_diff(&want));

        let c = rng.gen_range(1..5);
        let pa = PositionAttention::new("pa", c);
        let (mut params, buffers) = init_block(&pa, case as u64);
        for name in params.names().map(str::to_string).collect::<Vec<_>>() {
            let shape = params.get(&name).unwrap().shape().to_vec();
            *params.get_mut(&name).unwrap() = random(&mut rng, &shape);
        }
        let alpha = params.get("pa.alpha").unwrap().data()[0];
        let y = random(&mut rng, &[n, c, h, w]);
        let got = run_block(&pa, &params, &buffers, &y);
        attn_err = attn_err.max(got.max_abs_diff(&naive_attention(&y, &oracle_projections(&params), alpha)));

        let step = match rng.gen_range(0..3) {
            0 => (1, rng.gen_range(1..8)),
            1 => (rng.gen_range(1..8), 1),
            _ => (1, 1),
        };
        let fc = CycleFc::new("fc", cin, cout, Stepsize::new(step.0, step.1).unwrap());
        let (mut params, buffers) = init_block(&fc, case as u64);
        *params.get_mut("fc.bias").unwrap() = b.clone();
        let got = run_block(&fc, &params, &buffers, &x);
        let want = naive_cyclefc(&x, params.get("fc.weight").unwrap(), b.data(), step);
        fc_err = fc_err.max(got.max_abs_diff(&want));
    }
    verdict(
        10,
        "oracle equivalence",
        conv_err < ORACLE_TOL && attn_err < ORACLE_TOL && fc_err < ORACLE_TOL,
        &format!(
            "{ORACLE_CASES} cases each: conv2d {conv_err:.2e}, attention {attn_err:.2e}, cycle_fc {fc_err:.2e} (tol {ORACLE_TOL:e})"
        ),
    );
}
