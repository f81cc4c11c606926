use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use arma_core::data::synthetic::{gen_synthetic, SyntheticSpec};
use arma_core::diagnostics::{kernel_equivalence, layer_grad_check, model_grad_check, param_parity};
use arma_core::ma_analysis::{export_weight_maps, random_study, PhiPair, PhiQ};
use arma_core::model::checkpoint;
use arma_core::training::{evaluate, train, LossCurves, Metrics};
use arma_core::{build_model, AttnKind, RunConfig};

use crate::{AnalyzeArgs, BenchArgs, Cli, Command, EvalArgs, GenDataArgs, Global, ParamcountArgs, TrainArgs};

/// A check that ran but did not hold.
#[derive(Debug)]
struct NumericalFailure(String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

/// 2 for numerical failures, 1 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    let numerical = e.chain().any(|c| {
        c.downcast_ref::<NumericalFailure>().is_some()
            || c.downcast_ref::<arma_core::Error>().is_some_and(arma_core::Error::is_numerical)
    });
    if numerical {
        2
    } else {
        1
    }
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
}

fn context(g: &Global) -> Result<Ctx> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.train.seed = s;
    }
    let out = g
        .output_dir
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok(Ctx {
        seed: cfg.train.seed,
        cfg,
        out,
    })
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads)
        .build_global()
        .context("configuring the thread pool")?;
    let ctx = context(&cli.global)?;
    match cli.command {
        Command::Train(a) => cmd_train(ctx, a),
        Command::Eval(a) => cmd_eval(ctx, a),
        Command::AnalyzeMa(a) => cmd_analyze(ctx, a),
        Command::Gradcheck(_) => cmd_gradcheck(ctx),
        Command::Paramcount(a) => cmd_paramcount(ctx, a),
        Command::GenData(a) => cmd_gen_data(ctx, a),
        Command::BenchEquivalence(a) => cmd_bench(a),
    }
}

fn cmd_train(mut ctx: Ctx, a: TrainArgs) -> Result<()> {
    if let Some(p) = a.data {
        ctx.cfg.data.source = Some(p);
        ctx.cfg.data.synthetic = None;
    }
    if let Some(k) = a.kind {
        ctx.cfg.model.kind = k;
    }
    if let Some(m) = a.ma {
        ctx.cfg.arma.ma_enabled = m;
    }
    if let Some(e) = a.max_epochs {
        ctx.cfg.train.max_epochs = e;
    }
    if let Some(b) = a.batch_size {
        ctx.cfg.train.batch_size = b;
    }
    if let Some(g) = a.grad_accum_steps {
        ctx.cfg.train.grad_accum_steps = g;
    }
    let cfg = &ctx.cfg;
    cfg.validate()?;
    let ds = cfg.load_dataset(ctx.seed)?;
    let mc = cfg.model_config(ds.channels())?;
    let model = build_model(&mc, ctx.seed)?;
    log::info!(
        "training {} (MA {}) with {} parameters on {} rows x {} channels",
        mc.attn.variant.kind.label(),
        if mc.attn.ma_enabled { "on" } else { "off" },
        model.param_count(),
        ds.len(),
        ds.channels()
    );
    let out = train(model, &ds, cfg.data.l_i, cfg.data.l_p, &cfg.train)?;
    ensure_dir(&ctx.out)?;
    checkpoint::save(&out.best, &ctx.out.join("checkpoint.json"))?;
    write_json(&ctx.out.join("metrics.json"), &out.metrics)?;
    println!(
        "{} epochs, test MSE {:.6}, MAE {:.6}; wrote {}",
        out.metrics.epochs_run,
        out.metrics.mse,
        out.metrics.mae,
        ctx.out.display()
    );
    Ok(())
}

fn cmd_eval(mut ctx: Ctx, a: EvalArgs) -> Result<()> {
    if let Some(p) = a.data {
        ctx.cfg.data.source = Some(p);
        ctx.cfg.data.synthetic = None;
    }
    let model = checkpoint::load(&a.checkpoint)?;
    let cfg = &ctx.cfg;
    cfg.validate()?;
    if model.config().patch_len != cfg.data.l_p {
        bail!(arma_core::Error::InvalidConfig(format!(
            "data.L_P: checkpoint uses patch length {}, config has {}",
            model.config().patch_len,
            cfg.data.l_p
        )));
    }
    let ds = cfg.load_dataset(ctx.seed)?;
    let test = ds.splits.clone().expect("split dataset").test;
    let m = evaluate(&model, &ds.values, &test, cfg.data.l_i, cfg.data.l_p, cfg.train.eval_stride)?;
    let mc = model.config();
    let metrics = Metrics {
        variant: mc.attn.variant.kind.as_str().to_string(),
        ma_enabled: mc.attn.ma_enabled,
        l_i: cfg.data.l_i,
        l_p: cfg.data.l_p,
        seed: ctx.seed,
        mse: m.mse,
        mae: m.mae,
        epochs_run: 0,
        loss_curves: LossCurves::default(),
    };
    ensure_dir(&ctx.out)?;
    write_json(&ctx.out.join("eval_metrics.json"), &metrics)?;
    println!("{} windows, test MSE {:.6}, MAE {:.6}", m.windows, m.mse, m.mae);
    Ok(())
}

fn cmd_analyze(ctx: Ctx, a: AnalyzeArgs) -> Result<()> {
    if a.n < 2 || a.d == 0 {
        bail!(arma_core::Error::InvalidConfig(format!("--n must be >= 2 and --d >= 1, got {} and {}", a.n, a.d)));
    }
    let phis: Vec<PhiQ> = if a.registry { PhiQ::ALL.to_vec() } else { vec![a.phi_q] };
    let mut alphas = vec![a.alpha];
    alphas.extend(a.alpha_sweep.iter().copied().filter(|x| *x != a.alpha));
    ensure_dir(&ctx.out)?;
    println!("{:<16} {:>8} {:<6} {:>9} {:>10} {:>10}", "phi_q", "alpha", "map", "negative", "|θ| lag 1", "|θ| lag 2");
    for &phi_q in &phis {
        for &alpha in &alphas {
            let phi = PhiPair {
                phi_q,
                alpha,
                slope: a.slope,
                ..PhiPair::default()
            };
            for r in random_study(a.n, a.d, a.heads, &phi, ctx.seed)? {
                let stem = format!("ma_n{}_d{}_{}_alpha{}_seed{}_{}", a.n, a.d, phi_q.name(), alpha, ctx.seed, r.label);
                export_weight_maps(&r, a.d, ctx.seed, &ctx.out, &stem)?;
                let lag = |k: usize| r.diag_profile.get(k).copied().unwrap_or(0.0);
                println!(
                    "{:<16} {:>8} {:<6} {:>9.3} {:>10.3e} {:>10.3e}",
                    phi_q.name(),
                    alpha,
                    r.label,
                    r.negativity_fraction,
                    lag(0),
                    lag(1)
                );
            }
        }
    }
    println!("wrote weight maps to {}", ctx.out.display());
    Ok(())
}

fn cmd_gradcheck(ctx: Ctx) -> Result<()> {
    #[derive(serde::Serialize)]
    struct Row {
        target: String,
        variant: &'static str,
        ma_enabled: bool,
        max_rel_err: f64,
        normwise_rel_err: f64,
        pass: bool,
    }
    let mut rows = Vec::new();
    for kind in AttnKind::ALL {
        for ma in [false, true] {
            let layer = layer_grad_check(kind, ma, ctx.seed)?;
            let model = model_grad_check(kind, ma, ctx.seed)?;
            for (target, r) in [("layer", layer), ("model", model)] {
                rows.push(Row {
                    target: target.into(),
                    variant: kind.as_str(),
                    ma_enabled: ma,
                    max_rel_err: r.max_rel_err,
                    normwise_rel_err: r.analytic.rel_err(&r.numeric),
                    pass: r.pass,
                });
            }
        }
    }
    println!(
        "{:<6} {:<13} {:<4} {:>12} {:>12} {}",
        "target", "variant", "MA", "max rel err", "normwise", "result"
    );
    for r in &rows {
        println!(
            "{:<6} {:<13} {:<4} {:>12.3e} {:>12.3e} {}",
            r.target,
            r.variant,
            if r.ma_enabled { "on" } else { "off" },
            r.max_rel_err,
            r.normwise_rel_err,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    ensure_dir(&ctx.out)?;
    write_json(&ctx.out.join("gradcheck.json"), &rows)?;
    let failed = rows.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(NumericalFailure(format!("{failed} gradient checks failed")).into());
    }
    Ok(())
}

fn cmd_paramcount(ctx: Ctx, a: ParamcountArgs) -> Result<()> {
    let channels = a
        .channels
        .or_else(|| ctx.cfg.data.synthetic.as_ref().map(|s| s.channels))
        .unwrap_or(7);
    let base = ctx.cfg.model_config(channels)?;
    let rows = param_parity(&base, ctx.cfg.model.heads)?;
    println!("C = {channels}, d = {}, layers = {}", base.model_dim, base.num_layers);
    println!("{:<18} {:>12} {:>12}", "variant", "AR", "ARMA");
    for r in rows {
        println!("{:<18} {:>12} {:>12}", r.kind.label(), r.ar, r.arma);
    }
    Ok(())
}

fn cmd_gen_data(ctx: Ctx, a: GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        kind: a.kind,
        length: a.length,
        channels: a.channels,
        noise: a.noise,
    };
    let ds = gen_synthetic(&spec, ctx.seed)?;
    let path = match a.output {
        Some(p) => p,
        None => {
            ensure_dir(&ctx.out)?;
            ctx.out.join(format!("{}.csv", a.kind))
        }
    };
    ds.write_csv(&path)?;
    println!("wrote {} rows x {} channels to {}", ds.len(), ds.channels(), path.display());
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    if a.reps == 0 {
        bail!(arma_core::Error::InvalidConfig("--reps must be positive".into()));
    }
    println!("N = {}, d = {}, heads = {}, {} reps", a.n, a.d, a.heads, a.reps);
    println!("{:<12} {:>12} {:>14} {:>14}", "variant", "max rel err", "parallel", "recurrent");
    let mut worst = 0.0f64;
    for kind in AttnKind::ALL {
        let (mut tp, mut tr) = (Duration::ZERO, Duration::ZERO);
        let mut err = 0.0f64;
        for rep in 0..a.reps {
            let e = kernel_equivalence(kind, a.n, a.d, a.heads, rep as u64)?;
            err = err.max(e.max_rel_err);
            tp += e.parallel;
            tr += e.recurrent;
        }
        worst = worst.max(err);
        let per = |t: Duration| t / a.reps as u32;
        println!("{:<12} {:>12.3e} {:>14.2?} {:>14.2?}", kind.label(), err, per(tp), per(tr));
    }
    if worst > 1e-10 {
        return Err(NumericalFailure(format!("recurrent and parallel kernels differ by {worst:e}")).into());
    }
    Ok(())
}
