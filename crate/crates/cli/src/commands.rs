use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mrfnln::checkpoint::Checkpoint;
use mrfnln::config::{AblateCell, RunConfig, RunRecord};
use mrfnln::cost::{cost_report, FlopConvention};
use mrfnln::haze::{self, ImagePair, SynthOptions};
use mrfnln::losses::{train_proxy_classifier, FeatureExtractor};
use mrfnln::net::{Model, NetworkConfig};
use mrfnln::nonlocal::{NonLocal, SamplerSpec};
use mrfnln::train::{evaluate, EvalSummary, Trainer};
use mrfnln::{ParamStore, Tape, Tensor};

use crate::CliError;

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub threads: usize,
}

const RECORDS: &str = "records.jsonl";

impl Context {
    fn out_dir(&self) -> Result<&Path, CliError> {
        fs::create_dir_all(&self.out).map_err(|e| CliError::Runtime(format!("{}: {e}", self.out.display())))?;
        Ok(&self.out)
    }

    fn append_record(&self, r: &RunRecord) -> Result<(), CliError> {
        let path = self.out_dir()?.join(RECORDS);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        f.write_all(r.to_json_line().as_bytes())
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    fn record(&self, command: &str) -> RunRecord {
        RunRecord::new(command, &self.cfg, self.threads)
    }
}

fn existing(p: &Path, what: &str) -> Result<(), CliError> {
    if p.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", p.display())))
    }
}

fn load_manifest(p: &Path) -> Result<Vec<ImagePair>, CliError> {
    existing(p, "manifest")?;
    let pairs = haze::load_pairs(p)?;
    if pairs.is_empty() {
        return Err(CliError::Usage(format!("manifest {} lists no pairs", p.display())));
    }
    Ok(pairs)
}

fn load_proxy(p: Option<&Path>) -> Result<Option<FeatureExtractor<f32>>, CliError> {
    p.map(|p| {
        existing(p, "proxy checkpoint")?;
        Ok(FeatureExtractor::load(p)?)
    })
    .transpose()
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Directory of clean PNG/PPM images.
    #[arg(long)]
    clean: Option<PathBuf>,
    /// Write this many procedural clean scenes to OUT/clean first and use them.
    #[arg(long, conflicts_with = "clean")]
    scenes: Option<usize>,
    /// Side length of procedural scenes.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Hazy variants per clean image (overrides [synth] per_clean).
    #[arg(long)]
    per_clean: Option<usize>,
    /// Also write lossless .pfm copies of the hazy images.
    #[arg(long)]
    float_sidecar: bool,
}

pub fn synth(ctx: &Context, a: &SynthArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let mut opts: SynthOptions = ctx.cfg.synth.clone();
    if let Some(n) = a.per_clean {
        opts.per_clean = n;
    }
    opts.float_sidecar |= a.float_sidecar;
    let clean = match (&a.clean, a.scenes) {
        (Some(dir), _) => {
            if !dir.is_dir() {
                return Err(CliError::Usage(format!("clean directory {} does not exist", dir.display())));
            }
            dir.clone()
        }
        (None, Some(n)) => haze::write_procedural_scenes(&ctx.out_dir()?.join("clean"), n, a.size, a.size, opts.seed)?,
        (None, None) => return Err(CliError::Usage("synth needs --clean DIR or --scenes N".into())),
    };
    let entries = haze::make_dataset(&clean, ctx.out_dir()?, &opts)?;
    println!(
        "wrote {} pairs to {}",
        entries.len(),
        ctx.out.join(haze::MANIFEST_NAME).display()
    );
    let mut r = ctx.record("synth");
    r.wall_time_s = start.elapsed().as_secs_f64();
    ctx.append_record(&r)
}

#[derive(Args, Debug)]
pub struct ManifestArgs {
    #[arg(long)]
    manifest: PathBuf,
}

pub fn train_proxy(ctx: &Context, a: &ManifestArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let pairs = load_manifest(&a.manifest)?;
    let (ex, report) = train_proxy_classifier(&pairs, &ctx.cfg.proxy)?;
    let path = ctx.out_dir()?.join("proxy.ckpt");
    ex.save(&path)?;
    println!(
        "proxy: loss {:.4}, train accuracy {:.3}, held-out accuracy {:.3} -> {}",
        report.final_loss,
        report.train_accuracy,
        report.heldout_accuracy,
        path.display()
    );
    let mut r = ctx.record("train-proxy");
    r.wall_time_s = start.elapsed().as_secs_f64();
    r.details = Some(serde_json::to_value(&report).expect("report serializes"));
    ctx.append_record(&r)
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Frozen proxy extractor; required when the contrastive term is active.
    #[arg(long)]
    proxy: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier `train`.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Scored after training; defaults to the training manifest.
    #[arg(long)]
    eval_manifest: Option<PathBuf>,
}

/// Trains one configuration; shared by `train` and `ablate`.
fn train_run(
    cfg: &RunConfig,
    pairs: &[ImagePair],
    proxy: Option<&FeatureExtractor<f32>>,
    resume: Option<&Checkpoint>,
    checkpoints: Option<&Path>,
    record: &mut RunRecord,
) -> Result<Model<f32>, CliError> {
    let extractor = if cfg.loss.active() { proxy } else { None };
    let mut trainer = match resume {
        Some(ck) => Trainer::resume(&cfg.network, cfg.train.clone(), cfg.loss.clone(), pairs, extractor, ck)?,
        None => Trainer::new(&cfg.network, cfg.train.clone(), cfg.loss.clone(), pairs, extractor)?,
    };
    let every = cfg.train.log_every.max(1);
    let save_every = cfg.train.checkpoint_every;
    let end = cfg.train.iterations;
    let losses = &mut record.losses;
    trainer.run_until(end, |t, s| {
        if (s.step + 1) % every == 0 || s.step + 1 == end {
            eprintln!("step {:>6}  lr {:.2e}  loss {:.5}", s.step + 1, s.lr, s.loss);
            losses.push(*s);
        }
        if let Some(dir) = checkpoints {
            if save_every > 0 && t.step % save_every == 0 && t.step < end {
                t.checkpoint().save(&dir.join(format!("step_{}.ckpt", t.step)))?;
            }
        }
        Ok(())
    })?;
    if let Some(dir) = checkpoints {
        trainer.checkpoint().save(&dir.join("model.ckpt"))?;
    }
    Ok(trainer.model)
}

fn print_eval(summary: &EvalSummary) {
    for s in &summary.images {
        let ssim = s.ssim.map_or("n/a".into(), |v| format!("{v:.4}"));
        println!("{:<24} psnr {:>8.3}  ssim {ssim}", s.id, s.psnr);
    }
    let ssim = summary.mean_ssim.map_or("n/a".into(), |v| format!("{v:.4}"));
    println!("mean psnr {:.3}  mean ssim {ssim}  ({} images)", summary.mean_psnr, summary.images.len());
}

pub fn train(ctx: &Context, a: &TrainArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let pairs = load_manifest(&a.manifest)?;
    let proxy = load_proxy(a.proxy.as_deref())?;
    if ctx.cfg.loss.active() && proxy.is_none() {
        return Err(CliError::Usage(format!(
            "loss variant {} needs --proxy (train one with `train-proxy`)",
            ctx.cfg.loss.variant.label()
        )));
    }
    let resume = match &a.resume {
        Some(p) => {
            existing(p, "checkpoint")?;
            Some(Checkpoint::load(p)?)
        }
        None => None,
    };
    let eval_pairs = match &a.eval_manifest {
        Some(p) => load_manifest(p)?,
        None => pairs.clone(),
    };
    let mut r = ctx.record("train");
    let out = ctx.out_dir()?.to_path_buf();
    let model = train_run(&ctx.cfg, &pairs, proxy.as_ref(), resume.as_ref(), Some(&out), &mut r)?;
    let summary = evaluate(&model, &eval_pairs)?;
    print_eval(&summary);
    r.eval = Some(summary);
    r.wall_time_s = start.elapsed().as_secs_f64();
    ctx.append_record(&r)
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
}

pub fn eval(ctx: &Context, a: &EvalArgs) -> Result<(), CliError> {
    let start = Instant::now();
    existing(&a.checkpoint, "checkpoint")?;
    let pairs = load_manifest(&a.manifest)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = Model::from_checkpoint(&ctx.cfg.network, &ck).map_err(|e| match e {
        mrfnln::Error::ShapeMismatch { .. } | mrfnln::Error::ParameterMismatch { .. } => {
            CliError::Usage(format!("checkpoint does not match the configured network: {e}"))
        }
        other => other.into(),
    })?;
    let summary = evaluate(&model, &pairs)?;
    print_eval(&summary);
    let mut r = ctx.record("eval");
    r.eval = Some(summary);
    r.wall_time_s = start.elapsed().as_secs_f64();
    ctx.append_record(&r)
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    eval_manifest: Option<PathBuf>,
    /// Frozen proxy extractor for the contrastive cells.
    #[arg(long)]
    proxy: Option<PathBuf>,
}

struct CellResult {
    cell: AblateCell,
    summary: Result<(f64, Option<f64>), String>,
}

pub fn ablate(ctx: &Context, a: &AblateArgs) -> Result<(), CliError> {
    let pairs = load_manifest(&a.manifest)?;
    let eval_pairs = match &a.eval_manifest {
        Some(p) => load_manifest(p)?,
        None => pairs.clone(),
    };
    let proxy = load_proxy(a.proxy.as_deref())?;
    let cells = ctx.cfg.ablate.cells();
    let mut results = Vec::with_capacity(cells.len());
    for (k, cell) in cells.into_iter().enumerate() {
        eprintln!("[{}/{}] {}", k + 1, ctx.cfg.ablate.cells().len(), cell.label());
        let start = Instant::now();
        let cfg = cell.configure(&ctx.cfg);
        let mut r = RunRecord::new("ablate", &cfg, ctx.threads);
        r.label = Some(cell.label());
        let outcome = (|| -> Result<EvalSummary, CliError> {
            cfg.validate()?;
            if cfg.loss.active() && proxy.is_none() {
                return Err(CliError::Usage(format!("{} needs --proxy", cfg.loss.variant.label())));
            }
            let model = train_run(&cfg, &pairs, proxy.as_ref(), None, None, &mut r)?;
            Ok(evaluate(&model, &eval_pairs)?)
        })();
        let summary = match outcome {
            Ok(s) => {
                let v = (s.mean_psnr, s.mean_ssim);
                r.eval = Some(s);
                Ok(v)
            }
            Err(CliError::Usage(m) | CliError::Runtime(m)) => {
                eprintln!("  cell failed: {m}");
                r.error = Some(m.clone());
                Err(m)
            }
        };
        r.wall_time_s = start.elapsed().as_secs_f64();
        ctx.append_record(&r)?;
        results.push(CellResult { cell, summary });
    }
    print_ablation(&results);
    let failed = results.iter().filter(|c| c.summary.is_err()).count();
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} of {} ablation cells failed", results.len())));
    }
    Ok(())
}

/// Cells by mean PSNR, best first; failed cells last.
fn print_ablation(results: &[CellResult]) {
    let mut order: Vec<&CellResult> = results.iter().collect();
    order.sort_by(|a, b| match (&a.summary, &b.summary) {
        (Ok((pa, _)), Ok((pb, _))) => pb.total_cmp(pa),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        (Err(_), Err(_)) => std::cmp::Ordering::Equal,
    });
    println!("{:<12} {:<10} {:<9} {:>5} {:>9} {:>8}", "block", "attention", "loss", "seed", "psnr", "ssim");
    for c in order {
        let head = format!(
            "{:<12} {:<10} {:<9} {:>5}",
            c.cell.block.label(),
            c.cell.attention.label(),
            c.cell.loss.label(),
            c.cell.seed
        );
        match &c.summary {
            Ok((p, s)) => println!("{head} {p:>9.3} {:>8}", s.map_or("n/a".into(), |v| format!("{v:.4}"))),
            Err(m) => println!("{head}    failed: {m}"),
        }
    }
    // directional observations, reported only
    let mean = |block: mrfnln::blocks::BlockKind| {
        let v: Vec<f64> = results
            .iter()
            .filter(|c| c.cell.block == block)
            .filter_map(|c| c.summary.as_ref().ok().map(|s| s.0))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    if let (Some(f), Some(m)) = (mean(mrfnln::blocks::BlockKind::Fab), mean(mrfnln::blocks::BlockKind::Msfab)) {
        println!("observation: mean psnr msfab {m:.3} vs fab {f:.3}");
    }
}

#[derive(Args, Debug)]
pub struct CountArgs {
    /// Input side length for MACs and activations.
    #[arg(long, default_value_t = 256)]
    res: usize,
    /// macs or 2macs.
    #[arg(long, default_value = "macs")]
    convention: String,
}

/// Reference totals for the presets at 256×256.
const REFERENCE_PARAMS_B: u64 = 1_196_052;
const REFERENCE_GFLOPS_B: f64 = 19.03;

pub fn count(ctx: &Context, a: &CountArgs) -> Result<(), CliError> {
    let convention = FlopConvention::parse(&a.convention)?;
    let report = cost_report(&ctx.cfg.network, a.res, a.res)?;
    println!("{report}");
    let flops = report.flops(convention);
    println!(
        "params {} ({:+.2}% vs reference B {})",
        report.params,
        100.0 * (report.params as f64 / REFERENCE_PARAMS_B as f64 - 1.0),
        REFERENCE_PARAMS_B
    );
    println!(
        "flops {:.3}G under the {:?} convention (reference B at 256x256: {REFERENCE_GFLOPS_B}G)",
        flops as f64 / 1e9,
        convention
    );
    let path = ctx.out_dir()?.join("cost.jsonl");
    fs::write(&path, report.to_jsonl()).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut r = ctx.record("count");
    r.details = Some(serde_json::json!({
        "res": a.res,
        "params": report.params,
        "macs": report.macs,
        "flops": flops,
        "convention": convention,
        "peak_activation": report.peak_activation,
    }));
    ctx.append_record(&r)
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 64)]
    res: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// Overrides the configured key/value sampler: none, spp or spds.
    #[arg(long)]
    sampler: Option<String>,
}

fn median_secs(reps: usize, mut f: impl FnMut() -> Result<(), CliError>) -> Result<f64, CliError> {
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Seconds for one cross non-local evaluation on level-3 sized maps.
fn attention_secs(net: &NetworkConfig, sampler: &SamplerSpec, res: usize, reps: usize) -> Result<f64, CliError> {
    let c = 4 * net.base_channels;
    let side = res.next_multiple_of(16) / 4;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let nl = NonLocal::new(&mut store, "bench", c, net.embed_channels(), &mut rng)?;
    let q = Tensor::randn(&[1, c, side, side], 1.0, &mut rng);
    let kv = Tensor::randn(&[1, c, side, side], 1.0, &mut rng);
    median_secs(reps, || {
        let mut tape = Tape::new();
        let (qv, kvv) = (tape.constant(q.clone()), tape.constant(kv.clone()));
        nl.cnlb_forward(&mut tape, &store, qv, kvv, sampler)?;
        Ok(())
    })
}

pub fn bench(ctx: &Context, a: &BenchArgs) -> Result<(), CliError> {
    let mut net = ctx.cfg.network.clone();
    if let Some(s) = &a.sampler {
        net.sampler = SamplerSpec::parse(s)?;
    }
    let report = cost_report(&net, a.res, a.res)?;
    let model = Model::<f32>::build(&net, 0)?;
    let x = Tensor::rand_uniform(&[1, 3, a.res, a.res], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let forward = median_secs(a.reps, || {
        model.predict(&x, false)?;
        Ok(())
    })?;
    let attn = attention_secs(&net, &net.sampler, a.res, a.reps)?;
    let attn_full = attention_secs(&net, &SamplerSpec::None, a.res, a.reps)?;
    println!(
        "input {0}x{0}, {1} thread(s): forward {2:.4}s ({3:.2} GMAC/s)",
        a.res,
        ctx.threads,
        forward,
        report.macs as f64 / forward / 1e9
    );
    println!(
        "attention stage: {} {:.5}s vs none {:.5}s (ratio {:.3})",
        net.sampler.label(),
        attn,
        attn_full,
        attn / attn_full
    );
    let mut r = RunRecord::new("bench", &ctx.cfg, ctx.threads);
    r.details = Some(serde_json::json!({
        "res": a.res,
        "sampler": net.sampler.label(),
        "forward_s": forward,
        "attention_s": attn,
        "attention_none_s": attn_full,
        "macs": report.macs,
    }));
    r.wall_time_s = forward;
    ctx.append_record(&r)
}
