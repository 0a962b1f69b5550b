//! The `vpn` command line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpn_core::data::{dynamicity, generate_synthetic, make_batch, SampleRecord, CLASS_NAMES};
use vpn_core::diff::{Tape, Tensor};
use vpn_core::embedding::embedding_loss;
use vpn_core::model::{end_to_end_gradient_check, forward, Model, ModelConfig};
use vpn_core::posegraph::{Mode, PoseBackboneKind};
use vpn_core::train::{ablate, ablation_grid, evaluate, find_variant, summarize, train_loop, AblationCell, EvalReport, History};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{resolve, RunConfig};
use crate::error::Error;
use crate::io::{load_dataset, save_dataset};

pub const CHECKPOINT_NAME: &str = "checkpoint.vpnc";

#[derive(Debug, Parser)]
#[command(name = "vpn", version, about = "Pose-guided video attention on a synthetic action task")]
pub struct Cli {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the train and test splits as dataset directories.
    Gen,
    /// Train one model; writes the checkpoint and loss history.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate the ablation grid over several seeds.
    Ablate,
    /// Finite-difference check of every parameter group on the toy model.
    Gradcheck,
    /// Per-sample dynamicity of the test split, binned.
    Dynamicity {
        /// Adds per-bin accuracy of this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Process exit code for a failed run.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.kind() == "config" => 2,
        _ => 1,
    }
}

/// The final `error: kind=… msg="…"` line.
pub fn error_line(err: &anyhow::Error) -> String {
    let kind = err.downcast_ref::<Error>().map_or("failed", Error::kind);
    let msg = format!("{err:#}");
    format!("error: kind={kind} msg={msg:?}")
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = resolve(cli.config.as_deref(), &cli.overrides)?;
    match &cli.command {
        Command::Eval { checkpoint: Some(p) } | Command::Dynamicity { checkpoint: Some(p) } => cfg.eval.checkpoint = Some(p.clone()),
        _ => {}
    }
    fs::create_dir_all(&cli.out).map_err(|e| Error::Io { path: cli.out.clone(), source: e })?;
    cfg.write_snapshot(&cli.out)?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Gen => gen(&cfg, out),
        Command::Train => train(&cfg, out),
        Command::Eval { .. } => eval(&cfg, out),
        Command::Ablate => run_ablation(&cfg, out),
        Command::Gradcheck => gradcheck(&cfg, out),
        Command::Dynamicity { .. } => dynamicity_report(&cfg, out),
    }
}

fn train_split(cfg: &RunConfig) -> anyhow::Result<Vec<SampleRecord>> {
    Ok(match &cfg.data.train_manifest {
        Some(p) => load_dataset(p)?,
        None => generate_synthetic(&cfg.data.synthetic).map_err(Error::from)?,
    })
}

fn test_split(cfg: &RunConfig) -> anyhow::Result<Vec<SampleRecord>> {
    Ok(match &cfg.data.test_manifest {
        Some(p) => load_dataset(p)?,
        None => generate_synthetic(&cfg.data.test_spec()).map_err(Error::from)?,
    })
}

fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))
}

fn gen(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    for (name, samples) in [("train", train_split(cfg)?), ("test", test_split(cfg)?)] {
        let manifest = save_dataset(&out.join(name), &samples)?;
        println!("{name}: {} samples -> {}", samples.len(), manifest.display());
    }
    Ok(())
}

fn initial_model(cfg: &RunConfig) -> anyhow::Result<Model> {
    let fresh = Model::new(cfg.train.model.clone(), cfg.train.seed).map_err(Error::from)?;
    let Some(path) = &cfg.warm_start else {
        return Ok(fresh);
    };
    let loaded = load_checkpoint(path)?;
    let model = Model::from_parts(cfg.train.model.clone(), loaded.params).map_err(Error::from)?;
    model
        .check_params_against(&fresh.params)
        .map_err(|e| Error::Config(format!("warm start {}: {e}", path.display())))?;
    log::info!("warm start from {}", path.display());
    Ok(model)
}

pub fn write_history(dir: &Path, history: &History) -> anyhow::Result<()> {
    let mut w = csv_writer(&dir.join("history.csv"))?;
    w.write_record(["epoch", "L", "L_C", "L_e", "L_a", "train_acc", "lr"])?;
    for e in &history.epochs {
        w.write_record([
            e.epoch.to_string(),
            e.total.to_string(),
            e.classification.to_string(),
            e.embedding.to_string(),
            e.attention.to_string(),
            e.train_acc.to_string(),
            e.lr.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv_writer(&dir.join("steps.csv"))?;
    w.write_record(["epoch", "step", "lr", "L", "L_C", "L_e", "L_a", "lambda1", "lambda2", "norm_tv", "norm_tp"])?;
    for s in &history.steps {
        w.write_record([
            s.epoch.to_string(),
            s.step.to_string(),
            s.lr.to_string(),
            s.total.to_string(),
            s.classification.to_string(),
            s.embedding.to_string(),
            s.attention.to_string(),
            s.lambda1.to_string(),
            s.lambda2.to_string(),
            s.projection_norms[0].to_string(),
            s.projection_norms[1].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let data = train_split(cfg)?;
    let mut model = initial_model(cfg)?;
    let history = train_loop(&mut model, &data, &cfg.train).map_err(Error::from)?;
    write_history(out, &history)?;
    save_checkpoint(&out.join(CHECKPOINT_NAME), &model)?;
    let last = history.epochs.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} samples: loss {:.6} train_acc {:.4} max_decomposition_error {:e}",
        history.epochs.len(),
        data.len(),
        last.total,
        last.train_acc,
        history.max_decomposition_error()
    );
    Ok(())
}

fn checkpoint_model(cfg: &RunConfig) -> anyhow::Result<Model> {
    let path = cfg
        .eval
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("no checkpoint given (--checkpoint or eval.checkpoint)".into()))?;
    Ok(load_checkpoint(path)?)
}

fn class_name(c: usize) -> String {
    CLASS_NAMES.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string())
}

fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

pub fn write_report(dir: &Path, report: &EvalReport, classes: usize) -> anyhow::Result<()> {
    let mut w = csv_writer(&dir.join("predictions.csv"))?;
    let mut header = vec!["id".to_string(), "label".into(), "predicted".into()];
    header.extend((0..classes).map(|c| format!("p{c}")));
    w.write_record(&header)?;
    for p in &report.predictions {
        let mut row = vec![p.id.clone(), p.label.to_string(), p.predicted.to_string()];
        row.extend(p.probs.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    let mut w = csv_writer(&dir.join("per_class.csv"))?;
    w.write_record(["class", "name", "count", "accuracy"])?;
    for (c, acc) in report.per_class.iter().enumerate() {
        let count: usize = report.confusion[c].iter().sum();
        w.write_record([c.to_string(), class_name(c), count.to_string(), acc.map_or(String::new(), |a| a.to_string())])?;
    }
    w.flush()?;
    let mut w = csv_writer(&dir.join("confusion.csv"))?;
    let mut header = vec!["true".to_string()];
    header.extend((0..classes).map(|c| format!("pred{c}")));
    w.write_record(&header)?;
    for (c, row) in report.confusion.iter().enumerate() {
        let mut r = vec![c.to_string()];
        r.extend(row.iter().map(usize::to_string));
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

/// Attention maps and embeddings from a plain evaluation-mode forward pass.
fn write_dumps(cfg: &RunConfig, out: &Path, model: &Model, data: &[SampleRecord]) -> anyhow::Result<()> {
    let mc = &model.config;
    if !mc.attention_enabled {
        bail!(Error::Config("attention dumps need a model with attention_enabled = true".into()));
    }
    let mut attention = cfg.eval.dump_attention.then(|| csv_writer(&out.join("attention.csv"))).transpose()?;
    let mut embedding = (cfg.eval.dump_embedding && mc.embedding_enabled).then(|| csv_writer(&out.join("embedding.csv"))).transpose()?;
    if let Some(w) = &mut attention {
        w.write_record(["id", "spatial", "temporal", "coupled"])?;
    }
    if let Some(w) = &mut embedding {
        w.write_record(["id", "loss", "f_hat", "p_hat"])?;
    }
    for chunk in data.chunks(cfg.train.batch_size) {
        let batch: Vec<&SampleRecord> = chunk.iter().collect();
        let (video, poses, _) = make_batch(&batch, mc.t_p).map_err(Error::from)?;
        let mut tape = Tape::new();
        let params = model.params.bind(&mut tape, false);
        let fwd = forward(&mut tape, model, &params, &video, &poses, Mode::Eval, None).map_err(Error::from)?;
        let pose = fwd.vpn.pose.as_ref().expect("attention enabled");
        let (mn, tc) = (mc.m * mc.n, mc.t_c);
        let spatial = tape.value(pose.weights.spatial).data().to_vec();
        let temporal = tape.value(pose.weights.temporal).data().to_vec();
        let coupled = fwd.vpn.coupled.map(|v| tape.value(v).data().to_vec());
        let pair = fwd.vpn.embedding;
        let emb = match pair {
            Some(p) => {
                let l = embedding_loss(&mut tape, &p, mc.embedding_loss_kind).map_err(Error::from)?;
                Some((tape.value(l).data().to_vec(), tape.value(p.f_hat).data().to_vec(), tape.value(p.p_hat).data().to_vec()))
            }
            None => None,
        };
        for (b, s) in batch.iter().enumerate() {
            if let Some(w) = &mut attention {
                let st = coupled.as_ref().map_or(String::new(), |c| join(&c[b * tc * mn..(b + 1) * tc * mn]));
                w.write_record([s.id.clone(), join(&spatial[b * mn..(b + 1) * mn]), join(&temporal[b * tc..(b + 1) * tc]), st])?;
            }
            if let (Some(w), Some((loss, f, p))) = (&mut embedding, &emb) {
                let d = mc.d_e;
                w.write_record([s.id.clone(), loss[b].to_string(), join(&f[b * d..(b + 1) * d]), join(&p[b * d..(b + 1) * d])])?;
            }
        }
    }
    for w in [attention.as_mut(), embedding.as_mut()].into_iter().flatten() {
        w.flush()?;
    }
    Ok(())
}

fn eval(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let model = checkpoint_model(cfg)?;
    let data = test_split(cfg)?;
    let report = evaluate(&model, &data, cfg.train.batch_size).map_err(Error::from)?;
    write_report(out, &report, model.config.classes)?;
    if cfg.eval.dump_attention || cfg.eval.dump_embedding {
        write_dumps(cfg, out, &model, &data)?;
    }
    println!("accuracy {} on {} samples", report.accuracy, data.len());
    Ok(())
}

fn run_ablation(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let variants = if cfg.ablate.variants.is_empty() {
        ablation_grid()
    } else {
        cfg.ablate.variants.iter().map(|n| find_variant(n).expect("validated")).collect()
    };
    let train = train_split(cfg)?;
    let test = test_split(cfg)?;
    let mut cells_csv = csv_writer(&out.join("ablation.csv"))?;
    cells_csv.write_record(["variant", "seed", "accuracy", "pair_accuracy", "error"])?;
    let mut write_err = None;
    let cells = ablate(&train, &test, &cfg.train, &variants, &cfg.ablate.seeds, cfg.ablate.pair, |cell: &AblationCell| {
        let row = match &cell.outcome {
            Ok((acc, pair)) => [cell.variant.clone(), cell.seed.to_string(), acc.to_string(), pair.map_or(String::new(), |p| p.to_string()), String::new()],
            Err(msg) => [cell.variant.clone(), cell.seed.to_string(), String::new(), String::new(), msg.clone()],
        };
        println!("{}", row.join(","));
        if let Err(e) = cells_csv.write_record(&row).and_then(|_| cells_csv.flush().map_err(Into::into)) {
            write_err.get_or_insert(e);
        }
    })
    .map_err(Error::from)?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let mut w = csv_writer(&out.join("ablation_summary.csv"))?;
    w.write_record(["variant", "runs", "failures", "mean", "std", "pair_mean"])?;
    for s in summarize(&cells) {
        w.write_record([
            s.variant.clone(),
            s.runs.to_string(),
            s.failures.to_string(),
            s.mean.to_string(),
            s.std.to_string(),
            s.pair_mean.map_or(String::new(), |p| p.to_string()),
        ])?;
        println!("{}: {:.4} ± {:.4} over {} runs", s.variant, s.mean, s.std, s.runs);
    }
    w.flush()?;
    Ok(())
}

/// Uniform video in `[0, 1]` and poses in `[-1, 1]` for the toy geometry.
pub fn gradcheck_inputs(cfg: &ModelConfig, batch: usize, seed: u64) -> (Tensor, Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vshape = [batch, cfg.video_frames, cfg.video_height, cfg.video_width, 3];
    let video = Tensor::from_fn(&vshape, |_| rng.gen_range(0.0..1.0)).expect("finite");
    let poses = Tensor::from_fn(&[batch, 3, cfg.joints, cfg.t_p], |_| rng.gen_range(-1.0..1.0)).expect("finite");
    let labels = (0..batch).map(|b| b % cfg.classes).collect();
    (video, poses, labels)
}

fn backbone_name(kind: PoseBackboneKind) -> &'static str {
    match kind {
        PoseBackboneKind::Gcn => "gcn",
        PoseBackboneKind::Recurrent => "recurrent",
    }
}

fn gradcheck(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let g = &cfg.gradcheck;
    let mut w = csv_writer(&out.join("gradcheck.csv"))?;
    w.write_record(["backbone", "loss", "group", "max_rel_error"])?;
    let mut worst = 0.0f64;
    for &kind in &g.backbones {
        for &loss in &g.losses {
            let mc = ModelConfig { pose_backbone_kind: kind, embedding_loss_kind: loss, ..ModelConfig::gradcheck_toy() };
            let model = Model::new(mc.clone(), g.seed).map_err(Error::from)?;
            let (video, poses, labels) = gradcheck_inputs(&mc, g.batch, g.seed);
            let coords = (g.max_coords > 0).then_some(g.max_coords);
            let check = end_to_end_gradient_check(&model, &video, &poses, &labels, g.step, coords).map_err(Error::from)?;
            for (group, err) in check.by_group() {
                w.write_record([backbone_name(kind), loss.name(), &group, &err.to_string()])?;
            }
            println!("{} {}: max_rel_error {:e} over {} coordinates", backbone_name(kind), loss.name(), check.report.max_rel_error, check.report.coords_checked);
            worst = worst.max(check.report.max_rel_error);
        }
    }
    w.flush()?;
    println!("max_rel_error={worst:e}");
    if !(worst < g.tolerance) {
        bail!("gradient check failed: max relative error {worst:e} >= {:e}", g.tolerance);
    }
    Ok(())
}

/// Equal-count bin of each position in ascending order.
pub fn equal_count_bins(n: usize, bins: usize) -> Vec<usize> {
    (0..n).map(|k| k * bins / n.max(1)).collect()
}

fn dynamicity_report(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let data = test_split(cfg)?;
    let values = data.iter().map(|s| dynamicity(&s.poses)).collect::<Result<Vec<f64>, _>>().map_err(Error::from)?;
    let correct: Option<Vec<bool>> = match &cfg.eval.checkpoint {
        Some(_) => {
            let model = checkpoint_model(cfg)?;
            let report = evaluate(&model, &data, cfg.train.batch_size).map_err(Error::from)?;
            Some(report.predictions.iter().map(|p| p.predicted == p.label).collect())
        }
        None => None,
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let bins = cfg.dynamicity.bins.min(data.len()).max(1);
    let mut bin_of = vec![0; data.len()];
    for (k, b) in equal_count_bins(data.len(), bins).into_iter().enumerate() {
        bin_of[order[k]] = b;
    }
    let mut w = csv_writer(&out.join("dynamicity.csv"))?;
    w.write_record(["id", "label", "dynamicity", "bin", "correct"])?;
    for (i, s) in data.iter().enumerate() {
        let c = correct.as_ref().map_or(String::new(), |c| (c[i] as u8).to_string());
        w.write_record([s.id.clone(), s.label.to_string(), values[i].to_string(), bin_of[i].to_string(), c])?;
    }
    w.flush()?;
    let mut w = csv_writer(&out.join("dynamicity_bins.csv"))?;
    w.write_record(["bin", "lo", "hi", "count", "accuracy"])?;
    for b in 0..bins {
        let members: Vec<usize> = (0..data.len()).filter(|&i| bin_of[i] == b).collect();
        if members.is_empty() {
            continue;
        }
        let lo = members.iter().map(|&i| values[i]).fold(f64::INFINITY, f64::min);
        let hi = members.iter().map(|&i| values[i]).fold(f64::NEG_INFINITY, f64::max);
        let acc = correct.as_ref().map_or(String::new(), |c| {
            (members.iter().filter(|&&i| c[i]).count() as f64 / members.len() as f64).to_string()
        });
        w.write_record([b.to_string(), lo.to_string(), hi.to_string(), members.len().to_string(), acc.clone()])?;
        println!("bin {b}: dynamicity {lo:.4}..{hi:.4}, {} samples {}", members.len(), if acc.is_empty() { String::new() } else { format!("accuracy {acc}") });
    }
    w.flush()?;
    Ok(())
}

/// Parses `args`, runs, and reports failures on the last line of stderr.
pub fn main_with_args(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 2 } else { 0 };
            }
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            let _ = write!(std::io::stderr(), "{rendered}");
            eprintln!("error: kind=usage msg={first:?}");
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            exit_code(&e)
        }
    }
}
