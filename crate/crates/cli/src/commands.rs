use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{ArgMatches, CommandFactory};
use hrank::data::{DatasetSource, InMemory, CIFAR10_MEAN, CIFAR10_STD};
use hrank::graph::{format, Network};
use hrank::planner::{build_freeze_mask, build_plan, FreezeMask, PruningPlan};
use hrank::rank::{estimate_ranks, rank_report, RankConfig, RankSet};
use hrank::surgeon::{apply_plan, count_complexity, format_count, reduction_report, ComplexityReport};
use hrank::trainer::{evaluate, train_from, OptimizerState, TrainConfig};

use crate::inputs::{self, load_model, open_data, read_text, require_data, with_workers, write_bytes};
use crate::manifest::{self, file_digest, FileDigest, Manifest};
use crate::{
    Command, DataArgs, EstimateArgs, FinetuneArgs, InitArgs, PlanArgs, PruneArgs, RankReportArgs, ReplayArgs,
    ReportArgs, UsageError,
};

/// Collects what a command read so the manifest can be written once it finishes.
struct Recorder {
    command: String,
    argv: Vec<String>,
    params: BTreeMap<String, Vec<String>>,
    inputs: Vec<FileDigest>,
    details: BTreeMap<String, String>,
    started: u64,
}

impl Recorder {
    fn new(command: &str, matches: &ArgMatches, argv: &[OsString]) -> Self {
        let args: Vec<String> = crate::Cli::command()
            .find_subcommand(command)
            .map(|c| c.get_arguments().map(|a| a.get_id().to_string()).collect())
            .unwrap_or_default();
        Recorder {
            command: command.to_string(),
            argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
            params: manifest::params(matches, &args),
            inputs: Vec::new(),
            details: BTreeMap::new(),
            started: manifest::now_unix(),
        }
    }

    fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.push(file_digest(role, path)?);
        Ok(())
    }

    fn data_inputs(&mut self, data: &DataArgs) -> Result<()> {
        for f in inputs::data_files(data) {
            if f.exists() {
                self.input("dataset_dir", &f)?;
            }
        }
        Ok(())
    }

    fn detail(&mut self, key: &str, value: impl Into<String>) {
        self.details.insert(key.to_string(), value.into());
    }

    fn fingerprint(&self) -> String {
        manifest::invocation_fingerprint(&self.command, &self.params, &self.inputs)
    }

    /// Writes the manifest next to the first output.
    fn finish(self, outputs: &[(&str, &Path)]) -> Result<PathBuf> {
        let invocation_fingerprint = self.fingerprint();
        let outputs = outputs
            .iter()
            .map(|(role, path)| file_digest(role, path))
            .collect::<Result<Vec<_>>>()?;
        let primary = outputs.first().expect("at least one output").path.clone();
        let m = Manifest {
            tool: format!("hrank {}", env!("CARGO_PKG_VERSION")),
            command: self.command,
            argv: self.argv,
            cwd: std::env::current_dir().context("cannot read the working directory")?,
            invocation_fingerprint,
            params: self.params,
            inputs: self.inputs,
            outputs,
            details: self.details,
            started_unix: self.started,
            finished_unix: manifest::now_unix(),
        };
        m.write(&primary)
    }
}

pub fn dispatch(command: Command, matches: &ArgMatches, argv: &[OsString]) -> Result<()> {
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    let rec = Recorder::new(name, sub, argv);
    match command {
        Command::Init(a) => init(a, rec),
        Command::EstimateRanks(a) => estimate(a, rec),
        Command::RankReport(a) => rank_report_cmd(a, rec),
        Command::Plan(a) => plan(a, rec),
        Command::Prune(a) => prune(a, rec),
        Command::Report(a) => report(a, rec),
        Command::Finetune(a) => finetune(a, rec),
        Command::Replay(a) => replay(a),
    }
}

fn save_model(mut net: Network, invocation: String, path: &Path) -> Result<Network> {
    net.metadata.insert("invocation".into(), invocation);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    format::save(&net, path)?;
    Ok(net)
}

fn init(a: InitArgs, rec: Recorder) -> Result<()> {
    let net = load_model(
        &crate::ModelArgs {
            model: None,
            preset: Some(a.preset.clone()),
        },
        &a.shape,
        a.seed,
    )?;
    let c = count_complexity(&net);
    let net = save_model(net, rec.fingerprint(), &a.out)?;
    println!(
        "{}: {} convolutions ({} prunable), {} FLOPs, {} params, fingerprint {}",
        a.preset,
        net.conv_ids().len(),
        net.prunable_conv_ids().len(),
        format_count(c.total_flops),
        format_count(c.total_params),
        &net.fingerprint()[..12]
    );
    rec.finish(&[("out", &a.out)])?;
    Ok(())
}

fn model_input(rec: &mut Recorder, model: &crate::ModelArgs) -> Result<()> {
    if let Some(path) = &model.model {
        rec.input("model", path)?;
    }
    Ok(())
}

fn normalization_line() -> String {
    format!("normalization: mean {CIFAR10_MEAN:?}, std {CIFAR10_STD:?} (per channel, on the [0, 1] scale)")
}

fn describe_data(rec: &mut Recorder, src: &dyn DatasetSource) {
    rec.detail("dataset", src.describe());
    if src.describe().starts_with("cifar10") {
        rec.detail("normalization", normalization_line());
    }
}

fn estimate(a: EstimateArgs, mut rec: Recorder) -> Result<()> {
    model_input(&mut rec, &a.model)?;
    rec.data_inputs(&a.data)?;
    let net = load_model(&a.model, &a.shape, a.seed)?;
    let src = require_data(&a.data)?;
    describe_data(&mut rec, src.as_ref());
    let cfg = RankConfig {
        g: a.g,
        batch_size: a.batch_size,
        seed: a.seed,
        capture_point: a.capture_point.parse()?,
        ..RankConfig::default()
    };
    let set = with_workers(a.workers, || estimate_ranks(&net, src.as_ref(), &cfg))??;
    write_bytes(&a.out, set.to_json().as_bytes())?;
    rec.detail("model_fingerprint", set.model_fingerprint.clone());
    rec.detail("stats_fingerprint", set.fingerprint());
    println!(
        "ranked {} layers over {} images from {} ({})",
        set.layers.len(),
        cfg.g,
        src.describe(),
        cfg.capture_point.as_str()
    );
    rec.finish(&[("out", &a.out)])?;
    Ok(())
}

fn load_stats(path: &Path) -> Result<RankSet> {
    Ok(RankSet::from_json(&read_text(path)?)?)
}

fn load_plan(path: &Path) -> Result<PruningPlan> {
    Ok(PruningPlan::from_json(&read_text(path)?)?)
}

fn rank_report_cmd(a: RankReportArgs, mut rec: Recorder) -> Result<()> {
    rec.input("stats", &a.stats)?;
    let set = load_stats(&a.stats)?;
    let report = rank_report(&set.layers);
    let text = if a.csv { report.to_csv() } else { report.to_text() };
    print!("{text}");
    if let Some(out) = &a.out {
        write_bytes(out, text.as_bytes())?;
        rec.finish(&[("out", out)])?;
    }
    Ok(())
}

fn plan(a: PlanArgs, mut rec: Recorder) -> Result<()> {
    rec.input("stats", &a.stats)?;
    if inputs::rates_is_file(&a.rates) {
        rec.input("rates", Path::new(&a.rates))?;
    }
    let stats = load_stats(&a.stats)?;
    let rates = inputs::load_rates(&a.rates)?;
    let plan = build_plan(&stats, &rates, &a.variant, a.seed)?;
    write_bytes(&a.out, plan.to_json().as_bytes())?;
    let total: usize = plan.layers.iter().map(|l| l.n_filters).sum();
    println!(
        "{} plan prunes {} of {} filters across {} layers",
        plan.provenance.variant,
        plan.total_pruned(),
        total,
        plan.layers.len()
    );
    rec.finish(&[("out", &a.out)])?;
    Ok(())
}

fn prune(a: PruneArgs, mut rec: Recorder) -> Result<()> {
    model_input(&mut rec, &a.model)?;
    rec.input("plan", &a.plan)?;
    if let Some(s) = &a.stats {
        rec.input("stats", s)?;
    }
    let net = load_model(&a.model, &a.shape, a.seed)?;
    let plan = load_plan(&a.plan)?;
    let fp = net.fingerprint();
    if plan.provenance.model_fingerprint != fp {
        return Err(hrank::Error::Consistency(format!(
            "plan was built from statistics of model {} but this model is {}",
            short(&plan.provenance.model_fingerprint),
            short(&fp)
        ))
        .into());
    }
    if let Some(path) = &a.stats {
        let stats = load_stats(path)?;
        if stats.fingerprint() != plan.provenance.stats_fingerprint || stats.model_fingerprint != fp {
            return Err(hrank::Error::Consistency(format!(
                "statistics {} do not match the plan ({}) and model ({})",
                short(&stats.fingerprint()),
                short(&plan.provenance.stats_fingerprint),
                short(&fp)
            ))
            .into());
        }
    }
    let before = count_complexity(&net);
    let pruned = apply_plan(&net, &plan)?;
    let after = count_complexity(&pruned);
    let pruned = save_model(pruned, rec.fingerprint(), &a.out)?;
    let r = reduction_report(&before, &after)?;
    rec.detail("model_fingerprint", fp);
    rec.detail("pruned_fingerprint", pruned.fingerprint());
    println!(
        "pruned {} filters: FLOPs {} -> {} ({:.1}%), params {} -> {} ({:.1}%)",
        plan.total_pruned(),
        format_count(before.total_flops),
        format_count(after.total_flops),
        r.flops_pr,
        format_count(before.total_params),
        format_count(after.total_params),
        r.params_pr
    );
    rec.finish(&[("out", &a.out)])?;
    Ok(())
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}

fn evaluation_source(src: Box<dyn DatasetSource>, limit: Option<usize>) -> Box<dyn DatasetSource> {
    match limit {
        Some(n) if n < src.len() => Box::new(InMemory::subset(src.as_ref(), &(0..n).collect::<Vec<_>>())),
        _ => src,
    }
}

fn complexity_cell(count: u64, pr: f64) -> String {
    format!("{}({:.1}%)", format_count(count), pr)
}

fn report(a: ReportArgs, mut rec: Recorder) -> Result<()> {
    model_input(&mut rec, &a.model)?;
    if let Some(p) = &a.pruned {
        rec.input("pruned", p)?;
    }
    rec.data_inputs(&a.data)?;
    let base = load_model(&a.model, &a.shape, a.seed)?;
    let pruned = match &a.pruned {
        Some(p) => format::load(p)?,
        None => base.clone(),
    };
    let src = open_data(&a.data)?.map(|s| evaluation_source(s, a.limit));
    if let Some(s) = &src {
        describe_data(&mut rec, s.as_ref());
    }
    let (cb, cp) = (count_complexity(&base), count_complexity(&pruned));
    let r = reduction_report(&cb, &cp)?;
    let top1 = |net: &Network| -> Result<String> {
        Ok(match &src {
            Some(s) => format!("{:.2}", 100.0 * evaluate(net, s.as_ref())?),
            None => "-".into(),
        })
    };
    let name = |net: &Network, fallback: &str| {
        net.metadata
            .get("preset")
            .map_or(fallback.to_string(), |p| format!("{p} ({fallback})"))
    };
    let mut text = String::new();
    writeln!(text, "{:<28} {:>8} {:>18} {:>18}", "Model", "Top-1%", "FLOPs(PR)", "Parameters(PR)")?;
    writeln!(
        text,
        "{:<28} {:>8} {:>18} {:>18}",
        name(&base, "baseline"),
        top1(&base)?,
        complexity_cell(cb.total_flops, 0.0),
        complexity_cell(cb.total_params, 0.0)
    )?;
    writeln!(
        text,
        "{:<28} {:>8} {:>18} {:>18}",
        name(&pruned, "pruned"),
        top1(&pruned)?,
        complexity_cell(cp.total_flops, r.flops_pr),
        complexity_cell(cp.total_params, r.params_pr)
    )?;
    writeln!(text, "FLOPs count one multiply-accumulate as one operation; parameters include biases and batchnorm affine pairs.")?;
    if let Some(s) = &src {
        writeln!(text, "top-1 measured on {} images of {}", s.len(), s.describe())?;
        if s.describe().starts_with("cifar10") {
            writeln!(text, "{}", normalization_line())?;
        }
    }
    if a.breakdown {
        text.push_str(&breakdown(&cb, &cp));
    }
    print!("{text}");
    if let Some(out) = &a.out {
        write_bytes(out, text.as_bytes())?;
        rec.finish(&[("out", out)])?;
    }
    Ok(())
}

fn breakdown(before: &ComplexityReport, after: &ComplexityReport) -> String {
    let mut text = String::new();
    let _ = writeln!(text, "{:>5} {:<28} {:>14} {:>14} {:>12} {:>12}", "id", "layer", "flops", "flops_after", "params", "params_after");
    for l in before.layers.iter().filter(|l| l.flops > 0 || l.params > 0) {
        let a = after.layers.iter().find(|x| x.layer_id == l.layer_id);
        let _ = writeln!(
            text,
            "{:>5} {:<28} {:>14} {:>14} {:>12} {:>12}",
            l.layer_id,
            l.name,
            l.flops,
            a.map_or(0, |x| x.flops),
            l.params,
            a.map_or(0, |x| x.params)
        );
    }
    text
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn finetune(a: FinetuneArgs, mut rec: Recorder) -> Result<()> {
    model_input(&mut rec, &a.model)?;
    rec.data_inputs(&a.data)?;
    for (role, p) in [("plan", &a.plan), ("stats", &a.stats), ("optimizer", &a.optimizer)] {
        if let Some(p) = p {
            rec.input(role, p)?;
        }
    }
    let net = load_model(&a.model, &a.shape, a.seed)?;
    let src = require_data(&a.data)?;
    describe_data(&mut rec, src.as_ref());
    let mask = if a.freeze_fraction > 0.0 {
        let (Some(plan), Some(stats)) = (&a.plan, &a.stats) else {
            bail!(UsageError("--freeze-fraction needs --plan and --stats".into()));
        };
        let plan = load_plan(plan)?;
        if let Some(origin) = net.metadata.get("pruned_from") {
            if *origin != plan.provenance.model_fingerprint {
                return Err(hrank::Error::Consistency(format!(
                    "model was pruned from {} but the plan belongs to {}",
                    short(origin),
                    short(&plan.provenance.model_fingerprint)
                ))
                .into());
            }
        }
        let mask = build_freeze_mask(&plan, &load_stats(stats)?, a.freeze_fraction)?;
        mask.check_against(&net)?;
        mask
    } else {
        FreezeMask::none()
    };
    let optimizer = match &a.optimizer {
        Some(p) => OptimizerState::decode(&std::fs::read(p).with_context(|| format!("cannot read {}", p.display()))?)?,
        None => OptimizerState::default(),
    };
    let cfg = TrainConfig {
        learning_rate: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        epochs: a.epochs,
        lr_drop_epochs: a.lr_drops.clone(),
        seed: a.seed,
    };
    let outcome = with_workers(a.workers, || train_from(&net, &mask, src.as_ref(), &cfg, optimizer))??;
    save_model(outcome.net, rec.fingerprint(), &a.out)?;
    let optim_path = sibling(&a.out, ".optim");
    write_bytes(&optim_path, &outcome.optimizer.encode())?;
    let mut csv = String::from("epoch,lr,loss,top1\n");
    for e in &outcome.trajectory {
        writeln!(csv, "{},{:e},{:.6},{:.6}", e.epoch, e.lr, e.loss, e.top1)?;
    }
    let traj_path = sibling(&a.out, ".trajectory.csv");
    write_bytes(&traj_path, csv.as_bytes())?;
    rec.detail("frozen_filters", mask.total_frozen().to_string());
    match outcome.trajectory.last() {
        Some(e) => println!(
            "trained {} epochs, {} filters frozen: loss {:.4}, training top-1 {:.2}%",
            cfg.epochs,
            mask.total_frozen(),
            e.loss,
            100.0 * e.top1
        ),
        None => println!("0 epochs: model copied unchanged"),
    }
    rec.finish(&[("out", &a.out), ("optimizer", &optim_path), ("trajectory", &traj_path)])?;
    Ok(())
}

fn replay(a: ReplayArgs) -> Result<()> {
    let m = Manifest::read(&a.manifest)?;
    let out = a.out.as_deref().map(std::path::absolute).transpose()?;
    std::env::set_current_dir(&m.cwd).with_context(|| format!("cannot enter {}", m.cwd.display()))?;
    for input in &m.inputs {
        let now = file_digest(&input.role, &input.path)?;
        if now.sha256 != input.sha256 {
            return Err(hrank::Error::Consistency(format!(
                "input {} changed since the manifest was written",
                input.path.display()
            ))
            .into());
        }
    }
    let argv = match &out {
        Some(out) => manifest::override_out(&m.argv, out),
        None => m.argv.clone(),
    };
    crate::run(argv)?;
    let primary = match out {
        Some(out) => out,
        None => m.outputs.first().context("manifest lists no outputs")?.path.clone(),
    };
    let fresh = Manifest::read(&manifest::manifest_path(&primary))?;
    if fresh.invocation_fingerprint != m.invocation_fingerprint {
        bail!(hrank::Error::Consistency("replayed invocation fingerprint differs from the manifest".into()));
    }
    if fresh.outputs.len() != m.outputs.len() {
        bail!(hrank::Error::Consistency(format!(
            "replay wrote {} outputs, the manifest lists {}",
            fresh.outputs.len(),
            m.outputs.len()
        )));
    }
    for (old, new) in m.outputs.iter().zip(&fresh.outputs) {
        if old.sha256 != new.sha256 {
            bail!(hrank::Error::Consistency(format!(
                "replayed {} differs from the recorded output {}",
                new.path.display(),
                old.path.display()
            )));
        }
    }
    println!("replayed {}: {} outputs byte-identical", m.command, m.outputs.len());
    Ok(())
}
