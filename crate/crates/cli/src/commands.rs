//! Command implementations: config resolution, run orchestration, file
//! output. Every run directory is self-describing: the echoed config plus
//! the seed list reproduce the run bit-exactly.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use ecr_core::autodiff::{checkpoint, ParameterSet};
use ecr_core::config::RunConfig;
use ecr_core::eval::{
    evaluate, merge_ports, pca, reshuffle_orders, transfer_evaluate, EvalReport, LearnedPolicy,
    NoRepositioningPolicy, Policy, ProportionalHeuristicPolicy, RandomPolicy,
};
use ecr_core::sim::topology::Topology;
use ecr_core::sim::{EcrEnv, PortId};
use ecr_core::train::{
    finetune, pretrain, train_normal_gc, trainer::metrics_to_csv, IterationMetrics, TrainSettings,
};

use crate::{AblationName, Command, PolicyName, RunArgs};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Pretrain(args) => cmd_pretrain(&args),
        Command::Train { run, skip_pretrain } => cmd_train(&run, skip_pretrain),
        Command::Evaluate {
            run,
            policy,
            checkpoint,
            export_events,
        } => cmd_evaluate(&run, policy, checkpoint.as_deref(), export_events),
        Command::Baseline(args) => cmd_baseline(&args),
        Command::Transfer {
            run,
            checkpoint,
            merge,
            shuffle_seed,
        } => cmd_transfer(&run, &checkpoint, merge.as_deref(), shuffle_seed),
        Command::ExportEmbeddings { run, checkpoint } => cmd_export_embeddings(&run, &checkpoint),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::ValidateTopology { path } => {
            Topology::load(&path)?;
            println!("{}: valid", path.display());
            Ok(())
        }
        Command::GenerateTopology {
            ports,
            routes,
            vessels,
            seed,
            out,
        } => {
            let topo = ecr_core::sim::topology::generate(ports, routes, vessels, seed)?;
            topo.save(&out)?;
            println!(
                "wrote {} ({} ports, {} routes, {} vessels)",
                out.display(),
                topo.ports.len(),
                topo.routes.len(),
                topo.vessels.len()
            );
            Ok(())
        }
    }
}

/// Seeds accept "3", "0,1,2", or inclusive ranges "0..4".
fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    if let Some((lo, hi)) = text.split_once("..") {
        let lo: u64 = lo.trim().parse().context("seed range start")?;
        let hi: u64 = hi.trim().parse().context("seed range end")?;
        if hi < lo {
            bail!("seed range {text} is empty");
        }
        return Ok((lo..=hi).collect());
    }
    text.split(',')
        .map(|s| s.trim().parse::<u64>().context("seed list entry"))
        .collect()
}

fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(seeds) = &args.seeds {
        cfg.seeds = parse_seeds(seeds)?;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.display().to_string();
    }
    if let Some(episodes) = args.episodes {
        cfg.episodes_per_iteration = episodes;
    }
    for ablation in &args.ablations {
        match ablation {
            AblationName::NormalGc => cfg.ablation.normal_gc = true,
            AblationName::SeparateActors => cfg.ablation.separate_actors = true,
            AblationName::DecoderOnly => cfg.ablation.decoder_only = true,
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.json"), cfg.to_json())?;
    Ok(dir)
}

fn settings_from(cfg: &RunConfig, out_dir: &Path) -> TrainSettings {
    TrainSettings {
        net: cfg.network.clone(),
        weights: cfg.loss,
        optimizer: cfg.optimizer,
        pretrain_iterations: cfg.pretrain_iterations,
        finetune_iterations: cfg.finetune_iterations,
        episodes_per_iteration: cfg.episodes_per_iteration,
        separate_actors: cfg.ablation.separate_actors,
        decoder_only: cfg.ablation.decoder_only,
        checkpoint_every: cfg.checkpoint_every,
        checkpoint_dir: (cfg.checkpoint_every > 0).then(|| out_dir.to_path_buf()),
    }
}

fn build_env(cfg: &RunConfig) -> Result<EcrEnv> {
    let topo = cfg.load_topology(None)?;
    Ok(EcrEnv::new(
        topo,
        cfg.sim_params(),
        cfg.network.n_lookback,
        false,
    )?)
}

fn write_metrics(dir: &Path, seed: u64, metrics: &[IterationMetrics]) -> Result<()> {
    fs::write(
        dir.join(format!("metrics_seed{seed}.csv")),
        metrics_to_csv(metrics),
    )?;
    Ok(())
}

fn cmd_pretrain(args: &RunArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    let dir = prepare_out_dir(&cfg)?;
    let settings = settings_from(&cfg, &dir);
    for &seed in &cfg.seeds {
        let mut env = build_env(&cfg)?;
        log::info!("pretrain seed {seed}: {} iterations", settings.pretrain_iterations);
        let (params, metrics) = pretrain(&mut env, &settings, seed)?;
        write_metrics(&dir, seed, &metrics)?;
        checkpoint::save(&params, &dir.join(format!("checkpoint_pretrain_seed{seed}.ckpt")))?;
        let last = metrics.last().map(|m| m.fulfillment).unwrap_or(0.0);
        println!("seed {seed}: pretrain done, final fulfillment {last:.4}");
    }
    Ok(())
}

fn cmd_train(args: &RunArgs, skip_pretrain: bool) -> Result<()> {
    let mut cfg = resolve_config(args)?;
    if skip_pretrain {
        cfg.ablation.normal_gc = true;
    }
    let dir = prepare_out_dir(&cfg)?;
    let settings = settings_from(&cfg, &dir);

    for &seed in &cfg.seeds {
        let mut env = build_env(&cfg)?;
        let mut all_metrics = Vec::new();
        let final_params: ParameterSet;
        if cfg.ablation.normal_gc {
            log::info!("train seed {seed}: global-critic-only, {} iterations", settings.finetune_iterations);
            let (params, metrics) = train_normal_gc(&mut env, &settings, seed)?;
            all_metrics.extend(metrics);
            final_params = params;
        } else {
            log::info!(
                "train seed {seed}: {} pretrain + {} finetune iterations",
                settings.pretrain_iterations,
                settings.finetune_iterations
            );
            let (pre, pre_metrics) = pretrain(&mut env, &settings, seed)?;
            checkpoint::save(&pre, &dir.join(format!("checkpoint_pretrain_seed{seed}.ckpt")))?;
            all_metrics.extend(pre_metrics);
            let (fine, fine_metrics) = finetune(&mut env, &pre, &settings, seed)?;
            all_metrics.extend(fine_metrics);
            final_params = fine;
        }
        write_metrics(&dir, seed, &all_metrics)?;
        checkpoint::save(
            &final_params,
            &dir.join(format!("checkpoint_final_seed{seed}.ckpt")),
        )?;
        let last = all_metrics.last().map(|m| m.fulfillment).unwrap_or(0.0);
        println!("seed {seed}: training done, final fulfillment {last:.4}");
    }
    Ok(())
}

fn make_policy(
    cfg: &RunConfig,
    name: PolicyName,
    checkpoint_path: Option<&Path>,
) -> Result<Box<dyn Policy>> {
    Ok(match name {
        PolicyName::None => Box::new(NoRepositioningPolicy),
        PolicyName::Random => Box::new(RandomPolicy::new(ecr_core::config::seed_stream(
            cfg.seeds[0],
            "random-policy",
            0,
        ))),
        PolicyName::Heuristic => Box::new(ProportionalHeuristicPolicy::default()),
        PolicyName::Learned => {
            let path = checkpoint_path
                .ok_or_else(|| anyhow!("--policy learned requires --checkpoint"))?;
            let params = checkpoint::load(path)?;
            Box::new(LearnedPolicy::new(
                params,
                cfg.network.clone(),
                cfg.ablation.decoder_only,
            ))
        }
    })
}

fn print_report(report: &EvalReport) {
    println!(
        "{}: mean {:.4} ± {:.4} over {} seed(s)",
        report.policy, report.mean, report.std_dev, report.episodes
    );
}

fn report_file_name(prefix: &str, cfg: &RunConfig, policy: &str) -> String {
    let seeds = cfg
        .seeds
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join("-");
    format!("{prefix}_{policy}_{}_{}_seeds{}.csv", cfg.topology_tag(), cfg.mode, seeds)
}

trait TopologyTag {
    fn topology_tag(&self) -> String;
}

impl TopologyTag for RunConfig {
    fn topology_tag(&self) -> String {
        if self.topology == "bundled" {
            "bundled".into()
        } else {
            Path::new(&self.topology)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "topology".into())
        }
    }
}

fn cmd_evaluate(
    args: &RunArgs,
    policy_name: PolicyName,
    ckpt: Option<&Path>,
    export_events: bool,
) -> Result<()> {
    let cfg = resolve_config(args)?;
    let dir = prepare_out_dir(&cfg)?;
    let mut env = build_env(&cfg)?;
    let mut policy = make_policy(&cfg, policy_name, ckpt)?;
    let report = evaluate(&mut env, policy.as_mut(), &cfg.seeds)?;
    print_report(&report);
    let name = report_file_name("eval", &cfg, &report.policy);
    fs::write(dir.join(&name), report.to_csv())?;
    fs::write(
        dir.join(name.replace("eval_", "ports_")),
        report.per_port_csv(),
    )?;
    if export_events {
        let seed = cfg.seeds[0];
        let topo = cfg.load_topology(None)?;
        let mut logged = EcrEnv::new(topo, cfg.sim_params(), cfg.network.n_lookback, true)?;
        logged.reset(seed)?;
        let mut result = logged.step(&[])?;
        while !result.done {
            let mut actions = Vec::with_capacity(result.requests.len());
            for request in &result.requests {
                actions.push((request.port, request.vessel, policy.decide(&logged, request)?));
            }
            result = logged.step(&actions)?;
        }
        let path = dir.join(format!("events_seed{seed}.jsonl"));
        ecr_core::sim::event_log::write_events(logged.events(), &path)?;
        println!("wrote {} ({} events)", path.display(), logged.events().len());
    }
    Ok(())
}

fn cmd_baseline(args: &RunArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    let dir = prepare_out_dir(&cfg)?;
    for name in [PolicyName::None, PolicyName::Random, PolicyName::Heuristic] {
        let mut env = build_env(&cfg)?;
        let mut policy = make_policy(&cfg, name, None)?;
        let report = evaluate(&mut env, policy.as_mut(), &cfg.seeds)?;
        print_report(&report);
        fs::write(
            dir.join(report_file_name("eval", &cfg, &report.policy)),
            report.to_csv(),
        )?;
    }
    Ok(())
}

/// Default merge pick: the two non-hub ports with the largest trade volume,
/// taken from different routes where possible.
fn default_merge_pair(topo: &Topology) -> Result<(PortId, PortId)> {
    let mut volume: Vec<(PortId, f64)> = topo
        .ports
        .iter()
        .map(|p| {
            let v: f64 = topo
                .order_model
                .pair_params
                .iter()
                .filter(|pair| pair.src == p.id || pair.dst == p.id)
                .map(|pair| pair.mu)
                .sum();
            (p.id, v)
        })
        .collect();
    volume.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    // skip ports whose merge would collapse a 2-stop route
    let candidates: Vec<PortId> = volume.iter().map(|(p, _)| *p).collect();
    for (i, &a) in candidates.iter().enumerate() {
        for &b in candidates.iter().skip(i + 1) {
            if merge_ports(topo, a, b).is_ok() {
                return Ok((a, b));
            }
        }
    }
    bail!("no mergeable port pair found")
}

fn cmd_transfer(
    args: &RunArgs,
    ckpt: &Path,
    merge: Option<&str>,
    shuffle_seed: u64,
) -> Result<()> {
    let cfg = resolve_config(args)?;
    let dir = prepare_out_dir(&cfg)?;
    let topo = cfg.load_topology(None)?;

    let (a, b) = match merge {
        Some(text) => {
            let (a, b) = text
                .split_once(',')
                .ok_or_else(|| anyhow!("--merge expects \"a,b\""))?;
            (
                PortId(a.trim().parse().context("merge port a")?),
                PortId(b.trim().parse().context("merge port b")?),
            )
        }
        None => default_merge_pair(&topo)?,
    };
    log::info!("merging {a} and {b}, reshuffling with seed {shuffle_seed}");
    let derived = reshuffle_orders(&merge_ports(&topo, a, b)?, shuffle_seed)?;
    derived.save(&dir.join("derived_topology.json"))?;

    let params = checkpoint::load(ckpt)?;
    let (trained, digest) = transfer_evaluate(
        &params,
        &cfg.network,
        cfg.ablation.decoder_only,
        &derived,
        &cfg.sim_params(),
        cfg.network.n_lookback,
        &cfg.seeds,
    )?;
    let mut env = EcrEnv::new(
        derived.clone(),
        cfg.sim_params(),
        cfg.network.n_lookback,
        false,
    )?;
    let mut none = NoRepositioningPolicy;
    let baseline = evaluate(&mut env, &mut none, &cfg.seeds)?;

    print_report(&trained);
    print_report(&baseline);
    println!("checkpoint digest (unchanged): {digest}");
    fs::write(
        dir.join(report_file_name("transfer", &cfg, "learned")),
        trained.to_csv(),
    )?;
    fs::write(
        dir.join(report_file_name("transfer", &cfg, "no-repositioning")),
        baseline.to_csv(),
    )?;
    Ok(())
}

fn cmd_export_embeddings(args: &RunArgs, ckpt: &Path) -> Result<()> {
    let cfg = resolve_config(args)?;
    let dir = prepare_out_dir(&cfg)?;
    let params = checkpoint::load(ckpt)?;
    let mut env = build_env(&cfg)?;
    let rows = pca::export_embeddings(
        &mut env,
        &params,
        &cfg.network,
        cfg.ablation.decoder_only,
        cfg.seeds[0],
    )?;
    let path = dir.join(format!(
        "embeddings_{}_{}_seed{}.csv",
        cfg.topology_tag(),
        cfg.mode,
        cfg.seeds[0]
    ));
    fs::write(&path, pca::projection_csv(&rows))?;
    println!("wrote {} ({} rows)", path.display(), rows.len());
    Ok(())
}

fn cmd_sweep(args: &RunArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    let dir = prepare_out_dir(&cfg)?;
    let grid = [1e-3, 3e-4, 1e-4];
    let mut rows = vec!["learning_rate,seed,final_fulfillment".to_string()];
    let mut best: Option<(f64, f64)> = None; // (lr, score)

    for lr in grid {
        let mut cfg_lr = cfg.clone();
        cfg_lr.optimizer.learning_rate = lr;
        let settings = settings_from(&cfg_lr, &dir);
        let mut scores = Vec::new();
        for &seed in &cfg_lr.seeds {
            let mut env = build_env(&cfg_lr)?;
            let metrics = if cfg_lr.ablation.normal_gc {
                train_normal_gc(&mut env, &settings, seed)?.1
            } else {
                let (pre, _) = pretrain(&mut env, &settings, seed)?;
                finetune(&mut env, &pre, &settings, seed)?.1
            };
            // score: mean fulfillment over the last 10 iterations
            let tail = metrics.len().saturating_sub(10);
            let score = metrics[tail..].iter().map(|m| m.fulfillment).sum::<f64>()
                / metrics[tail..].len().max(1) as f64;
            rows.push(format!("{lr},{seed},{score}"));
            scores.push(score);
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        log::info!("lr {lr}: mean fulfillment {mean:.4}");
        if best.map_or(true, |(_, s)| mean > s) {
            best = Some((lr, mean));
        }
    }
    let (lr, score) = best.expect("non-empty grid");
    println!("best learning rate: {lr} (mean fulfillment {score:.4})");
    rows.push(format!("best,{lr},{score}"));
    fs::write(dir.join("sweep.csv"), rows.join("\n") + "\n")?;
    Ok(())
}
