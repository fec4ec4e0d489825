//! Experiment runner. One subcommand per benchmark protocol:
//! `pretrain` builds the source model (evaluating it zero-shot gives
//! the source-only number), `federate` runs the round loop in any
//! aggregator/mode combination, `cust` self-trains centrally on the
//! pooled target data, `evaluate` scores a checkpoint, `gradcheck`
//! certifies the gradients, `partition` prints the client table.
//!
//! Exit codes: 0 success, 2 config error, 3 numeric divergence,
//! 4 I/O error. FRIEREN_THREADS caps worker parallelism (0 = auto).

use clap::{Parser, Subcommand};
use frieren_core::checkpoint::{load_params, save_params, NamedArrays};
use frieren_core::config::RunConfig;
use frieren_core::eval::evaluate_model;
use frieren_core::fed::{
    cust, make_prior_teacher, pretrain, run_federation, Aggregator, TrainMode,
};
use frieren_core::gradcheck::run_gradcheck;
use frieren_core::report::{fmt_f64, metrics_csv, pretrain_csv, write_text};
use frieren_core::synthdata::{
    dump_benchmark, load_benchmark, make_benchmark, Benchmark, Scenario,
};
use frieren_core::{Error, Result};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "frieren", version, about = "federated self-training laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain on the labeled source set and write the checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// overrides the config seed
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// also dump the generated benchmark for replay
        #[arg(long)]
        dump_data: bool,
    },
    /// Run the federated round loop from a pretrained checkpoint.
    Federate {
        #[arg(long)]
        config: PathBuf,
        /// pretrained model checkpoint
        #[arg(long)]
        init: PathBuf,
        /// overrides fed.agg (fedavg | fedswa)
        #[arg(long)]
        agg: Option<String>,
        /// overrides fed.mode (unsup | semisup | sup)
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Centralized self-training on the pooled target data.
    Cust {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class IoU and mIoU of a checkpoint on a benchmark split.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        /// regenerate the benchmark from a config file
        #[arg(long)]
        config: Option<PathBuf>,
        /// or load a dumped benchmark instead
        #[arg(long)]
        data: Option<PathBuf>,
        /// eval | source | target
        #[arg(long, default_value = "eval")]
        split: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Certify analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Print the client partition table of a scenario.
    Partition {
        /// city | weather (aliases: syn2real | clear2adverse)
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// optional config supplying non-default sizes
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn read_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.benchmark.seed = s;
        cfg.pretrain.seed = s;
        cfg.fed.seed = s;
    }
    Ok(cfg)
}

fn benchmark_of(cfg: &RunConfig) -> Result<Benchmark> {
    make_benchmark(&cfg.benchmark)
}

fn cmd_pretrain(config: &Path, seed: Option<u64>, out: &Path, dump_data: bool) -> Result<()> {
    let cfg = read_config(config, seed)?;
    let bench = benchmark_of(&cfg)?;
    std::fs::create_dir_all(out)?;
    let outcome = pretrain(
        bench.source.images()?,
        &bench.eval_images,
        &cfg.model_dims(),
        &cfg.pretrain,
    )?;
    if !outcome.loss_monotone_ok {
        eprintln!("note: epoch losses were non-monotone in more than 20% of steps");
    }
    save_params(&out.join("pretrain.ckpt"), &outcome.params)?;
    write_text(
        &out.join("pretrain_metrics.csv"),
        &pretrain_csv(&outcome.epochs, cfg.benchmark.classes),
    )?;
    if dump_data {
        dump_benchmark(&bench)?.save(&out.join("benchmark.ckpt"))?;
    }
    if let Some(last) = outcome.epochs.last() {
        println!(
            "pretrain done: {} epochs, source-only eval mIoU {}",
            outcome.epochs.len(),
            fmt_f64(last.miou_eval)
        );
    } else {
        println!("pretrain done: 0 epochs (returned the seeded initialization)");
    }
    Ok(())
}

fn cmd_federate(
    config: &Path,
    init: &Path,
    agg: Option<&str>,
    mode: Option<&str>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let mut cfg = read_config(config, seed)?;
    if let Some(a) = agg {
        cfg.fed.aggregator = Aggregator::parse(a)?;
    }
    if let Some(m) = mode {
        cfg.fed.mode = TrainMode::parse(m)?;
    }
    let w0 = load_params(init)?;
    check_dims(&cfg, &w0)?;
    let bench = benchmark_of(&cfg)?;
    // the federated stage must never read the source split
    bench.source.seal();
    std::fs::create_dir_all(out)?;
    let prior = if cfg.fed.prior_distill {
        Some(make_prior_teacher(&w0, cfg.fed.tau_p))
    } else {
        None
    };
    let outcome = run_federation(
        &w0,
        &bench.clients,
        &bench.eval_images,
        &cfg.fed,
        prior.as_ref(),
    )?;
    save_params(&out.join("final.ckpt"), &outcome.params)?;
    write_text(
        &out.join("metrics.csv"),
        &metrics_csv(&outcome.records, cfg.benchmark.classes),
    )?;
    if let Some(last) = outcome.records.last() {
        println!(
            "federate done: {} rounds ({} {}), final eval mIoU {}",
            cfg.fed.rounds,
            cfg.fed.aggregator.as_str(),
            cfg.fed.mode.as_str(),
            fmt_f64(last.miou_eval)
        );
    } else {
        println!("federate done: 0 rounds (returned the initial checkpoint)");
    }
    Ok(())
}

fn cmd_cust(config: &Path, init: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg = read_config(config, seed)?;
    let w0 = load_params(init)?;
    check_dims(&cfg, &w0)?;
    let bench = benchmark_of(&cfg)?;
    bench.source.seal();
    std::fs::create_dir_all(out)?;
    let pool = bench.pooled_clients();
    let cust_cfg = cfg.cust_config(pool.len());
    let prior = if cust_cfg.prior_distill {
        Some(make_prior_teacher(&w0, cust_cfg.tau_p))
    } else {
        None
    };
    let outcome = cust(&w0, &pool, &bench.eval_images, &cust_cfg, prior.as_ref())?;
    save_params(&out.join("final.ckpt"), &outcome.params)?;
    write_text(
        &out.join("metrics.csv"),
        &metrics_csv(&outcome.records, cfg.benchmark.classes),
    )?;
    if let Some(last) = outcome.records.last() {
        println!(
            "cust done: {} rounds over {} pooled images, final eval mIoU {}",
            cust_cfg.rounds,
            pool.len(),
            fmt_f64(last.miou_eval)
        );
    }
    Ok(())
}

fn check_dims(cfg: &RunConfig, w: &frieren_core::model::ParamSet) -> Result<()> {
    let want = cfg.model_dims();
    let got = w.dims();
    if got != want {
        return Err(Error::InvalidArgument(format!(
            "checkpoint dims {got:?} do not match config dims {want:?}"
        )));
    }
    Ok(())
}

fn cmd_evaluate(
    ckpt: &Path,
    config: Option<&Path>,
    data: Option<&Path>,
    split: &str,
    seed: Option<u64>,
) -> Result<()> {
    let params = load_params(ckpt)?;
    let bench = match (config, data) {
        (_, Some(d)) => load_benchmark(&NamedArrays::load(d)?)?,
        (Some(c), None) => benchmark_of(&read_config(c, seed)?)?,
        (None, None) => {
            return Err(Error::InvalidArgument(
                "evaluate needs --config or --data".into(),
            ))
        }
    };
    let pool;
    let images = match split {
        "eval" => &bench.eval_images[..],
        "source" => bench.source.images()?,
        "target" => {
            pool = bench.pooled_clients();
            &pool.images[..]
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown split `{other}` (want eval | source | target)"
            )))
        }
    };
    let (per_class, miou) = evaluate_model(&params, images)?;
    for (c, iou) in per_class.iter().enumerate() {
        println!("iou_{c} {}", fmt_f64(*iou));
    }
    println!("miou {}", fmt_f64(miou));
    Ok(())
}

fn cmd_gradcheck(trials: usize, seed: u64) -> Result<bool> {
    let report = run_gradcheck(trials, seed)?;
    for t in &report.per_term {
        println!(
            "{:<12} max_rel_err {}  ({} entries, worst {})  {}",
            t.term,
            fmt_f64(t.max_rel_err),
            t.checked_entries,
            t.worst_entry,
            if t.pass { "ok" } else { "FAIL" }
        );
    }
    println!(
        "gradcheck {} over {} trials",
        if report.pass { "passed" } else { "FAILED" },
        report.trials
    );
    Ok(report.pass)
}

fn cmd_partition(scenario: &str, seed: u64, config: Option<&Path>) -> Result<()> {
    let scenario = match scenario {
        "city" => Scenario::Syn2Real,
        "weather" => Scenario::Clear2Adverse,
        other => Scenario::parse(other)?,
    };
    let mut cfg = match config {
        Some(c) => read_config(c, Some(seed))?,
        None => {
            let text = format!("seed = {seed}\ndata.scenario = {}\n", scenario.as_str());
            RunConfig::parse(&text)?
        }
    };
    cfg.benchmark.scenario = scenario;
    let bench = benchmark_of(&cfg)?;
    println!("client_id,n_images,domains");
    for c in &bench.clients {
        let tags: Vec<String> = c.domains.iter().map(|d| d.to_string()).collect();
        println!("{},{},{}", c.client_id, c.len(), tags.join(";"));
    }
    Ok(())
}

fn init_thread_pool() {
    let threads = std::env::var("FRIEREN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    if threads > 0 {
        // ignore the error if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

fn main() {
    init_thread_pool();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Pretrain {
            config,
            seed,
            out,
            dump_data,
        } => cmd_pretrain(config, *seed, out, *dump_data).map(|()| true),
        Command::Federate {
            config,
            init,
            agg,
            mode,
            seed,
            out,
        } => cmd_federate(config, init, agg.as_deref(), mode.as_deref(), *seed, out)
            .map(|()| true),
        Command::Cust {
            config,
            init,
            seed,
            out,
        } => cmd_cust(config, init, *seed, out).map(|()| true),
        Command::Evaluate {
            ckpt,
            config,
            data,
            split,
            seed,
        } => cmd_evaluate(ckpt, config.as_deref(), data.as_deref(), split, *seed).map(|()| true),
        Command::Gradcheck { trials, seed } => cmd_gradcheck(*trials, *seed),
        Command::Partition {
            scenario,
            seed,
            config,
        } => cmd_partition(scenario, *seed, config.as_deref()).map(|()| true),
    };
    match outcome {
        Ok(true) => {}
        Ok(false) => std::process::exit(1),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
