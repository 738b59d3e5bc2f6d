use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gada::config::{generate_splits, RunConfig};
use gada::detection::{load_dataset, save_dataset, Split};
use gada::eval::{
    ablate_features, baseline_scores, compare_mcnemar, evaluate, export_visualization, robustness_eval, score_dataset,
    sweep, to_tsv, write_json, write_tsv, AblationMask, Splits, SweepMode, Tabular, Trainer,
};
use gada::graph::{build_graph, save_graphs, VideoGraph};
use gada::model::{load_checkpoint, save_checkpoint, Model};
use gada::synth::PerturbConfig;
use gada::train::gradcheck::{check_random_graphs, GradCheckOptions};
use gada::train::train;
use gada::{Error, Result};
use serde_json::json;

use crate::{Cli, Command, DataFlags, GraphFlags, TableFlags, TrainFlags};

/// A perturbation level written `conf:jitter:drop[:spurious]`.
#[derive(Debug, Clone, Copy)]
pub struct Level(PerturbConfig);

impl FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("level `{s}`: {e}")))?;
        if !(3..=4).contains(&parts.len()) {
            return Err(Error::Config(format!("level `{s}` must be conf:jitter:drop[:spurious]")));
        }
        let level = PerturbConfig {
            conf_noise_sigma: parts[0],
            box_jitter_sigma: parts[1],
            drop_prob: parts[2],
            spurious_rate: parts.get(3).copied().unwrap_or(0.0),
        };
        level.validate()?;
        Ok(Level(level))
    }
}

/// Runs one command. `Ok(false)` reports a failed check.
pub fn run(cli: Cli) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Generate { out } => {
            cfg.validate()?;
            generate(&cfg, out.unwrap_or_else(|| cfg.paths.data_dir.clone()))
        }
        Command::Graph { data, out, graph } => {
            apply_graph(&mut cfg, &graph)?;
            let dataset = load_dataset(&data)?;
            let graphs: Vec<VideoGraph> = dataset.records().iter().map(|r| build_graph(r, &cfg.graph)).collect();
            create_parent(&out)?;
            save_graphs(&graphs, &out)?;
            let nodes: usize = graphs.iter().map(VideoGraph::num_nodes).sum();
            let edges: usize = graphs.iter().map(VideoGraph::num_edges).sum();
            println!("{} graphs, {nodes} nodes, {edges} directed edges -> {}", graphs.len(), out.display());
            Ok(true)
        }
        Command::Train {
            data,
            out_checkpoint,
            history,
            train: tf,
            graph,
        } => {
            apply_graph(&mut cfg, &graph)?;
            apply_train(&mut cfg, &tf)?;
            let splits = load_splits(&cfg, &data)?;
            let t = cfg.trainer();
            let (params, hist) = train(&splits.train, &splits.val, &t.graph, &t.model, &t.train, &t.noise_schedule)?;
            let ckpt = out_checkpoint.unwrap_or_else(|| cfg.paths.out_dir.join("checkpoint.json"));
            let history = history.unwrap_or_else(|| ckpt.with_extension("history.jsonl"));
            create_parent(&ckpt)?;
            create_parent(&history)?;
            save_checkpoint(&params, &t.model, &ckpt)?;
            hist.write_log(&history)?;
            let best = hist.best_epoch.map_or("initialization".to_string(), |e| format!("epoch {e}"));
            println!(
                "validation AUC {:.4} at {best} (untrained {:.4}); checkpoint {}",
                hist.best_val_auc,
                hist.initial_val_auc,
                ckpt.display()
            );
            Ok(true)
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            graph,
        } => {
            apply_graph(&mut cfg, &graph)?;
            let (params, mcfg) = load_checkpoint(&checkpoint)?;
            mcfg.check_compatible(&cfg.graph)?;
            let splits = load_splits(&cfg, &data)?;
            let val = score_dataset(&splits.val, &params, &cfg.graph, &mcfg)?;
            let mut test = score_dataset(&splits.test, &params, &cfg.graph, &mcfg)?;
            let report = evaluate(&val, &mut test)?;
            let mut base_test = baseline_scores(&splits.test);
            let base = evaluate(&baseline_scores(&splits.val), &mut base_test)?;
            let mcnemar = compare_mcnemar(&test, &base_test)?;
            println!("{:<10} {:>7} {:>9} {:>11} {:>11} {:>8}", "model", "auc", "threshold", "sensitivity", "specificity", "accuracy");
            for (name, m) in [("gada", &report), ("baseline", &base)] {
                println!(
                    "{name:<10} {:>7.4} {:>9.4} {:>11.4} {:>11.4} {:>8.4}",
                    m.auc, m.threshold, m.sensitivity, m.specificity, m.accuracy
                );
            }
            println!(
                "McNemar: {} right only by gada, {} only by baseline, p = {:.6}",
                mcnemar.only_first, mcnemar.only_second, mcnemar.p_value
            );
            let out = out.unwrap_or_else(|| cfg.paths.out_dir.join("eval.json"));
            create_parent(&out)?;
            write_json(&json!({ "gada": report, "baseline": base, "mcnemar": mcnemar, "test": test }), &out)?;
            Ok(true)
        }
        Command::Gradcheck {
            graphs,
            samples,
            fd_step,
            tolerance,
        } => {
            cfg.validate()?;
            let mcfg = cfg.model.with_graph(&cfg.graph);
            let opts = GradCheckOptions {
                fd_step,
                tolerance,
                samples,
                seed: cfg.seed,
            };
            let reports = check_random_graphs(&mcfg, graphs, cfg.seed, &opts)?;
            let mut worst: f64 = 0.0;
            for (k, r) in reports.iter().enumerate() {
                let at = r.worst.as_ref().map_or(String::new(), |w| format!(" at {}[{}]", w.tensor, w.index));
                println!(
                    "graph {k}: {} coordinates over {} tensors, max relative error {:.3e}{at}, {} kink skips",
                    r.checked,
                    r.tensors_covered,
                    r.max_rel_error,
                    r.kink_skips
                );
                worst = worst.max(r.max_rel_error);
            }
            let passed = reports.iter().all(|r| r.passed);
            println!("{} max relative error {worst:.3e} (tolerance {tolerance:e})", if passed { "PASS" } else { "FAIL" });
            Ok(passed)
        }
        Command::Sweep {
            axis,
            values,
            frozen,
            data,
            table,
            train: tf,
        } => {
            apply_train(&mut cfg, &tf)?;
            let splits = load_splits(&cfg, &data)?;
            let trainer = cfg.trainer();
            let rows = match frozen {
                Some(path) => {
                    let (params, mcfg) = load_checkpoint(&path)?;
                    mcfg.check_compatible(&cfg.graph)?;
                    let trainer = Trainer { model: mcfg, ..trainer };
                    sweep(&splits, &trainer, axis, &values, SweepMode::Frozen(&params))?
                }
                None => sweep(&splits, &trainer, axis, &values, SweepMode::Retrain)?,
            };
            let default = cfg.paths.out_dir.join(format!("sweep_{}.tsv", axis.name()));
            emit(&rows, &table, default)
        }
        Command::Ablate {
            masks,
            data,
            table,
            train: tf,
        } => {
            apply_train(&mut cfg, &tf)?;
            let masks = if masks.is_empty() { AblationMask::table() } else { masks };
            let splits = load_splits(&cfg, &data)?;
            let rows = ablate_features(&splits, &cfg.trainer(), &masks)?;
            emit(&rows, &table, cfg.paths.out_dir.join("ablation.tsv"))
        }
        Command::Robustness {
            checkpoint,
            levels,
            data,
            table,
            graph,
        } => {
            apply_graph(&mut cfg, &graph)?;
            let (params, mcfg) = load_checkpoint(&checkpoint)?;
            let levels: Vec<PerturbConfig> = if levels.is_empty() {
                cfg.robustness_levels.clone()
            } else {
                levels.iter().map(|l| l.0).collect()
            };
            let splits = load_splits(&cfg, &data)?;
            let rows = robustness_eval(&splits.test, &params, &cfg.graph, &mcfg, &levels, cfg.perturb_seed())?;
            emit(&rows, &table, cfg.paths.out_dir.join("robustness.tsv"))
        }
        Command::Viz {
            checkpoint,
            data,
            video_id,
            out,
            graph,
        } => {
            apply_graph(&mut cfg, &graph)?;
            let (params, mcfg) = load_checkpoint(&checkpoint)?;
            mcfg.check_compatible(&cfg.graph)?;
            let dataset = load_dataset(&data)?;
            let record = dataset
                .find(&video_id)
                .ok_or_else(|| Error::Config(format!("video `{video_id}` not found in {}", data.display())))?;
            let g = build_graph(record, &cfg.graph);
            let output = Model::new(&params, &mcfg)?.forward(&g)?;
            create_parent(&out)?;
            export_visualization(&g, &output, &out)?;
            println!(
                "{video_id}: {} nodes, {} edges, probability {:.4} -> {}",
                g.num_nodes(),
                g.num_edges(),
                output.probability,
                out.display()
            );
            Ok(true)
        }
    }
}

fn generate(cfg: &RunConfig, dir: PathBuf) -> Result<bool> {
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    let splits = generate_splits(cfg)?;
    for (split, dataset) in [(Split::Train, &splits.train), (Split::Val, &splits.val), (Split::Test, &splits.test)] {
        let path = split_path(&dir, split);
        save_dataset(dataset, &path)?;
        let (pos, neg) = dataset.class_counts();
        println!("{}: {} videos ({pos} positive, {neg} negative)", path.display(), dataset.len());
    }
    cfg.save(dir.join("config.json"))?;
    Ok(true)
}

fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.jsonl", split.as_str()))
}

/// Reads the three split files from `--data`, or generates them from the configuration.
fn load_splits(cfg: &RunConfig, data: &DataFlags) -> Result<Splits> {
    cfg.validate()?;
    match &data.data {
        Some(dir) => Ok(Splits {
            train: load_dataset(split_path(dir, Split::Train))?,
            val: load_dataset(split_path(dir, Split::Val))?,
            test: load_dataset(split_path(dir, Split::Test))?,
        }),
        None => generate_splits(cfg),
    }
}

fn apply_graph(cfg: &mut RunConfig, flags: &GraphFlags) -> Result<()> {
    if let Some(w) = flags.frame_window {
        cfg.graph.frame_window = w;
    }
    if let Some(d) = flags.iou_threshold {
        cfg.graph.iou_threshold = d;
    }
    cfg.validate()
}

fn apply_train(cfg: &mut RunConfig, flags: &TrainFlags) -> Result<()> {
    if let Some(e) = flags.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = flags.learning_rate {
        cfg.train.learning_rate = lr;
    }
    cfg.validate()
}

/// Prints `rows` and writes them as TSV plus a JSON copy next to it.
fn emit<T: Tabular + serde::Serialize>(rows: &[T], flags: &TableFlags, default: PathBuf) -> Result<bool> {
    let path = flags.out.clone().unwrap_or(default);
    create_parent(&path)?;
    write_tsv(rows, &path)?;
    write_json(rows, path.with_extension("json"))?;
    print!("{}", to_tsv(rows));
    Ok(true)
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| io_error(dir, e)),
        _ => Ok(()),
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
