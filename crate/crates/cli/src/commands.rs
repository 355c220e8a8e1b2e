use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::Context;

use mvse_core::aggregation::{histogram_csv, stats_table};
use mvse_core::autodiff::set_corrupt_backward;
use mvse_core::config::{Dims, FuseMode, SpaceSet};
use mvse_core::data::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use mvse_core::data::container::{read_container, write_container};
use mvse_core::data::manifest::Manifest;
use mvse_core::data::synth::synth_generate;
use mvse_core::data::Dataset;
use mvse_core::diagnostics::gradient_report;
use mvse_core::model::Model;
use mvse_core::retrieval::{evaluate, metrics_csv, metrics_table, rank_gallery, Metrics, Query, Scorer};
use mvse_core::training::{loss_csv, train as train_model};

use crate::run_config::RunConfig;
use crate::Failure;

/// Input files are checked before any work; an unreadable one is a usage error.
fn read_input(path: &Path, what: &str) -> Result<Vec<u8>, Failure> {
    fs::read(path)
        .with_context(|| format!("cannot read {what} `{}`", path.display()))
        .map_err(Failure::Usage)
}

fn write_output(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create `{}`", dir.display())).map_err(Failure::Runtime)?;
    }
    fs::write(path, bytes)
        .with_context(|| format!("cannot write `{}`", path.display()))
        .map_err(Failure::Runtime)
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, Manifest), Failure> {
    let data = read_input(&cfg.data_path(), "feature container")?;
    let manifest = read_input(&cfg.manifest_path(), "manifest")?;
    let ds = read_container(&data)?;
    let text = String::from_utf8(manifest).map_err(|e| Failure::Runtime(anyhow::anyhow!("manifest is not UTF-8: {e}")))?;
    let manifest = Manifest::parse(&text)?;
    manifest.validate(&ds)?;
    Ok((ds, manifest))
}

/// The checkpointed model, with the fuse mode optionally replaced.
fn load_model(cfg: &RunConfig) -> Result<Model, Failure> {
    let ckpt = read_checkpoint(&read_input(&cfg.checkpoint_path(), "checkpoint")?)?;
    let mut config = ckpt.config;
    if let Some(spaces) = cfg.spaces {
        if spaces != config.spaces {
            return Err(Failure::usage(format!(
                "--spaces {} does not match the checkpoint's {}",
                spaces.name(),
                config.spaces.name()
            )));
        }
    }
    if let Some(mode) = cfg.fuse_mode {
        config.fuse_mode = mode;
    }
    Ok(Model {
        config,
        params: ckpt.params,
    })
}

fn method_name(model: &Model) -> String {
    format!("{}/{}", model.config.spaces.name(), model.config.fuse_mode)
}

pub fn synth(cfg: &RunConfig) -> Result<(), Failure> {
    let out = synth_generate(&cfg.synth_config()?)?;
    write_output(&cfg.data_path(), write_container(&out.dataset)?)?;
    write_output(&cfg.manifest_path(), out.manifest.to_text())?;
    println!(
        "wrote {} videos, {} sentences to {}",
        out.dataset.videos.len(),
        out.dataset.sentences.len(),
        cfg.data_path().display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), Failure> {
    let (ds, manifest) = load_data(cfg)?;
    let split = manifest.split(&cfg.eval.train_split)?;
    let outcome = train_model(&ds, split, cfg.model_config()?, &cfg.train, |e| {
        println!("epoch {:>4}  loss {:.6}  (batch mean {:.6})", e.epoch, e.loss, e.train_loss);
    })?;
    let losses = outcome.losses();
    let ckpt = Checkpoint {
        config: outcome.model.config,
        params: outcome.model.params,
    };
    write_output(&cfg.checkpoint_path(), write_checkpoint(&ckpt)?)?;
    write_output(&cfg.paths.out_dir.join("loss.csv"), loss_csv(&losses))?;
    println!("checkpoint: {}", cfg.checkpoint_path().display());
    Ok(())
}

fn parse_metrics_csv(text: &str) -> Vec<(String, Metrics)> {
    text.lines()
        .skip(1)
        .filter_map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let num = |i: usize| f.get(i)?.parse::<f64>().ok();
            Some((
                f.first()?.to_string(),
                Metrics {
                    r1: num(1)?,
                    r5: num(2)?,
                    r10: num(3)?,
                    median_rank: num(4)?,
                },
            ))
        })
        .collect()
}

/// Adds or replaces `method`'s row in `<out-dir>/metrics.csv` and rewrites
/// the text table from the result.
fn record_metrics(cfg: &RunConfig, method: &str, m: Metrics) -> Result<Vec<(String, Metrics)>, Failure> {
    let path = cfg.paths.out_dir.join("metrics.csv");
    let mut rows = fs::read_to_string(&path).map(|t| parse_metrics_csv(&t)).unwrap_or_default();
    match rows.iter_mut().find(|(name, _)| name == method) {
        Some(row) => row.1 = m,
        None => rows.push((method.to_string(), m)),
    }
    write_output(&path, metrics_csv(&rows))?;
    write_output(&cfg.paths.out_dir.join("metrics.txt"), metrics_table(&rows))?;
    Ok(rows)
}

pub fn eval(cfg: &RunConfig) -> Result<(), Failure> {
    let model = load_model(cfg)?;
    let (ds, manifest) = load_data(cfg)?;
    model.check_dataset(&ds)?;
    let report = evaluate(&ds, manifest.split(&cfg.eval.eval_split)?, &model)?;
    let method = method_name(&model);
    let rows = record_metrics(cfg, &method, report.metrics)?;
    print!("{}", metrics_table(&rows));

    let stats = report.gates.stats();
    let tag = method.replace('/', "-");
    let table = stats_table(&stats);
    write_output(&cfg.paths.out_dir.join(format!("gate_stats-{tag}.txt")), &table)?;
    for s in &stats {
        let name = format!("gate_hist-{tag}-{}.csv", s.space.name());
        write_output(&cfg.paths.out_dir.join(name), histogram_csv(s))?;
    }
    println!("\ngate weights ({method})\n{table}");
    Ok(())
}

pub fn retrieve(cfg: &RunConfig, sentence: &str) -> Result<(), Failure> {
    let model = load_model(cfg)?;
    let (ds, manifest) = load_data(cfg)?;
    model.check_dataset(&ds)?;
    let split = manifest.split(&cfg.eval.eval_split)?;
    let mut gallery = Vec::with_capacity(split.entries.len());
    for e in &split.entries {
        gallery.push(
            ds.video_index(&e.video_id)
                .ok_or_else(|| Failure::Runtime(anyhow::anyhow!("unknown video `{}`", e.video_id)))?,
        );
    }
    let query = Query {
        id: "query".into(),
        sentence: None,
        tokens: ds.table()?.encode_text(sentence)?,
    };
    let scores = model.score(&ds, &query, &gallery)?;
    let ids: Vec<&str> = gallery.iter().map(|&v| ds.videos[v].id.as_str()).collect();
    let result = rank_gallery(&query.id, &ids, &scores, None)?;

    let spaces = Scorer::spaces(&model);
    let mut header = format!("{:>4}  {:<12}{:>10}", "rank", "video_id", "s");
    for s in &spaces {
        header.push_str(&format!("{:>14}", format!("s_{}", s.name())));
    }
    println!("{header}");
    for (r, item) in result.ranked.iter().take(cfg.eval.k).enumerate() {
        let mut line = format!("{:>4}  {:<12}{:>10.6}", r + 1, item.video_id, item.similarity);
        for v in &item.per_space {
            line.push_str(&format!("{v:>14.6}"));
        }
        println!("{line}");
    }
    let weights: Vec<String> = spaces
        .iter()
        .zip(&result.weights)
        .map(|(s, w)| format!("{}={w:.6}", s.name()))
        .collect();
    println!("weights: {}", weights.join(" "));
    Ok(())
}

pub fn gradcheck(preset: &str, seed: u64, corrupt_backward: bool) -> Result<(), Failure> {
    let dims = Dims::preset(preset)?;
    set_corrupt_backward(corrupt_backward);
    let start = Instant::now();
    let report = gradient_report(dims, seed);
    set_corrupt_backward(false);
    let report = report?;
    print!("{}", report.render());
    println!("max relative error {:.3e} in {:.1?}", report.max_error(), start.elapsed());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow::anyhow!("gradient check failed")))
    }
}

pub fn ablate(cfg: &RunConfig) -> Result<(), Failure> {
    let (ds, manifest) = load_data(cfg)?;
    let train_split = manifest.split(&cfg.eval.train_split)?;
    let eval_split = manifest.split(&cfg.eval.eval_split)?;
    let mut rows = Vec::new();
    for spaces in [SpaceSet::Single, SpaceSet::DualS, SpaceSet::DualI, SpaceSet::Triple] {
        let mut config = cfg.model_config()?;
        config.spaces = spaces;
        config.fuse_mode = FuseMode::Weighted;
        let probe = Model::new(config, 0)?;
        if let Err(e) = probe.check_dataset(&ds) {
            println!("skipping {}: {e}", spaces.name());
            continue;
        }
        let outcome = train_model(&ds, train_split, config, &cfg.train, |_| {})?;
        let mut model = outcome.model;
        let modes: &[FuseMode] = if spaces.spaces().len() > 1 {
            &[FuseMode::Weighted, FuseMode::Average]
        } else {
            &[FuseMode::Weighted]
        };
        for &mode in modes {
            model.config.fuse_mode = mode;
            let report = evaluate(&ds, eval_split, &model)?;
            let name = method_name(&model);
            println!("{name:<20} R@1 {:.3}", report.metrics.r1);
            rows.push((name, report.metrics));
        }
    }
    write_output(&cfg.paths.out_dir.join("ablation.csv"), metrics_csv(&rows))?;
    let table = metrics_table(&rows);
    write_output(&cfg.paths.out_dir.join("ablation.txt"), &table)?;
    print!("\n{table}");
    Ok(())
}
