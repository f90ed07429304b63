//! The five pipeline commands. Each returns a `CliError` whose exit code
//! distinguishes I/O and config problems (2) from training or validation
//! failures (1).

use std::path::{Path, PathBuf};

use deta_core::encoder::{
    export_embedding, load_checkpoint, prepare_all, save_checkpoint, DualEncoderParams,
    PreparedGraph,
};
use deta_core::graphs::{load_jsonl, save_jsonl};
use deta_core::report;
use deta_core::synthdata::{dataset_summary, generate_domain_pair};
use deta_core::trainer::{adapt, evaluate, pretrain, TrainConfig};
use deta_core::DetaError;

use crate::config::RunConfig;
use crate::CliError;

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(format!("{}: {e}", out.display())))
}

/// I/O-family failures exit 2, everything else is a run failure (1).
fn run_err(e: DetaError) -> CliError {
    match e {
        DetaError::Io(_) | DetaError::Parse(_) => CliError::io(e.to_string()),
        other => CliError::run(other.to_string()),
    }
}

fn load_prepared(path: &Path, cfg: &TrainConfig) -> Result<Vec<PreparedGraph>, CliError> {
    let graphs =
        load_jsonl(path, cfg.knn_k).map_err(|e| CliError::io(format!("{e}")))?;
    Ok(prepare_all(graphs, cfg.k_sp))
}

fn load_params_for(cfg: &TrainConfig, path: &Path) -> Result<DualEncoderParams, CliError> {
    let params = load_checkpoint(path).map_err(|e| CliError::io(e.to_string()))?;
    // The checkpoint must agree with the configured architecture.
    let d = &params.dims;
    for (field, got, want) in [
        ("hidden", d.hidden, cfg.hidden),
        ("mp_layers", d.mp_layers, cfg.mp_layers),
        ("sp_layers", d.sp_layers, cfg.sp_layers),
        ("k_sp", d.k_sp, cfg.k_sp),
        ("k_bins", d.k_bins, cfg.k_bins),
        ("head_hidden", d.head_hidden, cfg.head_hidden),
        ("dclf_hidden", d.dclf_hidden, cfg.dclf_hidden),
    ] {
        if got != want {
            return Err(CliError::config(format!(
                "dimension mismatch in `{field}`: config {want}, checkpoint {got}"
            )));
        }
    }
    Ok(params)
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    ensure_out_dir(out)?;
    let (source, target) = generate_domain_pair(&cfg.data).map_err(run_err)?;
    let src_path = out.join("source.jsonl");
    let tgt_path = out.join("target.jsonl");
    save_jsonl(&src_path, &source).map_err(|e| CliError::io(e.to_string()))?;
    save_jsonl(&tgt_path, &target).map_err(|e| CliError::io(e.to_string()))?;
    for (graphs, name) in [(&source, "source"), (&target, "target")] {
        let summary = dataset_summary(graphs, cfg.data.k_bins).map_err(run_err)?;
        report::write_summary_csv(&out.join(format!("summary_{name}.csv")), &summary)
            .map_err(run_err)?;
    }
    cfg.archive(out)?;
    println!(
        "generated {} source + {} target graphs under {}",
        source.len(),
        target.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_pretrain(cfg: &RunConfig, source: &Path, out: &Path) -> Result<(), CliError> {
    ensure_out_dir(out)?;
    let data = load_prepared(source, &cfg.train)?;
    let result = pretrain(&data, &cfg.train).map_err(run_err)?;
    let ckpt = out.join("checkpoint_pretrain.json");
    save_checkpoint(&ckpt, &result.params).map_err(|e| CliError::io(e.to_string()))?;
    report::write_trace_csv(&out.join("trace_pretrain.csv"), &result.trace, &[])
        .map_err(run_err)?;
    cfg.archive(out)?;
    println!(
        "pretrained on {} graphs ({} epochs), checkpoint at {}",
        data.len(),
        cfg.train.pretrain_epochs,
        ckpt.display()
    );
    Ok(())
}

pub fn cmd_adapt(
    cfg: &RunConfig,
    source: &Path,
    target: &Path,
    checkpoint: &Path,
    out: &Path,
) -> Result<(), CliError> {
    ensure_out_dir(out)?;
    let src = load_prepared(source, &cfg.train)?;
    let tgt = load_prepared(target, &cfg.train)?;
    let params = load_params_for(&cfg.train, checkpoint)?;
    let result = adapt(&params, &src, &tgt, &cfg.train).map_err(run_err)?;
    let ckpt = out.join("checkpoint_adapt.json");
    save_checkpoint(&ckpt, &result.params).map_err(|e| CliError::io(e.to_string()))?;
    report::write_trace_csv(&out.join("trace_adapt.csv"), &[], &result.trace).map_err(run_err)?;
    cfg.archive(out)?;
    println!(
        "adapted over {} epochs ({} L1 / {} L2 coupling steps), checkpoint at {}",
        cfg.train.adapt_epochs,
        result.coupling_l1_steps,
        result.coupling_l2_steps,
        ckpt.display()
    );
    Ok(())
}

pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    source: Option<&Path>,
    target: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    if source.is_none() && target.is_none() {
        return Err(CliError::config(
            "eval needs at least one of --source / --target".into(),
        ));
    }
    ensure_out_dir(out)?;
    let params = load_params_for(&cfg.train, checkpoint)?;
    let mut rows: Vec<(String, String, f64)> = Vec::new();
    for (path, split) in [(source, "source"), (target, "target")] {
        let Some(path) = path else { continue };
        let data = load_prepared(path, &cfg.train)?;
        let rep = evaluate(&params, &data).map_err(run_err)?;
        for (metric, split, value) in report::eval_metric_rows(&rep, split) {
            rows.push((metric.to_string(), split.to_string(), value));
        }
        if let (Some(low), Some(high)) = (&rep.km_low, &rep.km_high) {
            report::write_km_csv(&out.join(format!("km_{split}.csv")), low, high)
                .map_err(run_err)?;
            report::write_km_svg(
                &out.join(format!("km_{split}.svg")),
                low,
                high,
                rep.logrank.map(|(_, p)| p),
            )
            .map_err(run_err)?;
        }
        println!("{split}: c_index {:.4} over {} graphs", rep.c_index, rep.n_graphs);
    }
    let row_refs: Vec<(&str, &str, f64)> = rows
        .iter()
        .map(|(m, s, v)| (m.as_str(), s.as_str(), *v))
        .collect();
    report::write_metrics_csv(&out.join("metrics.csv"), &row_refs, cfg.train.seed)
        .map_err(run_err)?;
    cfg.archive(out)?;
    Ok(())
}

pub fn cmd_export_embeddings(
    cfg: &RunConfig,
    checkpoint: &Path,
    source: Option<&Path>,
    target: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    if source.is_none() && target.is_none() {
        return Err(CliError::config(
            "export-embeddings needs at least one of --source / --target".into(),
        ));
    }
    ensure_out_dir(out)?;
    let params = load_params_for(&cfg.train, checkpoint)?;
    let mut rows = Vec::new();
    for path in [source, target].into_iter().flatten() {
        let data = load_prepared(path, &cfg.train)?;
        for g in &data {
            let (emb, bin) = export_embedding(g, &params).map_err(run_err)?;
            rows.push((g.graph.domain.to_string(), bin, emb));
        }
    }
    let path = out.join("embeddings.csv");
    report::write_embeddings_csv(&path, &rows).map_err(run_err)?;
    println!("wrote {} embedding rows to {}", rows.len(), path.display());
    Ok(())
}

/// Resolves an optional path flag, checking existence early for clean exits.
pub fn require_file(path: &PathBuf) -> Result<&Path, CliError> {
    if !path.is_file() {
        return Err(CliError::io(format!("no such file: {}", path.display())));
    }
    Ok(path.as_path())
}
