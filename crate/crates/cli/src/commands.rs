//! `train`, `eval` and `synth`.

use std::io::Write;
use std::path::{Path, PathBuf};

use condmmd::data::{gen_synthetic, Dataset};
use condmmd::evalreport::{conditional_summaries, evaluate_model, ConditionalSummary, EvalSettings, MetricReport};
use condmmd::nn::{ConditionalGenerator, MlpGenerator};
use condmmd::rng::derive_seed;
use condmmd::training::{train, HeldOut, Kernels};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MODEL_FILE: &str = "model.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const EVAL_SUMMARIES_FILE: &str = "eval_summaries.json";
pub const SYNTH_FILE: &str = "synthetic.csv";

const SUMMARY_PROBES: usize = 5;
const SUMMARY_DRAWS: usize = 1000;

/// Writes every file through a temporary name so that a failure never
/// leaves a half-written artifact behind.
pub(crate) fn write_artifacts(dir: &Path, files: &[(&str, &[u8])]) -> CliResult<()> {
    let write_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CliError::Write { path, source }
    };
    std::fs::create_dir_all(dir).map_err(write_err(dir))?;
    let mut staged = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let tmp = dir.join(format!(".{name}.tmp"));
        std::fs::write(&tmp, bytes).map_err(write_err(&tmp))?;
        staged.push((tmp, dir.join(name)));
    }
    for (tmp, dst) in staged {
        std::fs::rename(&tmp, &dst).map_err(write_err(&dst))?;
    }
    Ok(())
}

fn check_evaluable(test: &Dataset) -> CliResult<()> {
    if test.len() < 2 || test.num_pairs() < 4 {
        return Err(CliError::Usage(format!(
            "test split has {} records and {} pairs; evaluation needs at least 2 and 4 \
             (raise dataset.test_fraction or the sample count)",
            test.len(),
            test.num_pairs()
        )));
    }
    Ok(())
}

fn check_model_dims(gen: &dyn ConditionalGenerator, ds: &Dataset) -> CliResult<()> {
    if gen.x_dim() != ds.x_dim() || gen.y_dim() != ds.y_dim() {
        return Err(CliError::Usage(format!(
            "model maps x_dim {} to y_dim {} but the dataset has x_dim {} and y_dim {}",
            gen.x_dim(),
            gen.y_dim(),
            ds.x_dim(),
            ds.y_dim()
        )));
    }
    Ok(())
}

fn report(
    cfg: &RunConfig,
    gen: &dyn ConditionalGenerator,
    test: &Dataset,
    kernels: &Kernels,
) -> CliResult<MetricReport> {
    let mut r = evaluate_model(gen, test, kernels, &cfg.eval, cfg.eval_seed())?;
    r.settings.kernels = Some(cfg.kernels.clone());
    Ok(r)
}

/// Trains a generator and writes the model, its history and a test report.
pub fn cmd_train(config: &Path, out: &mut dyn Write) -> CliResult<MetricReport> {
    let cfg = RunConfig::load(config)?;
    let splits = cfg.splits()?;
    check_evaluable(&splits.test)?;
    let kernels = cfg.kernels.build(&splits.train)?;
    let monitor_settings = EvalSettings {
        n_reps: 1,
        ..cfg.eval.clone()
    };
    let mut monitor = |epoch: usize, g: &MlpGenerator| -> condmmd::Result<Option<HeldOut>> {
        if cfg.monitor_every == 0 || !epoch.is_multiple_of(cfg.monitor_every) {
            return Ok(None);
        }
        let r = evaluate_model(g, &splits.test, &kernels, &monitor_settings, cfg.monitor_seed(epoch))?;
        Ok(Some(HeldOut {
            jmmd: Some(r.jmmd_shifted.mean),
            ammd: Some(r.ammd_shifted.mean),
        }))
    };
    log::info!(
        "training {:?} on {} records ({} pairs) for {} epochs",
        cfg.train.loss,
        splits.train.len(),
        splits.train.num_pairs(),
        cfg.train.epochs
    );
    let (gen, history) = train(&cfg.train, &splits.train, &kernels, &mut monitor)?;
    let rep = report(&cfg, &gen, &splits.test, &kernels)?;
    write_artifacts(
        &cfg.out_dir,
        &[
            (MODEL_FILE, gen.to_json()?.as_bytes()),
            (HISTORY_FILE, history.to_csv().as_bytes()),
            (REPORT_FILE, rep.to_json()?.as_bytes()),
        ],
    )?;
    let _ = write!(out, "{}", rep.summary_table());
    let _ = writeln!(out, "wrote {}", cfg.out_dir.display());
    Ok(rep)
}

#[derive(Serialize)]
struct ProbeSummary<'a> {
    /// Normalized test input.
    x: &'a [f64],
    summary: ConditionalSummary,
}

/// Evaluates a saved model on the test split described by the config.
pub fn cmd_eval(config: &Path, model: &Path, out: &mut dyn Write) -> CliResult<MetricReport> {
    let cfg = RunConfig::load(config)?;
    let text = std::fs::read_to_string(model).map_err(|source| CliError::Read {
        path: model.to_path_buf(),
        source,
    })?;
    let gen = MlpGenerator::from_json(&text).map_err(|source| CliError::Model {
        path: model.to_path_buf(),
        source,
    })?;
    let splits = cfg.splits()?;
    check_model_dims(&gen, &splits.test)?;
    check_evaluable(&splits.test)?;
    let kernels = cfg.kernels.build(&splits.train)?;
    let rep = report(&cfg, &gen, &splits.test, &kernels)?;

    let probes: Vec<ProbeSummary> = splits
        .test
        .records()
        .iter()
        .take(SUMMARY_PROBES)
        .enumerate()
        .map(|(i, r)| {
            let seed = derive_seed(cfg.eval_seed(), 1 << 32 | i as u64);
            let summary = conditional_summaries(&gen, &r.x, SUMMARY_DRAWS, seed, &cfg.eval.quantiles)?;
            Ok(ProbeSummary { x: &r.x, summary })
        })
        .collect::<condmmd::Result<_>>()?;
    let probes = serde_json::to_string_pretty(&probes).map_err(condmmd::Error::from)?;
    write_artifacts(
        &cfg.out_dir,
        &[
            (EVAL_REPORT_FILE, rep.to_json()?.as_bytes()),
            (EVAL_SUMMARIES_FILE, probes.as_bytes()),
        ],
    )?;
    let _ = write!(out, "{}", rep.summary_table());
    Ok(rep)
}

/// Writes the configured synthetic dataset, in raw units, as CSV.
pub fn cmd_synth(config: &Path, output: Option<&Path>, out: &mut dyn Write) -> CliResult<PathBuf> {
    let cfg = RunConfig::load(config)?;
    let spec = cfg
        .dataset_config()?
        .synthetic
        .as_ref()
        .ok_or_else(|| CliError::Usage("synth needs a `dataset.synthetic` section".into()))?;
    let (ds, _) = gen_synthetic(spec)?;
    let path = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join(SYNTH_FILE));
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("{} is not a file path", path.display())))?
        .to_string_lossy()
        .into_owned();
    let tmp = dir.join(format!(".{name}.csv.tmp"));
    std::fs::create_dir_all(dir).map_err(|source| CliError::Write {
        path: dir.to_path_buf(),
        source,
    })?;
    ds.write_csv(&tmp)?;
    std::fs::rename(&tmp, &path).map_err(|source| CliError::Write {
        path: path.clone(),
        source,
    })?;
    let _ = writeln!(out, "wrote {} pairs to {}", ds.num_pairs(), path.display());
    Ok(path)
}
