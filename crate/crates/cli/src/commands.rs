use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use gsc::autodiff::Fault;
use gsc::losses::LossWeights;
use gsc::metrics::{read_csv, write_csv, SummaryRow};
use gsc::report::{write_reports, AuditRow, AUDIT_CSV, SUMMARY_CSV};
use gsc::scenario::{build_step_dataset, ScenarioSpec};
use gsc::segnet::{load_checkpoint, SegNetwork};
use gsc::trainer::{audit_labels, run_scenario, MethodSpec};
use gsc::GscError;
use serde::{Deserialize, Serialize};

use crate::config::{parse_methods, Resolved};
use crate::error::CliError;
use crate::gradcheck::{run_suite, ComponentResult, SuiteOptions};
use crate::manifest::{threads_from_env, unix_now, write_atomic, RunManifest};
use crate::plot::render_svg;
use crate::{AuditArgs, GradcheckArgs, PlotArgs, RunArgs, SweepArgs};

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const PLOT_SVG: &str = "miou_by_step.svg";

/// Refuses an output path that exists as something other than a directory.
fn check_out_dir(dir: &Path) -> Result<(), CliError> {
    if dir.exists() && !dir.is_dir() {
        return Err(CliError::Usage(format!(
            "{} exists and is not a directory",
            dir.display()
        )));
    }
    Ok(())
}

fn checkpoint_name(label: &str, step: usize) -> String {
    let safe: String = label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}_step{step}.gsc")
}

/// Trains, then writes reports, checkpoints and the manifest. Nothing is
/// written before training has finished.
fn execute(
    command: &str,
    resolved: &Resolved,
    out_dir: &Path,
) -> Result<(gsc::trainer::ScenarioReport, Vec<PathBuf>), CliError> {
    let threads = threads_from_env()?;
    check_out_dir(out_dir)?;
    let started = unix_now();
    let report = run_scenario(&resolved.spec, &resolved.train, &resolved.methods)?;

    fs::create_dir_all(out_dir.join(CHECKPOINT_DIR))?;
    let mut outputs = write_reports(&report, out_dir)?;
    for m in &report.methods {
        for (step, bytes) in &m.checkpoints {
            let path = out_dir.join(CHECKPOINT_DIR).join(checkpoint_name(&m.label, *step));
            write_atomic(&path, bytes)?;
            outputs.push(path);
        }
    }
    let manifest = RunManifest::new(command, resolved.to_config(), resolved.train.seed, threads, started);
    outputs.push(manifest.finish(out_dir, &outputs)?);
    Ok((report, outputs))
}

pub fn run(args: &RunArgs) -> Result<(), CliError> {
    let methods = args.method.as_deref().map(parse_methods).transpose()?;
    let resolved = args.scenario.resolve(methods)?;
    let (report, _) = execute("run", &resolved, &args.out_dir)?;
    for m in &report.methods {
        let fmt = |v: Option<f64>| v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_else(|| "-".into());
        println!(
            "{}: step {} mIoU all {} initial {} incremental {}",
            m.label,
            m.final_metrics().step,
            fmt(m.final_all_miou()),
            fmt(m.final_old_miou()),
            fmt(m.final_metrics().grouped.incremental)
        );
    }
    println!("reports written to {}", args.out_dir.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum FaultArg {
    SigmoidBackwardSign,
}

impl From<FaultArg> for Fault {
    fn from(f: FaultArg) -> Self {
        match f {
            FaultArg::SigmoidBackwardSign => Fault::SigmoidBackwardSign,
        }
    }
}

pub fn print_suite(results: &[ComponentResult]) {
    for r in results {
        println!(
            "{:<14} {} worst {:.3e} over {} coordinates in {} trials ({:.2}s)",
            r.name,
            if r.passed() { "ok  " } else { "FAIL" },
            r.check.worst,
            r.check.checked,
            r.trials,
            r.elapsed.as_secs_f64()
        );
    }
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    if args.trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    if !(args.tolerance > 0.0 && args.tolerance.is_finite()) {
        return Err(CliError::Usage("--tolerance must be positive".into()));
    }
    let opts = SuiteOptions {
        tolerance: args.tolerance,
        trials: args.trials,
        seed: args.seed,
        fault: args.inject_fault.map(Fault::from),
    };
    let results = run_suite(&opts)?;
    print_suite(&results);
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.to_string())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(failed))
    }
}

/// Writes a binary greyscale PGM.
fn write_pgm(path: &Path, width: usize, height: usize, values: &[u8]) -> Result<(), CliError> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(values);
    fs::write(path, bytes)?;
    Ok(())
}

fn load_network(path: &Path) -> Result<SegNetwork<f64>, CliError> {
    match load_checkpoint::<f64>(path) {
        Ok(n) => Ok(n),
        Err(GscError::Io(e)) if e.kind() == ErrorKind::NotFound => Err(CliError::MissingFile(path.to_path_buf())),
        Err(GscError::Format(msg)) => Err(CliError::Usage(format!("{}: {msg}", path.display()))),
        Err(e) => Err(e.into()),
    }
}

/// Label maps of one image as class ids, 255 where ignored.
fn class_map(channels: &[Option<usize>], class_of_channel: &[u8]) -> Vec<u8> {
    channels
        .iter()
        .map(|c| c.map(|c| class_of_channel[c]).unwrap_or(255))
        .collect()
}

pub fn audit(args: &AuditArgs) -> Result<(), CliError> {
    let resolved = args.scenario.resolve(None)?;
    let spec: &ScenarioSpec = &resolved.spec;
    if args.step == 0 || args.step >= spec.steps() {
        return Err(CliError::Usage(format!(
            "--step must be an incremental step in 1..{}, got {}",
            spec.steps(),
            args.step
        )));
    }
    check_out_dir(&args.out_dir)?;
    let net = load_network(&args.checkpoint)?;
    let expected = spec.head_width_at(args.step - 1);
    if net.head_width() != expected || net.in_channels() != 3 {
        return Err(CliError::Usage(format!(
            "checkpoint has {} head channels; the model before step {} of this scenario has {expected}",
            net.head_width(),
            args.step
        )));
    }
    let data = build_step_dataset(spec, args.step)?;
    let audit = audit_labels(&net, spec, &data, resolved.train.eval_chunk, resolved.train.temperature)?;

    fs::create_dir_all(&args.out_dir)?;
    let label = args
        .checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let rows = [
        AuditRow::new(&label, args.step, "prototypical", &audit.prototypical),
        AuditRow::new(&label, args.step, "plain", &audit.plain),
    ];
    write_csv(&args.out_dir.join(AUDIT_CSV), &rows)?;

    let class_of = spec.class_of_channel();
    let (h, w) = (data.height, data.width);
    let px = data.pixels_per_image();
    for i in 0..args.images.min(data.len()) {
        let part = i * px..(i + 1) * px;
        let proto = class_map(&audit.prototypical_map.labels[part.clone()], &class_of);
        let plain = class_map(&audit.plain_map.labels[part.clone()], &class_of);
        let base = format!("step{}_image{i:03}", args.step);
        write_pgm(&args.out_dir.join(format!("{base}_prototypical.pgm")), w, h, &proto)?;
        write_pgm(&args.out_dir.join(format!("{base}_plain.pgm")), w, h, &plain)?;
        write_pgm(&args.out_dir.join(format!("{base}_gt.pgm")), w, h, &data.gt_full[part])?;
    }
    for r in &rows {
        println!(
            "{:<12} precision {:.4} recall {:.4} ignored {} of {}",
            r.strategy, r.precision_vs_oracle, r.recall_vs_oracle, r.ignored, r.pixel_count
        );
    }
    Ok(())
}

pub fn plot(args: &PlotArgs) -> Result<(), CliError> {
    let summary = args.report_dir.join(SUMMARY_CSV);
    if !summary.is_file() {
        return Err(CliError::MissingFile(summary));
    }
    let out_dir = args.out_dir.as_deref().unwrap_or(&args.report_dir);
    check_out_dir(out_dir)?;
    let rows: Vec<SummaryRow> =
        read_csv(&summary).map_err(|e| CliError::Usage(format!("{}: {e}", summary.display())))?;
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join(PLOT_SVG);
    write_atomic(&path, render_svg(&rows).as_bytes())?;
    println!("{}", path.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Lambda1,
    Lambda2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub miou_all: Option<f64>,
}

pub fn parse_values(s: &str) -> Result<Vec<f64>, CliError> {
    let values: Vec<f64> = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<f64>()
                .map_err(|_| CliError::Usage(format!("bad sweep value {p:?}")))
        })
        .collect::<Result<_, _>>()?;
    if values.is_empty() {
        return Err(CliError::Usage("--values needs at least one value".into()));
    }
    if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(CliError::Usage(format!(
            "sweep values must be finite and non-negative, got {v}"
        )));
    }
    Ok(values)
}

/// One GSC variant per value, labelled `<param>=<value>`.
pub fn sweep_methods(param: SweepParam, values: &[f64], base: LossWeights) -> Vec<MethodSpec> {
    values
        .iter()
        .map(|&v| {
            let mut w = base;
            let name = match param {
                SweepParam::Lambda1 => {
                    w.lambda1 = v;
                    "lambda1"
                }
                SweepParam::Lambda2 => {
                    w.lambda2 = v;
                    "lambda2"
                }
            };
            MethodSpec::with_weights(&format!("{name}={v}"), w)
        })
        .collect()
}

pub fn sweep(args: &SweepArgs) -> Result<(), CliError> {
    let values = parse_values(&args.values)?;
    let base = args.scenario.resolve(None)?;
    let methods = sweep_methods(args.param, &values, base.train.weights);
    let resolved = Resolved { methods, ..base };
    let (report, _) = execute("sweep", &resolved, &args.out_dir)?;
    let rows: Vec<SweepRow> = values
        .iter()
        .zip(&report.methods)
        .map(|(&value, m)| SweepRow {
            value,
            miou_all: m.final_all_miou(),
        })
        .collect();
    write_csv(&args.out_dir.join(SWEEP_CSV), &rows)?;
    for r in &rows {
        println!(
            "{} mIoU all {}",
            r.value,
            r.miou_all.map(|v| format!("{:.4}", v)).unwrap_or_else(|| "-".into())
        );
    }
    Ok(())
}
