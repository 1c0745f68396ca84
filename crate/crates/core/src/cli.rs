//! The `csrep` command line.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or parse error,
//! 3 I/O or container-format error.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use crate::bench::{run_bench, BenchOptions};
use crate::container::AnyModel;
use crate::element::{DType, Element};
use crate::error::Error;
use crate::graph::ModelGraph;
use crate::metrics::{compute_eer, compute_min_dcf, load_scores, DcfParams, Label};
use crate::rep_tdnn::{build_any, RepTdnnConfig};
use crate::reparam::{csrep_transform, self_check, SelfCheckOptions, Step, TransformOptions};
use crate::with_model;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "csrep",
    version,
    about = "Build, re-parameterize, verify and benchmark TDNN speaker-embedding models"
)]
pub struct Cli {
    /// Output style for machine-readable results.
    #[arg(long, value_enum, global = true, default_value_t = Format::Kv)]
    pub format: Format,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    /// One `key=value` per line.
    Kv,
    /// A single JSON object.
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build and randomly initialize a Rep-TDNN model.
    Build(BuildArgs),
    /// Re-parameterize a multi-branch model into a plain one.
    Transform(TransformArgs),
    /// Compare two models on identical random inputs.
    Verify(VerifyArgs),
    /// Measure inference throughput in frames per second.
    Bench(BenchArgs),
    /// Count parameters and FLOPs.
    Params(ParamsArgs),
    /// Compute EER and minDCF from a score file.
    Eer(EerArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// JSON config; defaults are used for a missing file argument or missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StopAfter {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    Full,
}

impl From<StopAfter> for Step {
    fn from(s: StopAfter) -> Step {
        match s {
            StopAfter::One => Step::CrossSequentialShift,
            StopAfter::Two => Step::FuseBatchNorm,
            StopAfter::Three => Step::AlignContext,
            StopAfter::Full => Step::MergeBranches,
        }
    }
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = StopAfter::Full)]
    pub stop_after: StopAfter,
    /// Compare input and output on random inputs and report the deviation.
    #[arg(long)]
    pub self_check: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 200)]
    pub frames: usize,
    /// Max abs deviation; defaults to 1e-4 for fp32 and 1e-10 for fp64.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 300)]
    pub frames: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    #[arg(long, default_value_t = 50)]
    pub iters: usize,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long, required_unless_present = "config", conflicts_with = "config")]
    pub model: Option<PathBuf>,
    /// Count a config without materializing weights.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Utterance length for FLOP counting.
    #[arg(long, default_value_t = 200)]
    pub frames: usize,
}

#[derive(Debug, Args)]
pub struct EerArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long, default_value_t = 0.001)]
    pub p_target: f64,
    #[arg(long, default_value_t = 1.0)]
    pub c_miss: f64,
    #[arg(long, default_value_t = 1.0)]
    pub c_fa: f64,
}

/// Ordered key/value output.
#[derive(Debug, Default)]
struct Output(Vec<(String, Value)>);

impl Output {
    fn put(&mut self, key: impl Into<String>, value: impl Serialize) {
        self.0.push((
            key.into(),
            serde_json::to_value(value).expect("plain values serialize"),
        ));
    }

    /// Flattens a struct into `prefix.field` entries.
    fn put_all(&mut self, prefix: &str, value: impl Serialize) {
        let Value::Object(map) = serde_json::to_value(value).expect("plain values serialize")
        else {
            unreachable!("put_all takes structs")
        };
        for (k, v) in map {
            let key = if prefix.is_empty() {
                k
            } else {
                format!("{prefix}.{k}")
            };
            self.0.push((key, v));
        }
    }

    fn render(&self, format: Format) -> String {
        match format {
            Format::Kv => self
                .0
                .iter()
                .map(|(k, v)| match v {
                    Value::String(s) => format!("{k}={s}\n"),
                    other => format!("{k}={other}\n"),
                })
                .collect(),
            Format::Json => {
                let fields: Vec<String> = self
                    .0
                    .iter()
                    .map(|(k, v)| format!("  {}: {}", Value::String(k.clone()), v))
                    .collect();
                format!("{{\n{}\n}}\n", fields.join(",\n"))
            }
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_)
        | Error::BadMagic(_)
        | Error::VersionMismatch(_)
        | Error::TruncatedPayload { .. }
        | Error::PayloadMismatch(_)
        | Error::Topology(_)
        | Error::DtypeMismatch { .. } => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

enum Outcome {
    Ok(Output),
    VerifyFailed(Output),
}

/// Parses `args` (including the program name) and runs the command. Results
/// go to `out`, diagnostics to `err`; the return value is the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let result = match &cli.command {
        Command::Build(a) => cmd_build(a, err),
        Command::Transform(a) => cmd_transform(a, err),
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Params(a) => cmd_params(a),
        Command::Eer(a) => cmd_eer(a),
    };
    match result {
        Ok(Outcome::Ok(o)) => {
            let _ = out.write_all(o.render(cli.format).as_bytes());
            EXIT_OK
        }
        Ok(Outcome::VerifyFailed(o)) => {
            let _ = out.write_all(o.render(cli.format).as_bytes());
            let _ = writeln!(err, "error: deviation exceeds tolerance");
            EXIT_VERIFY_FAILED
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn describe<F: Element>(o: &mut Output, m: &ModelGraph<F>, frames: usize) {
    let params = m.param_report();
    let flops = m.flop_report(frames);
    o.put("name", &m.meta.name);
    o.put("dtype", m.dtype().name());
    o.put("seed", m.meta.seed);
    o.put("layers", m.layers.len());
    o.put("conv_nodes", m.conv_node_count());
    o.put("branch_groups", m.branch_group_count());
    o.put("batchnorms", m.batchnorm_count());
    o.put("params", params.total());
    o.put("params_bn_affine_only", params.total_affine_bn());
    o.put_all("params", params);
    o.put("flop_frames", frames);
    o.put("flops", flops.total());
    o.put_all("flops", flops);
}

fn cmd_build(a: &BuildArgs, err: &mut dyn Write) -> Result<Outcome, Error> {
    let mut config = match &a.config {
        Some(p) => RepTdnnConfig::load(p)?,
        None => RepTdnnConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let model = build_any(&config)?;
    model.save(&a.out)?;
    let _ = writeln!(err, "wrote {}", a.out.display());
    let mut o = Output::default();
    o.put("out", a.out.display().to_string());
    with_model!(&model, m => describe(&mut o, m, 200));
    o.put("plain_params", config.plain_param_count());
    Ok(Outcome::Ok(o))
}

fn cmd_transform(a: &TransformArgs, err: &mut dyn Write) -> Result<Outcome, Error> {
    let model = AnyModel::load(&a.input)?;
    let options = TransformOptions {
        stop_after: a.stop_after.into(),
        self_check: a.self_check.then(SelfCheckOptions::default),
    };
    let (out_model, report): (AnyModel, _) = match &model {
        AnyModel::F32(m) => {
            let (t, r) = csrep_transform(m, &options)?;
            (t.into(), r)
        }
        AnyModel::F64(m) => {
            let (t, r) = csrep_transform(m, &options)?;
            (t.into(), r)
        }
    };
    out_model.save(&a.out)?;
    for u in &report.untransformed {
        let node = u.node.map_or(String::new(), |n| format!(", node {n}"));
        let _ = writeln!(
            err,
            "note: step {} left layer {}{node} unchanged: {}",
            u.step.number(),
            u.layer,
            u.reason
        );
    }
    let mut o = Output::default();
    o.put("out", a.out.display().to_string());
    o.put("stop_after", Step::from(a.stop_after).number());
    o.put("rewrites", report.rewrites());
    o.put("merged_groups", report.merged_groups);
    o.put("untransformed", report.untransformed.len());
    for s in &report.steps {
        let key = format!("step{}", s.step.number());
        o.put(format!("{key}.name"), s.step.name());
        o.put(format!("{key}.rewrites"), s.rewrites);
        o.put_all(&format!("{key}.before"), s.before);
        o.put_all(&format!("{key}.after"), s.after);
    }
    if let Some(c) = report.self_check {
        o.put_all("self_check", c);
    }
    Ok(Outcome::Ok(o))
}

fn interface<F: Element>(m: &ModelGraph<F>) -> (Option<usize>, Option<usize>, Option<usize>) {
    (m.input_channels(), m.frame_channels(), m.embedding_dim())
}

fn cmd_verify(a: &VerifyArgs) -> Result<Outcome, Error> {
    let ma = AnyModel::load(&a.a)?;
    let mb = AnyModel::load(&a.b)?;
    if ma.dtype() != mb.dtype() {
        return Err(Error::DtypeMismatch {
            found: mb.dtype().name(),
            requested: ma.dtype().name(),
        });
    }
    let opts = SelfCheckOptions {
        trials: a.trials,
        batch: a.batch,
        frames: a.frames,
        seed: a.seed,
    };
    let result = match (&ma, &mb) {
        (AnyModel::F32(x), AnyModel::F32(y)) => {
            check_interface(x, y)?;
            self_check(x, y, &opts)?
        }
        (AnyModel::F64(x), AnyModel::F64(y)) => {
            check_interface(x, y)?;
            self_check(x, y, &opts)?
        }
        _ => unreachable!("dtypes compared above"),
    };
    let tol = a.tol.unwrap_or(match ma.dtype() {
        DType::Fp32 => 1e-4,
        DType::Fp64 => 1e-10,
    });
    let pass = result.max_abs_deviation <= tol;
    let mut o = Output::default();
    o.put("dtype", ma.dtype().name());
    o.put("trials", result.trials);
    o.put("batch", a.batch);
    o.put("frames", a.frames);
    o.put("max_abs_deviation", result.max_abs_deviation);
    o.put("max_rel_deviation", result.max_rel_deviation);
    o.put("tol", tol);
    o.put("pass", pass);
    Ok(if pass {
        Outcome::Ok(o)
    } else {
        Outcome::VerifyFailed(o)
    })
}

fn check_interface<F: Element>(a: &ModelGraph<F>, b: &ModelGraph<F>) -> Result<(), Error> {
    let (ia, ib) = (interface(a), interface(b));
    if ia != ib {
        return Err(Error::InvalidArgument(format!(
            "model interfaces differ: (input, frame, embedding) channels {ia:?} vs {ib:?}"
        )));
    }
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<Outcome, Error> {
    let model = AnyModel::load(&a.model)?;
    let opts = BenchOptions {
        batch: a.batch,
        frames: a.frames,
        warmup: a.warmup,
        iters: a.iters,
        threads: a.threads,
        seed: a.seed,
    };
    let r = with_model!(&model, m => run_bench(m, &opts))?;
    let mut o = Output::default();
    o.put("model", &model.meta().name);
    o.put("dtype", model.dtype().name());
    o.put_all("", r);
    Ok(Outcome::Ok(o))
}

fn cmd_params(a: &ParamsArgs) -> Result<Outcome, Error> {
    let mut o = Output::default();
    match (&a.model, &a.config) {
        (Some(path), _) => {
            let model = AnyModel::load(path)?;
            with_model!(&model, m => describe(&mut o, m, a.frames));
        }
        (None, Some(path)) => {
            let config = RepTdnnConfig::load(path)?;
            config.validate()?;
            o.put("name", &config.name);
            o.put("training_params", config.training_param_count());
            o.put("plain_params", config.plain_param_count());
        }
        (None, None) => unreachable!("clap requires one of --model and --config"),
    }
    Ok(Outcome::Ok(o))
}

fn cmd_eer(a: &EerArgs) -> Result<Outcome, Error> {
    let scores = load_scores(&a.scores)?;
    let params = DcfParams {
        p_target: a.p_target,
        c_miss: a.c_miss,
        c_fa: a.c_fa,
    };
    let eer = compute_eer(&scores)?;
    let min_dcf = compute_min_dcf(&scores, &params)?;
    let targets = scores.iter().filter(|s| s.label == Label::Target).count();
    let mut o = Output::default();
    o.put("trials", scores.len());
    o.put("targets", targets);
    o.put("nontargets", scores.len() - targets);
    o.put("eer", eer);
    o.put("eer_percent", eer * 100.0);
    o.put("min_dcf", min_dcf);
    o.put("p_target", a.p_target);
    o.put("c_miss", a.c_miss);
    o.put("c_fa", a.c_fa);
    Ok(Outcome::Ok(o))
}
