//! Command-line front end.
//!
//! Settings resolve as command-line flag, then config file, then built-in
//! default. The config file is flat text with one `key = value` per line and
//! `#` comment lines. Every output file starts with
//! `# ccmplus config-hash=<sha256>` computed over the resolved settings
//! (excluding `out` and `threads`, which do not affect results).

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::warn;

use crate::ccm::ccm_matrix;
use crate::checkpoint::{config_hash, Checkpoint};
use crate::data::{
    gen_coupled_logistic, gen_traffic_panel, load_trace, resample, write_trace, LogisticConfig, SplitRatios,
    TrafficConfig, TrafficPanel,
};
use crate::error::{Error, Result};
use crate::forecaster::{evaluate, fit, Dataset, EpochRecord, Metrics, ModelConfig, TrainConfig};
use crate::numeric::DenseArray;
use crate::rng::Xorshift64Star;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Uint,
    Float,
    Bool,
    Text,
    Lags,
    Granularity,
}

/// Known settings with their defaults.
const KEYS: &[(&str, Kind, &str)] = &[
    ("trace", Kind::Text, ""),
    ("out", Kind::Text, ""),
    ("threads", Kind::Uint, "0"),
    ("seed", Kind::Uint, "0"),
    ("granularity", Kind::Granularity, ""),
    ("taus", Kind::Lags, "1,2,3,4"),
    ("tau_w", Kind::Uint, "100"),
    ("input_len", Kind::Uint, "168"),
    ("pred_len", Kind::Uint, "1"),
    ("c_in", Kind::Uint, "16"),
    ("c_out", Kind::Uint, "32"),
    ("d_ts", Kind::Uint, "64"),
    ("head_hidden", Kind::Uint, "64"),
    ("use_ccm", Kind::Bool, "true"),
    ("lr", Kind::Float, "0.000001"),
    ("epochs", Kind::Uint, "15"),
    ("patience", Kind::Uint, "5"),
    ("batch_size", Kind::Uint, "8"),
    ("momentum", Kind::Float, "0.5"),
    ("train_ratio", Kind::Float, "0.7"),
    ("val_ratio", Kind::Float, "0.1"),
    ("test_ratio", Kind::Float, "0.2"),
    ("dim", Kind::Uint, "3"),
    ("tau", Kind::Uint, "1"),
    ("samples", Kind::Uint, "20"),
    ("gen_kind", Kind::Text, "traffic"),
    ("services", Kind::Uint, "4"),
    ("length", Kind::Uint, "2000"),
    ("couplings", Kind::Text, ""),
    ("lag", Kind::Uint, "1"),
    ("period", Kind::Float, "288"),
    ("amplitude", Kind::Float, "5"),
    ("noise_level", Kind::Float, "10"),
    ("noise_persistence", Kind::Float, "0.8"),
    ("beta_xy", Kind::Float, "0.02"),
    ("beta_yx", Kind::Float, "0.1"),
];

const RUNTIME_KEYS: [&str; 2] = ["out", "threads"];

/// Parses `5` (minutes), `300s`, `5m` or `1h` into seconds.
pub fn parse_granularity(text: &str) -> Result<u64> {
    let t = text.trim();
    let (digits, unit) = match t.char_indices().last() {
        Some((i, 's')) => (&t[..i], 1),
        Some((i, 'm')) => (&t[..i], 60),
        Some((i, 'h')) => (&t[..i], 3600),
        _ => (t, 60),
    };
    let n: u64 = digits
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("granularity {text:?} is not a whole number of s, m or h")))?;
    if n == 0 {
        return Err(Error::Config("granularity must be positive".into()));
    }
    Ok(n * unit)
}

fn kind_of(key: &str) -> Result<Kind> {
    KEYS.iter()
        .find(|(k, _, _)| *k == key)
        .map(|(_, kind, _)| *kind)
        .ok_or_else(|| Error::Config(format!("unknown setting {key:?}")))
}

/// Fully resolved settings for one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|(k, _, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    /// Validates and stores one setting in canonical form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let kind = kind_of(key)?;
        let value = value.trim();
        let bad = |what: &str| Error::Config(format!("{key} = {value:?} is not {what}"));
        let canonical = match kind {
            Kind::Uint => value.parse::<u64>().map_err(|_| bad("a nonnegative integer"))?.to_string(),
            Kind::Float => {
                let v = value.parse::<f64>().map_err(|_| bad("a number"))?;
                if !v.is_finite() {
                    return Err(bad("finite"));
                }
                v.to_string()
            }
            Kind::Bool => value.parse::<bool>().map_err(|_| bad("true or false"))?.to_string(),
            Kind::Text => value.to_string(),
            Kind::Lags => {
                let lags = value
                    .split(',')
                    .map(|t| t.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad("a comma-separated list of integers"))?;
                lags.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
            }
            Kind::Granularity if value.is_empty() => String::new(),
            Kind::Granularity => format!("{}s", parse_granularity(value)?),
        };
        self.values.insert(key.to_string(), canonical);
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn merge_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: i as u64 + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k.trim(), v).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: i as u64 + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.merge_text(&text, path)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn optional(&self, key: &str) -> Option<&str> {
        Some(self.get(key)).filter(|v| !v.is_empty())
    }

    fn uint(&self, key: &str) -> usize {
        self.get(key).parse().expect("validated on set")
    }

    fn float(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated on set")
    }

    pub fn seed(&self) -> u64 {
        self.get("seed").parse().expect("validated on set")
    }

    pub fn granularity(&self) -> Option<u64> {
        self.optional("granularity").map(|g| parse_granularity(g).expect("validated on set"))
    }

    /// Result-relevant settings as sorted `key = value` lines.
    pub fn echo(&self) -> String {
        self.values
            .iter()
            .filter(|(k, _)| !RUNTIME_KEYS.contains(&k.as_str()))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn hash(&self) -> String {
        config_hash(&self.echo())
    }

    /// Defaults overlaid with a stored [`RunConfig::echo`].
    pub fn from_echo(echo: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_text(echo, Path::new("<checkpoint>"))?;
        Ok(cfg)
    }

    pub fn batch_size(&self) -> usize {
        self.uint("batch_size")
    }

    pub fn provenance(&self) -> String {
        format!("ccmplus config-hash={}", self.hash())
    }

    pub fn model_config(&self, n_services: usize) -> ModelConfig {
        ModelConfig {
            n_services,
            input_len: self.uint("input_len"),
            pred_len: self.uint("pred_len"),
            c_in: self.uint("c_in"),
            c_out: self.uint("c_out"),
            taus: self
                .get("taus")
                .split(',')
                .map(|t| t.parse().expect("validated on set"))
                .collect(),
            tau_w: self.uint("tau_w"),
            d_ts: self.uint("d_ts"),
            head_hidden: self.uint("head_hidden"),
            use_ccm: self.get("use_ccm") == "true",
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.float("lr"),
            epochs: self.uint("epochs"),
            patience: self.uint("patience"),
            batch_size: self.uint("batch_size"),
            momentum: self.float("momentum"),
            seed: self.seed(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn split_ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.float("train_ratio"),
            val: self.float("val_ratio"),
            test: self.float("test_ratio"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ccmplus", version, about = "Convergent cross mapping and CCMPlus traffic forecasting")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Bucket width: minutes, or a number with an s, m or h suffix.
    #[arg(long, global = true)]
    granularity: Option<String>,
    /// Worker threads; 0 uses every logical core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file, or output directory for `train`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override any setting, e.g. `--set lr=0.001`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Classic cross-map skill matrix of a trace.
    Ccm {
        trace: PathBuf,
        /// Embedding dimension E.
        #[arg(long)]
        dim: Option<usize>,
        /// Embedding lag.
        #[arg(long)]
        tau: Option<usize>,
    },
    /// Train a forecaster; writes model.ckpt, metrics.csv and timing.csv.
    Train {
        /// Trace to train on; defaults to the `trace` setting.
        trace: Option<PathBuf>,
    },
    /// Test-split MSE and MAE of a checkpoint on a trace.
    Eval { checkpoint: PathBuf, trace: PathBuf },
    /// One row of the stored causal matrix against sampled services.
    Heatmap {
        checkpoint: PathBuf,
        service: String,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Write a synthetic trace.
    Gen(GenArgs),
    /// Sum a trace into coarser buckets.
    Resample { trace: PathBuf },
}

#[derive(Debug, Args)]
struct GenArgs {
    /// `traffic` or `logistic`.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    services: Option<usize>,
    #[arg(long)]
    length: Option<usize>,
    /// Comma-separated `source->target:strength` entries.
    #[arg(long)]
    couplings: Option<String>,
}

fn write_grid(path: &Path, provenance: &str, header: &[String], rows: &[(String, Vec<f64>)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "# {provenance}").map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    };
    w.write_record(header).map_err(csv_err)?;
    for (label, values) in rows {
        let mut record = vec![label.clone()];
        record.extend(values.iter().map(|v| v.to_string()));
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_lines(path: &Path, provenance: &str, lines: &[String]) -> Result<()> {
    let mut text = format!("# {provenance}\n");
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_resampled(path: &Path, granularity: Option<u64>) -> Result<TrafficPanel> {
    let panel = load_trace(path)?;
    match granularity {
        Some(g) => resample(&panel, g),
        None => Ok(panel),
    }
}

fn out_path(cfg: &RunConfig, default: &str) -> PathBuf {
    PathBuf::from(cfg.optional("out").unwrap_or(default))
}

fn cmd_ccm(cfg: &RunConfig, trace: &Path) -> Result<()> {
    let panel = load_resampled(trace, cfg.granularity())?;
    let m = ccm_matrix(&panel, cfg.uint("dim"), cfg.uint("tau"))?;
    for &(a, b) in &m.degenerate {
        warn!(
            "degenerate pair {} -> {}: skill reported as 0",
            panel.service_ids[a], panel.service_ids[b]
        );
    }
    let n = panel.n_services();
    let mut header = vec!["manifold\\target".to_string()];
    header.extend(panel.service_ids.iter().cloned());
    let rows: Vec<(String, Vec<f64>)> = (0..n)
        .map(|i| {
            (
                panel.service_ids[i].clone(),
                m.skills.data()[i * n..(i + 1) * n].to_vec(),
            )
        })
        .collect();
    let path = out_path(cfg, "ccm_matrix.csv");
    write_grid(&path, &cfg.provenance(), &header, &rows)?;
    println!("wrote {n}x{n} skill matrix to {}", path.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let train_cfg = cfg.train_config()?;
    let trace = cfg
        .optional("trace")
        .ok_or_else(|| Error::Config("no trace given; pass a path or set `trace`".into()))?;
    let panel = load_resampled(Path::new(trace), cfg.granularity())?;
    let model_cfg = cfg.model_config(panel.n_services());
    model_cfg.validate()?;
    let data = Dataset::prepare(&panel, cfg.split_ratios(), model_cfg.input_len, model_cfg.pred_len)?;
    let result = fit(&data, model_cfg, &train_cfg)?;

    let dir = out_path(cfg, "run");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let provenance = cfg.provenance();
    let metrics: Vec<String> = std::iter::once("epoch,train_mse,val_mse".to_string())
        .chain(
            result
                .history
                .iter()
                .map(|e: &EpochRecord| format!("{},{},{}", e.epoch, e.train_mse, e.val_mse)),
        )
        .collect();
    write_lines(&dir.join("metrics.csv"), &provenance, &metrics)?;
    let timing: Vec<String> = std::iter::once("epoch,wall_seconds".to_string())
        .chain(result.history.iter().map(|e| format!("{},{:.3}", e.epoch, e.wall_seconds)))
        .collect();
    write_lines(&dir.join("timing.csv"), &provenance, &timing)?;
    let checkpoint = Checkpoint {
        params: result.params,
        service_ids: panel.service_ids.clone(),
        config_echo: cfg.echo(),
    };
    checkpoint.save(dir.join("model.ckpt"))?;
    let best = &result.history[result.best_epoch];
    println!(
        "trained {} epochs (best {} with val mse {}); wrote {}",
        result.history.len(),
        result.best_epoch,
        best.val_mse,
        dir.display()
    );
    Ok(())
}

/// Reorders `panel` rows to `ids`.
fn align_services(panel: &TrafficPanel, ids: &[String]) -> Result<TrafficPanel> {
    if panel.service_ids == ids {
        return Ok(panel.clone());
    }
    let mut data = Vec::with_capacity(panel.values.len());
    for id in ids {
        let s = panel
            .service_index(id)
            .ok_or_else(|| Error::Config(format!("trace lacks service {id:?} the model was trained on")))?;
        data.extend_from_slice(panel.series(s));
    }
    if panel.n_services() != ids.len() {
        return Err(Error::Config(format!(
            "trace has {} services, model expects {}",
            panel.n_services(),
            ids.len()
        )));
    }
    TrafficPanel::new(
        ids.to_vec(),
        panel.start_time,
        panel.granularity,
        DenseArray::new(&[ids.len(), panel.len()], data)?,
    )
}

/// Test-split metrics of a checkpoint on a trace. Normalization is refitted
/// on the trace's own training segment.
pub fn eval_checkpoint(checkpoint: &Checkpoint, trace: &Path, granularity: Option<u64>, batch_size: usize, ratios: SplitRatios) -> Result<Metrics> {
    eval_checkpoint_on_panel(checkpoint, &load_resampled(trace, granularity)?, batch_size, ratios)
}

/// [`eval_checkpoint`] on an already loaded panel.
pub fn eval_checkpoint_on_panel(checkpoint: &Checkpoint, panel: &TrafficPanel, batch_size: usize, ratios: SplitRatios) -> Result<Metrics> {
    let panel = align_services(panel, &checkpoint.service_ids)?;
    let cfg = &checkpoint.params.config;
    let data = Dataset::prepare(&panel, ratios, cfg.input_len, cfg.pred_len)?;
    evaluate(&checkpoint.params, &data.test, batch_size)
}

fn checkpoint_settings(checkpoint: &Checkpoint, path: &Path, cli: &RunConfig, cli_set: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    cfg.merge_text(&checkpoint.config_echo, path)?;
    for key in cli_set {
        cfg.set(key, cli.get(key))?;
    }
    Ok(cfg)
}

fn cmd_eval(cfg: &RunConfig, ck: &Checkpoint, trace: &Path) -> Result<()> {
    let metrics = eval_checkpoint(ck, trace, cfg.granularity(), cfg.uint("batch_size"), cfg.split_ratios())?;
    println!("mse {} mae {} n_samples {}", metrics.mse, metrics.mae, metrics.n_samples);
    let path = out_path(cfg, "eval.csv");
    write_lines(
        &path,
        &cfg.provenance(),
        &[
            "mse,mae,n_samples".to_string(),
            format!("{},{},{}", metrics.mse, metrics.mae, metrics.n_samples),
        ],
    )
}

fn cmd_heatmap(cfg: &RunConfig, ck: &Checkpoint, service: &str) -> Result<()> {
    let causal = ck
        .params
        .causal
        .as_ref()
        .ok_or_else(|| Error::Config("checkpoint holds no causal matrix".into()))?;
    let row = ck
        .service_ids
        .iter()
        .position(|s| s == service)
        .ok_or_else(|| Error::Argument(format!("unknown service {service:?}")))?;
    let mut others: Vec<usize> = (0..ck.service_ids.len()).filter(|&j| j != row).collect();
    let mut rng = Xorshift64Star::new(cfg.seed());
    rng.shuffle(&mut others);
    others.truncate(cfg.uint("samples"));
    let cols: Vec<usize> = std::iter::once(row).chain(others).collect();
    let mut header = vec!["service".to_string()];
    header.extend(cols.iter().map(|&j| ck.service_ids[j].clone()));
    let values = cols.iter().map(|&j| causal.get(row, j)).collect();
    let path = out_path(cfg, "heatmap.csv");
    write_grid(&path, &cfg.provenance(), &header, &[(service.to_string(), values)])?;
    println!("wrote heatmap row for {service} to {}", path.display());
    Ok(())
}

/// Parses `source->target:strength` entries.
pub fn parse_couplings(text: &str, services: usize) -> Result<Vec<(usize, usize, f64)>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|entry| {
            let bad = || Error::Config(format!("coupling {entry:?} is not source->target:strength"));
            let (pair, strength) = entry.split_once(':').ok_or_else(bad)?;
            let (src, dst) = pair.split_once("->").ok_or_else(bad)?;
            let src: usize = src.trim().parse().map_err(|_| bad())?;
            let dst: usize = dst.trim().parse().map_err(|_| bad())?;
            let strength: f64 = strength.trim().parse().map_err(|_| bad())?;
            if src >= services || dst >= services || src == dst {
                return Err(Error::Config(format!(
                    "coupling {entry:?} must join two distinct services below {services}"
                )));
            }
            Ok((src, dst, strength))
        })
        .collect()
}

fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    let panel = match cfg.get("gen_kind") {
        "traffic" => {
            let n = cfg.uint("services");
            let mut tc = TrafficConfig::uncoupled(n, cfg.uint("length"), cfg.seed());
            for (src, dst, strength) in parse_couplings(cfg.get("couplings"), n)? {
                tc.couple(src, dst, strength);
            }
            tc.lag = cfg.uint("lag");
            tc.periods = vec![cfg.float("period")];
            tc.amplitude = cfg.float("amplitude");
            tc.noise_level = cfg.float("noise_level");
            tc.noise_persistence = cfg.float("noise_persistence");
            if let Some(g) = cfg.granularity() {
                tc.granularity = g;
            }
            gen_traffic_panel(&tc)?
        }
        "logistic" => {
            let lc = LogisticConfig {
                beta_xy: cfg.float("beta_xy"),
                beta_yx: cfg.float("beta_yx"),
                ..LogisticConfig::default()
            };
            gen_coupled_logistic(&lc, cfg.uint("length"), cfg.seed())?
        }
        other => return Err(Error::Config(format!("unknown gen_kind {other:?}; use traffic or logistic"))),
    };
    let path = out_path(cfg, "synthetic.csv");
    write_trace(&panel, &path, Some(&cfg.provenance()))?;
    println!(
        "wrote {} services x {} buckets to {}",
        panel.n_services(),
        panel.len(),
        path.display()
    );
    Ok(())
}

fn cmd_resample(cfg: &RunConfig, trace: &Path) -> Result<()> {
    let g = cfg
        .granularity()
        .ok_or_else(|| Error::Config("resample needs --granularity".into()))?;
    let panel = resample(&load_trace(trace)?, g)?;
    let path = out_path(cfg, "resampled.csv");
    write_trace(&panel, &path, Some(&cfg.provenance()))?;
    println!("wrote {} buckets of {g}s to {}", panel.len(), path.display());
    Ok(())
}

fn configure_threads(threads: usize) {
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        warn!("thread pool already configured: {e}");
    }
}

/// Runs one command from an argument list (program name first).
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Argument(e.to_string()))?;
    execute(cli)
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.merge_file(path)?;
    }
    let mut flags: Vec<(String, String)> = Vec::new();
    if let Some(s) = cli.seed {
        flags.push(("seed".into(), s.to_string()));
    }
    if let Some(g) = &cli.granularity {
        flags.push(("granularity".into(), g.clone()));
    }
    if let Some(t) = cli.threads {
        flags.push(("threads".into(), t.to_string()));
    }
    if let Some(o) = &cli.out {
        flags.push(("out".into(), o.display().to_string()));
    }
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        flags.push((k.trim().to_string(), v.to_string()));
    }
    match &cli.command {
        Command::Ccm { dim, tau, .. } => {
            flags.extend(dim.map(|d| ("dim".to_string(), d.to_string())));
            flags.extend(tau.map(|t| ("tau".to_string(), t.to_string())));
        }
        Command::Train { trace: Some(t) } => flags.push(("trace".into(), t.display().to_string())),
        Command::Heatmap { samples, .. } => {
            flags.extend(samples.map(|s| ("samples".to_string(), s.to_string())));
        }
        Command::Gen(g) => {
            flags.extend(g.kind.clone().map(|k| ("gen_kind".to_string(), k)));
            flags.extend(g.services.map(|s| ("services".to_string(), s.to_string())));
            flags.extend(g.length.map(|l| ("length".to_string(), l.to_string())));
            flags.extend(g.couplings.clone().map(|c| ("couplings".to_string(), c)));
        }
        _ => {}
    }
    for (k, v) in &flags {
        cfg.set(k, v)?;
    }
    let flag_keys: Vec<String> = flags.iter().map(|(k, _)| k.clone()).collect();

    let threads = cfg.uint("threads");
    if threads > 0 {
        configure_threads(threads);
    }
    match &cli.command {
        Command::Ccm { trace, .. } => cmd_ccm(&cfg, trace),
        Command::Train { .. } => cmd_train(&cfg),
        Command::Eval { checkpoint, trace } => {
            let ck = Checkpoint::load(checkpoint)?;
            let resolved = checkpoint_settings(&ck, checkpoint, &cfg, &flag_keys)?;
            cmd_eval(&resolved, &ck, trace)
        }
        Command::Heatmap { checkpoint, service, .. } => {
            let ck = Checkpoint::load(checkpoint)?;
            let resolved = checkpoint_settings(&ck, checkpoint, &cfg, &flag_keys)?;
            cmd_heatmap(&resolved, &ck, service)
        }
        Command::Gen(_) => cmd_gen(&cfg),
        Command::Resample { trace } => cmd_resample(&cfg, trace),
    }
}

/// Entry point of the `ccmplus` binary.
pub fn run() -> ExitCode {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
