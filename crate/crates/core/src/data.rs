//! Traffic panels: ingestion, export, resampling, chronological splits,
//! normalization and synthetic generators.
//!
//! # Trace format
//!
//! UTF-8, comma separated, optional leading `#` comment lines, then the
//! header `timestamp,service_id,value` and one row per (bucket, service):
//!
//! ```text
//! # provenance comment
//! timestamp,service_id,value
//! 1700000000,checkout,12
//! 1700000000,search,4.5
//! ```
//!
//! Timestamps are integer epoch seconds; values are nonnegative decimals.
//! The bucket width is the greatest common divisor of the gaps between
//! distinct timestamps. Buckets missing for a service are zero-filled and
//! recorded in [`TrafficPanel::gaps`].

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::DenseArray;
use crate::rng::Xorshift64Star;

pub const TRACE_HEADER: [&str; 3] = ["timestamp", "service_id", "value"];

/// `N` services observed over `L` uniformly spaced buckets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficPanel {
    pub service_ids: Vec<String>,
    /// Epoch seconds of bucket 0.
    pub start_time: i64,
    /// Bucket width in seconds.
    pub granularity: u64,
    /// `N x L` values.
    pub values: DenseArray,
    /// Zero-filled `(service, bucket)` cells.
    pub gaps: Vec<(usize, usize)>,
}

impl TrafficPanel {
    pub fn new(
        service_ids: Vec<String>,
        start_time: i64,
        granularity: u64,
        values: DenseArray,
    ) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::Shape(format!(
                "panel values must be N x L, got {:?}",
                values.shape()
            )));
        }
        if values.dim(0) != service_ids.len() {
            return Err(Error::Shape(format!(
                "{} service ids for {} rows",
                service_ids.len(),
                values.dim(0)
            )));
        }
        if values.dim(1) < 2 {
            return Err(Error::Argument("a panel needs at least two buckets".into()));
        }
        if granularity == 0 {
            return Err(Error::Argument("granularity must be positive".into()));
        }
        Ok(Self {
            service_ids,
            start_time,
            granularity,
            values,
            gaps: Vec::new(),
        })
    }

    pub fn n_services(&self) -> usize {
        self.values.dim(0)
    }

    pub fn len(&self) -> usize {
        self.values.dim(1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn series(&self, service: usize) -> &[f64] {
        let l = self.len();
        &self.values.data()[service * l..(service + 1) * l]
    }

    pub fn timestamp(&self, bucket: usize) -> i64 {
        self.start_time + bucket as i64 * self.granularity as i64
    }

    pub fn service_index(&self, id: &str) -> Option<usize> {
        self.service_ids.iter().position(|s| s == id)
    }

    /// Buckets `[start, end)` as a new panel.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::Argument(format!(
                "bucket range {start}..{end} outside panel of length {}",
                self.len()
            )));
        }
        let n = self.n_services();
        let width = end - start;
        let mut data = Vec::with_capacity(n * width);
        for s in 0..n {
            data.extend_from_slice(&self.series(s)[start..end]);
        }
        let mut out = Self::new(
            self.service_ids.clone(),
            self.timestamp(start),
            self.granularity,
            DenseArray::new(&[n, width], data)?,
        )?;
        out.gaps = self
            .gaps
            .iter()
            .filter(|(_, b)| (start..end).contains(b))
            .map(|&(s, b)| (s, b - start))
            .collect();
        Ok(out)
    }
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Reads a trace file into a gap-filled panel.
pub fn load_trace(path: impl AsRef<Path>) -> Result<TrafficPanel> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);

    let header = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if header.iter().collect::<Vec<_>>() != TRACE_HEADER {
        let line = header.position().map_or(1, |p| p.line());
        return Err(parse_err(
            path,
            line,
            format!("expected header `{}`", TRACE_HEADER.join(",")),
        ));
    }

    let mut ids: Vec<String> = Vec::new();
    let mut id_index: HashMap<String, usize> = HashMap::new();
    let mut rows: Vec<(i64, usize, f64, u64)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 3 {
            return Err(parse_err(path, line, format!("expected 3 fields, got {}", record.len())));
        }
        let ts: i64 = record[0]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad timestamp `{}`", &record[0])))?;
        let id = record[1].to_string();
        if id.is_empty() {
            return Err(parse_err(path, line, "empty service id"));
        }
        let value: f64 = record[2]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad value `{}`", &record[2])))?;
        if !value.is_finite() || value < 0.0 {
            return Err(parse_err(path, line, format!("value {value} must be finite and nonnegative")));
        }
        let next = ids.len();
        let service = *id_index.entry(id.clone()).or_insert_with(|| {
            ids.push(id);
            next
        });
        rows.push((ts, service, value, line));
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "trace has no data rows"));
    }

    if rows.windows(2).any(|w| w[1].0 < w[0].0) {
        log::warn!("{}: timestamps are not sorted; sorting", path.display());
        rows.sort_by_key(|r| r.0);
    }

    let start = rows[0].0;
    let end = rows[rows.len() - 1].0;
    let granularity = rows
        .iter()
        .map(|r| (r.0 - start) as u64)
        .fold(0, gcd);
    if granularity == 0 {
        return Err(parse_err(path, rows[0].3, "trace needs at least two distinct timestamps"));
    }
    let len = ((end - start) as u64 / granularity) as usize + 1;
    let n = ids.len();
    let mut values = vec![0.0; n * len];
    let mut seen = vec![false; n * len];
    for &(ts, service, value, line) in &rows {
        let bucket = ((ts - start) as u64 / granularity) as usize;
        let cell = service * len + bucket;
        if seen[cell] {
            return Err(parse_err(
                path,
                line,
                format!("duplicate entry for service `{}` at {ts}", ids[service]),
            ));
        }
        seen[cell] = true;
        values[cell] = value;
    }
    let gaps: Vec<(usize, usize)> = seen
        .iter()
        .enumerate()
        .filter(|(_, &s)| !s)
        .map(|(cell, _)| (cell / len, cell % len))
        .collect();
    if !gaps.is_empty() {
        log::info!("{}: zero-filled {} missing cells", path.display(), gaps.len());
    }
    let mut panel = TrafficPanel::new(ids, start, granularity, DenseArray::new(&[n, len], values)?)?;
    panel.gaps = gaps;
    Ok(panel)
}

/// Writes a panel in the trace format, optionally preceded by a `#` comment.
pub fn write_trace(panel: &TrafficPanel, path: impl AsRef<Path>, comment: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    if let Some(comment) = comment {
        for line in comment.lines() {
            writeln!(out, "# {line}").map_err(io)?;
        }
    }
    writeln!(out, "{}", TRACE_HEADER.join(",")).map_err(io)?;
    for bucket in 0..panel.len() {
        let ts = panel.timestamp(bucket);
        for (s, id) in panel.service_ids.iter().enumerate() {
            writeln!(out, "{ts},{id},{}", panel.series(s)[bucket]).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

/// Sums consecutive buckets into a coarser granularity; a trailing partial
/// bucket is dropped.
pub fn resample(panel: &TrafficPanel, new_granularity: u64) -> Result<TrafficPanel> {
    if new_granularity == 0 || new_granularity % panel.granularity != 0 {
        return Err(Error::Argument(format!(
            "granularity {new_granularity}s is not a multiple of the trace granularity {}s",
            panel.granularity
        )));
    }
    let factor = (new_granularity / panel.granularity) as usize;
    if factor == 1 {
        return Ok(panel.clone());
    }
    let new_len = panel.len() / factor;
    if new_len < 2 {
        return Err(Error::Argument(format!(
            "resampling {} buckets by {factor} leaves fewer than two",
            panel.len()
        )));
    }
    let n = panel.n_services();
    let mut data = Vec::with_capacity(n * new_len);
    for s in 0..n {
        let series = panel.series(s);
        data.extend(
            series
                .chunks_exact(factor)
                .take(new_len)
                .map(|c| c.iter().sum::<f64>()),
        );
    }
    let mut out = TrafficPanel::new(
        panel.service_ids.clone(),
        panel.start_time,
        new_granularity,
        DenseArray::new(&[n, new_len], data)?,
    )?;
    let mut gaps: Vec<(usize, usize)> = panel
        .gaps
        .iter()
        .map(|&(s, b)| (s, b / factor))
        .filter(|&(_, b)| b < new_len)
        .collect();
    gaps.dedup();
    out.gaps = gaps;
    Ok(out)
}

/// Number of (input, target) windows a segment of `len` buckets yields.
pub fn window_count(len: usize, input_len: usize, pred_len: usize) -> usize {
    (len + 1).saturating_sub(input_len + pred_len)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PanelSplit {
    pub train: TrafficPanel,
    pub val: TrafficPanel,
    pub test: TrafficPanel,
}

/// Contiguous chronological train/validation/test segments. Each segment must
/// be at least `min_segment` buckets long.
pub fn split(panel: &TrafficPanel, ratios: SplitRatios, min_segment: usize) -> Result<PanelSplit> {
    let parts = [ratios.train, ratios.val, ratios.test];
    if parts.iter().any(|r| !(r.is_finite() && *r > 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!(
            "split ratios must be positive and sum to 1, got {parts:?}"
        )));
    }
    let len = panel.len();
    let train_len = (len as f64 * ratios.train).round() as usize;
    let val_len = (len as f64 * ratios.val).round() as usize;
    let test_len = len.saturating_sub(train_len + val_len);
    for (name, seg) in [("train", train_len), ("validation", val_len), ("test", test_len)] {
        if seg < min_segment.max(2) {
            return Err(Error::Argument(format!(
                "{name} segment has {seg} buckets, needs at least {}",
                min_segment.max(2)
            )));
        }
    }
    Ok(PanelSplit {
        train: panel.slice(0, train_len)?,
        val: panel.slice(train_len, train_len + val_len)?,
        test: panel.slice(train_len + val_len, len)?,
    })
}

/// Per-service z-score statistics fitted on a training segment.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationRecord {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Services whose training segment is constant; they are only centered.
    pub constant: Vec<bool>,
}

impl NormalizationRecord {
    pub fn fit(train: &TrafficPanel) -> Self {
        let n = train.n_services();
        let mut mean = Vec::with_capacity(n);
        let mut std = Vec::with_capacity(n);
        let mut constant = Vec::with_capacity(n);
        for s in 0..n {
            let x = train.series(s);
            let m = x.iter().sum::<f64>() / x.len() as f64;
            let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64;
            let sd = var.sqrt();
            let flat = !(sd > 1e-12 * m.abs().max(1.0));
            mean.push(m);
            std.push(if flat { 1.0 } else { sd });
            constant.push(flat);
        }
        Self { mean, std, constant }
    }

    pub fn apply(&self, panel: &TrafficPanel) -> Result<TrafficPanel> {
        if panel.n_services() != self.mean.len() {
            return Err(Error::Shape(format!(
                "normalization fitted on {} services, panel has {}",
                self.mean.len(),
                panel.n_services()
            )));
        }
        let l = panel.len();
        let mut out = panel.clone();
        for (s, row) in out.values.data_mut().chunks_mut(l).enumerate() {
            for v in row {
                *v = (*v - self.mean[s]) / self.std[s];
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticConfig {
    pub r_x: f64,
    pub r_y: f64,
    /// Effect of `y` on the `x` update.
    pub beta_xy: f64,
    /// Effect of `x` on the `y` update.
    pub beta_yx: f64,
    pub x0: f64,
    pub y0: f64,
    /// Half-width of a seeded uniform perturbation of `(x0, y0)`; zero keeps
    /// the initial state exactly.
    pub initial_jitter: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            r_x: 3.8,
            r_y: 3.5,
            beta_xy: 0.02,
            beta_yx: 0.1,
            x0: 0.4,
            y0: 0.2,
            initial_jitter: 0.0,
        }
    }
}

/// Two coupled logistic maps, returned as services `x` and `y`:
///
/// `x(t+1) = x(t) (r_x - r_x x(t) - beta_xy y(t))`,
/// `y(t+1) = y(t) (r_y - r_y y(t) - beta_yx x(t))`.
///
/// Bucket 0 holds the (possibly jittered) initial state.
pub fn gen_coupled_logistic(config: &LogisticConfig, len: usize, seed: u64) -> Result<TrafficPanel> {
    if len < 2 {
        return Err(Error::Argument("logistic series needs at least two steps".into()));
    }
    let mut rng = Xorshift64Star::new(seed);
    let mut jitter = || config.initial_jitter * (2.0 * rng.next_f64() - 1.0);
    let mut x = config.x0 + jitter();
    let mut y = config.y0 + jitter();
    let mut xs = Vec::with_capacity(len);
    let mut ys = Vec::with_capacity(len);
    for step in 0..len {
        if !(0.0..=1.5).contains(&x) || !(0.0..=1.5).contains(&y) || !x.is_finite() || !y.is_finite() {
            return Err(Error::Divergence {
                step,
                message: format!("state ({x}, {y}) left [0, 1.5]"),
            });
        }
        xs.push(x);
        ys.push(y);
        let nx = x * (config.r_x - config.r_x * x - config.beta_xy * y);
        let ny = y * (config.r_y - config.r_y * y - config.beta_yx * x);
        x = nx;
        y = ny;
    }
    xs.extend(ys);
    TrafficPanel::new(
        vec!["x".into(), "y".into()],
        0,
        1,
        DenseArray::new(&[2, len], xs)?,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LorenzConfig {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub dt: f64,
    pub initial: [f64; 3],
}

impl Default for LorenzConfig {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            dt: 0.01,
            initial: [1.0, 1.0, 1.0],
        }
    }
}

fn lorenz_field(c: &LorenzConfig, s: [f64; 3]) -> [f64; 3] {
    [
        c.sigma * (s[1] - s[0]),
        s[0] * (c.rho - s[2]) - s[1],
        s[0] * s[1] - c.beta * s[2],
    ]
}

/// One classical fourth-order Runge-Kutta step.
pub fn lorenz_rk4_step(c: &LorenzConfig, s: [f64; 3]) -> [f64; 3] {
    let h = c.dt;
    let add = |a: [f64; 3], b: [f64; 3], f: f64| [a[0] + f * b[0], a[1] + f * b[1], a[2] + f * b[2]];
    let k1 = lorenz_field(c, s);
    let k2 = lorenz_field(c, add(s, k1, h / 2.0));
    let k3 = lorenz_field(c, add(s, k2, h / 2.0));
    let k4 = lorenz_field(c, add(s, k3, h));
    std::array::from_fn(|i| s[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

/// Lorenz trajectory sampled every `dt`, as services `x`, `y`, `z`.
/// Bucket 0 holds the initial state.
pub fn gen_lorenz(config: &LorenzConfig, len: usize) -> Result<TrafficPanel> {
    if !(config.dt > 0.0) {
        return Err(Error::Argument("dt must be positive".into()));
    }
    if len < 2 {
        return Err(Error::Argument("trajectory needs at least two samples".into()));
    }
    let mut cols = vec![Vec::with_capacity(len); 3];
    let mut s = config.initial;
    for step in 0..len {
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step,
                message: "non-finite Lorenz state".into(),
            });
        }
        for (col, v) in cols.iter_mut().zip(s) {
            col.push(v);
        }
        s = lorenz_rk4_step(config, s);
    }
    TrafficPanel::new(
        vec!["x".into(), "y".into(), "z".into()],
        0,
        1,
        DenseArray::new(&[3, len], cols.concat())?,
    )
}

/// Synthetic multi-service traffic.
///
/// Each service is a seasonal base plus lagged linear influence from the
/// services it is coupled to plus AR(1) noise, clipped at zero:
///
/// `dev_i(t) = A * sum_p sin(2 pi t / P_p + phi_ip) + sum_j C[i][j] dev_j(t - lag) + sigma z_i(t)`,
/// `y_i(t) = max(0, base + dev_i(t))`,
///
/// with `z_i(t) = rho z_i(t-1) + sqrt(1 - rho^2) e_i(t)` and phases `phi_ip`
/// drawn uniformly from the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficConfig {
    pub services: usize,
    pub len: usize,
    /// Row-major `services x services`; entry `[i][j]` is the influence of `j` on `i`.
    pub coupling: Vec<f64>,
    pub lag: usize,
    /// Seasonal periods in buckets.
    pub periods: Vec<f64>,
    pub amplitude: f64,
    pub base_level: f64,
    pub noise_level: f64,
    pub noise_persistence: f64,
    pub granularity: u64,
    pub start_time: i64,
    pub seed: u64,
}

impl TrafficConfig {
    pub fn uncoupled(services: usize, len: usize, seed: u64) -> Self {
        Self {
            services,
            len,
            coupling: vec![0.0; services * services],
            lag: 1,
            periods: vec![288.0],
            amplitude: 5.0,
            base_level: 100.0,
            noise_level: 10.0,
            noise_persistence: 0.8,
            granularity: 300,
            start_time: 1_700_000_000 - 1_700_000_000 % 86_400,
            seed,
        }
    }

    pub fn couple(&mut self, source: usize, target: usize, strength: f64) -> &mut Self {
        self.coupling[target * self.services + source] = strength;
        self
    }
}

pub fn gen_traffic_panel(config: &TrafficConfig) -> Result<TrafficPanel> {
    let n = config.services;
    if n == 0 || config.len < 2 {
        return Err(Error::Argument("traffic panel needs N >= 1 and L >= 2".into()));
    }
    if config.coupling.len() != n * n {
        return Err(Error::Shape(format!(
            "coupling must hold {} entries, got {}",
            n * n,
            config.coupling.len()
        )));
    }
    if (0..n).any(|i| config.coupling[i * n + i] != 0.0) {
        return Err(Error::Argument("coupling diagonal must be zero".into()));
    }
    if config.lag == 0 {
        return Err(Error::Argument("coupling lag must be at least 1".into()));
    }
    if config.periods.iter().any(|p| !(*p > 0.0)) {
        return Err(Error::Argument("seasonal periods must be positive".into()));
    }
    if !(0.0..1.0).contains(&config.noise_persistence) {
        return Err(Error::Argument("noise persistence must lie in [0, 1)".into()));
    }

    let mut rng = Xorshift64Star::new(config.seed);
    let phases: Vec<f64> = (0..n * config.periods.len())
        .map(|_| std::f64::consts::TAU * rng.next_f64())
        .collect();
    let innovation_scale = (1.0 - config.noise_persistence.powi(2)).sqrt();
    let mut noise: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();

    let len = config.len;
    let mut dev = vec![0.0; n * len];
    for t in 0..len {
        for i in 0..n {
            let seasonal: f64 = config
                .periods
                .iter()
                .enumerate()
                .map(|(p, period)| {
                    (std::f64::consts::TAU * t as f64 / period + phases[i * config.periods.len() + p]).sin()
                })
                .sum::<f64>()
                * config.amplitude;
            let mut value = seasonal + config.noise_level * noise[i];
            if t >= config.lag {
                for j in 0..n {
                    let c = config.coupling[i * n + j];
                    if c != 0.0 {
                        value += c * dev[j * len + t - config.lag];
                    }
                }
            }
            dev[i * len + t] = value;
        }
        for z in noise.iter_mut() {
            *z = config.noise_persistence * *z + innovation_scale * rng.next_normal();
        }
    }
    for v in dev.iter_mut() {
        *v = (config.base_level + *v).max(0.0);
    }
    let ids = (0..n).map(|i| format!("svc-{i}")).collect();
    TrafficPanel::new(
        ids,
        config.start_time,
        config.granularity,
        DenseArray::new(&[n, len], dev)?,
    )
}
