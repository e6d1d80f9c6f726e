//! Metrics over a completed [`ServeLog`] and the CSV/JSON files written
//! for plotting. Every number here is recomputed from the log alone.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{reproduce_reference_table, speedup_surface};
use crate::engine::{RequestLog, ServeLog, UpdateEvent};
use crate::error::{Error, Result};

/// Bumped whenever a column is added, removed or reinterpreted.
pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RollingPoint {
    pub request_index: usize,
    /// `None` until a request with at least one proposal has been seen.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RollingAlpha {
    pub window: usize,
    pub series: Vec<RollingPoint>,
}

impl RollingAlpha {
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.series.iter().filter_map(|p| p.value)
    }
}

/// Mean per-request α over the last `window` requests. Requests with no
/// proposals are left out of the mean but still occupy a window slot.
pub fn rolling_alpha(log: &ServeLog, window: usize) -> Result<RollingAlpha> {
    rolling_alpha_of(log.requests.iter(), window)
}

/// Same as [`rolling_alpha`] over the requests matching `keep`, with
/// windows counted within that subsequence.
pub fn rolling_alpha_where(
    log: &ServeLog,
    window: usize,
    keep: impl Fn(&RequestLog) -> bool,
) -> Result<RollingAlpha> {
    rolling_alpha_of(log.requests.iter().filter(|r| keep(r)), window)
}

fn rolling_alpha_of<'a>(requests: impl Iterator<Item = &'a RequestLog>, window: usize) -> Result<RollingAlpha> {
    if window == 0 {
        return Err(Error::invalid("rolling window must be at least 1"));
    }
    let mut recent: std::collections::VecDeque<Option<f64>> = std::collections::VecDeque::with_capacity(window);
    let mut series = Vec::new();
    for r in requests {
        if recent.len() == window {
            recent.pop_front();
        }
        recent.push_back(r.alpha());
        let (sum, n) = recent.iter().flatten().fold((0.0, 0usize), |(s, n), a| (s + a, n + 1));
        series.push(RollingPoint { request_index: r.index, value: (n > 0).then(|| sum / n as f64) });
    }
    Ok(RollingAlpha { window, series })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub proposed: u64,
    pub accepted: u64,
    /// Occurrences in the generated part of final sequences.
    pub appears: u64,
}

impl TokenCounts {
    pub fn precision(&self) -> Option<f64> {
        (self.proposed > 0).then(|| self.accepted as f64 / self.proposed as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        (self.appears > 0).then(|| self.accepted as f64 / self.appears as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenStats {
    pub counts: BTreeMap<u32, TokenCounts>,
}

/// Counts accepted draft proposals that were kept in the final sequence
/// and every generated occurrence; bonus and residual draws only add to
/// `appears`.
pub fn token_stats(log: &ServeLog) -> TokenStats {
    let mut counts: BTreeMap<u32, TokenCounts> = BTreeMap::new();
    for r in log.requests.iter().filter(|r| r.error.is_none()) {
        let generated = &r.final_tokens[r.prompt_len.min(r.final_tokens.len())..];
        for &t in generated {
            counts.entry(t).or_default().appears += 1;
        }
        let mut cursor = 0;
        for step in &r.steps {
            for (j, &t) in step.proposed.iter().enumerate() {
                let c = counts.entry(t).or_default();
                c.proposed += 1;
                if j < step.accept_count && cursor + j < generated.len() {
                    c.accepted += 1;
                }
            }
            cursor += step.accept_count + 1;
        }
    }
    TokenStats { counts }
}

impl TokenStats {
    /// The `n` tokens appearing most often in final answers, ties by id.
    pub fn top_n(&self, n: usize) -> Vec<u32> {
        let mut ids: Vec<(u32, u64)> = self.counts.iter().map(|(&t, c)| (t, c.appears)).filter(|p| p.1 > 0).collect();
        ids.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ids.into_iter().take(n).map(|(t, _)| t).collect()
    }

    /// Mean precision and recall over `tokens`, skipping undefined values.
    pub fn mean_precision_recall(&self, tokens: &[u32]) -> (Option<f64>, Option<f64>) {
        let mean = |f: &dyn Fn(&TokenCounts) -> Option<f64>| {
            let v: Vec<f64> = tokens.iter().filter_map(|t| self.counts.get(t).and_then(f)).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        (mean(&|c| c.precision()), mean(&|c| c.recall()))
    }
}

/// Ensures `dir` exists and accepts new files.
pub fn check_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".osd-write-probe");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn csv_writer(path: &Path, kind: &str) -> Result<csv::Writer<BufWriter<fs::File>>> {
    let mut out = create(path)?;
    writeln!(out, "# osd-{kind} v{REPORT_FORMAT_VERSION}").map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(out))
}

fn finish(w: csv::Writer<BufWriter<fs::File>>, path: &Path) -> Result<()> {
    let mut inner = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    inner.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, std::io::Error::other(e))
}

/// Rolling α per request; each request's windows cover its own
/// (cluster, source) stream.
pub fn write_rolling_alpha_csv(path: &Path, log: &ServeLog, windows: (usize, usize)) -> Result<()> {
    let mut by_stream: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (pos, r) in log.requests.iter().enumerate() {
        by_stream.entry((&r.cluster_id, &r.source_tag)).or_default().push(pos);
    }
    let mut values = vec![(None, None); log.requests.len()];
    for ((cluster, source), positions) in &by_stream {
        let keep = |r: &RequestLog| r.cluster_id == *cluster && r.source_tag == *source;
        let a = rolling_alpha_where(log, windows.0, keep)?;
        let b = rolling_alpha_where(log, windows.1, keep)?;
        for (i, &pos) in positions.iter().enumerate() {
            values[pos] = (a.series[i].value, b.series[i].value);
        }
    }
    let applied: std::collections::BTreeSet<usize> = log.applied_update_indices().into_iter().collect();
    let mut w = csv_writer(path, "rolling-alpha")?;
    let err = csv_err(path);
    w.write_record([
        "request_index".to_string(),
        format!("alpha_window{}", windows.0),
        format!("alpha_window{}", windows.1),
        "source_tag".into(),
        "cluster_id".into(),
        "update_event".into(),
    ])
    .map_err(&err)?;
    for (r, (a, b)) in log.requests.iter().zip(values) {
        let event = if applied.contains(&r.index) { "1" } else { "0" };
        w.write_record([r.index.to_string(), fmt_opt(a), fmt_opt(b), r.source_tag.clone(), r.cluster_id.clone(), event.into()])
            .map_err(&err)?;
    }
    finish(w, path)
}

pub fn write_token_stats_csv(path: &Path, stats: &TokenStats) -> Result<()> {
    let ranked = stats.top_n(usize::MAX);
    let rank: BTreeMap<u32, usize> = ranked.iter().enumerate().map(|(i, &t)| (t, i + 1)).collect();
    let mut w = csv_writer(path, "token-stats")?;
    let err = csv_err(path);
    w.write_record(["token", "frequency_rank", "proposed", "accepted", "appears", "precision", "recall"]).map_err(&err)?;
    for (t, c) in &stats.counts {
        w.write_record([
            t.to_string(),
            rank.get(t).map(|r| r.to_string()).unwrap_or_default(),
            c.proposed.to_string(),
            c.accepted.to_string(),
            c.appears.to_string(),
            fmt_opt(c.precision()),
            fmt_opt(c.recall()),
        ])
        .map_err(&err)?;
    }
    finish(w, path)
}

/// Before/after precision and recall for the `top_n` most frequent tokens
/// of the `after` run.
pub fn write_token_improvement_csv(path: &Path, before: &TokenStats, after: &TokenStats, top_n: usize) -> Result<()> {
    let mut w = csv_writer(path, "token-improvement")?;
    let err = csv_err(path);
    w.write_record(["token", "precision_before", "precision_after", "recall_before", "recall_after"]).map_err(&err)?;
    for t in after.top_n(top_n) {
        let b = before.counts.get(&t).copied().unwrap_or_default();
        let a = after.counts[&t];
        w.write_record([t.to_string(), fmt_opt(b.precision()), fmt_opt(a.precision()), fmt_opt(b.recall()), fmt_opt(a.recall())])
            .map_err(&err)?;
    }
    finish(w, path)
}

pub fn write_reference_table_csv(path: &Path, k: usize) -> Result<()> {
    let mut w = csv_writer(path, "reference-table")?;
    let err = csv_err(path);
    w.write_record(["model", "task", "alpha_original", "alpha_distilled", "quoted_speedup", "computed_speedup", "abs_error"])
        .map_err(&err)?;
    for r in reproduce_reference_table(k)? {
        w.write_record([
            r.row.model.to_string(),
            r.row.task.to_string(),
            r.row.original.to_string(),
            r.row.distilled.to_string(),
            r.row.quoted_speedup.to_string(),
            format!("{:.6}", r.computed_speedup),
            format!("{:.6}", (r.computed_speedup - r.row.quoted_speedup).abs()),
        ])
        .map_err(&err)?;
    }
    finish(w, path)
}

pub fn write_speedup_surface_csv(path: &Path, alphas: &[f64], cs: &[f64], ks: &[usize]) -> Result<()> {
    let mut w = csv_writer(path, "speedup-surface")?;
    let err = csv_err(path);
    w.write_record(["alpha", "c", "k", "expected_length", "speedup"]).map_err(&err)?;
    for p in speedup_surface(alphas, cs, ks)? {
        w.write_record([
            p.alpha.to_string(),
            p.c.to_string(),
            p.k.to_string(),
            format!("{:.9}", p.expected_length),
            format!("{:.9}", p.speedup),
        ])
        .map_err(&err)?;
    }
    finish(w, path)
}

/// One JSON object per request followed by one per update event.
pub fn write_serve_log(path: &Path, log: &ServeLog) -> Result<()> {
    let mut out = create(path)?;
    let io = |e: std::io::Error| Error::io(path, e);
    for r in &log.requests {
        serde_json::to_writer(&mut out, &LogLine::Request(r.clone())).map_err(|e| io(e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    for u in &log.updates {
        serde_json::to_writer(&mut out, &LogLine::Update(u.clone())).map_err(|e| io(e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LogLine {
    Request(RequestLog),
    Update(UpdateEvent),
}

pub fn parse_serve_log(reader: impl BufRead) -> Result<ServeLog> {
    let mut log = ServeLog::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Line { line: i + 1, msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line).map_err(|e| Error::Line { line: i + 1, msg: e.to_string() })? {
            LogLine::Request(r) => log.requests.push(r),
            LogLine::Update(u) => log.updates.push(u),
        }
    }
    Ok(log)
}

pub fn read_serve_log(path: &Path) -> Result<ServeLog> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_serve_log(std::io::BufReader::new(f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub cluster_id: String,
    pub source_tag: String,
    pub requests: usize,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub format_version: u32,
    pub config_digest: String,
    pub seeds: BTreeMap<String, u64>,
    pub requests: usize,
    pub failed_requests: usize,
    pub proposed: usize,
    pub accepted: usize,
    pub alpha: Option<f64>,
    pub alpha_first_quarter: Option<f64>,
    pub alpha_last_quarter: Option<f64>,
    pub updates_applied: usize,
    pub updates_deferred: usize,
    pub streams: Vec<StreamSummary>,
}

fn pooled_alpha<'a>(requests: impl Iterator<Item = &'a RequestLog>) -> Option<f64> {
    let (p, a) = requests.fold((0, 0), |(p, a), r| (p + r.proposed, a + r.accepted));
    (p > 0).then(|| a as f64 / p as f64)
}

pub fn summarize(log: &ServeLog, config_digest: &str, seeds: BTreeMap<String, u64>) -> RunSummary {
    let n = log.requests.len();
    let quarter = n / 4;
    let mut streams: BTreeMap<(String, String), Vec<&RequestLog>> = BTreeMap::new();
    for r in &log.requests {
        streams.entry((r.cluster_id.clone(), r.source_tag.clone())).or_default().push(r);
    }
    RunSummary {
        format_version: REPORT_FORMAT_VERSION,
        config_digest: config_digest.to_string(),
        seeds,
        requests: n,
        failed_requests: log.requests.iter().filter(|r| r.error.is_some()).count(),
        proposed: log.requests.iter().map(|r| r.proposed).sum(),
        accepted: log.requests.iter().map(|r| r.accepted).sum(),
        alpha: pooled_alpha(log.requests.iter()),
        alpha_first_quarter: (quarter > 0).then(|| pooled_alpha(log.requests[..quarter].iter())).flatten(),
        alpha_last_quarter: (quarter > 0).then(|| pooled_alpha(log.requests[n - quarter..].iter())).flatten(),
        updates_applied: log.updates.iter().filter(|u| u.applied).count(),
        updates_deferred: log.updates.iter().filter(|u| !u.applied).count(),
        streams: streams
            .into_iter()
            .map(|((cluster_id, source_tag), rs)| StreamSummary {
                cluster_id,
                source_tag,
                requests: rs.len(),
                alpha: pooled_alpha(rs.into_iter()),
            })
            .collect(),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| Error::io(path, e.into()))?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    pub windows: (usize, usize),
    pub k: usize,
    pub config_digest: String,
    pub seeds: BTreeMap<String, u64>,
}

/// Paths of the files written by [`emit_reports`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub serve_log: PathBuf,
    pub rolling_alpha: PathBuf,
    pub token_stats: PathBuf,
    pub reference_table: PathBuf,
    pub summary: PathBuf,
}

pub fn emit_reports(out_dir: &Path, log: &ServeLog, opts: &ReportOptions) -> Result<ReportFiles> {
    check_writable(out_dir)?;
    let files = ReportFiles {
        serve_log: out_dir.join("serve_log.jsonl"),
        rolling_alpha: out_dir.join("rolling_alpha.csv"),
        token_stats: out_dir.join("token_stats.csv"),
        reference_table: out_dir.join("reference_table.csv"),
        summary: out_dir.join("summary.json"),
    };
    write_serve_log(&files.serve_log, log)?;
    write_rolling_alpha_csv(&files.rolling_alpha, log, opts.windows)?;
    write_token_stats_csv(&files.token_stats, &token_stats(log))?;
    write_reference_table_csv(&files.reference_table, opts.k)?;
    write_json(&files.summary, &summarize(log, &opts.config_digest, opts.seeds.clone()))?;
    Ok(files)
}
