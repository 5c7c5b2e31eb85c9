//! Execution monitoring for DEBUG views.
//!
//! A pipeline call opens a root span with [`Monitor::root`]; any
//! [`instrument`]ed operation awaited inside it becomes a child span, with
//! parentage taken from the task-local call context. Finished traces are kept
//! in a bounded ring and can be assembled into a timeline or a module graph.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt::{Debug, Display};
use std::fs::OpenOptions;
use std::future::Future;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use indexmap::IndexMap;
use once_cell::sync::Lazy;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DIGEST_LIMIT: usize = 2048;
pub const DEFAULT_CAPACITY: usize = 256;
pub const ERROR_MARKER: &str = "ERROR: ";
pub const CANCELLED_MARKER: &str = "CANCELLED";

static EPOCH: Lazy<Instant> = Lazy::new(Instant::now);
static NEXT_SPAN_ID: AtomicU64 = AtomicU64::new(1);

fn now_ns() -> u64 {
    EPOCH.elapsed().as_nanos() as u64
}

/// Truncates to at most [`DIGEST_LIMIT`] chars.
pub fn truncate_digest(mut s: String) -> String {
    if let Some((idx, _)) = s.char_indices().nth(DIGEST_LIMIT) {
        s.truncate(idx);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub span_id: u64,
    pub parent_id: Option<u64>,
    pub trace_id: String,
    pub name: String,
    pub start_ns: u64,
    pub end_ns: u64,
    pub input_digest: String,
    pub output_digest: String,
}

impl Span {
    /// The module prefix of `module.operation`.
    pub fn module(&self) -> &str {
        self.name.split('.').next().unwrap_or(&self.name)
    }

    pub fn is_error(&self) -> bool {
        self.output_digest.starts_with(ERROR_MARKER)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub trace_id: String,
    pub spans: Vec<Span>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MonitorError {
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub span_id: u64,
    pub name: String,
    pub depth: usize,
    pub start_ns: u64,
    pub end_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub from: String,
    pub to: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallGraph {
    pub nodes: Vec<String>,
    pub edges: Vec<GraphEdge>,
}

impl Trace {
    /// Checks the forest has exactly one root, no orphans, no cycles, and
    /// that every child interval lies within its parent's.
    pub fn validate(&self) -> Result<(), MonitorError> {
        self.depths().map(|_| ())?;
        let by_id: HashMap<u64, &Span> = self.spans.iter().map(|s| (s.span_id, s)).collect();
        for s in &self.spans {
            if s.end_ns < s.start_ns {
                return Err(MonitorError::MalformedTrace(format!(
                    "span {} ends before it starts",
                    s.span_id
                )));
            }
            if let Some(p) = s.parent_id.map(|p| by_id[&p]) {
                if s.start_ns < p.start_ns || s.end_ns > p.end_ns {
                    return Err(MonitorError::MalformedTrace(format!(
                        "span {} not nested in parent {}",
                        s.span_id, p.span_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn root(&self) -> Option<&Span> {
        self.spans.iter().find(|s| s.parent_id.is_none())
    }

    /// span_id → depth; fails on structural problems.
    fn depths(&self) -> Result<HashMap<u64, usize>, MonitorError> {
        let malformed = |m: String| Err(MonitorError::MalformedTrace(m));
        if self.spans.is_empty() {
            return malformed("trace has no spans".into());
        }
        let mut children: HashMap<u64, Vec<u64>> = HashMap::new();
        let mut ids = HashSet::new();
        let mut roots = Vec::new();
        for s in &self.spans {
            if s.trace_id != self.trace_id {
                return malformed(format!("span {} belongs to another trace", s.span_id));
            }
            if !ids.insert(s.span_id) {
                return malformed(format!("duplicate span id {}", s.span_id));
            }
            match s.parent_id {
                None => roots.push(s.span_id),
                Some(p) => children.entry(p).or_default().push(s.span_id),
            }
        }
        if let Some(orphan) = self
            .spans
            .iter()
            .find(|s| s.parent_id.is_some_and(|p| !ids.contains(&p)))
        {
            return malformed(format!("span {} has unknown parent", orphan.span_id));
        }
        if roots.len() != 1 {
            return malformed(format!("expected one root, found {}", roots.len()));
        }
        let mut depth = HashMap::with_capacity(ids.len());
        let mut queue = VecDeque::from([(roots[0], 0usize)]);
        while let Some((id, d)) = queue.pop_front() {
            depth.insert(id, d);
            for &c in children.get(&id).map(Vec::as_slice).unwrap_or_default() {
                queue.push_back((c, d + 1));
            }
        }
        if depth.len() != ids.len() {
            return malformed("cycle detected".into());
        }
        Ok(depth)
    }
}

pub fn assemble_timeline(t: &Trace) -> Result<Vec<TimelineRow>, MonitorError> {
    let depth = t.depths()?;
    let mut rows: Vec<TimelineRow> = t
        .spans
        .iter()
        .map(|s| TimelineRow {
            span_id: s.span_id,
            name: s.name.clone(),
            depth: depth[&s.span_id],
            start_ns: s.start_ns,
            end_ns: s.end_ns,
        })
        .collect();
    rows.sort_by_key(|r| (r.start_ns, r.depth, r.span_id));
    Ok(rows)
}

pub fn assemble_graph(t: &Trace) -> Result<CallGraph, MonitorError> {
    let rows = assemble_timeline(t)?;
    let by_id: HashMap<u64, &Span> = t.spans.iter().map(|s| (s.span_id, s)).collect();
    let mut nodes: Vec<String> = Vec::new();
    let mut edges: IndexMap<(String, String), usize> = IndexMap::new();
    for row in &rows {
        let span = by_id[&row.span_id];
        let module = span.module();
        if !nodes.iter().any(|n| n == module) {
            nodes.push(module.to_string());
        }
        if let Some(parent) = span.parent_id.map(|p| by_id[&p]) {
            if parent.module() != module {
                *edges
                    .entry((parent.module().to_string(), module.to_string()))
                    .or_default() += 1;
            }
        }
    }
    let edges = edges
        .into_iter()
        .map(|((from, to), count)| GraphEdge { from, to, count })
        .collect();
    Ok(CallGraph { nodes, edges })
}

/// One JSON object per span per line.
pub fn write_jsonl(t: &Trace, mut w: impl Write) -> std::io::Result<()> {
    for s in &t.spans {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Default)]
struct Store {
    active: HashMap<String, Vec<Span>>,
    done: IndexMap<String, Trace>,
}

/// Collector for spans from any number of concurrent traces.
#[derive(Clone)]
pub struct Monitor {
    store: Arc<Mutex<Store>>,
    capacity: usize,
    export: Option<Arc<PathBuf>>,
}

impl Default for Monitor {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

impl Debug for Monitor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Monitor")
            .field("capacity", &self.capacity)
            .field("traces", &self.store.lock().done.len())
            .finish()
    }
}

#[derive(Clone)]
struct Ctx {
    monitor: Monitor,
    trace_id: Arc<str>,
    span_id: u64,
}

tokio::task_local! {
    static CURRENT: Ctx;
}

impl Monitor {
    pub fn new(capacity: usize) -> Self {
        Monitor {
            store: Arc::new(Mutex::new(Store::default())),
            capacity: capacity.max(1),
            export: None,
        }
    }

    /// Appends every finished trace to `path` as JSON lines.
    pub fn with_export(mut self, path: impl Into<PathBuf>) -> Self {
        self.export = Some(Arc::new(path.into()));
        self
    }

    pub fn get(&self, trace_id: &str) -> Option<Trace> {
        self.store.lock().done.get(trace_id).cloned()
    }

    /// Ids of retained traces, oldest first.
    pub fn trace_ids(&self) -> Vec<String> {
        self.store.lock().done.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.store.lock().done.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Runs `fut` as the root span of a new trace and returns the trace id
    /// with its output. The trace is complete once this returns.
    pub async fn root<T, E, F>(&self, name: &str, input: String, fut: F) -> (String, Result<T, E>)
    where
        F: Future<Output = Result<T, E>>,
        T: Debug,
        E: Display,
    {
        let trace_id: Arc<str> = uuid::Uuid::new_v4().to_string().into();
        self.store
            .lock()
            .active
            .insert(trace_id.to_string(), Vec::new());
        let mut guard = SpanGuard::open(self.clone(), trace_id.clone(), None, name, input, true);
        let ctx = Ctx {
            monitor: self.clone(),
            trace_id: trace_id.clone(),
            span_id: guard.span.span_id,
        };
        let out = CURRENT.scope(ctx, fut).await;
        guard.finish(digest_result(&out));
        (trace_id.to_string(), out)
    }

    fn submit(&self, span: Span) {
        let mut store = self.store.lock();
        if let Some(spans) = store.active.get_mut(&span.trace_id) {
            spans.push(span);
        }
    }

    fn finalize(&self, root: Span) {
        let trace = {
            let mut store = self.store.lock();
            let Some(mut spans) = store.active.remove(&root.trace_id) else {
                return;
            };
            spans.push(root.clone());
            spans.sort_by_key(|s| (s.start_ns, s.span_id));
            let trace = Trace {
                trace_id: root.trace_id.clone(),
                spans,
            };
            while store.done.len() >= self.capacity {
                store.done.shift_remove_index(0);
            }
            store.done.insert(trace.trace_id.clone(), trace.clone());
            trace
        };
        if let Some(path) = &self.export {
            // Export failures are swallowed: monitoring never fails the call.
            if let Ok(f) = OpenOptions::new().create(true).append(true).open(path.as_ref()) {
                let _ = write_jsonl(&trace, std::io::BufWriter::new(f));
            }
        }
    }
}

struct SpanGuard {
    monitor: Monitor,
    span: Span,
    is_root: bool,
    done: bool,
}

impl SpanGuard {
    fn open(
        monitor: Monitor,
        trace_id: Arc<str>,
        parent_id: Option<u64>,
        name: &str,
        input: String,
        is_root: bool,
    ) -> Self {
        SpanGuard {
            monitor,
            span: Span {
                span_id: NEXT_SPAN_ID.fetch_add(1, Ordering::Relaxed),
                parent_id,
                trace_id: trace_id.to_string(),
                name: name.to_string(),
                start_ns: now_ns(),
                end_ns: 0,
                input_digest: truncate_digest(input),
                output_digest: String::new(),
            },
            is_root,
            done: false,
        }
    }

    fn finish(&mut self, output: String) {
        self.done = true;
        let mut span = self.span.clone();
        span.end_ns = now_ns().max(span.start_ns);
        span.output_digest = truncate_digest(output);
        if self.is_root {
            self.monitor.finalize(span);
        } else {
            self.monitor.submit(span);
        }
    }
}

impl Drop for SpanGuard {
    fn drop(&mut self) {
        if !self.done {
            self.finish(CANCELLED_MARKER.to_string());
        }
    }
}

fn digest_result<T: Debug, E: Display>(r: &Result<T, E>) -> String {
    match r {
        Ok(v) => truncate_digest(format!("{v:?}")),
        Err(e) => format!("{ERROR_MARKER}{e}"),
    }
}

fn child(name: &str, input: impl FnOnce() -> String) -> Option<(SpanGuard, Ctx)> {
    CURRENT
        .try_with(|ctx| {
            let guard = SpanGuard::open(
                ctx.monitor.clone(),
                ctx.trace_id.clone(),
                Some(ctx.span_id),
                name,
                input(),
                false,
            );
            let child_ctx = Ctx {
                span_id: guard.span.span_id,
                ..ctx.clone()
            };
            (guard, child_ctx)
        })
        .ok()
}

/// Records `fut` as a child of the current span. Without an active trace the
/// future runs unmonitored.
pub async fn instrument<T, E, F>(name: &str, input: impl FnOnce() -> String, fut: F) -> Result<T, E>
where
    F: Future<Output = Result<T, E>>,
    T: Debug,
    E: Display,
{
    match child(name, input) {
        None => fut.await,
        Some((mut guard, ctx)) => {
            let out = CURRENT.scope(ctx, fut).await;
            guard.finish(digest_result(&out));
            out
        }
    }
}

/// Synchronous counterpart of [`instrument`].
pub fn instrument_sync<T, E>(
    name: &str,
    input: impl FnOnce() -> String,
    f: impl FnOnce() -> Result<T, E>,
) -> Result<T, E>
where
    T: Debug,
    E: Display,
{
    match child(name, input) {
        None => f(),
        Some((mut guard, ctx)) => {
            let out = CURRENT.sync_scope(ctx, f);
            guard.finish(digest_result(&out));
            out
        }
    }
}

/// Id of the trace the caller runs under, if any.
pub fn current_trace_id() -> Option<String> {
    CURRENT.try_with(|c| c.trace_id.to_string()).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(id: u64, parent: Option<u64>, name: &str, s: u64, e: u64) -> Span {
        Span {
            span_id: id,
            parent_id: parent,
            trace_id: "t".into(),
            name: name.into(),
            start_ns: s,
            end_ns: e,
            input_digest: String::new(),
            output_digest: String::new(),
        }
    }

    fn trace(spans: Vec<Span>) -> Trace {
        Trace {
            trace_id: "t".into(),
            spans,
        }
    }

    #[test]
    fn timeline_single_root() {
        let rows = assemble_timeline(&trace(vec![span(1, None, "pipeline.respond", 0, 10)])).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].depth, 0);
    }

    #[test]
    fn timeline_root_with_two_children() {
        let t = trace(vec![
            span(3, Some(1), "gen.respond", 5, 9),
            span(1, None, "pipeline.respond", 0, 10),
            span(2, Some(1), "rec.respond", 1, 4),
        ]);
        let rows = assemble_timeline(&t).unwrap();
        let depths: Vec<usize> = rows.iter().map(|r| r.depth).collect();
        assert_eq!(depths, [0, 1, 1]);
        assert!(rows.windows(2).all(|w| w[0].start_ns <= w[1].start_ns));
        t.validate().unwrap();
    }

    #[test]
    fn orphan_and_empty_are_malformed() {
        let t = trace(vec![span(1, None, "p.r", 0, 10), span(2, Some(99), "g.r", 1, 2)]);
        assert!(assemble_timeline(&t).is_err());
        assert!(assemble_graph(&trace(vec![])).is_err());
        let two_roots = trace(vec![span(1, None, "a.x", 0, 1), span(2, None, "b.x", 0, 1)]);
        assert!(two_roots.validate().is_err());
        let not_nested = trace(vec![span(1, None, "a.x", 5, 10), span(2, Some(1), "b.x", 4, 6)]);
        assert!(not_nested.validate().is_err());
    }

    #[test]
    fn graph_counts_cross_module_calls() {
        let t = trace(vec![
            span(1, None, "pipeline.respond", 0, 10),
            span(2, Some(1), "rec.respond", 1, 4),
            span(3, Some(1), "gen.respond", 5, 9),
        ]);
        let g = assemble_graph(&t).unwrap();
        assert_eq!(g.nodes, ["pipeline", "rec", "gen"]);
        assert_eq!(g.edges.len(), 2);
        assert!(g.edges.iter().all(|e| e.count == 1));

        let t = trace(vec![
            span(1, None, "pipeline.respond", 0, 10),
            span(2, Some(1), "gen.respond", 1, 4),
            span(3, Some(1), "gen.respond", 5, 9),
            span(4, Some(3), "gen.generate", 6, 8),
        ]);
        let g = assemble_graph(&t).unwrap();
        assert_eq!(g.nodes, ["pipeline", "gen"]);
        assert_eq!(g.edges, [GraphEdge { from: "pipeline".into(), to: "gen".into(), count: 2 }]);
    }

    #[tokio::test]
    async fn records_nested_spans_and_errors() {
        let m = Monitor::new(4);
        let (id, out) = m
            .root("pipeline.respond", "in".into(), async {
                instrument("rec.respond", || "r".into(), async { Ok::<_, String>(1) }).await?;
                instrument("gen.respond", || "g".into(), async {
                    instrument_sync("gen.generate", String::new, || Ok::<_, String>("x"))
                })
                .await?;
                let _ = instrument("gen.respond", String::new, async { Err::<(), _>("boom") }).await;
                Ok::<_, String>("done")
            })
            .await;
        assert_eq!(out.unwrap(), "done");
        let t = m.get(&id).unwrap();
        t.validate().unwrap();
        assert_eq!(t.spans.len(), 5);
        let rows = assemble_timeline(&t).unwrap();
        let gen_gen = rows.iter().find(|r| r.name == "gen.generate").unwrap();
        assert_eq!(gen_gen.depth, 2);
        let failed = t.spans.iter().filter(|s| s.is_error()).count();
        assert_eq!(failed, 1);
    }

    #[tokio::test]
    async fn no_context_means_no_recording() {
        let out = instrument("rec.respond", || panic!("not evaluated"), async { Ok::<_, String>(3) }).await;
        assert_eq!(out.unwrap(), 3);
        assert!(current_trace_id().is_none());
    }

    #[tokio::test]
    async fn ring_is_bounded() {
        let m = Monitor::new(2);
        let mut ids = Vec::new();
        for _ in 0..3 {
            let (id, _) = m.root("p.r", String::new(), async { Ok::<_, String>(()) }).await;
            ids.push(id);
        }
        assert_eq!(m.len(), 2);
        assert!(m.get(&ids[0]).is_none());
        assert!(m.get(&ids[2]).is_some());
    }

    #[test]
    fn digests_are_truncated() {
        let s = truncate_digest("é".repeat(5000));
        assert_eq!(s.chars().count(), DIGEST_LIMIT);
    }
}
