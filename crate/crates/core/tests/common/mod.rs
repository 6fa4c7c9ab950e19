#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;

use batchscope::breakdown::{BreakdownTree, NodeKind, NodePath, SortKey};
use batchscope::model::{OperationMeasurement, StackFrame, WeightMeasurement};
use batchscope::protocol::{
    decode_frame, encode_frame, AnalyzeTrigger, BatchSpan, KeyMetricsPayload, MemoryCoefficients, Message,
    RunTimeCoefficients, WireMarker, WireNode,
};

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

// ---------------------------------------------------------------------------
// Mutation corpus and the Python `ast` reference parse.

/// Where the reference parser places the literal, or why it has none.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct OracleSpan {
    pub line: Option<u32>,
    pub byte_start: Option<usize>,
    pub byte_end: Option<usize>,
    pub value: Option<u64>,
    pub error: Option<String>,
}

const ORACLE_SCRIPT: &str = r#"
import ast, json, sys

def locate(src, provider, kwarg):
    tree = ast.parse(src)
    defs = [n for n in tree.body if isinstance(n, ast.FunctionDef) and n.name == provider]
    if len(defs) != 1:
        return {"error": "provider count %d" % len(defs)}
    args = defs[0].args
    positional = args.posonlyargs + args.args
    pairs = list(zip(positional[len(positional) - len(args.defaults):], args.defaults))
    pairs += [(a, d) for a, d in zip(args.kwonlyargs, args.kw_defaults) if d is not None]
    for a, d in pairs:
        if a.arg != kwarg:
            continue
        if isinstance(d, ast.Constant) and type(d.value) is int:
            lines = src.encode("utf-8").split(b"\n")
            start = sum(len(l) + 1 for l in lines[: d.lineno - 1]) + d.col_offset
            end = sum(len(l) + 1 for l in lines[: d.end_lineno - 1]) + d.end_col_offset
            return {"line": d.lineno, "byte_start": start, "byte_end": end, "value": d.value}
        return {"error": "non-literal"}
    return {"error": "kwarg missing"}

cases = json.load(sys.stdin)
json.dump([locate(c["source"], c["provider"], c["kwarg"]) for c in cases], sys.stdout)
"#;

/// Runs the reference parse over `(source, provider, kwarg)` cases.
pub fn python_oracle(cases: &[(String, String, String)]) -> Vec<OracleSpan> {
    let input: Vec<serde_json::Value> = cases
        .iter()
        .map(|(source, provider, kwarg)| serde_json::json!({"source": source, "provider": provider, "kwarg": kwarg}))
        .collect();
    let mut child = Command::new("python3")
        .args(["-c", ORACLE_SCRIPT])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .expect("python3 is required for the mutation oracle");
    child
        .stdin
        .take()
        .unwrap()
        .write_all(serde_json::to_string(&input).unwrap().as_bytes())
        .unwrap();
    let output = child.wait_with_output().unwrap();
    assert!(output.status.success(), "oracle failed");
    serde_json::from_slice(&output.stdout).unwrap()
}

fn pick<'a>(rng: &mut ChaCha8Rng, items: &[&'a str]) -> &'a str {
    items.choose(rng).unwrap()
}

fn literal(rng: &mut ChaCha8Rng, value: u64) -> String {
    if value >= 1000 && rng.gen_bool(0.2) {
        // Python allows digit separators.
        let s = value.to_string();
        let (head, tail) = s.split_at(s.len() - 3);
        format!("{head}_{tail}")
    } else {
        value.to_string()
    }
}

fn decoy_line(rng: &mut ChaCha8Rng) -> String {
    let v = rng.gen_range(1..5000);
    match rng.gen_range(0..8) {
        0 => format!("# def input_provider(batch_size={v}):"),
        1 => format!("EXAMPLE = \"def input_provider(batch_size={v}):\""),
        2 => format!("DOC = '''\ndef input_provider(batch_size={v}):\n    pass\n'''"),
        3 => format!("def input_provider_old(batch_size={v}):\n    return None"),
        4 => format!("def other_provider(batch_size={v}, seq_len=4):\n    return input_provider(batch_size={v})"),
        5 => format!("config = dict(batch_size={v})  # résumé ✓"),
        6 => format!("lam = lambda batch_size={v}: batch_size"),
        _ => format!("class Holder:\n    def input_provider(self, batch_size={v}):\n        return batch_size"),
    }
}

fn other_param(rng: &mut ChaCha8Rng, i: usize) -> String {
    match rng.gen_range(0..7) {
        0 => format!("seq_len{i}={}", rng.gen_range(1..512)),
        1 => format!("name{i}: str = \"batch_size=3, x\""),
        2 => format!("shape{i}=(3, 224, 224)"),
        3 => format!("opts{i}: dict = {{\"batch_size\": {}}}", rng.gen_range(1..99)),
        4 => format!("scale{i}=0.5"),
        5 => format!("fn{i}=lambda batch_size=2: batch_size"),
        _ => format!("device{i}='cpu'"),
    }
}

/// A generated provider module and the value it declares.
#[derive(Debug, Clone)]
pub struct MutationCase {
    pub source: String,
    pub value: u64,
}

/// Builds a source file with one `input_provider(batch_size=<int>)` among
/// decoys, other keyword arguments, comments and multi-line layouts.
pub fn mutation_case(rng: &mut ChaCha8Rng) -> MutationCase {
    let value = match rng.gen_range(0..3) {
        0 => rng.gen_range(1..=16),
        1 => rng.gen_range(1..=4096),
        _ => rng.gen_range(1..=2_000_000),
    };
    let mut out = String::new();
    if rng.gen_bool(0.3) {
        out.push_str("\"\"\"Training entry point.\"\"\"\n");
    }
    out.push_str("import torch\n\n");
    for _ in 0..rng.gen_range(0..3) {
        out.push_str(&decoy_line(rng));
        out.push_str("\n\n");
    }

    let mut params: Vec<String> = (0..rng.gen_range(0..4)).map(|i| other_param(rng, i)).collect();
    let lit = literal(rng, value);
    let own = match rng.gen_range(0..4) {
        0 => format!("batch_size={lit}"),
        1 => format!("batch_size = {lit}"),
        2 => format!("batch_size: int = {lit}"),
        _ => format!("batch_size: \"int\"={lit}"),
    };
    let pos = rng.gen_range(0..=params.len());
    params.insert(pos, own);
    if rng.gen_bool(0.2) {
        // Keyword-only section after a bare star.
        let star = rng.gen_range(0..=pos);
        params.insert(star, "*".into());
    } else if rng.gen_bool(0.15) {
        params.insert(0, "data_dir".into());
        params.insert(1, "/".into());
    }

    let multiline = rng.gen_bool(0.5);
    out.push_str("def input_provider(");
    if multiline {
        out.push('\n');
        for p in &params {
            out.push_str("    ");
            out.push_str(p);
            out.push(',');
            if rng.gen_bool(0.3) {
                out.push_str(&format!("  # {}", pick(rng, &["batch_size=1", "tune me", "(unbalanced", "ok"])));
            }
            out.push('\n');
        }
    } else {
        out.push_str(&params.join(", "));
    }
    out.push(')');
    if rng.gen_bool(0.3) {
        out.push_str(" -> tuple");
    }
    out.push_str(":\n");
    out.push_str("    x = torch.randn(batch_size, 784)\n    return (x,)\n");

    for _ in 0..rng.gen_range(0..2) {
        out.push('\n');
        out.push_str(&decoy_line(rng));
        out.push('\n');
    }
    MutationCase { source: out, value }
}

// ---------------------------------------------------------------------------
// Breakdown stack sets and the brute-force grouping oracle.

/// Times are multiples of 1/1024 so that any summation order is exact.
pub fn random_stack_set(rng: &mut ChaCha8Rng, max_ops: usize, max_depth: usize) -> (Vec<OperationMeasurement>, Vec<WeightMeasurement>) {
    let files = ["train.py", "model.py", "layers.py", "attn.py"];
    let frame = |rng: &mut ChaCha8Rng| StackFrame::new(files[rng.gen_range(0..files.len())], rng.gen_range(1..4));
    let shared = rng.gen_range(1..=3.min(max_depth));
    let prefix: Vec<StackFrame> = (0..shared)
        .map(|i| if i == 0 { StackFrame::new("train.py", 1) } else { frame(rng) })
        .collect();

    let n = rng.gen_range(1..=max_ops);
    let mut ops = Vec::with_capacity(n);
    for i in 0..n {
        let depth = rng.gen_range(1..=max_depth);
        let mut stack: Vec<StackFrame> = if rng.gen_bool(0.9) { prefix.clone() } else { prefix[..1].to_vec() };
        stack.truncate(depth);
        while stack.len() < depth {
            stack.push(frame(rng));
        }
        ops.push(OperationMeasurement {
            name: format!("op{}", rng.gen_range(0..(n / 2 + 1)) + i % 2),
            run_time_ms: f64::from(rng.gen_range(0u32..1 << 20)) / 1024.0,
            activation_bytes: rng.gen_range(0..1 << 30),
            stack,
        });
    }

    let mut weights = Vec::new();
    for i in 0..rng.gen_range(0..=n.min(20)) {
        let base = &ops[rng.gen_range(0..n)].stack;
        let mut stack = base[..rng.gen_range(0..=base.len())].to_vec();
        if rng.gen_bool(0.2) {
            stack.push(frame(rng));
        }
        weights.push(WeightMeasurement {
            name: format!("w{i}"),
            bytes: rng.gen_range(0..1 << 32),
            stack,
        });
    }
    (ops, weights)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleModule {
    pub run_time_ms: f64,
    pub weight_bytes: u64,
    pub activation_bytes: u64,
    pub leaf_count: usize,
    pub child_count: usize,
}

/// Expected aggregates for every module, keyed by its full frame prefix, plus
/// the expected parent prefix of every operation.
pub struct OracleTree {
    pub root_len: usize,
    pub modules: BTreeMap<Vec<StackFrame>, OracleModule>,
    pub leaf_parent: Vec<Vec<StackFrame>>,
}

/// Groups operations by every stack prefix directly, without building a tree.
pub fn breakdown_oracle(ops: &[OperationMeasurement], weights: &[WeightMeasurement]) -> OracleTree {
    let min_len = ops.iter().map(|o| o.stack.len()).min().unwrap();
    let mut common = 0;
    while common < min_len && ops.iter().all(|o| o.stack[common] == ops[0].stack[common]) {
        common += 1;
    }
    let root_len = common.min(min_len - 1).max(1);

    let root = ops[0].stack[..root_len].to_vec();
    let mut prefixes: BTreeSet<Vec<StackFrame>> = BTreeSet::from([root.clone()]);
    for op in ops {
        for k in root_len..op.stack.len() {
            prefixes.insert(op.stack[..k].to_vec());
        }
    }

    // Each weight belongs to the longest module prefix of its stack.
    let attach: Vec<Vec<StackFrame>> = weights
        .iter()
        .map(|w| {
            (root_len..=w.stack.len())
                .rev()
                .map(|k| w.stack[..k].to_vec())
                .find(|p| prefixes.contains(p))
                .unwrap_or_else(|| root.clone())
        })
        .collect();

    let mut modules = BTreeMap::new();
    for p in &prefixes {
        // Operations no deeper than the root prefix hang directly off the root.
        let is_root = p.len() == root_len;
        let under: Vec<&OperationMeasurement> = ops
            .iter()
            .filter(|o| o.stack.starts_with(p) && (o.stack.len() > p.len() || is_root))
            .collect();
        let module_children = prefixes
            .iter()
            .filter(|q| q.len() == p.len() + 1 && q.starts_with(p))
            .count();
        let leaf_children = under.iter().filter(|o| o.stack.len() <= p.len() + 1).count();
        modules.insert(
            p.clone(),
            OracleModule {
                run_time_ms: under.iter().map(|o| o.run_time_ms).sum(),
                activation_bytes: under.iter().map(|o| o.activation_bytes).sum(),
                weight_bytes: weights
                    .iter()
                    .zip(&attach)
                    .filter(|(_, a)| a.starts_with(p))
                    .map(|(w, _)| w.bytes)
                    .sum(),
                leaf_count: under.len(),
                child_count: module_children + leaf_children,
            },
        );
    }
    let leaf_parent = ops
        .iter()
        .map(|o| o.stack[..(o.stack.len() - 1).max(root_len)].to_vec())
        .collect();
    OracleTree {
        root_len,
        modules,
        leaf_parent,
    }
}

/// Compares a built tree against the oracle. Returns a description of the
/// first disagreement.
pub fn check_against_oracle(tree: &BreakdownTree, oracle: &OracleTree) -> Result<(), String> {
    if tree.root_prefix.len() != oracle.root_len {
        return Err(format!("root prefix {} != {}", tree.root_prefix.len(), oracle.root_len));
    }
    let mut seen_modules = BTreeMap::new();
    let mut leaf_parent = vec![None; oracle.leaf_parent.len()];
    let mut stack: Vec<(Vec<StackFrame>, &batchscope::breakdown::BreakdownNode)> = vec![(tree.root_prefix.clone(), &tree.root)];
    while let Some((prefix, node)) = stack.pop() {
        let names: BTreeSet<&str> = node.children.iter().map(|c| c.display_name.as_str()).collect();
        if names.len() != node.children.len() {
            return Err(format!("duplicate sibling names under {prefix:?}"));
        }
        seen_modules.insert(
            prefix.clone(),
            OracleModule {
                run_time_ms: node.run_time_ms,
                weight_bytes: node.weight_bytes,
                activation_bytes: node.activation_bytes,
                leaf_count: node.leaf_count,
                child_count: node.children.len(),
            },
        );
        let leaf_sum: f64 = node.leaves().iter().map(|l| l.run_time_ms).sum();
        if leaf_sum != node.run_time_ms {
            return Err(format!("leaf sum {leaf_sum} != node {} at {prefix:?}", node.run_time_ms));
        }
        for child in &node.children {
            match child.kind {
                NodeKind::Operation => {
                    let idx = child.operation_index().ok_or("leaf without operation")?;
                    leaf_parent[idx] = Some(prefix.clone());
                }
                NodeKind::Module => {
                    let mut p = prefix.clone();
                    p.push(child.frame.clone());
                    stack.push((p, child));
                }
            }
        }
    }
    if seen_modules.len() != oracle.modules.len() {
        return Err(format!("{} modules, oracle has {}", seen_modules.len(), oracle.modules.len()));
    }
    for (p, expected) in &oracle.modules {
        match seen_modules.get(p) {
            Some(got) if got == expected => {}
            Some(got) => return Err(format!("module {p:?}: got {got:?}, expected {expected:?}")),
            None => return Err(format!("module {p:?} missing")),
        }
    }
    for (i, expected) in oracle.leaf_parent.iter().enumerate() {
        if leaf_parent[i].as_ref() != Some(expected) {
            return Err(format!("op {i} under {:?}, expected {expected:?}", leaf_parent[i]));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Random schema-valid protocol messages.

fn any_f64(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let v = match rng.gen_range(0..4) {
            0 => f64::from_bits(rng.gen()),
            1 => rng.gen_range(-1e6..1e6),
            2 => f64::from(rng.gen_range(0u32..1000)) / 8.0,
            _ => rng.gen::<f64>() * 1e-300,
        };
        if v.is_finite() {
            return v;
        }
    }
}

fn any_string(rng: &mut ChaCha8Rng) -> String {
    let alphabet: Vec<char> = "abcXYZ019 _-./:\"\\\n\té✓😀\u{0}\u{7f}".chars().collect();
    (0..rng.gen_range(0..24)).map(|_| *alphabet.choose(rng).unwrap()).collect()
}

fn any_path(rng: &mut ChaCha8Rng) -> NodePath {
    NodePath((0..rng.gen_range(0..6)).map(|_| rng.gen_range(0..40)).collect())
}

fn any_sort(rng: &mut ChaCha8Rng) -> SortKey {
    if rng.gen() {
        SortKey::RunTime
    } else {
        SortKey::Memory
    }
}

fn opt<T>(rng: &mut ChaCha8Rng, f: impl FnOnce(&mut ChaCha8Rng) -> T) -> Option<T> {
    if rng.gen() {
        Some(f(rng))
    } else {
        None
    }
}

pub fn random_message(rng: &mut ChaCha8Rng) -> Message {
    match rng.gen_range(0..11) {
        0 => Message::Hello {
            protocol_version: rng.gen(),
        },
        1 => Message::Analyze {
            trigger: if rng.gen() { AnalyzeTrigger::Save } else { AnalyzeTrigger::Manual },
        },
        2 => Message::SetBatchSize { batch_size: rng.gen() },
        3 => Message::GetBreakdown {
            path: any_path(rng),
            sort_key: any_sort(rng),
        },
        4 => Message::Session {
            session_id: any_string(rng),
            entry_file: any_string(rng),
            capabilities: (0..rng.gen_range(0..4)).map(|_| any_string(rng)).collect(),
        },
        5 => Message::AnalysisBegin {},
        6 => Message::KeyMetrics(KeyMetricsPayload {
            batch_size: rng.gen(),
            throughput_samples_per_s: any_f64(rng),
            max_throughput_samples_per_s: any_f64(rng),
            peak_memory_bytes: rng.gen(),
            capacity_bytes: rng.gen(),
            run_time_model: opt(rng, |r| RunTimeCoefficients {
                a_ms: any_f64(r),
                b_ms: any_f64(r),
            }),
            memory_model: opt(rng, |r| MemoryCoefficients {
                c_bytes: any_f64(r),
                d_bytes: any_f64(r),
            }),
            batch_span: opt(rng, |r| BatchSpan {
                line: r.gen(),
                byte_start: r.gen_range(0..1 << 40),
                byte_end: r.gen_range(0..1 << 40),
            }),
            max_batch_size: opt(rng, |r| r.gen()),
            prediction_disabled: opt(rng, any_string),
        }),
        7 => Message::Breakdown {
            path: any_path(rng),
            sort_key: any_sort(rng),
            untracked_run_time_ms: any_f64(rng),
            untracked_memory_bytes: rng.gen(),
            nodes: (0..rng.gen_range(0..6))
                .map(|_| WireNode {
                    path: any_path(rng),
                    kind: if rng.gen() { NodeKind::Module } else { NodeKind::Operation },
                    display_name: any_string(rng),
                    file: any_string(rng),
                    line: rng.gen(),
                    run_time_ms: any_f64(rng),
                    weight_bytes: rng.gen(),
                    activation_bytes: rng.gen(),
                    leaf_count: rng.gen_range(0..1 << 20),
                    child_count: rng.gen_range(0..1 << 20),
                })
                .collect(),
        },
        8 => Message::InlineMarkers {
            scope: any_path(rng),
            markers: (0..rng.gen_range(0..6))
                .map(|_| WireMarker {
                    file: any_string(rng),
                    line: rng.gen(),
                    run_time_ms: any_f64(rng),
                    weight_bytes: rng.gen(),
                    activation_bytes: rng.gen(),
                    scoped: rng.gen(),
                })
                .collect(),
        },
        9 => Message::SourceMutated {
            new_batch_size: rng.gen(),
            line: rng.gen(),
        },
        _ => Message::AnalysisError {
            code: any_string(rng),
            message: any_string(rng),
        },
    }
}

// ---------------------------------------------------------------------------
// Minimal TCP client for the daemon.

pub struct Client {
    stream: TcpStream,
    buf: Vec<u8>,
}

pub const RECV_TIMEOUT: Duration = Duration::from_secs(20);

impl Client {
    pub async fn connect(addr: std::net::SocketAddr) -> Client {
        Client {
            stream: TcpStream::connect(addr).await.unwrap(),
            buf: Vec::new(),
        }
    }

    /// Connects and completes the version handshake.
    pub async fn session(addr: std::net::SocketAddr) -> Client {
        let mut client = Client::connect(addr).await;
        client.send(&Message::Hello { protocol_version: 1 }).await;
        let reply = client.recv().await.expect("session reply");
        assert_eq!(reply.type_name(), "session", "{reply:?}");
        client
    }

    pub async fn send(&mut self, message: &Message) {
        self.stream.write_all(&encode_frame(message).unwrap()).await.unwrap();
    }

    pub async fn send_raw(&mut self, bytes: &[u8]) {
        self.stream.write_all(bytes).await.unwrap();
    }

    /// Next message, or `None` once the server closes the connection.
    pub async fn recv(&mut self) -> Option<Message> {
        loop {
            if let Some((message, used)) = decode_frame(&self.buf).unwrap() {
                self.buf.drain(..used);
                return Some(message);
            }
            let mut chunk = [0u8; 8192];
            let n = tokio::time::timeout(RECV_TIMEOUT, self.stream.read(&mut chunk))
                .await
                .expect("timed out waiting for a message")
                .unwrap();
            if n == 0 {
                return None;
            }
            self.buf.extend_from_slice(&chunk[..n]);
        }
    }

    /// Waits for the next message of type `kind`, returning everything seen.
    pub async fn recv_until(&mut self, kind: &str) -> Vec<Message> {
        let mut seen = Vec::new();
        loop {
            let m = self.recv().await.unwrap_or_else(|| panic!("closed before `{kind}`; saw {seen:?}"));
            let done = m.type_name() == kind;
            seen.push(m);
            if done {
                return seen;
            }
        }
    }

    /// Messages arriving within `window`.
    pub async fn drain_for(&mut self, window: Duration) -> Vec<Message> {
        let mut seen = Vec::new();
        let deadline = tokio::time::Instant::now() + window;
        while let Ok(Some(m)) = tokio::time::timeout_at(deadline, self.recv()).await {
            seen.push(m);
        }
        seen
    }
}
