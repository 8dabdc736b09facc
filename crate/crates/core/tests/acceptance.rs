//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! default harness so every line is printed by `cargo test`.

mod support;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use capstep_core::capability::{Capability, Registry};
use capstep_core::evaluation::{replay_trace, run_benchmark};
use capstep_core::images::{ImageRef, ImageStore};
use capstep_core::orchestrator::{run_session, RunConfig, RunMode, Termination, ToolRuntime};
use capstep_core::protocol::parse_turn;
use capstep_core::provider::{ScriptedProvider, ScriptedTranscript};
use capstep_core::rundir::RunDir;
use capstep_core::session::{Observation, ObservationKind, SessionState};
use capstep_core::starter::{StarterSet, FIG6_ANSWER};
use capstep_core::task::{AnswerMode, TaskInstance};
use capstep_core::toolkit::geometry::{geom_perp_intersect, orthogonality_residual, signed_area, Point};
use capstep_core::toolkit::maze::{maze_parse, maze_shortest_path, MazeError};
use capstep_core::trace::{ProtocolViolation, TraceRecord, TurnOutcome};

use support::*;

type Check = Result<String, String>;

struct Criterion {
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Check,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------

fn protocol_round_trip() -> Check {
    let mut failures = Vec::new();
    let mut tagged = 0;
    for seed in 0..10_000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = tag_soup(&mut rng);
        let turn = parse_turn(&raw, 1);
        if turn.segments.iter().any(|s| s.kind.tag().is_some()) {
            tagged += 1;
        }
        if let Err(e) = check_lossless(&raw, &turn) {
            failures.push(format!("seed {seed}: {e}"));
        }
    }
    ensure(failures.is_empty(), || format!("{} failures, first: {}", failures.len(), failures[0]))?;
    Ok(format!("10000 inputs ({tagged} with tags), 0 failures"))
}

// ---------------------------------------------------------------------------

fn sha_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn calc_task() -> TaskInstance {
    TaskInstance::text("calc", "What is 6*7?", "42", AnswerMode::Numeric { tolerance: 0.0 })
}

fn scripted(task: &TaskInstance, script: &[&str]) -> (TraceRecord, usize) {
    let runtime = ToolRuntime::new(Registry::default_catalog(), Arc::new(ImageStore::new()));
    let mut provider = ScriptedProvider::new(ScriptedTranscript::literal(script));
    let result = run_session(task, &mut provider, &runtime, &RunConfig::default());
    (result.trace, provider.consumed())
}

fn seg(kind: &str, text: &str, start: usize, end: usize) -> Value {
    json!({"kind": kind, "text": text, "span": {"start": start, "end": end}})
}

/// Assembles the expected record. Digests of provider input cannot be
/// written by hand; they are taken from `actual` after checking their form.
fn expected_record(actual: &TraceRecord, turns: Vec<Value>, history: Value, termination: &str, answer: Value) -> Result<TraceRecord, String> {
    let digests: Vec<&str> = actual.turns.iter().map(|t| t.context_digest.as_str()).collect();
    ensure(digests.len() == turns.len(), || format!("{} turns recorded, {} expected", digests.len(), turns.len()))?;
    let mut unique = digests.clone();
    unique.sort_unstable();
    unique.dedup();
    ensure(unique.len() == digests.len() && digests.iter().all(|d| d.len() == 64), || "context digests not distinct sha256 values".into())?;

    let prompt = ToolRuntime::new(Registry::default_catalog(), Arc::new(ImageStore::new())).system_prompt(&RunMode::Full);
    let turns: Vec<Value> = turns
        .into_iter()
        .zip(&digests)
        .map(|(mut t, d)| {
            t["context_digest"] = json!(d);
            t["elapsed_ms"] = json!(0);
            if let Some(obs) = t.get("observation").cloned() {
                let obs: Observation = serde_json::from_value(obs).expect("observation literal");
                t["observation_digest"] = json!(obs.digest());
            }
            t
        })
        .collect();
    let v = json!({
        "task_id": "calc",
        "task": calc_task(),
        "config": RunConfig::default(),
        "provider": {"name": "scripted", "max_context_tokens": 128000},
        "budget_tokens": 76800,
        "system_prompt_digest": sha_hex(&prompt),
        "turns": turns,
        "capability_history": history,
        "termination": termination,
        "answer": answer,
        "elapsed_ms": 0,
    });
    serde_json::from_value(v).map_err(|e| format!("expected record literal: {e}"))
}

fn compare(label: &str, actual: &TraceRecord, expected: &TraceRecord) -> Result<(), String> {
    let a = serde_json::to_value(actual.without_timing()).unwrap();
    let e = serde_json::to_value(expected.without_timing()).unwrap();
    ensure(a == e, || {
        format!(
            "{label}: trace differs from expected\nexpected {}\nactual   {}",
            serde_json::to_string(&e).unwrap(),
            serde_json::to_string(&a).unwrap()
        )
    })
}

const CALL: &str = r#"{"name":"eval_expression","arguments":{"expr":"6*7"}}"#;

fn algorithm_conformance() -> Check {
    let task = calc_task();

    // immediate answer
    let raw = "<think>6 times 7 is 42</think><answer>42</answer>";
    let (actual, _) = scripted(&task, &[raw]);
    let turns = vec![json!({
        "index": 1,
        "raw": raw,
        "segments": [seg("think", "6 times 7 is 42", 0, 30), seg("answer", "42", 30, 49)],
        "outcome": {"outcome": "answered"},
    })];
    compare("immediate", &actual, &expected_record(&actual, turns, json!([]), "answered", json!("42"))?)?;

    // tool loop then answer
    let first = format!("<think>use the calculator</think><cap>Logic</cap><tool_call>{CALL}</tool_call>");
    let second = "<answer>42</answer>";
    let (actual, _) = scripted(&task, &[first.as_str(), second]);
    let call_end = 49 + 11 + CALL.len() + 12;
    let turns = vec![
        json!({
            "index": 1,
            "raw": first,
            "segments": [
                seg("think", "use the calculator", 0, 33),
                seg("cap", "Logic", 33, 49),
                seg("tool_call", CALL, 49, call_end),
            ],
            "capability": "Logic",
            "invocation": {"tool": "eval_expression", "arguments": {"expr": "6*7"}, "image_refs": [], "declared_capability": "Logic"},
            "outcome": {"outcome": "tool_executed", "tool": "eval_expression"},
            "observation": {"kind": "tool", "tool": "eval_expression", "text": "value=42.0", "images": []},
        }),
        json!({
            "index": 2,
            "raw": second,
            "segments": [seg("answer", "42", 0, 19)],
            "outcome": {"outcome": "answered"},
        }),
    ];
    compare("tool loop", &actual, &expected_record(&actual, turns, json!(["Logic"]), "answered", json!("42"))?)?;

    // turn limit: the script never answers
    let looping = format!("<cap>Logic</cap><tool_call>{CALL}</tool_call>");
    let script: Vec<&str> = vec![looping.as_str(); 12];
    let (actual, consumed) = scripted(&task, &script);
    let turns: Vec<Value> = (1..=10)
        .map(|i| {
            json!({
                "index": i,
                "raw": looping,
                "segments": [seg("cap", "Logic", 0, 16), seg("tool_call", CALL, 16, 16 + 11 + CALL.len() + 12)],
                "capability": "Logic",
                "invocation": {"tool": "eval_expression", "arguments": {"expr": "6*7"}, "image_refs": [], "declared_capability": "Logic"},
                "outcome": {"outcome": "tool_executed", "tool": "eval_expression"},
                "observation": {"kind": "tool", "tool": "eval_expression", "text": "value=42.0", "images": []},
            })
        })
        .collect();
    compare("turn limit", &actual, &expected_record(&actual, turns, json!(vec!["Logic"; 10]), "turn_limit", Value::Null)?)?;
    ensure(consumed == 10, || format!("provider called {consumed} times, expected 10"))?;
    Ok("immediate answer (1 turn), tool loop (2 turns), turn limit (10 turns) match expected records".into())
}

// ---------------------------------------------------------------------------

fn fig6_case_study() -> Check {
    let set = StarterSet::fig6();
    let store = Arc::new(ImageStore::new());
    let tasks = set.load(&store).map_err(|e| e.to_string())?;
    let runtime = ToolRuntime::new(Registry::default_catalog(), store);
    let task = tasks.iter().find(|t| t.id == "maze-01").ok_or("maze-01 missing")?;
    let mut provider = capstep_core::provider::ProviderFactory::create(&set.scripts, task).map_err(|e| e.to_string())?;
    let result = run_session(task, provider.as_mut(), &runtime, &RunConfig::default());
    let history = &result.trace.capability_history;
    ensure(result.answer.as_deref() == Some(FIG6_ANSWER), || format!("answer {:?}", result.answer))?;
    ensure(FIG6_ANSWER == "L,U,U,L,L,L,D", || "fixture constant changed".into())?;
    ensure(
        history == &[Capability::Generation, Capability::Perception, Capability::Logic],
        || format!("capability history {history:?}"),
    )?;
    ensure(result.termination == Termination::Answered, || format!("{:?}", result.termination))?;
    Ok(format!("answer {FIG6_ANSWER}, history [Generation, Perception, Logic], {} turns", result.turns_used))
}

// ---------------------------------------------------------------------------

fn bfs_optimality() -> Check {
    let mut checked = 0u64;
    let mut solvable = 0u64;
    let mut problems: Vec<String> = Vec::new();
    let check = |grid: &capstep_core::toolkit::maze::CellGrid, problems: &mut Vec<String>, checked: &mut u64, solvable: &mut u64| {
        let maze = maze_parse(grid).expect("generated grids parse");
        *checked += 1;
        match (maze_shortest_path(&maze), dp_distance(&maze)) {
            (Ok(path), Some(d)) => {
                *solvable += 1;
                if !path_is_valid(&maze, &path) {
                    problems.push(format!("invalid path on {grid:?}"));
                } else if path.len() != d {
                    problems.push(format!("length {} vs {d} on {grid:?}", path.len()));
                }
            }
            (Err(MazeError::NoPath), None) => {}
            (got, want) => problems.push(format!("{got:?} vs oracle {want:?} on {grid:?}")),
        }
    };
    for_each_small_maze(4, 5, |g| check(g, &mut problems, &mut checked, &mut solvable));
    let exhaustive = checked;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let grid = random_maze(&mut rng, 6, 6, 0.3);
        check(&grid, &mut problems, &mut checked, &mut solvable);
    }
    ensure(problems.is_empty(), || format!("{} problems, first: {}", problems.len(), problems[0]))?;
    Ok(format!(
        "{exhaustive} exhaustive + 200 random 6x6 mazes, {solvable} solvable, validity 100%, minimality 100%"
    ))
}

// ---------------------------------------------------------------------------

fn geometry() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let n = rng.gen_range(4..13);
        let poly = star_polygon(&mut rng, n);
        let exact = signed_area(&poly).abs();
        let estimate = monte_carlo_area(&mut rng, &poly, 1_000_000);
        let rel = (estimate - exact).abs() / exact;
        worst = worst.max(rel);
        ensure(rel <= 0.01, || format!("polygon {i}: shoelace {exact} vs monte carlo {estimate}"))?;
    }
    let mut max_residual = 0.0f64;
    for _ in 0..1000 {
        let mut pt = || Point::new(rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0));
        let (a, b, p) = (pt(), pt(), pt());
        let foot = geom_perp_intersect(a, b, p).map_err(|e| e.to_string())?;
        max_residual = max_residual.max(orthogonality_residual(a, b, p, foot).abs());
    }
    ensure(max_residual < 1e-9, || format!("max residual {max_residual:e}"))?;
    Ok(format!("100 polygons, worst relative error {:.3}%; 1000 feet, max residual {max_residual:.1e}", worst * 100.0))
}

// ---------------------------------------------------------------------------

fn two_stage_enforcement() -> Check {
    let task = calc_task();
    let call = |cap: &str, body: &str| format!("{cap}<tool_call>{body}</tool_call>");
    let cases: Vec<(&str, String, fn(&TurnOutcome) -> bool)> = vec![
        ("missing cap", call("", CALL), |o| matches!(o, TurnOutcome::ProtocolError { violation: ProtocolViolation::MissingCapability })),
        ("unknown cap", call("<cap>Telepathy</cap>", CALL), |o| {
            matches!(o, TurnOutcome::ProtocolError { violation: ProtocolViolation::UnknownCapability { .. } })
        }),
        ("mismatched tool", call("<cap>Visual Transformation & Editing</cap>", CALL), |o| {
            matches!(o, TurnOutcome::ProtocolError { violation } if violation.is_capability_mismatch())
        }),
        ("malformed json", call("<cap>Logic</cap>", r#"{"name": "eval_expression", "arguments": {"expr": "6*7"}"#), |o| {
            matches!(o, TurnOutcome::ProtocolError { violation: ProtocolViolation::MalformedPayload { .. } })
        }),
        ("tool after answer", format!("<answer>42</answer>{}", call("<cap>Logic</cap>", CALL)), |o| {
            matches!(o, TurnOutcome::Answered)
        }),
    ];
    for (label, first, expect) in &cases {
        let (trace, _) = scripted(&task, &[first.as_str(), "<answer>42</answer>"]);
        let turn = &trace.turns[0];
        ensure(expect(&turn.outcome), || format!("{label}: outcome {:?}", turn.outcome))?;
        ensure(trace.executed_tools().next().is_none(), || format!("{label}: a tool was executed"))?;
        if *label != "tool after answer" {
            let obs = turn.observation.as_ref().ok_or_else(|| format!("{label}: no observation"))?;
            ensure(obs.kind == ObservationKind::ProtocolError, || format!("{label}: observation kind {:?}", obs.kind))?;
            ensure(trace.answer.as_deref() == Some("42"), || format!("{label}: session did not recover"))?;
        } else {
            ensure(trace.turns.len() == 1 && turn.observation.is_none(), || format!("{label}: tool ran after answer"))?;
        }
    }

    // Every declared capability against every tool: execution only on a match.
    let registry = Registry::default_catalog();
    let mut violations = 0;
    let mut pairs = 0;
    for cap in Capability::ALL {
        for tool in registry.flat_toolset() {
            pairs += 1;
            let raw = format!(
                "<cap>{}</cap><tool_call>{{\"name\":\"{}\",\"arguments\":{{}}}}</tool_call>",
                cap.display_name(),
                tool.name
            );
            let (trace, _) = scripted(&task, &[raw.as_str(), "<answer>0</answer>"]);
            let ran = trace.executed_tools().count() > 0
                || matches!(trace.turns[0].outcome, TurnOutcome::ToolFailed { .. });
            let rejected_for_capability = matches!(&trace.turns[0].outcome, TurnOutcome::ProtocolError { violation } if violation.is_capability_mismatch());
            if tool.capability != cap && (ran || !rejected_for_capability) {
                violations += 1;
            }
        }
    }
    ensure(violations == 0, || format!("{violations} violations over {pairs} capability/tool pairs"))?;
    Ok(format!("5 adversarial cases rejected as expected; {pairs} capability/tool pairs, 0 violations"))
}

// ---------------------------------------------------------------------------

fn ablation_mechanics() -> Check {
    let set = StarterSet::ablation();
    let store = Arc::new(ImageStore::new());
    let tasks = set.load(&store).map_err(|e| e.to_string())?;
    ensure(tasks.len() == 12, || format!("{} tasks", tasks.len()))?;
    let runtime = ToolRuntime::new(Registry::default_catalog(), store);
    let run = |mode: RunMode| run_benchmark(&tasks, &set.scripts, &runtime, &RunConfig::default().with_mode(mode), 4, None);
    let full = run(RunMode::Full).map_err(|e| e.to_string())?;
    let dropped = run(RunMode::drop(Capability::Logic)).map_err(|e| e.to_string())?;
    let flat = run(RunMode::FlatSelection).map_err(|e| e.to_string())?;
    ensure(full.report.overall > dropped.report.overall, || {
        format!("full {} vs drop Logic {}", full.report.overall, dropped.report.overall)
    })?;
    let mismatches = flat
        .traces
        .iter()
        .flat_map(|t| t.violations())
        .filter(|v| v.is_capability_mismatch())
        .count();
    ensure(mismatches == 0, || format!("{mismatches} capability mismatches in flat mode"))?;
    Ok(format!(
        "full {:.3} > drop Logic {:.3}; flat {:.3} with 0 capability mismatches",
        full.report.overall, dropped.report.overall, flat.report.overall
    ))
}

// ---------------------------------------------------------------------------

fn determinism_and_replay() -> Check {
    let set = StarterSet::generate();
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut reports = Vec::new();
    let mut traces = Vec::new();
    for _ in 0..2 {
        let dir = RunDir::create(root.path(), "").map_err(|e| e.to_string())?;
        let store = Arc::new(dir.image_store().map_err(|e| e.to_string())?);
        let tasks = set.load(&store).map_err(|e| e.to_string())?;
        let runtime = ToolRuntime::new(Registry::default_catalog(), store);
        let run = run_benchmark(&tasks, &set.scripts, &runtime, &RunConfig::default(), 4, Some(&dir)).map_err(|e| e.to_string())?;
        dir.write_report(&run.report).map_err(|e| e.to_string())?;
        reports.push(std::fs::read(dir.path().join("report.json")).map_err(|e| e.to_string())?);
        traces.push((dir, run.traces));
    }
    ensure(reports[0] == reports[1], || "report.json differs between runs".into())?;

    // Replay from disk with a store reopened from the run's images/.
    let (dir, recorded) = &traces[0];
    let runtime = ToolRuntime::new(Registry::default_catalog(), Arc::new(dir.image_store().map_err(|e| e.to_string())?));
    let files = dir.trace_files().map_err(|e| e.to_string())?;
    ensure(files.len() == 30, || format!("{} trace files", files.len()))?;
    let mut reproduced = 0;
    for file in &files {
        let trace = TraceRecord::from_json(&std::fs::read_to_string(file).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let original = recorded.iter().find(|t| t.task_id == trace.task_id).ok_or("trace without a run")?;
        ensure(&trace == original, || format!("{} changed on disk", trace.task_id))?;
        let replayed = replay_trace(&trace, &runtime).map_err(|e| format!("{}: {e}", trace.task_id))?;
        if replayed.answer == trace.answer {
            reproduced += 1;
        }
    }
    ensure(reproduced == files.len(), || format!("{reproduced}/{} answers reproduced", files.len()))?;
    Ok(format!("identical report.json across 2 runs; replay reproduced {reproduced}/30 answers"))
}

// ---------------------------------------------------------------------------

fn budget_discipline() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut oversized = 0;
    let mut evictions = 0;
    for stream in 0..1000 {
        let mut task = TaskInstance::text("b", &"w".repeat(rng.gen_range(1..400)), "x", AnswerMode::ExactText);
        task.images = (0..rng.gen_range(0..4))
            .map(|i| ImageRef { id: format!("in-{i}"), width: 16, height: 16 })
            .collect();
        let budget = rng.gen_range(100..2000);
        let Ok(mut state) = SessionState::init(&task, budget) else {
            continue;
        };
        let pinned: Vec<String> = state.evidence.iter().map(|e| e.id.clone()).collect();
        for turn in 1..=rng.gen_range(1..30u32) {
            if rng.gen_bool(0.4) {
                state.record_turn(parse_turn(&"t".repeat(rng.gen_range(0..3000)), turn));
            }
            // Observations up to several times the whole budget.
            let chars = rng.gen_range(0..(budget as usize * 12));
            let obs = Observation::tool("stress", "o".repeat(chars), vec![]);
            let fits = obs.approx_tokens() <= state.capacity();
            match state.append_observation(&obs, turn) {
                Ok(ev) => evictions += ev.len(),
                Err(_) if !fits => oversized += 1,
                Err(e) => return Err(format!("stream {stream}: fitting observation rejected: {e}")),
            }
            state.check_invariants().map_err(|e| format!("stream {stream}: {e}"))?;
            ensure(state.used_tokens <= budget, || format!("stream {stream}: used {} > {budget}", state.used_tokens))?;
            for id in &pinned {
                ensure(state.evidence.iter().any(|e| &e.id == id) && !state.evicted.contains(id), || {
                    format!("stream {stream}: pinned {id} evicted")
                })?;
            }
        }
    }
    ensure(oversized > 0 && evictions > 0, || "stress streams never hit the budget".into())?;
    Ok(format!("1000 streams, {oversized} oversized observations refused, {evictions} evictions, budget never exceeded"))
}

// ---------------------------------------------------------------------------

const CRITERIA: &[Criterion] = &[
    Criterion { name: "protocol round-trip", limit: Some(Duration::from_secs(10)), run: protocol_round_trip },
    Criterion { name: "loop conformance", limit: None, run: algorithm_conformance },
    Criterion { name: "maze case study", limit: Some(Duration::from_secs(1)), run: fig6_case_study },
    Criterion { name: "BFS optimality", limit: Some(Duration::from_secs(60)), run: bfs_optimality },
    Criterion { name: "geometry", limit: None, run: geometry },
    Criterion { name: "two-stage enforcement", limit: None, run: two_stage_enforcement },
    Criterion { name: "ablation mechanics", limit: None, run: ablation_mechanics },
    Criterion { name: "determinism & replay", limit: None, run: determinism_and_replay },
    Criterion { name: "budget discipline", limit: None, run: budget_discipline },
];

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for c in CRITERIA {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.limit) {
            (Ok(_), Some(limit)) if elapsed > limit => Err(format!("took {elapsed:.2?}, limit {limit:?}")),
            (o, _) => o,
        };
        let timing = match c.limit {
            Some(limit) => format!("{elapsed:.2?} < {limit:?}"),
            None => format!("{elapsed:.2?}"),
        };
        match outcome {
            Ok(detail) => println!("PASS  {:<22} {detail} [{timing}]", c.name),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {:<22} {detail} [{timing}]", c.name);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
