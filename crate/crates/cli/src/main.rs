//! Command-line front end: sample Bayesian networks, derive labellings,
//! build and learn randomly structured circuits, analyze and execute
//! operation pipelines, run causal queries, and benchmark backdoor
//! estimation against the counting baseline.

use clap::{Args, Parser, Subcommand};
use mdpc::bench::{backdoor_bench, BenchConfig};
use mdpc::calculus::{backward_analyze, forward_analyze, BackwardResult};
use mdpc::causal::{
    backdoor_pipeline, frontdoor_pipeline, most_likely_assignment, napkin_pipeline, CausalQuery,
};
use mdpc::calculus::Value;
use mdpc::circuit::Circuit;
use mdpc::dataset::Dataset;
use mdpc::io;
use mdpc::mdnet::{build_random, fit_em, fit_mle, EmConfig, StructureConfig};
use mdpc::mdvtree::optimal_labelling;
use mdpc::vars::{assignments, Assignment, VarSet, VariableSpace};
use mdpc::MdVtree;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "mdpc", version, about = "Probabilistic circuits with marginal determinism")]
struct Cli {
    /// Verbosity: quiet, info or debug (progress notes go to stderr).
    #[arg(long, global = true, default_value = "quiet")]
    log_level: String,
    /// Override for exhaustive-enumeration bounds (2^bits assignments).
    #[arg(long, global = true, default_value_t = 20)]
    max_enum_bits: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from a Bayesian network by ancestral sampling.
    Sample(SampleArgs),
    /// Compute the most expressive labelling enforcing given determinisms.
    Label(LabelArgs),
    /// Analyze a pipeline: forward tractability or backward requirements.
    Analyze(AnalyzeArgs),
    /// Build a randomly structured circuit conforming to an md-vtree.
    Build(BuildArgs),
    /// Fit circuit parameters to data (EM, or single-pass MLE).
    Learn(LearnArgs),
    /// Run a causal query against a model.
    Query(QueryArgs),
    /// Benchmark an estimator against the counting baseline.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    bn: PathBuf,
    #[arg(short = 'n', long = "n", default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(short, long)]
    output: String,
}

#[derive(Args)]
struct LabelArgs {
    /// Vtree (or md-vtree) file; only its tree structure is used.
    #[arg(long)]
    vtree: PathBuf,
    /// Required marginal determinism, as a comma-separated variable list.
    /// Repeatable.
    #[arg(long = "require")]
    require: Vec<String>,
    #[arg(short, long)]
    output: String,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    pipeline: PathBuf,
    /// Md-vtree files matched to the pipeline's inputs in order; enables the
    /// forward tractability check.
    #[arg(long = "inputs")]
    inputs: Vec<PathBuf>,
    /// Derive sufficient input determinisms instead.
    #[arg(long)]
    backward: bool,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    mdvtree: PathBuf,
    #[arg(long, default_value_t = 2)]
    groups: usize,
    #[arg(long = "nodes-per-group", default_value_t = 4)]
    nodes_per_group: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(short, long)]
    output: String,
}

#[derive(Args)]
struct LearnArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Use single-pass maximum likelihood (requires full determinism).
    #[arg(long)]
    mle: bool,
    #[arg(long = "em-iters", default_value_t = 50)]
    em_iters: usize,
    #[arg(long = "em-tol", default_value_t = 1e-6)]
    em_tol: f64,
    #[arg(short, long)]
    output: String,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    spec: PathBuf,
    #[arg(short, long)]
    output: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    /// Estimand to benchmark (only `backdoor` is available).
    estimand: String,
    #[arg(long)]
    bn: PathBuf,
    #[arg(long)]
    x: String,
    #[arg(long)]
    y: String,
    #[arg(long)]
    z: String,
    #[arg(short = 'n', long = "n", default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    groups: usize,
    #[arg(long = "nodes-per-group", default_value_t = 8)]
    nodes_per_group: usize,
    #[arg(long = "em-iters", default_value_t = 25)]
    em_iters: usize,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        let line = serde_json::json!({"error": {"kind": error_kind(&e), "message": e.to_string()}});
        eprintln!("{line}");
        std::process::exit(1);
    }
}

fn error_kind(e: &mdpc::Error) -> &'static str {
    use mdpc::Error::*;
    match e {
        UnknownVariable(_) | DuplicateVariable(_) | TooManyVariables => "variables",
        Parse(_) => "parse",
        Io(_) => "io",
        InvalidVtree(_) | UnknownNode(_) | InvalidLabel(_) => "vtree",
        InvalidCircuit(_) | StateOutOfRange { .. } | IncompleteAssignment(_) => "circuit",
        InvalidPipeline(_) | AnalysisFailure(_) => "pipeline",
        DeterminismNotCertified(_) => "determinism",
        Incompatible => "compatibility",
        OverlappingSets | MissingInstantiation(_) => "query",
        NotRegular(_) => "structure",
        EmptyDataset | DatasetMismatch(_) => "data",
        NotFactorizable { .. } | ZeroMassTable | CompilationBound(_) => "compile",
        CyclicNetwork | UnnormalizedCpt(_) => "network",
        EnumerationBound(_, _) | EmptyRequirement | NotParentChild(_, _)
        | ExpandPrecondition(_) | NotInScope => "input",
    }
}

fn read(path: &Path) -> mdpc::error::Result<String> {
    Ok(std::fs::read_to_string(path)?)
}

fn write_out(target: &str, content: &str) -> mdpc::error::Result<()> {
    if target == "-" {
        println!("{content}");
    } else {
        std::fs::write(target, content)?;
    }
    Ok(())
}

fn parse_names(space: &Arc<VariableSpace>, list: &str) -> mdpc::error::Result<VarSet> {
    let mut set = VarSet::empty();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        set.insert(space.lookup(name)?);
    }
    Ok(set)
}

fn run(cli: &Cli) -> mdpc::error::Result<()> {
    let info = cli.log_level != "quiet";
    match &cli.command {
        Command::Sample(a) => {
            let bn = io::bn_from_str(&read(&a.bn)?)?;
            let data = bn.sample(a.n, a.seed)?;
            write_out(&a.output, &data.to_csv())?;
            if info {
                eprintln!("sampled {} rows over {} variables", a.n, data.vars().len());
            }
            Ok(())
        }
        Command::Label(a) => {
            let base = io::mdvtree_from_str(&read(&a.vtree)?)?;
            let space = base.vtree().space().clone();
            let reqs: Vec<VarSet> = a
                .require
                .iter()
                .map(|r| parse_names(&space, r))
                .collect::<mdpc::error::Result<_>>()?;
            let labelled = optimal_labelling(base.vtree(), &reqs)?;
            write_out(&a.output, &io::mdvtree_to_string(&labelled))?;
            if info {
                eprintln!(
                    "labelled {} nodes; regular: {}",
                    labelled.vtree().len(),
                    labelled.is_regular()
                );
            }
            Ok(())
        }
        Command::Analyze(a) => {
            // Without input md-vtrees the space comes from the pipeline file
            // itself, assuming binary variables (the analysis is
            // cardinality-independent).
            let text = read(&a.pipeline)?;
            let (space, inputs) = if a.inputs.is_empty() {
                (space_from_pipeline_text(&text)?, Vec::new())
            } else {
                let mdvs: Vec<MdVtree> = a
                    .inputs
                    .iter()
                    .map(|p| io::mdvtree_from_str(&read(p)?))
                    .collect::<mdpc::error::Result<_>>()?;
                (mdvs[0].vtree().space().clone(), mdvs)
            };
            let pipeline = io::pipeline_from_str(&space, &text)?;
            if a.backward {
                match backward_analyze(&pipeline)? {
                    BackwardResult::Requirements(reqs) => {
                        for r in reqs {
                            let sets: Vec<String> = r
                                .demands
                                .iter()
                                .map(|d| {
                                    let names = d.q.names(&space).join(",");
                                    if d.slack.is_empty() {
                                        format!("{{{names}}}")
                                    } else {
                                        format!(
                                            "{{{names}}} (any subset of {{{}}} may be added)",
                                            d.slack.names(&space).join(",")
                                        )
                                    }
                                })
                                .collect();
                            println!("{}: {}", r.input_name, sets.join(" "));
                        }
                    }
                    BackwardResult::Infeasible(i) => {
                        println!("infeasible: {i}");
                    }
                }
            } else {
                let names = pipeline.input_names();
                if inputs.len() != names.len() {
                    return Err(mdpc::Error::AnalysisFailure(format!(
                        "pipeline has {} inputs, got {} md-vtree files",
                        names.len(),
                        inputs.len()
                    )));
                }
                let map: BTreeMap<String, MdVtree> = names
                    .iter()
                    .map(|(n, _)| n.clone())
                    .zip(inputs)
                    .collect();
                if info {
                    for (name, w) in &map {
                        match w.enumerate_implied(Some(cli.max_enum_bits)) {
                            Ok(implied) => eprintln!(
                                "input `{name}` implies {} marginal determinisms",
                                implied.len()
                            ),
                            Err(e) => eprintln!("input `{name}`: {e}"),
                        }
                    }
                }
                let report = forward_analyze(&pipeline, &map)?;
                if report.tractable {
                    println!("tractable");
                } else {
                    for f in &report.failures {
                        println!("failure at node {}: {}", f.node, f.reason);
                    }
                }
            }
            Ok(())
        }
        Command::Build(a) => {
            let w = io::mdvtree_from_str(&read(&a.mdvtree)?)?;
            let net = build_random(
                &w,
                &StructureConfig {
                    groups_per_layer: a.groups,
                    nodes_per_group: a.nodes_per_group,
                    seed: a.seed,
                },
            )?;
            write_out(&a.output, &io::circuit_to_string(&net.circuit))?;
            if info {
                eprintln!("built circuit with {} edges", net.circuit.size());
            }
            Ok(())
        }
        Command::Learn(a) => {
            let model = io::circuit_from_str(&read(&a.model)?)?;
            let space = model.mdvtree().vtree().space().clone();
            let data = Dataset::from_csv(space, &read(&a.data)?)?;
            let fitted = if a.mle {
                fit_mle(&model, &data)?
            } else {
                let (fitted, trace) = fit_em(
                    &model,
                    &data,
                    &EmConfig {
                        max_iters: a.em_iters,
                        tol: a.em_tol,
                        floor: Some(mdpc::mdnet::SMOOTHING),
                    },
                )?;
                if info {
                    eprintln!(
                        "EM ran {} iterations, final log-likelihood {:.6}",
                        trace.len(),
                        trace.last().copied().unwrap_or(f64::NEG_INFINITY)
                    );
                }
                fitted
            };
            write_out(&a.output, &io::circuit_to_string(&fitted))?;
            Ok(())
        }
        Command::Query(a) => {
            let model = io::circuit_from_str(&read(&a.model)?)?;
            let spec = io::query_spec_from_str(&read(&a.spec)?)?;
            let space = model.mdvtree().vtree().space().clone();
            let t0 = Instant::now();
            let (query, x_val) = build_query(&space, &model, &spec)?;
            let requirement = query
                .requirements()?
                .map_err(|i| mdpc::Error::AnalysisFailure(i.to_string()))?;
            let (value, diag) = query.run(&model)?;
            let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
            let mut out = serde_json::Map::new();
            match &value {
                Value::Circuit(c) => {
                    out.insert(
                        "result".into(),
                        serde_json::json!({
                            "circuit": serde_json::from_str::<serde_json::Value>(
                                &io::circuit_to_string(c)
                            ).expect("own output"),
                        }),
                    );
                    if c.scope().len() <= cli.max_enum_bits.min(16) {
                        let mut table = serde_json::Map::new();
                        let qspace = c.mdvtree().vtree().space().clone();
                        for assign in assignments(&qspace, c.scope()) {
                            let key: Vec<String> = assign
                                .iter()
                                .map(|(v, s)| format!("{}={}", qspace.name(v), s))
                                .collect();
                            table.insert(
                                key.join(","),
                                serde_json::json!(c.evaluate(&assign)?),
                            );
                        }
                        out.insert("table".into(), table.into());
                    }
                }
                Value::Scalar(s) => {
                    out.insert("result".into(), serde_json::json!({ "scalar": s }));
                }
            }
            out.insert(
                "diagnostics".into(),
                serde_json::json!({
                    "zero_divisions": diag.zero_divisions,
                    "wall_ms": wall_ms,
                    "requirements": requirement
                        .demands
                        .iter()
                        .map(|d| d.q.names(&space).join(","))
                        .collect::<Vec<_>>(),
                    "x": x_val.map(|a| a
                        .iter()
                        .map(|(v, s)| format!("{}={}", space.name(v), s))
                        .collect::<Vec<_>>()),
                }),
            );
            let rendered = serde_json::to_string_pretty(&serde_json::Value::Object(out))
                .expect("serializable");
            match &a.output {
                Some(target) => write_out(target, &rendered)?,
                None => println!("{rendered}"),
            }
            Ok(())
        }
        Command::Bench(a) => {
            if a.estimand != "backdoor" {
                return Err(mdpc::Error::Parse(format!(
                    "unknown estimand `{}` (available: backdoor)",
                    a.estimand
                )));
            }
            let bn = io::bn_from_str(&read(&a.bn)?)?;
            let space = bn.space().clone();
            let x = parse_names(&space, &a.x)?;
            let y = parse_names(&space, &a.y)?;
            let z = parse_names(&space, &a.z)?;
            let cfg = BenchConfig {
                n: a.n,
                runs: a.runs,
                seed: a.seed,
                groups_per_layer: a.groups,
                nodes_per_group: a.nodes_per_group,
                em_iters: a.em_iters,
                em_tol: 1e-6,
            };
            let report = backdoor_bench(&bn, x, y, z, &cfg)?;
            println!(
                "| {:>4} | {:>3} | {:>12} | {:>12} | {:>9} | {:>9} |",
                "run", "|Z|", "err md", "err count", "time md", "time cnt"
            );
            for (i, r) in report.runs.iter().enumerate() {
                println!(
                    "| {:>4} | {:>3} | {:>12.5} | {:>12.5} | {:>8.2}s | {:>8.2}s |",
                    i,
                    z.len(),
                    r.md_error,
                    r.counting_error,
                    r.md_learn_secs + r.md_query_secs,
                    r.counting_secs
                );
            }
            println!(
                "| {:>4} | {:>3} | {:>12.5} | {:>12.5} | {:>8.2}s | {:>8.2}s |",
                "mean",
                z.len(),
                report.mean_md_error,
                report.mean_counting_error,
                report.mean_md_secs,
                report.mean_counting_secs
            );
            Ok(())
        }
    }
}

/// Builds the variable space for input-free pipeline analysis from the
/// variable names in the pipeline file, assuming binary cardinalities (the
/// label analysis does not depend on them).
fn space_from_pipeline_text(text: &str) -> mdpc::error::Result<Arc<VariableSpace>> {
    let v: serde_json::Value =
        serde_json::from_str(text).map_err(|e| mdpc::Error::Parse(format!("pipeline: {e}")))?;
    let mut names: Vec<String> = Vec::new();
    let mut push = |n: &str| {
        if !names.iter().any(|x| x == n) {
            names.push(n.to_string());
        }
    };
    if let Some(inputs) = v.get("inputs").and_then(|i| i.as_array()) {
        for inp in inputs {
            for n in inp.get("vars").and_then(|v| v.as_array()).unwrap_or(&vec![]) {
                if let Some(s) = n.as_str() {
                    push(s);
                }
            }
        }
    }
    if let Some(nodes) = v.get("nodes").and_then(|n| n.as_array()) {
        for node in nodes {
            for n in node.get("vars").and_then(|v| v.as_array()).unwrap_or(&vec![]) {
                if let Some(s) = n.as_str() {
                    push(s);
                }
            }
            if let Some(assign) = node.get("assign").and_then(|a| a.as_object()) {
                for (name, _) in assign {
                    push(name);
                }
            }
        }
    }
    VariableSpace::from_pairs(names.into_iter().map(|n| (n, 2)).collect())
}

fn build_query(
    space: &Arc<VariableSpace>,
    model: &Circuit,
    spec: &io::QuerySpec,
) -> mdpc::error::Result<(CausalQuery, Option<Assignment>)> {
    let set_of = |names: &[String]| -> mdpc::error::Result<VarSet> {
        let mut s = VarSet::empty();
        for n in names {
            s.insert(space.lookup(n)?);
        }
        Ok(s)
    };
    let assignment_of = |map: &BTreeMap<String, usize>| -> mdpc::error::Result<Assignment> {
        let mut a = Assignment::new();
        for (n, &s) in map {
            a.set(space.lookup(n)?, s);
        }
        Ok(a)
    };
    let x = match &spec.x {
        Some(m) => set_of(&m.keys().cloned().collect::<Vec<_>>())?,
        None => set_of(&spec.xvars)?,
    };
    let y = set_of(&spec.y)?;
    let z = set_of(&spec.z)?;
    let x_val = spec.x.as_ref().map(&assignment_of).transpose()?;
    match spec.query.as_str() {
        "backdoor" => {
            let x = if x.is_empty() {
                return Err(mdpc::Error::MissingInstantiation(
                    "backdoor needs a treatment set in `x`".into(),
                ));
            } else {
                x
            };
            Ok((backdoor_pipeline(space, x, y, z, x_val.as_ref())?, x_val))
        }
        "frontdoor" => Ok((frontdoor_pipeline(space, x, y, z, x_val.as_ref())?, x_val)),
        "napkin" => {
            let w = set_of(&spec.w)?;
            let k = set_of(&spec.k)?;
            let z_val = match &spec.zval {
                Some(m) => assignment_of(m)?,
                None => most_likely_assignment(model, z)?,
            };
            Ok((
                napkin_pipeline(space, x, y, z, w, k, x_val.as_ref(), &z_val)?,
                x_val,
            ))
        }
        other => Err(mdpc::Error::Parse(format!(
            "unknown query `{other}` (available: backdoor, frontdoor, napkin)"
        ))),
    }
}
