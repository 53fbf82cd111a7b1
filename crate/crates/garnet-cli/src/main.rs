//! `garnet` — one binary for the whole pipeline: train ternary models,
//! compile them to netlists, inspect gate counts, measure per-op garbling
//! costs, search architectures under a cost budget, and run either side of
//! the two-party private-inference protocol.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, bad config file),
//! 2 runtime or protocol error (I/O, training failure, session abort).
//! Metrics go to stdout as tab-separated `key<TAB>value` lines.

mod cfg;

use std::fmt;
use std::io::Write as _;
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::thread;

use clap::{Args, Parser, Subcommand};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;

use garnet_core::arch::{self, Architecture, Scale, Shape};
use garnet_core::compile::compile_model;
use garnet_core::data::{self, Dataset, Split};
use garnet_core::model::ModelParams;
use garnet_core::netlist::Netlist;
use garnet_core::ot::OtMode;
use garnet_core::protocol::{self, estimate_session, ProtocolError, SessionOptions};
use garnet_core::search::{self, CostTable, SearchConfig};
use garnet_core::tensor::BinaryTensor;
use garnet_core::train::{self, OptimizerKind, TrainConfig};

use cfg::Overrides;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or config: reported before any real work starts. Exit 1.
    Usage(String),
    /// Failure while doing the work (I/O, protocol, training). Exit 2.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

/// Shorthand for mapping library errors onto runtime exit status.
fn rt(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn usage(m: impl Into<String>) -> CliError {
    CliError::Usage(m.into())
}

#[derive(Parser)]
#[command(
    name = "garnet",
    version,
    about = "Private neural-network inference over garbled circuits",
    disable_help_subcommand = true
)]
struct Cli {
    /// Key=value file supplying defaults for any long flag below.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a ternary-weight model and save it.
    Train(TrainArgs),
    /// Compile a trained model to a boolean netlist file.
    Compile(CompileArgs),
    /// Print gate counts and predicted session bytes for a model.
    Gates(GatesArgs),
    /// Measure per-candidate garbling costs and print the penalty table.
    Costs(CostsArgs),
    /// Search for an architecture under a garbling-cost penalty.
    Search(SearchArgs),
    /// Evaluate inferences for connecting clients (holds the model).
    Serve(ServeArgs),
    /// Run one private inference against a server (holds the image).
    Infer(InferArgs),
    /// Time a loopback inference session end to end.
    Bench(BenchArgs),
}

/// Architecture selection shared by several subcommands: a zoo name or a
/// file produced by `search`, plus a width multiplier.
#[derive(Args, Debug)]
struct ArchSel {
    /// Architecture name from the built-in zoo (m1..m6).
    #[arg(long)]
    arch: Option<String>,
    /// Architecture description file (from `search --out`).
    #[arg(long, value_name = "FILE")]
    arch_file: Option<PathBuf>,
    /// Width multiplier, e.g. 0.25, 1, 3.0. Default 1.
    #[arg(long)]
    scale: Option<String>,
}

impl ArchSel {
    /// Resolve to a (base architecture, scale) pair; `required` controls
    /// whether omitting both sources is an error.
    fn resolve(&self, ovr: &Overrides) -> Result<(Architecture, Scale), CliError> {
        let name = self.arch.clone().or(ovr.get("arch")?);
        let file: Option<PathBuf> = self.arch_file.clone().or(ovr.get("arch-file")?);
        let base = match (name, file) {
            (Some(_), Some(_)) => {
                return Err(usage("--arch and --arch-file are mutually exclusive"));
            }
            (Some(name), None) => arch::by_name(&name).map_err(|e| usage(e.to_string()))?,
            (None, Some(path)) => {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| rt(format!("cannot read {}: {e}", path.display())))?;
                Architecture::from_text(&text).map_err(rt)?
            }
            (None, None) => return Err(usage("need --arch <name> or --arch-file <file>")),
        };
        let scale = parse_scale(self.scale.clone().or(ovr.get("scale")?))?;
        Ok((base, scale))
    }
}

fn parse_scale(raw: Option<String>) -> Result<Scale, CliError> {
    match raw {
        None => Ok(Scale::ONE),
        Some(s) => Scale::from_str(&s).map_err(|e| usage(e.to_string())),
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    arch: ArchSel,
    /// Dataset name: mnist or cifar10. Default mnist.
    #[arg(long)]
    dataset: Option<String>,
    /// Dataset root directory (else $GARNET_DATA, else ./data).
    #[arg(long, value_name = "DIR")]
    data_root: Option<PathBuf>,
    /// Training epochs. Default 30.
    #[arg(long)]
    epochs: Option<usize>,
    /// Minibatch size. Default 100.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam/SGD learning rate. Default 1e-3.
    #[arg(long)]
    lr: Option<f32>,
    /// Optimizer: adam or sgd. Default adam.
    #[arg(long)]
    optimizer: Option<String>,
    /// RNG seed for init and shuffling. Default 1.
    #[arg(long)]
    seed: Option<u64>,
    /// Images held out of the train split for validation. Default 5000.
    #[arg(long)]
    val_count: Option<usize>,
    /// Where to save the trained model.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Also append per-epoch records to this file.
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct CompileArgs {
    /// Trained model file.
    #[arg(long, value_name = "FILE")]
    params: Option<PathBuf>,
    /// Where to write the netlist text.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GatesArgs {
    #[command(flatten)]
    arch: ArchSel,
    /// Trained model file; without it, gate counts assume fully dense
    /// weights (the upper bound).
    #[arg(long, value_name = "FILE")]
    params: Option<PathBuf>,
}

#[derive(Args)]
struct CostsArgs {
    /// Input channels for the probe shape. Default 16.
    #[arg(long)]
    channels: Option<usize>,
    /// Input height. Default 32.
    #[arg(long)]
    height: Option<usize>,
    /// Input width. Default 32.
    #[arg(long)]
    width: Option<usize>,
    /// Also write the table to this file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    /// Dataset name: mnist or cifar10. Default mnist.
    #[arg(long)]
    dataset: Option<String>,
    /// Dataset root directory (else $GARNET_DATA, else ./data).
    #[arg(long, value_name = "DIR")]
    data_root: Option<PathBuf>,
    /// Number of cells (channel width doubles per cell). Default 1.
    #[arg(long)]
    cells: Option<usize>,
    /// Cost-penalty strength in [0,1]. Default 0.
    #[arg(long)]
    lambda: Option<f64>,
    /// Search epochs; the run stops here whether or not scores settled.
    /// Default 6.
    #[arg(long)]
    budget_epochs: Option<usize>,
    /// RNG seed. Default 7.
    #[arg(long)]
    seed: Option<u64>,
    /// Training images per epoch. Default 3000.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Validation images for the score step. Default 1000.
    #[arg(long)]
    val_limit: Option<usize>,
    /// Images held out of the train split for validation. Default 5000.
    #[arg(long)]
    val_count: Option<usize>,
    /// First-cell channel width. Default 16.
    #[arg(long)]
    channels: Option<usize>,
    /// Cost table file (from `costs --out`); measured live when omitted.
    #[arg(long, value_name = "FILE")]
    costs_file: Option<PathBuf>,
    /// Where to write the selected architecture.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Where to write the full search report.
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Trained model file to serve.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Listen address, e.g. 127.0.0.1:7777 (port 0 picks one).
    #[arg(long)]
    listen: Option<String>,
    /// Run the oblivious transfer in cleartext (testing only).
    #[arg(long)]
    insecure_ot: bool,
    /// Session RNG seed; fresh entropy when omitted.
    #[arg(long)]
    seed: Option<u64>,
    /// Exit after the first session instead of looping.
    #[arg(long)]
    once: bool,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    arch: ArchSel,
    /// IDX image file holding the query image(s).
    #[arg(long, value_name = "FILE")]
    image: Option<PathBuf>,
    /// Which image in the file to send. Default 0.
    #[arg(long)]
    index: Option<usize>,
    /// Server address, e.g. 127.0.0.1:7777.
    #[arg(long)]
    connect: Option<String>,
    /// Run the oblivious transfer in cleartext (testing only).
    #[arg(long)]
    insecure_ot: bool,
    /// Session RNG seed; fresh entropy when omitted.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    arch: ArchSel,
    /// Trained model file; without it, synthetic ternary weights are drawn
    /// at --sparsity.
    #[arg(long, value_name = "FILE")]
    params: Option<PathBuf>,
    /// Zero-weight fraction for synthetic weights. Default 0.5.
    #[arg(long)]
    sparsity: Option<f64>,
    /// RNG seed for weights, image, and both parties. Default 1.
    #[arg(long)]
    seed: Option<u64>,
    /// Run the oblivious transfer in cleartext (testing only).
    #[arg(long)]
    insecure_ot: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let ovr = match &cli.config {
        Some(path) => Overrides::load(path)?,
        None => Overrides::default(),
    };
    match cli.cmd {
        Cmd::Train(a) => cmd_train(a, &ovr),
        Cmd::Compile(a) => cmd_compile(a, &ovr),
        Cmd::Gates(a) => cmd_gates(a, &ovr),
        Cmd::Costs(a) => cmd_costs(a, &ovr),
        Cmd::Search(a) => cmd_search(a, &ovr),
        Cmd::Serve(a) => cmd_serve(a, &ovr),
        Cmd::Infer(a) => cmd_infer(a, &ovr),
        Cmd::Bench(a) => cmd_bench(a, &ovr),
    }
}

// --- shared helpers -----------------------------------------------------------

fn kv(key: &str, value: impl fmt::Display) {
    println!("{key}\t{value}");
}

fn data_root(flag: Option<PathBuf>, ovr: &Overrides) -> Result<PathBuf, CliError> {
    let explicit: Option<PathBuf> = flag.or(ovr.get("data-root")?);
    Ok(data::resolve_root(explicit.as_deref()))
}

fn load_split(dataset: &str, root: &Path, split: Split) -> Result<Dataset, CliError> {
    let ds = match dataset {
        "mnist" => data::load_mnist(root, split),
        "cifar10" => data::load_cifar10(root, split),
        other => return Err(usage(format!("unknown dataset {other:?} (mnist, cifar10)"))),
    };
    ds.map_err(|e| {
        rt(format!(
            "loading {dataset} from {}: {e} (set --data-root or $GARNET_DATA; \
             scripts/fetch-mnist.sh downloads MNIST)",
            root.display()
        ))
    })
}

fn load_train_val(
    dataset: &str,
    root: &Path,
    val_count: usize,
) -> Result<(Dataset, Dataset), CliError> {
    let full = load_split(dataset, root, Split::Train)?;
    data::split_train_val(full, val_count).map_err(rt)
}

/// Seed from the flag, else fresh OS entropy.
fn session_seed(flag: Option<u64>) -> u64 {
    flag.unwrap_or_else(|| rand::rng().random())
}

fn ot_mode(insecure: bool) -> OtMode {
    if insecure { OtMode::Insecure } else { OtMode::Real }
}

fn print_gate_stats(net: &Netlist) {
    let stats = net.count_gates();
    let free = stats.xor + stats.xnor + stats.not;
    kv("wires", net.wire_count);
    kv("client_inputs", net.client_inputs.len());
    kv("server_inputs", net.server_inputs.len());
    kv("outputs", net.output_wire_count());
    kv("and", stats.and);
    kv("or", stats.or);
    kv("xor", stats.xor);
    kv("xnor", stats.xnor);
    kv("not", stats.not);
    kv("non_xor", stats.non_xor());
    kv("free", free);
    kv("table_bytes", stats.non_xor() * 64);
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| rt(format!("writing {}: {e}", path.display())))
}

// --- train ---------------------------------------------------------------------

fn cmd_train(a: TrainArgs, ovr: &Overrides) -> Result<(), CliError> {
    let (base, scale) = a.arch.resolve(ovr)?;
    let dataset: String = a
        .dataset
        .or(ovr.get("dataset")?)
        .unwrap_or_else(|| "mnist".into());
    let out: PathBuf = a
        .out
        .or(ovr.get("out")?)
        .ok_or_else(|| usage("need --out <file> for the trained model"))?;
    let root = data_root(a.data_root, ovr)?;
    let val_count = a.val_count.or(ovr.get("val-count")?).unwrap_or(5_000);

    let mut config = TrainConfig::new(dataset.clone(), scale);
    if let Some(v) = a.epochs.or(ovr.get("epochs")?) {
        config.epochs = v;
    }
    if let Some(v) = a.batch_size.or(ovr.get("batch-size")?) {
        config.batch_size = v;
    }
    if let Some(v) = a.lr.or(ovr.get("lr")?) {
        config.learning_rate = v;
    }
    if let Some(v) = a.seed.or(ovr.get("seed")?) {
        config.seed = v;
    }
    if let Some(v) = a.optimizer.or(ovr.get::<String>("optimizer")?) {
        config.optimizer = OptimizerKind::from_str(&v).map_err(usage)?;
    }

    let (train_set, val_set) = load_train_val(&dataset, &root, val_count)?;
    let test_set = load_split(&dataset, &root, Split::Test)?;

    let mut log_file = match &a.log.clone().or(ovr.get("log")?) {
        Some(path) => Some(
            std::fs::File::create(path)
                .map_err(|e| rt(format!("creating {}: {e}", path.display())))?,
        ),
        None => None,
    };
    let outcome = train::train(&base, &config, &train_set, &val_set, |rec| {
        println!("{rec}");
        if let Some(f) = &mut log_file {
            let _ = writeln!(f, "{rec}");
        }
    })
    .map_err(rt)?;

    let test_acc = train::evaluate(&outcome.params, &test_set).map_err(rt)?;
    outcome.params.save(&out).map_err(rt)?;

    kv("arch", &outcome.params.arch.name);
    kv("scale", format!("{}/{}", scale.num(), scale.den()));
    kv("params", outcome.params.param_count());
    kv("best_epoch", outcome.best_epoch);
    kv("best_val_acc", format!("{:.4}", outcome.best_val_acc));
    kv("test_acc", format!("{test_acc:.4}"));
    kv("sparsity", format!("{:.4}", outcome.params.sparsity()));
    kv("model", out.display());
    Ok(())
}

// --- compile -------------------------------------------------------------------

fn cmd_compile(a: CompileArgs, ovr: &Overrides) -> Result<(), CliError> {
    let params_path: PathBuf = a
        .params
        .or(ovr.get("params")?)
        .ok_or_else(|| usage("need --params <model file>"))?;
    let out: PathBuf = a
        .out
        .or(ovr.get("out")?)
        .ok_or_else(|| usage("need --out <netlist file>"))?;
    let params = ModelParams::load(&params_path).map_err(rt)?;
    let net = compile_model(&params.arch, &params.masks()).map_err(rt)?;
    write_file(&out, &net.to_text())?;
    print_gate_stats(&net);
    kv("netlist", out.display());
    Ok(())
}

// --- gates ---------------------------------------------------------------------

fn cmd_gates(a: GatesArgs, ovr: &Overrides) -> Result<(), CliError> {
    let params_path: Option<PathBuf> = a.params.clone().or(ovr.get("params")?);
    let (concrete, masks) = match params_path {
        Some(path) => {
            let params = ModelParams::load(&path).map_err(rt)?;
            // When both a model and arch flags are given, they must agree —
            // gate counts for a different shape than the file holds would
            // mislead.
            if a.arch.arch.is_some() || a.arch.arch_file.is_some() {
                let (base, scale) = a.arch.resolve(ovr)?;
                let want = base.scaled(scale);
                if want != params.arch {
                    return Err(usage(format!(
                        "{} holds {} but flags select {}",
                        path.display(),
                        params.arch.name,
                        want.name
                    )));
                }
            }
            (params.arch.clone(), params.masks())
        }
        None => {
            let (base, scale) = a.arch.resolve(ovr)?;
            let concrete = base.scaled(scale);
            let dense = ModelParams::zeros(&concrete, scale).map_err(rt)?;
            let masks = dense
                .weights
                .iter()
                .map(|w| BinaryTensor::from_bools(w.shape(), &vec![true; w.len()]))
                .collect();
            (concrete, masks)
        }
    };
    let net = compile_model(&concrete, &masks).map_err(rt)?;
    let est = estimate_session(&concrete, &net, &masks);
    kv("arch", &concrete.name);
    print_gate_stats(&net);
    kv("offline_bytes", est.offline());
    kv("online_bytes", est.online());
    kv("session_bytes", est.total());
    Ok(())
}

// --- costs ---------------------------------------------------------------------

fn cmd_costs(a: CostsArgs, ovr: &Overrides) -> Result<(), CliError> {
    let shape: Shape = (
        a.channels.or(ovr.get("channels")?).unwrap_or(search::REFERENCE_SHAPE.0),
        a.height.or(ovr.get("height")?).unwrap_or(search::REFERENCE_SHAPE.1),
        a.width.or(ovr.get("width")?).unwrap_or(search::REFERENCE_SHAPE.2),
    );
    let raw = search::measure_op_costs(shape).map_err(rt)?;
    let table = CostTable::from_raw(&raw).map_err(rt)?;
    print!("{}", table.to_text());
    if let Some(path) = a.out.or(ovr.get("out")?) {
        write_file(&path, &table.to_text())?;
    }
    Ok(())
}

// --- search --------------------------------------------------------------------

fn cmd_search(a: SearchArgs, ovr: &Overrides) -> Result<(), CliError> {
    let dataset: String = a
        .dataset
        .or(ovr.get("dataset")?)
        .unwrap_or_else(|| "mnist".into());
    let root = data_root(a.data_root, ovr)?;
    let val_count = a.val_count.or(ovr.get("val-count")?).unwrap_or(5_000);
    let lambda = a.lambda.or(ovr.get("lambda")?).unwrap_or(0.0);

    let mut config = SearchConfig::new(lambda);
    match dataset.as_str() {
        "mnist" => {} // hidden FC(100) head, 10 classes: the defaults
        "cifar10" => config.hidden_units = None,
        other => return Err(usage(format!("unknown dataset {other:?} (mnist, cifar10)"))),
    }
    if let Some(v) = a.cells.or(ovr.get("cells")?) {
        config.cells = v;
    }
    if let Some(v) = a.budget_epochs.or(ovr.get("budget-epochs")?) {
        config.budget_epochs = v;
    }
    if let Some(v) = a.seed.or(ovr.get("seed")?) {
        config.seed = v;
    }
    if let Some(v) = a.train_limit.or(ovr.get("train-limit")?) {
        config.train_limit = v;
    }
    if let Some(v) = a.val_limit.or(ovr.get("val-limit")?) {
        config.val_limit = v;
    }
    if let Some(v) = a.channels.or(ovr.get("channels")?) {
        config.channels = v;
    }

    let costs = match a.costs_file.clone().or(ovr.get("costs-file")?) {
        Some(path) => {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| rt(format!("cannot read {}: {e}", path.display())))?;
            CostTable::from_text(&text).map_err(rt)?
        }
        None => {
            let raw = search::measure_op_costs(search::REFERENCE_SHAPE).map_err(rt)?;
            let table = CostTable::from_raw(&raw).map_err(rt)?;
            print!("{}", table.to_text());
            table
        }
    };

    let (train_set, val_set) = load_train_val(&dataset, &root, val_count)?;
    let result = search::search(&train_set, &val_set, &config, &costs, |rec| {
        println!("{rec}");
    })
    .map_err(rt)?;

    let sel: Vec<&str> = result.selection.iter().map(|o| o.name()).collect();
    kv("lambda", format!("{lambda:.2}"));
    kv("selection", sel.join(","));
    kv("total_gamma", format!("{:.2}", result.total_gamma));
    kv("budget_exhausted", result.budget_exhausted);
    kv("arch", &result.arch.name);
    let base_params = ModelParams::zeros(&result.arch, Scale::ONE)
        .map_err(rt)?
        .param_count();
    kv("params", base_params);

    if let Some(path) = a.out.clone().or(ovr.get("out")?) {
        write_file(&path, &result.arch.to_text())?;
        kv("arch_file", path.display());
    }
    if let Some(path) = a.report.clone().or(ovr.get("report")?) {
        write_file(&path, &search_report(&result, &costs, &config))?;
        kv("report_file", path.display());
    }
    Ok(())
}

fn search_report(
    result: &search::SearchResult,
    costs: &CostTable,
    config: &SearchConfig,
) -> String {
    let mut out = String::new();
    let sel: Vec<&str> = result.selection.iter().map(|o| o.name()).collect();
    out.push_str(&format!("lambda\t{:.2}\n", result.lambda));
    out.push_str(&format!("seed\t{}\n", config.seed));
    out.push_str(&format!("cells\t{}\n", config.cells));
    out.push_str(&format!("selection\t{}\n", sel.join(",")));
    out.push_str(&format!("total_gamma\t{:.2}\n", result.total_gamma));
    out.push_str(&format!("budget_exhausted\t{}\n", result.budget_exhausted));
    out.push_str(&format!("arch\t{}\n", result.arch.name));
    out.push_str("\n[costs]\n");
    out.push_str(&costs.to_text());
    out.push_str("\n[scores]\nposition");
    for op in search::CANDIDATES {
        out.push_str(&format!("\t{op}"));
    }
    out.push('\n');
    for (i, row) in result.scores.iter().enumerate() {
        out.push_str(&format!("{i}"));
        for s in row {
            out.push_str(&format!("\t{s:.4}"));
        }
        out.push('\n');
    }
    out.push_str("\n[log]\n");
    for rec in &result.log {
        out.push_str(&format!("{rec}\n"));
    }
    out.push_str("\n[architecture]\n");
    out.push_str(&result.arch.to_text());
    out
}

// --- serve ---------------------------------------------------------------------

fn cmd_serve(a: ServeArgs, ovr: &Overrides) -> Result<(), CliError> {
    let model_path: PathBuf = a
        .model
        .or(ovr.get("model")?)
        .ok_or_else(|| usage("need --model <trained model file>"))?;
    let listen: String = a
        .listen
        .or(ovr.get("listen")?)
        .ok_or_else(|| usage("need --listen <addr:port>"))?;
    let insecure = a.insecure_ot || ovr.get_flag("insecure-ot")?;
    let once = a.once || ovr.get_flag("once")?;
    let seed = a.seed.or(ovr.get("seed")?);

    let params = ModelParams::load(&model_path).map_err(rt)?;
    params.validate().map_err(rt)?;
    let listener = TcpListener::bind(&listen)
        .map_err(|e| rt(format!("cannot listen on {listen}: {e}")))?;
    let local = listener.local_addr().map_err(rt)?;
    kv("listening", local);
    kv("arch", &params.arch.name);
    kv("nonzero_weights", params.nonzero_count());
    std::io::stdout().flush().ok();

    for session in 0u64.. {
        let (mut stream, peer) = listener.accept().map_err(rt)?;
        stream.set_nodelay(true).ok();
        let options = SessionOptions {
            ot_mode: ot_mode(insecure),
            // Derive per-session seeds when one was pinned; else fresh
            // entropy every time.
            seed: seed.map_or_else(|| session_seed(None), |s| s.wrapping_add(session)),
        };
        match protocol::run_server(&mut stream, &params, &options) {
            Ok(report) => {
                println!(
                    "session\t{session}\tpeer\t{peer}\tbytes\t{}\tevaluate_ms\t{:.1}",
                    report.measured.total(),
                    report.evaluate_time.as_secs_f64() * 1e3
                );
                std::io::stdout().flush().ok();
                if once {
                    return Ok(());
                }
            }
            Err(e) => {
                if once {
                    return Err(rt(format!("session {session} failed: {e}")));
                }
                eprintln!("session {session} failed: {e}");
            }
        }
    }
    unreachable!("accept loop only ends by returning");
}

// --- infer ---------------------------------------------------------------------

fn cmd_infer(a: InferArgs, ovr: &Overrides) -> Result<(), CliError> {
    let image_path: PathBuf = a
        .image
        .clone()
        .or(ovr.get("image")?)
        .ok_or_else(|| usage("need --image <IDX file>"))?;
    let connect: String = a
        .connect
        .clone()
        .or(ovr.get("connect")?)
        .ok_or_else(|| usage("need --connect <addr:port>"))?;
    let index = a.index.or(ovr.get("index")?).unwrap_or(0);
    let insecure = a.insecure_ot || ovr.get_flag("insecure-ot")?;
    let (base, scale) = a.arch.resolve(ovr)?;
    let concrete = base.scaled(scale);

    let (pixels, count, rows, cols) = data::load_idx_images(&image_path).map_err(rt)?;
    if index >= count {
        return Err(usage(format!("--index {index} out of range: file holds {count} images")));
    }
    let (c, h, w) = concrete.input;
    if rows * cols != c * h * w {
        return Err(usage(format!(
            "image has {} pixels but {} expects {}x{}x{} = {}",
            rows * cols,
            concrete.name,
            c,
            h,
            w,
            c * h * w
        )));
    }
    let image = &pixels[index * rows * cols..(index + 1) * rows * cols];
    let bits: Vec<bool> = image.iter().map(|&p| data::threshold_bit(p)).collect();

    let options = SessionOptions {
        ot_mode: ot_mode(insecure),
        seed: session_seed(a.seed.or(ovr.get("seed")?)),
    };
    let mut stream = TcpStream::connect(&connect)
        .map_err(|e| rt(format!("cannot connect to {connect}: {e}")))?;
    stream.set_nodelay(true).ok();
    let report = protocol::run_client(&mut stream, &concrete, scale, &bits, &options)
        .map_err(|e| match e {
            ProtocolError::RemoteAbort { .. } | ProtocolError::LocalAbort { .. } => {
                rt(format!("ABORT: {e}"))
            }
            other => rt(other),
        })?;

    let scores: Vec<String> = report.scores.iter().map(|s| s.to_string()).collect();
    kv("class", report.class);
    kv("scores", scores.join(","));
    kv("offline_bytes", report.measured.offline());
    kv("online_bytes", report.measured.online());
    kv("total_bytes", report.measured.total());
    kv("estimate_bytes", report.estimate.total());
    kv("estimate_match", report.measured.total() == report.estimate.total());
    kv("offline_ms", format!("{:.1}", report.offline_time.as_secs_f64() * 1e3));
    kv("online_ms", format!("{:.1}", report.online_time.as_secs_f64() * 1e3));
    kv("non_xor_gates", report.non_xor_gates);
    Ok(())
}

// --- bench ---------------------------------------------------------------------

fn cmd_bench(a: BenchArgs, ovr: &Overrides) -> Result<(), CliError> {
    let seed = a.seed.or(ovr.get("seed")?).unwrap_or(1);
    let insecure = a.insecure_ot || ovr.get_flag("insecure-ot")?;
    let params_path: Option<PathBuf> = a.params.clone().or(ovr.get("params")?);
    let (params, scale) = match params_path {
        Some(path) => {
            let p = ModelParams::load(&path).map_err(rt)?;
            let s = p.scale;
            (p, s)
        }
        None => {
            let (base, scale) = a.arch.resolve(ovr)?;
            let sparsity = a.sparsity.or(ovr.get("sparsity")?).unwrap_or(0.5);
            if !(0.0..=1.0).contains(&sparsity) {
                return Err(usage("--sparsity must be in [0, 1]"));
            }
            (synthetic_params(&base, scale, sparsity, seed).map_err(rt)?, scale)
        }
    };

    let (c, h, w) = params.arch.input;
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xB1E55);
    let bits: Vec<bool> = (0..c * h * w).map(|_| rng.random()).collect();

    let listener = TcpListener::bind("127.0.0.1:0").map_err(rt)?;
    let addr = listener.local_addr().map_err(rt)?;
    let server_params = params.clone();
    let server_options = SessionOptions {
        ot_mode: ot_mode(insecure),
        seed: seed.wrapping_add(0x5EED),
    };
    let server = thread::spawn(move || -> Result<protocol::ServerReport, ProtocolError> {
        let (mut stream, _) = listener.accept()?;
        stream.set_nodelay(true).ok();
        protocol::run_server(&mut stream, &server_params, &server_options)
    });

    let client_options = SessionOptions {
        ot_mode: ot_mode(insecure),
        seed,
    };
    let mut stream = TcpStream::connect(addr).map_err(rt)?;
    stream.set_nodelay(true).ok();
    let report =
        protocol::run_client(&mut stream, &params.arch, scale, &bits, &client_options)
            .map_err(rt)?;
    server
        .join()
        .map_err(|_| rt("server thread panicked"))?
        .map_err(rt)?;

    let offline = report.offline_time.as_secs_f64();
    let online = report.online_time.as_secs_f64();
    let mb = report.measured.total() as f64 / (1024.0 * 1024.0);
    println!("offline_s\tonline_s\ttotal_s\tcommunication_mb");
    println!("{offline:.3}\t{online:.3}\t{:.3}\t{mb:.2}", offline + online);
    kv("arch", &params.arch.name);
    kv("scale", format!("{}/{}", scale.num(), scale.den()));
    kv("params", params.param_count());
    kv("nonzero_weights", params.nonzero_count());
    kv("non_xor_gates", report.non_xor_gates);
    kv("measured_bytes", report.measured.total());
    kv("estimate_match", report.measured.total() == report.estimate.total());
    Ok(())
}

/// Random ternary weights hitting the target zero fraction in expectation.
/// Relative garbling cost depends only on how many weights are nonzero, so
/// this benches like a trained model of the same sparsity.
fn synthetic_params(
    base: &Architecture,
    scale: Scale,
    sparsity: f64,
    seed: u64,
) -> Result<ModelParams, garnet_core::model::ModelError> {
    let concrete = base.scaled(scale);
    let mut params = ModelParams::zeros(&concrete, scale)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for tensor in &mut params.weights {
        for i in 0..tensor.len() {
            let v = if rng.random::<f64>() < sparsity {
                0
            } else if rng.random::<bool>() {
                1
            } else {
                -1
            };
            tensor.set(i, v);
        }
    }
    Ok(params)
}
