use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use matlora::analysis::{
    boundary_grid, param_counts, reduction_report, stability_harness, write_grid_csv, OverheadAssumption,
    ParamCount, ReductionReport, StabilityConfig, StabilitySummary,
};
use matlora::data::{gen_two_moons, load_sequence, save_sequence, write_domain_csv, DomainSequence, TwoMoonsConfig};
use matlora::model::{CoreVariant, Predictor};
use matlora::training::{evaluate, train, Method, Strategy, TrainConfig, TrainReport};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::{
    BoundaryArgs, Cli, CliError, Command, EvalArgs, GenDataArgs, MethodSpec, ParamsArgs, ReproduceArgs,
    StabilityArgs, TrainOverrides,
};

pub const RUN_CONFIG_FILE: &str = "run_config.json";

type Res<T> = Result<T, CliError>;

/// Everything that determined a command's outputs, written beside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub output_dir: PathBuf,
    pub seed: Option<u64>,
    /// Flags as given.
    pub args: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<TwoMoonsConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stability: Option<StabilityConfig>,
}

impl RunConfig {
    fn new(command: &str, out: &Path, args: &impl Serialize) -> Res<Self> {
        Ok(RunConfig {
            command: command.into(),
            output_dir: out.to_path_buf(),
            seed: None,
            args: serde_json::to_value(args).context("serializing flags")?,
            data: None,
            train: None,
            stability: None,
        })
    }

    fn write(&self, out: &Path) -> Res<()> {
        write_json(&out.join(RUN_CONFIG_FILE), self)
    }
}

fn prepare_dir(out: &Path) -> Res<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Res<()> {
    let text = serde_json::to_string_pretty(value).context("serializing JSON")?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn create(path: &Path) -> Res<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn require_file(path: &Path, what: &str) -> Res<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} '{}' does not exist", path.display())))
    }
}

fn load_data(path: &Path) -> Res<DomainSequence> {
    require_file(path, "sequence file")?;
    load_sequence(path).map_err(|e| CliError::Runtime(anyhow::Error::new(e).context(format!("loading {}", path.display()))))
}

fn load_checkpoint(path: &Path) -> Res<Checkpoint> {
    require_file(path, "checkpoint")?;
    Ok(Checkpoint::load(path)?)
}

pub fn run(cli: &Cli) -> Res<()> {
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenData(a) => gen_data(out, a).map(|_| ()),
        Command::Train(a) => {
            let spec = parse_method(&a.method, a.core.as_deref())?;
            let cfg = resolve_train_config(&a.train, spec.core)?;
            let seq = load_data(&a.data)?;
            let (ck, report) = train_into(out, &seq, spec, &cfg, a)?;
            eprintln!(
                "trained {} in {:.1}s; train accuracy {}",
                ck.method,
                report.wall_clock_seconds,
                fmt_accs(&report.train_accuracy)
            );
            Ok(())
        }
        Command::Eval(a) => {
            let table = eval_cmd(out, a)?;
            print!("{}", table.render());
            Ok(())
        }
        Command::Stability(a) => {
            let summary = stability_cmd(out, a, None)?;
            println!("{}", serde_json::to_string_pretty(&summary).context("serializing summary")?);
            Ok(())
        }
        Command::Params(a) => {
            let rep = params_cmd(out, a)?;
            println!("{}", serde_json::to_string_pretty(&rep).context("serializing report")?);
            Ok(())
        }
        Command::Boundary(a) => {
            let files = boundary_cmd(out, a)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::Reproduce(a) => {
            let results = reproduce(out, a)?;
            print!("{}", results.render());
            Ok(())
        }
    }
}

pub(crate) fn gen_data(out: &Path, a: &GenDataArgs) -> Res<DomainSequence> {
    if a.samples == 0 || !a.samples.is_multiple_of(2) {
        return Err(CliError::Usage(format!("--samples must be even and positive, got {}", a.samples)));
    }
    if a.train_count == 0 || a.train_count > a.domains {
        return Err(CliError::Usage(format!(
            "--train-count must be in 1..={}, got {}",
            a.domains, a.train_count
        )));
    }
    let gc = TwoMoonsConfig {
        num_domains: a.domains,
        samples_per_domain: a.samples,
        rotation_deg: a.rotation,
        noise_sigma: a.noise,
        train_count: a.train_count,
    };
    let seq = gen_two_moons(&gc, a.seed)?;
    prepare_dir(out)?;
    save_sequence(&seq, out.join("sequence.json"))?;
    if a.csv {
        for (i, d) in seq.domains.iter().enumerate() {
            let mut w = create(&out.join(format!("domain_{i:02}.csv")))?;
            write_domain_csv(d, &mut w)?;
            w.flush()?;
        }
    }
    let mut rc = RunConfig::new("gen-data", out, a)?;
    rc.seed = Some(a.seed);
    rc.data = Some(gc);
    rc.write(out)?;
    Ok(seq)
}

fn parse_method(method: &str, core: Option<&str>) -> Res<MethodSpec> {
    let mut spec: MethodSpec = method.parse().map_err(CliError::Usage)?;
    if let Some(c) = core {
        let v: CoreVariant = c.parse().map_err(|e: matlora::Error| CliError::Usage(e.to_string()))?;
        if !matches!(spec.method, Method::Matlora | Method::Distill) {
            return Err(CliError::Usage(format!("--core only applies to matlora and distill, not {}", spec.method)));
        }
        spec.core = Some(v);
    }
    Ok(spec)
}

fn resolve_train_config(o: &TrainOverrides, core: Option<CoreVariant>) -> Res<TrainConfig> {
    let mut cfg = match &o.config {
        Some(path) => {
            require_file(path, "config file")?;
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    macro_rules! apply {
        ($($field:ident => $target:ident),*) => {
            $(if let Some(v) = o.$field.clone() { cfg.$target = v; })*
        };
    }
    apply!(seed => seed, epochs => epochs, lr => learning_rate, optimizer => optimizer,
        batch_size => batch_size, r => r, r_prime => r_prime, width => width,
        pretrain_epochs => pretrain_epochs, layers => adapted_layers);
    if let Some(c) = core {
        cfg.core_variant = c;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_into(
    out: &Path,
    seq: &DomainSequence,
    spec: MethodSpec,
    cfg: &TrainConfig,
    args: &impl Serialize,
) -> Res<(Checkpoint, TrainReport)> {
    let (model, report) = train(seq, cfg, spec.method)?;
    prepare_dir(out)?;
    let ck = Checkpoint::new(spec.to_string(), cfg.clone(), model);
    ck.save(&out.join("checkpoint.json"))?;
    fs::write(out.join("report.json"), report.to_json()? + "\n")?;
    let mut w = create(&out.join("losses.csv"))?;
    report.write_loss_csv(&mut w)?;
    w.flush()?;
    let mut rc = RunConfig::new("train", out, args)?;
    rc.seed = Some(cfg.seed);
    rc.data = seq.generator;
    rc.train = Some(cfg.clone());
    rc.write(out)?;
    Ok((ck, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub domain: usize,
    pub timestamp: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub method: String,
    pub rows: Vec<EvalRow>,
    /// Arithmetic mean of the rows.
    pub mean: f64,
}

impl EvalTable {
    fn render(&self) -> String {
        let mut s = format!("{}\n{:>6} {:>9} {:>9}\n", self.method, "domain", "time", "accuracy");
        for r in &self.rows {
            s += &format!("{:>6} {:>9} {:>9.4}\n", r.domain, r.timestamp, r.accuracy);
        }
        s + &format!("{:>6} {:>9} {:>9.4}\n", "mean", "", self.mean)
    }
}

fn check_compatible(model: &impl Predictor, seq: &DomainSequence) -> Res<()> {
    if model.input_dim() != seq.input_dim() || model.num_classes() != seq.num_classes {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "checkpoint expects {} inputs and {} classes, sequence has {} and {}",
            model.input_dim(),
            model.num_classes(),
            seq.input_dim(),
            seq.num_classes
        )));
    }
    Ok(())
}

fn eval_table(ck: &Checkpoint, seq: &DomainSequence, indices: &[usize]) -> Res<EvalTable> {
    check_compatible(&ck.model, seq)?;
    let indices = if indices.is_empty() { seq.test_indices() } else { indices.to_vec() };
    let accs = evaluate(&ck.model, seq, &indices)?;
    let rows: Vec<EvalRow> = indices
        .iter()
        .zip(&accs)
        .map(|(&i, &a)| EvalRow {
            domain: i,
            timestamp: seq.domains[i].timestamp,
            accuracy: a,
        })
        .collect();
    let mean = if accs.is_empty() { f64::NAN } else { accs.iter().sum::<f64>() / accs.len() as f64 };
    Ok(EvalTable {
        method: ck.method.clone(),
        rows,
        mean,
    })
}

pub(crate) fn eval_cmd(out: &Path, a: &EvalArgs) -> Res<EvalTable> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let seq = load_data(&a.data)?;
    let table = eval_table(&ck, &seq, &a.domains)?;
    prepare_dir(out)?;
    write_json(&out.join("eval.json"), &table)?;
    let mut rc = RunConfig::new("eval", out, a)?;
    rc.seed = Some(ck.seed);
    rc.write(out)?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub eta: f64,
    pub alpha_b: f64,
    pub eps_b: f64,
    pub alpha_a: f64,
    pub eps_a: f64,
    pub summary: StabilitySummary,
}

fn stability_cmd(out: &Path, a: &StabilityArgs, seq: Option<&DomainSequence>) -> Res<StabilityReport> {
    let loaded;
    let seq = match seq {
        Some(s) => s,
        None => {
            loaded = load_data(&a.data)?;
            &loaded
        }
    };
    let d = StabilityConfig::default();
    let cfg = StabilityConfig {
        eta: a.eta.unwrap_or(d.eta),
        steps_per_domain: a.steps_per_domain.unwrap_or(d.steps_per_domain),
        seed: a.seed.unwrap_or(d.seed),
        init_epochs: a.init_epochs.unwrap_or(d.init_epochs),
        pretrain_epochs: a.pretrain_epochs.unwrap_or(d.pretrain_epochs),
        ..d
    };
    let trace = stability_harness(seq, &cfg)?;
    prepare_dir(out)?;
    let mut w = create(&out.join("stability_trace.csv"))?;
    trace.write_csv(&mut w)?;
    w.flush()?;
    let report = StabilityReport {
        eta: trace.eta,
        alpha_b: trace.alpha_b,
        eps_b: trace.eps_b,
        alpha_a: trace.alpha_a,
        eps_a: trace.eps_a,
        summary: trace.summary(),
    };
    write_json(&out.join("stability_summary.json"), &report)?;
    let mut rc = RunConfig::new("stability", out, a)?;
    rc.seed = Some(cfg.seed);
    rc.data = seq.generator;
    rc.stability = Some(cfg);
    rc.write(out)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsReport {
    pub counts: ParamCount,
    /// One entry per overhead assumption, each with its formula spelled out.
    pub reductions: Vec<ReductionReport>,
}

pub(crate) fn params_report(a: &ParamsArgs) -> Res<ParamsReport> {
    if [a.d, a.k, a.r, a.r_prime, a.domains].contains(&0) {
        return Err(CliError::Usage("dimensions, ranks and domain count must be positive".into()));
    }
    let core: CoreVariant = a.core.parse().map_err(|e: matlora::Error| CliError::Usage(e.to_string()))?;
    let counts = param_counts(a.d, a.k, a.r, a.r_prime, a.domains, core);
    let reductions = [
        OverheadAssumption::LstmOverParams { hidden: a.lstm_hidden },
        OverheadAssumption::Quadratic,
    ]
    .into_iter()
    .map(|asm| reduction_report(a.p_full, asm, counts.ours))
    .collect::<matlora::Result<Vec<_>>>()?;
    Ok(ParamsReport { counts, reductions })
}

fn params_cmd(out: &Path, a: &ParamsArgs) -> Res<ParamsReport> {
    let rep = params_report(a)?;
    prepare_dir(out)?;
    write_json(&out.join("params.json"), &rep)?;
    RunConfig::new("params", out, a)?.write(out)?;
    Ok(rep)
}

fn grid_name(t: f64) -> String {
    format!("boundary_t{t}.csv")
}

fn boundary_cmd(out: &Path, a: &BoundaryArgs) -> Res<Vec<PathBuf>> {
    if a.resolution == 0 {
        return Err(CliError::Usage("--resolution must be positive".into()));
    }
    if a.times.iter().any(|t| !t.is_finite()) {
        return Err(CliError::Usage("--times must be finite".into()));
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    prepare_dir(out)?;
    let mut files = Vec::new();
    for &t in &a.times {
        let grid = boundary_grid(&ck.model, t, (a.x_min, a.x_max), (a.y_min, a.y_max), a.resolution)?;
        let path = out.join(grid_name(t));
        let mut w = create(&path)?;
        write_grid_csv(&grid, &mut w)?;
        w.flush()?;
        files.push(path);
    }
    let mut rc = RunConfig::new("boundary", out, a)?;
    rc.seed = Some(ck.seed);
    rc.write(out)?;
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub test: Vec<EvalRow>,
    pub test_mean: f64,
    pub train_mean: f64,
    pub trainable_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub seed: u64,
    pub methods: Vec<MethodResult>,
    pub stability: StabilityReport,
    pub params: ParamsReport,
}

impl Results {
    pub fn render(&self) -> String {
        let times: Vec<String> = self
            .methods
            .first()
            .map(|m| m.test.iter().map(|r| format!("t={}", r.timestamp)).collect())
            .unwrap_or_default();
        let mut s = format!("| method | train | {} | test mean | params |\n", times.join(" | "));
        s += &format!("|---|---|{}---|---|\n", "---|".repeat(times.len()));
        for m in &self.methods {
            let cells: Vec<String> = m.test.iter().map(|r| format!("{:.4}", r.accuracy)).collect();
            s += &format!(
                "| {} | {:.4} | {} | {:.4} | {} |\n",
                m.method,
                m.train_mean,
                cells.join(" | "),
                m.test_mean,
                m.trainable_params
            );
        }
        let st = &self.stability.summary;
        s += &format!(
            "\nstability: {} steps, max expansion residual ratio {:.2e}, leak violations {}, recursion misses B/A {}/{}\n",
            st.steps, st.max_expansion_ratio, st.leak_violations, st.recursion_failures_b, st.recursion_failures_a
        );
        s
    }
}

/// Methods run by `reproduce`, in table order.
pub fn reproduce_methods() -> Vec<MethodSpec> {
    let mut v: Vec<MethodSpec> = CoreVariant::ALL
        .iter()
        .map(|&c| MethodSpec {
            method: Method::Matlora,
            core: Some(c),
        })
        .collect();
    v.extend(Strategy::ALL.iter().map(|&s| MethodSpec {
        method: Method::Baseline(s),
        core: None,
    }));
    v.push(MethodSpec {
        method: Method::Distill,
        core: Some(CoreVariant::LinDyn),
    });
    v
}

fn reproduce(out: &Path, a: &ReproduceArgs) -> Res<Results> {
    let started = Instant::now();
    let gen = GenDataArgs {
        seed: a.seed,
        samples: a.samples,
        noise: a.noise,
        ..GenDataArgs::default()
    };
    let seq = gen_data(&out.join("data"), &gen)?;
    let overrides = TrainOverrides {
        seed: Some(a.seed),
        epochs: a.epochs,
        pretrain_epochs: a.pretrain_epochs,
        ..TrainOverrides::default()
    };
    let mut methods = Vec::new();
    let mut lindyn_ck = None;
    let mut base_cfg = None;
    for spec in reproduce_methods() {
        let cfg = resolve_train_config(&overrides, spec.core)?;
        let dir = out.join("train").join(spec.to_string().replace(':', "_"));
        let (ck, report) = train_into(&dir, &seq, spec, &cfg, &overrides)?;
        let table = eval_table(&ck, &seq, &[])?;
        write_json(&dir.join("eval.json"), &table)?;
        eprintln!(
            "{:<16} test mean {:.4}  ({:.1}s)",
            ck.method, table.mean, report.wall_clock_seconds
        );
        methods.push(MethodResult {
            method: ck.method.clone(),
            test_mean: table.mean,
            test: table.rows,
            train_mean: report.train_accuracy.iter().sum::<f64>() / report.train_accuracy.len() as f64,
            trainable_params: report.trainable_params,
        });
        if spec.method == Method::Matlora && spec.core == Some(CoreVariant::LinDyn) {
            lindyn_ck = Some(dir.join("checkpoint.json"));
        }
        base_cfg.get_or_insert(cfg);
    }
    let cfg = base_cfg.expect("at least one method");

    let st_args = StabilityArgs {
        data: PathBuf::from("data/sequence.json"),
        eta: None,
        steps_per_domain: None,
        seed: Some(a.seed),
        init_epochs: None,
        pretrain_epochs: a.pretrain_epochs,
    };
    let stability = stability_cmd(&out.join("stability"), &st_args, Some(&seq))?;

    let p_args = ParamsArgs {
        d: cfg.width as u64,
        k: cfg.width as u64,
        r: cfg.r as u64,
        r_prime: cfg.r_prime as u64,
        domains: seq.train_count as u64,
        core: cfg.core_variant.name().into(),
        ..ParamsArgs::default()
    };
    let params = params_cmd(&out.join("params"), &p_args)?;

    if let Some(ck) = lindyn_ck {
        let b_args = BoundaryArgs {
            checkpoint: ck,
            times: seq.test_indices().iter().map(|&i| seq.domains[i].timestamp).collect(),
            resolution: a.resolution,
            x_min: -2.5,
            x_max: 3.5,
            y_min: -2.5,
            y_max: 3.0,
        };
        boundary_cmd(&out.join("boundary"), &b_args)?;
    }

    let results = Results {
        seed: a.seed,
        methods,
        stability,
        params,
    };
    write_json(&out.join("results.json"), &results)?;
    fs::write(out.join("results.md"), results.render())?;
    let mut rc = RunConfig::new("reproduce", out, a)?;
    rc.seed = Some(a.seed);
    rc.data = seq.generator;
    rc.train = Some(cfg);
    rc.write(out)?;
    eprintln!("reproduce finished in {:.1}s", started.elapsed().as_secs_f64());
    Ok(results)
}

fn fmt_accs(accs: &[f64]) -> String {
    let cells: Vec<String> = accs.iter().map(|a| format!("{a:.3}")).collect();
    format!("[{}]", cells.join(", "))
}
