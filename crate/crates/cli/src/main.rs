use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use glitchbench::assembler::{assemble, load_image, store_image, Program};
use glitchbench::campaign::{
    inject, run_campaign_on, Baseline, CampaignPlan, CampaignReport, CycleRange, OffsetGrid, OutcomeRecord,
};
use glitchbench::glitch::{CorruptionPolicy, GlitchSpec, IllegalPolicy};
use glitchbench::isa::{disassemble, IClass};
use glitchbench::machine::run_golden;
use glitchbench::pipeline::{run_pipeline, PipelineError, PipelineRun};
use glitchbench::rat::{build_dynamic_rat, build_static_rat, dynamic_rat_jsonl, static_rat_csv, RatError};
use glitchbench::timing::{load_timing, TimingModel};
use glitchbench::workloads::{microbench, BnnWorkload, BNN_SEED};

const DEFAULT_MAX_CYCLES: u64 = 10_000_000;

#[derive(Parser, Debug)]
#[command(name = "glitchbench", version, about = "Clock-glitch fault-injection lab for a timing-annotated RV32IM pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct TimingArgs {
    /// Timing model (JSON); the built-in reference model when absent.
    #[arg(long, env = "GLITCHBENCH_TIMING", global = true)]
    timing: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Assemble a source file into an image.
    Asm {
        source: PathBuf,
        /// Output manifest path (defaults to SOURCE with an .img extension).
        #[arg(short = 'o')]
        output: Option<PathBuf>,
    },
    /// Run a program glitch-free on the pipeline and cross-check it against the ISS.
    Run {
        /// Image manifest or assembly source.
        program: PathBuf,
        #[command(flatten)]
        timing: TimingArgs,
        #[arg(long, default_value_t = DEFAULT_MAX_CYCLES)]
        max_cycles: u64,
        /// Write the cycle trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Emit the static risk table (CSV) and, for a program, its dynamic windows (JSON lines).
    Rat {
        program: Option<PathBuf>,
        #[command(flatten)]
        timing: TimingArgs,
        #[arg(long, default_value_t = DEFAULT_MAX_CYCLES)]
        max_cycles: u64,
        /// Print the dynamic table instead of the static one.
        #[arg(long)]
        dynamic: bool,
        /// Directory to write rat_static.csv and rat_dynamic.jsonl into.
        #[arg(short = 'o')]
        output: Option<PathBuf>,
    },
    /// Inject one glitch and print the classified outcome.
    Inject {
        program: PathBuf,
        #[command(flatten)]
        timing: TimingArgs,
        #[arg(long)]
        cycle: u64,
        /// Capture-edge offset in ns after the launching edge.
        #[arg(long)]
        offset: f64,
        #[arg(long, value_enum, default_value_t = PolicyArg::StaleBits)]
        policy: PolicyArg,
        #[arg(long, value_enum, default_value_t = IllegalArg::NopReplace)]
        illegal_policy: IllegalArg,
        #[arg(long, default_value_t = DEFAULT_MAX_CYCLES)]
        max_cycles: u64,
        #[arg(long)]
        json: bool,
    },
    /// Sweep a glitch grid and write report.json and records.csv.
    Campaign {
        /// Image or source; may be omitted when the plan names the program.
        program: Option<PathBuf>,
        #[command(flatten)]
        timing: TimingArgs,
        /// Plan file (JSON); inline flags override its fields.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Half-open cycle range lo:hi (defaults to the whole run).
        #[arg(long)]
        cycles: Option<String>,
        /// Offset grid lo:hi:step in ns, hi inclusive.
        #[arg(long)]
        offset_range: Option<String>,
        #[arg(long, value_enum, value_delimiter = ',')]
        policy: Vec<PolicyArg>,
        #[arg(long, value_enum, value_delimiter = ',')]
        illegal_policy: Vec<IllegalArg>,
        #[arg(long)]
        max_runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_cycles: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Output directory.
        #[arg(short = 'o', default_value = "out")]
        output: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Render a campaign report.
    Report {
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Md)]
        format: ReportFormat,
        #[arg(short = 'o')]
        output: Option<PathBuf>,
    },
    /// Write a shipped workload (source, image and metadata).
    Workload {
        #[arg(value_enum)]
        kind: WorkloadKind,
        /// Instruction class for a microbenchmark.
        #[arg(long)]
        iclass: Option<String>,
        /// Fixture input to bake into the BNN image.
        #[arg(long, default_value_t = 0)]
        input: usize,
        #[arg(long, default_value_t = BNN_SEED)]
        seed: u64,
        #[arg(short = 'o', default_value = ".")]
        output: PathBuf,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
#[value(rename_all = "SCREAMING_SNAKE_CASE")]
enum PolicyArg {
    StaleBits,
    StaleRegister,
    ZeroLateBits,
}

impl From<PolicyArg> for CorruptionPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::StaleBits => CorruptionPolicy::StaleBits,
            PolicyArg::StaleRegister => CorruptionPolicy::StaleRegister,
            PolicyArg::ZeroLateBits => CorruptionPolicy::ZeroLateBits,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
#[value(rename_all = "SCREAMING_SNAKE_CASE")]
enum IllegalArg {
    NopReplace,
    Trap,
}

impl From<IllegalArg> for IllegalPolicy {
    fn from(p: IllegalArg) -> Self {
        match p {
            IllegalArg::NopReplace => IllegalPolicy::NopReplace,
            IllegalArg::Trap => IllegalPolicy::Trap,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ReportFormat {
    Md,
    Csv,
    Records,
    Json,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum WorkloadKind {
    Bnn,
    Micro,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Input(String),
    Run(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Input(_) => 2,
            CliError::Run(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Input(m) | CliError::Run(m) => m,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn input_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| input_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| input_err(path, e))
}

fn is_source(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("s" | "S" | "asm"))
}

fn load_program(path: &Path) -> Result<Program> {
    if is_source(path) {
        let src = fs::read_to_string(path).map_err(|e| input_err(path, e))?;
        assemble(&src).map_err(|e| input_err(path, e))
    } else {
        load_image(path).map_err(|e| input_err(path, e))
    }
}

fn load_timing_model(args: &TimingArgs) -> Result<TimingModel> {
    match &args.timing {
        Some(p) => load_timing(p).map_err(|e| input_err(p, e)),
        None => Ok(TimingModel::reference()),
    }
}

fn parse_range(text: &str) -> Result<CycleRange> {
    let bad = || CliError::Usage(format!("invalid --cycles `{text}` (expected lo:hi)"));
    let (lo, hi) = text.split_once(':').ok_or_else(bad)?;
    Ok(CycleRange {
        lo: lo.trim().parse().map_err(|_| bad())?,
        hi: hi.trim().parse().map_err(|_| bad())?,
    })
}

fn parse_grid(text: &str) -> Result<OffsetGrid> {
    let bad = || CliError::Usage(format!("invalid --offset-range `{text}` (expected lo:hi:step)"));
    let parts: Vec<f64> = text
        .split(':')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad())?;
    let [lo_ns, hi_ns, step_ns] = parts[..] else {
        return Err(bad());
    };
    Ok(OffsetGrid { lo_ns, hi_ns, step_ns })
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn cmd_asm(source: &Path, output: Option<PathBuf>) -> Result<()> {
    let text = fs::read_to_string(source).map_err(|e| input_err(source, e))?;
    let program = assemble(&text).map_err(|e| input_err(source, e))?;
    let out = output.unwrap_or_else(|| source.with_extension("img"));
    store_image(&program, &out).map_err(|e| input_err(&out, e))?;
    let bytes: usize = program.segments.iter().map(|s| s.bytes.len()).sum();
    println!(
        "wrote {} ({} segments, {bytes} bytes, entry 0x{:08x})",
        out.display(),
        program.segments.len(),
        program.entry
    );
    Ok(())
}

/// First retirement where the pipeline and the ISS disagree.
fn first_mismatch(program: &Program, run: &PipelineRun, max_steps: u64) -> Option<String> {
    let golden = run_golden(program, max_steps);
    let pipe: Vec<u32> = run.retirements().map(|r| r.pc).collect();
    for (i, ev) in golden.events.iter().enumerate() {
        match pipe.get(i) {
            Some(&pc) if pc == ev.pc => {}
            Some(&pc) => {
                return Some(format!(
                    "retirement {i}: pipeline 0x{pc:08x}, ISS 0x{:08x} ({})",
                    ev.pc,
                    disassemble(ev.word)
                ))
            }
            None => return Some(format!("retirement {i}: pipeline stopped, ISS at 0x{:08x}", ev.pc)),
        }
    }
    if pipe.len() > golden.events.len() {
        return Some(format!("pipeline retired {} instructions, ISS {}", pipe.len(), golden.events.len()));
    }
    if run.state != golden.state {
        let regs: Vec<String> = (0..32)
            .filter(|&r| run.state.regs[r] != golden.state.regs[r])
            .map(|r| format!("x{r}: pipeline 0x{:08x}, ISS 0x{:08x}", run.state.regs[r], golden.state.regs[r]))
            .collect();
        return Some(format!("final state differs: {}", regs.join("; ")));
    }
    None
}

fn cmd_run(program: &Path, timing: &TimingArgs, max_cycles: u64, trace: Option<PathBuf>, json: bool) -> Result<()> {
    let prog = load_program(program)?;
    let model = load_timing_model(timing)?;
    let run = match run_pipeline(&prog, &model, &[], max_cycles) {
        Ok(run) => run,
        Err(PipelineError::NotHalted { cycles, run }) => {
            if let Some(t) = &trace {
                write_file(t, &run.trace_jsonl())?;
            }
            return Err(CliError::Run(format!("NOT_HALTED: no halt within {cycles} cycles")));
        }
        Err(e) => return Err(CliError::Run(e.to_string())),
    };
    if let Some(t) = &trace {
        write_file(t, &run.trace_jsonl())?;
    }
    let mismatch = first_mismatch(&prog, &run, max_cycles);
    if json {
        print_json(&serde_json::json!({
            "output_log": run.state.output_log,
            "cycles": run.cycles,
            "retired": run.retired,
            "halt": run.state.halt,
            "golden_match": mismatch.is_none(),
            "first_divergence": mismatch,
        }));
    } else {
        println!("output_log: {:?}", run.state.output_log);
        println!("cycles: {}  retired: {}", run.cycles, run.retired);
        if let Some(h) = run.state.halt {
            println!("halt: {:?} code {}", h.cause, h.code);
        }
        println!("golden match: {}", mismatch.is_none());
        if let Some(m) = &mismatch {
            println!("first divergence: {m}");
        }
    }
    match mismatch {
        None => Ok(()),
        Some(m) => Err(CliError::Run(format!("pipeline disagrees with the ISS: {m}"))),
    }
}

fn rat_err(e: RatError) -> CliError {
    CliError::Run(e.to_string())
}

fn cmd_rat(program: Option<&Path>, timing: &TimingArgs, max_cycles: u64, dynamic: bool, output: Option<PathBuf>) -> Result<()> {
    let model = load_timing_model(timing)?;
    let static_csv = static_rat_csv(&build_static_rat(&model));
    let windows = match program {
        Some(p) => Some(build_dynamic_rat(&load_program(p)?, &model, max_cycles).map_err(rat_err)?),
        None if dynamic => return Err(CliError::Usage("--dynamic needs a program".into())),
        None => None,
    };
    match output {
        Some(dir) => {
            write_file(&dir.join("rat_static.csv"), &static_csv)?;
            if let Some(w) = &windows {
                write_file(&dir.join("rat_dynamic.jsonl"), &dynamic_rat_jsonl(w))?;
                println!("wrote {} ({} windows)", dir.join("rat_dynamic.jsonl").display(), w.len());
            }
            println!("wrote {}", dir.join("rat_static.csv").display());
        }
        None if dynamic => print!("{}", dynamic_rat_jsonl(windows.as_deref().unwrap_or_default())),
        None => print!("{static_csv}"),
    }
    Ok(())
}

fn baseline(prog: &Program, max_cycles: u64) -> Result<Baseline> {
    Baseline::new(prog, max_cycles).map_err(|e| CliError::Run(e.to_string()))
}

fn print_record(r: &OutcomeRecord) {
    println!("outcome: {}", r.outcome.name());
    println!("effect: {}", r.effect.name());
    if !r.mechanisms.is_empty() {
        let m: Vec<String> = r.mechanisms.iter().map(|m| format!("{m:?}")).collect();
        println!("mechanisms: {}", m.join(", "));
    }
    for t in &r.targets {
        println!(
            "violated: {} ({} stage), occupant {} at 0x{:08x} (#{})",
            t.latch,
            t.stage.name(),
            t.iclass.name(),
            t.pc,
            t.seq
        );
    }
    for rep in &r.replacements {
        println!("0x{:08x}: `{}` executed as `{}`", rep.pc, rep.original, rep.executed_as);
    }
    if let Some(rc) = &r.root_cause {
        let site = match (&rc.latch, &rc.field) {
            (Some(l), Some(f)) => format!("{l}.{f}"),
            _ => rc.chain.first().map(|d| d.location.clone()).unwrap_or_default(),
        };
        println!("root cause: {site} at cycle {}, late bits {:?}", rc.cycle, rc.late_bits);
        if let (Some(n), Some(s)) = (rc.new_value, rc.stale_value) {
            println!("  expected 0x{n:08x}, captured 0x{s:08x}");
        }
    }
    if let Some(d) = &r.output_diff {
        println!("output: expected {:?}, got {:?}", d.expected, d.actual);
    }
    println!("misclassified: {}", r.misclassified);
    println!("cycles: {}", r.cycles);
}

#[allow(clippy::too_many_arguments)]
fn cmd_inject(
    program: &Path,
    timing: &TimingArgs,
    cycle: u64,
    offset: f64,
    policy: PolicyArg,
    illegal: IllegalArg,
    max_cycles: u64,
    json: bool,
) -> Result<()> {
    let prog = load_program(program)?;
    let model = load_timing_model(timing)?;
    let spec = GlitchSpec {
        cycle,
        offset_ns: offset,
        policy: policy.into(),
        illegal_policy: illegal.into(),
    };
    spec.validate(&model).map_err(|e| CliError::Usage(e.to_string()))?;
    let base = baseline(&prog, max_cycles)?;
    let rec = inject(&base, &model, &spec, 4, 0).map_err(|e| CliError::Usage(e.to_string()))?;
    if json {
        print_json(&rec);
    } else {
        print_record(&rec);
    }
    Ok(())
}

struct CampaignArgs {
    program: Option<PathBuf>,
    timing: TimingArgs,
    plan: Option<PathBuf>,
    cycles: Option<String>,
    offset_range: Option<String>,
    policy: Vec<PolicyArg>,
    illegal_policy: Vec<IllegalArg>,
    max_runs: Option<usize>,
    seed: Option<u64>,
    max_cycles: Option<u64>,
    jobs: usize,
    output: PathBuf,
    json: bool,
}

fn cmd_campaign(a: CampaignArgs) -> Result<()> {
    let file_plan: Option<CampaignPlan> = match &a.plan {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| input_err(p, e))?;
            Some(serde_json::from_str(&text).map_err(|e| input_err(p, e))?)
        }
        None => None,
    };
    let program_path = a
        .program
        .clone()
        .or_else(|| file_plan.as_ref().and_then(|p| p.program.clone()).map(PathBuf::from))
        .ok_or_else(|| CliError::Usage("no program given".into()))?;
    let timing = match (&a.timing.timing, file_plan.as_ref().and_then(|p| p.timing.clone())) {
        (None, Some(t)) => TimingArgs { timing: Some(t.into()) },
        _ => a.timing.clone(),
    };
    let model = load_timing_model(&timing)?;
    let prog = load_program(&program_path)?;
    let max_cycles = a
        .max_cycles
        .or(file_plan.as_ref().map(|p| p.max_cycles))
        .unwrap_or(DEFAULT_MAX_CYCLES);
    let base = baseline(&prog, max_cycles)?;

    let cycles = match &a.cycles {
        Some(c) => parse_range(c)?,
        None => file_plan.as_ref().map(|p| p.cycles).unwrap_or(CycleRange { lo: 0, hi: base.cycles }),
    };
    let offsets = match &a.offset_range {
        Some(o) => parse_grid(o)?,
        None => file_plan.as_ref().map(|p| p.offsets).unwrap_or(OffsetGrid {
            lo_ns: model.min_glitch_ns(),
            hi_ns: model.clock_period_ns() - 0.05,
            step_ns: 0.05,
        }),
    };
    let mut plan = file_plan.unwrap_or_else(|| CampaignPlan::new(cycles, offsets));
    plan.cycles = cycles;
    plan.offsets = offsets;
    plan.program = Some(program_path.display().to_string());
    plan.timing = timing.timing.as_ref().map(|t| t.display().to_string());
    plan.max_cycles = max_cycles;
    if !a.policy.is_empty() {
        plan.policies = a.policy.iter().map(|&p| p.into()).collect();
    }
    if !a.illegal_policy.is_empty() {
        plan.illegal_policies = a.illegal_policy.iter().map(|&p| p.into()).collect();
    }
    if a.max_runs.is_some() {
        plan.max_runs = a.max_runs;
    }
    if let Some(s) = a.seed {
        plan.seed = s;
    }
    plan.jobs = a.jobs;
    plan.validate(&model).map_err(|e| CliError::Usage(e.to_string()))?;

    let report = run_campaign_on(&plan, &base, &model, &prog).map_err(|e| CliError::Run(e.to_string()))?;
    write_file(&a.output.join("report.json"), &report.to_json())?;
    write_file(&a.output.join("records.csv"), &report.records_csv())?;
    if a.json {
        print_json(&report.summary);
    } else {
        for w in &report.warnings {
            eprintln!("warning: {w}");
        }
        println!("{} runs", report.summary.runs);
        for (o, n) in report.summary.outcomes.iter().filter(|(_, n)| **n > 0) {
            println!("  {:<24}{n}", o.name());
        }
        println!("misclassified: {}", report.summary.misclassified);
        println!("wrote {}", a.output.join("report.json").display());
    }
    Ok(())
}

fn cmd_report(path: &Path, format: ReportFormat, output: Option<PathBuf>) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| input_err(path, e))?;
    let report: CampaignReport = serde_json::from_str(&text).map_err(|e| input_err(path, e))?;
    let rendered = match format {
        ReportFormat::Md => report.to_markdown(),
        ReportFormat::Csv => report.instruction_csv(),
        ReportFormat::Records => report.records_csv(),
        ReportFormat::Json => serde_json::to_string_pretty(&report.summary).expect("serializable") + "\n",
    };
    match output {
        Some(o) => write_file(&o, &rendered),
        None => {
            print!("{rendered}");
            Ok(())
        }
    }
}

fn cmd_workload(kind: WorkloadKind, iclass: Option<String>, input: usize, seed: u64, dir: &Path) -> Result<()> {
    match kind {
        WorkloadKind::Bnn => {
            let w = BnnWorkload::generate(seed);
            if input >= w.inputs.len() {
                return Err(CliError::Usage(format!("--input must be below {}", w.inputs.len())));
            }
            let src = glitchbench::workloads::generate_bnn_asm(&w.model, w.inputs[input])
                .map_err(|e| CliError::Run(e.to_string()))?;
            write_file(&dir.join("bnn.s"), &src)?;
            let img = dir.join("bnn.img");
            store_image(&w.program_for(input), &img).map_err(|e| input_err(&img, e))?;
            let inputs = serde_json::to_string_pretty(&w.inputs_file()).expect("serializable") + "\n";
            write_file(&dir.join("inputs.json"), &inputs)?;
            println!(
                "wrote bnn.s, bnn.img, inputs.json to {} (input {input}, label {})",
                dir.display(),
                w.golden_labels[input]
            );
        }
        WorkloadKind::Micro => {
            let name = iclass.ok_or_else(|| CliError::Usage("micro needs --iclass".into()))?;
            let class = IClass::from_name(&name.to_ascii_uppercase())
                .ok_or_else(|| CliError::Usage(format!("unknown instruction class `{name}`")))?;
            let m = microbench(class).map_err(|e| CliError::Usage(e.to_string()))?;
            let path = dir.join(format!("micro_{}.s", class.name().to_ascii_lowercase()));
            write_file(&path, &m.source)?;
            println!("wrote {} (instance in IF at cycle {}, pc 0x{:08x})", path.display(), m.if_cycle, m.pc);
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Asm { source, output } => cmd_asm(&source, output),
        Command::Run {
            program,
            timing,
            max_cycles,
            trace,
            json,
        } => cmd_run(&program, &timing, max_cycles, trace, json),
        Command::Rat {
            program,
            timing,
            max_cycles,
            dynamic,
            output,
        } => cmd_rat(program.as_deref(), &timing, max_cycles, dynamic, output),
        Command::Inject {
            program,
            timing,
            cycle,
            offset,
            policy,
            illegal_policy,
            max_cycles,
            json,
        } => cmd_inject(&program, &timing, cycle, offset, policy, illegal_policy, max_cycles, json),
        Command::Campaign {
            program,
            timing,
            plan,
            cycles,
            offset_range,
            policy,
            illegal_policy,
            max_runs,
            seed,
            max_cycles,
            jobs,
            output,
            json,
        } => cmd_campaign(CampaignArgs {
            program,
            timing,
            plan,
            cycles,
            offset_range,
            policy,
            illegal_policy,
            max_runs,
            seed,
            max_cycles,
            jobs,
            output,
            json,
        }),
        Command::Report { report, format, output } => cmd_report(&report, format, output),
        Command::Workload {
            kind,
            iclass,
            input,
            seed,
            output,
        } => cmd_workload(kind, iclass, input, seed, &output),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
