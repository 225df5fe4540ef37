//! gridling command-line suite: job submission and monitoring commands,
//! admin commands, the hardware planner, the simulator, and the controller
//! and agent daemons, all in one multiplexed binary.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use gridling::accounts::AccountsDb;
use gridling::cluster::Fleet;
use gridling::config::Config;
use gridling::planner::{compare, BuildConfig, CheckResult, COMMODITY_FIXTURE, SERVER_FIXTURE};
use gridling::rpc::{self, Op, Outcome, Request, Response};
use gridling::sim::{run_sim, Scenario};

const EXIT_OK: u8 = 0;
const EXIT_USER: u8 = 1;
const EXIT_SYSTEM: u8 = 2;

#[derive(Parser)]
#[command(name = "gridling", version, about = "miniature multi-user GPU batch workload manager")]
struct Cli {
    /// Config file (flat key=value); also via GRIDLING_CONFIG
    #[arg(long, global = true, env = "GRIDLING_CONFIG")]
    config: Option<PathBuf>,

    /// Acting username; also via GRIDLING_USER, falling back to USER
    #[arg(long, global = true, env = "GRIDLING_USER")]
    user: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Submit a job file to the queue
    #[command(alias = "sbatch")]
    Submit { job_file: PathBuf },

    /// Submit a command, wait for it, relay its output and exit code
    #[command(alias = "srun")]
    Run(RunArgs),

    /// Query job accounting
    #[command(alias = "sacct")]
    Acct {
        #[arg(long, default_value = "jobid,jobname,state,exitcode,user,account")]
        format: String,
        #[arg(long)]
        user: Option<String>,
    },

    /// Show node status
    #[command(alias = "sinfo")]
    Info,

    /// Cancel a job
    #[command(alias = "scancel")]
    Cancel { job_id: u64 },

    /// Admin: manage users and QOS levels
    User {
        #[command(subcommand)]
        action: UserAction,
    },

    /// Validate and price hardware builds
    Plan {
        #[command(subcommand)]
        action: PlanAction,
    },

    /// Run a scenario file through the deterministic simulator
    Sim { scenario: PathBuf },

    /// Run a job file locally, without a controller
    Local { job_file: PathBuf },

    /// Run the controller daemon
    Controller {
        /// Roster CSV to load at startup
        #[arg(long)]
        roster: Option<PathBuf>,
    },

    /// Run a node agent daemon
    Agent {
        #[arg(long)]
        gpus: u32,
        #[arg(long, default_value_t = 1024)]
        mem_mb: u64,
        #[arg(long, default_value_t = 1)]
        cpus: u32,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value_t = 0)]
    gpus: u32,
    #[arg(long, default_value_t = 1024)]
    mem: u64,
    /// Wall-time limit (minutes, HH:MM:SS, D-HH:MM, or D-HH:MM:SS)
    #[arg(long, default_value = "60")]
    time: String,
    #[arg(long, default_value = "normal")]
    qos: String,
    #[arg(long, default_value = "job")]
    name: String,
    #[arg(long)]
    output: Option<String>,
    #[arg(long)]
    error: Option<String>,
    /// Command and arguments
    #[arg(required = true, trailing_var_arg = true)]
    command: Vec<String>,
}

#[derive(Subcommand)]
enum UserAction {
    /// Create users from a roster CSV
    Ingest { csv: PathBuf },
    /// List accounts
    List,
    /// Remove expired accounts and cancel their jobs
    Reconcile {
        #[arg(long)]
        date: Option<String>,
    },
    /// Define or update a QOS level
    Qos {
        #[command(subcommand)]
        action: QosAction,
    },
}

#[derive(Subcommand)]
enum QosAction {
    Define { name: String, weight: u32 },
}

#[derive(Subcommand)]
enum PlanAction {
    /// Price a build file and run the sizing checks
    Check { build_file: PathBuf },
    /// Compare the costs of two build files
    Compare { a: PathBuf, b: PathBuf },
    /// Report on the two bundled reference builds
    Fixtures,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match &cli.config {
        Some(path) => match Config::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("gridling: {e}");
                return ExitCode::from(EXIT_USER);
            }
        },
        None => Config::default(),
    };
    let user = cli
        .user
        .clone()
        .or_else(|| std::env::var("USER").ok())
        .unwrap_or_else(|| "user".to_string());

    let code = match cli.command {
        Command::Submit { job_file } => cmd_submit(&config, &user, &job_file),
        Command::Run(args) => cmd_run(&config, &user, &args),
        Command::Acct { format, user: filter } => {
            table_op(&config, &user, Op::Acct { format, user: filter })
        }
        Command::Info => table_op(&config, &user, Op::Info),
        Command::Cancel { job_id } => cmd_cancel(&config, &user, job_id),
        Command::User { action } => cmd_user(&config, &user, action),
        Command::Plan { action } => cmd_plan(action),
        Command::Sim { scenario } => cmd_sim(&scenario),
        Command::Local { job_file } => cmd_local(&job_file),
        Command::Controller { roster } => cmd_controller(&config, roster.as_deref()),
        Command::Agent { gpus, mem_mb, cpus } => cmd_agent(&config, gpus, mem_mb, cpus),
    };
    ExitCode::from(code)
}

fn call(config: &Config, user: &str, op: Op) -> Result<Outcome, u8> {
    let request = Request {
        user: user.to_string(),
        op,
    };
    match rpc::call(&config.controller_addr, &request) {
        Ok(Response::Ok(outcome)) => Ok(outcome),
        Ok(Response::Err { message, user_error }) => {
            eprintln!("gridling: {message}");
            Err(if user_error { EXIT_USER } else { EXIT_SYSTEM })
        }
        Err(e) => {
            eprintln!("gridling: controller unreachable at {}: {e}", config.controller_addr);
            Err(EXIT_SYSTEM)
        }
    }
}

fn cmd_submit(config: &Config, user: &str, job_file: &std::path::Path) -> u8 {
    let text = match std::fs::read_to_string(job_file) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("gridling: {}: {e}", job_file.display());
            return EXIT_USER;
        }
    };
    // parse locally first so syntax errors never reach the controller
    if let Err(e) = gridling::jobspec::parse_job_file(&text) {
        eprintln!("gridling: {e}");
        return EXIT_USER;
    }
    match call(config, user, Op::Submit { job_file: text }) {
        Ok(Outcome::Submitted { job_id }) => {
            println!("Submitted batch job {job_id}");
            EXIT_OK
        }
        Ok(_) => EXIT_SYSTEM,
        Err(code) => code,
    }
}

fn cmd_run(config: &Config, user: &str, args: &RunArgs) -> u8 {
    let time_limit_min = match gridling::jobspec::parse_time_limit(&args.time) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("gridling: {e}");
            return EXIT_USER;
        }
    };
    let req = gridling::JobRequest {
        gpus: args.gpus,
        mem_mb: args.mem,
        time_limit_min,
        qos: args.qos.clone(),
        job_name: args.name.clone(),
        output_path: args.output.clone().unwrap_or_else(|| "slurm-<jobid>.out".to_string()),
        error_path: args
            .error
            .clone()
            .or_else(|| args.output.clone())
            .unwrap_or_else(|| "slurm-<jobid>.out".to_string()),
        command: args.command.clone(),
        ..gridling::JobRequest::default()
    };
    let job_file = gridling::jobspec::render_job_file(&req);
    let job_id = match call(config, user, Op::Submit { job_file }) {
        Ok(Outcome::Submitted { job_id }) => job_id,
        Ok(_) => return EXIT_SYSTEM,
        Err(code) => return code,
    };
    match call(config, user, Op::Wait { job_id }) {
        Ok(Outcome::JobDone {
            state,
            exit_code,
            output_path,
            ..
        }) => {
            if let Ok(output) = std::fs::read_to_string(&output_path) {
                print!("{output}");
            }
            match (state.as_str(), exit_code) {
                ("COMPLETED", Some(0)) => EXIT_OK,
                (_, Some(code)) => (code.clamp(0, 255)) as u8,
                (state, None) => {
                    eprintln!("gridling: job {job_id} ended {state}");
                    EXIT_USER
                }
            }
        }
        Ok(_) => EXIT_SYSTEM,
        Err(code) => code,
    }
}

fn table_op(config: &Config, user: &str, op: Op) -> u8 {
    match call(config, user, op) {
        Ok(Outcome::Table { text }) => {
            print!("{text}");
            EXIT_OK
        }
        Ok(_) => EXIT_SYSTEM,
        Err(code) => code,
    }
}

fn cmd_cancel(config: &Config, user: &str, job_id: u64) -> u8 {
    match call(config, user, Op::Cancel { job_id }) {
        Ok(Outcome::Cancelled { .. }) => {
            println!("Cancelled job {job_id}");
            EXIT_OK
        }
        Ok(_) => EXIT_SYSTEM,
        Err(code) => code,
    }
}

fn cmd_user(config: &Config, user: &str, action: UserAction) -> u8 {
    match action {
        UserAction::Ingest { csv } => {
            let text = match std::fs::read_to_string(&csv) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("gridling: {}: {e}", csv.display());
                    return EXIT_USER;
                }
            };
            match call(config, user, Op::UserIngest { csv: text }) {
                Ok(Outcome::Ingested { created, errors }) => {
                    println!("created {} users", created.len());
                    for err in &errors {
                        eprintln!("gridling: {err}");
                    }
                    if errors.is_empty() {
                        EXIT_OK
                    } else {
                        EXIT_USER
                    }
                }
                Ok(_) => EXIT_SYSTEM,
                Err(code) => code,
            }
        }
        UserAction::List => table_op(config, user, Op::UserList),
        UserAction::Reconcile { date } => match call(config, user, Op::Reconcile { date }) {
            Ok(Outcome::Reconciled { removed, cancelled }) => {
                for name in &removed {
                    println!("removed {name}");
                }
                for id in &cancelled {
                    println!("cancelled job {id}");
                }
                EXIT_OK
            }
            Ok(_) => EXIT_SYSTEM,
            Err(code) => code,
        },
        UserAction::Qos {
            action: QosAction::Define { name, weight },
        } => match call(config, user, Op::QosDefine { name, weight }) {
            Ok(Outcome::Done) => EXIT_OK,
            Ok(_) => EXIT_SYSTEM,
            Err(code) => code,
        },
    }
}

fn load_build(path: &std::path::Path) -> Result<BuildConfig, u8> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        eprintln!("gridling: {}: {e}", path.display());
        EXIT_USER
    })?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("build")
        .to_string();
    BuildConfig::parse(&name, &text).map_err(|e| {
        eprintln!("gridling: {e}");
        EXIT_USER
    })
}

fn report_build(build: &BuildConfig) -> u8 {
    println!("build: {}", build.name);
    println!("total: {}", build.total_cost());
    if let Some(stated) = build.stated_total {
        println!("stated total: {stated}");
        if let Some(diff) = build.stated_discrepancy() {
            println!("DISCREPANCY: line items differ from stated total by {diff}");
        }
    }
    let mut ok = true;
    for (label, result) in [
        ("pci lanes", build.check_pci_lanes()),
        ("psu", build.check_psu()),
        ("ram", build.check_ram()),
    ] {
        match result {
            Ok(CheckResult::Ok) => println!("check {label}: ok"),
            Ok(CheckResult::PciViolation { needed, provided }) => {
                ok = false;
                println!("check {label}: VIOLATION needed {needed} lanes, provided {provided}");
            }
            Ok(CheckResult::PsuViolation { peak_watts, psu_watts }) => {
                ok = false;
                println!("check {label}: VIOLATION peak {peak_watts} W exceeds {psu_watts} W supply");
            }
            Ok(CheckResult::RamViolation { have_gb, need_gb }) => {
                ok = false;
                println!("check {label}: VIOLATION {have_gb} GB installed, {need_gb} GB needed");
            }
            Err(e) => {
                eprintln!("gridling: {e}");
                return EXIT_USER;
            }
        }
    }
    if ok {
        EXIT_OK
    } else {
        EXIT_USER
    }
}

fn cmd_plan(action: PlanAction) -> u8 {
    match action {
        PlanAction::Check { build_file } => match load_build(&build_file) {
            Ok(build) => report_build(&build),
            Err(code) => code,
        },
        PlanAction::Compare { a, b } => {
            let (a, b) = match (load_build(&a), load_build(&b)) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(c), _) | (_, Err(c)) => return c,
            };
            let cmp = compare(&a, &b);
            println!(
                "{} costs {}x {} ({} vs {})",
                cmp.more_expensive,
                cmp.ratio_string(),
                cmp.less_expensive,
                a.effective_total(),
                b.effective_total()
            );
            EXIT_OK
        }
        PlanAction::Fixtures => {
            let commodity = BuildConfig::parse("commodity", COMMODITY_FIXTURE).expect("bundled fixture");
            let server = BuildConfig::parse("server", SERVER_FIXTURE).expect("bundled fixture");
            let code1 = report_build(&commodity);
            println!();
            let code2 = report_build(&server);
            println!();
            let cmp = compare(&server, &commodity);
            println!(
                "{} costs {}x {}",
                cmp.more_expensive,
                cmp.ratio_string(),
                cmp.less_expensive
            );
            code1.max(code2)
        }
    }
}

fn cmd_sim(path: &std::path::Path) -> u8 {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("gridling: {}: {e}", path.display());
            return EXIT_USER;
        }
    };
    let scenario = match Scenario::parse(&text) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("gridling: {e}");
            return EXIT_USER;
        }
    };
    match run_sim(&scenario) {
        Ok(trace) => {
            print!("{}", trace.render());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("gridling: {e}");
            EXIT_USER
        }
    }
}

fn cmd_local(job_file: &std::path::Path) -> u8 {
    match gridling::sim::run_local(job_file) {
        Ok(run) => {
            eprintln!("job ended {}", run.state);
            match run.exit_code {
                Some(code) => (code.clamp(0, 255)) as u8,
                None => EXIT_USER,
            }
        }
        Err(e) => {
            eprintln!("gridling: {e}");
            EXIT_SYSTEM
        }
    }
}

fn cmd_controller(config: &Config, roster: Option<&std::path::Path>) -> u8 {
    let secret = match config.load_secret() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("gridling: {e}");
            return EXIT_USER;
        }
    };
    let mut accounts = AccountsDb::default();
    if let Some(path) = roster {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("gridling: {}: {e}", path.display());
                return EXIT_USER;
            }
        };
        match accounts.ingest_csv(&text) {
            Ok((created, errors)) => {
                eprintln!("loaded {} users from roster", created.len());
                for err in errors {
                    eprintln!("gridling: {err}");
                }
            }
            Err(e) => {
                eprintln!("gridling: {e}");
                return EXIT_USER;
            }
        }
    }
    match gridling::server::serve(
        &config.controller_addr,
        Fleet::default(),
        accounts,
        config.admins.clone(),
        secret,
        config.skew_window_secs,
    ) {
        Ok(handle) => {
            eprintln!("controller listening on {}", handle.addr);
            loop {
                std::thread::sleep(Duration::from_secs(3600));
            }
        }
        Err(e) => {
            eprintln!("gridling: {e}");
            EXIT_SYSTEM
        }
    }
}

fn cmd_agent(config: &Config, gpus: u32, mem_mb: u64, cpus: u32) -> u8 {
    let secret = match config.load_secret() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("gridling: {e}");
            return EXIT_USER;
        }
    };
    let Some(node_name) = config.node_name.clone() else {
        eprintln!("gridling: config is missing node_name");
        return EXIT_USER;
    };
    match gridling::agent::run_agent(gridling::agent::AgentConfig {
        controller_addr: config.controller_addr.clone(),
        node_name,
        gpus,
        mem_mb,
        cpus,
        secret,
        heartbeat: Duration::from_secs(gridling::control::HEARTBEAT_INTERVAL as u64),
    }) {
        Ok(_handle) => {
            eprintln!("agent connected to {}", config.controller_addr);
            loop {
                std::thread::sleep(Duration::from_secs(3600));
            }
        }
        Err(e) => {
            eprintln!("gridling: controller unreachable: {e}");
            EXIT_SYSTEM
        }
    }
}
