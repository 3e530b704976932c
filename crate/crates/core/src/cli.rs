//! Command-line front end. Exit codes: 0 certified / accepted, 1 not
//! certified, 2 input or usage error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::certifier::{certify_access, certify_all, CertifyError};
use crate::fw_model::{CtState, Ipassmt, PacketPattern, Rule, RulesetTable};
use crate::parser::{normalize_protocol, parse_ipassmt_with_width, parse_save_with_width};
use crate::preprocess::preprocess;
use crate::wordset::{IntervalSet, Width, Word};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

/// Entries shown per offending set before `(+N more)`.
const MAX_CIDRS: usize = 8;

#[derive(Debug, Parser)]
#[command(name = "spoofcert", version, about = "Certify spoofing protection of iptables rulesets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check every interface of the assignment for spoofing protection.
    Certify(CertifyArgs),
    /// Check that a packet is definitely accepted (lockout check).
    CertifyAccess(AccessArgs),
    /// Print the preprocessed flat rule list.
    DumpFlat(DumpArgs),
}

#[derive(Debug, Args)]
struct Source {
    /// iptables-save output.
    #[arg(long, value_name = "FILE")]
    ruleset: PathBuf,
    #[arg(long, default_value = "filter")]
    table: String,
    #[arg(long, default_value = "FORWARD")]
    chain: String,
    /// Address width in bits; 32 for IPv4.
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u8).range(1..=32))]
    width: u8,
}

#[derive(Debug, Args)]
struct CertifyArgs {
    #[command(flatten)]
    source: Source,
    /// Interface to source range assignment, one `iface = cidr[,cidr]*` per line.
    #[arg(long, value_name = "FILE")]
    ipassmt: PathBuf,
    /// Keep rules matching on connection state instead of assuming NEW.
    #[arg(long)]
    no_new_assumption: bool,
    /// Also print the flat rule list to standard error.
    #[arg(long)]
    dump_flat: bool,
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Debug, Args)]
struct AccessArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long)]
    in_iface: String,
    #[arg(long)]
    src: String,
    #[arg(long)]
    dst: Option<String>,
    #[arg(long)]
    proto: Option<String>,
    #[arg(long)]
    dport: Option<u16>,
    #[arg(long, default_value = "NEW")]
    state: String,
}

#[derive(Debug, Args)]
struct DumpArgs {
    #[command(flatten)]
    source: Source,
    /// Drop connection-state matches as for certification.
    #[arg(long)]
    assume_new: bool,
}

/// Input problem; printed to standard error, exit code 2.
struct InputError(String);

impl<E: std::fmt::Display> From<E> for InputError {
    fn from(e: E) -> Self {
        InputError(e.to_string())
    }
}

type Res<T> = Result<T, InputError>;

/// Runs the tool with `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{e}");
                    EXIT_INPUT
                }
            };
        }
    };
    let res = match cli.command {
        Command::Certify(a) => cmd_certify(&a, out, err),
        Command::CertifyAccess(a) => cmd_certify_access(&a, out, err),
        Command::DumpFlat(a) => cmd_dump_flat(&a, out, err),
    };
    match res {
        Ok(code) => code,
        Err(InputError(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_INPUT
        }
    }
}

/// Entry point for the binary.
pub fn main_exit() -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}

fn read(path: &Path) -> Res<String> {
    std::fs::read_to_string(path).map_err(|e| InputError(format!("cannot read {}: {e}", path.display())))
}

fn load_table(src: &Source, err: &mut dyn Write) -> Res<(RulesetTable, Width)> {
    let width = Width::new(src.width)?;
    let text = read(&src.ruleset)?;
    let save = match parse_save_with_width(&text, width) {
        Ok(save) => save,
        Err(failure) => {
            for d in &failure.diagnostics {
                let _ = writeln!(err, "{}: {d}", src.ruleset.display());
            }
            return Err(InputError(format!("cannot parse {}", src.ruleset.display())));
        }
    };
    for d in &save.diagnostics {
        let _ = writeln!(err, "{}: {d}", src.ruleset.display());
    }
    let table = save
        .table(&src.table)
        .cloned()
        .ok_or_else(|| InputError(format!("no table `{}` in {}", src.table, src.ruleset.display())))?;
    Ok((table, width))
}

fn load_flat(src: &Source, assume_new: bool, err: &mut dyn Write) -> Res<(Vec<Rule>, Width)> {
    let (table, width) = load_table(src, err)?;
    let flat = preprocess(&table, &src.chain, assume_new)?;
    Ok((flat, width))
}

fn load_ipassmt(path: &Path, width: Width) -> Res<Ipassmt> {
    let text = read(path)?;
    parse_ipassmt_with_width(&text, width).map_err(|d| InputError(format!("{}: {d}", path.display())))
}

/// Minimal CIDR cover, cut off after `MAX_CIDRS` entries.
pub fn format_sources(set: &IntervalSet) -> String {
    let cidrs = set.to_cidr_list();
    let mut s = cidrs
        .iter()
        .take(MAX_CIDRS)
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    if cidrs.len() > MAX_CIDRS {
        s.push_str(&format!(" (+{} more)", cidrs.len() - MAX_CIDRS));
    }
    s
}

fn cmd_certify(a: &CertifyArgs, out: &mut dyn Write, err: &mut dyn Write) -> Res<i32> {
    let (flat, width) = load_flat(&a.source, !a.no_new_assumption, err)?;
    // Read the assignment after the ruleset so ruleset errors come first.
    let ipassmt = load_ipassmt(&a.ipassmt, width)?;
    if a.dump_flat {
        for r in &flat {
            let _ = writeln!(err, "{r}");
        }
    }
    if a.verbose {
        let _ = writeln!(err, "{} flat rules, {} interfaces", flat.len(), ipassmt.len());
    }
    let results = match certify_all(&flat, &ipassmt) {
        Ok(r) => r,
        Err(CertifyError::EmptyIpassmt) => return Err(InputError("interface assignment is empty".into())),
        Err(e) => return Err(e.into()),
    };
    let mut code = EXIT_OK;
    for (iface, res) in &results {
        match &res.first_violation {
            None => {
                let _ = writeln!(out, "{iface}: CERTIFIED");
            }
            Some(v) => {
                code = EXIT_FAIL;
                let origin = &flat[v.rule_index].origin;
                let _ = writeln!(
                    out,
                    "{iface}: FAIL at {origin} — offending sources: {}",
                    format_sources(&v.offending)
                );
            }
        }
        if a.verbose {
            let _ = writeln!(err, "{iface}: may accept {}", format_sources(&res.final_allowed));
        }
    }
    Ok(code)
}

fn parse_addr(s: &str, width: Width, what: &str) -> Res<u32> {
    Word::parse(s, width)
        .map(Word::value)
        .map_err(|e| InputError(format!("bad {what} `{s}`: {e}")))
}

fn cmd_certify_access(a: &AccessArgs, out: &mut dyn Write, err: &mut dyn Write) -> Res<i32> {
    let width = Width::new(a.source.width)?;
    // Validate the packet before touching the ruleset.
    let src_ip = parse_addr(&a.src, width, "source address")?;
    let dst_ip = a.dst.as_deref().map(|d| parse_addr(d, width, "destination address")).transpose()?;
    let state = CtState::parse(&a.state).ok_or_else(|| InputError(format!("bad state `{}`", a.state)))?;
    let protocol = a.proto.as_deref().map(normalize_protocol);
    if a.dport.is_some() && !matches!(protocol.as_deref(), Some("tcp" | "udp")) {
        return Err(InputError("--dport needs --proto tcp or udp".into()));
    }
    let packet = PacketPattern {
        in_iface: a.in_iface.clone(),
        src_ip,
        dst_ip,
        protocol,
        dst_port: a.dport,
        state,
    };
    // Keep state matches: the packet carries its own state.
    let (flat, _) = load_flat(&a.source, false, err)?;
    if certify_access(&flat, &packet)? {
        let _ = writeln!(out, "DEFINITELY ACCEPTED");
        Ok(EXIT_OK)
    } else {
        let _ = writeln!(out, "NOT CERTIFIABLE");
        Ok(EXIT_FAIL)
    }
}

fn cmd_dump_flat(a: &DumpArgs, out: &mut dyn Write, err: &mut dyn Write) -> Res<i32> {
    let (flat, _) = load_flat(&a.source, a.assume_new, err)?;
    for r in &flat {
        let _ = writeln!(out, "{r}");
    }
    Ok(EXIT_OK)
}
