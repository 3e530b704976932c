//! Parsers for iptables-save dumps (a subset of the grammar) and for the
//! interface address assignment file.

use std::fmt;

use crate::fw_model::{
    is_builtin_chain, Action, Chain, CtState, Ipassmt, MatchExpr, MatchPrim, Origin, Policy,
    PortRange, PrimKind, Rule, RulesetTable, StateSet,
};
use crate::wordset::{Cidr, IntervalSet, Width};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Warn,
    Error,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Severity::Warn => f.write_str("warn"),
            Severity::Error => f.write_str("error"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseDiagnostic {
    pub severity: Severity,
    pub line: usize,
    pub message: String,
}

impl ParseDiagnostic {
    fn warn(line: usize, message: impl Into<String>) -> Self {
        ParseDiagnostic {
            severity: Severity::Warn,
            line,
            message: message.into(),
        }
    }

    fn error(line: usize, message: impl Into<String>) -> Self {
        ParseDiagnostic {
            severity: Severity::Error,
            line,
            message: message.into(),
        }
    }
}

impl fmt::Display for ParseDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.severity, self.line, self.message)
    }
}

/// A successful parse: tables plus any warnings.
#[derive(Debug, Clone)]
pub struct SaveFile {
    pub tables: Vec<RulesetTable>,
    pub diagnostics: Vec<ParseDiagnostic>,
}

impl SaveFile {
    pub fn table(&self, name: &str) -> Option<&RulesetTable> {
        self.tables.iter().find(|t| t.name == name)
    }
}

/// A failed parse. Holds every diagnostic emitted up to and including the
/// error.
#[derive(Debug, Clone)]
pub struct ParseFailure {
    pub diagnostics: Vec<ParseDiagnostic>,
}

impl fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.diagnostics.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ParseFailure {}

/// Splits on whitespace, keeping double-quoted strings (quotes included)
/// together as one token.
pub fn tokenize(line: &str) -> Result<Vec<String>, String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    let mut in_quotes = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '"' => {
                in_quotes = !in_quotes;
                cur.push(c);
            }
            '\\' if in_quotes => {
                cur.push(c);
                if let Some(next) = chars.next() {
                    cur.push(next);
                }
            }
            c if c.is_whitespace() && !in_quotes => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
            }
            c => cur.push(c),
        }
    }
    if in_quotes {
        return Err("unterminated quoted string".to_string());
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    Ok(tokens)
}

/// Result of parsing one rule-spec.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleSpec {
    pub match_expr: MatchExpr,
    pub action: Action,
    pub warnings: Vec<String>,
}

/// Options that start a new primitive; an unknown match module's own
/// options are swallowed until one of these (or `!` before one).
const KNOWN_OPTIONS: &[&str] = &[
    "-i",
    "--in-interface",
    "-s",
    "--source",
    "--src",
    "-d",
    "--destination",
    "--dst",
    "-p",
    "--protocol",
    "-m",
    "--match",
    "-j",
    "--jump",
    "-g",
    "--goto",
    "-o",
    "--out-interface",
];

fn is_known_option(tok: &str) -> bool {
    KNOWN_OPTIONS.contains(&tok)
}

pub(crate) fn normalize_protocol(p: &str) -> String {
    match p.to_ascii_lowercase().as_str() {
        "6" => "tcp".to_string(),
        "17" => "udp".to_string(),
        "1" => "icmp".to_string(),
        "0" => "all".to_string(),
        other => other.to_string(),
    }
}

fn parse_addr_list(arg: &str, width: Width) -> Result<IntervalSet, String> {
    let mut set = IntervalSet::empty(width);
    for part in arg.split(',') {
        let cidr = Cidr::parse(part, width).map_err(|e| format!("bad address `{part}`: {e}"))?;
        set.union_with(&cidr.to_set()).map_err(|e| e.to_string())?;
    }
    Ok(set)
}

fn parse_port(s: &str) -> Result<u16, String> {
    s.parse().map_err(|_| format!("bad port `{s}`"))
}

fn parse_port_range(arg: &str) -> Result<PortRange, String> {
    match arg.split_once(':') {
        Some((lo, hi)) => {
            let lo = if lo.is_empty() { 0 } else { parse_port(lo)? };
            let hi = if hi.is_empty() { u16::MAX } else { parse_port(hi)? };
            if lo > hi {
                return Err(format!("bad port range `{arg}`"));
            }
            Ok(PortRange { lo, hi })
        }
        None => Ok(PortRange::single(parse_port(arg)?)),
    }
}

fn parse_states(arg: &str) -> Result<StateSet, String> {
    arg.split(',')
        .map(|s| CtState::parse(s).ok_or_else(|| format!("unknown connection state `{s}`")))
        .collect()
}

/// Parses one rule-spec (everything after `-A CHAIN`). Targets that are not
/// built-in become `Action::Call`; the caller checks the chain exists.
pub fn parse_rule_spec<S: AsRef<str>>(tokens: &[S], width: Width) -> Result<RuleSpec, String> {
    let toks: Vec<&str> = tokens.iter().map(|t| t.as_ref()).collect();
    let mut conjuncts = Vec::new();
    let mut warnings = Vec::new();
    let mut action = None;
    let mut negate = false;
    let mut seen_iface = false;
    let mut seen_src = false;
    let mut port_proto = false;
    let mut state_module = false;
    let mut conntrack_module = false;
    let mut i = 0;

    let arg_at = |i: usize, opt: &str| -> Result<&str, String> {
        toks.get(i + 1)
            .copied()
            .ok_or_else(|| format!("option `{opt}` requires an argument"))
    };

    // Swallows the option at `i` and its arguments up to the next token
    // starting with `-` or `!`.
    let swallow = |i: usize| -> usize {
        let mut j = i + 1;
        while j < toks.len() && !toks[j].starts_with('-') && toks[j] != "!" {
            j += 1;
        }
        j
    };

    while i < toks.len() {
        let tok = toks[i];
        if action.is_some() {
            return Err(format!("unexpected `{tok}` after target"));
        }
        match tok {
            "!" => {
                if negate {
                    return Err("double negation".to_string());
                }
                match toks.get(i + 1) {
                    None => return Err("`!` at end of rule".to_string()),
                    Some(&"-j") | Some(&"--jump") => {
                        return Err("`!` cannot negate a target".to_string())
                    }
                    _ => {}
                }
                negate = true;
                i += 1;
                continue;
            }
            "-i" | "--in-interface" => {
                let arg = arg_at(i, tok)?;
                if seen_iface {
                    return Err("duplicate `-i`".to_string());
                }
                seen_iface = true;
                conjuncts.push(MatchPrim {
                    kind: PrimKind::InIface(arg.to_string()),
                    negated: negate,
                });
                i += 2;
            }
            "-s" | "--source" | "--src" | "-d" | "--destination" | "--dst" => {
                let arg = arg_at(i, tok)?;
                if arg == "!" {
                    return Err(format!(
                        "legacy negation `{tok} ! ADDR` is not supported; write `! {tok} ADDR`"
                    ));
                }
                let set = parse_addr_list(arg, width)?;
                let kind = if tok.starts_with("-s") || tok == "--source" || tok == "--src" {
                    if seen_src {
                        return Err("duplicate `-s`".to_string());
                    }
                    seen_src = true;
                    PrimKind::SrcIp(set)
                } else {
                    PrimKind::DstIp(set)
                };
                conjuncts.push(MatchPrim {
                    kind,
                    negated: negate,
                });
                i += 2;
            }
            "-p" | "--protocol" => {
                let proto = normalize_protocol(arg_at(i, tok)?);
                if !negate && (proto == "tcp" || proto == "udp") {
                    port_proto = true;
                }
                conjuncts.push(MatchPrim {
                    kind: PrimKind::Protocol(proto),
                    negated: negate,
                });
                i += 2;
            }
            "-m" | "--match" => {
                let module = arg_at(i, tok)?;
                match module {
                    "state" | "conntrack" | "tcp" | "udp" | "comment" => {
                        if negate {
                            return Err(format!("`!` cannot negate `-m {module}`"));
                        }
                        match module {
                            "state" => state_module = true,
                            "conntrack" => conntrack_module = true,
                            _ => {}
                        }
                        i += 2;
                        continue;
                    }
                    _ => {}
                }
                let mut j = i + 2;
                while j < toks.len() {
                    let t = toks[j];
                    let bang_known = t == "!" && toks.get(j + 1).is_some_and(|n| is_known_option(n));
                    if is_known_option(t) || bang_known {
                        break;
                    }
                    j += 1;
                }
                let raw = toks[i..j].join(" ");
                warnings.push(format!("unknown match `{raw}` kept as unknown"));
                conjuncts.push(MatchPrim {
                    kind: PrimKind::Unknown(raw),
                    negated: negate,
                });
                i = j;
            }
            "--comment" => {
                // Comments never affect matching.
                if negate {
                    return Err("`!` cannot negate `--comment`".to_string());
                }
                arg_at(i, tok)?;
                i += 2;
            }
            "--state" | "--ctstate"
                if (tok == "--state" && state_module)
                    || (tok == "--ctstate" && conntrack_module) =>
            {
                let states = parse_states(arg_at(i, tok)?)?;
                conjuncts.push(MatchPrim {
                    kind: PrimKind::CtState(states),
                    negated: negate,
                });
                i += 2;
            }
            "--dport" | "--destination-port" if port_proto => {
                let range = parse_port_range(arg_at(i, tok)?)?;
                conjuncts.push(MatchPrim {
                    kind: PrimKind::DstPort(range),
                    negated: negate,
                });
                i += 2;
            }
            "-j" | "--jump" => {
                let target = arg_at(i, tok)?;
                let rest = &toks[i + 2..];
                action = Some(match target {
                    "ACCEPT" => Action::Accept,
                    "DROP" => Action::Drop,
                    "RETURN" => Action::Return,
                    // Target options (--reject-with, --log-prefix, ...) are
                    // irrelevant to filtering.
                    "REJECT" => Action::Reject,
                    "LOG" | "NFLOG" | "ULOG" => Action::Log,
                    other => Action::Call(other.to_string()),
                });
                let takes_options = matches!(target, "REJECT" | "LOG" | "NFLOG" | "ULOG");
                if !takes_options && !rest.is_empty() {
                    return Err(format!("unexpected `{}` after target", rest[0]));
                }
                i = toks.len();
            }
            "-g" | "--goto" => {
                return Err("unsupported: goto (`-g`)".to_string());
            }
            t if t.starts_with('-') => {
                let j = swallow(i);
                let raw = toks[i..j].join(" ");
                warnings.push(format!("unknown option `{raw}` kept as unknown"));
                conjuncts.push(MatchPrim {
                    kind: PrimKind::Unknown(raw),
                    negated: negate,
                });
                i = j;
            }
            other => return Err(format!("unexpected token `{other}`")),
        }
        negate = false;
    }
    if negate {
        return Err("`!` at end of rule".to_string());
    }
    Ok(RuleSpec {
        match_expr: MatchExpr::new(conjuncts),
        action: action.unwrap_or(Action::Empty),
        warnings,
    })
}

struct TableBuilder {
    table: RulesetTable,
    start_line: usize,
    // (line, chain, target) of every Call, validated at COMMIT.
    calls: Vec<(usize, String)>,
}

/// Parses an iptables-save dump at the default IPv4 width.
pub fn parse_save(text: &str) -> Result<SaveFile, ParseFailure> {
    parse_save_with_width(text, Width::IPV4)
}

/// Parses an iptables-save dump; addresses are interpreted at `width`
/// (plain integers are accepted at any width, dotted quads only at 32).
pub fn parse_save_with_width(text: &str, width: Width) -> Result<SaveFile, ParseFailure> {
    let mut diags = Vec::new();
    let mut tables = Vec::new();
    let mut current: Option<TableBuilder> = None;

    macro_rules! fail {
        ($line:expr, $($msg:tt)*) => {{
            diags.push(ParseDiagnostic::error($line, format!($($msg)*)));
            return Err(ParseFailure { diagnostics: diags });
        }};
    }

    for (idx, raw_line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('*') {
            if let Some(b) = &current {
                fail!(lineno, "table `{}` opened before COMMIT of `{}`", name, b.table.name);
            }
            if name.is_empty() {
                fail!(lineno, "missing table name");
            }
            current = Some(TableBuilder {
                table: RulesetTable::new(name),
                start_line: lineno,
                calls: Vec::new(),
            });
            continue;
        }
        let Some(builder) = current.as_mut() else {
            fail!(lineno, "`{}` outside of a table", line);
        };
        if line == "COMMIT" {
            let b = current.take().expect("checked above");
            for (l, target) in &b.calls {
                // Extension targets such as MASQUERADE or MARK. Harmless
                // unless reached from the chain being certified, which
                // preprocessing refuses.
                if !b.table.chains.contains_key(target) {
                    diags.push(ParseDiagnostic::warn(*l, format!("unsupported target `{target}`")));
                }
            }
            tables.push(b.table);
            continue;
        }
        if let Some(decl) = line.strip_prefix(':') {
            let parts: Vec<&str> = decl.split_whitespace().collect();
            if parts.len() < 2 {
                fail!(lineno, "malformed chain declaration");
            }
            let name = parts[0];
            let policy = match parts[1] {
                "ACCEPT" => Some(Policy::Accept),
                "DROP" => Some(Policy::Drop),
                "-" => None,
                other => fail!(lineno, "unsupported chain policy `{}`", other),
            };
            if is_builtin_chain(name) && policy.is_none() {
                fail!(lineno, "built-in chain `{}` needs a policy", name);
            }
            if !is_builtin_chain(name) && policy.is_some() {
                fail!(lineno, "user-defined chain `{}` cannot have a policy", name);
            }
            if builder.table.chains.contains_key(name) {
                fail!(lineno, "chain `{}` declared twice", name);
            }
            builder.table.add_chain(Chain {
                name: name.to_string(),
                policy,
                rules: Vec::new(),
                decl_line: lineno,
            });
            continue;
        }
        let tokens = match tokenize(line) {
            Ok(t) => t,
            Err(e) => fail!(lineno, "{}", e),
        };
        let mut toks: &[String] = &tokens;
        // Optional `[packets:bytes]` counters from `iptables-save -c`.
        if toks.first().is_some_and(|t| t.starts_with('[') && t.ends_with(']')) {
            toks = &toks[1..];
        }
        match toks.first().map(String::as_str) {
            Some("-A") | Some("--append") => {}
            _ => fail!(lineno, "unrecognized line `{}`", line),
        }
        let Some(chain_name) = toks.get(1) else {
            fail!(lineno, "`-A` needs a chain name");
        };
        if !builder.table.chains.contains_key(chain_name.as_str()) {
            fail!(lineno, "rule for undeclared chain `{}`", chain_name);
        }
        let spec = match parse_rule_spec(&toks[2..], width) {
            Ok(s) => s,
            Err(e) => fail!(lineno, "{}", e),
        };
        for w in spec.warnings {
            diags.push(ParseDiagnostic::warn(lineno, w));
        }
        if let Action::Call(target) = &spec.action {
            if is_builtin_chain(target) {
                fail!(lineno, "cannot jump to built-in chain `{}`", target);
            }
            builder.calls.push((lineno, target.clone()));
        }
        let rule = Rule::new(
            spec.match_expr,
            spec.action,
            Origin::new(chain_name.as_str(), lineno),
        );
        builder
            .table
            .chains
            .get_mut(chain_name.as_str())
            .expect("checked above")
            .rules
            .push(rule);
    }
    if let Some(b) = current {
        diags.push(ParseDiagnostic::error(
            b.start_line,
            format!("table `{}` is missing COMMIT", b.table.name),
        ));
        return Err(ParseFailure { diagnostics: diags });
    }
    Ok(SaveFile {
        tables,
        diagnostics: diags,
    })
}

/// Parses `<iface> = <cidr>[,<cidr>]*` lines at IPv4 width.
pub fn parse_ipassmt(text: &str) -> Result<Ipassmt, ParseDiagnostic> {
    parse_ipassmt_with_width(text, Width::IPV4)
}

pub fn parse_ipassmt_with_width(text: &str, width: Width) -> Result<Ipassmt, ParseDiagnostic> {
    let mut out = Ipassmt::new(width);
    for (idx, raw_line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((iface, list)) = line.split_once('=') else {
            return Err(ParseDiagnostic::error(lineno, "expected `<iface> = <cidr>[,<cidr>]*`"));
        };
        let iface = iface.trim();
        if iface.is_empty() || iface.contains(char::is_whitespace) {
            return Err(ParseDiagnostic::error(lineno, format!("bad interface name `{iface}`")));
        }
        let mut set = IntervalSet::empty(width);
        for part in list.split(',') {
            let part = part.trim();
            if part.is_empty() {
                return Err(ParseDiagnostic::error(
                    lineno,
                    format!("empty address list entry for `{iface}`"),
                ));
            }
            let cidr = Cidr::parse(part, width)
                .map_err(|e| ParseDiagnostic::error(lineno, format!("bad CIDR `{part}`: {e}")))?;
            set.union_with(&cidr.to_set())
                .map_err(|e| ParseDiagnostic::error(lineno, e.to_string()))?;
        }
        if !out.insert(iface, set) {
            return Err(ParseDiagnostic::error(
                lineno,
                format!("duplicate interface `{iface}`"),
            ));
        }
    }
    Ok(out)
}
