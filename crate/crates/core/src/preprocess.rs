//! Flattens a chain into a rule list in which only ACCEPT and DROP occur
//! and the last rule matches unconditionally.

use thiserror::Error;

use crate::fw_model::{Action, CtState, MatchExpr, MatchPrim, Origin, PrimKind, Rule, RulesetTable};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PreprocessError {
    #[error("no chain named `{0}`")]
    UnknownChain(String),
    #[error("{origin}: unsupported target `{target}`")]
    UnsupportedTarget { target: String, origin: Origin },
    #[error("chain `{0}` has no default policy; only built-in chains can be certified")]
    NoPolicy(String),
    #[error("cyclic chain calls: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("rule {index} ({origin}) still has action {action:?}; unfold first")]
    NotUnfolded {
        index: usize,
        origin: Origin,
        action: Action,
    },
    #[error("rule list does not end in an unconditional ACCEPT or DROP")]
    MissingDefault,
}

/// Unfolds `entry` (a chain with a policy) into a flat list. Calls are
/// inlined with the caller's match conjoined, RETURN conditions are negated
/// onto the rest of their chain, and the policy is appended as a final
/// unconditional rule.
pub fn unfold(table: &RulesetTable, entry: &str) -> Result<Vec<Rule>, PreprocessError> {
    let chain = table
        .chain(entry)
        .ok_or_else(|| PreprocessError::UnknownChain(entry.to_string()))?;
    let policy = chain
        .policy
        .ok_or_else(|| PreprocessError::NoPolicy(entry.to_string()))?;
    let mut out = Vec::new();
    let mut stack = vec![entry.to_string()];
    inline_chain(table, entry, &MatchExpr::any(), &mut stack, &mut out)?;
    out.push(Rule::new(
        MatchExpr::any(),
        policy.action(),
        Origin::new(entry, chain.decl_line),
    ));
    Ok(out)
}

fn inline_chain(
    table: &RulesetTable,
    name: &str,
    prefix: &MatchExpr,
    stack: &mut Vec<String>,
    out: &mut Vec<Rule>,
) -> Result<(), PreprocessError> {
    let chain = table
        .chain(name)
        .ok_or_else(|| PreprocessError::UnknownChain(name.to_string()))?;
    // Conjunction of negated RETURN conditions seen so far in this chain.
    let mut guard = prefix.clone();
    for rule in &chain.rules {
        let cond = guard.and(&rule.match_expr);
        match &rule.action {
            Action::Call(callee) => {
                if stack.iter().any(|s| s == callee) {
                    let mut cycle = stack.clone();
                    cycle.push(callee.clone());
                    return Err(PreprocessError::Cycle(cycle));
                }
                if table.chain(callee).is_none() {
                    return Err(PreprocessError::UnsupportedTarget {
                        target: callee.clone(),
                        origin: rule.origin.clone(),
                    });
                }
                stack.push(callee.clone());
                inline_chain(table, callee, &cond, stack, out)?;
                stack.pop();
            }
            Action::Return => match negate_match(&rule.match_expr) {
                // Unconditional return: the rest of the chain is unreachable.
                None => return Ok(()),
                Some(neg) => guard.push(neg),
            },
            action => out.push(Rule::new(cond, action.clone(), rule.origin.clone())),
        }
    }
    Ok(())
}

/// Negation of a conjunction as a single primitive, or `None` when the
/// expression is always true (its negation never matches). Anything longer
/// than one primitive becomes an opaque unknown.
fn negate_match(m: &MatchExpr) -> Option<MatchPrim> {
    match m.conjuncts() {
        [] => None,
        [prim] => Some(prim.negate()),
        many => {
            let parts: Vec<String> = many.iter().map(|p| p.to_string()).collect();
            Some(MatchPrim::new(PrimKind::Unknown(format!(
                "¬({})",
                parts.join(" ∧ ")
            ))))
        }
    }
}

/// REJECT becomes DROP, LOG and empty rules go away, and everything after
/// the first unconditional ACCEPT/DROP is dropped as unreachable.
pub fn simplify(rules: &[Rule]) -> Result<Vec<Rule>, PreprocessError> {
    let mut out = Vec::with_capacity(rules.len());
    for (index, rule) in rules.iter().enumerate() {
        let action = match &rule.action {
            Action::Accept => Action::Accept,
            Action::Drop | Action::Reject => Action::Drop,
            Action::Log | Action::Empty => continue,
            other @ (Action::Return | Action::Call(_)) => {
                return Err(PreprocessError::NotUnfolded {
                    index,
                    origin: rule.origin.clone(),
                    action: other.clone(),
                })
            }
        };
        let unconditional = rule.match_expr.is_true();
        out.push(Rule::new(rule.match_expr.clone(), action, rule.origin.clone()));
        if unconditional {
            return Ok(out);
        }
    }
    Err(PreprocessError::MissingDefault)
}

/// Restricts attention to packets in state NEW: connection-state
/// primitives are resolved for NEW, and rules that cannot match a NEW
/// packet are removed. With `assume_new == false` the rules are unchanged.
pub fn apply_state_assumption(rules: &[Rule], assume_new: bool) -> Vec<Rule> {
    if !assume_new {
        return rules.to_vec();
    }
    rules
        .iter()
        .filter_map(|rule| {
            let mut m = rule.match_expr.clone();
            let mut satisfiable = true;
            m.retain(|prim| match &prim.kind {
                PrimKind::CtState(states) => {
                    if states.contains(CtState::New) == prim.negated {
                        satisfiable = false;
                    }
                    false
                }
                _ => true,
            });
            satisfiable.then(|| Rule::new(m, rule.action.clone(), rule.origin.clone()))
        })
        .collect()
}

/// The whole pipeline: unfold, state assumption, simplify.
pub fn preprocess(
    table: &RulesetTable,
    entry: &str,
    assume_new: bool,
) -> Result<Vec<Rule>, PreprocessError> {
    let flat = unfold(table, entry)?;
    let flat = apply_state_assumption(&flat, assume_new);
    simplify(&flat)
}

/// Checks the shape the certifier relies on.
pub fn is_preprocessed(rules: &[Rule]) -> bool {
    !rules.is_empty()
        && rules
            .iter()
            .all(|r| matches!(r.action, Action::Accept | Action::Drop))
        && rules.last().is_some_and(|r| r.match_expr.is_true())
}
