//! Progress log events and their plain-text rendering.
//!
//! The rendered text follows a fixed line grammar; [`parse_log`] reads it back
//! into events and is what the grammar tests use.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::{ComponentKind, PerComponent};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selection {
    Random { rollout: usize, breakpoint: usize },
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    RolloutStart {
        rollout: usize,
        kappa: usize,
        explored: usize,
    },
    ArmSelected {
        arm: ComponentKind,
        how: Selection,
    },
    Prune {
        arm: ComponentKind,
        step: usize,
        budget: usize,
        parent: PerComponent<usize>,
        child: PerComponent<usize>,
    },
    RequirementMet {
        arm: ComponentKind,
    },
    EpisodeEnd {
        sizes: PerComponent<usize>,
    },
    OracleUpdate {
        arm: ComponentKind,
        refit: bool,
    },
}

fn sizes_line(s: &PerComponent<usize>) -> String {
    format!(
        "{} nodes, {} graph features, {} downstream features",
        s.nodes, s.node_features, s.downstream
    )
}

/// Renders one event, including its trailing blank line where the grammar has one.
pub fn render_event(event: &Event) -> String {
    match event {
        Event::RolloutStart {
            rollout,
            kappa,
            explored,
        } => format!("Rollout {rollout}/{kappa}, {explored} subgraphs have been explored.\n"),
        Event::ArmSelected { arm, how } => match how {
            Selection::Random {
                rollout,
                breakpoint,
            } => format!(
                "selecting game '{}' randomly (rollout {rollout} <= {breakpoint})\n\n",
                arm.label()
            ),
            Selection::Oracle => format!("selecting game '{}' by oracle\n\n", arm.label()),
        },
        Event::Prune {
            arm,
            step,
            budget,
            parent,
            child,
        } => format!(
            "playing game '{}', budget {step}/{budget}\nparent: {}\nchild: {}\n\n",
            arm.label(),
            sizes_line(parent),
            sizes_line(child)
        ),
        Event::RequirementMet { arm } => format!(
            "selected child node satisfies {0} count requirement, stopping {0} pruning\n",
            arm.label()
        ),
        Event::EpisodeEnd { sizes } => format!(
            "Budget ended with {} nodes, {} graph features, and with {} downstream features\n",
            sizes.nodes, sizes.node_features, sizes.downstream
        ),
        Event::OracleUpdate { arm, refit } => format!(
            "Oracle for game '{}' is {}\n\n",
            arm.label(),
            if *refit { "refit" } else { "not refit" }
        ),
    }
}

pub fn emit_log(events: &[Event]) -> String {
    let mut out = String::new();
    for e in events {
        let _ = write!(out, "{}", render_event(e));
    }
    out
}

fn bad(line_no: usize, line: &str) -> Error {
    Error::Parse {
        path: "log".into(),
        message: format!("line {}: unexpected {line:?}", line_no + 1),
    }
}

fn quoted_arm(s: &str, line_no: usize, line: &str) -> Result<(ComponentKind, String)> {
    let s = s.strip_prefix('\'').ok_or_else(|| bad(line_no, line))?;
    let end = s.find('\'').ok_or_else(|| bad(line_no, line))?;
    let arm = ComponentKind::from_label(&s[..end]).ok_or_else(|| bad(line_no, line))?;
    Ok((arm, s[end + 1..].to_string()))
}

fn num(s: &str, line_no: usize, line: &str) -> Result<usize> {
    s.trim().parse().map_err(|_| bad(line_no, line))
}

fn parse_sizes(s: &str, line_no: usize, line: &str) -> Result<PerComponent<usize>> {
    let parts: Vec<&str> = s.split(", ").collect();
    let [a, b, c] = parts.as_slice() else {
        return Err(bad(line_no, line));
    };
    let take = |p: &str, suffix: &str| -> Result<usize> {
        num(p.strip_suffix(suffix).ok_or_else(|| bad(line_no, line))?, line_no, line)
    };
    Ok(PerComponent::new(
        take(c, " downstream features")?,
        take(a, " nodes")?,
        take(b, " graph features")?,
    ))
}

/// Parses rendered log text back into events. Fails on any line outside the grammar
/// or on a missing blank separator.
pub fn parse_log(text: &str) -> Result<Vec<Event>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut events = Vec::new();
    let mut i = 0;
    let blank = |i: usize| -> Result<()> {
        match lines.get(i) {
            Some(l) if l.is_empty() => Ok(()),
            Some(l) => Err(bad(i, l)),
            None => Err(bad(i, "<end of log>")),
        }
    };
    while i < lines.len() {
        let line = lines[i];
        if let Some(rest) = line.strip_prefix("Rollout ") {
            let (frac, tail) = rest.split_once(", ").ok_or_else(|| bad(i, line))?;
            let (r, k) = frac.split_once('/').ok_or_else(|| bad(i, line))?;
            let n = tail
                .strip_suffix(" subgraphs have been explored.")
                .ok_or_else(|| bad(i, line))?;
            events.push(Event::RolloutStart {
                rollout: num(r, i, line)?,
                kappa: num(k, i, line)?,
                explored: num(n, i, line)?,
            });
            i += 1;
        } else if let Some(rest) = line.strip_prefix("selecting game ") {
            let (arm, tail) = quoted_arm(rest, i, line)?;
            let how = if tail == " by oracle" {
                Selection::Oracle
            } else {
                let inner = tail
                    .strip_prefix(" randomly (rollout ")
                    .and_then(|t| t.strip_suffix(')'))
                    .ok_or_else(|| bad(i, line))?;
                let (r, b) = inner.split_once(" <= ").ok_or_else(|| bad(i, line))?;
                Selection::Random {
                    rollout: num(r, i, line)?,
                    breakpoint: num(b, i, line)?,
                }
            };
            events.push(Event::ArmSelected { arm, how });
            blank(i + 1)?;
            i += 2;
        } else if let Some(rest) = line.strip_prefix("playing game ") {
            let (arm, tail) = quoted_arm(rest, i, line)?;
            let frac = tail.strip_prefix(", budget ").ok_or_else(|| bad(i, line))?;
            let (k, b) = frac.split_once('/').ok_or_else(|| bad(i, line))?;
            let p_line = lines.get(i + 1).copied().unwrap_or("");
            let c_line = lines.get(i + 2).copied().unwrap_or("");
            let parent = parse_sizes(p_line.strip_prefix("parent: ").ok_or_else(|| bad(i + 1, p_line))?, i + 1, p_line)?;
            let child = parse_sizes(c_line.strip_prefix("child: ").ok_or_else(|| bad(i + 2, c_line))?, i + 2, c_line)?;
            blank(i + 3)?;
            events.push(Event::Prune {
                arm,
                step: num(k, i, line)?,
                budget: num(b, i, line)?,
                parent,
                child,
            });
            i += 4;
        } else if let Some(rest) = line.strip_prefix("selected child node satisfies ") {
            let (label, tail) = rest.split_once(" count requirement, stopping ").ok_or_else(|| bad(i, line))?;
            let arm = ComponentKind::from_label(label).ok_or_else(|| bad(i, line))?;
            if tail != format!("{label} pruning") {
                return Err(bad(i, line));
            }
            events.push(Event::RequirementMet { arm });
            i += 1;
        } else if let Some(rest) = line.strip_prefix("Budget ended with ") {
            let (a, rest) = rest.split_once(" nodes, ").ok_or_else(|| bad(i, line))?;
            let (b, rest) = rest.split_once(" graph features, and with ").ok_or_else(|| bad(i, line))?;
            let c = rest.strip_suffix(" downstream features").ok_or_else(|| bad(i, line))?;
            events.push(Event::EpisodeEnd {
                sizes: PerComponent::new(num(c, i, line)?, num(a, i, line)?, num(b, i, line)?),
            });
            i += 1;
        } else if let Some(rest) = line.strip_prefix("Oracle for game ") {
            let (arm, tail) = quoted_arm(rest, i, line)?;
            let refit = match tail.as_str() {
                " is refit" => true,
                " is not refit" => false,
                _ => return Err(bad(i, line)),
            };
            events.push(Event::OracleUpdate { arm, refit });
            blank(i + 1)?;
            i += 2;
        } else {
            return Err(bad(i, line));
        }
    }
    Ok(events)
}

/// Structural checks on a parsed event stream: each prune changes exactly one
/// component (its own arm's) by at least one, steps count up from 1 within an
/// episode, and consecutive prunes chain parent to child.
pub fn check_consistency(events: &[Event]) -> Result<()> {
    let fail = |m: String| Err(Error::Invariant(m));
    let mut last_child: Option<PerComponent<usize>> = None;
    let mut expected_step = 1;
    for (n, e) in events.iter().enumerate() {
        match e {
            Event::Prune {
                arm,
                step,
                budget,
                parent,
                child,
            } => {
                if *step != expected_step || step > budget {
                    return fail(format!("event {n}: step {step}/{budget}, expected {expected_step}"));
                }
                if expected_step > 1 && last_child.as_ref() != Some(parent) {
                    return fail(format!("event {n}: parent does not match previous child"));
                }
                for kind in ComponentKind::ALL {
                    let (p, c) = (*parent.get(kind), *child.get(kind));
                    let ok = if kind == *arm { c < p } else { c == p };
                    if !ok {
                        return fail(format!("event {n}: {kind} went {p} -> {c} in a {arm} prune"));
                    }
                }
                last_child = Some(*child);
                expected_step += 1;
            }
            Event::EpisodeEnd { sizes } => {
                if let Some(c) = &last_child {
                    if c != sizes {
                        return fail(format!("event {n}: episode end does not match last child"));
                    }
                }
                last_child = None;
                expected_step = 1;
            }
            _ => {}
        }
    }
    Ok(())
}
