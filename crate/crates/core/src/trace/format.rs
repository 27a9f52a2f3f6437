//! Line-oriented text encoding of a [`Trace`].
//!
//! ```text
//! # comment
//! space 0x100000
//! region 0x0 0x10000
//! name 3 quantize
//! cpu KB 3 function
//! cpu LD 0x1000 4
//! cpu ST 0x1000 4
//! pim COMP pim 10
//! cpu PEI add 0x40 5
//! cpu FENCE
//! cpu KE 3
//! ```
//!
//! Header lines (`space`, `region`, `name`) come before the first event and
//! `space` is mandatory. Addresses are lowercase hex with a `0x` prefix,
//! everything else is decimal. The writer emits the header, then the whole
//! cpu stream, then the whole pim stream; parsing accepts the two streams
//! interleaved in any order.

use std::fmt::Write as _;
use std::path::Path;

use super::{
    check_event, Agent, Granularity, KernelId, PeiOpcode, Region, Trace, TraceError, TraceEvent,
};

pub fn write_trace_string(trace: &Trace) -> String {
    let mut out = String::new();
    let h = &trace.header;
    writeln!(out, "space {:#x}", h.vaddr_space_size).unwrap();
    for r in &h.pim_regions {
        writeln!(out, "region {:#x} {:#x}", r.base, r.bound).unwrap();
    }
    for (id, name) in &h.kernel_names {
        writeln!(out, "name {id} {name}").unwrap();
    }
    for agent in [Agent::Cpu, Agent::Pim] {
        for ev in trace.stream(agent) {
            write_event(&mut out, agent, ev);
        }
    }
    out
}

fn write_event(out: &mut String, agent: Agent, ev: &TraceEvent) {
    let a = agent.as_str();
    match *ev {
        TraceEvent::Compute { site, cycles } => writeln!(out, "{a} COMP {site} {cycles}"),
        TraceEvent::Load { vaddr, bytes } => writeln!(out, "{a} LD {vaddr:#x} {bytes}"),
        TraceEvent::Store { vaddr, bytes } => writeln!(out, "{a} ST {vaddr:#x} {bytes}"),
        TraceEvent::KernelBegin {
            kernel_id,
            granularity,
        } => writeln!(out, "{a} KB {kernel_id} {}", granularity.as_str()),
        TraceEvent::KernelEnd { kernel_id } => writeln!(out, "{a} KE {kernel_id}"),
        TraceEvent::Pei {
            opcode,
            vaddr,
            operand,
        } => writeln!(out, "{a} PEI {} {vaddr:#x} {operand}", opcode.as_str()),
        TraceEvent::Fence => writeln!(out, "{a} FENCE"),
    }
    .unwrap();
}

pub fn write_trace(trace: &Trace, path: &Path) -> std::io::Result<()> {
    std::fs::write(path, write_trace_string(trace))
}

pub fn parse_trace(path: &Path) -> Result<Trace, TraceError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| TraceError::Io(format!("{}: {e}", path.display())))?;
    parse_trace_str(&text)
}

fn malformed(line: usize, msg: impl Into<String>) -> TraceError {
    TraceError::Malformed {
        line,
        msg: msg.into(),
    }
}

fn parse_hex(line: usize, s: &str) -> Result<u64, TraceError> {
    let digits = s
        .strip_prefix("0x")
        .ok_or_else(|| malformed(line, format!("expected 0x-prefixed address, got {s:?}")))?;
    u64::from_str_radix(digits, 16).map_err(|e| malformed(line, format!("bad address {s:?}: {e}")))
}

fn parse_num<T: std::str::FromStr>(line: usize, s: &str, what: &str) -> Result<T, TraceError>
where
    T::Err: std::fmt::Display,
{
    s.parse()
        .map_err(|e| malformed(line, format!("bad {what} {s:?}: {e}")))
}

pub fn parse_trace_str(text: &str) -> Result<Trace, TraceError> {
    let mut trace = Trace::default();
    let mut space: Option<u64> = None;
    let mut stacks: [Vec<KernelId>; 2] = [Vec::new(), Vec::new()];
    let mut last_line = 0;

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        last_line = line;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        let in_events = !trace.cpu.is_empty() || !trace.pim.is_empty();
        match fields[0] {
            "space" | "region" | "name" if in_events => {
                return Err(malformed(line, "header line after the first event"));
            }
            "space" => {
                expect_len(line, &fields, 2)?;
                if space.is_some() {
                    return Err(malformed(line, "duplicate space line"));
                }
                let s = parse_hex(line, fields[1])?;
                space = Some(s);
                trace.header.vaddr_space_size = s;
            }
            "region" => {
                expect_len(line, &fields, 3)?;
                let base = parse_hex(line, fields[1])?;
                let bound = parse_hex(line, fields[2])?;
                trace.header.pim_regions.push(Region { base, bound });
            }
            "name" => {
                expect_len(line, &fields, 3)?;
                let id: KernelId = parse_num(line, fields[1], "kernel id")?;
                trace.header.kernel_names.insert(id, fields[2].to_string());
            }
            "cpu" | "pim" => {
                let agent = if fields[0] == "cpu" { Agent::Cpu } else { Agent::Pim };
                let space = space.ok_or_else(|| malformed(line, "event before space line"))?;
                let ev = parse_event(line, &fields[1..])?;
                let stream = match agent {
                    Agent::Cpu => &mut trace.cpu,
                    Agent::Pim => &mut trace.pim,
                };
                check_event(agent, stream.len(), &ev, space, &mut stacks[agent.id() as usize])
                    .map_err(|e| malformed(line, e.to_string()))?;
                stream.push(ev);
            }
            other => return Err(malformed(line, format!("unknown directive {other:?}"))),
        }
    }
    if space.is_none() {
        return Err(malformed(last_line.max(1), "missing space line"));
    }
    for (agent, stack) in [Agent::Cpu, Agent::Pim].into_iter().zip(&stacks) {
        if let Some(open) = stack.last() {
            return Err(TraceError::Nesting {
                agent,
                index: trace.stream(agent).len(),
                msg: format!("kernel {open} never ends"),
            });
        }
    }
    trace.validate()?;
    Ok(trace)
}

fn expect_len(line: usize, fields: &[&str], n: usize) -> Result<(), TraceError> {
    if fields.len() != n {
        return Err(malformed(
            line,
            format!("expected {n} fields, found {}", fields.len()),
        ));
    }
    Ok(())
}

fn parse_event(line: usize, f: &[&str]) -> Result<TraceEvent, TraceError> {
    let Some(&op) = f.first() else {
        return Err(malformed(line, "missing event opcode"));
    };
    let args = &f[1..];
    let arity = |n: usize| {
        if args.len() == n {
            Ok(())
        } else {
            Err(malformed(
                line,
                format!("{op} takes {n} arguments, found {}", args.len()),
            ))
        }
    };
    Ok(match op {
        "COMP" => {
            arity(2)?;
            let site = match args[0] {
                "cpu" => Agent::Cpu,
                "pim" => Agent::Pim,
                s => return Err(malformed(line, format!("bad compute site {s:?}"))),
            };
            TraceEvent::Compute {
                site,
                cycles: parse_num(line, args[1], "cycle count")?,
            }
        }
        "LD" | "ST" => {
            arity(2)?;
            let vaddr = parse_hex(line, args[0])?;
            let bytes = parse_num(line, args[1], "byte count")?;
            if op == "LD" {
                TraceEvent::Load { vaddr, bytes }
            } else {
                TraceEvent::Store { vaddr, bytes }
            }
        }
        "KB" => {
            arity(2)?;
            TraceEvent::KernelBegin {
                kernel_id: parse_num(line, args[0], "kernel id")?,
                granularity: Granularity::parse(args[1])
                    .ok_or_else(|| malformed(line, format!("bad granularity {:?}", args[1])))?,
            }
        }
        "KE" => {
            arity(1)?;
            TraceEvent::KernelEnd {
                kernel_id: parse_num(line, args[0], "kernel id")?,
            }
        }
        "PEI" => {
            arity(3)?;
            TraceEvent::Pei {
                opcode: PeiOpcode::parse(args[0])
                    .ok_or_else(|| malformed(line, format!("bad PEI opcode {:?}", args[0])))?,
                vaddr: parse_hex(line, args[1])?,
                operand: parse_num(line, args[2], "operand")?,
            }
        }
        "FENCE" => {
            arity(0)?;
            TraceEvent::Fence
        }
        other => return Err(malformed(line, format!("unknown event {other:?}"))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::gen_quantize_trace;

    #[test]
    fn quantize_round_trip() {
        let t = gen_quantize_trace(10, 0);
        let text = write_trace_string(&t);
        let back = parse_trace_str(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(write_trace_string(&back), text);
    }

    #[test]
    fn end_before_begin_is_nesting_error() {
        let err = parse_trace_str("space 0x1000\ncpu KE 1\ncpu KB 1 function\n").unwrap_err();
        match err {
            TraceError::Malformed { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("before its begin"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unclosed_kernel_is_nesting_error() {
        let err = parse_trace_str("space 0x1000\npim KB 1 function\n").unwrap_err();
        assert!(matches!(err, TraceError::Nesting { agent: Agent::Pim, .. }));
    }

    #[test]
    fn header_only_is_empty_trace() {
        let t = parse_trace_str("space 0x1000\nregion 0x0 0x1000\n").unwrap();
        assert!(t.cpu.is_empty() && t.pim.is_empty());
        assert_eq!(t.header.pim_regions.len(), 1);
    }

    #[test]
    fn malformed_lines_carry_line_numbers() {
        let cases = [
            ("space 0x1000\ncpu LD 1000 4\n", 2),
            ("space 0x1000\n\n# note\ncpu XX\n", 4),
            ("space 0x1000\ncpu LD 0x10\n", 2),
            ("cpu LD 0x10 4\n", 1),
            ("space 0x1000\ncpu KB 1 sideways\n", 2),
            ("space 0x1000\ncpu PEI mul 0x0 1\n", 2),
        ];
        for (text, want) in cases {
            match parse_trace_str(text) {
                Err(TraceError::Malformed { line, .. }) => assert_eq!(line, want, "{text:?}"),
                other => panic!("{text:?}: unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn out_of_space_address_rejected() {
        let err = parse_trace_str("space 0x1000\ncpu LD 0x1000 4\n").unwrap_err();
        match err {
            TraceError::Malformed { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("outside declared space"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn interleaved_streams_parse() {
        let t = parse_trace_str(
            "space 0x1000\ncpu LD 0x0 4\npim COMP pim 3\ncpu PEI add 0x40 5\ncpu FENCE\n",
        )
        .unwrap();
        assert_eq!(t.cpu.len(), 3);
        assert_eq!(t.pim, vec![TraceEvent::Compute { site: Agent::Pim, cycles: 3 }]);
    }
}
