//! Logical loop declarations and the `loop_spec_string` schedule language.
//!
//! A [`LoopNestDecl`] names up to 26 logical loops (`a`..`z` in declaration
//! order), each with a start, an exclusive bound, a base step and an optional
//! list of blocking steps. A spec string then picks the concrete nest:
//!
//! ```text
//! spec      := body ( "@" ws directive )?
//! body      := item+
//! item      := lower | upper grid? | "|"
//! grid      := "{" ("R"|"C"|"L") ":" uint "}"
//! directive := "schedule(" ("static"|"dynamic") "," uint ")"
//! ```
//!
//! Character order is loop order, repetitions are blocking levels, uppercase
//! marks a parallel loop and `|` requests a team barrier after a loop.

use std::fmt;

use thiserror::Error;

/// Highest number of logical loops a nest may declare (`a`..=`z`).
pub const MAX_LOOPS: usize = 26;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LoopSpecError {
    #[error("empty loop spec string")]
    Empty,
    #[error("invalid loop declaration: {0}")]
    InvalidDecl(String),
    #[error("character {ch:?} at byte {pos} is not a declared loop mnemonic")]
    UnknownMnemonic { ch: char, pos: usize },
    #[error("loop '{mnemonic}' appears {count} times but allows at most {max}")]
    TooManyOccurrences { mnemonic: char, count: usize, max: usize },
    #[error("declared loop '{mnemonic}' does not appear in the spec string")]
    MissingMnemonic { mnemonic: char },
    #[error("loop '{mnemonic}': {detail}")]
    ImperfectNesting { mnemonic: char, detail: String },
    #[error("mixed or non-contiguous parallel loops: {0}")]
    MixedParModes(String),
    #[error("bad directive: {0}")]
    BadDirective(String),
    #[error("bad grid annotation at byte {pos}: {detail}")]
    BadGridAnnotation { pos: usize, detail: String },
}

/// One logical loop: `for i in (start..bound).step_by(step)`, optionally
/// blocked by `block_steps` (outermost first).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LoopSpec {
    pub start: usize,
    pub bound: usize,
    pub step: usize,
    pub block_steps: Vec<usize>,
}

impl LoopSpec {
    pub fn new(start: usize, bound: usize, step: usize) -> Self {
        LoopSpec { start, bound, step, block_steps: Vec::new() }
    }

    pub fn blocked(start: usize, bound: usize, step: usize, block_steps: Vec<usize>) -> Self {
        LoopSpec { start, bound, step, block_steps }
    }

    /// Number of base-step iterations, `(bound - start) / step`.
    pub fn trip_count(&self) -> usize {
        (self.bound - self.start) / self.step
    }

    /// Effective step of each occurrence when the loop appears `n` times.
    fn effective_steps(&self, n: usize) -> Vec<usize> {
        let mut steps: Vec<usize> = self.block_steps[..n - 1].to_vec();
        steps.push(self.step);
        steps
    }
}

/// Ordered list of logical loops; loop `i` gets mnemonic `b'a' + i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LoopNestDecl {
    loops: Vec<LoopSpec>,
}

impl LoopNestDecl {
    pub fn new(loops: Vec<LoopSpec>) -> Result<Self, LoopSpecError> {
        if loops.is_empty() || loops.len() > MAX_LOOPS {
            return Err(LoopSpecError::InvalidDecl(format!(
                "expected 1..={MAX_LOOPS} loops, got {}",
                loops.len()
            )));
        }
        for (i, l) in loops.iter().enumerate() {
            let m = mnemonic(i);
            if l.start > l.bound {
                return Err(LoopSpecError::InvalidDecl(format!(
                    "loop '{m}': start {} > bound {}",
                    l.start, l.bound
                )));
            }
            if l.step == 0 || l.block_steps.contains(&0) {
                return Err(LoopSpecError::InvalidDecl(format!("loop '{m}': zero step")));
            }
        }
        Ok(LoopNestDecl { loops })
    }

    pub fn loops(&self) -> &[LoopSpec] {
        &self.loops
    }

    pub fn len(&self) -> usize {
        self.loops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loops.is_empty()
    }

    pub fn get(&self, idx: usize) -> &LoopSpec {
        &self.loops[idx]
    }
}

/// Mnemonic of the loop declared at position `idx`.
pub fn mnemonic(idx: usize) -> char {
    (b'a' + idx as u8) as char
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParMode {
    Serial,
    /// Contiguous uppercase run, partitioned with collapse semantics.
    WorkShare,
    /// Uppercase loops annotated with `{R:n}`, `{C:n}` or `{L:n}`.
    ExplicitGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GridAxis {
    R,
    C,
    L,
}

impl GridAxis {
    pub fn index(self) -> usize {
        match self {
            GridAxis::R => 0,
            GridAxis::C => 1,
            GridAxis::L => 2,
        }
    }

    fn letter(self) -> char {
        match self {
            GridAxis::R => 'R',
            GridAxis::C => 'C',
            GridAxis::L => 'L',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScheduleKind {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Directive {
    pub kind: ScheduleKind,
    pub chunk: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LoopInstance {
    /// Index of the logical loop (0 for `a`).
    pub loop_idx: usize,
    /// Which occurrence of this mnemonic, counted left to right.
    pub occurrence: usize,
    pub effective_step: usize,
    pub parallel: bool,
    pub grid_axis: Option<GridAxis>,
    pub barrier_after: bool,
}

impl LoopInstance {
    pub fn mnemonic(&self) -> char {
        mnemonic(self.loop_idx)
    }
}

/// Parsed form of a spec string, validated against a declaration.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Schedule {
    pub instances: Vec<LoopInstance>,
    pub par_mode: ParMode,
    /// `(R, C, L)`; all ones unless `par_mode` is `ExplicitGrid`.
    pub grid_dims: (usize, usize, usize),
    pub directive: Option<Directive>,
    pub source_string: String,
}

impl Schedule {
    pub fn grid_size(&self) -> usize {
        self.grid_dims.0 * self.grid_dims.1 * self.grid_dims.2
    }

    /// Positions of the parallel instances, in nest order.
    pub fn parallel_positions(&self) -> Vec<usize> {
        self.instances
            .iter()
            .enumerate()
            .filter(|(_, i)| i.parallel)
            .map(|(p, _)| p)
            .collect()
    }

    /// Number of occurrences of the logical loop `loop_idx`.
    pub fn occurrences(&self, loop_idx: usize) -> usize {
        self.instances.iter().filter(|i| i.loop_idx == loop_idx).count()
    }

    /// Deterministic key over the structure of the schedule. Effective steps
    /// and loop bounds are deliberately left out, so one key serves every
    /// runtime size of the same nest shape.
    pub fn canonical_signature(&self) -> String {
        let mut sig = String::with_capacity(self.instances.len() * 4 + 16);
        sig.push_str(match self.par_mode {
            ParMode::Serial => "S",
            ParMode::WorkShare => "W",
            ParMode::ExplicitGrid => "G",
        });
        sig.push(':');
        for inst in &self.instances {
            let m = inst.mnemonic();
            sig.push(if inst.parallel { m.to_ascii_uppercase() } else { m });
            sig.push_str(&inst.occurrence.to_string());
            if let Some(axis) = inst.grid_axis {
                sig.push(axis.letter());
            }
            if inst.barrier_after {
                sig.push('|');
            }
            sig.push('.');
        }
        if self.par_mode == ParMode::ExplicitGrid {
            let (r, c, l) = self.grid_dims;
            sig.push_str(&format!("grid{r}x{c}x{l}"));
        }
        if let Some(d) = self.directive {
            let kind = match d.kind {
                ScheduleKind::Static => "static",
                ScheduleKind::Dynamic => "dynamic",
            };
            sig.push_str(&format!("@{kind},{}", d.chunk));
        }
        sig
    }
}

/// Free-function form of [`Schedule::canonical_signature`].
pub fn canonical_signature(schedule: &Schedule) -> String {
    schedule.canonical_signature()
}

struct RawItem {
    loop_idx: usize,
    parallel: bool,
    grid: Option<(GridAxis, usize)>,
    barrier_after: bool,
}

/// Parses `spec` against `decl`.
pub fn parse(decl: &LoopNestDecl, spec: &str) -> Result<Schedule, LoopSpecError> {
    let (body, directive_text) = match spec.find('@') {
        Some(at) => (&spec[..at], Some(&spec[at + 1..])),
        None => (spec, None),
    };
    let body = body.trim();
    if body.is_empty() {
        return Err(LoopSpecError::Empty);
    }
    let body_offset = spec.find(body).unwrap_or(0);

    let items = parse_body(decl, body, body_offset)?;
    let directive = directive_text.map(parse_directive).transpose()?;

    // Occurrence counting and effective steps.
    let n_loops = decl.len();
    let mut counts = vec![0usize; n_loops];
    for it in &items {
        counts[it.loop_idx] += 1;
    }
    for (idx, &count) in counts.iter().enumerate() {
        let max = 1 + decl.get(idx).block_steps.len();
        if count == 0 {
            return Err(LoopSpecError::MissingMnemonic { mnemonic: mnemonic(idx) });
        }
        if count > max {
            return Err(LoopSpecError::TooManyOccurrences { mnemonic: mnemonic(idx), count, max });
        }
    }
    let mut steps: Vec<Vec<usize>> = Vec::with_capacity(n_loops);
    for (idx, &count) in counts.iter().enumerate() {
        let l = decl.get(idx);
        let chain = l.effective_steps(count);
        check_nesting(idx, l, &chain)?;
        steps.push(chain);
    }

    let mut seen = vec![0usize; n_loops];
    let instances: Vec<LoopInstance> = items
        .iter()
        .map(|it| {
            let occ = seen[it.loop_idx];
            seen[it.loop_idx] += 1;
            LoopInstance {
                loop_idx: it.loop_idx,
                occurrence: occ,
                effective_step: steps[it.loop_idx][occ],
                parallel: it.parallel,
                grid_axis: it.grid.map(|(a, _)| a),
                barrier_after: it.barrier_after,
            }
        })
        .collect();

    let (par_mode, grid_dims) = classify_parallelism(&items)?;
    if par_mode == ParMode::ExplicitGrid && directive.is_some() {
        return Err(LoopSpecError::MixedParModes(
            "scheduling directives apply to work-shared loops, not explicit grids".into(),
        ));
    }

    Ok(Schedule {
        instances,
        par_mode,
        grid_dims,
        directive,
        source_string: spec.to_string(),
    })
}

fn parse_body(decl: &LoopNestDecl, body: &str, offset: usize) -> Result<Vec<RawItem>, LoopSpecError> {
    let bytes = body.as_bytes();
    let n_loops = decl.len();
    let mut items: Vec<RawItem> = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        let pos = offset + i;
        match b {
            b'a'..=b'z' | b'A'..=b'Z' => {
                let idx = (b.to_ascii_lowercase() - b'a') as usize;
                if idx >= n_loops {
                    return Err(LoopSpecError::UnknownMnemonic { ch: b as char, pos });
                }
                items.push(RawItem {
                    loop_idx: idx,
                    parallel: b.is_ascii_uppercase(),
                    grid: None,
                    barrier_after: false,
                });
                i += 1;
            }
            b'{' => {
                let Some(last) = items.last_mut() else {
                    return Err(LoopSpecError::BadGridAnnotation {
                        pos,
                        detail: "annotation without a loop".into(),
                    });
                };
                if !last.parallel || last.grid.is_some() {
                    return Err(LoopSpecError::BadGridAnnotation {
                        pos,
                        detail: "annotation must follow an uppercase loop character".into(),
                    });
                }
                let close = body[i..].find('}').ok_or_else(|| LoopSpecError::BadGridAnnotation {
                    pos,
                    detail: "unterminated '{'".into(),
                })?;
                let inner = &body[i + 1..i + close];
                last.grid = Some(parse_grid(inner, pos)?);
                i += close + 1;
            }
            b'|' => {
                let Some(last) = items.last_mut() else {
                    return Err(LoopSpecError::UnknownMnemonic { ch: '|', pos });
                };
                last.barrier_after = true;
                i += 1;
            }
            _ => {
                let ch = body[i..].chars().next().unwrap_or('\u{fffd}');
                return Err(LoopSpecError::UnknownMnemonic { ch, pos });
            }
        }
    }
    Ok(items)
}

fn parse_grid(inner: &str, pos: usize) -> Result<(GridAxis, usize), LoopSpecError> {
    let bad = |detail: &str| LoopSpecError::BadGridAnnotation { pos, detail: detail.to_string() };
    let (axis, ways) = inner.split_once(':').ok_or_else(|| bad("expected {AXIS:ways}"))?;
    let axis = match axis {
        "R" => GridAxis::R,
        "C" => GridAxis::C,
        "L" => GridAxis::L,
        _ => return Err(bad("axis must be R, C or L")),
    };
    let ways = parse_uint(ways).ok_or_else(|| bad("ways must be a positive integer"))?;
    Ok((axis, ways))
}

fn parse_uint(s: &str) -> Option<usize> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse::<usize>().ok().filter(|&v| v > 0)
}

fn parse_directive(text: &str) -> Result<Directive, LoopSpecError> {
    let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    let bad = || LoopSpecError::BadDirective(text.trim().to_string());
    let args = compact
        .strip_prefix("schedule(")
        .and_then(|rest| rest.strip_suffix(')'))
        .ok_or_else(bad)?;
    let (kind, chunk) = args.split_once(',').ok_or_else(bad)?;
    let kind = match kind {
        "static" => ScheduleKind::Static,
        "dynamic" => ScheduleKind::Dynamic,
        _ => return Err(bad()),
    };
    let chunk = parse_uint(chunk).ok_or_else(bad)?;
    Ok(Directive { kind, chunk })
}

fn check_nesting(idx: usize, l: &LoopSpec, chain: &[usize]) -> Result<(), LoopSpecError> {
    let span = l.bound - l.start;
    let m = mnemonic(idx);
    if span % chain[0] != 0 {
        return Err(LoopSpecError::ImperfectNesting {
            mnemonic: m,
            detail: format!("range {span} is not a multiple of outermost step {}", chain[0]),
        });
    }
    for w in chain.windows(2) {
        if w[0] % w[1] != 0 {
            return Err(LoopSpecError::ImperfectNesting {
                mnemonic: m,
                detail: format!("step {} is not a multiple of inner step {}", w[0], w[1]),
            });
        }
    }
    Ok(())
}

fn classify_parallelism(items: &[RawItem]) -> Result<(ParMode, (usize, usize, usize)), LoopSpecError> {
    let parallel: Vec<usize> = items
        .iter()
        .enumerate()
        .filter(|(_, it)| it.parallel)
        .map(|(p, _)| p)
        .collect();
    if parallel.is_empty() {
        return Ok((ParMode::Serial, (1, 1, 1)));
    }
    let annotated = parallel.iter().filter(|&&p| items[p].grid.is_some()).count();
    if annotated == 0 {
        if parallel.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(LoopSpecError::MixedParModes(
                "work-shared parallel loops must be consecutive".into(),
            ));
        }
        return Ok((ParMode::WorkShare, (1, 1, 1)));
    }
    if annotated != parallel.len() {
        return Err(LoopSpecError::MixedParModes(
            "grid-annotated and bare uppercase loops in one string".into(),
        ));
    }
    let mut dims = [1usize; 3];
    let mut used = [false; 3];
    for &p in &parallel {
        let (axis, ways) = items[p].grid.expect("annotated");
        if used[axis.index()] {
            return Err(LoopSpecError::BadGridAnnotation {
                pos: p,
                detail: format!("grid axis {} used twice", axis.letter()),
            });
        }
        used[axis.index()] = true;
        dims[axis.index()] = ways;
    }
    Ok((ParMode::ExplicitGrid, (dims[0], dims[1], dims[2])))
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source_string)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gemm_decl() -> LoopNestDecl {
        // Kb = Mb = Nb = 8; b blocked {4, 2}, c blocked {4}
        LoopNestDecl::new(vec![
            LoopSpec::new(0, 8, 1),
            LoopSpec::blocked(0, 8, 1, vec![4, 2]),
            LoopSpec::blocked(0, 8, 1, vec![4]),
        ])
        .unwrap()
    }

    fn order(s: &Schedule) -> Vec<(char, usize, bool)> {
        s.instances.iter().map(|i| (i.mnemonic(), i.occurrence, i.parallel)).collect()
    }

    #[test]
    fn collapse_example() {
        let s = parse(&gemm_decl(), "bcaBCb").unwrap();
        assert_eq!(
            order(&s),
            vec![
                ('b', 0, false),
                ('c', 0, false),
                ('a', 0, false),
                ('b', 1, true),
                ('c', 1, true),
                ('b', 2, false)
            ]
        );
        let steps: Vec<usize> = s.instances.iter().map(|i| i.effective_step).collect();
        assert_eq!(steps, vec![4, 4, 1, 2, 1, 1]);
        assert_eq!(s.par_mode, ParMode::WorkShare);
        assert_eq!(s.parallel_positions(), vec![3, 4]);
        assert!(s.directive.is_none());
    }

    #[test]
    fn grid_example() {
        let s = parse(&gemm_decl(), "bC{R:16}aB{C:4}cb").unwrap();
        assert_eq!(s.par_mode, ParMode::ExplicitGrid);
        assert_eq!(s.grid_dims, (16, 4, 1));
        assert_eq!(s.instances[1].grid_axis, Some(GridAxis::R));
        assert_eq!(s.instances[1].occurrence, 0);
        assert_eq!(s.instances[3].grid_axis, Some(GridAxis::C));
        assert_eq!((s.instances[3].mnemonic(), s.instances[3].occurrence), ('b', 1));
    }

    #[test]
    fn serial_and_directive() {
        let s = parse(&gemm_decl(), "abc").unwrap();
        assert_eq!(s.par_mode, ParMode::Serial);
        assert!(s.instances.iter().all(|i| !i.parallel));

        let s = parse(&gemm_decl(), "bcaBCb @ schedule(dynamic,1)").unwrap();
        assert_eq!(s.directive, Some(Directive { kind: ScheduleKind::Dynamic, chunk: 1 }));
        let s2 = parse(&gemm_decl(), "bcaBCb@schedule( static , 3 )").unwrap();
        assert_eq!(s2.directive, Some(Directive { kind: ScheduleKind::Static, chunk: 3 }));
    }

    #[test]
    fn barrier_marks_previous_loop() {
        let s = parse(&gemm_decl(), "bcaBC|b").unwrap();
        let flags: Vec<bool> = s.instances.iter().map(|i| i.barrier_after).collect();
        assert_eq!(flags, vec![false, false, false, false, true, false]);
    }

    #[test]
    fn error_classes() {
        let d = gemm_decl();
        let cases: &[(&str, fn(&LoopSpecError) -> bool)] = &[
            ("", |e| matches!(e, LoopSpecError::Empty)),
            ("abcd", |e| matches!(e, LoopSpecError::UnknownMnemonic { ch: 'd', .. })),
            ("ab1c", |e| matches!(e, LoopSpecError::UnknownMnemonic { ch: '1', .. })),
            ("aabc", |e| matches!(e, LoopSpecError::TooManyOccurrences { mnemonic: 'a', .. })),
            ("ab", |e| matches!(e, LoopSpecError::MissingMnemonic { mnemonic: 'c' })),
            ("aBcC", |e| matches!(e, LoopSpecError::MixedParModes(_))),
            ("aB{R:2}C", |e| matches!(e, LoopSpecError::MixedParModes(_))),
            ("abc @ schedule(guided,1)", |e| matches!(e, LoopSpecError::BadDirective(_))),
            ("abc @ schedule(static,0)", |e| matches!(e, LoopSpecError::BadDirective(_))),
            ("aB{X:2}c", |e| matches!(e, LoopSpecError::BadGridAnnotation { .. })),
            ("ab{R:2}c", |e| matches!(e, LoopSpecError::BadGridAnnotation { .. })),
            ("aB{R:2}C{R:2}", |e| matches!(e, LoopSpecError::BadGridAnnotation { .. })),
        ];
        for (spec, check) in cases {
            let err = parse(&d, spec).unwrap_err();
            assert!(check(&err), "{spec:?} -> {err:?}");
        }
    }

    #[test]
    fn imperfect_nesting() {
        let d = LoopNestDecl::new(vec![LoopSpec::blocked(0, 12, 1, vec![5])]).unwrap();
        assert!(matches!(parse(&d, "aa"), Err(LoopSpecError::ImperfectNesting { .. })));
        // single occurrence only uses the base step
        assert!(parse(&d, "a").is_ok());

        let d = LoopNestDecl::new(vec![LoopSpec::blocked(0, 12, 4, vec![6])]).unwrap();
        assert!(matches!(parse(&d, "aa"), Err(LoopSpecError::ImperfectNesting { .. })));
        let d = LoopNestDecl::new(vec![LoopSpec::new(0, 10, 4)]).unwrap();
        assert!(matches!(parse(&d, "a"), Err(LoopSpecError::ImperfectNesting { .. })));
    }

    #[test]
    fn occurrence_bound() {
        let d = LoopNestDecl::new(vec![
            LoopSpec::new(0, 4, 1),
            LoopSpec::blocked(0, 4, 1, vec![2]),
            LoopSpec::new(0, 4, 1),
        ])
        .unwrap();
        assert!(matches!(
            parse(&d, "abbbc"),
            Err(LoopSpecError::TooManyOccurrences { mnemonic: 'b', count: 3, max: 2 })
        ));
    }

    #[test]
    fn signatures() {
        let d = gemm_decl();
        let sig = |s: &str| parse(&d, s).unwrap().canonical_signature();
        assert_eq!(sig("bcaBCb"), sig("bcaBCb"));
        assert_ne!(sig("bcaBCb"), sig("bcaBcb"));
        assert_ne!(sig("abc"), sig("acb"));
        assert_ne!(sig("bcaBCb"), sig("bcaBCb @ schedule(dynamic,1)"));
        assert_ne!(sig("bcaBC|b"), sig("bcaBCb"));
        // the signature ignores runtime bounds
        let other = LoopNestDecl::new(vec![
            LoopSpec::new(0, 32, 2),
            LoopSpec::blocked(0, 64, 2, vec![16, 8]),
            LoopSpec::blocked(0, 16, 1, vec![8]),
        ])
        .unwrap();
        assert_eq!(sig("bcaBCb"), parse(&other, "bcaBCb").unwrap().canonical_signature());
    }

    #[test]
    fn decl_validation() {
        assert!(LoopNestDecl::new(vec![]).is_err());
        assert!(LoopNestDecl::new(vec![LoopSpec::new(5, 4, 1)]).is_err());
        assert!(LoopNestDecl::new(vec![LoopSpec::new(0, 4, 0)]).is_err());
        assert!(LoopNestDecl::new(vec![LoopSpec::new(0, 4, 1); 27]).is_err());
        assert!(LoopNestDecl::new(vec![LoopSpec::new(0, 4, 1); 26]).is_ok());
    }
}
