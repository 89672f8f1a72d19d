//! Right-regular stochastic grammars over class symbols.
//!
//! Every rule has the form `source -> class target`. A grammar decides which
//! class may start the next segment given the current context nonterminal and
//! carries the context probability `p(class | source)`.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::dataio::LabelMap;
use crate::error::{invalid, Error, Result};
use crate::{ClassId, Transcript};

/// Stand-in for `ln(0)`; keeps zero-probability rules out of `-inf` arithmetic.
pub const LOG_ZERO: f64 = -1.0e30;

const STOCHASTIC_TOL: f64 = 1e-6;

pub(crate) fn safe_ln(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        LOG_ZERO
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Nonterminal(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Rule {
    pub source: Nonterminal,
    pub label: ClassId,
    pub target: Nonterminal,
    pub prob: f64,
    pub log_prob: f64,
}

impl Rule {
    pub fn new(source: usize, label: ClassId, target: usize, prob: f64) -> Self {
        Rule {
            source: Nonterminal(source),
            label,
            target: Nonterminal(target),
            prob,
            log_prob: safe_ln(prob),
        }
    }
}

/// An immutable right-regular stochastic grammar.
///
/// Rules are stored sorted by `(source, label, target)` with a per-source
/// offset table, so [`Grammar::successors`] is a slice lookup.
#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    num_nonterminals: usize,
    rules: Vec<Rule>,
    offsets: Vec<usize>,
    start: Nonterminal,
    finals: Vec<bool>,
    num_classes: usize,
}

impl Grammar {
    /// Builds and validates a grammar. Outgoing probabilities of every source
    /// must sum to one within `1e-6`.
    pub fn new(
        num_nonterminals: usize,
        mut rules: Vec<Rule>,
        start: Nonterminal,
        finals: &[Nonterminal],
        num_classes: usize,
    ) -> Result<Self> {
        if num_nonterminals == 0 {
            return invalid("grammar needs at least one nonterminal");
        }
        if start.0 >= num_nonterminals {
            return invalid(format!("start nonterminal {} out of range", start.0));
        }
        let mut final_mask = vec![false; num_nonterminals];
        for f in finals {
            if f.0 >= num_nonterminals {
                return invalid(format!("final nonterminal {} out of range", f.0));
            }
            final_mask[f.0] = true;
        }
        if !final_mask.iter().any(|&f| f) {
            return invalid("grammar has no final nonterminal");
        }
        for r in &rules {
            if r.source.0 >= num_nonterminals || r.target.0 >= num_nonterminals {
                return invalid(format!(
                    "rule {} -> {} {} references an unknown nonterminal",
                    r.source.0, r.label, r.target.0
                ));
            }
            if r.label >= num_classes {
                return invalid(format!(
                    "rule label {} out of range for {} classes",
                    r.label, num_classes
                ));
            }
            if !(0.0..=1.0).contains(&r.prob) {
                return invalid(format!("rule probability {} outside [0, 1]", r.prob));
            }
        }
        rules.sort_by(|a, b| (a.source, a.label, a.target).cmp(&(b.source, b.label, b.target)));
        for w in rules.windows(2) {
            if (w[0].source, w[0].label, w[0].target) == (w[1].source, w[1].label, w[1].target) {
                return invalid(format!(
                    "duplicate rule {} -> {} {}",
                    w[0].source.0, w[0].label, w[0].target.0
                ));
            }
        }

        let mut offsets = vec![0usize; num_nonterminals + 1];
        for r in &rules {
            offsets[r.source.0 + 1] += 1;
        }
        for i in 0..num_nonterminals {
            offsets[i + 1] += offsets[i];
        }

        let g = Grammar {
            num_nonterminals,
            rules,
            offsets,
            start,
            finals: final_mask,
            num_classes,
        };

        for h in 0..num_nonterminals {
            let out = g.rules_from(h);
            if out.is_empty() {
                if !g.finals[h] {
                    return invalid(format!("nonterminal {h} is a dead end (no rules, not final)"));
                }
                continue;
            }
            let total: f64 = out.iter().map(|r| r.prob).sum();
            if (total - 1.0).abs() > STOCHASTIC_TOL {
                return invalid(format!(
                    "rules from nonterminal {h} sum to {total}, expected 1"
                ));
            }
        }

        let reachable = g.reachable();
        for h in 0..num_nonterminals {
            if g.finals[h] && !reachable[h] {
                return invalid(format!("final nonterminal {h} is unreachable from start"));
            }
        }
        Ok(g)
    }

    fn rules_from(&self, h: usize) -> &[Rule] {
        &self.rules[self.offsets[h]..self.offsets[h + 1]]
    }

    fn reachable(&self) -> Vec<bool> {
        let mut seen = vec![false; self.num_nonterminals];
        let mut stack = vec![self.start.0];
        seen[self.start.0] = true;
        while let Some(h) = stack.pop() {
            for r in self.rules_from(h) {
                if !seen[r.target.0] {
                    seen[r.target.0] = true;
                    stack.push(r.target.0);
                }
            }
        }
        seen
    }

    /// Rules leaving `h`, ordered by ascending class then target id.
    pub fn successors(&self, h: Nonterminal) -> Result<&[Rule]> {
        if h.0 >= self.num_nonterminals {
            return invalid(format!("unknown nonterminal {}", h.0));
        }
        Ok(self.rules_from(h.0))
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn start(&self) -> Nonterminal {
        self.start
    }

    pub fn is_final(&self, h: Nonterminal) -> bool {
        self.finals.get(h.0).copied().unwrap_or(false)
    }

    pub fn finals(&self) -> impl Iterator<Item = Nonterminal> + '_ {
        self.finals
            .iter()
            .enumerate()
            .filter(|(_, &f)| f)
            .map(|(h, _)| Nonterminal(h))
    }

    pub fn num_nonterminals(&self) -> usize {
        self.num_nonterminals
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Classes that occur on at least one rule.
    pub fn used_classes(&self) -> BTreeSet<ClassId> {
        self.rules.iter().map(|r| r.label).collect()
    }

    /// Best log probability over derivations that emit exactly `labels` and
    /// end in a final nonterminal, or `None` if the sequence is rejected.
    pub fn derivation_log_prob(&self, labels: &[ClassId]) -> Option<f64> {
        let mut frontier: HashMap<usize, f64> = HashMap::from([(self.start.0, 0.0)]);
        for &c in labels {
            let mut next: HashMap<usize, f64> = HashMap::new();
            for (&h, &score) in &frontier {
                for r in self.rules_from(h).iter().filter(|r| r.label == c) {
                    let s = score + r.log_prob;
                    let e = next.entry(r.target.0).or_insert(f64::NEG_INFINITY);
                    if s > *e {
                        *e = s;
                    }
                }
            }
            if next.is_empty() {
                return None;
            }
            frontier = next;
        }
        frontier
            .into_iter()
            .filter(|(h, _)| self.finals[*h])
            .map(|(_, s)| s)
            .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))))
    }

    pub fn accepts(&self, labels: &[ClassId]) -> bool {
        self.derivation_log_prob(labels).is_some()
    }
}

fn check_transcript(transcript: &[ClassId], num_classes: usize) -> Result<()> {
    if transcript.is_empty() {
        return invalid("empty transcript");
    }
    if let Some(&c) = transcript.iter().find(|&&c| c >= num_classes) {
        return invalid(format!("transcript label {c} out of range for {num_classes} classes"));
    }
    Ok(())
}

/// Chain grammar `h0 -> c1 h1 -> ... -> cN hN` that accepts exactly the transcript.
pub fn linear_grammar_from_transcript(transcript: &[ClassId], num_classes: usize) -> Result<Grammar> {
    check_transcript(transcript, num_classes)?;
    let n = transcript.len();
    let rules = transcript
        .iter()
        .enumerate()
        .map(|(i, &c)| Rule::new(i, c, i + 1, 1.0))
        .collect();
    Grammar::new(n + 1, rules, Nonterminal(0), &[Nonterminal(n)], num_classes)
}

/// Prefix-tree grammar estimated from training transcripts.
///
/// Each distinct prefix is a nonterminal, numbered in order of first
/// appearance. A rule's probability is the relative frequency of its
/// continuation among the transcripts that continue past that prefix
/// (counted with multiplicity). A prefix is final iff some transcript ends there.
pub fn estimate_grammar(transcripts: &[Transcript], num_classes: usize) -> Result<Grammar> {
    if transcripts.is_empty() {
        return invalid("no transcripts to estimate a grammar from");
    }
    // children[node]: class -> (child node, count)
    let mut children: Vec<Vec<(ClassId, usize, usize)>> = vec![Vec::new()];
    let mut is_final = vec![false];
    for t in transcripts {
        check_transcript(t, num_classes)?;
        let mut node = 0;
        for &c in t {
            let pos = children[node].iter().position(|&(cls, _, _)| cls == c);
            node = match pos {
                Some(i) => {
                    children[node][i].2 += 1;
                    children[node][i].1
                }
                None => {
                    let id = children.len();
                    children[node].push((c, id, 1));
                    children.push(Vec::new());
                    is_final.push(false);
                    id
                }
            };
        }
        is_final[node] = true;
    }

    let mut rules = Vec::new();
    for (src, kids) in children.iter().enumerate() {
        let total: usize = kids.iter().map(|k| k.2).sum();
        for &(c, dst, count) in kids {
            rules.push(Rule::new(src, c, dst, count as f64 / total as f64));
        }
    }
    let finals: Vec<Nonterminal> = is_final
        .iter()
        .enumerate()
        .filter(|(_, &f)| f)
        .map(|(h, _)| Nonterminal(h))
        .collect();
    Grammar::new(children.len(), rules, Nonterminal(0), &finals, num_classes)
}

/// Writes the line-oriented grammar format with class names from `labels`.
pub fn serialize_grammar(grammar: &Grammar, labels: &LabelMap) -> Result<String> {
    let mut out = String::new();
    out.push_str("# right-regular grammar: <src> <class> <dst> <prob>\n");
    writeln!(out, "start {}", grammar.start.0).unwrap();
    for f in grammar.finals() {
        writeln!(out, "final {}", f.0).unwrap();
    }
    for r in &grammar.rules {
        let name = labels
            .name(r.label)
            .ok_or_else(|| Error::InvalidInput(format!("class {} has no name", r.label)))?;
        writeln!(out, "{} {} {} {}", r.source.0, name, r.target.0, r.prob).unwrap();
    }
    Ok(out)
}

/// Parses the grammar format written by [`serialize_grammar`].
pub fn parse_grammar(text: &str, labels: &LabelMap) -> Result<Grammar> {
    let perr = |line: usize, msg: String| Error::Parse { line, msg };
    let mut start: Option<usize> = None;
    let mut finals: Vec<(usize, usize)> = Vec::new();
    let mut rules: Vec<(usize, Rule)> = Vec::new();
    let mut last_line = 0;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        last_line = line_no;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let parse_id = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| perr(line_no, format!("bad nonterminal id `{s}`")))
        };
        match toks.as_slice() {
            ["start", id] => {
                if start.is_some() {
                    return Err(perr(line_no, "duplicate start line".into()));
                }
                start = Some(parse_id(id)?);
            }
            ["final", id] => finals.push((parse_id(id)?, line_no)),
            [src, class, dst, prob] => {
                let label = labels
                    .index(class)
                    .ok_or_else(|| perr(line_no, format!("unknown class `{class}`")))?;
                let prob: f64 = prob
                    .parse()
                    .map_err(|_| perr(line_no, format!("bad probability `{prob}`")))?;
                if !(0.0..=1.0).contains(&prob) {
                    return Err(perr(line_no, format!("probability {prob} outside [0, 1]")));
                }
                rules.push((line_no, Rule::new(parse_id(src)?, label, parse_id(dst)?, prob)));
            }
            _ => return Err(perr(line_no, format!("malformed line `{line}`"))),
        }
    }

    let start = start.ok_or_else(|| perr(last_line, "missing start line".into()))?;
    if finals.is_empty() {
        return Err(perr(last_line, "no final line".into()));
    }

    let mut first_ref: HashMap<usize, usize> = HashMap::new();
    first_ref.entry(start).or_insert(0);
    for &(id, ln) in &finals {
        first_ref.entry(id).or_insert(ln);
    }
    for (ln, r) in &rules {
        first_ref.entry(r.source.0).or_insert(*ln);
        first_ref.entry(r.target.0).or_insert(*ln);
    }
    let n = first_ref.keys().max().map_or(0, |m| m + 1);
    for id in 0..n {
        if !first_ref.contains_key(&id) {
            return Err(perr(last_line, format!("dangling nonterminal {id} is never referenced")));
        }
    }

    let mut sums: HashMap<usize, (f64, usize)> = HashMap::new();
    for (ln, r) in &rules {
        let e = sums.entry(r.source.0).or_insert((0.0, *ln));
        e.0 += r.prob;
        e.1 = *ln;
    }
    let mut sources: Vec<_> = sums.into_iter().collect();
    sources.sort_unstable_by_key(|(h, _)| *h);
    for (h, (total, ln)) in sources {
        if (total - 1.0).abs() > STOCHASTIC_TOL {
            return Err(perr(ln, format!("rules from nonterminal {h} sum to {total}, expected 1")));
        }
    }
    let final_set: BTreeSet<usize> = finals.iter().map(|f| f.0).collect();
    for (ln, r) in &rules {
        let dst = r.target.0;
        let has_out = rules.iter().any(|(_, q)| q.source.0 == dst);
        if !has_out && !final_set.contains(&dst) {
            return Err(perr(*ln, format!("dangling nonterminal {dst}: no rules and not final")));
        }
    }

    let finals: Vec<Nonterminal> = final_set.into_iter().map(Nonterminal).collect();
    let rules = rules.into_iter().map(|(_, r)| r).collect();
    Grammar::new(n, rules, Nonterminal(start), &finals, labels.len())
        .map_err(|e| perr(last_line, e.to_string()))
}
