//! Edit distance, token error rate, per-condition reports, multi-seed
//! system comparison and the text tables built from them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EditCounts {
    pub distance: usize,
    pub subs: usize,
    pub ins: usize,
    pub dels: usize,
}

/// Unit-cost Levenshtein distance from `reference` to `hyp`, with the
/// substitution / insertion / deletion counts of one optimal alignment.
/// On the backtrace, a diagonal step is preferred over a deletion, and a
/// deletion over an insertion.
pub fn edit_distance(hyp: &[usize], reference: &[usize]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i * w + j] = sub.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let mut c = EditCounts {
        distance: d[n * w + m],
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hyp[j - 1]);
            if d[(i - 1) * w + j - 1] + diff == here {
                c.subs += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            c.dels += 1;
            i -= 1;
        } else {
            c.ins += 1;
            j -= 1;
        }
    }
    c
}

/// Token error rate in percent; an empty reference counts every edit
/// against a denominator of one.
pub fn ter(edits: usize, ref_tokens: usize) -> f64 {
    100.0 * edits as f64 / ref_tokens.max(1) as f64
}

/// One decoded (or reference) utterance of a test condition.
#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub id: u32,
    /// SNR of the condition the utterance belongs to.
    pub condition: f64,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionScore {
    pub condition: f64,
    pub utterances: usize,
    pub ref_tokens: usize,
    pub edits: usize,
    pub ter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub system: String,
    pub seed: u64,
    /// In ascending condition order.
    pub conditions: Vec<ConditionScore>,
    /// Pooled over every utterance.
    pub average: f64,
    pub subs: usize,
    pub ins: usize,
    pub dels: usize,
}

impl ScoreReport {
    pub fn condition(&self, snr: f64) -> Option<&ConditionScore> {
        self.conditions.iter().find(|c| c.condition == snr)
    }

    /// `system,seed,condition,utterances,ref_tokens,edits,ter` lines,
    /// ending with an `avg` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for c in &self.conditions {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.4}",
                self.system, self.seed, c.condition, c.utterances, c.ref_tokens, c.edits, c.ter
            );
        }
        let utts: usize = self.conditions.iter().map(|c| c.utterances).sum();
        let refs: usize = self.conditions.iter().map(|c| c.ref_tokens).sum();
        let _ = writeln!(
            s,
            "{},{},avg,{},{},{},{:.4}",
            self.system,
            self.seed,
            utts,
            refs,
            self.subs + self.ins + self.dels,
            self.average
        );
        s
    }
}

fn key(id: u32, condition: f64) -> (u64, u32) {
    (condition.to_bits(), id)
}

/// Scores hypotheses against references matched by `(condition, id)`.
pub fn score_split(system: &str, seed: u64, hyps: &[Transcript], refs: &[Transcript]) -> Result<ScoreReport> {
    let mut by_key = BTreeMap::new();
    for h in hyps {
        if by_key.insert(key(h.id, h.condition), &h.tokens).is_some() {
            return Err(invalid("score_split", format!("duplicate hypothesis id {} at {}", h.id, h.condition)));
        }
    }
    if by_key.len() != refs.len() {
        return Err(invalid("score_split", format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    let mut per: BTreeMap<u64, ConditionScore> = BTreeMap::new();
    let mut total = EditCounts::default();
    let mut total_ref = 0;
    for r in refs {
        let h = by_key
            .get(&key(r.id, r.condition))
            .ok_or_else(|| invalid("score_split", format!("no hypothesis for id {} at {}", r.id, r.condition)))?;
        let e = edit_distance(h, &r.tokens);
        total.distance += e.distance;
        total.subs += e.subs;
        total.ins += e.ins;
        total.dels += e.dels;
        total_ref += r.tokens.len();
        let c = per.entry(r.condition.to_bits()).or_insert(ConditionScore {
            condition: r.condition,
            utterances: 0,
            ref_tokens: 0,
            edits: 0,
            ter: 0.0,
        });
        c.utterances += 1;
        c.ref_tokens += r.tokens.len();
        c.edits += e.distance;
    }
    let mut conditions: Vec<ConditionScore> = per
        .into_values()
        .map(|mut c| {
            c.ter = ter(c.edits, c.ref_tokens);
            c
        })
        .collect();
    conditions.sort_by(|a, b| a.condition.total_cmp(&b.condition));
    Ok(ScoreReport {
        system: system.to_string(),
        seed,
        conditions,
        average: ter(total.distance, total_ref),
        subs: total.subs,
        ins: total.ins,
        dels: total.dels,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub mean_a: f64,
    pub mean_b: f64,
    /// `(mean_a - mean_b) / mean_a * 100`.
    pub relative_reduction: f64,
    /// Seeds where `b` has the strictly lower average TER.
    pub wins_b: usize,
    pub wins_a: usize,
    pub ties: usize,
    /// Per-seed relative reduction, by seed.
    pub per_seed: Vec<(u64, f64)>,
}

pub fn relative_reduction(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        (a - b) / a * 100.0
    }
}

/// Compares two systems run over the same seeds by their average TER.
pub fn compare_systems(reports_a: &[ScoreReport], reports_b: &[ScoreReport]) -> Result<Comparison> {
    let a: BTreeMap<u64, f64> = reports_a.iter().map(|r| (r.seed, r.average)).collect();
    let b: BTreeMap<u64, f64> = reports_b.iter().map(|r| (r.seed, r.average)).collect();
    let sa: BTreeSet<_> = a.keys().collect();
    let sb: BTreeSet<_> = b.keys().collect();
    if sa != sb || a.len() != reports_a.len() || b.len() != reports_b.len() || a.is_empty() {
        return Err(invalid("compare_systems", "report sets must cover the same distinct seeds"));
    }
    let n = a.len() as f64;
    let mean_a = a.values().sum::<f64>() / n;
    let mean_b = b.values().sum::<f64>() / n;
    let mut c = Comparison {
        mean_a,
        mean_b,
        relative_reduction: relative_reduction(mean_a, mean_b),
        wins_b: 0,
        wins_a: 0,
        ties: 0,
        per_seed: Vec::new(),
    };
    for (seed, &ta) in &a {
        let tb = b[seed];
        match tb.partial_cmp(&ta) {
            Some(std::cmp::Ordering::Less) => c.wins_b += 1,
            Some(std::cmp::Ordering::Greater) => c.wins_a += 1,
            _ => c.ties += 1,
        }
        c.per_seed.push((*seed, relative_reduction(ta, tb)));
    }
    Ok(c)
}

/// Systems-by-conditions table of seed-averaged TERs.
pub fn format_table(title: &str, rows: &[(String, Vec<ScoreReport>)]) -> String {
    let mut conds: Vec<f64> = rows
        .iter()
        .flat_map(|(_, rs)| rs.iter().flat_map(|r| r.conditions.iter().map(|c| c.condition)))
        .collect();
    conds.sort_by(f64::total_cmp);
    conds.dedup();
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    let mut s = String::new();
    let _ = writeln!(s, "{title}");
    let _ = write!(s, "{:<name_w$}", "system");
    for c in &conds {
        let _ = write!(s, " {:>7}", format!("{c}dB"));
    }
    let _ = writeln!(s, " {:>7}", "avg");
    for (name, reports) in rows {
        let _ = write!(s, "{name:<name_w$}");
        let n = reports.len().max(1) as f64;
        for c in &conds {
            let m: f64 = reports
                .iter()
                .map(|r| r.condition(*c).map_or(f64::NAN, |x| x.ter))
                .sum::<f64>()
                / n;
            let _ = write!(s, " {m:>7.2}");
        }
        let avg = reports.iter().map(|r| r.average).sum::<f64>() / n;
        let _ = writeln!(s, " {avg:>7.2}");
    }
    s
}
