//! Intent accuracy and entity precision/recall/F1.
//!
//! Exact mode compares entities as multisets of `(type, normalized filler)`.
//! Distance modes give partial credit: same-type entities are paired by an
//! optimal one-to-one matching that maximizes the summed token-level F1 of
//! the fillers (word tokens or characters), and that sum is the fractional
//! true-positive count.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::semantics::{self, Entity, SemanticsRecord};

/// Same-type groups larger than this fall back to greedy matching.
pub const HUNGARIAN_LIMIT: usize = 20;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{preds} predictions vs {golds} references")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Exact,
    Word,
    Char,
}

impl std::str::FromStr for MatchMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "exact" => Ok(Self::Exact),
            "word" => Ok(Self::Word),
            "char" => Ok(Self::Char),
            other => Err(format!("unknown match mode {other:?} (expected exact|word|char)")),
        }
    }
}

/// Micro-averaged entity counts. Counts are fractional in distance modes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct EntityScores {
    pub tp: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EntityScores {
    pub fn from_counts(tp: f64, fp: f64, fn_: f64) -> Self {
        let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = ratio(2.0 * precision * recall, precision + recall);
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }

    fn add(&mut self, tp: f64, fp: f64, fn_: f64) {
        *self = Self::from_counts(self.tp + tp, self.fp + fp, self.fn_ + fn_);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioScores {
    pub count: usize,
    pub intent_accuracy: f64,
    pub entities: EntityScores,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub utterances: usize,
    pub intent_correct: usize,
    pub intent_accuracy: f64,
    pub exact: EntityScores,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub word: Option<EntityScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub char: Option<EntityScores>,
    /// Keyed by gold scenario; entity scores in exact mode.
    pub per_scenario: BTreeMap<String, ScenarioScores>,
}

impl EvalReport {
    /// Entity scores for the requested mode.
    pub fn entities(&self, mode: MatchMode) -> &EntityScores {
        match mode {
            MatchMode::Exact => &self.exact,
            MatchMode::Word => self.word.as_ref().unwrap_or(&self.exact),
            MatchMode::Char => self.char.as_ref().unwrap_or(&self.exact),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "utterances        {}", self.utterances)?;
        writeln!(
            f,
            "intent accuracy   {:.4} ({}/{})",
            self.intent_accuracy, self.intent_correct, self.utterances
        )?;
        writeln!(f, "{:<10} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}", "mode", "precision", "recall", "f1", "tp", "fp", "fn")?;
        let mut row = |name: &str, s: &EntityScores| {
            writeln!(
                f,
                "{:<10} {:>9.4} {:>9.4} {:>9.4} {:>9.2} {:>9.2} {:>9.2}",
                name, s.precision, s.recall, s.f1, s.tp, s.fp, s.fn_
            )
        };
        row("exact", &self.exact)?;
        if let Some(w) = &self.word {
            row("word", w)?;
        }
        if let Some(c) = &self.char {
            row("char", c)?;
        }
        writeln!(f, "{:<16} {:>6} {:>9} {:>9}", "scenario", "count", "intent", "f1")?;
        for (name, s) in &self.per_scenario {
            writeln!(f, "{:<16} {:>6} {:>9.4} {:>9.4}", name, s.count, s.intent_accuracy, s.entities.f1)?;
        }
        Ok(())
    }
}

fn check_lengths(preds: &[SemanticsRecord], golds: &[SemanticsRecord]) -> Result<(), MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    Ok(())
}

fn intent_matches(p: &SemanticsRecord, g: &SemanticsRecord) -> bool {
    p.scenario().eq_ignore_ascii_case(g.scenario()) && p.action().eq_ignore_ascii_case(g.action())
}

/// Fraction of utterances whose scenario and action both match.
pub fn intent_accuracy(preds: &[SemanticsRecord], golds: &[SemanticsRecord]) -> Result<f64, MetricsError> {
    check_lengths(preds, golds)?;
    if golds.is_empty() {
        return Ok(0.0);
    }
    let correct = preds.iter().zip(golds).filter(|(p, g)| intent_matches(p, g)).count();
    Ok(correct as f64 / golds.len() as f64)
}

/// Lowercases and collapses runs of whitespace.
pub fn normalize_filler(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

fn entity_key(e: &Entity) -> (String, String) {
    (e.kind.to_lowercase(), normalize_filler(&e.filler))
}

/// `(tp, fp, fn)` for one utterance under multiset matching.
pub fn exact_counts(pred: &[Entity], gold: &[Entity]) -> (usize, usize, usize) {
    let mut pool: HashMap<(String, String), usize> = HashMap::new();
    for e in gold {
        *pool.entry(entity_key(e)).or_default() += 1;
    }
    let mut tp = 0;
    for e in pred {
        if let Some(n) = pool.get_mut(&entity_key(e)) {
            if *n > 0 {
                *n -= 1;
                tp += 1;
            }
        }
    }
    (tp, pred.len() - tp, gold.len() - tp)
}

pub fn entity_prf_exact(preds: &[SemanticsRecord], golds: &[SemanticsRecord]) -> Result<EntityScores, MetricsError> {
    check_lengths(preds, golds)?;
    let mut s = EntityScores::default();
    for (p, g) in preds.iter().zip(golds) {
        let (tp, fp, fn_) = exact_counts(&p.entities, &g.entities);
        s.add(tp as f64, fp as f64, fn_ as f64);
    }
    Ok(s)
}

fn tokens(s: &str, mode: MatchMode) -> Vec<String> {
    let norm = normalize_filler(s);
    match mode {
        MatchMode::Char => norm.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
        _ => norm.split(' ').filter(|t| !t.is_empty()).map(String::from).collect(),
    }
}

/// Token-level F1 between two fillers (multiset overlap).
pub fn filler_f1(pred: &str, gold: &str, mode: MatchMode) -> f64 {
    if mode == MatchMode::Exact {
        return if normalize_filler(pred) == normalize_filler(gold) { 1.0 } else { 0.0 };
    }
    let p = tokens(pred, mode);
    let g = tokens(gold, mode);
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut pool: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *pool.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &p {
        if let Some(n) = pool.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Maximum-weight one-to-one assignment value for a `rows × cols` weight
/// matrix (weights in `[0, 1]`).
pub fn max_weight_matching(weights: &[Vec<f64>]) -> f64 {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    if rows.max(cols) > HUNGARIAN_LIMIT {
        return greedy_matching(weights);
    }
    // Hungarian algorithm with potentials on an n×m cost matrix, n <= m.
    let transpose = rows > cols;
    let (n, m) = if transpose { (cols, rows) } else { (rows, cols) };
    let cost = |i: usize, j: usize| -> f64 {
        let w = if transpose { weights[j][i] } else { weights[i][j] };
        1.0 - w
    };
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| 1.0 - cost(p[j] - 1, j - 1))
        .sum()
}

fn greedy_matching(weights: &[Vec<f64>]) -> f64 {
    let mut pairs: Vec<(f64, usize, usize)> = weights
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, &w)| (w, i, j)))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut row_used = vec![false; weights.len()];
    let mut col_used = vec![false; weights[0].len()];
    let mut total = 0.0;
    for (w, i, j) in pairs {
        if !row_used[i] && !col_used[j] {
            row_used[i] = true;
            col_used[j] = true;
            total += w;
        }
    }
    total
}

/// Fractional `(tp, fp, fn)` for one utterance with partial-credit matching.
pub fn distance_counts(pred: &[Entity], gold: &[Entity], mode: MatchMode) -> (f64, f64, f64) {
    let mut kinds: Vec<String> = pred.iter().chain(gold).map(|e| e.kind.to_lowercase()).collect();
    kinds.sort();
    kinds.dedup();
    let mut tp = 0.0;
    for kind in kinds {
        let ps: Vec<&Entity> = pred.iter().filter(|e| e.kind.to_lowercase() == kind).collect();
        let gs: Vec<&Entity> = gold.iter().filter(|e| e.kind.to_lowercase() == kind).collect();
        let w: Vec<Vec<f64>> = gs
            .iter()
            .map(|g| ps.iter().map(|p| filler_f1(&p.filler, &g.filler, mode)).collect())
            .collect();
        tp += max_weight_matching(&w);
    }
    (tp, pred.len() as f64 - tp, gold.len() as f64 - tp)
}

pub fn entity_prf_distance(
    preds: &[SemanticsRecord],
    golds: &[SemanticsRecord],
    mode: MatchMode,
) -> Result<EntityScores, MetricsError> {
    check_lengths(preds, golds)?;
    let mut s = EntityScores::default();
    for (p, g) in preds.iter().zip(golds) {
        let (tp, fp, fn_) = distance_counts(&p.entities, &g.entities, mode);
        s.add(tp, fp, fn_);
    }
    Ok(s)
}

/// Full report: intent accuracy, exact scores, both distance modes and the
/// per-scenario table.
pub fn evaluate(preds: &[SemanticsRecord], golds: &[SemanticsRecord]) -> Result<EvalReport, MetricsError> {
    check_lengths(preds, golds)?;
    let correct = preds.iter().zip(golds).filter(|(p, g)| intent_matches(p, g)).count();
    let mut per: BTreeMap<String, (usize, usize, EntityScores)> = BTreeMap::new();
    for (p, g) in preds.iter().zip(golds) {
        let slot = per.entry(g.scenario().to_string()).or_default();
        slot.0 += 1;
        slot.1 += usize::from(intent_matches(p, g));
        let (tp, fp, fn_) = exact_counts(&p.entities, &g.entities);
        slot.2.add(tp as f64, fp as f64, fn_ as f64);
    }
    Ok(EvalReport {
        utterances: golds.len(),
        intent_correct: correct,
        intent_accuracy: if golds.is_empty() { 0.0 } else { correct as f64 / golds.len() as f64 },
        exact: entity_prf_exact(preds, golds)?,
        word: Some(entity_prf_distance(preds, golds, MatchMode::Word)?),
        char: Some(entity_prf_distance(preds, golds, MatchMode::Char)?),
        per_scenario: per
            .into_iter()
            .map(|(k, (count, ok, ent))| {
                (
                    k,
                    ScenarioScores {
                        count,
                        intent_accuracy: ok as f64 / count as f64,
                        entities: ent,
                    },
                )
            })
            .collect(),
    })
}

/// Extracts the semantics string from one line of a prediction or reference
/// file: a JSON object's `prediction` or `semantics` field, else the raw line.
pub fn semantics_from_line(line: &str) -> String {
    if line.trim_start().starts_with('{') && line.contains('"') {
        if let Ok(serde_json::Value::Object(obj)) = serde_json::from_str::<serde_json::Value>(line) {
            for key in ["prediction", "semantics"] {
                if let Some(serde_json::Value::String(s)) = obj.get(key) {
                    return s.clone();
                }
            }
        }
    }
    line.to_string()
}

pub fn read_records(path: &Path) -> Result<Vec<SemanticsRecord>, MetricsError> {
    let text = std::fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text.lines().map(|l| semantics::parse(&semantics_from_line(l))).collect())
}

/// Scores a prediction file against a reference file. Both sides go through
/// the tolerant parser, so a broken prediction counts as the empty record.
pub fn score_files(pred_path: &Path, gold_path: &Path) -> Result<EvalReport, MetricsError> {
    let preds = read_records(pred_path)?;
    let golds = read_records(gold_path)?;
    evaluate(&preds, &golds)
}
