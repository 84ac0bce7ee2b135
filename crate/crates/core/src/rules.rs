//! Candidate rules, per-patient rule counts and the classical rankers.
//!
//! A rule `a → b` has a left-hand side of at most one condition. For a
//! patient, `n` counts the encounters at which the lhs is active (reported
//! at or before that encounter) and `y` counts those encounters in which
//! `b` was reported after the lhs became active. Empty-lhs rules count every
//! encounter and every report of `b`.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Condition, ConditionId, Encounter, EventDatabase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RuleId(pub u32);

impl RuleId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rule {
    pub id: RuleId,
    lhs: Option<ConditionId>,
    rhs: ConditionId,
}

impl Rule {
    pub fn new(id: RuleId, lhs: Option<ConditionId>, rhs: ConditionId) -> Result<Rule> {
        if lhs == Some(rhs) {
            return Err(Error::Contract(format!("rule {} has its rhs on the lhs", id.0)));
        }
        Ok(Rule { id, lhs, rhs })
    }

    pub fn lhs(&self) -> Option<ConditionId> {
        self.lhs
    }

    pub fn rhs(&self) -> ConditionId {
        self.rhs
    }

    pub fn describe(&self, db: &EventDatabase) -> String {
        match self.lhs {
            Some(a) => format!("{} -> {}", db.label(a), db.label(self.rhs)),
            None => format!("{{}} -> {}", db.label(self.rhs)),
        }
    }
}

/// All rules over an active set of conditions with O(1) lookup by
/// (lhs, rhs). Conditions are addressed internally by their slot, the
/// position in the sorted active set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    rules: Vec<Rule>,
    conditions: Vec<ConditionId>,
    slots: Vec<Option<usize>>,
}

/// Enumerates every rule with an empty or single-condition lhs over the
/// active set (or the whole vocabulary). Empty-lhs rules come first, then
/// rules in (lhs, rhs) order.
pub fn enumerate_rules(vocabulary: &[Condition], active: Option<&[ConditionId]>) -> Result<RuleSet> {
    let mut conditions: Vec<ConditionId> = match active {
        Some(set) => set.to_vec(),
        None => vocabulary.iter().map(|c| c.id).collect(),
    };
    conditions.sort();
    conditions.dedup();
    if let Some(bad) = conditions.iter().find(|c| c.index() >= vocabulary.len()) {
        return Err(Error::Referential(format!("condition {bad} is not in the vocabulary")));
    }
    RuleSet::new(vocabulary.len(), conditions)
}

impl RuleSet {
    fn new(vocabulary_size: usize, conditions: Vec<ConditionId>) -> Result<RuleSet> {
        let mut slots = vec![None; vocabulary_size];
        for (s, c) in conditions.iter().enumerate() {
            slots[c.index()] = Some(s);
        }
        let v = conditions.len();
        let mut rules = Vec::with_capacity(v * v);
        for &b in &conditions {
            rules.push(Rule::new(RuleId(rules.len() as u32), None, b)?);
        }
        for &a in &conditions {
            for &b in conditions.iter().filter(|&&b| b != a) {
                rules.push(Rule::new(RuleId(rules.len() as u32), Some(a), b)?);
            }
        }
        Ok(RuleSet { rules, conditions, slots })
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn rule(&self, id: RuleId) -> &Rule {
        &self.rules[id.index()]
    }

    /// The active set, sorted by id.
    pub fn conditions(&self) -> &[ConditionId] {
        &self.conditions
    }

    pub fn n_conditions(&self) -> usize {
        self.conditions.len()
    }

    pub fn vocabulary_size(&self) -> usize {
        self.slots.len()
    }

    pub fn slot(&self, c: ConditionId) -> Option<usize> {
        self.slots.get(c.index()).copied().flatten()
    }

    pub fn condition_at(&self, slot: usize) -> ConditionId {
        self.conditions[slot]
    }

    pub fn empty_rule(&self, rhs_slot: usize) -> RuleId {
        RuleId(rhs_slot as u32)
    }

    pub fn pair_rule(&self, lhs_slot: usize, rhs_slot: usize) -> RuleId {
        debug_assert_ne!(lhs_slot, rhs_slot);
        let v = self.conditions.len();
        let offset = if rhs_slot < lhs_slot { rhs_slot } else { rhs_slot - 1 };
        RuleId((v + lhs_slot * (v - 1) + offset) as u32)
    }

    pub fn rules_with_lhs(&self, lhs_slot: usize) -> std::ops::Range<usize> {
        let v = self.conditions.len();
        let start = v + lhs_slot * (v - 1);
        start..start + v - 1
    }

    pub fn find(&self, lhs: Option<ConditionId>, rhs: ConditionId) -> Option<RuleId> {
        let b = self.slot(rhs)?;
        match lhs {
            None => Some(self.empty_rule(b)),
            Some(a) => {
                let a = self.slot(a)?;
                (a != b).then(|| self.pair_rule(a, b))
            }
        }
    }

    pub fn rhs_slot(&self, id: RuleId) -> usize {
        self.slot(self.rules[id.index()].rhs).expect("rule rhs in active set")
    }

    pub fn lhs_slot(&self, id: RuleId) -> Option<usize> {
        self.rules[id.index()].lhs.map(|a| self.slot(a).expect("rule lhs in active set"))
    }
}

/// Per-patient, per-rule co-occurrence (`y`) and opportunity (`n`) counts,
/// stored row-major by patient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleCounts {
    pub n_patients: usize,
    pub n_rules: usize,
    y: Vec<u32>,
    n: Vec<u32>,
}

impl RuleCounts {
    pub fn zeros(n_patients: usize, n_rules: usize) -> Self {
        RuleCounts {
            n_patients,
            n_rules,
            y: vec![0; n_patients * n_rules],
            n: vec![0; n_patients * n_rules],
        }
    }

    pub fn from_rows(rows: Vec<(Vec<u32>, Vec<u32>)>, n_rules: usize) -> Result<Self> {
        let mut out = RuleCounts::zeros(0, n_rules);
        for (y, n) in rows {
            out.push_row(&y, &n)?;
        }
        Ok(out)
    }

    pub fn push_row(&mut self, y: &[u32], n: &[u32]) -> Result<()> {
        if y.len() != self.n_rules || n.len() != self.n_rules {
            return Err(Error::Contract("count row length differs from rule count".into()));
        }
        if let Some(r) = (0..y.len()).find(|&r| y[r] > n[r]) {
            return Err(Error::Contract(format!("y > n for rule {r}")));
        }
        self.y.extend_from_slice(y);
        self.n.extend_from_slice(n);
        self.n_patients += 1;
        Ok(())
    }

    pub fn y(&self, i: usize, r: usize) -> u32 {
        self.y[i * self.n_rules + r]
    }

    pub fn n(&self, i: usize, r: usize) -> u32 {
        self.n[i * self.n_rules + r]
    }

    pub fn row_y(&self, i: usize) -> &[u32] {
        &self.y[i * self.n_rules..(i + 1) * self.n_rules]
    }

    pub fn row_n(&self, i: usize) -> &[u32] {
        &self.n[i * self.n_rules..(i + 1) * self.n_rules]
    }

    pub fn set_row(&mut self, i: usize, y: &[u32], n: &[u32]) {
        let range = i * self.n_rules..(i + 1) * self.n_rules;
        self.y[range.clone()].copy_from_slice(y);
        self.n[range].copy_from_slice(n);
    }

    /// Keeps the listed patient rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> RuleCounts {
        let mut out = RuleCounts::zeros(0, self.n_rules);
        for &i in rows {
            out.y.extend_from_slice(self.row_y(i));
            out.n.extend_from_slice(self.row_n(i));
            out.n_patients += 1;
        }
        out
    }

    pub fn is_consistent(&self) -> bool {
        self.y.iter().zip(&self.n).all(|(y, n)| y <= n)
    }

    /// `patient_id,lhs,rhs,y,n` with an empty lhs field for empty-lhs rules.
    pub fn write_csv(&self, db: &EventDatabase, rules: &RuleSet, mut out: impl Write) -> Result<()> {
        writeln!(out, "patient_id,lhs,rhs,y,n")?;
        for (i, p) in db.patients.iter().enumerate().take(self.n_patients) {
            for rule in rules.rules() {
                let r = rule.id.index();
                let lhs = rule.lhs().map(|a| db.label(a)).unwrap_or("");
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    p.patient_id,
                    lhs,
                    db.label(rule.rhs()),
                    self.y(i, r),
                    self.n(i, r)
                )?;
            }
        }
        Ok(())
    }
}

/// Position in a patient's timeline: encounters before `encounter` are
/// complete and the first `revealed` conditions of `encounter` are known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub encounter: usize,
    pub revealed: usize,
}

impl Cursor {
    pub fn end_of(encounters: &[Encounter]) -> Cursor {
        Cursor { encounter: encounters.len(), revealed: 0 }
    }
}

fn visible_prefix(encounters: &[Encounter], cursor: Cursor) -> impl Iterator<Item = &[ConditionId]> {
    let full = cursor.encounter.min(encounters.len());
    let partial = encounters
        .get(cursor.encounter)
        .filter(|_| cursor.revealed > 0)
        .map(|e| &e.conditions[..cursor.revealed.min(e.conditions.len())]);
    encounters[..full].iter().map(|e| e.conditions.as_slice()).chain(partial)
}

/// Counts one patient's rules directly from the definition, up to `cursor`.
pub fn count_patient(rules: &RuleSet, encounters: &[Encounter], cursor: Cursor) -> (Vec<u32>, Vec<u32>) {
    let v = rules.n_conditions();
    let mut y = vec![0u32; rules.len()];
    let mut n = vec![0u32; rules.len()];
    // (encounter, position) of each slot's first report
    let mut first_seen: Vec<Option<(usize, usize)>> = vec![None; v];
    let mut position: Vec<Option<usize>> = vec![None; v];

    for (e, conds) in visible_prefix(encounters, cursor).enumerate() {
        position.iter_mut().for_each(|p| *p = None);
        for (pos, c) in conds.iter().enumerate() {
            if let Some(s) = rules.slot(*c) {
                position[s] = Some(pos);
                if first_seen[s].is_none() {
                    first_seen[s] = Some((e, pos));
                }
            }
        }
        for rule in rules.rules() {
            let r = rule.id.index();
            let b = rules.rhs_slot(rule.id);
            match rules.lhs_slot(rule.id) {
                None => {
                    n[r] += 1;
                    if position[b].is_some() {
                        y[r] += 1;
                    }
                }
                Some(a) => {
                    let Some(seen) = first_seen[a] else { continue };
                    n[r] += 1;
                    if let Some(pb) = position[b] {
                        if seen < (e, pb) {
                            y[r] += 1;
                        }
                    }
                }
            }
        }
    }
    (y, n)
}

/// Counts every patient's rules, optionally stopping each patient at a cursor.
pub fn count_rules(db: &EventDatabase, rules: &RuleSet, upto: Option<&[Cursor]>) -> Result<RuleCounts> {
    if rules.vocabulary_size() > db.n_conditions() {
        return Err(Error::Referential(format!(
            "rules span {} conditions but the vocabulary has {}",
            rules.vocabulary_size(),
            db.n_conditions()
        )));
    }
    if let Some(c) = upto {
        if c.len() != db.n_patients() {
            return Err(Error::Contract("one cursor per patient required".into()));
        }
    }
    let mut counts = RuleCounts::zeros(0, rules.len());
    for (i, p) in db.patients.iter().enumerate() {
        let cursor = upto.map_or(Cursor::end_of(&p.encounters), |c| c[i]);
        let (y, n) = count_patient(rules, &p.encounters, cursor);
        counts.push_row(&y, &n)?;
    }
    Ok(counts)
}

/// Incrementally maintained counts for one patient as encounters open and
/// conditions are revealed one at a time.
#[derive(Debug, Clone)]
pub struct PatientTracker<'a> {
    rules: &'a RuleSet,
    y: Vec<u32>,
    n: Vec<u32>,
    active: Vec<bool>,
    revealed: Vec<bool>,
    open: bool,
}

impl<'a> PatientTracker<'a> {
    pub fn new(rules: &'a RuleSet) -> Self {
        PatientTracker {
            rules,
            y: vec![0; rules.len()],
            n: vec![0; rules.len()],
            active: vec![false; rules.n_conditions()],
            revealed: vec![false; rules.n_conditions()],
            open: false,
        }
    }

    /// Resumes from stored counts. A condition is active exactly when some
    /// rule with it on the lhs has a positive opportunity count.
    pub fn from_counts(rules: &'a RuleSet, y: &[u32], n: &[u32]) -> Self {
        let mut t = PatientTracker::new(rules);
        t.y.copy_from_slice(y);
        t.n.copy_from_slice(n);
        for s in 0..rules.n_conditions() {
            t.active[s] = rules.rules_with_lhs(s).any(|r| n[r] > 0);
        }
        t
    }

    pub fn replay(rules: &'a RuleSet, encounters: &[Encounter]) -> Self {
        let mut t = PatientTracker::new(rules);
        for e in encounters {
            t.absorb_encounter(e);
        }
        t
    }

    pub fn absorb_encounter(&mut self, e: &Encounter) {
        self.open_encounter();
        for c in &e.conditions {
            self.reveal(*c);
        }
        self.close_encounter();
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    pub fn open_encounter(&mut self) {
        if self.open {
            return;
        }
        self.open = true;
        self.revealed.iter_mut().for_each(|r| *r = false);
        let v = self.rules.n_conditions();
        for s in 0..v {
            self.n[self.rules.empty_rule(s).index()] += 1;
        }
        for a in 0..v {
            if self.active[a] {
                for r in self.rules.rules_with_lhs(a) {
                    self.n[r] += 1;
                }
            }
        }
    }

    /// Reveals `c` in the current encounter, opening it if needed.
    /// Conditions outside the rule space are ignored.
    pub fn reveal(&mut self, c: ConditionId) {
        self.open_encounter();
        let Some(b) = self.rules.slot(c) else { return };
        if self.revealed[b] {
            return;
        }
        self.revealed[b] = true;
        self.y[self.rules.empty_rule(b).index()] += 1;
        for a in 0..self.rules.n_conditions() {
            if a != b && self.active[a] {
                self.y[self.rules.pair_rule(a, b).index()] += 1;
            }
        }
        if !self.active[b] {
            self.active[b] = true;
            for r in self.rules.rules_with_lhs(b) {
                self.n[r] += 1;
            }
        }
    }

    pub fn close_encounter(&mut self) {
        self.open = false;
        self.revealed.iter_mut().for_each(|r| *r = false);
    }

    pub fn y(&self) -> &[u32] {
        &self.y
    }

    pub fn n(&self) -> &[u32] {
        &self.n
    }

    pub fn is_active(&self, slot: usize) -> bool {
        self.active[slot]
    }

    pub fn revealed_in_encounter(&self, slot: usize) -> bool {
        self.open && self.revealed[slot]
    }

    /// A rule can be used for prediction when its lhs is empty or active.
    pub fn is_applicable(&self, id: RuleId) -> bool {
        self.rules.lhs_slot(id).is_none_or(|a| self.active[a])
    }

    pub fn rules(&self) -> &'a RuleSet {
        self.rules
    }
}

/// Empirical y/n; zero when there were no opportunities.
pub fn confidence(y: u32, n: u32) -> Result<f64> {
    if y > n {
        return Err(Error::Contract(format!("y = {y} exceeds n = {n}")));
    }
    Ok(if n == 0 { 0.0 } else { f64::from(y) / f64::from(n) })
}

/// y/(n + K); zero when both n and K are zero.
pub fn adjusted_confidence(y: u32, n: u32, k: f64) -> Result<f64> {
    if !(k >= 0.0) {
        return Err(Error::Contract(format!("K must be nonnegative, got {k}")));
    }
    if y > n {
        return Err(Error::Contract(format!("y = {y} exceeds n = {n}")));
    }
    let denom = f64::from(n) + k;
    Ok(if denom == 0.0 { 0.0 } else { f64::from(y) / denom })
}

/// Orders by score descending, then support descending, then rule id.
pub fn rank_order(a: (f64, u32, RuleId), b: (f64, u32, RuleId)) -> Ordering {
    b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2))
}

fn rank_by<F>(rules: &RuleSet, y: &[u32], n: &[u32], mut score: F) -> Vec<(Rule, f64)>
where
    F: FnMut(u32, u32) -> Option<f64>,
{
    let mut scored: Vec<(f64, u32, RuleId)> = rules
        .rules()
        .iter()
        .filter_map(|rule| {
            let r = rule.id.index();
            score(y[r], n[r]).map(|s| (s, n[r], rule.id))
        })
        .collect();
    scored.sort_by(|a, b| rank_order(*a, *b));
    scored.into_iter().map(|(s, _, id)| (*rules.rule(id), s)).collect()
}

pub fn rank_adjusted_confidence(
    counts: &RuleCounts,
    rules: &RuleSet,
    patient: usize,
    k: f64,
) -> Result<Vec<(Rule, f64)>> {
    if !(k >= 0.0) {
        return Err(Error::Contract(format!("K must be nonnegative, got {k}")));
    }
    Ok(rank_by(rules, counts.row_y(patient), counts.row_n(patient), |y, n| {
        adjusted_confidence(y, n, k).ok()
    }))
}

pub fn rank_confidence(counts: &RuleCounts, rules: &RuleSet, patient: usize) -> Vec<(Rule, f64)> {
    rank_by(rules, counts.row_y(patient), counts.row_n(patient), |y, n| confidence(y, n).ok())
}

/// Drops rules with support below `theta` and ranks the rest by confidence.
pub fn rank_min_support(counts: &RuleCounts, rules: &RuleSet, patient: usize, theta: u32) -> Vec<(Rule, f64)> {
    rank_by(rules, counts.row_y(patient), counts.row_n(patient), |y, n| {
        if n < theta {
            None
        } else {
            confidence(y, n).ok()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(n: usize) -> Vec<Condition> {
        (0..n).map(|i| Condition { id: ConditionId(i as u32), label: format!("c{i}") }).collect()
    }

    fn enc(conds: &[u32]) -> Encounter {
        Encounter { seq_index: 0, day: 0, conditions: conds.iter().map(|&c| ConditionId(c)).collect() }
    }

    #[test]
    fn rule_count_combinatorics() {
        assert_eq!(enumerate_rules(&vocab(2), None).unwrap().len(), 4);
        assert_eq!(enumerate_rules(&vocab(50), None).unwrap().len(), 2500);
    }

    #[test]
    fn enumeration_order_and_lookup() {
        let rs = enumerate_rules(&vocab(4), Some(&[ConditionId(3), ConditionId(1), ConditionId(2)])).unwrap();
        let pairs: Vec<(Option<u32>, u32)> =
            rs.rules().iter().map(|r| (r.lhs().map(|c| c.0), r.rhs().0)).collect();
        assert_eq!(
            pairs,
            [
                (None, 1),
                (None, 2),
                (None, 3),
                (Some(1), 2),
                (Some(1), 3),
                (Some(2), 1),
                (Some(2), 3),
                (Some(3), 1),
                (Some(3), 2)
            ]
        );
        for rule in rs.rules() {
            assert_eq!(rs.find(rule.lhs(), rule.rhs()), Some(rule.id));
        }
        assert_eq!(rs.find(Some(ConditionId(1)), ConditionId(1)), None);
        assert_eq!(rs.find(None, ConditionId(0)), None);
    }

    #[test]
    fn active_set_outside_vocabulary_rejected() {
        assert!(enumerate_rules(&vocab(2), Some(&[ConditionId(5)])).is_err());
    }

    #[test]
    fn rule_cannot_repeat_rhs_on_lhs() {
        assert!(Rule::new(RuleId(0), Some(ConditionId(1)), ConditionId(1)).is_err());
    }

    #[test]
    fn lhs_then_rhs_in_later_encounter() {
        // a = 0, b = 1
        let rs = enumerate_rules(&vocab(2), None).unwrap();
        let encs = [enc(&[0]), enc(&[1])];
        let (y, n) = count_patient(&rs, &encs, Cursor::end_of(&encs));
        let ab = rs.find(Some(ConditionId(0)), ConditionId(1)).unwrap().index();
        assert_eq!((y[ab], n[ab]), (1, 2));
        let ba = rs.find(Some(ConditionId(1)), ConditionId(0)).unwrap().index();
        assert_eq!((y[ba], n[ba]), (0, 1));
    }

    #[test]
    fn empty_lhs_counts_every_encounter() {
        let rs = enumerate_rules(&vocab(2), None).unwrap();
        let encs = [enc(&[1])];
        let (y, n) = count_patient(&rs, &encs, Cursor::end_of(&encs));
        let eb = rs.find(None, ConditionId(1)).unwrap().index();
        assert_eq!((y[eb], n[eb]), (1, 1));
    }

    #[test]
    fn never_reported_lhs_has_no_counts() {
        let rs = enumerate_rules(&vocab(3), None).unwrap();
        let encs = [enc(&[1]), enc(&[1, 2])];
        let (y, n) = count_patient(&rs, &encs, Cursor::end_of(&encs));
        let ab = rs.find(Some(ConditionId(0)), ConditionId(1)).unwrap().index();
        assert_eq!((y[ab], n[ab]), (0, 0));
    }

    #[test]
    fn within_encounter_order_matters() {
        let rs = enumerate_rules(&vocab(2), None).unwrap();
        let encs = [enc(&[1, 0])];
        let (y, n) = count_patient(&rs, &encs, Cursor::end_of(&encs));
        let ab = rs.find(Some(ConditionId(0)), ConditionId(1)).unwrap().index();
        let ba = rs.find(Some(ConditionId(1)), ConditionId(0)).unwrap().index();
        assert_eq!((y[ab], n[ab]), (0, 1));
        assert_eq!((y[ba], n[ba]), (1, 1));
    }

    #[test]
    fn confidence_values() {
        assert_eq!(confidence(2, 4).unwrap(), 0.5);
        assert_eq!(confidence(0, 0).unwrap(), 0.0);
        assert_eq!(confidence(3, 3).unwrap(), 1.0);
        assert!(confidence(4, 3).is_err());
    }

    #[test]
    fn adjusted_confidence_values() {
        assert_eq!(adjusted_confidence(2, 3, 1.0).unwrap(), 0.5);
        assert_eq!(adjusted_confidence(2, 3, 0.0).unwrap(), 2.0 / 3.0);
        assert_eq!(adjusted_confidence(2, 3, 0.0).unwrap(), confidence(2, 3).unwrap());
        assert_eq!(adjusted_confidence(0, 0, 1.0).unwrap(), 0.0);
        assert!(adjusted_confidence(1, 2, -1.0).is_err());
    }

    fn counts_of(rows: &[(u32, u32)]) -> RuleCounts {
        let y = rows.iter().map(|r| r.0).collect();
        let n = rows.iter().map(|r| r.1).collect();
        RuleCounts::from_rows(vec![(y, n)], rows.len()).unwrap()
    }

    #[test]
    fn adjusted_ranking_orders_by_score_then_support() {
        let rs = enumerate_rules(&vocab(2), None).unwrap();
        // rule 0: 1/2 ; rule 1: 1/5 ; rule 2: 5/10 ; rule 3: 0/0
        let c = counts_of(&[(1, 1), (1, 4), (5, 9), (0, 0)]);
        let ranked = rank_adjusted_confidence(&c, &rs, 0, 1.0).unwrap();
        let ids: Vec<u32> = ranked.iter().map(|(r, _)| r.id.0).collect();
        assert_eq!(ids, [2, 0, 1, 3]);
    }

    #[test]
    fn all_zero_counts_rank_by_id() {
        let rs = enumerate_rules(&vocab(3), None).unwrap();
        let c = RuleCounts::zeros(1, rs.len());
        let ranked = rank_adjusted_confidence(&c, &rs, 0, 1.0).unwrap();
        assert!(ranked.windows(2).all(|w| w[0].0.id < w[1].0.id));
    }

    #[test]
    fn min_support_excludes_low_support() {
        let rs = enumerate_rules(&vocab(2), None).unwrap();
        let c = counts_of(&[(1, 1), (1, 2), (0, 3), (2, 2)]);
        let ranked = rank_min_support(&c, &rs, 0, 2);
        let ids: Vec<u32> = ranked.iter().map(|(r, _)| r.id.0).collect();
        assert_eq!(ids, [3, 1, 2]);
        let all = rank_min_support(&c, &rs, 0, 0);
        assert_eq!(all, rank_confidence(&c, &rs, 0));
    }

    #[test]
    fn tracker_matches_direct_count_at_every_cursor() {
        let rs = enumerate_rules(&vocab(4), None).unwrap();
        let encs = [enc(&[2]), enc(&[]), enc(&[0, 1]), enc(&[3, 0, 2]), enc(&[1])];
        let mut t = PatientTracker::new(&rs);
        for (e, encounter) in encs.iter().enumerate() {
            for (k, c) in encounter.conditions.iter().enumerate() {
                t.reveal(*c);
                let (y, n) = count_patient(&rs, &encs, Cursor { encounter: e, revealed: k + 1 });
                assert_eq!((t.y(), t.n()), (y.as_slice(), n.as_slice()), "at {e}/{k}");
            }
            t.open_encounter();
            t.close_encounter();
            let (y, n) = count_patient(&rs, &encs, Cursor { encounter: e + 1, revealed: 0 });
            assert_eq!((t.y(), t.n()), (y.as_slice(), n.as_slice()), "after {e}");
        }
        let resumed = PatientTracker::from_counts(&rs, t.y(), t.n());
        for s in 0..4 {
            assert_eq!(resumed.is_active(s), t.is_active(s));
        }
    }

    fn arb_history() -> impl Strategy<Value = Vec<Vec<u32>>> {
        prop::collection::vec(
            prop::collection::btree_set(0u32..5, 0..4).prop_map(|s| {
                let mut v: Vec<u32> = s.into_iter().collect();
                v.reverse();
                v
            }),
            0..8,
        )
    }

    proptest! {
        #[test]
        fn counts_bounded_and_tracker_agrees(history in arb_history()) {
            let rs = enumerate_rules(&vocab(5), None).unwrap();
            let encs: Vec<Encounter> = history.iter().map(|c| enc(c)).collect();
            let (y, n) = count_patient(&rs, &encs, Cursor::end_of(&encs));
            prop_assert!(y.iter().zip(&n).all(|(a, b)| a <= b));
            let t = PatientTracker::replay(&rs, &encs);
            prop_assert_eq!(t.y(), y.as_slice());
            prop_assert_eq!(t.n(), n.as_slice());
        }

        #[test]
        fn appending_an_encounter_only_touches_relevant_rules(
            history in arb_history(),
            extra in prop::collection::btree_set(0u32..5, 0..4),
        ) {
            let rs = enumerate_rules(&vocab(5), None).unwrap();
            let mut encs: Vec<Encounter> = history.iter().map(|c| enc(c)).collect();
            let (y0, n0) = count_patient(&rs, &encs, Cursor::end_of(&encs));
            let before = PatientTracker::replay(&rs, &encs);
            let extra: Vec<u32> = extra.into_iter().collect();
            encs.push(enc(&extra));
            let (y1, n1) = count_patient(&rs, &encs, Cursor::end_of(&encs));
            for rule in rs.rules() {
                let r = rule.id.index();
                prop_assert!(y1[r] >= y0[r] && n1[r] >= n0[r]);
                let lhs_active = rs.lhs_slot(rule.id).is_none_or(|a| before.is_active(a) || extra.contains(&(a as u32)));
                let rhs_seen = extra.contains(&rule.rhs().0);
                if !lhs_active && !rhs_seen {
                    prop_assert_eq!((y1[r], n1[r]), (y0[r], n0[r]));
                }
            }
        }

        #[test]
        fn adjusted_confidence_bounds_and_monotonicity(n in 0u32..50, frac in 0.0f64..=1.0, k in 0.0f64..20.0, dk in 0.0f64..5.0) {
            let y = (f64::from(n) * frac).floor() as u32;
            let a = adjusted_confidence(y, n, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(adjusted_confidence(y, n, k + dk).unwrap() <= a);
            if y < n {
                prop_assert!(adjusted_confidence(y + 1, n, k).unwrap() >= a);
            }
            if n > 0 {
                prop_assert_eq!(adjusted_confidence(y, n, 0.0).unwrap(), confidence(y, n).unwrap());
                if k > 0.0 {
                    let c = confidence(y, n).unwrap();
                    if y > 0 { prop_assert!(a < c); } else { prop_assert_eq!(a, c); }
                }
            }
        }
    }
}
