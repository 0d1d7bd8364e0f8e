//! Deterministic generators for the ten algorithmic tasks.
//!
//! Every sample is a timeline triple (input, target, mask) with
//! `target[t] = input[t+1]` at the teacher-forcing positions and the mask
//! marking exactly the positions whose prediction is scored:
//!
//! - single-answer tasks (parity, cycle_nav, majority, majority_count,
//!   mod_arith, mod_arith_wo_braces, solve_equation) mask the last content
//!   position, whose target is the answer token;
//! - multi-answer tasks (repetition, bucket_sort, set) append ACT and the
//!   teacher-forced answers, masking the ACT position and each answer
//!   position except the last.
//!
//! Default task configurations (moduli, alphabet sizes, cycle size) are
//! config-overridable; generators are pure functions of (spec, rng state).

use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::Write;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Repetition,
    BucketSort,
    Majority,
    MajorityCount,
    SolveEquation,
    ModArith,
    ModArithWoBraces,
    CycleNav,
    Parity,
    Set,
}

pub const ALL_TASKS: [TaskId; 10] = [
    TaskId::Repetition,
    TaskId::BucketSort,
    TaskId::Majority,
    TaskId::MajorityCount,
    TaskId::SolveEquation,
    TaskId::ModArith,
    TaskId::ModArithWoBraces,
    TaskId::CycleNav,
    TaskId::Parity,
    TaskId::Set,
];

impl TaskId {
    pub fn name(&self) -> &'static str {
        match self {
            TaskId::Repetition => "repetition",
            TaskId::BucketSort => "bucket_sort",
            TaskId::Majority => "majority",
            TaskId::MajorityCount => "majority_count",
            TaskId::SolveEquation => "solve_equation",
            TaskId::ModArith => "mod_arith",
            TaskId::ModArithWoBraces => "mod_arith_wo_braces",
            TaskId::CycleNav => "cycle_nav",
            TaskId::Parity => "parity",
            TaskId::Set => "set",
        }
    }

    pub fn parse(s: &str) -> Result<TaskId> {
        ALL_TASKS
            .iter()
            .find(|t| t.name() == s)
            .copied()
            .ok_or_else(|| Error::Input(format!("unsupported task id {s:?}")))
    }
}

/// Task configuration with the default vocabulary sizes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    /// Modulus for the arithmetic tasks and the equation task.
    pub modulus: u64,
    /// Cycle size for cycle_nav.
    pub cycle_k: usize,
    /// Content alphabet size for repetition / bucket_sort / set.
    pub small_symbols: usize,
    /// Content alphabet size for majority / majority_count.
    pub large_symbols: usize,
    /// Maximum parenthesis nesting depth for braced expressions.
    pub max_depth: usize,
}

impl TaskSpec {
    pub fn new(id: TaskId) -> Self {
        TaskSpec {
            id,
            modulus: 5,
            cycle_k: 5,
            small_symbols: 8,
            large_symbols: 64,
            max_depth: 3,
        }
    }

    fn content_symbols(&self) -> usize {
        match self.id {
            TaskId::Parity => 2,
            TaskId::CycleNav => self.cycle_k,
            TaskId::Repetition | TaskId::BucketSort | TaskId::Set => self.small_symbols,
            TaskId::Majority | TaskId::MajorityCount => self.large_symbols,
            TaskId::SolveEquation | TaskId::ModArith | TaskId::ModArithWoBraces => {
                self.modulus as usize
            }
        }
    }

    /// Number of answer classes, the baseline denominator for scaled
    /// accuracy.
    pub fn num_classes(&self) -> usize {
        match self.id {
            TaskId::Parity => 2,
            TaskId::CycleNav => self.cycle_k,
            TaskId::SolveEquation | TaskId::ModArith | TaskId::ModArithWoBraces => {
                self.modulus as usize
            }
            _ => self.content_symbols(),
        }
    }

    /// Extra non-content tokens, in vocabulary order after the content ids.
    fn extra_tokens(&self) -> usize {
        match self.id {
            // +1, -1, STAY moves.
            TaskId::CycleNav => 3,
            // + - * ( ) = x
            TaskId::SolveEquation | TaskId::ModArith | TaskId::ModArithWoBraces => 7,
            _ => 0,
        }
    }

    pub fn vocab_size(&self) -> usize {
        // content + task tokens + ACT + PAD
        self.content_symbols() + self.extra_tokens() + 2
    }

    pub fn act_token(&self) -> usize {
        self.vocab_size() - 2
    }

    pub fn pad_token(&self) -> usize {
        self.vocab_size() - 1
    }

    /// Smallest valid input length.
    pub fn min_len(&self) -> usize {
        match self.id {
            TaskId::Parity | TaskId::CycleNav | TaskId::Majority | TaskId::MajorityCount => 1,
            TaskId::ModArith | TaskId::ModArithWoBraces => 2,
            TaskId::SolveEquation => 4,
            TaskId::Repetition | TaskId::BucketSort | TaskId::Set => 2,
        }
    }

    // Token ids for the arithmetic tasks.
    fn tok_add(&self) -> usize {
        self.modulus as usize
    }
    fn tok_sub(&self) -> usize {
        self.modulus as usize + 1
    }
    fn tok_mul(&self) -> usize {
        self.modulus as usize + 2
    }
    fn tok_open(&self) -> usize {
        self.modulus as usize + 3
    }
    fn tok_close(&self) -> usize {
        self.modulus as usize + 4
    }
    fn tok_eq(&self) -> usize {
        self.modulus as usize + 5
    }
    fn tok_x(&self) -> usize {
        self.modulus as usize + 6
    }
    // Move token ids for cycle_nav.
    fn tok_plus1(&self) -> usize {
        self.cycle_k
    }
    fn tok_minus1(&self) -> usize {
        self.cycle_k + 1
    }
    fn tok_stay(&self) -> usize {
        self.cycle_k + 2
    }
}

/// One sample in the timeline format.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TaskSample {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub mask: Vec<u8>,
}

impl TaskSample {
    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }

    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, m)| **m == 1)
            .map(|(i, _)| i)
    }
}

/// Single answer predicted at the last content position.
fn assemble_single(content: Vec<usize>, answer: usize) -> TaskSample {
    let len = content.len();
    let mut target = content[1..].to_vec();
    target.push(answer);
    let mut mask = vec![0u8; len];
    mask[len - 1] = 1;
    TaskSample {
        input: content,
        target,
        mask,
    }
}

/// ACT then k teacher-forced answers; masked from the ACT position through
/// the (k-1)th answer position.
fn assemble_multi(content: Vec<usize>, act: usize, answers: Vec<usize>) -> TaskSample {
    let (l, k) = (content.len(), answers.len());
    let mut input = content;
    input.push(act);
    input.extend_from_slice(&answers[..k - 1]);
    let mut target = input[1..].to_vec();
    target.push(answers[k - 1]);
    let mut mask = vec![0u8; l + k];
    for m in mask[l..l + k].iter_mut() {
        *m = 1;
    }
    TaskSample {
        input,
        target,
        mask,
    }
}

// ── Content builders (label computation lives with the builder; the
//    oracle module re-derives labels independently for testing) ─────────

pub(crate) fn build_parity(bits: &[usize]) -> TaskSample {
    let answer = bits.iter().sum::<usize>() % 2;
    assemble_single(bits.to_vec(), answer)
}

pub(crate) fn build_cycle_nav(spec: &TaskSpec, moves: &[usize]) -> TaskSample {
    let k = spec.cycle_k as i64;
    let mut pos = 0i64;
    for &m in moves {
        if m == spec.tok_plus1() {
            pos += 1;
        } else if m == spec.tok_minus1() {
            pos -= 1;
        }
        pos = pos.rem_euclid(k);
    }
    assemble_single(moves.to_vec(), pos as usize)
}

pub(crate) fn build_majority(content: &[usize], count_instead: bool) -> TaskSample {
    let mut counts = std::collections::BTreeMap::new();
    for &x in content {
        *counts.entry(x).or_insert(0usize) += 1;
    }
    let (&sym, &cnt) = counts
        .iter()
        .max_by(|(sa, ca), (sb, cb)| ca.cmp(cb).then(sb.cmp(sa)))
        .expect("non-empty content");
    assemble_single(content.to_vec(), if count_instead { cnt } else { sym })
}

pub(crate) fn build_repetition(spec: &TaskSpec, content: &[usize]) -> TaskSample {
    assemble_multi(content.to_vec(), spec.act_token(), content.to_vec())
}

pub(crate) fn build_bucket_sort(spec: &TaskSpec, content: &[usize]) -> TaskSample {
    let mut sorted = content.to_vec();
    sorted.sort_unstable();
    assemble_multi(content.to_vec(), spec.act_token(), sorted)
}

pub(crate) fn build_set(spec: &TaskSpec, content: &[usize]) -> TaskSample {
    let mut uniq = content.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    assemble_multi(content.to_vec(), spec.act_token(), uniq)
}

/// Flat chain `v0 op v1 op ... =` evaluated left to right in Z_m.
pub(crate) fn build_mod_arith_flat(spec: &TaskSpec, operands: &[u64], ops: &[usize]) -> TaskSample {
    assert_eq!(operands.len(), ops.len() + 1);
    let m = spec.modulus;
    let mut acc = operands[0] % m;
    let mut content = vec![operands[0] as usize];
    for (i, &op) in ops.iter().enumerate() {
        let rhs = operands[i + 1] % m;
        acc = apply_op(acc, op, rhs, m, spec);
        content.push(op);
        content.push(operands[i + 1] as usize);
    }
    content.push(spec.tok_eq());
    assemble_single(content, acc as usize)
}

fn apply_op(a: u64, op_tok: usize, b: u64, m: u64, spec: &TaskSpec) -> u64 {
    if op_tok == spec.tok_add() {
        (a + b) % m
    } else if op_tok == spec.tok_sub() {
        (a + m - b % m) % m
    } else {
        (a * b) % m
    }
}

/// Random expression chain of exactly `target_len` tokens (odd), returning
/// (tokens, value). Grammar: chain := atom (op atom)*, atom := digit |
/// '(' chain ')', depth-bounded. Every atom has odd token length, so any odd
/// target is reachable exactly.
fn gen_expr_chain(
    spec: &TaskSpec,
    rng: &mut ChaCha8Rng,
    target_len: usize,
    depth: usize,
) -> (Vec<usize>, u64) {
    assert!(target_len % 2 == 1);
    let m = spec.modulus;
    let max_atom = |remaining: usize| remaining.min(21);
    let first_cap = max_atom(target_len);
    let (mut tokens, mut acc) = gen_atom(spec, rng, first_cap, depth);
    while tokens.len() < target_len {
        let remaining = target_len - tokens.len() - 1;
        let ops = [spec.tok_add(), spec.tok_sub(), spec.tok_mul()];
        let op = ops[rng.gen_range(0..3)];
        let (atom, v) = gen_atom(spec, rng, max_atom(remaining), depth);
        acc = apply_op(acc, op, v, m, spec);
        tokens.push(op);
        tokens.extend_from_slice(&atom);
    }
    (tokens, acc)
}

/// Random atom of odd length in [1, cap]; parenthesized groups recurse with
/// one less depth level.
fn gen_atom(
    spec: &TaskSpec,
    rng: &mut ChaCha8Rng,
    cap: usize,
    depth: usize,
) -> (Vec<usize>, u64) {
    let m = spec.modulus;
    // Choose an odd length; depth exhausted or tight budget forces a digit.
    let cap = cap.max(1);
    let want_group = depth > 0 && cap >= 5 && rng.gen_bool(0.5);
    if !want_group {
        let d = rng.gen_range(0..m);
        return (vec![d as usize], d);
    }
    let inner_cap = cap - 2;
    let inner_len = 2 * rng.gen_range(1..=(inner_cap.div_ceil(2))) - 1;
    let (inner, v) = gen_expr_chain(spec, rng, inner_len, depth - 1);
    let mut tokens = vec![spec.tok_open()];
    tokens.extend_from_slice(&inner);
    tokens.push(spec.tok_close());
    (tokens, v)
}

pub(crate) fn build_mod_arith_braced(
    spec: &TaskSpec,
    rng: &mut ChaCha8Rng,
    expr_len: usize,
) -> TaskSample {
    let (mut content, value) = gen_expr_chain(spec, rng, expr_len, spec.max_depth);
    content.push(spec.tok_eq());
    assemble_single(content, value as usize)
}

/// `x = <expr'> ACT` where expr' is a random braced expression patched with
/// a trailing `+ c` so it evaluates to a presampled x in Z_m.
pub(crate) fn build_solve_equation(
    spec: &TaskSpec,
    rng: &mut ChaCha8Rng,
    expr_len: usize,
) -> TaskSample {
    let m = spec.modulus;
    let x = rng.gen_range(0..m);
    let (expr, value) = if expr_len >= 3 {
        let (mut e, v) = gen_expr_chain(spec, rng, expr_len - 2, spec.max_depth);
        let c = (x + m - v) % m;
        e.push(spec.tok_add());
        e.push(c as usize);
        let patched = (v + c) % m;
        (e, patched)
    } else {
        (vec![x as usize], x)
    };
    debug_assert_eq!(value % m, x);
    let mut content = vec![spec.tok_x(), spec.tok_eq()];
    content.extend_from_slice(&expr);
    content.push(spec.act_token());
    assemble_single(content, x as usize)
}

/// Generate one sample whose input length lies in [lo, hi].
pub fn gen(spec: &TaskSpec, lo: usize, hi: usize, rng: &mut ChaCha8Rng) -> Result<TaskSample> {
    let lo = lo.max(spec.min_len());
    if lo > hi {
        return Err(Error::Config(format!(
            "length window [{lo}, {hi}] is empty for task {}",
            spec.id.name()
        )));
    }
    let sample = match spec.id {
        TaskId::Parity => {
            let len = rng.gen_range(lo..=hi);
            let bits: Vec<usize> = (0..len).map(|_| rng.gen_range(0..2)).collect();
            build_parity(&bits)
        }
        TaskId::CycleNav => {
            let len = rng.gen_range(lo..=hi);
            let toks = [spec.tok_plus1(), spec.tok_minus1(), spec.tok_stay()];
            let moves: Vec<usize> = (0..len).map(|_| toks[rng.gen_range(0..3)]).collect();
            build_cycle_nav(spec, &moves)
        }
        TaskId::Majority | TaskId::MajorityCount => {
            let len = rng.gen_range(lo..=hi);
            let s = spec.content_symbols();
            loop {
                let content: Vec<usize> = (0..len).map(|_| rng.gen_range(0..s)).collect();
                let sample = build_majority(&content, spec.id == TaskId::MajorityCount);
                // The count answer must fit the token space; resample the
                // (pathological) draws where one symbol exceeds it.
                if *sample.target.last().unwrap() < spec.vocab_size() - 2 {
                    break sample;
                }
            }
        }
        TaskId::Repetition | TaskId::BucketSort => {
            // input length = 2L.
            let l_lo = lo.div_ceil(2).max(1);
            let l_hi = (hi / 2).max(l_lo);
            let l = rng.gen_range(l_lo..=l_hi);
            let s = spec.content_symbols();
            let content: Vec<usize> = (0..l).map(|_| rng.gen_range(0..s)).collect();
            if spec.id == TaskId::Repetition {
                build_repetition(spec, &content)
            } else {
                build_bucket_sort(spec, &content)
            }
        }
        TaskId::Set => {
            // input length = L + #unique, #unique ≤ min(L, symbols).
            let s = spec.content_symbols();
            let slack = s.min(hi / 2).max(1);
            let l_lo = lo.saturating_sub(1).max(1);
            let l_hi = hi.saturating_sub(slack).max(l_lo);
            loop {
                let l = rng.gen_range(l_lo..=l_hi);
                let content: Vec<usize> = (0..l).map(|_| rng.gen_range(0..s)).collect();
                let sample = build_set(spec, &content);
                if sample.len() >= lo && sample.len() <= hi {
                    break sample;
                }
            }
        }
        TaskId::ModArithWoBraces => {
            // input = 2n-1 chain tokens + '='; n operands.
            let n_lo = lo / 2;
            let n_hi = (hi - 1).div_ceil(2);
            let n = rng.gen_range(n_lo.max(1)..=n_hi.max(1));
            let m = spec.modulus;
            let operands: Vec<u64> = (0..n).map(|_| rng.gen_range(0..m)).collect();
            let op_toks = [spec.tok_add(), spec.tok_sub(), spec.tok_mul()];
            let ops: Vec<usize> = (0..n - 1).map(|_| op_toks[rng.gen_range(0..3)]).collect();
            build_mod_arith_flat(spec, &operands, &ops)
        }
        TaskId::ModArith => {
            // input = expr (odd) + '='.
            let lo_e = (lo - 1) | 1;
            let hi_e = (hi - 1).saturating_sub((hi - 1) % 2 ^ 1).max(lo_e);
            let expr_len = random_odd_in(rng, lo_e, hi_e);
            build_mod_arith_braced(spec, rng, expr_len)
        }
        TaskId::SolveEquation => {
            // input = [x, =] + expr (odd) + [ACT].
            let lo_e = (lo.saturating_sub(3)).max(1) | 1;
            let hi_e = hi.saturating_sub(3).max(lo_e);
            let expr_len = random_odd_in(rng, lo_e, hi_e);
            build_solve_equation(spec, rng, expr_len)
        }
    };
    debug_assert!(sample.len() >= lo && sample.len() <= hi, "length {} outside [{lo},{hi}]", sample.len());
    debug_assert!(sample.input.iter().all(|t| *t < spec.vocab_size()));
    debug_assert!(sample.target.iter().all(|t| *t < spec.vocab_size()));
    Ok(sample)
}

fn random_odd_in(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    let lo = lo | 1;
    let hi = if hi % 2 == 0 { hi - 1 } else { hi };
    if hi <= lo {
        return lo;
    }
    lo + 2 * rng.gen_range(0..=(hi - lo) / 2)
}

/// Split protocol: 10k training samples of length ≤ 40, 1k validation
/// samples of length 40–256, 10k test samples of length ≤ 256, all from
/// disjoint generator streams of one seed. Validation and test inputs that
/// collide with a training input are resampled (up to a retry cap), keeping
/// cross-split duplicate sequences rare.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_size: usize,
    pub train_max_len: usize,
    pub val_size: usize,
    pub val_min_len: usize,
    pub val_max_len: usize,
    pub test_size: usize,
    pub test_max_len: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        SplitSpec {
            train_size: 10_000,
            train_max_len: 40,
            val_size: 1_000,
            val_min_len: 40,
            val_max_len: 256,
            test_size: 10_000,
            test_max_len: 256,
            seed,
        }
    }

    /// Scaled-down protocol for quick runs and tests.
    pub fn small(seed: u64) -> Self {
        SplitSpec {
            train_size: 512,
            train_max_len: 40,
            val_size: 128,
            val_min_len: 40,
            val_max_len: 256,
            test_size: 512,
            test_max_len: 256,
            seed,
        }
    }
}

pub struct Splits {
    pub train: Vec<TaskSample>,
    pub val: Vec<TaskSample>,
    pub test: Vec<TaskSample>,
}

pub fn make_splits(spec: &TaskSpec, split: &SplitSpec) -> Result<Splits> {
    let mut rng_train = ChaCha8Rng::seed_from_u64(split.seed);
    rng_train.set_stream(1);
    let mut rng_val = ChaCha8Rng::seed_from_u64(split.seed);
    rng_val.set_stream(2);
    let mut rng_test = ChaCha8Rng::seed_from_u64(split.seed);
    rng_test.set_stream(3);

    let min = spec.min_len();
    let mut train = Vec::with_capacity(split.train_size);
    let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(split.train_size * 2);
    for _ in 0..split.train_size {
        let s = gen(spec, min, split.train_max_len, &mut rng_train)?;
        seen.insert(s.input.clone());
        train.push(s);
    }
    let draw_fresh = |lo: usize, hi: usize, rng: &mut ChaCha8Rng| -> Result<TaskSample> {
        for _ in 0..100 {
            let s = gen(spec, lo, hi, rng)?;
            if !seen.contains(&s.input) {
                return Ok(s);
            }
        }
        gen(spec, lo, hi, rng)
    };
    let mut val = Vec::with_capacity(split.val_size);
    for _ in 0..split.val_size {
        val.push(draw_fresh(split.val_min_len, split.val_max_len, &mut rng_val)?);
    }
    let mut test = Vec::with_capacity(split.test_size);
    for _ in 0..split.test_size {
        test.push(draw_fresh(min, split.test_max_len, &mut rng_test)?);
    }
    Ok(Splits { train, val, test })
}

/// One line per sample: space-separated input / target / mask token ids,
/// tab-separated fields; the header records the task configuration.
pub fn dump_samples<W: Write>(
    w: &mut W,
    spec: &TaskSpec,
    split_name: &str,
    samples: &[TaskSample],
) -> Result<()> {
    writeln!(
        w,
        "# task={} split={} vocab={} num_classes={} act={} pad={} modulus={} cycle_k={} \
         small_symbols={} large_symbols={} max_depth={}",
        spec.id.name(),
        split_name,
        spec.vocab_size(),
        spec.num_classes(),
        spec.act_token(),
        spec.pad_token(),
        spec.modulus,
        spec.cycle_k,
        spec.small_symbols,
        spec.large_symbols,
        spec.max_depth
    )?;
    for s in samples {
        let fmt = |xs: &[usize]| {
            xs.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mask = s
            .mask
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        writeln!(w, "{}\t{}\t{}", fmt(&s.input), fmt(&s.target), mask)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn parity_sample_layout() {
        let s = build_parity(&[1, 1, 0, 1]);
        assert_eq!(s.input, vec![1, 1, 0, 1]);
        assert_eq!(s.target, vec![1, 0, 1, 1]);
        assert_eq!(s.mask, vec![0, 0, 0, 1]);
        assert_eq!(*s.target.last().unwrap(), 1);
    }

    #[test]
    fn bucket_sort_matches_the_timeline_layout() {
        let spec = TaskSpec::new(TaskId::BucketSort);
        let s = build_bucket_sort(&spec, &[3, 5, 0, 7, 3]);
        let act = spec.act_token();
        assert_eq!(s.input, vec![3, 5, 0, 7, 3, act, 0, 3, 3, 5]);
        assert_eq!(s.target, vec![5, 0, 7, 3, act, 0, 3, 3, 5, 7]);
        assert_eq!(s.mask, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn teacher_forcing_shift_holds_everywhere() {
        for id in ALL_TASKS {
            let spec = TaskSpec::new(id);
            let mut r = rng(7);
            for _ in 0..50 {
                let s = gen(&spec, spec.min_len(), 64, &mut r).unwrap();
                for t in 0..s.len() - 1 {
                    assert_eq!(
                        s.target[t],
                        s.input[t + 1],
                        "{}: shift violated at {t}",
                        id.name()
                    );
                }
                assert!(s.input.iter().all(|t| *t < spec.vocab_size()));
            }
        }
    }

    #[test]
    fn mask_cardinality_per_task_family() {
        let mut r = rng(11);
        for id in ALL_TASKS {
            let spec = TaskSpec::new(id);
            for _ in 0..30 {
                let s = gen(&spec, spec.min_len(), 60, &mut r).unwrap();
                let masked = s.masked_positions().count();
                match id {
                    TaskId::Repetition | TaskId::BucketSort => {
                        assert_eq!(masked, (s.len()) / 2, "{}", id.name());
                    }
                    TaskId::Set => assert!(masked >= 1 && masked <= 8),
                    _ => assert_eq!(masked, 1, "{}", id.name()),
                }
                // Single-answer tasks mask exactly the last position.
                if masked == 1 && !matches!(id, TaskId::Set) {
                    assert_eq!(s.mask[s.len() - 1], 1);
                }
            }
        }
    }

    /// Decode an arithmetic input back to interpreter tokens.
    fn to_expr_toks(spec: &TaskSpec, input: &[usize]) -> Vec<oracle::ExprTok> {
        input
            .iter()
            .filter_map(|&t| {
                if t < spec.modulus as usize {
                    Some(oracle::ExprTok::Num(t as u64))
                } else if t == spec.tok_add() {
                    Some(oracle::ExprTok::Add)
                } else if t == spec.tok_sub() {
                    Some(oracle::ExprTok::Sub)
                } else if t == spec.tok_mul() {
                    Some(oracle::ExprTok::Mul)
                } else if t == spec.tok_open() {
                    Some(oracle::ExprTok::Open)
                } else if t == spec.tok_close() {
                    Some(oracle::ExprTok::Close)
                } else {
                    None
                }
            })
            .collect()
    }

    #[test]
    fn labels_match_oracle_interpreters_on_random_samples() {
        let mut r = rng(13);
        for _ in 0..200 {
            let spec = TaskSpec::new(TaskId::Parity);
            let s = gen(&spec, 1, 80, &mut r).unwrap();
            let label = *s.target.last().unwrap();
            assert_eq!(label, oracle::parity_label(&s.input).unwrap());

            let spec = TaskSpec::new(TaskId::CycleNav);
            let s = gen(&spec, 1, 80, &mut r).unwrap();
            let powers: Vec<usize> = s
                .input
                .iter()
                .map(|&t| {
                    if t == spec.tok_plus1() {
                        1
                    } else if t == spec.tok_minus1() {
                        spec.cycle_k - 1
                    } else {
                        0
                    }
                })
                .collect();
            assert_eq!(
                *s.target.last().unwrap(),
                oracle::cycle_nav_label(&powers, spec.cycle_k).unwrap()
            );

            let spec = TaskSpec::new(TaskId::ModArithWoBraces);
            let s = gen(&spec, 2, 80, &mut r).unwrap();
            let toks = to_expr_toks(&spec, &s.input[..s.len() - 1]);
            assert_eq!(
                *s.target.last().unwrap() as u64,
                oracle::eval_mod_flat(&toks, spec.modulus).unwrap()
            );

            let spec = TaskSpec::new(TaskId::ModArith);
            let s = gen(&spec, 2, 120, &mut r).unwrap();
            assert_eq!(*s.input.last().unwrap(), spec.tok_eq());
            let toks = to_expr_toks(&spec, &s.input[..s.len() - 1]);
            assert_eq!(
                *s.target.last().unwrap() as u64,
                oracle::eval_mod_braced(&toks, spec.modulus).unwrap()
            );

            let spec = TaskSpec::new(TaskId::SolveEquation);
            let s = gen(&spec, 4, 120, &mut r).unwrap();
            // Layout: x = <expr> ACT with the answer as the masked target.
            assert_eq!(s.input[0], spec.tok_x());
            assert_eq!(s.input[1], spec.tok_eq());
            assert_eq!(*s.input.last().unwrap(), spec.act_token());
            let toks = to_expr_toks(&spec, &s.input[2..s.len() - 1]);
            assert_eq!(
                *s.target.last().unwrap() as u64,
                oracle::eval_mod_braced(&toks, spec.modulus).unwrap()
            );
        }
    }

    #[test]
    fn multi_answer_labels_match_oracle_interpreters() {
        let mut r = rng(17);
        for _ in 0..100 {
            for id in [TaskId::Repetition, TaskId::BucketSort, TaskId::Set] {
                let spec = TaskSpec::new(id);
                let s = gen(&spec, 2, 60, &mut r).unwrap();
                let act_pos = s.input.iter().position(|&t| t == spec.act_token()).unwrap();
                let content = &s.input[..act_pos];
                let answers: Vec<usize> = s
                    .masked_positions()
                    .map(|p| s.target[p])
                    .collect();
                let expect = match id {
                    TaskId::Repetition => content.to_vec(),
                    TaskId::BucketSort => oracle::bucket_sort_label(content),
                    TaskId::Set => oracle::set_label(content),
                    _ => unreachable!(),
                };
                assert_eq!(answers, expect, "{}", id.name());
            }
            for id in [TaskId::Majority, TaskId::MajorityCount] {
                let spec = TaskSpec::new(id);
                let s = gen(&spec, 1, 60, &mut r).unwrap();
                let label = *s.target.last().unwrap();
                let expect = match id {
                    TaskId::Majority => oracle::majority_label(&s.input).unwrap(),
                    _ => oracle::majority_count_label(&s.input).unwrap(),
                };
                assert_eq!(label, expect, "{}", id.name());
            }
        }
    }

    #[test]
    fn parity_and_cycle_nav_labels_exhaustive_short_words() {
        // Every bit string of length ≤ 10.
        for len in 1..=10usize {
            for code in 0..(1u32 << len) {
                let bits: Vec<usize> = (0..len).map(|i| ((code >> i) & 1) as usize).collect();
                let s = build_parity(&bits);
                assert_eq!(
                    *s.target.last().unwrap(),
                    oracle::parity_label(&bits).unwrap()
                );
            }
        }
        // Every move string of length ≤ 7 over the three moves.
        let spec = TaskSpec::new(TaskId::CycleNav);
        let toks = [spec.tok_plus1(), spec.tok_minus1(), spec.tok_stay()];
        let mut stack = vec![Vec::new()];
        while let Some(w) = stack.pop() {
            if !w.is_empty() {
                let moves: Vec<usize> = w.iter().map(|&i| toks[i as usize]).collect();
                let s = build_cycle_nav(&spec, &moves);
                let powers: Vec<usize> = w
                    .iter()
                    .map(|&i| [1usize, spec.cycle_k - 1, 0][i as usize])
                    .collect();
                assert_eq!(
                    *s.target.last().unwrap(),
                    oracle::cycle_nav_label(&powers, spec.cycle_k).unwrap()
                );
            }
            if w.len() < 7 {
                for i in 0..3u8 {
                    let mut w2 = w.clone();
                    w2.push(i);
                    stack.push(w2);
                }
            }
        }
    }

    #[test]
    fn counting_family_labels_exhaustive_binary_content() {
        // Full 8/64-symbol spaces are astronomically large; a binary
        // sub-alphabet still exercises ordering, ties, and duplicates.
        for len in 1..=10usize {
            for code in 0..(1u32 << len) {
                let content: Vec<usize> = (0..len).map(|i| ((code >> i) & 1) as usize).collect();
                let spec = TaskSpec::new(TaskId::BucketSort);
                let s = build_bucket_sort(&spec, &content);
                let got: Vec<usize> = s.masked_positions().map(|p| s.target[p]).collect();
                assert_eq!(got, oracle::bucket_sort_label(&content));

                let spec = TaskSpec::new(TaskId::Set);
                let s = build_set(&spec, &content);
                let got: Vec<usize> = s.masked_positions().map(|p| s.target[p]).collect();
                assert_eq!(got, oracle::set_label(&content));

                let s = build_majority(&content, false);
                assert_eq!(
                    *s.target.last().unwrap(),
                    oracle::majority_label(&content).unwrap()
                );
                let s = build_majority(&content, true);
                assert_eq!(
                    *s.target.last().unwrap(),
                    oracle::majority_count_label(&content).unwrap()
                );
            }
        }
    }

    #[test]
    fn splits_are_deterministic_and_sized() {
        let spec = TaskSpec::new(TaskId::Parity);
        let split = SplitSpec::small(99);
        let a = make_splits(&spec, &split).unwrap();
        let b = make_splits(&spec, &split).unwrap();
        assert_eq!(a.train[0], b.train[0]);
        assert_eq!(a.val[17], b.val[17]);
        assert_eq!(a.train.len(), split.train_size);
        assert_eq!(a.val.len(), split.val_size);
        assert_eq!(a.test.len(), split.test_size);
        assert!(a.train.iter().all(|s| s.len() <= split.train_max_len));
        assert!(a
            .val
            .iter()
            .all(|s| s.len() >= split.val_min_len && s.len() <= split.val_max_len));
        assert!(a.test.iter().all(|s| s.len() <= split.test_max_len));
    }

    #[test]
    fn cross_split_duplicates_are_rare() {
        for id in [TaskId::Repetition, TaskId::Parity] {
            let spec = TaskSpec::new(id);
            let split = SplitSpec::new(3);
            let s = make_splits(&spec, &split).unwrap();
            let train: HashSet<&Vec<usize>> = s.train.iter().map(|x| &x.input).collect();
            let dups = s.test.iter().filter(|x| train.contains(&x.input)).count();
            let rate = dups as f64 / s.test.len() as f64;
            assert!(rate < 0.001, "{}: duplicate rate {rate}", id.name());
        }
    }

    #[test]
    fn dump_round_trips_visually() {
        let spec = TaskSpec::new(TaskId::Parity);
        let mut r = rng(5);
        let samples = vec![gen(&spec, 1, 8, &mut r).unwrap()];
        let mut buf = Vec::new();
        dump_samples(&mut buf, &spec, "train", &samples).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# task=parity split=train vocab=4"));
        let line = text.lines().nth(1).unwrap();
        assert_eq!(line.split('\t').count(), 3);
    }

    #[test]
    fn unsupported_task_id_is_rejected() {
        assert!(TaskId::parse("sorting_hat").is_err());
    }
}
