//! Exact automata machinery and constructive syntheses.
//!
//! Finite-state automata over integer alphabets serve as ground truth for
//! the counting tasks and for the mod-k counter synthesis: a synthesized
//! counter emits AUSSM parameters whose single rotating state, decoded by
//! nearest-root rounding, must reproduce the FSA state trace exactly at f64.

use crate::c64::C64;
use crate::kernels::aussm::aussm_state_trace;
use crate::kernels::{AussmParams, SeqTensor};
use crate::{Error, Result};
use std::f64::consts::{PI, TAU};

/// Deterministic finite-state automaton over the alphabet {0, .., sigma-1}
/// with states {0, .., q-1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fsa {
    pub num_states: usize,
    pub alphabet_size: usize,
    /// Row-major (state, symbol) -> state.
    pub delta: Vec<usize>,
    pub start: usize,
}

impl Fsa {
    pub fn new(
        num_states: usize,
        alphabet_size: usize,
        delta: Vec<usize>,
        start: usize,
    ) -> Result<Self> {
        if num_states == 0 || alphabet_size == 0 {
            return Err(Error::Contract("FSA needs at least one state and symbol".into()));
        }
        if delta.len() != num_states * alphabet_size {
            return Err(Error::Contract("transition table must be total".into()));
        }
        if start >= num_states || delta.iter().any(|q| *q >= num_states) {
            return Err(Error::Contract("transition target out of range".into()));
        }
        Ok(Fsa {
            num_states,
            alphabet_size,
            delta,
            start,
        })
    }

    #[inline]
    pub fn step(&self, q: usize, sym: usize) -> Result<usize> {
        if sym >= self.alphabet_size {
            return Err(Error::Contract(format!(
                "unknown symbol {sym} for alphabet of size {}",
                self.alphabet_size
            )));
        }
        Ok(self.delta[q * self.alphabet_size + sym])
    }

    /// State sequence after each symbol; the start state is kept separately.
    pub fn run(&self, word: &[usize]) -> Result<Vec<usize>> {
        let mut q = self.start;
        let mut out = Vec::with_capacity(word.len());
        for &sym in word {
            q = self.step(q, sym)?;
            out.push(q);
        }
        Ok(out)
    }

    /// Final state on a word.
    pub fn accepting_state(&self, word: &[usize]) -> Result<usize> {
        Ok(self.run(word)?.last().copied().unwrap_or(self.start))
    }
}

/// FSA whose symbols act as powers of one fixed k-cycle:
/// `δ(q, σ) = (q + power_map[σ]) mod k`. At least one symbol must have a
/// power coprime with k so some symbol has order exactly k.
pub fn cyclic_perm_automaton(k: usize, power_map: &[usize]) -> Result<Fsa> {
    if power_map.is_empty() {
        return Err(Error::Contract("empty alphabet".into()));
    }
    if k < 2 {
        return Err(Error::Contract("cycle size must be at least 2".into()));
    }
    if !power_map.iter().any(|p| gcd(p % k, k) == 1) {
        return Err(Error::Contract(
            "no symbol generates the full k-cycle (power coprime with k required)".into(),
        ));
    }
    let mut delta = vec![0usize; k * power_map.len()];
    for q in 0..k {
        for (s, p) in power_map.iter().enumerate() {
            delta[q * power_map.len() + s] = (q + p) % k;
        }
    }
    Fsa::new(k, power_map.len(), delta, 0)
}

/// FSA where each symbol maps every state to a single symbol-determined
/// target: `δ(q, σ) = targets[σ]`.
pub fn set_reset_automaton(num_states: usize, targets: &[usize]) -> Result<Fsa> {
    if targets.is_empty() {
        return Err(Error::Contract("empty alphabet".into()));
    }
    if targets.iter().any(|t| *t >= num_states) {
        return Err(Error::Contract("reset target out of range".into()));
    }
    let mut delta = vec![0usize; num_states * targets.len()];
    for q in 0..num_states {
        for (s, t) in targets.iter().enumerate() {
            delta[q * targets.len() + s] = *t;
        }
    }
    Fsa::new(num_states, targets.len(), delta, 0)
}

/// Which transition equation the cascade product uses. `Printed` is the
/// typographic form `δ_c((q1,q2),σ) = (δ_2(q1,(q2,σ)), δ_1(q1,σ))`, which
/// reads states of one component as states of the other and therefore
/// requires |Q1| = |Q2|; `Corrected` is the standard form
/// `δ_c((q1,q2),σ) = (δ_1(q1,σ), δ_2(q2,(q1,σ)))` where the downstream
/// automaton reads the upstream state from before the transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CascadeForm {
    Printed,
    Corrected,
}

/// Cascade product over Σ1 with states Q1 × Q2, encoded `q1·|Q2| + q2`.
/// Requires Σ2 = Q1 × Σ1 with letter encoding `(q, σ) -> q·|Σ1| + σ`.
pub fn cascade_product(a1: &Fsa, a2: &Fsa, form: CascadeForm) -> Result<Fsa> {
    if a2.alphabet_size != a1.num_states * a1.alphabet_size {
        return Err(Error::Contract(
            "cascade requires the second alphabet to be Q1 x Sigma1".into(),
        ));
    }
    if form == CascadeForm::Printed && a1.num_states != a2.num_states {
        return Err(Error::Contract(
            "the printed cascade form reads component states interchangeably and needs |Q1| = |Q2|"
                .into(),
        ));
    }
    let (s1, q2n) = (a1.alphabet_size, a2.num_states);
    let num_states = a1.num_states * q2n;
    let mut delta = vec![0usize; num_states * s1];
    for q1 in 0..a1.num_states {
        for q2 in 0..q2n {
            for sym in 0..s1 {
                let next = match form {
                    CascadeForm::Corrected => {
                        let n1 = a1.step(q1, sym)?;
                        let n2 = a2.step(q2, q1 * s1 + sym)?;
                        n1 * q2n + n2
                    }
                    CascadeForm::Printed => {
                        let c1 = a2.step(q1, q2 * s1 + sym)?;
                        let c2 = a1.step(q1, sym)?;
                        c1 * q2n + c2
                    }
                };
                delta[(q1 * q2n + q2) * s1 + sym] = next;
            }
        }
    }
    Fsa::new(num_states, s1, delta, a1.start * q2n + a2.start)
}

/// A mod-k counter realized as AUSSM parameters: symbol σ (encoded as the
/// input value `power_map[σ]`) rotates the single state by `2π·power/k`;
/// nothing drives the state (r_b = 0) and the initial state enters as a unit
/// carry.
#[derive(Debug, Clone)]
pub struct CounterSynthesis {
    pub k: usize,
    pub power_map: Vec<usize>,
    pub params: AussmParams,
    /// decode_table[r] = 2π·r/k, the angle of residue r.
    pub decode_table: Vec<f64>,
}

/// Build the counter. Running the recurrent reference with the emitted
/// parameters and nearest-root decoding reproduces
/// `cyclic_perm_automaton(k, power_map)` exactly at f64 for any realistic
/// length (see [`precision_horizon`]).
pub fn synthesize_mod_counter(k: usize, power_map: &[usize]) -> Result<CounterSynthesis> {
    // Validates k and the power map.
    cyclic_perm_automaton(k, power_map)?;
    let mut params = AussmParams::zeros(1, 1);
    params.r_c[0] = 1.0;
    params.chi[0] = TAU / k as f64;
    params.chi_delta_bias[0] = 1.0;
    let decode_table = (0..k).map(|r| TAU * r as f64 / k as f64).collect();
    Ok(CounterSynthesis {
        k,
        power_map: power_map.to_vec(),
        params,
        decode_table,
    })
}

impl CounterSynthesis {
    /// Symbol word -> kernel input lane (each symbol encoded by its power).
    pub fn encode_word(&self, word: &[usize]) -> Result<SeqTensor> {
        let mut data = Vec::with_capacity(word.len());
        for &sym in word {
            let p = *self
                .power_map
                .get(sym)
                .ok_or_else(|| Error::Contract(format!("unknown symbol {sym}")))?;
            data.push(p as f64);
        }
        SeqTensor::from_vec(data, 1, 1, word.len())
    }

    /// Nearest-root decode of a state value.
    pub fn decode(&self, x: C64) -> usize {
        let angle = x.arg();
        let r = (angle * self.k as f64 / TAU).round() as i64;
        r.rem_euclid(self.k as i64) as usize
    }

    /// Residue trace for a word, via the kernel's recurrent reference with a
    /// unit initial state.
    pub fn run(&self, word: &[usize]) -> Result<Vec<usize>> {
        Ok(self.state_trace(word)?.iter().map(|x| self.decode(*x)).collect())
    }

    /// Raw complex state trace for a word.
    pub fn state_trace(&self, word: &[usize]) -> Result<Vec<C64>> {
        let u = self.encode_word(word)?;
        let x0 = [C64::new(1.0, 0.0)];
        aussm_state_trace(&self.params, &u, None, Some(&x0))
    }
}

/// Maximum token count before accumulated floating-point phase error can
/// confuse adjacent kth roots of unity: `floor(π / (√5 · eps · k))`.
/// Monotone decreasing in both arguments.
pub fn precision_horizon(k: u64, eps: f64) -> u128 {
    (PI / (5f64.sqrt() * eps * k as f64)).floor() as u128
}

/// Result of one synthesized-counter soundness run against the FSA oracle.
#[derive(Debug, Clone)]
pub struct SoundnessReport {
    pub k: usize,
    pub len: usize,
    pub words: usize,
    pub mismatches: usize,
    /// Worst observed |state phase − exact residue angle| over all steps.
    pub max_angle_err: f64,
    /// The √5·ε·N worst-case drift budget for this length.
    pub drift_budget: f64,
    /// Set when the requested length exceeds the precision horizon for k.
    pub horizon_warning: Option<String>,
}

impl SoundnessReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0 && self.max_angle_err <= self.drift_budget
    }
}

/// Run `words` seeded random words of length `len` through a synthesized
/// mod-k counter (identity power map) and the matching cyclic automaton,
/// comparing decoded residues at every step and measuring phase drift
/// against the exact residue angles.
pub fn counter_soundness(k: usize, len: usize, words: usize, seed: u64) -> Result<SoundnessReport> {
    use rand::{Rng, SeedableRng};
    let power_map: Vec<usize> = if k < 2 { vec![0, 1] } else { (0..k).collect() };
    let synth = synthesize_mod_counter(k, &power_map)?;
    let fsa = cyclic_perm_automaton(k, &power_map)?;
    let eps = 2f64.powi(-53);
    let horizon = precision_horizon(k as u64, eps);
    let horizon_warning = if (len as u128) > horizon {
        Some(format!(
            "length {len} exceeds the precision horizon {horizon} for k={k}; \
             adjacent residues may blur"
        ))
    } else {
        None
    };

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    let mut max_angle_err = 0f64;
    for _ in 0..words {
        let word: Vec<usize> = (0..len).map(|_| rng.gen_range(0..power_map.len())).collect();
        let trace = synth.state_trace(&word)?;
        let expected = fsa.run(&word)?;
        for (x, q) in trace.iter().zip(expected.iter()) {
            if synth.decode(*x) != *q {
                mismatches += 1;
            }
            let exact = crate::scan::wrap_angle(synth.decode_table[*q]);
            let mut diff = (x.arg() - exact).abs();
            if diff > PI {
                diff = TAU - diff;
            }
            max_angle_err = max_angle_err.max(diff);
        }
    }
    Ok(SoundnessReport {
        k,
        len,
        words,
        mismatches,
        max_angle_err,
        drift_budget: 5f64.sqrt() * eps * len as f64,
        horizon_warning,
    })
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

// ── Independent task-label interpreters ────────────────────────────────
//
// Direct interpreters over content symbols, used to check generated task
// labels. They share no code with the generators.

/// Expression tokens for the modular-arithmetic interpreters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExprTok {
    Num(u64),
    Add,
    Sub,
    Mul,
    Open,
    Close,
}

/// Left-to-right evaluation (no precedence, no braces) of
/// `v0 op v1 op v2 ...` in Z_m.
pub fn eval_mod_flat(tokens: &[ExprTok], modulus: u64) -> Result<u64> {
    let mut iter = tokens.iter();
    let mut acc = match iter.next() {
        Some(ExprTok::Num(v)) => v % modulus,
        _ => return Err(Error::Input("expression must start with a number".into())),
    };
    loop {
        let op = match iter.next() {
            None => return Ok(acc),
            Some(op @ (ExprTok::Add | ExprTok::Sub | ExprTok::Mul)) => op,
            Some(t) => return Err(Error::Input(format!("unexpected token {t:?}"))),
        };
        let rhs = match iter.next() {
            Some(ExprTok::Num(v)) => v % modulus,
            t => return Err(Error::Input(format!("expected number, got {t:?}"))),
        };
        acc = apply_mod_op(acc, *op, rhs, modulus)?;
    }
}

/// Recursive-descent evaluation of a braced expression in Z_m. Grammar:
/// `expr := atom (op atom)*` folded left to right (no precedence),
/// `atom := number | '(' expr ')'`.
pub fn eval_mod_braced(tokens: &[ExprTok], modulus: u64) -> Result<u64> {
    let (v, rest) = parse_chain(tokens, modulus)?;
    if !rest.is_empty() {
        return Err(Error::Input("trailing tokens after expression".into()));
    }
    Ok(v)
}

fn parse_chain(tokens: &[ExprTok], modulus: u64) -> Result<(u64, &[ExprTok])> {
    let (mut acc, mut rest) = parse_atom(tokens, modulus)?;
    while let Some(op @ (ExprTok::Add | ExprTok::Sub | ExprTok::Mul)) = rest.first() {
        let (rhs, next) = parse_atom(&rest[1..], modulus)?;
        acc = apply_mod_op(acc, *op, rhs, modulus)?;
        rest = next;
    }
    Ok((acc, rest))
}

fn parse_atom(tokens: &[ExprTok], modulus: u64) -> Result<(u64, &[ExprTok])> {
    match tokens.first() {
        Some(ExprTok::Num(v)) => Ok((v % modulus, &tokens[1..])),
        Some(ExprTok::Open) => {
            let (v, rest) = parse_chain(&tokens[1..], modulus)?;
            match rest.first() {
                Some(ExprTok::Close) => Ok((v, &rest[1..])),
                t => Err(Error::Input(format!("expected ')', got {t:?}"))),
            }
        }
        t => Err(Error::Input(format!("unexpected token {t:?}"))),
    }
}

fn apply_mod_op(a: u64, op: ExprTok, b: u64, m: u64) -> Result<u64> {
    Ok(match op {
        ExprTok::Add => (a + b) % m,
        ExprTok::Sub => (a + m - b % m) % m,
        ExprTok::Mul => (a * b) % m,
        _ => return Err(Error::Input("not an operator".into())),
    })
}

/// Parity of a bit word, via the k=2 cyclic automaton.
pub fn parity_label(bits: &[usize]) -> Result<usize> {
    let fsa = cyclic_perm_automaton(2, &[0, 1])?;
    fsa.accepting_state(bits)
}

/// Net displacement on a k-cycle given moves encoded as powers
/// (+1 -> 1, STAY -> 0, -1 -> k-1), via the cyclic automaton.
pub fn cycle_nav_label(moves: &[usize], k: usize) -> Result<usize> {
    let powers: Vec<usize> = (0..k).collect();
    let fsa = cyclic_perm_automaton(k, &powers)?;
    fsa.accepting_state(moves)
}

/// Most frequent symbol; ties resolved to the smallest symbol.
pub fn majority_label(xs: &[usize]) -> Option<usize> {
    let &max = xs.iter().max()?;
    let mut counts = vec![0usize; max + 1];
    for &x in xs {
        counts[x] += 1;
    }
    counts
        .iter()
        .enumerate()
        .max_by(|(ia, ca), (ib, cb)| ca.cmp(cb).then(ib.cmp(ia)))
        .map(|(i, _)| i)
}

/// Count of the majority symbol (with the same tie rule).
pub fn majority_count_label(xs: &[usize]) -> Option<usize> {
    let m = majority_label(xs)?;
    Some(xs.iter().filter(|x| **x == m).count())
}

/// Ascending sort of the content.
pub fn bucket_sort_label(xs: &[usize]) -> Vec<usize> {
    let mut out = xs.to_vec();
    out.sort_unstable();
    out
}

/// Ascending sorted distinct symbols.
pub fn set_label(xs: &[usize]) -> Vec<usize> {
    let mut out = xs.to_vec();
    out.sort_unstable();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn parity_fsa() -> Fsa {
        cyclic_perm_automaton(2, &[0, 1]).unwrap()
    }

    #[test]
    fn parity_fsa_runs_the_xor_chain() {
        let fsa = parity_fsa();
        assert_eq!(fsa.run(&[1, 1, 0, 1]).unwrap(), vec![1, 0, 0, 1]);
        assert_eq!(fsa.run(&[]).unwrap(), Vec::<usize>::new());
        assert_eq!(fsa.start, 0);
    }

    #[test]
    fn run_matches_stepwise_table_walk() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let num_states = 5;
        let alphabet = 3;
        let delta: Vec<usize> = (0..num_states * alphabet)
            .map(|_| rng.gen_range(0..num_states))
            .collect();
        let fsa = Fsa::new(num_states, alphabet, delta, 2).unwrap();
        let word: Vec<usize> = (0..50).map(|_| rng.gen_range(0..alphabet)).collect();
        let trace = fsa.run(&word).unwrap();
        let mut q = fsa.start;
        for (l, &sym) in word.iter().enumerate() {
            q = fsa.delta[q * alphabet + sym];
            assert_eq!(trace[l], q);
        }
    }

    #[test]
    fn unknown_symbol_is_rejected() {
        let fsa = parity_fsa();
        assert!(matches!(fsa.run(&[0, 2]), Err(Error::Contract(_))));
    }

    #[test]
    fn cyclic_automaton_powers_compose_mod_k() {
        let k = 6;
        let powers = [1usize, 2, 3, 0];
        let fsa = cyclic_perm_automaton(k, &powers).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let word: Vec<usize> = (0..40).map(|_| rng.gen_range(0..powers.len())).collect();
        let sum: usize = word.iter().map(|s| powers[*s]).sum();
        assert_eq!(fsa.accepting_state(&word).unwrap(), sum % k);
    }

    #[test]
    fn cyclic_automaton_requires_a_generator() {
        // All powers share a factor with k = 4, so no symbol has order 4.
        assert!(cyclic_perm_automaton(4, &[0, 2]).is_err());
        assert!(cyclic_perm_automaton(2, &[]).is_err());
    }

    #[test]
    fn order_of_a_unit_power_is_exactly_k() {
        let k = 4;
        let fsa = cyclic_perm_automaton(k, &[0, 1]).unwrap();
        let mut q = 0;
        for step in 1..=k {
            q = fsa.step(q, 1).unwrap();
            if step < k {
                assert_ne!(q, 0, "cycle closed early at {step}");
            }
        }
        assert_eq!(q, 0);
    }

    #[test]
    fn set_reset_ignores_current_state() {
        let fsa = set_reset_automaton(3, &[2, 0]).unwrap();
        for q in 0..3 {
            assert_eq!(fsa.step(q, 0).unwrap(), 2);
            assert_eq!(fsa.step(q, 1).unwrap(), 0);
        }
    }

    #[test]
    fn cascade_with_identity_downstream_mirrors_upstream() {
        let a1 = parity_fsa();
        // Single-state downstream: alphabet Q1 x Sigma1 = 4 letters.
        let a2 = Fsa::new(1, 4, vec![0, 0, 0, 0], 0).unwrap();
        let c = cascade_product(&a1, &a2, CascadeForm::Corrected).unwrap();
        let word = [1, 0, 1, 1, 0, 1];
        let c_trace = c.run(&word).unwrap();
        let a1_trace = a1.run(&word).unwrap();
        // With |Q2| = 1 the encoded product state equals the A1 state.
        assert_eq!(c_trace, a1_trace);
    }

    fn random_fsa(num_states: usize, alphabet: usize, rng: &mut ChaCha8Rng) -> Fsa {
        let delta: Vec<usize> = (0..num_states * alphabet)
            .map(|_| rng.gen_range(0..num_states))
            .collect();
        Fsa::new(num_states, alphabet, delta, rng.gen_range(0..num_states)).unwrap()
    }

    /// Stepwise pair-state simulation of either cascade form.
    fn brute_force_cascade(
        a1: &Fsa,
        a2: &Fsa,
        form: CascadeForm,
        word: &[usize],
    ) -> Vec<(usize, usize)> {
        let s1 = a1.alphabet_size;
        let (mut q1, mut q2) = (a1.start, a2.start);
        let mut out = Vec::new();
        for &sym in word {
            let (n1, n2) = match form {
                CascadeForm::Corrected => (
                    a1.step(q1, sym).unwrap(),
                    a2.step(q2, q1 * s1 + sym).unwrap(),
                ),
                CascadeForm::Printed => (
                    a2.step(q1, q2 * s1 + sym).unwrap(),
                    a1.step(q1, sym).unwrap(),
                ),
            };
            q1 = n1;
            q2 = n2;
            out.push((q1, q2));
        }
        out
    }

    fn all_words(alphabet: usize, max_len: usize) -> Vec<Vec<usize>> {
        let mut words: Vec<Vec<usize>> = vec![vec![]];
        let mut out = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for w in &words {
                for s in 0..alphabet {
                    let mut w2 = w.clone();
                    w2.push(s);
                    next.push(w2);
                }
            }
            out.extend(next.iter().cloned());
            words = next;
        }
        out
    }

    #[test]
    fn corrected_cascade_matches_pair_state_brute_force_exhaustively() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for q1 in 1..=4usize {
            for q2 in 1..=4usize {
                let a1 = random_fsa(q1, 2, &mut rng);
                let a2 = random_fsa(q2, q1 * 2, &mut rng);
                let c = cascade_product(&a1, &a2, CascadeForm::Corrected).unwrap();
                for word in all_words(2, 6) {
                    let got = c.run(&word).unwrap();
                    let expect = brute_force_cascade(&a1, &a2, CascadeForm::Corrected, &word);
                    let expect_enc: Vec<usize> =
                        expect.iter().map(|(x, y)| x * q2 + y).collect();
                    assert_eq!(got, expect_enc, "q1={q1} q2={q2} word={word:?}");
                }
            }
        }
    }

    #[test]
    fn printed_cascade_matches_its_own_brute_force_when_sizes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a1 = random_fsa(2, 2, &mut rng);
        let a2 = random_fsa(2, 4, &mut rng);
        let c = cascade_product(&a1, &a2, CascadeForm::Printed).unwrap();
        for word in all_words(2, 6) {
            let got = c.run(&word).unwrap();
            let expect = brute_force_cascade(&a1, &a2, CascadeForm::Printed, &word);
            let expect_enc: Vec<usize> = expect.iter().map(|(x, y)| x * 2 + y).collect();
            assert_eq!(got, expect_enc, "word={word:?}");
        }
    }

    #[test]
    fn printed_cascade_rejects_mismatched_state_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a1 = random_fsa(2, 2, &mut rng);
        let a2 = random_fsa(3, 4, &mut rng);
        assert!(cascade_product(&a1, &a2, CascadeForm::Printed).is_err());
        assert!(cascade_product(&a1, &a2, CascadeForm::Corrected).is_ok());
    }

    #[test]
    fn cascaded_parity_counts_prefix_flips_mod_two() {
        // A2 flips whenever A1's previous state was odd, so the second
        // component counts (mod 2) the steps entered from odd prefix parity.
        let a1 = parity_fsa();
        let a2 = cyclic_perm_automaton(2, &[0, 0, 1, 1]).unwrap();
        let c = cascade_product(&a1, &a2, CascadeForm::Corrected).unwrap();
        for word in all_words(2, 8) {
            let trace = c.run(&word).unwrap();
            let mut parity = 0usize;
            let mut flips = 0usize;
            for (l, &b) in word.iter().enumerate() {
                flips = (flips + parity) % 2; // previous state drives A2
                parity = (parity + b) % 2;
                assert_eq!(trace[l], parity * 2 + flips, "word={word:?} pos={l}");
            }
        }
    }

    #[test]
    fn counter_k2_residues() {
        let synth = synthesize_mod_counter(2, &[0, 1]).unwrap();
        assert_eq!(synth.run(&[1, 1, 0, 1]).unwrap(), vec![1, 0, 0, 1]);
        assert_eq!(synth.params.r_b[0], 0.0);
    }

    #[test]
    fn counter_k4_closes_after_four_ones() {
        let synth = synthesize_mod_counter(4, &[0, 1]).unwrap();
        assert_eq!(synth.run(&[1, 1, 1, 1]).unwrap(), vec![1, 2, 3, 0]);
    }

    #[test]
    fn counter_k97_long_word_matches_fsa() {
        let report = counter_soundness(97, 100_000, 1, 42).unwrap();
        assert!(report.horizon_warning.is_none());
        assert_eq!(report.mismatches, 0);
        assert!(
            report.max_angle_err <= report.drift_budget,
            "drift {} over budget {}",
            report.max_angle_err,
            report.drift_budget
        );
    }

    #[test]
    fn precision_horizon_reference_points() {
        let eps = 2f64.powi(-53);
        // k = 10^6: about 1.27e10 tokens, the "ten billion tokens" scale.
        let n = precision_horizon(1_000_000, eps);
        assert!((1.2e10..1.3e10).contains(&(n as f64)), "n = {n}");
        // k = 2: about (1/2)·10^16 by the ≈(1/k)·10^16 rule of thumb.
        let n2 = precision_horizon(2, eps);
        assert!((5.0e15..6.5e15).contains(&(n2 as f64)), "n2 = {n2}");
        // Doubling eps halves the horizon.
        let half = precision_horizon(1_000_000, 2.0 * eps);
        assert!((n as f64 / half as f64 - 2.0).abs() < 1e-9);
        // Monotone decreasing in k and eps.
        assert!(precision_horizon(2_000_000, eps) < n);
        assert!(precision_horizon(1_000_000, eps * 4.0) < half);
    }

    #[test]
    fn soundness_run_warns_past_the_horizon() {
        let report = counter_soundness(2, 100, 2, 9).unwrap();
        assert!(report.passed());
        assert!(report.horizon_warning.is_none());
        // A fake tiny eps horizon cannot be forced through the public API,
        // so exercise the warning predicate directly.
        let horizon = precision_horizon(1 << 40, 2f64.powi(-53));
        assert!(horizon < 100_000_000);
    }

    #[test]
    fn flat_mod_arithmetic_interpreter() {
        use ExprTok::*;
        // 0 * 2 - 6 - 7 - 0 evaluated left to right in Z_5:
        // 0*2=0, 0-6=-6=4, 4-7=-3=2, 2-0=2.
        let toks = [Num(0), Mul, Num(2), Sub, Num(6), Sub, Num(7), Sub, Num(0)];
        assert_eq!(eval_mod_flat(&toks, 5).unwrap(), 2);
        assert!(eval_mod_flat(&[Mul], 5).is_err());
    }

    #[test]
    fn braced_mod_arithmetic_interpreter() {
        use ExprTok::*;
        // ((3-3)-4) = -4 = 1 (mod 5)
        let toks = [Open, Open, Num(3), Sub, Num(3), Close, Sub, Num(4), Close];
        assert_eq!(eval_mod_braced(&toks, 5).unwrap(), 1);
        // (2+1) = 3
        let toks = [Open, Num(2), Add, Num(1), Close];
        assert_eq!(eval_mod_braced(&toks, 5).unwrap(), 3);
        // Chains fold left to right: 2 + (3*4) - 1 = 2 + 2 - 1 = 3 (mod 5).
        let toks = [Num(2), Add, Open, Num(3), Mul, Num(4), Close, Sub, Num(1)];
        assert_eq!(eval_mod_braced(&toks, 5).unwrap(), 3);
        let bad = [Open, Num(2), Add, Num(1)];
        assert!(eval_mod_braced(&bad, 5).is_err());
    }

    #[test]
    fn counting_family_labels() {
        assert_eq!(parity_label(&[1, 1, 0, 1]).unwrap(), 1);
        // +1, STAY, +1, -1 on a 5-cycle: powers 1, 0, 1, 4 -> 6 mod 5 = 1.
        assert_eq!(cycle_nav_label(&[1, 0, 1, 4], 5).unwrap(), 1);
        assert_eq!(majority_label(&[45, 56, 51, 43, 51, 34, 10, 46, 54, 44, 56]), Some(51));
        assert_eq!(majority_count_label(&[45, 56, 51, 43, 51, 34, 10, 46, 54, 44, 56]), Some(2));
        assert_eq!(bucket_sort_label(&[3, 5, 0, 7, 3]), vec![0, 3, 3, 5, 7]);
        assert_eq!(set_label(&[3, 5, 0, 7, 3]), vec![0, 3, 5, 7]);
    }
}
