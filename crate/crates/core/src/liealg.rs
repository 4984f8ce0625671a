//! Lie brackets, the bracket hierarchy, Hörmander rank tests, submersion
//! rank of switching schedules and a sampled accessibility witness.

use std::fmt;
use std::ops::ControlFlow;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::dsl::EvalError;
use crate::flow::{flow_with_jacobian, FlowError};
use crate::pdmp::{map_reduce_chunks, Landings, Observer, SimError, Walker};
use crate::rng::stream_rng;
use crate::scalar::Jet;
use crate::switching::RateMatrix;
use crate::vecfield::{Field, Jacobian, VectorFieldSpec};

pub const DEFAULT_RANK_TOL: f64 = 1e-8;
pub const DEFAULT_WORD_CAP: usize = 512;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LieError {
    #[error("bracket family at depth {depth} has more than {cap} words")]
    CapExceeded { depth: usize, cap: usize },
    #[error("no generator fields")]
    NoGenerators,
    #[error("generator {index} out of range for {count} fields")]
    UnknownGenerator { index: usize, count: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// A bracket expression over generator indices. `Bracket(g, u)` is `[v^g, u]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub enum BracketWord {
    Generator(usize),
    Bracket(usize, Box<BracketWord>),
}

impl BracketWord {
    pub fn depth(&self) -> usize {
        match self {
            BracketWord::Generator(_) => 0,
            BracketWord::Bracket(_, u) => 1 + u.depth(),
        }
    }

    fn max_generator(&self) -> usize {
        match self {
            BracketWord::Generator(g) => *g,
            BracketWord::Bracket(g, u) => (*g).max(u.max_generator()),
        }
    }
}

impl fmt::Display for BracketWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BracketWord::Generator(g) => write!(f, "v{g}"),
            BracketWord::Bracket(g, u) => write!(f, "[v{g},{u}]"),
        }
    }
}

/// Evaluates `word` at jet-valued `x` whose entries carry `order`
/// infinitesimals.
fn eval_word(gens: &[VectorFieldSpec], word: &BracketWord, x: &[Jet], order: usize) -> Result<Vec<Jet>, EvalError> {
    match word {
        BracketWord::Generator(g) => gens[*g].eval_generic(x),
        BracketWord::Bracket(g, u) => {
            let gen = &gens[*g];
            let gx = gen.eval_generic(x)?;
            let ux = eval_word(gens, u, x, order)?;
            // Du . g and Dg . u by one extra infinitesimal each.
            let du_g = directional_jet(|y| eval_word(gens, u, y, order + 1), x, &gx, order)?;
            let dg_u = directional_jet(|y| gen.eval_generic(y), x, &ux, order)?;
            Ok(du_g.into_iter().zip(dg_u).map(|(a, b)| a - b).collect())
        }
    }
}

fn directional_jet(
    f: impl Fn(&[Jet]) -> Result<Vec<Jet>, EvalError>,
    x: &[Jet],
    dir: &[Jet],
    order: usize,
) -> Result<Vec<Jet>, EvalError> {
    let shifted: Vec<Jet> = x
        .iter()
        .zip(dir)
        .map(|(xi, di)| xi.with_new_infinitesimal(di, order))
        .collect();
    Ok(f(&shifted)?
        .into_iter()
        .map(|c| c.lifted(order + 1).split_top().1)
        .collect())
}

/// A bracket word bound to its generator fields, usable as a [`Field`].
#[derive(Debug, Clone)]
pub struct BracketField<'a> {
    gens: &'a [VectorFieldSpec],
    word: BracketWord,
}

impl<'a> BracketField<'a> {
    pub fn new(gens: &'a [VectorFieldSpec], word: BracketWord) -> Result<Self, LieError> {
        check_generators(gens)?;
        let top = word.max_generator();
        if top >= gens.len() {
            return Err(LieError::UnknownGenerator {
                index: top,
                count: gens.len(),
            });
        }
        Ok(BracketField { gens, word })
    }

    pub fn word(&self) -> &BracketWord {
        &self.word
    }

    pub fn depth(&self) -> usize {
        self.word.depth()
    }
}

impl Field for BracketField<'_> {
    fn dim(&self) -> usize {
        self.gens[0].dim()
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        let xj: Vec<Jet> = x.iter().map(|&v| Jet::constant(v)).collect();
        let vals = eval_word(self.gens, &self.word, &xj, 0)?;
        for (o, v) in out.iter_mut().zip(vals) {
            *o = v.coeffs()[0];
        }
        if out.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(EvalError::NonFinite)
        }
    }

    fn jacobian(&self, x: &[f64]) -> Result<Jacobian, EvalError> {
        let d = self.dim();
        let mut jac = DMatrix::zeros(d, d);
        for k in 0..d {
            let xj: Vec<Jet> = x
                .iter()
                .enumerate()
                .map(|(i, &v)| Jet::constant(v).with_new_infinitesimal(&Jet::constant(f64::from(i == k)), 0))
                .collect();
            let vals = eval_word(self.gens, &self.word, &xj, 1)?;
            for (r, v) in vals.iter().enumerate() {
                jac[(r, k)] = v.lifted(1).coeffs()[1];
            }
        }
        Ok(jac)
    }
}

fn check_generators(gens: &[VectorFieldSpec]) -> Result<usize, LieError> {
    let d = gens.first().ok_or(LieError::NoGenerators)?.dim();
    if let Some(g) = gens.iter().find(|g| g.dim() != d) {
        return Err(LieError::Dimension(format!(
            "field `{}` has dimension {}, expected {d}",
            g.label(),
            g.dim()
        )));
    }
    Ok(d)
}

/// `[v, w](x) = Dw(x) v(x) - Dv(x) w(x)`.
pub fn lie_bracket(v: &dyn Field, w: &dyn Field, x: &[f64]) -> Result<Vec<f64>, LieError> {
    let vx = DVector::from_vec(v.eval(x)?);
    let wx = DVector::from_vec(w.eval(x)?);
    let out = w.jacobian(x)? * &vx - v.jacobian(x)? * &wx;
    Ok(out.iter().copied().collect())
}

/// Words of `V_depth`: the generators, then level by level `[v^g, u]` for
/// every generator `g` and every word `u` new at the previous level,
/// skipping the vanishing `[v^g, v^g]`. With `n` generators the number of
/// new words is `n` at level 0, `n(n-1)` at level 1 and multiplies by `n`
/// at each further level.
pub fn bracket_family(n_generators: usize, depth: usize, cap: usize) -> Result<Vec<BracketWord>, LieError> {
    if n_generators == 0 {
        return Err(LieError::NoGenerators);
    }
    let mut all: Vec<BracketWord> = (0..n_generators).map(BracketWord::Generator).collect();
    if all.len() > cap {
        return Err(LieError::CapExceeded { depth: 0, cap });
    }
    let mut frontier = all.clone();
    for level in 1..=depth {
        let mut next = Vec::new();
        for g in 0..n_generators {
            for u in &frontier {
                if *u == BracketWord::Generator(g) {
                    continue;
                }
                next.push(BracketWord::Bracket(g, Box::new(u.clone())));
            }
        }
        if all.len() + next.len() > cap {
            return Err(LieError::CapExceeded { depth: level, cap });
        }
        all.extend(next.iter().cloned());
        frontier = next;
    }
    Ok(all)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RankVerdict {
    Full,
    Deficient,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankReport {
    pub point: Vec<f64>,
    pub depth: usize,
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub verdict: RankVerdict,
}

/// Singular values (descending) of a matrix and its numerical rank relative
/// to the largest one.
fn numerical_rank(m: DMatrix<f64>, rank_tol: f64) -> (Vec<f64>, usize) {
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let top = sv.first().copied().unwrap_or(0.0);
    let rank = if top > 0.0 {
        sv.iter().filter(|s| **s > rank_tol * top).count()
    } else {
        0
    };
    (sv, rank)
}

/// Rank of the span of `V_depth` evaluated at `x`.
pub fn hormander_rank(
    gens: &[VectorFieldSpec],
    x: &[f64],
    depth: usize,
    rank_tol: f64,
) -> Result<RankReport, LieError> {
    let d = check_generators(gens)?;
    if x.len() != d {
        return Err(LieError::Dimension(format!(
            "point has {} coordinates, fields have {d}",
            x.len()
        )));
    }
    let words = bracket_family(gens.len(), depth, DEFAULT_WORD_CAP)?;
    let mut m = DMatrix::zeros(d, words.len());
    for (c, word) in words.into_iter().enumerate() {
        let val = BracketField { gens, word }.eval(x)?;
        m.column_mut(c).copy_from_slice(&val);
    }
    let (singular_values, rank) = numerical_rank(m, rank_tol);
    Ok(RankReport {
        point: x.to_vec(),
        depth,
        singular_values,
        rank,
        verdict: if rank == d {
            RankVerdict::Full
        } else {
            RankVerdict::Deficient
        },
    })
}

/// The `d x l` matrix `dPhi^xi(x, t) / dt`: column `k` is the field of
/// segment `k` at the end of that segment, pushed through the Jacobians of
/// all later segments.
pub fn schedule_jacobian<F: Field>(
    gens: &[F],
    xi: &[usize],
    x: &[f64],
    t: &[f64],
    step: f64,
) -> Result<DMatrix<f64>, LieError> {
    if xi.len() != t.len() {
        return Err(LieError::Dimension(format!(
            "{} states for {} durations",
            xi.len(),
            t.len()
        )));
    }
    if let Some(&bad) = xi.iter().find(|&&i| i >= gens.len()) {
        return Err(LieError::UnknownGenerator {
            index: bad,
            count: gens.len(),
        });
    }
    let d = x.len();
    let mut ends = Vec::with_capacity(xi.len());
    let mut jacs = Vec::with_capacity(xi.len());
    let mut cur = x.to_vec();
    for (&i, &tk) in xi.iter().zip(t) {
        let res = flow_with_jacobian(&gens[i], &cur, tk, step)?;
        cur = res.endpoint;
        ends.push(cur.clone());
        jacs.push(res.jacobian.expect("requested jacobian"));
    }
    let mut m = DMatrix::zeros(d, xi.len());
    let mut push = DMatrix::<f64>::identity(d, d);
    for k in (0..xi.len()).rev() {
        let v = DVector::from_vec(gens[xi[k]].eval(&ends[k])?);
        m.set_column(k, &(&push * v));
        push *= &jacs[k];
    }
    Ok(m)
}

/// Rank of `t -> Phi^xi(x, t)` at `t`; full rank `d` means the schedule map
/// is a submersion there.
pub fn submersion_rank<F: Field>(
    gens: &[F],
    xi: &[usize],
    x: &[f64],
    t: &[f64],
    step: f64,
    rank_tol: f64,
) -> Result<RankReport, LieError> {
    let d = x.len();
    let m = schedule_jacobian(gens, xi, x, t, step)?;
    let (singular_values, rank) = numerical_rank(m, rank_tol);
    Ok(RankReport {
        point: x.to_vec(),
        depth: xi.len(),
        singular_values,
        rank,
        verdict: if rank == d {
            RankVerdict::Full
        } else {
            RankVerdict::Deficient
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubmersionSearch {
    pub times: Vec<f64>,
    /// Smallest over largest of the leading `min(d, l)` singular values.
    pub conditioning: f64,
    pub report: RankReport,
}

/// Scans candidate duration vectors and keeps the best-conditioned one.
pub fn submersion_search<F: Field>(
    gens: &[F],
    xi: &[usize],
    x: &[f64],
    candidates: &[Vec<f64>],
    step: f64,
    rank_tol: f64,
) -> Result<Option<SubmersionSearch>, LieError> {
    let k = x.len().min(xi.len());
    let mut best: Option<SubmersionSearch> = None;
    for t in candidates {
        let report = submersion_rank(gens, xi, x, t, step, rank_tol)?;
        let sv = &report.singular_values;
        let conditioning = if k == 0 || sv[0] == 0.0 { 0.0 } else { sv[k - 1] / sv[0] };
        if best.as_ref().is_none_or(|b| conditioning > b.conditioning) {
            best = Some(SubmersionSearch {
                times: t.clone(),
                conditioning,
                report,
            });
        }
    }
    Ok(best)
}

/// Inputs of [`accessibility_sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct AccessibilityQuery {
    pub x: Vec<f64>,
    pub i0: usize,
    pub target: Vec<f64>,
    pub radius: f64,
    pub trials: usize,
    pub horizon: f64,
    pub step: f64,
    pub seed: u64,
}

struct HitObserver<'a> {
    target: &'a [f64],
    radius_sq: f64,
}

impl Observer for HitObserver<'_> {
    #[inline]
    fn on_step(&mut self, _: f64, _: f64, _: usize, _: &[f64], to: &[f64]) -> ControlFlow<()> {
        let d2: f64 = to.iter().zip(self.target).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 < self.radius_sq {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    }
}

/// Fraction of switched trajectories from `x` that enter the open ball
/// `B(target, radius)` before `horizon`. A positive fraction witnesses
/// accessibility; zero proves nothing.
pub fn accessibility_sample(
    gens: &[VectorFieldSpec],
    q: &RateMatrix,
    query: &AccessibilityQuery,
    workers: usize,
) -> Result<f64, LieError> {
    let d = check_generators(gens)?;
    if gens.len() != q.n() {
        return Err(LieError::Dimension(format!(
            "{} fields for {} states",
            gens.len(),
            q.n()
        )));
    }
    if query.x.len() != d || query.target.len() != d {
        return Err(LieError::Dimension("start or target has the wrong dimension".into()));
    }
    q.check_state(query.i0).map_err(SimError::from)?;
    if !(query.radius > 0.0) || !(query.step > 0.0) || !(query.horizon >= 0.0) {
        return Err(LieError::Dimension("radius, step and horizon must be positive".into()));
    }
    if query.trials == 0 {
        return Ok(0.0);
    }
    let radius_sq = query.radius * query.radius;
    let start_d2: f64 = query.x.iter().zip(&query.target).map(|(a, b)| (a - b) * (a - b)).sum();
    if start_d2 < radius_sq {
        return Ok(1.0);
    }
    let landings = Landings {
        record_from: 0.0,
        output_dt: None,
    };
    let hits = map_reduce_chunks(
        query.trials,
        workers,
        |range| -> Result<usize, SimError> {
            let mut walker = Walker::new(gens, q, None, query.step);
            let mut hits = 0;
            for index in range {
                let mut rng = stream_rng(query.seed, index as u64);
                let mut obs = HitObserver {
                    target: &query.target,
                    radius_sq,
                };
                let end = walker.walk(&query.x, query.i0, query.horizon, landings, &mut rng, &mut obs)?;
                hits += usize::from(end.stopped);
            }
            Ok(hits)
        },
        Ok(0usize),
        |acc: Result<usize, SimError>, r| Ok(acc? + r?),
    )?;
    Ok(hits as f64 / query.trials as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::example;
    use crate::flow::{composite_flow, flow};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn poly_field(c: &[f64; 6]) -> VectorFieldSpec {
        VectorFieldSpec::expression(
            "p",
            &[
                format!("{} + {}*x2 + {}*x1*x2", c[0], c[1], c[2]),
                format!("{} + {}*sin(x1) + {}*x2^2", c[3], c[4], c[5]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn example_bracket_is_constant() {
        let gens = example::fields();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let b = lie_bracket(&gens[0], &gens[1], &x).unwrap();
            assert!((b[0] - 1.0).abs() < 1e-12 && (b[1] - 1.0).abs() < 1e-12);
            let bf = BracketField::new(&gens, BracketWord::Bracket(0, Box::new(BracketWord::Generator(1))))
                .unwrap()
                .eval(&x)
                .unwrap();
            assert!((bf[0] - 1.0).abs() < 1e-12 && (bf[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn self_bracket_and_constants_vanish() {
        let v = example::field_v();
        assert_eq!(lie_bracket(&v, &v, &[0.3, 0.4]).unwrap(), vec![0.0, 0.0]);
        let a = VectorFieldSpec::expression("a", &["1", "2"]).unwrap();
        let b = VectorFieldSpec::expression("b", &["-3", "0.5"]).unwrap();
        assert_eq!(lie_bracket(&a, &b, &[0.3, 0.4]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn bracket_field_matches_nested_finite_differences() {
        // [v0, [v1, v0]] against central differences of the dual-number
        // bracket [v1, v0].
        let gens = vec![
            poly_field(&[0.3, -0.7, 0.4, 0.1, 0.9, -0.2]),
            poly_field(&[-0.5, 0.2, 0.6, 0.8, -0.3, 0.5]),
        ];
        let inner = BracketField::new(&gens, BracketWord::Bracket(1, Box::new(BracketWord::Generator(0)))).unwrap();
        let outer = BracketField::new(&gens, BracketWord::Bracket(0, Box::new(inner.word().clone()))).unwrap();
        let x = [0.35, -0.6];
        let h = 1e-5;
        let mut fd_jac = DMatrix::zeros(2, 2);
        for k in 0..2 {
            let mut p = x;
            let mut m = x;
            p[k] += h;
            m[k] -= h;
            let (fp, fm) = (inner.eval(&p).unwrap(), inner.eval(&m).unwrap());
            for r in 0..2 {
                fd_jac[(r, k)] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        let jet_jac = inner.jacobian(&x).unwrap();
        assert!((&fd_jac - &jet_jac).abs().max() < 1e-7);
        let v0 = DVector::from_vec(gens[0].eval(&x).unwrap());
        let u = DVector::from_vec(inner.eval(&x).unwrap());
        let expected = &fd_jac * v0 - gens[0].jacobian(&x).unwrap() * u;
        let got = outer.eval(&x).unwrap();
        for r in 0..2 {
            assert!((got[r] - expected[r]).abs() < 1e-7, "{got:?} vs {expected:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn bracket_antisymmetric_and_bilinear(
            c1 in prop::array::uniform6(-1.0f64..1.0),
            c2 in prop::array::uniform6(-1.0f64..1.0),
            c3 in prop::array::uniform6(-1.0f64..1.0),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
            x in prop::array::uniform2(-1.0f64..1.0),
        ) {
            let (u, v, w) = (poly_field(&c1), poly_field(&c2), poly_field(&c3));
            let uv = lie_bracket(&u, &v, &x).unwrap();
            let vu = lie_bracket(&v, &u, &x).unwrap();
            for k in 0..2 {
                prop_assert!((uv[k] + vu[k]).abs() < 1e-10);
            }
            let combo = VectorFieldSpec::expression("c", &[
                format!("{a}*({}) + {b}*({})", poly_src(&c2, 0), poly_src(&c3, 0)),
                format!("{a}*({}) + {b}*({})", poly_src(&c2, 1), poly_src(&c3, 1)),
            ]).unwrap();
            let lhs = lie_bracket(&u, &combo, &x).unwrap();
            let uw = lie_bracket(&u, &w, &x).unwrap();
            for k in 0..2 {
                let rhs = a * uv[k] + b * uw[k];
                prop_assert!((lhs[k] - rhs).abs() < 1e-10 * (1.0 + rhs.abs()));
            }
        }
    }

    fn poly_src(c: &[f64; 6], comp: usize) -> String {
        if comp == 0 {
            format!("{} + {}*x2 + {}*x1*x2", c[0], c[1], c[2])
        } else {
            format!("{} + {}*sin(x1) + {}*x2^2", c[3], c[4], c[5])
        }
    }

    /// Counts bracket words by brute force: every generator string
    /// `g_1 ... g_k h` whose innermost pair differs, with `k` up to `depth`.
    fn brute_force_count(n: usize, depth: usize) -> usize {
        let mut total = 0;
        for k in 0..=depth {
            let strings = n.pow(k as u32 + 1);
            for s in 0..strings {
                let digits: Vec<usize> = (0..=k).map(|p| (s / n.pow(p as u32)) % n).collect();
                if k == 0 || digits[0] != digits[1] {
                    total += 1;
                }
            }
        }
        total
    }

    #[test]
    fn family_sizes() {
        let f0 = bracket_family(2, 0, 512).unwrap();
        assert_eq!(f0, vec![BracketWord::Generator(0), BracketWord::Generator(1)]);
        let f1 = bracket_family(2, 1, 512).unwrap();
        assert_eq!(f1.len(), 4);
        assert!(f1.contains(&BracketWord::Bracket(0, Box::new(BracketWord::Generator(1)))));
        assert!(f1.contains(&BracketWord::Bracket(1, Box::new(BracketWord::Generator(0)))));
        for n in 1..=4 {
            for depth in 0..=4 {
                match bracket_family(n, depth, 512) {
                    Ok(f) => {
                        assert_eq!(f.len(), brute_force_count(n, depth), "n={n} depth={depth}");
                        let uniq: std::collections::HashSet<_> = f.iter().collect();
                        assert_eq!(uniq.len(), f.len());
                    }
                    Err(LieError::CapExceeded { .. }) => assert!(brute_force_count(n, depth) > 512),
                    Err(e) => panic!("{e}"),
                }
            }
        }
        assert!(matches!(bracket_family(4, 6, 512), Err(LieError::CapExceeded { .. })));
    }

    #[test]
    fn example_ranks() {
        let gens = example::fields();
        let at_e0 = hormander_rank(&gens, &example::E0, 1, DEFAULT_RANK_TOL).unwrap();
        assert_eq!((at_e0.rank, at_e0.verdict), (1, RankVerdict::Deficient));
        let at_0 = hormander_rank(&gens, &[0.0, 0.0], 1, DEFAULT_RANK_TOL).unwrap();
        assert_eq!((at_0.rank, at_0.verdict), (2, RankVerdict::Full));
        // [v, [v, w]] = -A (1, 1) = (0, 2) restores full rank at depth 2.
        let deep = hormander_rank(&gens, &example::E0, 2, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(deep.rank, 2);
        let single = hormander_rank(&gens[..1], &[0.5, 0.2], 3, DEFAULT_RANK_TOL).unwrap();
        assert!(single.rank <= 1);
    }

    #[test]
    fn commutator_second_order_coefficient() {
        let gens = vec![
            poly_field(&[0.3, -0.7, 0.4, 0.1, 0.9, -0.2]),
            poly_field(&[-0.5, 0.2, 0.6, 0.8, -0.3, 0.5]),
        ];
        let x = [0.2, -0.1];
        let defect = |s: f64| {
            let y = composite_flow(&gens, &[0, 1], &[s, s], &x, s / 50.0, false)
                .unwrap()
                .endpoint;
            let y = flow(&gens[0], &y, -s, s / 50.0).unwrap().endpoint;
            let y = flow(&gens[1], &y, -s, s / 50.0).unwrap().endpoint;
            [(y[0] - x[0]) / (s * s), (y[1] - x[1]) / (s * s)]
        };
        let s = 0.02;
        let (d1, d2, d4) = (defect(s), defect(s / 2.0), defect(s / 4.0));
        let c: Vec<f64> = (0..2).map(|k| (8.0 * d4[k] - 6.0 * d2[k] + d1[k]) / 3.0).collect();
        let b = lie_bracket(&gens[0], &gens[1], &x).unwrap();
        let rel = ((c[0] - b[0]).powi(2) + (c[1] - b[1]).powi(2)).sqrt() / (b[0].hypot(b[1]));
        assert!(rel < 1e-3, "{c:?} vs {b:?}");
    }

    #[test]
    fn submersion_jacobian_matches_finite_differences() {
        let gens = example::fields();
        let xi = [0, 1, 0];
        let x = [0.3, -0.2];
        let t = [0.2, 0.7, 0.3];
        let step = 1e-3;
        let m = schedule_jacobian(&gens, &xi, &x, &t, step).unwrap();
        let h = 1e-4;
        for k in 0..3 {
            let mut tp = t;
            let mut tm = t;
            tp[k] += h;
            tm[k] -= h;
            let fp = composite_flow(&gens, &xi, &tp, &x, step, false).unwrap().endpoint;
            let fm = composite_flow(&gens, &xi, &tm, &x, step, false).unwrap().endpoint;
            for r in 0..2 {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                assert!(
                    (fd - m[(r, k)]).abs() <= 1e-5 * fd.abs().max(1.0),
                    "col {k}: {fd} vs {}",
                    m[(r, k)]
                );
            }
        }
        let rep = submersion_rank(&gens, &xi, &x, &t, step, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(rep.rank, 2);
        let single = submersion_rank(&gens, &[0], &x, &[0.5], step, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(single.rank, 1);
    }

    #[test]
    fn collinear_schedule_is_degenerate() {
        // Both fields point along e1, so every column is parallel to e1.
        let gens = vec![
            VectorFieldSpec::expression("a", &["1 + x2^2", "0"]).unwrap(),
            VectorFieldSpec::expression("b", &["-2", "0"]).unwrap(),
        ];
        let rep = submersion_rank(&gens, &[0, 1, 0], &[0.1, 0.4], &[0.3, 0.2, 0.1], 1e-3, DEFAULT_RANK_TOL).unwrap();
        assert_eq!((rep.rank, rep.verdict), (1, RankVerdict::Deficient));
    }

    #[test]
    fn search_prefers_well_conditioned_times() {
        let gens = example::fields();
        let cands = vec![vec![0.1, 0.0, 0.1], vec![0.1, 0.8, 0.1], vec![0.05, 0.4, 0.05]];
        let best = submersion_search(&gens, &[0, 1, 0], &[0.3, -0.2], &cands, 1e-3, DEFAULT_RANK_TOL)
            .unwrap()
            .unwrap();
        assert_eq!(best.report.rank, 2);
        assert!(best.conditioning > 0.0);
    }

    fn query(target: [f64; 2], radius: f64, horizon: f64, trials: usize) -> AccessibilityQuery {
        AccessibilityQuery {
            x: vec![0.5, 0.5],
            i0: 0,
            target: target.to_vec(),
            radius,
            trials,
            horizon,
            step: 0.01,
            seed: 11,
        }
    }

    #[test]
    fn accessibility_witnesses() {
        let gens = example::fields();
        let q = example::rates(1.5, 2.0, 1.0).unwrap();
        assert_eq!(
            accessibility_sample(&gens, &q, &query([0.5, 0.5], 0.1, 10.0, 10), 1).unwrap(),
            1.0
        );
        assert_eq!(
            accessibility_sample(&gens, &q, &query([0.0, 0.0], 0.2, 0.0, 10), 1).unwrap(),
            0.0
        );
        let frac = accessibility_sample(&gens, &q, &query([0.0, 0.0], 0.2, 50.0, 1000), 1).unwrap();
        assert!(frac > 0.0);
        let again = accessibility_sample(&gens, &q, &query([0.0, 0.0], 0.2, 50.0, 1000), 4).unwrap();
        assert_eq!(frac, again);
    }
}
