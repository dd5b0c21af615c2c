//! Focus-guided training objectives and test-time ensembling.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::config::{join_list, ConfigMap};
use crate::error::{Result, StfError};
use crate::focus::{project_focus, project_var, FocusMap};
use crate::network::{argmax, Bound, Model};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub exploration: f64,
    pub divergence: f64,
    pub coherence: f64,
    pub gk: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            exploration: 0.01,
            divergence: 0.1,
            coherence: 0.1,
            gk: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_e", self.exploration),
            ("lambda_d", self.divergence),
            ("lambda_c", self.coherence),
            ("lambda_gk", self.gk),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(StfError::Config(format!("loss.{name} must be a finite value ≥ 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn weight(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Ce => 1.0,
            LossTerm::Exploration => self.exploration,
            LossTerm::Divergence => self.divergence,
            LossTerm::Coherence => self.coherence,
            LossTerm::Gk => self.gk,
        }
    }

    pub fn from_config(c: &ConfigMap) -> Result<Self> {
        let d = Self::default();
        let w = LossWeights {
            exploration: c.parsed_or("loss.lambda_e", d.exploration)?,
            divergence: c.parsed_or("loss.lambda_d", d.divergence)?,
            coherence: c.parsed_or("loss.lambda_c", d.coherence)?,
            gk: c.parsed_or("loss.lambda_gk", d.gk)?,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn to_config(&self) -> ConfigMap {
        let mut c = ConfigMap::new();
        c.set("loss.lambda_e", self.exploration);
        c.set("loss.lambda_d", self.divergence);
        c.set("loss.lambda_c", self.coherence);
        c.set("loss.lambda_gk", self.gk);
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LossTerm {
    Ce,
    Exploration,
    Divergence,
    Coherence,
    Gk,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [
        LossTerm::Ce,
        LossTerm::Exploration,
        LossTerm::Divergence,
        LossTerm::Coherence,
        LossTerm::Gk,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossTerm::Ce => "ce",
            LossTerm::Exploration => "e",
            LossTerm::Divergence => "d",
            LossTerm::Coherence => "c",
            LossTerm::Gk => "gk",
        }
    }
}

impl FromStr for LossTerm {
    type Err = StfError;

    fn from_str(s: &str) -> Result<Self> {
        LossTerm::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| StfError::Config(format!("unknown loss term `{s}` (expected ce, e, d, c, gk)")))
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The two fine-tuning branches: exploration alone, or divergence, coherence
/// and adjacency supervision together. Their predictions are fused at test time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Branch {
    E,
    Dcg,
}

impl Branch {
    /// Every term the branch may enable.
    pub fn allowed(self) -> &'static [LossTerm] {
        match self {
            Branch::E => &[LossTerm::Ce, LossTerm::Exploration],
            Branch::Dcg => &[LossTerm::Ce, LossTerm::Divergence, LossTerm::Coherence, LossTerm::Gk],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Branch::E => "E",
            Branch::Dcg => "DCG",
        }
    }
}

impl FromStr for Branch {
    type Err = StfError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "E" => Ok(Branch::E),
            "DCG" => Ok(Branch::Dcg),
            _ => Err(StfError::Config(format!("unknown branch `{s}` (expected E or DCG)"))),
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A branch with its enabled terms. Cross-entropy is always on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchSpec {
    pub branch: Branch,
    terms: Vec<LossTerm>,
}

impl BranchSpec {
    /// All terms of the branch enabled.
    pub fn full(branch: Branch) -> Self {
        BranchSpec {
            branch,
            terms: branch.allowed().to_vec(),
        }
    }

    /// A branch restricted to `terms` (plus cross-entropy); each must belong
    /// to the branch.
    pub fn with_terms(branch: Branch, terms: &[LossTerm]) -> Result<Self> {
        let mut set = vec![LossTerm::Ce];
        for &t in terms {
            if !branch.allowed().contains(&t) {
                return Err(StfError::Config(format!("loss term `{t}` does not belong to branch {branch}")));
            }
            set.push(t);
        }
        set.sort();
        set.dedup();
        Ok(BranchSpec { branch, terms: set })
    }

    pub fn terms(&self) -> &[LossTerm] {
        &self.terms
    }

    pub fn enables(&self, term: LossTerm) -> bool {
        self.terms.contains(&term)
    }
}

/// Per-term loss values; `None` for terms not computed.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents<T> {
    pub ce: T,
    pub exploration: Option<T>,
    pub divergence: Option<T>,
    pub coherence: Option<T>,
    pub gk: Option<T>,
}

impl<T: Copy> LossComponents<T> {
    pub fn get(&self, term: LossTerm) -> Option<T> {
        match term {
            LossTerm::Ce => Some(self.ce),
            LossTerm::Exploration => self.exploration,
            LossTerm::Divergence => self.divergence,
            LossTerm::Coherence => self.coherence,
            LossTerm::Gk => self.gk,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> LossComponents<U> {
        LossComponents {
            ce: f(self.ce),
            exploration: self.exploration.map(&mut f),
            divergence: self.divergence.map(&mut f),
            coherence: self.coherence.map(&mut f),
            gk: self.gk.map(&mut f),
        }
    }

    /// Checks that exactly the enabled terms are present.
    fn check(&self, spec: &BranchSpec) -> Result<()> {
        for term in LossTerm::ALL {
            match (spec.enables(term), self.get(term).is_some()) {
                (true, false) => {
                    return Err(StfError::InvalidArgument(format!(
                        "branch {} needs loss term `{term}`",
                        spec.branch
                    )))
                }
                (false, true) => {
                    return Err(StfError::InvalidArgument(format!(
                        "loss term `{term}` is disabled in branch {}",
                        spec.branch
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

impl LossComponents<f64> {
    /// Range checks that hold for every well-formed step.
    pub fn check_invariants(&self) -> Result<()> {
        let bad = |m: String| Err(StfError::LossInvariant(m));
        if let Some(e) = self.exploration {
            if !(0.0..=1.0).contains(&e) {
                return bad(format!("L_e = {e} outside [0, 1]"));
            }
        }
        if let Some(d) = self.divergence {
            if d.is_nan() || d > 0.0 {
                return bad(format!("L_d = {d} is positive"));
            }
        }
        for (name, v) in [("L_c", self.coherence), ("L_Gk", self.gk)] {
            if let Some(v) = v {
                if v.is_nan() || v < 0.0 {
                    return bad(format!("{name} = {v} is negative"));
                }
            }
        }
        Ok(())
    }
}

/// Weighted sum of the branch's enabled terms.
pub fn total_loss(spec: &BranchSpec, c: &LossComponents<f64>, w: &LossWeights) -> Result<f64> {
    c.check(spec)?;
    Ok(spec
        .terms()
        .iter()
        .fold(0.0, |acc, &t| acc + w.weight(t) * c.get(t).expect("checked")))
}

/// [`total_loss`] recorded on a tape.
pub fn total_loss_var<F: Scalar>(
    tape: &mut Tape<F>,
    spec: &BranchSpec,
    c: &LossComponents<Var>,
    w: &LossWeights,
) -> Result<Var> {
    c.check(spec)?;
    let mut acc = c.ce;
    for &t in spec.terms().iter().filter(|&&t| t != LossTerm::Ce) {
        let v = tape.scale(c.get(t).expect("checked"), F::of(w.weight(t)));
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Σ over `modules` of ‖project(q, T_l) − β_l‖_F. `betas` holds one T_l×N map
/// per module (index 0 = module 1); the target is a constant.
pub fn loss_gk<F: Scalar>(tape: &mut Tape<F>, betas: &[Var], q: &FocusMap, modules: &[usize]) -> Result<Var> {
    if modules.is_empty() {
        return Err(StfError::InvalidArgument("L_Gk needs at least one module".into()));
    }
    let mut acc: Option<Var> = None;
    for &l in modules {
        let beta = *betas
            .get(l.wrapping_sub(1))
            .ok_or_else(|| StfError::InvalidArgument(format!("no β output for module {l}")))?;
        let t_l = tape.shape(beta)[0];
        let target = project_focus(q, t_l)?;
        if target.values.shape() != tape.shape(beta) {
            return Err(StfError::shape("L_Gk", target.values.shape(), tape.shape(beta)));
        }
        let target = tape.constant(target.values.cast());
        let diff = tape.sub(beta, target)?;
        let n = tape.norm(diff);
        acc = Some(match acc {
            None => n,
            Some(prev) => tape.add(prev, n)?,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// X − Q⊙X with the T×N map broadcast over every channel, visibility included.
pub fn mask_input<F: Scalar>(input: &Tensor<F>, q: &FocusMap) -> Result<Tensor<F>> {
    let s = input.shape();
    if s.len() != 3 || q.values.shape() != [s[1], s[2]] {
        return Err(StfError::shape("exploration mask", q.values.shape(), s));
    }
    let plane = s[1] * s[2];
    let keep: Vec<F> = q.values.data().iter().map(|&v| F::of(1.0 - v)).collect();
    let data = input
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| x * keep[i % plane])
        .collect();
    Tensor::new(s.to_vec(), data)
}

/// Probability of `class` after a fresh forward pass on the masked input.
/// `q_input` is a constant at input resolution.
pub fn loss_exploration<F: Scalar>(
    tape: &mut Tape<F>,
    model: &Model<F>,
    bound: &Bound,
    input: &Tensor<F>,
    q_input: &FocusMap,
    class: usize,
) -> Result<Var> {
    let masked = mask_input(input, q_input)?;
    let trace = model.forward_tensor(tape, bound, &masked)?;
    let classes = tape.value(trace.probs()).len();
    if class >= classes {
        return Err(StfError::TargetOutOfRange { index: class, classes });
    }
    tape.pick(trace.probs(), class)
}

/// −‖Q_i − Q_j‖_F.
pub fn loss_divergence<F: Scalar>(tape: &mut Tape<F>, qi: Var, qj: Var) -> Result<Var> {
    if tape.shape(qi) != tape.shape(qj) {
        return Err(StfError::shape("L_d", tape.shape(qi), tape.shape(qj)));
    }
    let diff = tape.sub(qi, qj)?;
    let n = tape.norm(diff);
    Ok(tape.scale(n, F::of(-1.0)))
}

/// ‖Q_a − Q_b‖_F after projecting the coarser map onto the finer resolution.
pub fn loss_coherence<F: Scalar>(tape: &mut Tape<F>, qa: Var, qb: Var) -> Result<Var> {
    let (ta, tb) = (tape.shape(qa)[0], tape.shape(qb)[0]);
    let (qa, qb) = if ta < tb {
        (project_var(tape, qa, tb)?, qb)
    } else {
        (qa, project_var(tape, qb, ta)?)
    };
    let diff = tape.sub(qa, qb)?;
    Ok(tape.norm(diff))
}

/// [`loss_divergence`] on plain maps.
pub fn divergence(qi: &FocusMap, qj: &FocusMap) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let (a, b) = (tape.constant(qi.values.clone()), tape.constant(qj.values.clone()));
    let v = loss_divergence(&mut tape, a, b)?;
    Ok(tape.value(v).item())
}

/// [`loss_coherence`] on plain maps.
pub fn coherence(qa: &FocusMap, qb: &FocusMap) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let (a, b) = (tape.constant(qa.values.clone()), tape.constant(qb.values.clone()));
    let v = loss_coherence(&mut tape, a, b)?;
    Ok(tape.value(v).item())
}

/// Arithmetic mean of per-model probability vectors for one sample, and its
/// argmax (lowest index on ties).
pub fn ensemble_fuse(probs: &[Vec<f64>]) -> Result<(Vec<f64>, usize)> {
    let first = probs
        .first()
        .ok_or_else(|| StfError::InvalidArgument("nothing to fuse".into()))?;
    let classes = first.len();
    for p in probs {
        if p.len() != classes {
            return Err(StfError::InvalidArgument(format!(
                "cannot fuse {} and {} classes",
                classes,
                p.len()
            )));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(StfError::InvalidArgument(format!("probabilities sum to {s}, not 1")));
        }
    }
    let k = probs.len() as f64;
    let fused: Vec<f64> = (0..classes)
        .map(|c| probs.iter().fold(0.0, |acc, p| acc + p[c]) / k)
        .collect();
    let class = argmax(&fused);
    Ok((fused, class))
}

/// Config text for a branch's enabled terms, e.g. `c,d,gk`.
pub fn terms_to_text(terms: &[LossTerm]) -> String {
    let t: Vec<&LossTerm> = terms.iter().filter(|&&t| t != LossTerm::Ce).collect();
    join_list(&t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(rows: usize, cols: usize, data: &[f64]) -> FocusMap {
        FocusMap::new(Tensor::from_f64(vec![rows, cols], data).unwrap(), 6, 0).unwrap()
    }

    #[test]
    fn paper_weights_are_default() {
        let w = LossWeights::default();
        assert_eq!((w.exploration, w.divergence, w.coherence, w.gk), (0.01, 0.1, 0.1, 0.01));
    }

    #[test]
    fn branch_e_arithmetic() {
        let c = LossComponents {
            ce: 1.0,
            exploration: Some(0.5),
            ..Default::default()
        };
        let l = total_loss(&BranchSpec::full(Branch::E), &c, &LossWeights::default()).unwrap();
        assert!((l - 1.005).abs() < 1e-15);
    }

    #[test]
    fn disabled_terms_rejected() {
        let c = LossComponents {
            ce: 1.0,
            exploration: Some(0.5),
            divergence: Some(-0.1),
            ..Default::default()
        };
        assert!(total_loss(&BranchSpec::full(Branch::E), &c, &LossWeights::default()).is_err());
        let missing = LossComponents {
            ce: 1.0,
            ..Default::default()
        };
        assert!(total_loss(&BranchSpec::full(Branch::Dcg), &missing, &LossWeights::default()).is_err());
        assert!(BranchSpec::with_terms(Branch::E, &[LossTerm::Gk]).is_err());
    }

    #[test]
    fn zero_weights_leave_cross_entropy() {
        let zero = LossWeights {
            exploration: 0.0,
            divergence: 0.0,
            coherence: 0.0,
            gk: 0.0,
        };
        let c = LossComponents {
            ce: 0.731,
            divergence: Some(-0.4),
            coherence: Some(0.2),
            gk: Some(3.0),
            ..Default::default()
        };
        assert_eq!(total_loss(&BranchSpec::full(Branch::Dcg), &c, &zero).unwrap(), 0.731);
    }

    #[test]
    fn closed_forms() {
        let ones = fm(2, 2, &[1.0; 4]);
        let zeros = fm(2, 2, &[0.0; 4]);
        assert_eq!(coherence(&zeros, &ones).unwrap(), 2.0);
        assert_eq!(divergence(&ones, &ones).unwrap(), 0.0);
        // two disjoint maps with m = 3 ones each
        let a = fm(2, 3, &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        let b = fm(2, 3, &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!((divergence(&a, &b).unwrap() + 6f64.sqrt()).abs() < 1e-15);
        assert_eq!(divergence(&a, &b).unwrap(), divergence(&b, &a).unwrap());
    }

    #[test]
    fn gk_closed_form() {
        let mut tape = Tape::<f64>::new();
        let beta = tape.leaf(Tensor::zeros(&[2, 2]));
        let l = loss_gk(&mut tape, &[beta], &fm(2, 2, &[1.0; 4]), &[1]).unwrap();
        assert_eq!(tape.value(l).item(), 2.0);
    }

    #[test]
    fn fuse_examples() {
        let (p, c) = ensemble_fuse(&[vec![0.6, 0.4], vec![0.2, 0.8]]).unwrap();
        assert!((p[0] - 0.4).abs() < 1e-15 && (p[1] - 0.6).abs() < 1e-15);
        assert_eq!(c, 1);
        let v = vec![0.3, 0.3, 0.4];
        assert_eq!(ensemble_fuse(&[v.clone(), v.clone()]).unwrap().0, v);
        assert!(ensemble_fuse(&[vec![0.5, 0.5], vec![0.2, 0.3, 0.5]]).is_err());
        assert_eq!(ensemble_fuse(&[vec![0.5, 0.5]]).unwrap().1, 0);
    }
}
