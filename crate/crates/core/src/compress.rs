//! Activation-whitened low-rank compression of expanded blocks and exit
//! projections, with calibration-driven rank allocation.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::perplexities;
use crate::linalg::{cholesky, lower_triangular_inverse, svd, Mat};
use crate::model::{FamilialModel, ForwardPass, Linear};
use crate::tensor::Tensor;
use crate::train::name_matches;

pub const MIN_RATIO: f64 = 0.05;
pub const MAX_RATIO: f64 = 0.95;
/// Ridge added to the Gram before whitening, relative to its mean diagonal.
pub const RIDGE: f64 = 1e-6;
/// Singular values of the Gram below this fraction of the largest are
/// clamped before inversion on the fallback path.
pub const PINV_FLOOR: f64 = 1e-8;
const LOG_FLOOR: f64 = 1.0 + 1e-6;

/// Accumulated `Σ x xᵀ` over every token position that reached a matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Gram {
    pub gram: Mat,
    pub count: usize,
}

impl Gram {
    pub fn new(dim: usize) -> Self {
        Self {
            gram: Mat::zeros(dim, dim),
            count: 0,
        }
    }

    pub fn accumulate(&mut self, rows: &Tensor) {
        let d = self.gram.cols();
        let g = self.gram.data_mut();
        for r in 0..rows.rows() {
            let x: Vec<f64> = rows.row(r).iter().map(|&v| v as f64).collect();
            for i in 0..d {
                let xi = x[i];
                let gi = &mut g[i * d..(i + 1) * d];
                for j in i..d {
                    gi[j] += xi * x[j];
                }
            }
        }
        self.count += rows.rows();
    }

    /// The full symmetric Gram (only the upper triangle is accumulated).
    pub fn matrix(&self) -> Mat {
        let mut m = self.gram.clone();
        let d = m.cols();
        for i in 0..d {
            for j in 0..i {
                m[(i, j)] = m[(j, i)];
            }
        }
        m
    }
}

#[derive(Clone, Debug, Default)]
pub struct CalibrationSet {
    pub grams: BTreeMap<String, Gram>,
    pub sequences: usize,
}

/// Matrices compressed by default: every expanded block plus the output
/// projection of each exit that has expanded blocks.
pub fn default_scope(model: &FamilialModel) -> Vec<String> {
    let mut out = Vec::new();
    for (k, head) in model.exits.iter().enumerate() {
        if head.expanded.is_empty() {
            continue;
        }
        out.push(format!("exits.{k}.expanded.*"));
        out.push(format!("exits.{k}.lm_proj"));
    }
    out
}

/// Projection names selected by the glob patterns. Shared parameters are
/// never eligible.
pub fn resolve_scope(model: &FamilialModel, patterns: &[String]) -> Result<Vec<String>> {
    let names: Vec<String> = model
        .linear_names()
        .into_iter()
        .filter(|n| patterns.iter().any(|p| name_matches(p, n)))
        .collect();
    if let Some(bad) = names.iter().find(|n| !n.starts_with("exits.")) {
        return Err(Error::Config(format!("compression scope may not include shared parameter {bad}")));
    }
    Ok(names)
}

pub fn capture_activations(model: &FamilialModel, calib: &[Vec<u32>], scope: &[String]) -> Result<CalibrationSet> {
    if calib.is_empty() || calib.iter().all(Vec::is_empty) {
        return Err(Error::Config("calibration set is empty".into()));
    }
    let mut grams: BTreeMap<String, Gram> = BTreeMap::new();
    for name in scope {
        let lin = model
            .linear(name)
            .ok_or_else(|| Error::Config(format!("compression scope names unknown matrix {name}")))?;
        grams.insert(name.clone(), Gram::new(lin.in_dim()));
    }
    for seq in calib.iter().filter(|s| !s.is_empty()) {
        let batch = std::slice::from_ref(seq);
        let grams_ref = &mut grams;
        let mut pass = ForwardPass::new(model, batch, false)?.with_tap(move |name, rows| {
            if let Some(g) = grams_ref.get_mut(name) {
                g.accumulate(rows);
            }
        });
        pass.all_branches()?;
    }
    Ok(CalibrationSet {
        grams,
        sequences: calib.len(),
    })
}

/// `gram + ε·(trace/dim)·I`.
pub fn regularize(gram: &Mat) -> Mat {
    let mut g = gram.clone();
    let dim = g.rows().max(1) as f64;
    g.add_diagonal(RIDGE * g.trace() / dim);
    g
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WhiteningMethod {
    Cholesky,
    Svd,
}

/// `s · sᵀ = gram` and a matching (pseudo-)inverse.
#[derive(Clone, Debug)]
pub struct Whitening {
    pub s: Mat,
    pub s_inv: Mat,
    pub method: WhiteningMethod,
}

/// Cholesky whitening, falling back to the SVD route when the Gram is not
/// numerically positive definite.
pub fn whiten(gram: &Mat) -> Result<Whitening> {
    match cholesky(gram) {
        Ok(l) => {
            let s_inv = lower_triangular_inverse(&l)?;
            Ok(Whitening {
                s: l,
                s_inv,
                method: WhiteningMethod::Cholesky,
            })
        }
        Err(Error::Definiteness { .. }) => whiten_svd(gram),
        Err(e) => Err(e),
    }
}

/// `s = U·√Σ`, `s_inv = √Σ⁻¹·Uᵀ` from the SVD of the Gram.
pub fn whiten_svd(gram: &Mat) -> Result<Whitening> {
    let d = svd(gram)?;
    let max = d.s.first().copied().unwrap_or(0.0);
    if !(max > 0.0) {
        return Err(Error::Numeric("calibration Gram is zero".into()));
    }
    let root: Vec<f64> = d.s.iter().map(|v| v.sqrt()).collect();
    let inv_root: Vec<f64> = d.s.iter().map(|v| 1.0 / v.max(PINV_FLOOR * max).sqrt()).collect();
    Ok(Whitening {
        s: d.u.scale_cols(&root),
        s_inv: d.u.transpose().scale_rows(&inv_root),
        method: WhiteningMethod::Svd,
    })
}

/// `trace(m · gram · mᵀ)`, i.e. `‖m X‖_F²` without materializing `X`.
pub fn gram_norm_sq(m: &Mat, gram: &Mat) -> Result<f64> {
    let mg = m.matmul(gram)?;
    Ok(mg.data().iter().zip(m.data()).map(|(a, b)| a * b).sum())
}

/// Largest rank whose factored size `(out+in)·r` keeps at most a
/// `1 − ratio` share of `out·in`; never below one.
pub fn rank_for_ratio(out: usize, inp: usize, ratio: f64) -> usize {
    let ideal = (1.0 - ratio) * (out * inp) as f64 / (out + inp) as f64;
    (ideal.floor() as usize).clamp(1, out.min(inp))
}

/// SVD of `W·S` kept around so several ranks can be tried cheaply.
#[derive(Clone, Debug)]
pub struct WhitenedSvd {
    w: Mat,
    gram: Mat,
    whitening: Whitening,
    u: Mat,
    sigma: Vec<f64>,
    vt_sinv: Mat,
}

pub struct Factors {
    pub a: Mat,
    pub b: Mat,
}

impl Factors {
    pub fn product(&self) -> Mat {
        self.a.matmul(&self.b).expect("factors are conformable")
    }

    pub fn into_linear(self) -> Linear {
        Linear::Factored {
            a: self.a.to_tensor(),
            b: self.b.to_tensor(),
        }
    }
}

impl WhitenedSvd {
    /// `gram` is regularized before whitening.
    pub fn new(w: &Mat, gram: &Mat) -> Result<Self> {
        if gram.rows() != w.cols() || gram.cols() != w.cols() {
            return Err(Error::Dimension(format!(
                "gram {}x{} for a {}x{} matrix",
                gram.rows(),
                gram.cols(),
                w.rows(),
                w.cols()
            )));
        }
        let gram = regularize(gram);
        let whitening = whiten(&gram)?;
        let d = svd(&w.matmul(&whitening.s)?)?;
        let vt_sinv = d.vt.matmul(&whitening.s_inv)?;
        Ok(Self {
            w: w.clone(),
            gram,
            whitening,
            u: d.u,
            sigma: d.s,
            vt_sinv,
        })
    }

    pub fn max_rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn method(&self) -> WhiteningMethod {
        self.whitening.method
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.sigma
    }

    /// `A = U_r·√Σ_r`, `B = √Σ_r·V_rᵀ·S⁻¹`.
    pub fn factors(&self, rank: usize) -> Result<Factors> {
        if rank == 0 || rank > self.max_rank() {
            return Err(Error::Input(format!("rank {rank} outside 1..={}", self.max_rank())));
        }
        let root: Vec<f64> = self.sigma[..rank].iter().map(|v| v.sqrt()).collect();
        Ok(Factors {
            a: self.u.columns(0..rank).scale_cols(&root),
            b: self.vt_sinv.row_block(0..rank).scale_rows(&root),
        })
    }

    /// `‖(W − W′)X‖_F` at `rank` under the regularized Gram.
    pub fn loss(&self, rank: usize) -> Result<f64> {
        let diff = self.w.sub(&self.factors(rank)?.product());
        Ok(gram_norm_sq(&diff, &self.gram)?.max(0.0).sqrt())
    }
}

pub fn truncation_loss(w: &Mat, gram: &Mat, rank: usize) -> Result<f64> {
    WhitenedSvd::new(w, gram)?.loss(rank)
}

pub fn decompose(w: &Mat, gram: &Mat, ratio: f64) -> Result<Factors> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("compression ratio {ratio} outside [0, 1)")));
    }
    WhitenedSvd::new(w, gram)?.factors(rank_for_ratio(w.rows(), w.cols(), ratio))
}

/// Inverted score `1 / ln L`, with `L` clamped just above one.
pub fn score(l_min: f64) -> f64 {
    1.0 / l_min.max(LOG_FLOOR).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Allocation {
    /// Ratios after clamping to `[MIN_RATIO, MAX_RATIO]`.
    pub ratios: Vec<f64>,
    pub unclamped: Vec<f64>,
    /// Set when every score was degenerate and the uniform ratio was used.
    pub uniform_fallback: bool,
}

/// Ratio of each group member: `R · Len · s_i / Σ s`. Scores are normalized
/// by their maximum first so equal scores give exactly `R`.
pub fn allocate_ratios(scores: &[f64], target: f64) -> Result<Allocation> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Config(format!("target ratio {target} outside (0, 1)")));
    }
    if scores.is_empty() {
        return Ok(Allocation {
            ratios: Vec::new(),
            unclamped: Vec::new(),
            uniform_fallback: false,
        });
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = scores.iter().any(|s| !s.is_finite() || *s <= 0.0);
    let all_clamped = scores.iter().all(|&s| s == score(0.0));
    if degenerate || all_clamped || !(max > 0.0) {
        let n = scores.len();
        return Ok(Allocation {
            ratios: vec![target; n],
            unclamped: vec![target; n],
            uniform_fallback: true,
        });
    }
    let w: Vec<f64> = scores.iter().map(|s| s / max).collect();
    let sum: f64 = w.iter().sum();
    let len = w.len() as f64;
    let unclamped: Vec<f64> = w.iter().map(|wi| target * (len * wi / sum)).collect();
    let ratios = unclamped.iter().map(|r| r.clamp(MIN_RATIO, MAX_RATIO)).collect();
    Ok(Allocation {
        ratios,
        unclamped,
        uniform_fallback: false,
    })
}

/// Group key: the block a projection belongs to, or `heads` for exit
/// projections.
pub fn group_of(name: &str) -> String {
    if name.ends_with(".lm_proj") {
        "heads".into()
    } else {
        name.rsplit_once('.').map_or(name, |(p, _)| p).to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlanEntry {
    pub name: String,
    #[serde(rename = "L_min")]
    pub l_min: f64,
    pub score: f64,
    pub ratio: f64,
    pub rank: usize,
    pub params_before: usize,
    pub params_after: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct CompressionPlan {
    pub target_ratio: f64,
    /// Group-level ratio fed to the allocation so the parameter-weighted
    /// removal matches `target_ratio`.
    pub effective_ratio: f64,
    pub params_before: usize,
    pub params_after: usize,
    pub achieved_removal: f64,
    pub entries: Vec<PlanEntry>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub factors: BTreeMap<String, Linear>,
}

impl CompressionPlan {
    pub fn empty(target_ratio: f64) -> Self {
        Self {
            target_ratio,
            effective_ratio: target_ratio,
            params_before: 0,
            params_after: 0,
            achieved_removal: 0.0,
            entries: Vec::new(),
            warnings: Vec::new(),
            factors: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Moves floored ranks onto the budget: down while too much is kept, then
/// up, largest remainder first, while the removed share stays at or above
/// the target. Flooring alone overshoots by several percent on small
/// matrices.
fn reconcile_ranks(shapes: &[(usize, usize)], ideal: &[f64], ranks: &mut [usize], target: f64) {
    let before: usize = shapes.iter().map(|(o, i)| o * i).sum();
    let budget = (1.0 - target) * before as f64;
    let mut kept: usize = shapes.iter().zip(ranks.iter()).map(|((o, i), r)| (o + i) * r).sum();
    let mut remainder: Vec<f64> = ideal.iter().zip(ranks.iter()).map(|(x, &r)| x - r as f64).collect();
    // Rank floors of one can leave too much; give back ranks first.
    while kept as f64 > budget {
        let mut best: Option<usize> = None;
        for j in 0..shapes.len() {
            if ranks[j] > 1 && best.is_none_or(|b| remainder[j] < remainder[b]) {
                best = Some(j);
            }
        }
        let Some(j) = best else { break };
        ranks[j] -= 1;
        remainder[j] += 1.0;
        kept -= shapes[j].0 + shapes[j].1;
    }
    loop {
        let mut best: Option<usize> = None;
        for (j, &(o, i)) in shapes.iter().enumerate() {
            if ranks[j] >= o.min(i) || (kept + o + i) as f64 > budget {
                continue;
            }
            if best.is_none_or(|b| remainder[j] > remainder[b]) {
                best = Some(j);
            }
        }
        let Some(j) = best else { break };
        ranks[j] += 1;
        remainder[j] -= 1.0;
        kept += shapes[j].0 + shapes[j].1;
    }
}

/// Scores every matrix at the uniform rank, allocates per-group ratios,
/// converts them to ranks and builds the factors.
pub fn build_plan(model: &FamilialModel, calib: &CalibrationSet, target: f64) -> Result<CompressionPlan> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Config(format!("target ratio {target} outside (0, 1)")));
    }
    let mut plan = CompressionPlan::empty(target);
    let mut svds = Vec::new();
    for (name, gram) in &calib.grams {
        if gram.count == 0 {
            return Err(Error::Config(format!("no calibration activations reached {name}")));
        }
        let lin = model.linear(name).ok_or_else(|| Error::integrity("plan matrix", "a model projection", name.clone()))?;
        let w = Mat::from_tensor(&lin.dense())?;
        let ws = WhitenedSvd::new(&w, &gram.matrix())?;
        if ws.method() == WhiteningMethod::Svd {
            plan.warnings.push(format!("{name}: Gram not positive definite, used SVD whitening"));
        }
        let l_min = ws.loss(rank_for_ratio(w.rows(), w.cols(), target))?;
        svds.push((name.clone(), ws, l_min));
    }

    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (j, (name, _, _)) in svds.iter().enumerate() {
        groups.entry(group_of(name)).or_default().push(j);
    }
    let shapes: Vec<(usize, usize)> = svds.iter().map(|(_, ws, _)| (ws.w.rows(), ws.w.cols())).collect();
    let allocate = |r: f64, warnings: Option<&mut Vec<String>>| -> Result<Vec<f64>> {
        let mut ratios = vec![0.0; svds.len()];
        let mut notes = Vec::new();
        for (group, members) in &groups {
            let scores: Vec<f64> = members.iter().map(|&j| score(svds[j].2)).collect();
            let alloc = allocate_ratios(&scores, r)?;
            if alloc.uniform_fallback {
                notes.push(format!("group {group}: degenerate scores, using the uniform ratio"));
            }
            for (&j, r) in members.iter().zip(alloc.ratios) {
                ratios[j] = r;
            }
        }
        if let Some(w) = warnings {
            w.extend(notes);
        }
        Ok(ratios)
    };
    // Group ratios average to R per matrix, but matrices differ in size and
    // clamping drops mass, so the group-level R is solved for the parameter
    // budget instead.
    let total: f64 = shapes.iter().map(|(o, i)| (o * i) as f64).sum();
    let removal = |ratios: &[f64]| ratios.iter().zip(&shapes).map(|(r, (o, i))| r * (o * i) as f64).sum::<f64>() / total;
    let (mut lo, mut hi) = (1e-9, 1.0 - 1e-9);
    if removal(&allocate(target, None)?) == target {
        (lo, hi) = (target, target);
    }
    for _ in 0..100 {
        if hi - lo <= 1e-15 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if removal(&allocate(mid, None)?) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    plan.effective_ratio = hi;
    let ratios = allocate(hi, Some(&mut plan.warnings))?;

    let ideal: Vec<f64> = shapes
        .iter()
        .zip(&ratios)
        .map(|(&(o, i), r)| (1.0 - r) * (o * i) as f64 / (o + i) as f64)
        .collect();
    let mut ranks: Vec<usize> = shapes.iter().zip(&ratios).map(|(&(o, i), &r)| rank_for_ratio(o, i, r)).collect();
    reconcile_ranks(&shapes, &ideal, &mut ranks, target);

    for (j, (name, ws, l_min)) in svds.into_iter().enumerate() {
        let (o, i) = shapes[j];
        let rank = ranks[j];
        let entry = PlanEntry {
            name: name.clone(),
            l_min,
            score: score(l_min),
            ratio: ratios[j],
            rank,
            params_before: o * i,
            params_after: (o + i) * rank,
        };
        plan.params_before += entry.params_before;
        plan.params_after += entry.params_after;
        plan.entries.push(entry);
        plan.factors.insert(name, ws.factors(rank)?.into_linear());
    }
    if plan.params_before > 0 {
        plan.achieved_removal = 1.0 - plan.params_after as f64 / plan.params_before as f64;
    }
    Ok(plan)
}

/// Replaces each planned projection with its factor pair; the freeze state
/// of a projection carries over to both factors.
pub fn apply_compression(model: &FamilialModel, plan: &CompressionPlan) -> Result<FamilialModel> {
    let mut out = model.clone();
    for entry in &plan.entries {
        let factors = plan
            .factors
            .get(&entry.name)
            .ok_or_else(|| Error::integrity("plan factors", entry.name.clone(), "missing"))?;
        let lin = out
            .linear_mut(&entry.name)
            .ok_or_else(|| Error::integrity("plan matrix", "a model projection", entry.name.clone()))?;
        if (lin.out_dim(), lin.in_dim()) != (factors.out_dim(), factors.in_dim()) {
            return Err(Error::integrity(
                format!("shape of {}", entry.name),
                format!("{}x{}", lin.out_dim(), lin.in_dim()),
                format!("{}x{}", factors.out_dim(), factors.in_dim()),
            ));
        }
        *lin = factors.clone();
        let frozen = out.frozen.remove(&entry.name);
        for suffix in [".A", ".B"] {
            let n = format!("{}{suffix}", entry.name);
            if frozen {
                out.frozen.insert(n);
            } else {
                out.frozen.remove(&n);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct MeasureReport {
    pub perplexity_base: Vec<f64>,
    pub perplexity_compressed: Vec<f64>,
    pub params_base: usize,
    pub params_compressed: usize,
    pub l_min: Vec<(String, f64)>,
}

impl MeasureReport {
    pub fn delta_perplexity(&self) -> Vec<f64> {
        self.perplexity_compressed.iter().zip(&self.perplexity_base).map(|(c, b)| c - b).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(["branch", "perplexity_base", "perplexity_compressed", "delta"])?;
        for (k, d) in self.delta_perplexity().iter().enumerate() {
            w.write_record([
                k.to_string(),
                self.perplexity_base[k].to_string(),
                self.perplexity_compressed[k].to_string(),
                d.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("measure csv", e))?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "params {} -> {} ({} removed)\n",
            self.params_base,
            self.params_compressed,
            self.params_base - self.params_compressed
        );
        for (k, d) in self.delta_perplexity().iter().enumerate() {
            s += &format!(
                "branch {k}: perplexity {:.4} -> {:.4} ({d:+.4})\n",
                self.perplexity_base[k], self.perplexity_compressed[k]
            );
        }
        s
    }
}

pub fn measure_compression(
    base: &FamilialModel,
    compressed: &FamilialModel,
    plan: &CompressionPlan,
    eval_windows: &[Vec<u32>],
) -> Result<MeasureReport> {
    Ok(MeasureReport {
        perplexity_base: perplexities(base, eval_windows)?,
        perplexity_compressed: perplexities(compressed, eval_windows)?,
        params_base: base.param_count().total,
        params_compressed: compressed.param_count().total,
        l_min: plan.entries.iter().map(|e| (e.name.clone(), e.l_min)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expand::{expand, ExpansionSpec};
    use crate::model::FamilyConfig;
    use crate::rng::{Gaussian, SeedStream};

    fn random(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut g = Gaussian::new(SeedStream::new(seed));
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| g.sample()).collect()).unwrap()
    }

    #[test]
    fn one_hot_sample_gram() {
        let mut g = Gram::new(3);
        g.accumulate(&Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let m = g.matrix();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m[(i, j)], if i == 1 && j == 1 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn whitening_examples() {
        let w = whiten(&Mat::eye(3)).unwrap();
        assert_eq!(w.method, WhiteningMethod::Cholesky);
        assert_eq!(w.s.data(), Mat::eye(3).data());
        assert_eq!(w.s_inv.data(), Mat::eye(3).data());
        let w = whiten_svd(&Mat::from_diag(&[4.0, 1.0])).unwrap();
        let d: Vec<f64> = w.s.data().iter().map(|v| v.abs()).collect();
        assert_eq!(d, vec![2.0, 0.0, 0.0, 1.0]);
        // Rank-deficient Gram takes the fallback.
        let x = random(4, 2, 3);
        let g = x.matmul(&x.transpose()).unwrap();
        assert_eq!(whiten(&g).unwrap().method, WhiteningMethod::Svd);
    }

    #[test]
    fn allocation_examples() {
        let a = allocate_ratios(&[2.0, 1.0], 0.3).unwrap();
        assert!((a.ratios[0] - 0.4).abs() < 1e-15 && (a.ratios[1] - 0.2).abs() < 1e-15);
        let a = allocate_ratios(&[0.7; 7], 0.4).unwrap();
        assert!(a.ratios.iter().all(|&r| r == 0.4));
        let a = allocate_ratios(&[score(0.5), score(0.2)], 0.4).unwrap();
        assert!(a.uniform_fallback);
        assert!(allocate_ratios(&[1.0], 1.0).is_err());
        let a = allocate_ratios(&[100.0, 1.0, 1.0], 0.5).unwrap();
        assert_eq!(a.ratios[0], MAX_RATIO);
    }

    #[test]
    fn rank_rounding() {
        assert_eq!(rank_for_ratio(32, 32, 0.0), 16);
        assert_eq!(rank_for_ratio(32, 32, 0.5), 8);
        assert_eq!(rank_for_ratio(4, 4, 0.99), 1);
        assert_eq!(group_of("exits.1.expanded.2.w_up"), "exits.1.expanded.2");
        assert_eq!(group_of("exits.1.lm_proj"), "heads");
    }

    #[test]
    fn loss_is_monotone_and_small_at_full_rank() {
        let w = random(8, 6, 1);
        let x = random(6, 40, 2);
        let g = x.matmul(&x.transpose()).unwrap();
        let ws = WhitenedSvd::new(&w, &g).unwrap();
        let mut prev = f64::INFINITY;
        for r in 1..=6 {
            let l = ws.loss(r).unwrap();
            assert!(l <= prev + 1e-9);
            prev = l;
        }
        let wx = gram_norm_sq(&w, &g).unwrap().sqrt();
        assert!(prev <= 1e-4 * wx);
    }

    #[test]
    fn plan_hits_target_on_expanded_desk_model() {
        let model = FamilialModel::init(FamilyConfig::desk(), 4).unwrap();
        let (model, _) = expand(&model, &ExpansionSpec::new(1)).unwrap();
        let scope = resolve_scope(&model, &default_scope(&model)).unwrap();
        assert_eq!(scope.len(), 3 * 7 + 1);
        let calib: Vec<Vec<u32>> = (0..4).map(|s| (0..48).map(|t| (t * 37 + s * 11) % 256).collect()).collect();
        let set = capture_activations(&model, &calib, &scope).unwrap();
        assert_eq!(set.grams["exits.1.lm_proj"].count, 4 * 48);
        let plan = build_plan(&model, &set, 0.4).unwrap();
        assert!(plan.achieved_removal >= 0.4 && plan.achieved_removal <= 0.42, "{}", plan.achieved_removal);
        let out = apply_compression(&model, &plan).unwrap();
        let removed = model.param_count().total - out.param_count().total;
        assert_eq!(removed, plan.params_before - plan.params_after);
        for (name, t) in model.named_params() {
            if !scope.iter().any(|s| name == *s) {
                assert!(t.bit_eq(out.param(&name).unwrap()), "{name} changed");
            }
        }
        assert!(out.is_trainable("exits.1.lm_proj.A"));
        assert!(!out.is_trainable("backbone.0.wq"));
        assert!(resolve_scope(&model, &["backbone.*".into()]).is_err());
        assert!(capture_activations(&model, &[], &scope).is_err());
    }

    #[test]
    fn empty_plan_is_identity() {
        let model = FamilialModel::init(FamilyConfig::desk(), 4).unwrap();
        assert_eq!(apply_compression(&model, &CompressionPlan::empty(0.4)).unwrap(), model);
    }
}
