//! E-step: posterior moments of the latent effects.
//!
//! With warping disabled (r = 0) everything is exact Gaussian conditioning.
//! Otherwise the warping effects of each group are sampled by a
//! Metropolis-within-Gibbs random walk on the Jupp scale, and every required
//! amplitude expectation is Rao-Blackwellized: the Monte Carlo average of the
//! exact Gaussian conditional moment given the sampled warps.
//!
//! The marginal log-likelihood of each group is estimated from the same
//! chain by reciprocal importance sampling with a moment-matched Gaussian,
//! which is exact (zero variance) in the r = 0 case.

use crate::error::{Error, Result};
use crate::model::{
    assemble_group, subject_design, subject_stats, subject_warps, GroupData, ModelParams,
    ObservationSet, SubjectStats, WarpEffects,
};
use crate::numeric::linalg::{chol_logdet, cholesky_jittered, sqrt_psd};
use crate::numeric::rng::stream;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{GroupPosterior, PosteriorSummaries, WlsSystem};

const LN_2PI: f64 = 1.837_877_066_409_345_6;
const ESTEP_TAG: u64 = 0xE57E;

/// Precomputed per-subject design matrices, valid only while warping is
/// disabled (the design never changes between iterations).
pub(super) struct DesignCache {
    fixed: Option<Vec<Vec<SubjectDesign>>>,
}

struct SubjectDesign {
    design: DMatrix<f64>,
    btb: DMatrix<f64>,
    bty: DVector<f64>,
}

impl SubjectDesign {
    fn build(design: DMatrix<f64>, values: &[f64]) -> Self {
        let y = DVector::from_column_slice(values);
        let btb = design.transpose() * &design;
        let bty = design.transpose() * y;
        SubjectDesign { design, btb, bty }
    }
}

impl DesignCache {
    pub(super) fn build(params: &ModelParams, data: &ObservationSet) -> Result<DesignCache> {
        if params.r() > 0 {
            return Ok(DesignCache { fixed: None });
        }
        let mut all = Vec::with_capacity(data.n_groups());
        for group in data.groups() {
            let mut per = Vec::with_capacity(group.n_subjects());
            for j in 0..group.n_subjects() {
                let (times, values) = group.subject(j);
                let design = params.basis.eval_matrix(times)?;
                per.push(SubjectDesign::build(design, values));
            }
            all.push(per);
        }
        Ok(DesignCache { fixed: Some(all) })
    }
}

/// Persistent per-group sampler state across EM iterations: the chain
/// restarts from its last state, and the adapted proposal scale is kept.
pub(super) struct ChainState {
    groups: Vec<GroupChain>,
}

#[derive(Clone)]
struct GroupChain {
    eta: DVector<f64>,
    xi: Vec<DVector<f64>>,
    step: f64,
}

impl ChainState {
    pub(super) fn fresh(params: &ModelParams, data: &ObservationSet, step: f64) -> ChainState {
        let r = params.r();
        let groups = data
            .groups()
            .iter()
            .map(|g| GroupChain {
                eta: DVector::zeros(r),
                xi: vec![DVector::zeros(r); g.n_subjects()],
                step,
            })
            .collect();
        ChainState { groups }
    }

    /// Start the chains at externally estimated effects (registration seed).
    pub(super) fn seeded(
        step: f64,
        effects: Vec<(DVector<f64>, Vec<DVector<f64>>)>,
    ) -> ChainState {
        let groups =
            effects.into_iter().map(|(eta, xi)| GroupChain { eta, xi, step }).collect();
        ChainState { groups }
    }
}

/// Public E-step entry point: fresh chain state, zero-initialized effects.
///
/// Returns the Rao-Blackwellized posterior summaries for all groups based on
/// `mc_size` Metropolis-within-Gibbs sweeps per group (20% burn-in), or the
/// exact conditional moments when the model has no warping component.
pub fn e_step(
    params: &ModelParams,
    data: &ObservationSet,
    mc_size: usize,
    seed: u64,
) -> Result<PosteriorSummaries> {
    let cache = DesignCache::build(params, data)?;
    let mut chain = ChainState::fresh(params, data, 0.25);
    e_step_internal(params, data, mc_size, seed, 0, &cache, &mut chain)
}

pub(super) fn e_step_internal(
    params: &ModelParams,
    data: &ObservationSet,
    mc_size: usize,
    seed: u64,
    iteration: u64,
    cache: &DesignCache,
    chain: &mut ChainState,
) -> Result<PosteriorSummaries> {
    let shared = if params.r() > 0 { Some(WarpPriors::new(params)?) } else { None };

    let outputs: Vec<Result<GroupOutput>> = data
        .groups()
        .par_iter()
        .enumerate()
        .map(|(i, group)| {
            let fixed = cache.fixed.as_ref().map(|f| &f[i]);
            match (&shared, fixed) {
                (None, Some(designs)) => exact_group(params, group, designs),
                (None, None) => {
                    // r = 0 but no cache (direct e_step call on a warped
                    // parameter set is impossible here; rebuild designs).
                    let designs = build_designs(params, group)?;
                    exact_group(params, group, &designs)
                }
                (Some(priors), _) => {
                    let mut rng = stream(seed, &[ESTEP_TAG, i as u64, iteration]);
                    sample_group(params, group, priors, mc_size, &mut rng, &chain.groups[i])
                }
            }
        })
        .collect();

    let p = params.p();
    let q = params.q();
    let s = params.s();
    let d = s * (1 + p + q);
    let mut groups = Vec::with_capacity(outputs.len());
    let mut normal = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    let mut y_sq = 0.0;
    let mut loglik = 0.0;
    let mut loglik_var = 0.0;
    let mut kept = usize::MAX;

    for (i, out) in outputs.into_iter().enumerate() {
        let out = out?;
        normal += &out.wls_normal;
        rhs += &out.wls_rhs;
        y_sq += out.y_sq;
        loglik += out.posterior.loglik;
        loglik_var += out.posterior.loglik_se.powi(2);
        kept = kept.min(out.kept);
        chain.groups[i] = out.chain;
        groups.push(out.posterior);
    }

    Ok(PosteriorSummaries {
        groups,
        wls: WlsSystem { normal, rhs, y_sq, n_obs: data.n_obs_total() },
        mc_size: if kept == usize::MAX { 1 } else { kept },
        loglik,
        loglik_se: loglik_var.sqrt(),
    })
}

struct GroupOutput {
    posterior: GroupPosterior,
    wls_normal: DMatrix<f64>,
    wls_rhs: DVector<f64>,
    y_sq: f64,
    kept: usize,
    chain: GroupChain,
}

fn build_designs(params: &ModelParams, group: &GroupData) -> Result<Vec<SubjectDesign>> {
    let mut out = Vec::with_capacity(group.n_subjects());
    for j in 0..group.n_subjects() {
        let (times, values) = group.subject(j);
        let design = params.basis.eval_matrix(times)?;
        out.push(SubjectDesign::build(design, values));
    }
    Ok(out)
}

/// Exact E-step for one group (no warping).
fn exact_group(
    params: &ModelParams,
    group: &GroupData,
    designs: &[SubjectDesign],
) -> Result<GroupOutput> {
    let p = params.p();
    let n_subj = group.n_subjects();
    let mut consts = 0.0;
    let mut info_sum = DMatrix::zeros(p, p);
    let mut lean_sum = DVector::zeros(p);
    let mut stats = Vec::with_capacity(n_subj);
    for (j, sd) in designs.iter().enumerate() {
        let (_, values) = group.subject(j);
        let st = subject_stats(params, &sd.design, values)?;
        consts += st.loglik_const;
        info_sum += &st.info;
        lean_sum += &st.lean;
        stats.push(st);
    }
    let gs = assemble_group(params, consts, &info_sum, &lean_sum)?;
    if !gs.loglik.is_finite() {
        return Err(Error::computation("non-finite group log-likelihood"));
    }

    let mut acc = MomentAccumulator::new(params, n_subj, group);
    acc.add_draw(params, group, designs, &stats, &gs.u_mean, &gs.u_cov, None);
    let (posterior, wls_normal, wls_rhs, y_sq) =
        acc.finish(1, gs.loglik, 0.0, f64::INFINITY, 1.0);
    Ok(GroupOutput {
        posterior,
        wls_normal,
        wls_rhs,
        y_sq,
        kept: usize::MAX,
        chain: GroupChain { eta: DVector::zeros(0), xi: vec![DVector::zeros(0); n_subj], step: 0.25 },
    })
}

/// Prior factorizations shared across groups.
struct WarpPriors {
    group_prec: Cholesky<f64, Dyn>,
    subject_prec: Cholesky<f64, Dyn>,
    group_logdet: f64,
    subject_logdet: f64,
    group_root: DMatrix<f64>,
    subject_root: DMatrix<f64>,
    r: usize,
}

impl WarpPriors {
    fn new(params: &ModelParams) -> Result<WarpPriors> {
        let group_prec = cholesky_jittered(&params.warp_group_cov)?;
        let subject_prec = cholesky_jittered(&params.warp_subject_cov)?;
        let group_logdet = chol_logdet(&group_prec);
        let subject_logdet = chol_logdet(&subject_prec);
        Ok(WarpPriors {
            group_logdet,
            subject_logdet,
            group_root: sqrt_psd(&params.warp_group_cov)?,
            subject_root: sqrt_psd(&params.warp_subject_cov)?,
            group_prec,
            subject_prec,
            r: params.r(),
        })
    }

    fn log_group_prior(&self, eta: &DVector<f64>) -> f64 {
        let quad = eta.dot(&self.group_prec.solve(eta));
        -0.5 * (self.r as f64) * LN_2PI - 0.5 * self.group_logdet - 0.5 * quad
    }

    fn log_subject_prior(&self, xi: &DVector<f64>) -> f64 {
        let quad = xi.dot(&self.subject_prec.solve(xi));
        -0.5 * (self.r as f64) * LN_2PI - 0.5 * self.subject_logdet - 0.5 * quad
    }
}

/// Everything the sampler tracks per subject at the current state.
struct SubjectSlot {
    design: SubjectDesign,
    stats: SubjectStats,
    log_prior: f64,
}

fn rebuild_subject(
    params: &ModelParams,
    group: &GroupData,
    j: usize,
    theta: &[f64],
) -> Result<(SubjectDesign, SubjectStats)> {
    let (times, values) = group.subject(j);
    let warp = params.knots.warp_from_jupp(theta)?;
    let design = subject_design(params, times, &Some(warp))?;
    let stats = subject_stats(params, &design, values)?;
    Ok((SubjectDesign::build(design, values), stats))
}

fn normal_vec(rng: &mut ChaCha8Rng, r: usize) -> DVector<f64> {
    DVector::from_fn(r, |_, _| crate::model::standard_normal(rng))
}

/// Metropolis-within-Gibbs sampler for the warping effects of one group,
/// with Rao-Blackwellized amplitude moments.
fn sample_group(
    params: &ModelParams,
    group: &GroupData,
    priors: &WarpPriors,
    mc_size: usize,
    rng: &mut ChaCha8Rng,
    start: &GroupChain,
) -> Result<GroupOutput> {
    let r = params.r();
    let p = params.p();
    let n_subj = group.n_subjects();
    let theta0 = params.knots.theta0().0;
    let mc_size = mc_size.max(4);
    let burn = (mc_size as f64 * 0.2).ceil() as usize;

    let mut eta = start.eta.clone();
    let mut xi = start.xi.clone();
    if eta.len() != r {
        eta = DVector::zeros(r);
        xi = vec![DVector::zeros(r); n_subj];
    }
    let mut step = start.step;

    // Current state caches.
    let warps = WarpEffects {
        group: eta.iter().cloned().collect(),
        subjects: xi.iter().map(|x| x.iter().cloned().collect()).collect(),
    };
    let _ = subject_warps(params, n_subj, &warps)?; // validates starting state
    let mut slots: Vec<SubjectSlot> = Vec::with_capacity(n_subj);
    for j in 0..n_subj {
        let theta = add3(&theta0, &eta, &xi[j]);
        let (design, stats) = rebuild_subject(params, group, j, &theta)?;
        let log_prior = priors.log_subject_prior(&xi[j]);
        slots.push(SubjectSlot { design, stats, log_prior });
    }
    let mut consts: f64 = slots.iter().map(|s| s.stats.loglik_const).sum();
    let mut info_sum = DMatrix::zeros(p, p);
    let mut lean_sum = DVector::zeros(p);
    for s in &slots {
        info_sum += &s.stats.info;
        lean_sum += &s.stats.lean;
    }
    let mut group_stats = assemble_group(params, consts, &info_sum, &lean_sum)?;
    let mut log_eta_prior = priors.log_group_prior(&eta);

    let mut acc = MomentAccumulator::new(params, n_subj, group);
    let dim = r * (1 + n_subj);
    let mut draws: Vec<DVector<f64>> = Vec::with_capacity(mc_size - burn);
    let mut targets: Vec<f64> = Vec::with_capacity(mc_size - burn);
    let mut loglik_chain: Vec<f64> = Vec::with_capacity(mc_size - burn);

    let mut accepted = 0usize;
    let mut proposed = 0usize;
    let mut accepted_tail = 0usize;
    let mut proposed_tail = 0usize;

    for sweep in 0..mc_size {
        // Group-effect move: changes every subject's warp.
        let eta_prop = &eta + step * (&priors.group_root * normal_vec(rng, r));
        proposed += 1;
        let accept_u: f64 = rng.random();
        if let Ok(cand) = propose_eta(params, group, &theta0, &eta_prop, &xi) {
            let cand_consts: f64 = cand.iter().map(|(_, st)| st.loglik_const).sum();
            let mut cand_info = DMatrix::zeros(p, p);
            let mut cand_lean = DVector::zeros(p);
            for (_, st) in &cand {
                cand_info += &st.info;
                cand_lean += &st.lean;
            }
            if let Ok(cand_stats) = assemble_group(params, cand_consts, &cand_info, &cand_lean) {
                let cand_eta_prior = priors.log_group_prior(&eta_prop);
                let log_ratio =
                    cand_stats.loglik + cand_eta_prior - group_stats.loglik - log_eta_prior;
                if accept_u.ln() < log_ratio {
                    accepted += 1;
                    eta = eta_prop;
                    log_eta_prior = cand_eta_prior;
                    for (j, (design, stats)) in cand.into_iter().enumerate() {
                        slots[j].design = design;
                        slots[j].stats = stats;
                    }
                    consts = cand_consts;
                    info_sum = cand_info;
                    lean_sum = cand_lean;
                    group_stats = cand_stats;
                }
            }
        }

        // Subject-effect moves: each changes only that subject's warp.
        for j in 0..n_subj {
            let xi_prop = &xi[j] + step * (&priors.subject_root * normal_vec(rng, r));
            proposed += 1;
            let accept_u: f64 = rng.random();
            let theta = add3(&theta0, &eta, &xi_prop);
            if let Ok((design, stats)) = rebuild_subject(params, group, j, &theta) {
                let cand_consts = consts - slots[j].stats.loglik_const + stats.loglik_const;
                let cand_info = &info_sum - &slots[j].stats.info + &stats.info;
                let cand_lean = &lean_sum - &slots[j].stats.lean + &stats.lean;
                if let Ok(cand_stats) = assemble_group(params, cand_consts, &cand_info, &cand_lean)
                {
                    let cand_prior = priors.log_subject_prior(&xi_prop);
                    let log_ratio =
                        cand_stats.loglik + cand_prior - group_stats.loglik - slots[j].log_prior;
                    if accept_u.ln() < log_ratio {
                        accepted += 1;
                        xi[j] = xi_prop;
                        slots[j] = SubjectSlot { design, stats, log_prior: cand_prior };
                        consts = cand_consts;
                        info_sum = cand_info;
                        lean_sum = cand_lean;
                        group_stats = cand_stats;
                    }
                }
            }
        }

        if sweep < burn {
            // Robbins-Monro adaptation toward the 20-40% acceptance band,
            // frozen after burn-in.
            let rate = accepted as f64 / proposed as f64;
            step *= (0.15 * (rate - 0.3)).exp();
            step = step.clamp(1e-3, 10.0);
        } else {
            accepted_tail = accepted;
            proposed_tail = proposed;
            // Rao-Blackwellized accumulation.
            let stats_refs: Vec<&SubjectStats> = slots.iter().map(|s| &s.stats).collect();
            let designs: Vec<&SubjectDesign> = slots.iter().map(|s| &s.design).collect();
            acc.add_draw_refs(
                params,
                group,
                &designs,
                &stats_refs,
                &group_stats.u_mean,
                &group_stats.u_cov,
                Some((&eta, &xi)),
            );
            let mut w = DVector::zeros(dim);
            for k in 0..r {
                w[k] = eta[k];
            }
            for (j, x) in xi.iter().enumerate() {
                for k in 0..r {
                    w[r * (1 + j) + k] = x[k];
                }
            }
            let target = group_stats.loglik
                + log_eta_prior
                + slots.iter().map(|s| s.log_prior).sum::<f64>();
            draws.push(w);
            targets.push(target);
            loglik_chain.push(group_stats.loglik);
        }
    }

    let accept_rate = (accepted_tail as f64) / (proposed_tail.max(1) as f64);
    if accept_rate < 0.01 {
        return Err(Error::Diagnostics(format!(
            "MH acceptance rate {accept_rate:.4} below 1% after adaptation"
        )));
    }

    let kept = draws.len();
    let (loglik, loglik_se) = reciprocal_importance_loglik(&draws, &targets)?;
    let ess = effective_sample_size(&loglik_chain);

    let (posterior, wls_normal, wls_rhs, y_sq) =
        acc.finish(kept, loglik, loglik_se, ess, accept_rate);
    Ok(GroupOutput {
        posterior,
        wls_normal,
        wls_rhs,
        y_sq,
        kept,
        chain: GroupChain { eta, xi, step },
    })
}

fn add3(theta0: &[f64], eta: &DVector<f64>, xi: &DVector<f64>) -> Vec<f64> {
    theta0
        .iter()
        .enumerate()
        .map(|(k, &t0)| t0 + eta[k] + xi[k])
        .collect()
}

fn propose_eta(
    params: &ModelParams,
    group: &GroupData,
    theta0: &[f64],
    eta: &DVector<f64>,
    xi: &[DVector<f64>],
) -> Result<Vec<(SubjectDesign, SubjectStats)>> {
    (0..group.n_subjects())
        .map(|j| rebuild_subject(params, group, j, &add3(theta0, eta, &xi[j])))
        .collect()
}

/// Accumulates Rao-Blackwellized posterior moments and the WLS system over
/// kept draws.
struct MomentAccumulator {
    p: usize,
    q: usize,
    uu: DMatrix<f64>,
    u_mean: DVector<f64>,
    vv: Vec<DMatrix<f64>>,
    v_mean: Vec<DVector<f64>>,
    eta2: DMatrix<f64>,
    eta_mean: DVector<f64>,
    xi2: Vec<DMatrix<f64>>,
    xi_mean: Vec<DVector<f64>>,
    wls_normal: DMatrix<f64>,
    wls_rhs: DVector<f64>,
    y_sq: f64,
}

impl MomentAccumulator {
    fn new(params: &ModelParams, n_subj: usize, group: &GroupData) -> Self {
        let (p, q, r, s) = (params.p(), params.q(), params.r(), params.s());
        let d = s * (1 + p + q);
        let y_sq = group.values().iter().map(|y| y * y).sum();
        MomentAccumulator {
            p,
            q,
            uu: DMatrix::zeros(p, p),
            u_mean: DVector::zeros(p),
            vv: vec![DMatrix::zeros(q, q); n_subj],
            v_mean: vec![DVector::zeros(q); n_subj],
            eta2: DMatrix::zeros(r, r),
            eta_mean: DVector::zeros(r),
            xi2: vec![DMatrix::zeros(r, r); n_subj],
            xi_mean: vec![DVector::zeros(r); n_subj],
            wls_normal: DMatrix::zeros(d, d),
            wls_rhs: DVector::zeros(d),
            y_sq,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn add_draw(
        &mut self,
        params: &ModelParams,
        group: &GroupData,
        designs: &[SubjectDesign],
        stats: &[SubjectStats],
        u_mean: &DVector<f64>,
        u_cov: &DMatrix<f64>,
        warp_state: Option<(&DVector<f64>, &[DVector<f64>])>,
    ) {
        let design_refs: Vec<&SubjectDesign> = designs.iter().collect();
        let stats_refs: Vec<&SubjectStats> = stats.iter().collect();
        self.add_draw_refs(params, group, &design_refs, &stats_refs, u_mean, u_cov, warp_state)
    }

    #[allow(clippy::too_many_arguments)]
    fn add_draw_refs(
        &mut self,
        _params: &ModelParams,
        _group: &GroupData,
        designs: &[&SubjectDesign],
        stats: &[&SubjectStats],
        u_mean: &DVector<f64>,
        u_cov: &DMatrix<f64>,
        warp_state: Option<(&DVector<f64>, &[DVector<f64>])>,
    ) {
        let (p, q) = (self.p, self.q);
        let uu = u_cov + u_mean * u_mean.transpose();
        self.uu += &uu;
        self.u_mean += u_mean;

        if let Some((eta, xi)) = warp_state {
            self.eta2 += eta * eta.transpose();
            self.eta_mean += eta;
            for (j, x) in xi.iter().enumerate() {
                self.xi2[j] += x * x.transpose();
                self.xi_mean[j] += x;
            }
        }

        let d_t = 1 + p + q;
        for (j, (sd, st)) in designs.iter().zip(stats).enumerate() {
            // Conditional moments of v_j given (y, warps).
            let v_mean = &st.v_lean - &st.v_slope * u_mean;
            let v_cov = &st.v_cov_given_u + &st.v_slope * u_cov * st.v_slope.transpose();
            let uv_cov = -(u_cov * st.v_slope.transpose());
            let vv = &v_cov + &v_mean * v_mean.transpose();
            let uv = &uv_cov + u_mean * v_mean.transpose();
            self.vv[j] += &vv;
            self.v_mean[j] += &v_mean;

            // E[t t'] for t = (1, u, v_j).
            let mut ett = DMatrix::zeros(d_t, d_t);
            ett[(0, 0)] = 1.0;
            for a in 0..p {
                ett[(0, 1 + a)] = u_mean[a];
                ett[(1 + a, 0)] = u_mean[a];
                for b in 0..p {
                    ett[(1 + a, 1 + b)] = uu[(a, b)];
                }
                for b in 0..q {
                    ett[(1 + a, 1 + p + b)] = uv[(a, b)];
                    ett[(1 + p + b, 1 + a)] = uv[(a, b)];
                }
            }
            for a in 0..q {
                ett[(0, 1 + p + a)] = v_mean[a];
                ett[(1 + p + a, 0)] = v_mean[a];
                for b in 0..q {
                    ett[(1 + p + a, 1 + p + b)] = vv[(a, b)];
                }
            }

            self.wls_normal += ett.kronecker(&sd.btb);

            // rhs = vec(B'y * E[t]'), column-major.
            let mut et = DVector::zeros(d_t);
            et[0] = 1.0;
            for a in 0..p {
                et[1 + a] = u_mean[a];
            }
            for a in 0..q {
                et[1 + p + a] = v_mean[a];
            }
            let s = sd.bty.len();
            for col in 0..d_t {
                for row in 0..s {
                    self.wls_rhs[col * s + row] += sd.bty[row] * et[col];
                }
            }
        }
    }

    fn finish(
        self,
        kept: usize,
        loglik: f64,
        loglik_se: f64,
        ess: f64,
        accept_rate: f64,
    ) -> (GroupPosterior, DMatrix<f64>, DVector<f64>, f64) {
        let m = kept.max(1) as f64;
        let posterior = GroupPosterior {
            uu: self.uu / m,
            u_mean: self.u_mean / m,
            vv: self.vv.into_iter().map(|x| x / m).collect(),
            v_mean: self.v_mean.into_iter().map(|x| x / m).collect(),
            eta2: self.eta2 / m,
            eta_mean: self.eta_mean / m,
            xi2: self.xi2.into_iter().map(|x| x / m).collect(),
            xi_mean: self.xi_mean.into_iter().map(|x| x / m).collect(),
            loglik,
            loglik_se,
            ess,
            accept_rate,
        };
        (posterior, self.wls_normal / m, self.wls_rhs / m, self.y_sq)
    }
}

/// Reciprocal importance sampling estimate of `log f(y_i.)` from posterior
/// draws: `1 / f = E_post[q(w) / (L(w) prior(w))]` with `q` a moment-matched
/// Gaussian, shrunk so its tails stay inside the posterior's.
fn reciprocal_importance_loglik(draws: &[DVector<f64>], targets: &[f64]) -> Result<(f64, f64)> {
    let m = draws.len();
    if m < 8 {
        return Err(Error::Diagnostics("too few kept draws for a likelihood estimate".into()));
    }
    let dim = draws[0].len();
    let mut mean = DVector::zeros(dim);
    for w in draws {
        mean += w;
    }
    mean /= m as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for w in draws {
        let d = w - &mean;
        cov += &d * d.transpose();
    }
    cov /= m as f64;
    cov *= 0.7; // lighter tails than the posterior
    let scale = cov.diagonal().iter().sum::<f64>() / dim as f64;
    for i in 0..dim {
        cov[(i, i)] += 1e-10 * (1.0 + scale);
    }
    let chol = cholesky_jittered(&cov)?;
    let logdet = chol_logdet(&chol);

    // c_m = log q(w_m) - log target(w_m); log f = -logmeanexp(c).
    let cs: Vec<f64> = draws
        .iter()
        .zip(targets)
        .map(|(w, &t)| {
            let d = w - &mean;
            let quad = d.dot(&chol.solve(&d));
            let logq = -0.5 * (dim as f64) * LN_2PI - 0.5 * logdet - 0.5 * quad;
            logq - t
        })
        .collect();
    let max_c = cs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = cs.iter().map(|c| (c - max_c).exp()).collect();
    let mean_w: f64 = weights.iter().sum::<f64>() / m as f64;
    let loglik = -(mean_w.ln() + max_c);

    // Batch-means standard error of log(mean weight) to absorb chain
    // autocorrelation.
    let n_batches = (m / 8).clamp(2, 25);
    let batch = m / n_batches;
    let mut bm = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let lo = b * batch;
        let hi = if b + 1 == n_batches { m } else { lo + batch };
        let avg: f64 = weights[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        bm.push(avg);
    }
    let bm_mean: f64 = bm.iter().sum::<f64>() / bm.len() as f64;
    let bm_var: f64 =
        bm.iter().map(|v| (v - bm_mean).powi(2)).sum::<f64>() / (bm.len() - 1) as f64;
    let se = (bm_var / bm.len() as f64).sqrt() / bm_mean.max(1e-300);
    Ok((loglik, se))
}

/// Effective sample size by the batch-means variance ratio.
fn effective_sample_size(chain: &[f64]) -> f64 {
    let m = chain.len();
    if m < 16 {
        return m as f64;
    }
    let mean: f64 = chain.iter().sum::<f64>() / m as f64;
    let var: f64 = chain.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    if var <= 0.0 {
        return m as f64;
    }
    let n_batches = (m / 8).clamp(2, 30);
    let batch = m / n_batches;
    let mut bm = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let lo = b * batch;
        let hi = if b + 1 == n_batches { m } else { lo + batch };
        let avg: f64 = chain[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        bm.push(avg);
    }
    let bm_mean: f64 = bm.iter().sum::<f64>() / bm.len() as f64;
    let bm_var: f64 =
        bm.iter().map(|v| (v - bm_mean).powi(2)).sum::<f64>() / (bm.len() - 1) as f64;
    if bm_var <= 0.0 {
        return m as f64;
    }
    ((m as f64) * var / (batch as f64 * bm_var)).clamp(1.0, m as f64)
}
